// Feature-map distillation: the teacher-shifted training objective (KL +
// top-band regression + far-region false-positive penalty + one-sided mass
// penalty), its gradient chained through both feature maps, an Adam trainer
// over logged teacher traces, a synthetic trace generator with a diffuseness
// knob, and the trace/state file formats.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/attention.hpp"
#include "kvhybrid/feature_map.hpp"
#include "kvhybrid/io_util.hpp"
#include "kvhybrid/mat.hpp"
#include "kvhybrid/numerics.hpp"
#include "kvhybrid/parallel.hpp"

namespace kvhybrid {

// One logged teacher step: a query against the mid-region support set, with
// the teacher's exact scores.
struct TeacherTrace {
    std::uint32_t layer = 0;
    std::uint32_t q_head = 0;
    std::uint32_t kv_head = 0;
    std::uint32_t n = 0;             // full prefill length the trace came from
    std::vector<double> q;           // d_h
    Mat keys;                        // |U| x d_h, mid region only
    Mat values;                      // |U| x d_h
    std::vector<double> scores;      // |U|, s_j = <q,k_j>/sqrt(d_h)
};

// Objective weights. Total loss:
//   L = lambda_kl * L_KL
//     + (1 - lambda_kl) * (lambda_top L_top + lambda_fp L_fp + lambda_z L_Z)
struct LossConfig {
    double tau = 1.0;         // KL temperature
    double lambda_kl = 0.99;
    double lambda_top = 1.0;
    double lambda_fp = 2.0;
    double lambda_z = 4.0;
    double band = 8.0;        // top-band width: j is "top" iff r_j >= -band
    double knee = 1.0;        // huber knee for all regression terms

    void validate() const {
        if (!(tau > 0.0)) throw std::invalid_argument("loss config: tau must be > 0");
        if (lambda_kl < 0 || lambda_top < 0 || lambda_fp < 0 || lambda_z < 0 || band < 0 ||
            knee <= 0)
            throw std::invalid_argument("loss config: negative weight or band, or knee <= 0");
    }
};

struct ShiftedLogits {
    std::vector<double> r;      // teacher scores minus teacher max
    std::vector<double> r_hat;  // student scores minus the same teacher max
    double b = 0.0;             // the teacher max
};

/// Normalize both score vectors by the teacher maximum, so max_j r_j = 0.
inline ShiftedLogits shifted_logits(std::span<const double> s, std::span<const double> s_hat) {
    if (s.empty()) throw std::invalid_argument("shifted_logits: empty scores");
    if (s.size() != s_hat.size())
        throw std::invalid_argument("shifted_logits: teacher/student length mismatch");
    ShiftedLogits out;
    out.b = *std::max_element(s.begin(), s.end());
    out.r.resize(s.size());
    out.r_hat.resize(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) {
        out.r[j] = s[j] - out.b;
        out.r_hat[j] = s_hat[j] - out.b;
    }
    return out;
}

struct LossParts {
    double total = 0.0;
    double kl = 0.0;
    double top = 0.0;
    double fp = 0.0;
    double z = 0.0;
};

// Shared plumbing for loss value and gradient; everything downstream of the
// shifted logits.
namespace detail {

struct LossEval {
    LossParts parts;
    std::vector<double> grad_s_hat;  // dL/d s_hat, same length as scores
};

inline LossEval eval_loss(std::span<const double> s, std::span<const double> s_hat,
                          const LossConfig& cfg, bool want_grad) {
    cfg.validate();
    ShiftedLogits sl = shifted_logits(s, s_hat);
    std::size_t n = sl.r.size();
    LossEval out;
    if (want_grad) out.grad_s_hat.assign(n, 0.0);

    // Temperature-scaled KL between teacher and student softmaxes.
    std::vector<double> rt(n), rht(n);
    for (std::size_t j = 0; j < n; ++j) {
        rt[j] = sl.r[j] / cfg.tau;
        rht[j] = sl.r_hat[j] / cfg.tau;
    }
    double lse_t = logsumexp(rt), lse_s = logsumexp(rht);
    std::vector<double> p(n), p_hat(n);
    double kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        p[j] = std::exp(rt[j] - lse_t);
        p_hat[j] = std::exp(rht[j] - lse_s);
        double log_ratio = (rt[j] - lse_t) - (rht[j] - lse_s);
        if (p[j] > 0.0) kl += p[j] * log_ratio;
    }
    out.parts.kl = cfg.tau * cfg.tau * kl;
    if (want_grad)
        for (std::size_t j = 0; j < n; ++j)
            out.grad_s_hat[j] += cfg.lambda_kl * cfg.tau * (p_hat[j] - p[j]);

    // Top band: symmetric regression on r_hat - r where the teacher is large.
    // The argmax always has r = 0, so the band is never empty.
    double co = (1.0 - cfg.lambda_kl);
    std::size_t n_top = 0, n_fp = 0;
    for (std::size_t j = 0; j < n; ++j)
        if (sl.r[j] >= -cfg.band) ++n_top; else ++n_fp;
    for (std::size_t j = 0; j < n; ++j) {
        if (sl.r[j] >= -cfg.band) {
            double e = sl.r_hat[j] - sl.r[j];
            out.parts.top += huber(e, cfg.knee) / double(n_top);
            if (want_grad)
                out.grad_s_hat[j] += co * cfg.lambda_top * huber_grad(e, cfg.knee) / double(n_top);
        } else {
            // Far region: penalize only student scores poking above the band.
            double g = std::max(sl.r_hat[j] + cfg.band, 0.0);
            out.parts.fp += huber(g, cfg.knee) / double(n_fp);
            if (want_grad && g > 0.0)
                out.grad_s_hat[j] += co * cfg.lambda_fp * huber_grad(g, cfg.knee) / double(n_fp);
        }
    }

    // One-sided total-mass penalty over the shifted logits.
    double lz_true = logsumexp(sl.r), lz_pred = logsumexp(sl.r_hat);
    double gz = lz_pred - lz_true;
    if (gz > 0.0) {
        out.parts.z = huber(gz, cfg.knee);
        if (want_grad) {
            double c = co * cfg.lambda_z * huber_grad(gz, cfg.knee);
            for (std::size_t j = 0; j < n; ++j)
                out.grad_s_hat[j] += c * std::exp(sl.r_hat[j] - lz_pred);
        }
    }

    out.parts.total = cfg.lambda_kl * out.parts.kl +
                      co * (cfg.lambda_top * out.parts.top + cfg.lambda_fp * out.parts.fp +
                            cfg.lambda_z * out.parts.z);
    return out;
}

}  // namespace detail

/// Loss components for one trace given precomputed student logits.
inline LossParts loss(std::span<const double> s, std::span<const double> s_hat,
                      const LossConfig& cfg) {
    return detail::eval_loss(s, s_hat, cfg, /*want_grad=*/false).parts;
}

/// Student logits for a trace: s_hat_j = surrogate score of (q, k_j).
inline std::vector<double> student_logits(const TeacherTrace& trace, const HeadMapPair& maps) {
    std::vector<double> lq = phi_log_forward(maps.phi_q, trace.q);
    std::vector<double> s_hat(trace.keys.rows());
    for (std::size_t j = 0; j < trace.keys.rows(); ++j)
        s_hat[j] = surrogate_log_score(lq, phi_log_forward(maps.phi_k, trace.keys.row(j)));
    return s_hat;
}

struct TraceGrads {
    FeatureMapParams d_phi_q;
    FeatureMapParams d_phi_k;
    LossParts parts;
};

/// Loss and its gradient w.r.t. every parameter of both maps, chained through
/// the surrogate logits. dL/d(lq[f]) and dL/d(lk_j[f]) share the per-feature
/// softmax of lq + lk_j.
inline TraceGrads loss_backward(const TeacherTrace& trace, const HeadMapPair& maps,
                                const LossConfig& cfg) {
    std::size_t n = trace.keys.rows();
    std::size_t dp = maps.phi_q.d_phi();

    PhiForward fq = phi_forward(maps.phi_q, trace.q);
    std::vector<PhiForward> fk(n);
    std::vector<double> s_hat(n);
    Mat feat_w(n, dp);  // softmax over features of lq + lk_j, per key
    for (std::size_t j = 0; j < n; ++j) {
        fk[j] = phi_forward(maps.phi_k, trace.keys.row(j));
        std::vector<double> terms(dp);
        for (std::size_t f = 0; f < dp; ++f) terms[f] = fq.g2[f] + fk[j].g2[f];
        double lse = logsumexp(terms);
        s_hat[j] = lse;
        for (std::size_t f = 0; f < dp; ++f) feat_w(j, f) = std::exp(terms[f] - lse);
    }

    detail::LossEval ev = detail::eval_loss(trace.scores, s_hat, cfg, /*want_grad=*/true);

    TraceGrads out;
    out.parts = ev.parts;
    out.d_phi_q = zeros_like(maps.phi_q);
    out.d_phi_k = zeros_like(maps.phi_k);

    std::vector<double> up_q(dp, 0.0);
    std::vector<double> up_k(dp);
    for (std::size_t j = 0; j < n; ++j) {
        double g = ev.grad_s_hat[j];
        for (std::size_t f = 0; f < dp; ++f) {
            double gf = g * feat_w(j, f);
            up_q[f] += gf;
            up_k[f] = gf;
        }
        phi_backward(maps.phi_k, trace.keys.row(j), fk[j], up_k, out.d_phi_k);
    }
    phi_backward(maps.phi_q, trace.q, fq, up_q, out.d_phi_q);
    return out;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainConfig {
    LossConfig loss;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t shuffle_seed = 1;
    std::size_t threads = 1;
};

struct TrainReport {
    double initial_loss = 0.0;               // mean loss before any update
    double final_loss = 0.0;                 // mean loss after training
    std::vector<double> epoch_mean_loss;     // running mean per epoch
    std::vector<std::string> warnings;       // heads left untrained, etc.
};

namespace detail {

// Adam state for one map, flat over the fixed parameter order.
struct AdamState {
    std::vector<double> m1;
    std::vector<double> m2;
    std::uint64_t steps = 0;
};

inline void adam_step(FeatureMapParams& p, const FeatureMapParams& g, AdamState& st,
                      const TrainConfig& cfg) {
    if (st.m1.empty()) {
        st.m1.assign(p.param_count(), 0.0);
        st.m2.assign(p.param_count(), 0.0);
    }
    ++st.steps;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(st.steps));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(st.steps));
    // Walk parameters and gradients in lockstep (identical fixed order).
    std::vector<double*> pp;
    pp.reserve(p.param_count());
    for_each_param(p, [&pp](double& x) { pp.push_back(&x); });
    std::vector<const double*> gg;
    gg.reserve(p.param_count());
    for_each_param(g, [&gg](const double& x) { gg.push_back(&x); });
    for (std::size_t i = 0; i < pp.size(); ++i) {
        double grad = *gg[i];
        st.m1[i] = cfg.beta1 * st.m1[i] + (1.0 - cfg.beta1) * grad;
        st.m2[i] = cfg.beta2 * st.m2[i] + (1.0 - cfg.beta2) * grad * grad;
        double mhat = st.m1[i] / bc1;
        double vhat = st.m2[i] / bc2;
        *pp[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
}

inline void accumulate(FeatureMapParams& into, const FeatureMapParams& from) {
    std::vector<double*> a;
    a.reserve(into.param_count());
    for_each_param(into, [&a](double& x) { a.push_back(&x); });
    std::size_t i = 0;
    for_each_param(from, [&a, &i](const double& x) { *a[i++] += x; });
}

inline void scale_params(FeatureMapParams& p, double c) {
    for_each_param(p, [c](double& x) { x *= c; });
}

}  // namespace detail

/// Mean loss over traces with the current bank parameters (no updates).
inline double mean_loss(std::span<const TeacherTrace> traces, const PhiBank& bank,
                        const LossConfig& cfg, std::size_t threads = 1) {
    if (traces.empty()) throw std::invalid_argument("mean_loss: no traces");
    std::vector<double> per_trace(traces.size());
    parallel_for(traces.size(), threads, [&](std::size_t i) {
        const TeacherTrace& t = traces[i];
        HeadMapPair maps;
        maps.phi_q = bank.pair(t.layer, t.q_head).phi_q;
        maps.phi_k = bank.pair(t.layer, t.kv_head).phi_k;
        per_trace[i] = loss(t.scores, student_logits(t, maps), cfg).total;
    });
    double sum = 0.0;
    for (double v : per_trace) sum += v;
    return sum / double(traces.size());
}

/// Adam over shuffled mini-batches. Per-batch gradients are the mean of
/// per-trace gradients; per-trace work may run on worker threads but is
/// reduced in trace order, so results do not depend on the thread count.
inline TrainReport train(std::span<const TeacherTrace> traces, PhiBank& bank,
                         const TrainConfig& cfg) {
    if (traces.empty()) throw std::invalid_argument("train: no traces");
    cfg.loss.validate();
    for (const TeacherTrace& t : traces) {
        if (t.layer >= bank.layers || t.q_head >= bank.heads || t.kv_head >= bank.heads)
            throw std::invalid_argument("train: trace head indices outside the bank");
    }

    TrainReport report;
    // Flag heads the trace set never touches; their parameters stay put.
    {
        std::vector<char> seen(bank.pairs.size(), 0);
        for (const TeacherTrace& t : traces) {
            seen[std::size_t(t.layer) * bank.heads + t.q_head] = 1;
            seen[std::size_t(t.layer) * bank.heads + t.kv_head] = 1;
        }
        for (std::size_t i = 0; i < seen.size(); ++i)
            if (!seen[i])
                report.warnings.push_back("no traces for layer " +
                                          std::to_string(i / bank.heads) + " head " +
                                          std::to_string(i % bank.heads) +
                                          "; its maps are untrained");
    }

    report.initial_loss = mean_loss(traces, bank, cfg.loss, cfg.threads);

    // Adam state per map: [pair index * 2 + side], side 0 = phi_q, 1 = phi_k.
    std::vector<detail::AdamState> opt(bank.pairs.size() * 2);
    std::vector<std::size_t> order(traces.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(cfg.shuffle_seed);
    std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the project RNG so runs are seed-reproducible.
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double epoch_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            std::size_t count = std::min(batch, order.size() - start);
            std::vector<TraceGrads> grads(count);
            parallel_for(count, cfg.threads, [&](std::size_t bi) {
                const TeacherTrace& t = traces[order[start + bi]];
                HeadMapPair maps;
                maps.phi_q = bank.pair(t.layer, t.q_head).phi_q;
                maps.phi_k = bank.pair(t.layer, t.kv_head).phi_k;
                grads[bi] = loss_backward(t, maps, cfg.loss);
            });

            // Reduce in batch order into per-map accumulators.
            std::vector<FeatureMapParams> acc(bank.pairs.size() * 2);
            std::vector<char> touched(bank.pairs.size() * 2, 0);
            for (std::size_t bi = 0; bi < count; ++bi) {
                const TeacherTrace& t = traces[order[start + bi]];
                std::size_t iq = (std::size_t(t.layer) * bank.heads + t.q_head) * 2;
                std::size_t ik = (std::size_t(t.layer) * bank.heads + t.kv_head) * 2 + 1;
                if (!touched[iq]) { acc[iq] = zeros_like(grads[bi].d_phi_q); touched[iq] = 1; }
                if (!touched[ik]) { acc[ik] = zeros_like(grads[bi].d_phi_k); touched[ik] = 1; }
                detail::accumulate(acc[iq], grads[bi].d_phi_q);
                detail::accumulate(acc[ik], grads[bi].d_phi_k);
                epoch_sum += grads[bi].parts.total;
            }
            for (std::size_t s = 0; s < acc.size(); ++s) {
                if (!touched[s]) continue;
                detail::scale_params(acc[s], 1.0 / double(count));
                HeadMapPair& hp = bank.pairs[s / 2];
                detail::adam_step(s % 2 == 0 ? hp.phi_q : hp.phi_k, acc[s], opt[s], cfg);
            }
        }
        report.epoch_mean_loss.push_back(epoch_sum / double(order.size()));
    }

    report.final_loss = mean_loss(traces, bank, cfg.loss, cfg.threads);
    return report;
}

// ---------------------------------------------------------------------------
// Synthetic teacher generation
// ---------------------------------------------------------------------------

// One synthetic (layer, head): a full prefill plus a batch of decode queries.
// Training traces are mid-region projections of these; diagnostics and decode
// replay the queries against the full state. The head index serves as both
// the query head and the KV head.
struct SyntheticHead {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    AttentionHeadState state;
    Mat queries;                // n_queries x d_h
    std::vector<double> betas;  // score-spread knob used for each query
};

struct SynthConfig {
    std::uint32_t layers = 1;
    std::uint32_t heads = 2;
    std::uint32_t d_h = 16;
    std::uint32_t n = 256;           // full prefill length
    std::uint32_t n_sink = 4;
    std::uint32_t n_tail = 16;
    std::uint32_t queries_per_head = 100;
    double beta_min = 0.5;           // diffuse end (mid-entropy near 1)
    double beta_max = 8.0;           // concentrated end

    void validate() const {
        if (layers == 0 || heads == 0 || d_h == 0 || queries_per_head == 0)
            throw std::invalid_argument("synth config: zero dimension or count");
        if (n <= n_sink + n_tail)
            throw std::invalid_argument("synth config: N must exceed n_sink + n_tail");
        if (!(beta_min > 0.0) || beta_max < beta_min)
            throw std::invalid_argument("synth config: need 0 < beta_min <= beta_max");
    }
    Partition partition() const { return make_partition(n, n_sink, n_tail); }
};

namespace detail {

inline void unit_gaussian_row(Rng& rng, std::span<double> row) {
    double norm2 = 0.0;
    for (double& x : row) {
        x = rng.normal();
        norm2 += x * x;
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (double& x : row) x *= inv;
}

}  // namespace detail

/// Unit-norm Gaussian keys/values; each query is a unit direction scaled by
/// beta * d_h, which puts the score standard deviation at ~beta (scores are
/// <q,k>/sqrt(d_h) and <u,k> spreads like 1/sqrt(d_h) for unit vectors).
/// Query betas are log-spaced over [beta_min, beta_max], so every head sweeps
/// diffuse through concentrated attention.
inline std::vector<SyntheticHead> generate_synthetic_heads(Rng& rng, const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SyntheticHead> out;
    out.reserve(std::size_t(cfg.layers) * cfg.heads);
    double log_lo = std::log(cfg.beta_min), log_hi = std::log(cfg.beta_max);
    for (std::uint32_t l = 0; l < cfg.layers; ++l) {
        for (std::uint32_t h = 0; h < cfg.heads; ++h) {
            SyntheticHead sh;
            sh.layer = l;
            sh.head = h;
            sh.state.keys = Mat(cfg.n, cfg.d_h);
            sh.state.values = Mat(cfg.n, cfg.d_h);
            for (std::size_t r = 0; r < cfg.n; ++r) {
                detail::unit_gaussian_row(rng, sh.state.keys.row(r));
                detail::unit_gaussian_row(rng, sh.state.values.row(r));
            }
            sh.queries = Mat(cfg.queries_per_head, cfg.d_h);
            sh.betas.resize(cfg.queries_per_head);
            for (std::size_t qi = 0; qi < cfg.queries_per_head; ++qi) {
                double t = cfg.queries_per_head == 1
                               ? 0.0
                               : double(qi) / double(cfg.queries_per_head - 1);
                sh.betas[qi] = std::exp(log_lo + t * (log_hi - log_lo));
                detail::unit_gaussian_row(rng, sh.queries.row(qi));
                for (double& x : sh.queries.row(qi)) x *= sh.betas[qi] * double(cfg.d_h);
            }
            out.push_back(std::move(sh));
        }
    }
    return out;
}

/// The training projection of one query: support set = mid region, scores
/// recomputed exactly from q and the keys.
inline TeacherTrace project_to_trace(const SyntheticHead& sh, const Partition& part,
                                     std::size_t query_index) {
    TeacherTrace t;
    t.layer = sh.layer;
    t.q_head = sh.head;
    t.kv_head = sh.head;
    t.n = std::uint32_t(sh.state.n());
    std::span<const double> q = sh.queries.row(query_index);
    t.q.assign(q.begin(), q.end());
    std::size_t mid = part.mid_size();
    if (mid == 0) throw std::invalid_argument("project_to_trace: empty mid region");
    t.keys = Mat(mid, sh.state.d_h());
    t.values = Mat(mid, sh.state.d_h());
    for (std::size_t j = 0; j < mid; ++j) {
        std::size_t src = part.mid_lo() + j;
        std::copy_n(sh.state.keys.row(src).data(), sh.state.d_h(), t.keys.row(j).data());
        std::copy_n(sh.state.values.row(src).data(), sh.state.d_h(), t.values.row(j).data());
    }
    std::vector<std::uint32_t> mid_idx = part.mid_indices();
    t.scores = scores(t.q, sh.state, mid_idx);
    return t;
}

inline std::vector<TeacherTrace> traces_from_heads(std::span<const SyntheticHead> heads,
                                                   const Partition& part) {
    std::vector<TeacherTrace> traces;
    for (const SyntheticHead& sh : heads)
        for (std::size_t qi = 0; qi < sh.queries.rows(); ++qi)
            traces.push_back(project_to_trace(sh, part, qi));
    return traces;
}

inline std::vector<TeacherTrace> generate_synthetic_traces(Rng& rng, const SynthConfig& cfg) {
    std::vector<SyntheticHead> heads = generate_synthetic_heads(rng, cfg);
    return traces_from_heads(heads, cfg.partition());
}

// ---------------------------------------------------------------------------
// Trace and state files
// ---------------------------------------------------------------------------

inline constexpr char trace_file_magic[9] = "KVTRACE1";
inline constexpr std::uint32_t trace_file_version = 1;

struct TraceFile {
    std::uint32_t d_h = 0;
    std::uint32_t n_sink = 0;
    std::uint32_t n_tail = 0;
    std::vector<TeacherTrace> traces;
};

inline void save_traces(const std::string& path, const TraceFile& tf) {
    BinWriter w(path);
    w.magic(trace_file_magic);
    w.u32(trace_file_version);
    w.u32(tf.d_h);
    w.u32(tf.n_sink);
    w.u32(tf.n_tail);
    for (const TeacherTrace& t : tf.traces) {
        if (t.q.size() != tf.d_h || t.keys.cols() != tf.d_h || t.values.cols() != tf.d_h ||
            t.keys.rows() != t.values.rows() || t.scores.size() != t.keys.rows())
            throw std::invalid_argument("save_traces: trace shape disagrees with header");
        w.u32(t.layer);
        w.u32(t.q_head);
        w.u32(t.kv_head);
        w.u32(t.n);
        w.u32(std::uint32_t(t.keys.rows()));
        w.f64s(t.q);
        w.f64s(t.keys.data());
        w.f64s(t.values.data());
        w.f64s(t.scores);
    }
    w.close();
}

/// Load and re-validate: the support set must be exactly the mid region
/// implied by the header, and stored scores must be recomputable from (q, k).
inline TraceFile load_traces(const std::string& path) {
    BinReader r(path);
    r.expect_magic(trace_file_magic);
    std::uint32_t version = r.u32();
    if (version != trace_file_version)
        throw format_error(format_fault::bad_version,
                           path + ": unsupported trace version " + std::to_string(version));
    TraceFile tf;
    tf.d_h = r.u32();
    tf.n_sink = r.u32();
    tf.n_tail = r.u32();
    if (tf.d_h == 0) throw format_error(format_fault::dim_mismatch, path + ": d_h is zero");
    while (!r.at_eof()) {
        TeacherTrace t;
        t.layer = r.u32();
        t.q_head = r.u32();
        t.kv_head = r.u32();
        t.n = r.u32();
        std::uint32_t support = r.u32();
        if (t.n < tf.n_sink + tf.n_tail || support != t.n - tf.n_sink - tf.n_tail)
            throw format_error(format_fault::inconsistent,
                               path + ": support set is not the mid region");
        t.q.resize(tf.d_h);
        t.keys = Mat(support, tf.d_h);
        t.values = Mat(support, tf.d_h);
        t.scores.resize(support);
        r.f64s(t.q);
        r.f64s(t.keys.data());
        r.f64s(t.values.data());
        r.f64s(t.scores);
        double inv_sqrt_d = 1.0 / std::sqrt(double(tf.d_h));
        for (std::size_t j = 0; j < support; ++j) {
            double s = dot(t.q, t.keys.row(j)) * inv_sqrt_d;
            if (std::abs(s - t.scores[j]) > 1e-9)
                throw format_error(format_fault::inconsistent,
                                   path + ": stored score disagrees with <q,k>/sqrt(d_h)");
        }
        tf.traces.push_back(std::move(t));
    }
    return tf;
}

inline constexpr char state_file_magic[9] = "KVSTATE1";
inline constexpr std::uint32_t state_file_version = 1;

// Full synthetic states: everything decode and diagnostics need (anchors,
// whole prefill, query batch), which the mid-only trace file cannot carry.
struct StateFile {
    std::uint32_t d_h = 0;
    std::uint32_t n_sink = 0;
    std::uint32_t n_tail = 0;
    std::vector<SyntheticHead> heads;
};

inline void save_states(const std::string& path, const StateFile& sf) {
    BinWriter w(path);
    w.magic(state_file_magic);
    w.u32(state_file_version);
    w.u32(sf.d_h);
    w.u32(sf.n_sink);
    w.u32(sf.n_tail);
    for (const SyntheticHead& sh : sf.heads) {
        if (sh.state.keys.cols() != sf.d_h || sh.queries.cols() != sf.d_h ||
            sh.betas.size() != sh.queries.rows())
            throw std::invalid_argument("save_states: head shape disagrees with header");
        w.u32(sh.layer);
        w.u32(sh.head);
        w.u32(std::uint32_t(sh.state.n()));
        w.u32(std::uint32_t(sh.queries.rows()));
        w.f64s(sh.state.keys.data());
        w.f64s(sh.state.values.data());
        w.f64s(sh.betas);
        w.f64s(sh.queries.data());
    }
    w.close();
}

inline StateFile load_states(const std::string& path) {
    BinReader r(path);
    r.expect_magic(state_file_magic);
    std::uint32_t version = r.u32();
    if (version != state_file_version)
        throw format_error(format_fault::bad_version,
                           path + ": unsupported state version " + std::to_string(version));
    StateFile sf;
    sf.d_h = r.u32();
    sf.n_sink = r.u32();
    sf.n_tail = r.u32();
    if (sf.d_h == 0) throw format_error(format_fault::dim_mismatch, path + ": d_h is zero");
    while (!r.at_eof()) {
        SyntheticHead sh;
        sh.layer = r.u32();
        sh.head = r.u32();
        std::uint32_t n = r.u32();
        std::uint32_t n_q = r.u32();
        if (n < sf.n_sink + sf.n_tail)
            throw format_error(format_fault::inconsistent, path + ": N smaller than anchors");
        if (n_q == 0)
            throw format_error(format_fault::inconsistent, path + ": head without queries");
        sh.state.keys = Mat(n, sf.d_h);
        sh.state.values = Mat(n, sf.d_h);
        sh.betas.resize(n_q);
        sh.queries = Mat(n_q, sf.d_h);
        r.f64s(sh.state.keys.data());
        r.f64s(sh.state.values.data());
        r.f64s(sh.betas);
        r.f64s(sh.queries.data());
        sf.heads.push_back(std::move(sh));
    }
    return sf;
}

/// Inspection-only mirror of the trace file: one JSON object per line, same
/// fields, full float round-trip precision.
inline void traces_to_jsonl(const std::string& path, const TraceFile& tf) {
    std::ofstream out(path);
    if (!out) throw format_error(format_fault::io, path + ": cannot open for writing");
    char buf[32];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    auto arr = [&num](std::span<const double> v) {
        std::string s = "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) s += ",";
            s += num(v[i]);
        }
        return s + "]";
    };
    for (const TeacherTrace& t : tf.traces) {
        out << "{\"layer\":" << t.layer << ",\"q_head\":" << t.q_head
            << ",\"kv_head\":" << t.kv_head << ",\"n\":" << t.n << ",\"n_sink\":" << tf.n_sink
            << ",\"n_tail\":" << tf.n_tail << ",\"q\":" << arr(t.q) << ",\"keys\":"
            << arr(t.keys.data()) << ",\"values\":" << arr(t.values.data())
            << ",\"scores\":" << arr(t.scores) << "}\n";
    }
    if (!out) throw format_error(format_fault::io, path + ": write failed");
}

}  // namespace kvhybrid
