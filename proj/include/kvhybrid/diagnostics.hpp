// Attention analysis suite: causal mid visibility, mid-normalized entropy,
// relative-l1 attention error, budget-matched gain between selection-only and
// hybrid decoding, top-K mass curves, completion mass share, per-head
// aggregation with rank-based quartiles, and CSV emission.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/attention.hpp"
#include "kvhybrid/budget.hpp"
#include "kvhybrid/completion_cache.hpp"
#include "kvhybrid/distill.hpp"
#include "kvhybrid/feature_map.hpp"
#include "kvhybrid/mat.hpp"
#include "kvhybrid/numerics.hpp"

namespace kvhybrid {

inline constexpr double rel_l1_eps = 1e-12;

/// Mid tokens a query at causal position j_max can see: mid intersected with
/// {0..j_max}. Ordinary decode (query after the prefill) passes j_max = N-1.
inline std::vector<std::uint32_t> visible_mid(const Partition& part, std::int64_t j_max) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = part.mid_lo(); i < part.mid_hi(); ++i) {
        if (std::int64_t(i) > j_max) break;
        out.push_back(std::uint32_t(i));
    }
    return out;
}

/// Entropy of a probability vector normalized to [0,1] by log(n).
/// A single-element distribution is defined as 0 (maximally concentrated).
inline double normalized_entropy(std::span<const double> p) {
    if (p.empty()) throw std::invalid_argument("normalized_entropy: empty distribution");
    if (p.size() == 1) return 0.0;
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h / std::log(double(p.size()));
}

/// Normalized entropy of the softmax restricted to the visible mid set.
inline double mid_entropy(std::span<const double> q, const AttentionHeadState& state,
                          std::span<const std::uint32_t> mid) {
    if (mid.empty()) throw std::invalid_argument("mid_entropy: empty visible mid set");
    if (mid.size() == 1) return 0.0;
    std::vector<double> s = scores(q, state, mid);
    std::vector<double> p = softmax(s);
    return normalized_entropy(p);
}

/// ||y_hat - y||_1 / (||y||_1 + eps).
inline double rel_l1_error(std::span<const double> y_hat, std::span<const double> y) {
    if (y_hat.size() != y.size()) throw std::invalid_argument("rel_l1_error: length mismatch");
    double num = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) num += std::abs(y_hat[i] - y[i]);
    return num / (l1_norm(y) + rel_l1_eps);
}

/// Cumulative top-K mass of the mid-renormalized weights: C[K] for
/// K = 0..|mid|, non-decreasing from 0 to 1.
inline std::vector<double> mass_curve(std::span<const double> q,
                                      const AttentionHeadState& state,
                                      std::span<const std::uint32_t> mid) {
    if (mid.empty()) throw std::invalid_argument("mass_curve: empty visible mid set");
    std::vector<double> s = scores(q, state, mid);
    std::vector<double> p = softmax(s);
    std::sort(p.begin(), p.end(), std::greater<double>());
    std::vector<double> c(p.size() + 1, 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) c[k + 1] = c[k] + p[k];
    return c;
}

/// Selection-only output: softmax over anchors + top-k mid only, renormalized
/// over that subset. The baseline the completion path is compared against.
inline std::vector<double> selection_only_decode(std::span<const double> q,
                                                 const AttentionHeadState& state,
                                                 const Partition& part, std::size_t k) {
    std::vector<std::uint32_t> sel = topk_select(q, state, part, k);
    std::vector<std::uint32_t> exact_set = part.anchor_indices();
    exact_set.insert(exact_set.end(), sel.begin(), sel.end());
    std::sort(exact_set.begin(), exact_set.end());
    if (exact_set.empty())
        throw std::invalid_argument("selection_only_decode: empty exact set (no anchors, k=0)");
    return selection_only_output(exact_terms(q, state, exact_set));
}

// Per-query diagnostics row.
struct QueryDiag {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    double h_mid = 0.0;
    double e_sel = 0.0;
    double e_hyb = 0.0;
    double rho_z = 0.0;
    std::vector<double> mass_curve;  // length |mid|+1
};

/// All diagnostics for one query at the given retrieval budgets (already
/// clamped to |mid| by the caller).
inline QueryDiag diagnose_query(std::span<const double> q, const AttentionHeadState& state,
                                const Partition& part, const HeadMapPair& maps,
                                const StableCompletionCache& cache, std::size_t k_sel,
                                std::size_t k_hyb) {
    QueryDiag d;
    d.layer = maps.layer;
    d.head = maps.head;
    std::vector<std::uint32_t> mid = part.mid_indices();
    d.h_mid = mid_entropy(q, state, mid);
    d.mass_curve = mass_curve(q, state, mid);

    std::vector<double> y_full = full_attention(q, state);
    d.e_sel = rel_l1_error(selection_only_decode(q, state, part, k_sel), y_full);
    HybridDecodeResult hy = hybrid_decode(q, state, part, k_hyb, maps, cache);
    d.e_hyb = rel_l1_error(hy.y, y_full);
    d.rho_z = hy.rho_z;
    return d;
}

struct GainResult {
    double e_sel = 0.0;   // mean selection-only error at k_topk(n)
    double e_hyb = 0.0;   // mean hybrid error at k_hyb(n)
    double gain = 0.0;    // e_sel - e_hyb
    std::uint64_t k_sel = 0;
    std::uint64_t k_hyb = 0;
};

/// Budget-matched comparison at a token budget of n_tokens: both methods are
/// charged the same token-equivalent reads, so the hybrid path gives up
/// retrieval slots to pay for its cache fetch. Retrieval budgets are clamped
/// to the mid size.
inline GainResult gain_at_budget(std::span<const SyntheticHead> heads, const Partition& part,
                                 const PhiBank& bank, const CacheBank& caches,
                                 std::uint64_t n_tokens, std::uint64_t l_gen) {
    if (heads.empty()) throw std::invalid_argument("gain_at_budget: no heads");
    BudgetConfig bc;
    bc.d_h = bank.d_h;
    bc.d_phi = bank.d_phi;
    bc.n_sink = std::uint32_t(part.n_sink);
    bc.n_tail = std::uint32_t(part.n_tail);
    bc.n = part.n;
    double f = double(n_tokens) / double(part.n);
    GainResult out;
    out.k_sel = std::min<std::uint64_t>(k_topk(bc, f), part.mid_size());
    out.k_hyb = std::min<std::uint64_t>(k_hyb(bc, f, l_gen).k, part.mid_size());

    std::size_t count = 0;
    for (const SyntheticHead& sh : heads) {
        const HeadMapPair& maps = bank.pair(sh.layer, sh.head);
        const StableCompletionCache& cache = caches.cache(sh.layer, sh.head);
        for (std::size_t qi = 0; qi < sh.queries.rows(); ++qi) {
            QueryDiag d = diagnose_query(sh.queries.row(qi), sh.state, part, maps, cache,
                                         std::size_t(out.k_sel), std::size_t(out.k_hyb));
            out.e_sel += d.e_sel;
            out.e_hyb += d.e_hyb;
            ++count;
        }
    }
    out.e_sel /= double(count);
    out.e_hyb /= double(count);
    out.gain = out.e_sel - out.e_hyb;
    return out;
}

// Aggregated per-(layer, head) diagnostics.
struct HeadDiagnostics {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    double h_mid = 0.0;
    double e_sel = 0.0;
    double e_hyb = 0.0;
    double gain = 0.0;
    double rho_z = 0.0;
    std::vector<double> mass_curve;  // mean curve over queries
    int quartile = 0;                // by H_mid rank, 0 = most concentrated
    std::size_t queries = 0;
};

/// Arithmetic means per (layer, head), in (layer, head) order, plus quartile
/// assignment by H_mid rank (ties broken by (layer, head) so the grouping is
/// reproducible).
inline std::vector<HeadDiagnostics> aggregate_heads(std::span<const QueryDiag> rows) {
    if (rows.empty()) throw std::invalid_argument("aggregate_heads: no rows");
    std::vector<HeadDiagnostics> out;
    auto find = [&out](std::uint32_t layer, std::uint32_t head) -> HeadDiagnostics& {
        for (HeadDiagnostics& h : out)
            if (h.layer == layer && h.head == head) return h;
        out.push_back(HeadDiagnostics{layer, head});
        return out.back();
    };
    for (const QueryDiag& r : rows) {
        HeadDiagnostics& h = find(r.layer, r.head);
        h.h_mid += r.h_mid;
        h.e_sel += r.e_sel;
        h.e_hyb += r.e_hyb;
        h.rho_z += r.rho_z;
        if (h.mass_curve.empty()) h.mass_curve.assign(r.mass_curve.size(), 0.0);
        if (h.mass_curve.size() != r.mass_curve.size())
            throw std::invalid_argument("aggregate_heads: mass curves differ in length");
        for (std::size_t i = 0; i < r.mass_curve.size(); ++i) h.mass_curve[i] += r.mass_curve[i];
        ++h.queries;
    }
    for (HeadDiagnostics& h : out) {
        double inv = 1.0 / double(h.queries);
        h.h_mid *= inv;
        h.e_sel *= inv;
        h.e_hyb *= inv;
        h.rho_z *= inv;
        for (double& c : h.mass_curve) c *= inv;
        h.gain = h.e_sel - h.e_hyb;
    }
    std::sort(out.begin(), out.end(), [](const HeadDiagnostics& a, const HeadDiagnostics& b) {
        return a.layer != b.layer ? a.layer < b.layer : a.head < b.head;
    });

    // Quartiles by H_mid rank; stable sizes via floor(4*rank/count).
    std::vector<std::size_t> order(out.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&out](std::size_t a, std::size_t b) {
        if (out[a].h_mid != out[b].h_mid) return out[a].h_mid < out[b].h_mid;
        return out[a].layer != out[b].layer ? out[a].layer < out[b].layer
                                            : out[a].head < out[b].head;
    });
    for (std::size_t rank = 0; rank < order.size(); ++rank)
        out[order[rank]].quartile = int(4 * rank / order.size());
    return out;
}

/// Spearman rank correlation; ties get averaged ranks.
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw std::invalid_argument("spearman: need two equal-length series");
    auto ranks = [](std::span<const double> v) {
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            double avg = 0.5 * double(i + j) + 1.0;  // average 1-based rank of the tie run
            for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> rx = ranks(x), ry = ranks(y);
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= double(rx.size());
    my /= double(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw std::invalid_argument("spearman: a series is constant");
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// CSV emission (all floats as %.17g for byte-stable outputs)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt_g17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
}

}  // namespace detail

inline std::string head_diagnostics_csv(std::span<const HeadDiagnostics> heads) {
    std::string s = "layer,head,h_mid,e_sel,e_hyb,gain,rho_z,quartile,queries\n";
    for (const HeadDiagnostics& h : heads) {
        s += std::to_string(h.layer) + "," + std::to_string(h.head) + "," +
             detail::fmt_g17(h.h_mid) + "," + detail::fmt_g17(h.e_sel) + "," +
             detail::fmt_g17(h.e_hyb) + "," + detail::fmt_g17(h.gain) + "," +
             detail::fmt_g17(h.rho_z) + "," + std::to_string(h.quartile) + "," +
             std::to_string(h.queries) + "\n";
    }
    return s;
}

inline std::string mass_curve_csv(std::span<const HeadDiagnostics> heads) {
    std::string s = "layer,head,k,mass\n";
    for (const HeadDiagnostics& h : heads)
        for (std::size_t k = 0; k < h.mass_curve.size(); ++k)
            s += std::to_string(h.layer) + "," + std::to_string(h.head) + "," +
                 std::to_string(k) + "," + detail::fmt_g17(h.mass_curve[k]) + "\n";
    return s;
}

}  // namespace kvhybrid
