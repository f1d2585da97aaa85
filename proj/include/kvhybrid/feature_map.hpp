// Head-wise positive feature maps: a one-block gated MLP evaluated in the log
// domain, its hand-derived backward pass, paired per-head parameter banks, and
// checkpoint serialization.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/io_util.hpp"
#include "kvhybrid/mat.hpp"
#include "kvhybrid/numerics.hpp"

namespace kvhybrid {

// Parameters of one positive map phi: x in R^{d_h} -> exp(g2) in R^{d_phi},
//   g0 = W_s x + b_s            (stem, d_h -> d_emb)
//   delta = W_2 gelu(W_1 g0 + b_1) + b_2   (square block on d_emb)
//   g1 = g0 + alpha * delta     (gated residual; alpha starts at 0)
//   g2 = W_o g1 + b_o           (output head, d_emb -> d_phi)
// The same struct doubles as the gradient accumulator (identical shapes).
struct FeatureMapParams {
    Mat w_s;                 // d_emb x d_h
    std::vector<double> b_s; // d_emb
    Mat w_1;                 // d_emb x d_emb
    std::vector<double> b_1; // d_emb
    Mat w_2;                 // d_emb x d_emb
    std::vector<double> b_2; // d_emb
    double alpha = 0.0;
    Mat w_o;                 // d_phi x d_emb
    std::vector<double> b_o; // d_phi

    std::size_t d_h() const { return w_s.cols(); }
    std::size_t d_emb() const { return w_s.rows(); }
    std::size_t d_phi() const { return w_o.rows(); }

    void validate() const {
        std::size_t de = w_s.rows();
        if (w_s.cols() == 0 || de == 0 || w_o.rows() == 0)
            throw std::invalid_argument("feature map: zero dimension");
        if (b_s.size() != de || w_1.rows() != de || w_1.cols() != de || b_1.size() != de ||
            w_2.rows() != de || w_2.cols() != de || b_2.size() != de || w_o.cols() != de ||
            b_o.size() != w_o.rows())
            throw std::invalid_argument("feature map: inconsistent parameter shapes");
    }

    std::size_t param_count() const {
        return w_s.data().size() + b_s.size() + w_1.data().size() + b_1.size() +
               w_2.data().size() + b_2.size() + 1 + w_o.data().size() + b_o.size();
    }
};

inline FeatureMapParams zeros_like(const FeatureMapParams& p) {
    FeatureMapParams z;
    z.w_s = Mat(p.w_s.rows(), p.w_s.cols());
    z.b_s.assign(p.b_s.size(), 0.0);
    z.w_1 = Mat(p.w_1.rows(), p.w_1.cols());
    z.b_1.assign(p.b_1.size(), 0.0);
    z.w_2 = Mat(p.w_2.rows(), p.w_2.cols());
    z.b_2.assign(p.b_2.size(), 0.0);
    z.alpha = 0.0;
    z.w_o = Mat(p.w_o.rows(), p.w_o.cols());
    z.b_o.assign(p.b_o.size(), 0.0);
    return z;
}

// Visit every parameter scalar in the fixed serialization order
// (W_s, b_s, W_1, b_1, W_2, b_2, alpha, W_o, b_o). Used by the optimizer,
// finite-difference probes, and checkpoint IO so the order never diverges.
template <typename P, typename F>
void for_each_param(P& p, F&& f) {
    for (auto& x : p.w_s.data()) f(x);
    for (auto& x : p.b_s) f(x);
    for (auto& x : p.w_1.data()) f(x);
    for (auto& x : p.b_1) f(x);
    for (auto& x : p.w_2.data()) f(x);
    for (auto& x : p.b_2) f(x);
    f(p.alpha);
    for (auto& x : p.w_o.data()) f(x);
    for (auto& x : p.b_o) f(x);
}

// Forward intermediates kept for the backward pass.
struct PhiForward {
    std::vector<double> g0;    // d_emb
    std::vector<double> h;     // d_emb, pre-activation
    std::vector<double> act;   // d_emb, gelu(h)
    std::vector<double> delta; // d_emb
    std::vector<double> g1;    // d_emb
    std::vector<double> g2;    // d_phi, = log phi(x)
};

inline PhiForward phi_forward(const FeatureMapParams& p, std::span<const double> x) {
    if (x.size() != p.d_h()) throw std::invalid_argument("phi_forward: input size != d_h");
    std::size_t de = p.d_emb(), dp = p.d_phi();
    PhiForward f;
    f.g0.resize(de);
    for (std::size_t r = 0; r < de; ++r) f.g0[r] = dot(p.w_s.row(r), x) + p.b_s[r];
    f.h.resize(de);
    f.act.resize(de);
    for (std::size_t r = 0; r < de; ++r) {
        f.h[r] = dot(p.w_1.row(r), f.g0) + p.b_1[r];
        f.act[r] = gelu(f.h[r]);
    }
    f.delta.resize(de);
    f.g1.resize(de);
    for (std::size_t r = 0; r < de; ++r) {
        f.delta[r] = dot(p.w_2.row(r), f.act) + p.b_2[r];
        f.g1[r] = f.g0[r] + p.alpha * f.delta[r];
    }
    f.g2.resize(dp);
    for (std::size_t r = 0; r < dp; ++r) f.g2[r] = dot(p.w_o.row(r), f.g1) + p.b_o[r];
    return f;
}

/// log phi(x), i.e. g2. phi(x) = exp(g2) is strictly positive by construction.
inline std::vector<double> phi_log_forward(const FeatureMapParams& p,
                                           std::span<const double> x) {
    return phi_forward(p, x).g2;
}

/// log z(q,k) = logsumexp_f(log phi_q(q)[f] + log phi_k(k)[f]); the surrogate
/// attention logit. Inputs are the two log-feature vectors.
inline double surrogate_log_score(std::span<const double> log_phi_q,
                                  std::span<const double> log_phi_k) {
    if (log_phi_q.size() != log_phi_k.size())
        throw std::invalid_argument("surrogate_log_score: feature size mismatch");
    std::vector<double> terms(log_phi_q.size());
    for (std::size_t f = 0; f < terms.size(); ++f) terms[f] = log_phi_q[f] + log_phi_k[f];
    return logsumexp(terms);
}

/// Reverse-mode pass through one map. `upstream` is dL/dg2; gradients
/// accumulate into `grads` (same shapes as the parameters); returns dL/dx.
inline std::vector<double> phi_backward(const FeatureMapParams& p, std::span<const double> x,
                                        const PhiForward& f, std::span<const double> upstream,
                                        FeatureMapParams& grads) {
    std::size_t de = p.d_emb(), dp = p.d_phi();
    if (upstream.size() != dp) throw std::invalid_argument("phi_backward: upstream size != d_phi");

    // Output head: g2 = W_o g1 + b_o.
    std::vector<double> dg1(de, 0.0);
    for (std::size_t r = 0; r < dp; ++r) {
        double u = upstream[r];
        grads.b_o[r] += u;
        axpy(u, f.g1, grads.w_o.row(r));
        axpy(u, p.w_o.row(r), dg1);
    }

    // Gated residual: g1 = g0 + alpha * delta.
    double dalpha = dot(dg1, f.delta);
    grads.alpha += dalpha;
    std::vector<double> ddelta(de);
    for (std::size_t r = 0; r < de; ++r) ddelta[r] = p.alpha * dg1[r];
    std::vector<double> dg0 = dg1;  // residual branch

    // Block second layer: delta = W_2 act + b_2.
    std::vector<double> dact(de, 0.0);
    for (std::size_t r = 0; r < de; ++r) {
        double u = ddelta[r];
        grads.b_2[r] += u;
        axpy(u, f.act, grads.w_2.row(r));
        axpy(u, p.w_2.row(r), dact);
    }

    // Activation and first layer: h = W_1 g0 + b_1, act = gelu(h).
    for (std::size_t r = 0; r < de; ++r) {
        double dh = dact[r] * gelu_grad(f.h[r]);
        grads.b_1[r] += dh;
        axpy(dh, f.g0, grads.w_1.row(r));
        axpy(dh, p.w_1.row(r), dg0);
    }

    // Stem: g0 = W_s x + b_s.
    std::vector<double> dx(x.size(), 0.0);
    for (std::size_t r = 0; r < de; ++r) {
        double u = dg0[r];
        grads.b_s[r] += u;
        axpy(u, x, grads.w_s.row(r));
        axpy(u, p.w_s.row(r), dx);
    }
    return dx;
}

/// Fresh parameters: weights ~ N(0, 1/fan_in), biases zero, alpha zero so the
/// block starts as an identity bypass and the whole map is affine in x.
inline FeatureMapParams init_params(Rng& rng, std::size_t d_h, std::size_t d_emb,
                                    std::size_t d_phi) {
    if (d_h == 0 || d_emb == 0 || d_phi == 0)
        throw std::invalid_argument("init_params: zero dimension");
    auto fill = [&rng](Mat& m, std::size_t fan_in) {
        double scale = 1.0 / std::sqrt(double(fan_in));
        for (double& x : m.data()) x = rng.normal() * scale;
    };
    FeatureMapParams p;
    p.w_s = Mat(d_emb, d_h);
    fill(p.w_s, d_h);
    p.b_s.assign(d_emb, 0.0);
    p.w_1 = Mat(d_emb, d_emb);
    fill(p.w_1, d_emb);
    p.b_1.assign(d_emb, 0.0);
    p.w_2 = Mat(d_emb, d_emb);
    fill(p.w_2, d_emb);
    p.b_2.assign(d_emb, 0.0);
    p.alpha = 0.0;
    p.w_o = Mat(d_phi, d_emb);
    fill(p.w_o, d_emb);
    p.b_o.assign(d_phi, 0.0);
    return p;
}

// Distinct query-side and key-side maps for one (layer, head) slot.
struct HeadMapPair {
    std::uint32_t layer = 0;
    std::uint32_t head = 0;
    FeatureMapParams phi_q;
    FeatureMapParams phi_k;
};

// All head map pairs of a model, layer-major. The synthetic setting uses one
// head index for both the query head and the KV head it reads.
struct PhiBank {
    std::uint32_t layers = 0;
    std::uint32_t heads = 0;  // heads per layer
    std::uint32_t d_h = 0;
    std::uint32_t d_emb = 0;
    std::uint32_t d_phi = 0;
    std::vector<HeadMapPair> pairs;  // size layers * heads

    HeadMapPair& pair(std::uint32_t layer, std::uint32_t head) {
        return pairs.at(std::size_t(layer) * heads + head);
    }
    const HeadMapPair& pair(std::uint32_t layer, std::uint32_t head) const {
        return pairs.at(std::size_t(layer) * heads + head);
    }
};

inline PhiBank make_phi_bank(Rng& rng, std::uint32_t layers, std::uint32_t heads,
                             std::uint32_t d_h, std::uint32_t d_emb, std::uint32_t d_phi) {
    if (layers == 0 || heads == 0) throw std::invalid_argument("make_phi_bank: zero heads");
    PhiBank bank{layers, heads, d_h, d_emb, d_phi, {}};
    bank.pairs.reserve(std::size_t(layers) * heads);
    for (std::uint32_t l = 0; l < layers; ++l)
        for (std::uint32_t h = 0; h < heads; ++h)
            bank.pairs.push_back(HeadMapPair{l, h, init_params(rng, d_h, d_emb, d_phi),
                                             init_params(rng, d_h, d_emb, d_phi)});
    return bank;
}

inline constexpr char phi_checkpoint_magic[9] = "PHIMAP01";
inline constexpr std::uint32_t phi_checkpoint_version = 1;

namespace detail {

inline void write_map(BinWriter& w, const FeatureMapParams& p) {
    for_each_param(p, [&w](const double& x) { w.f64(x); });
}

inline FeatureMapParams read_map(BinReader& r, std::uint32_t d_h, std::uint32_t d_emb,
                                 std::uint32_t d_phi) {
    FeatureMapParams p;
    p.w_s = Mat(d_emb, d_h);
    p.b_s.resize(d_emb);
    p.w_1 = Mat(d_emb, d_emb);
    p.b_1.resize(d_emb);
    p.w_2 = Mat(d_emb, d_emb);
    p.b_2.resize(d_emb);
    p.w_o = Mat(d_phi, d_emb);
    p.b_o.resize(d_phi);
    for_each_param(p, [&r](double& x) { x = r.f64(); });
    return p;
}

}  // namespace detail

/// Binary checkpoint of a whole bank; pairs layer-major, phi_q before phi_k.
inline void save_checkpoint(const std::string& path, const PhiBank& bank) {
    if (bank.pairs.size() != std::size_t(bank.layers) * bank.heads)
        throw std::invalid_argument("save_checkpoint: pair count != layers*heads");
    BinWriter w(path);
    w.magic(phi_checkpoint_magic);
    w.u32(phi_checkpoint_version);
    w.u32(bank.layers);
    w.u32(bank.heads);
    w.u32(bank.d_h);
    w.u32(bank.d_emb);
    w.u32(bank.d_phi);
    for (const HeadMapPair& hp : bank.pairs) {
        detail::write_map(w, hp.phi_q);
        detail::write_map(w, hp.phi_k);
    }
    w.close();
}

inline PhiBank load_checkpoint(const std::string& path) {
    BinReader r(path);
    r.expect_magic(phi_checkpoint_magic);
    std::uint32_t version = r.u32();
    if (version != phi_checkpoint_version)
        throw format_error(format_fault::bad_version,
                           path + ": unsupported checkpoint version " + std::to_string(version));
    PhiBank bank;
    bank.layers = r.u32();
    bank.heads = r.u32();
    bank.d_h = r.u32();
    bank.d_emb = r.u32();
    bank.d_phi = r.u32();
    if (bank.layers == 0 || bank.heads == 0 || bank.d_h == 0 || bank.d_emb == 0 ||
        bank.d_phi == 0)
        throw format_error(format_fault::dim_mismatch, path + ": zero dimension in header");
    bank.pairs.reserve(std::size_t(bank.layers) * bank.heads);
    for (std::uint32_t l = 0; l < bank.layers; ++l) {
        for (std::uint32_t h = 0; h < bank.heads; ++h) {
            HeadMapPair hp;
            hp.layer = l;
            hp.head = h;
            hp.phi_q = detail::read_map(r, bank.d_h, bank.d_emb, bank.d_phi);
            hp.phi_k = detail::read_map(r, bank.d_h, bank.d_emb, bank.d_phi);
            bank.pairs.push_back(std::move(hp));
        }
    }
    if (!r.at_eof())
        throw format_error(format_fault::dim_mismatch,
                           path + ": file longer than header-declared contents");
    return bank;
}

inline bool operator==(const FeatureMapParams& a, const FeatureMapParams& b) {
    bool eq = a.alpha == b.alpha;
    eq = eq && a.w_s == b.w_s && a.b_s == b.b_s && a.w_1 == b.w_1 && a.b_1 == b.b_1;
    eq = eq && a.w_2 == b.w_2 && a.b_2 == b.b_2 && a.w_o == b.w_o && a.b_o == b.b_o;
    return eq;
}

}  // namespace kvhybrid
