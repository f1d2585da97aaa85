// Fixed-size mid-region summaries for approximate attention completion:
// natural (S, u) and max-shifted stable (m, u~, T~) forms, one-way subtraction
// of retrieved tokens at the shared shift, stable log-domain evaluation of the
// completion mass, and the single-normalization hybrid merge.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kvhybrid/attention.hpp"
#include "kvhybrid/feature_map.hpp"
#include "kvhybrid/io_util.hpp"
#include "kvhybrid/mat.hpp"
#include "kvhybrid/numerics.hpp"

namespace kvhybrid {

// Clamp floor applied to subtracted feature masses. Small enough that a
// clamped feature contributes ~e^-690 of the completion weight, large enough
// to keep log() finite.
inline constexpr double u_clamp_eps = 1e-300;

// Direct-summation form: S[f,:] = sum_i phi_k(k_i)[f] * v_i, u[f] = sum_i
// phi_k(k_i)[f]. Overflows once log-features pass ~709; kept as the oracle
// counterpart of the stable form and for equivalence tests.
struct NaturalCache {
    Mat s;                  // d_phi x d_h
    std::vector<double> u;  // d_phi
};

// Max-shifted form: m[f] is the feature-wise max log-feature over the summary
// set, u_tilde[f] = sum exp(log phi_k - m[f]) <= count, T_tilde[f,:] the
// matching value sum. Natural form is recovered as u = exp(m)*u_tilde,
// S = exp(m)*T_tilde. Also reused for remainders after subtraction, where
// `count` is the number of tokens still summarized.
struct StableCompletionCache {
    std::vector<double> m;        // d_phi
    std::vector<double> u_tilde;  // d_phi
    Mat t_tilde;                  // d_phi x d_h
    std::size_t count = 0;        // tokens summarized (0 = designated empty)

    bool empty() const { return count == 0; }
    std::size_t d_phi() const { return m.size(); }
    std::size_t d_h() const { return t_tilde.cols(); }
};

// Estimated remainder mass and normalized completion output.
struct CompletionTerms {
    double log_z_r = neg_inf;       // log of estimated remainder mass; -inf = empty
    std::vector<double> y_r_hat;    // normalized completion output (zeros when empty)

    bool empty() const { return log_z_r == neg_inf; }
    double z_r() const { return empty() ? 0.0 : std::exp(log_z_r); }
};

inline StableCompletionCache empty_stable_cache(std::size_t d_phi, std::size_t d_h) {
    StableCompletionCache c;
    c.m.assign(d_phi, neg_inf);
    c.u_tilde.assign(d_phi, 0.0);
    c.t_tilde = Mat(d_phi, d_h);
    c.count = 0;
    return c;
}

/// Stable summary over an arbitrary token set, with the shift taken as the
/// feature-wise max over that set.
inline StableCompletionCache build_stable_cache_over(const FeatureMapParams& phi_k,
                                                     const AttentionHeadState& state,
                                                     std::span<const std::uint32_t> indices) {
    std::size_t dp = phi_k.d_phi(), dh = state.d_h();
    if (indices.empty()) return empty_stable_cache(dp, dh);

    // Pass 1: log-features per token, tracking the feature-wise max.
    std::vector<std::vector<double>> lk(indices.size());
    std::vector<double> m(dp, neg_inf);
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] >= state.n())
            throw std::out_of_range("build_stable_cache: index out of range");
        lk[j] = phi_log_forward(phi_k, state.keys.row(indices[j]));
        for (std::size_t f = 0; f < dp; ++f) m[f] = std::max(m[f], lk[j][f]);
    }
    // Pass 2: shifted accumulation; every weight is <= 1 by construction.
    StableCompletionCache c;
    c.m = std::move(m);
    c.u_tilde.assign(dp, 0.0);
    c.t_tilde = Mat(dp, dh);
    c.count = indices.size();
    for (std::size_t j = 0; j < indices.size(); ++j) {
        std::span<const double> v = state.values.row(indices[j]);
        for (std::size_t f = 0; f < dp; ++f) {
            double w = std::exp(lk[j][f] - c.m[f]);
            c.u_tilde[f] += w;
            axpy(w, v, c.t_tilde.row(f));
        }
    }
    return c;
}

/// Same summary accumulated at a caller-supplied shift instead of the set's
/// own max (subtraction oracle support: remainders live at the full-set shift).
inline StableCompletionCache build_stable_cache_over_at_shift(
    const FeatureMapParams& phi_k, const AttentionHeadState& state,
    std::span<const std::uint32_t> indices, std::span<const double> shift) {
    std::size_t dp = phi_k.d_phi(), dh = state.d_h();
    if (shift.size() != dp)
        throw std::invalid_argument("build_stable_cache_over_at_shift: shift size != d_phi");
    StableCompletionCache c;
    c.m.assign(shift.begin(), shift.end());
    c.u_tilde.assign(dp, 0.0);
    c.t_tilde = Mat(dp, dh);
    c.count = indices.size();
    for (std::uint32_t i : indices) {
        if (i >= state.n())
            throw std::out_of_range("build_stable_cache_over_at_shift: index out of range");
        std::vector<double> lk = phi_log_forward(phi_k, state.keys.row(i));
        std::span<const double> v = state.values.row(i);
        for (std::size_t f = 0; f < dp; ++f) {
            double w = std::exp(lk[f] - c.m[f]);
            c.u_tilde[f] += w;
            axpy(w, v, c.t_tilde.row(f));
        }
    }
    return c;
}

/// The prefill-time summary: built over the partition's mid region only.
inline StableCompletionCache build_stable_cache(const FeatureMapParams& phi_k,
                                                const AttentionHeadState& state,
                                                const Partition& part) {
    return build_stable_cache_over(phi_k, state, part.mid_indices());
}

/// Natural-form counterpart by direct summation (no shifting). Oracle only.
inline NaturalCache build_natural_cache_over(const FeatureMapParams& phi_k,
                                             const AttentionHeadState& state,
                                             std::span<const std::uint32_t> indices) {
    std::size_t dp = phi_k.d_phi(), dh = state.d_h();
    NaturalCache c;
    c.s = Mat(dp, dh);
    c.u.assign(dp, 0.0);
    for (std::uint32_t i : indices) {
        std::vector<double> lk = phi_log_forward(phi_k, state.keys.row(i));
        std::span<const double> v = state.values.row(i);
        for (std::size_t f = 0; f < dp; ++f) {
            double w = std::exp(lk[f]);
            c.u[f] += w;
            axpy(w, v, c.s.row(f));
        }
    }
    return c;
}

/// Natural form recovered from the stable form: u = exp(m)*u~, S = exp(m)*T~.
inline NaturalCache to_natural(const StableCompletionCache& c) {
    NaturalCache n;
    n.s = Mat(c.d_phi(), c.d_h());
    n.u.assign(c.d_phi(), 0.0);
    for (std::size_t f = 0; f < c.d_phi(); ++f) {
        double s = c.empty() ? 0.0 : std::exp(c.m[f]);
        n.u[f] = s * c.u_tilde[f];
        for (std::size_t col = 0; col < c.d_h(); ++col) n.s(f, col) = s * c.t_tilde(f, col);
    }
    return n;
}

/// Remove the retrieved tokens' contributions at the cache's own shift. The
/// shift m is never recomputed. Each feature mass is floored at u_clamp_eps;
/// retrieving the whole summarized set yields the designated empty remainder
/// so the completion mass is exactly zero downstream.
inline StableCompletionCache subtract_retrieved(const StableCompletionCache& cache,
                                                const FeatureMapParams& phi_k,
                                                const AttentionHeadState& state,
                                                const Partition& part,
                                                std::span<const std::uint32_t> retrieved) {
    if (retrieved.size() > cache.count)
        throw std::invalid_argument("subtract_retrieved: more tokens than the cache holds");
    std::size_t dp = cache.d_phi();
    StableCompletionCache r;
    r.m = cache.m;
    r.u_tilde = cache.u_tilde;
    r.t_tilde = cache.t_tilde;
    r.count = cache.count - retrieved.size();
    if (r.count == 0) return empty_stable_cache(dp, cache.d_h());

    for (std::uint32_t i : retrieved) {
        if (!part.in_mid(i))
            throw std::invalid_argument("subtract_retrieved: index outside the mid region");
        std::vector<double> lk = phi_log_forward(phi_k, state.keys.row(i));
        std::span<const double> v = state.values.row(i);
        for (std::size_t f = 0; f < dp; ++f) {
            double w = std::exp(lk[f] - r.m[f]);
            r.u_tilde[f] -= w;
            axpy(-w, v, r.t_tilde.row(f));
        }
    }
    for (std::size_t f = 0; f < dp; ++f) r.u_tilde[f] = std::max(r.u_tilde[f], u_clamp_eps);
    return r;
}

/// Stable evaluation of the completion mass and output:
///   a_f = lq[f] + m[f] + log u~_R[f];  log Z_R = LSE(a);  w = softmax(a);
///   y = sum_f w_f * T~_R[f,:] / u~_R[f].
inline CompletionTerms completion_terms(const FeatureMapParams& phi_q,
                                        std::span<const double> q,
                                        const StableCompletionCache& remainder) {
    std::size_t dh = remainder.d_h();
    CompletionTerms out;
    out.y_r_hat.assign(dh, 0.0);
    if (remainder.empty()) return out;  // Z_R = 0 exactly

    std::vector<double> lq = phi_log_forward(phi_q, q);
    std::size_t dp = remainder.d_phi();
    if (lq.size() != dp) throw std::invalid_argument("completion_terms: d_phi mismatch");
    std::vector<double> a(dp);
    for (std::size_t f = 0; f < dp; ++f)
        a[f] = lq[f] + remainder.m[f] + std::log(remainder.u_tilde[f]);
    out.log_z_r = logsumexp(a);
    std::vector<double> w = softmax(a);
    for (std::size_t f = 0; f < dp; ++f) {
        double inv_u = w[f] / remainder.u_tilde[f];
        axpy(inv_u, remainder.t_tilde.row(f), out.y_r_hat);
    }
    return out;
}

// Merged output plus the completion share of the total mass.
struct HybridOutput {
    std::vector<double> y;
    double rho_z = 0.0;  // Z_R / (Z_E + Z_R), in [0, 1]
};

/// Single-normalization merge, evaluated at the shared shift
/// c = max(log Z_E, log Z_R) so either mass may dwarf the other without
/// overflow: y = (e^{lzE-c} y_sel + e^{lzR-c} y_R) / (e^{lzE-c} + e^{lzR-c}).
inline HybridOutput hybrid_merge(const ExactTerms& exact, const CompletionTerms& completion) {
    bool have_e = !exact.empty();
    bool have_r = !completion.empty();
    if (!have_e && !have_r)
        throw std::invalid_argument("hybrid_merge: both masses are zero");
    std::size_t dh = have_e ? exact.num_tilde.size() : completion.y_r_hat.size();
    if (have_e && have_r && completion.y_r_hat.size() != dh)
        throw std::invalid_argument("hybrid_merge: output dimension mismatch");

    double lz_e = have_e ? exact.log_z() : neg_inf;
    double lz_r = have_r ? completion.log_z_r : neg_inf;
    double c = std::max(lz_e, lz_r);
    double w_e = have_e ? std::exp(lz_e - c) : 0.0;
    double w_r = have_r ? std::exp(lz_r - c) : 0.0;
    double denom = w_e + w_r;

    HybridOutput out;
    out.rho_z = w_r / denom;
    out.y.assign(dh, 0.0);
    if (have_e) {
        std::vector<double> y_sel = selection_only_output(exact);
        axpy(w_e / denom, y_sel, out.y);
    }
    if (have_r) axpy(w_r / denom, completion.y_r_hat, out.y);
    return out;
}

// Everything a single hybrid decode step produces, kept for diagnostics.
struct HybridDecodeResult {
    std::vector<double> y;                 // merged output
    double rho_z = 0.0;                    // completion share of total mass
    std::vector<std::uint32_t> retrieved;  // Top-K mid indices
    double log_z_e = neg_inf;
    double log_z_r = neg_inf;
};

/// End-to-end hybrid step for one query: Top-K over the mid region, exact
/// terms over anchors + retrieved, subtraction at the shared shift, stable
/// completion, merge.
inline HybridDecodeResult hybrid_decode(std::span<const double> q,
                                        const AttentionHeadState& state, const Partition& part,
                                        std::size_t k, const HeadMapPair& maps,
                                        const StableCompletionCache& cache) {
    HybridDecodeResult out;
    out.retrieved = topk_select(q, state, part, k);

    std::vector<std::uint32_t> exact_set = part.anchor_indices();
    exact_set.insert(exact_set.end(), out.retrieved.begin(), out.retrieved.end());
    std::sort(exact_set.begin(), exact_set.end());
    ExactTerms te = exact_set.empty() ? empty_exact_terms(state.d_h())
                                      : exact_terms(q, state, exact_set);

    StableCompletionCache remainder =
        subtract_retrieved(cache, maps.phi_k, state, part, out.retrieved);
    CompletionTerms tc = completion_terms(maps.phi_q, q, remainder);

    HybridOutput merged = hybrid_merge(te, tc);
    out.y = std::move(merged.y);
    out.rho_z = merged.rho_z;
    out.log_z_e = te.log_z();
    out.log_z_r = tc.log_z_r;
    return out;
}

inline constexpr char cache_file_magic[9] = "PHICACH1";
inline constexpr std::uint32_t cache_file_version = 1;

// On-disk bank of per-(layer, KV-head) caches with uniform dimensions.
struct CacheBank {
    std::uint32_t layers = 0;
    std::uint32_t kv_heads = 0;
    std::uint32_t d_phi = 0;
    std::uint32_t d_h = 0;
    std::uint32_t mid_size = 0;
    std::vector<StableCompletionCache> caches;  // layer-major, size layers*kv_heads

    StableCompletionCache& cache(std::uint32_t layer, std::uint32_t head) {
        return caches.at(std::size_t(layer) * kv_heads + head);
    }
    const StableCompletionCache& cache(std::uint32_t layer, std::uint32_t head) const {
        return caches.at(std::size_t(layer) * kv_heads + head);
    }
};

inline void cache_serialize(const std::string& path, const CacheBank& bank) {
    if (bank.caches.size() != std::size_t(bank.layers) * bank.kv_heads)
        throw std::invalid_argument("cache_serialize: cache count != layers*kv_heads");
    BinWriter w(path);
    w.magic(cache_file_magic);
    w.u32(cache_file_version);
    w.u32(bank.layers);
    w.u32(bank.kv_heads);
    w.u32(bank.d_phi);
    w.u32(bank.d_h);
    w.u32(bank.mid_size);
    for (const StableCompletionCache& c : bank.caches) {
        if (c.d_phi() != bank.d_phi || c.d_h() != bank.d_h || c.count != bank.mid_size)
            throw std::invalid_argument("cache_serialize: cache dims disagree with bank header");
        w.f64s(c.m);
        w.f64s(c.u_tilde);
        w.f64s(c.t_tilde.data());
    }
    w.close();
}

inline CacheBank cache_deserialize(const std::string& path) {
    BinReader r(path);
    r.expect_magic(cache_file_magic);
    std::uint32_t version = r.u32();
    if (version != cache_file_version)
        throw format_error(format_fault::bad_version,
                           path + ": unsupported cache version " + std::to_string(version));
    CacheBank bank;
    bank.layers = r.u32();
    bank.kv_heads = r.u32();
    bank.d_phi = r.u32();
    bank.d_h = r.u32();
    bank.mid_size = r.u32();
    if (bank.layers == 0 || bank.kv_heads == 0 || bank.d_phi == 0 || bank.d_h == 0)
        throw format_error(format_fault::dim_mismatch, path + ": zero dimension in header");
    std::size_t n = std::size_t(bank.layers) * bank.kv_heads;
    bank.caches.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        StableCompletionCache c;
        c.m.resize(bank.d_phi);
        c.u_tilde.resize(bank.d_phi);
        c.t_tilde = Mat(bank.d_phi, bank.d_h);
        c.count = bank.mid_size;
        r.f64s(c.m);
        r.f64s(c.u_tilde);
        r.f64s(c.t_tilde.data());
        bank.caches.push_back(std::move(c));
    }
    if (!r.at_eof())
        throw format_error(format_fault::dim_mismatch,
                           path + ": file longer than header-declared contents");
    return bank;
}

}  // namespace kvhybrid
