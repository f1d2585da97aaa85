// Exact softmax attention over a prefill segment, sink/tail/mid partition,
// exhaustive Top-K selection, and max-shifted exact-term accumulation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "kvhybrid/mat.hpp"
#include "kvhybrid/numerics.hpp"

namespace kvhybrid {

// Keys and values for one (layer, KV-head): N x d_h each.
struct AttentionHeadState {
    Mat keys;
    Mat values;

    std::size_t n() const { return keys.rows(); }
    std::size_t d_h() const { return keys.cols(); }

    void validate() const {
        if (keys.rows() != values.rows() || keys.cols() != values.cols())
            throw std::invalid_argument("head state: keys/values shape mismatch");
        if (keys.rows() == 0) throw std::invalid_argument("head state: empty prefill");
    }
};

// Sink/tail anchors plus the contiguous mid region between them.
struct Partition {
    std::size_t n = 0;
    std::size_t n_sink = 0;
    std::size_t n_tail = 0;

    std::size_t mid_lo() const { return n_sink; }
    std::size_t mid_hi() const { return n - n_tail; }  // one past last mid index
    std::size_t mid_size() const { return mid_hi() - mid_lo(); }
    bool in_mid(std::size_t i) const { return i >= mid_lo() && i < mid_hi(); }

    std::vector<std::uint32_t> anchor_indices() const {
        std::vector<std::uint32_t> a;
        a.reserve(n_sink + n_tail);
        for (std::size_t i = 0; i < n_sink; ++i) a.push_back(std::uint32_t(i));
        for (std::size_t i = n - n_tail; i < n; ++i) a.push_back(std::uint32_t(i));
        return a;
    }
    std::vector<std::uint32_t> mid_indices() const {
        std::vector<std::uint32_t> m;
        m.reserve(mid_size());
        for (std::size_t i = mid_lo(); i < mid_hi(); ++i) m.push_back(std::uint32_t(i));
        return m;
    }
};

inline Partition make_partition(std::size_t n, std::size_t n_sink, std::size_t n_tail) {
    if (n_sink + n_tail > n)
        throw std::invalid_argument("make_partition: n_sink + n_tail > N");
    return Partition{n, n_sink, n_tail};
}

/// s_i = <q, k_i> / sqrt(d_h) for each requested index, in index order.
inline std::vector<double> scores(std::span<const double> q, const AttentionHeadState& state,
                                  std::span<const std::uint32_t> indices) {
    double inv_sqrt_d = 1.0 / std::sqrt(double(state.d_h()));
    std::vector<double> s;
    s.reserve(indices.size());
    for (std::uint32_t i : indices) {
        if (i >= state.n()) throw std::out_of_range("scores: index out of range");
        s.push_back(dot(q, state.keys.row(i)) * inv_sqrt_d);
    }
    return s;
}

// Unnormalized attention sums over a loaded index set, held in max-shifted
// form: Z = exp(shift) * z_tilde, N = exp(shift) * num_tilde. The shifted form
// stays finite for scores far beyond exp's overflow point; the raw accessors
// are only meaningful at moderate magnitudes.
struct ExactTerms {
    double shift = neg_inf;          // max score over the set; -inf for empty terms
    double z_tilde = 0.0;            // sum exp(s_i - shift), in [1, |E|]
    std::vector<double> num_tilde;   // sum exp(s_i - shift) * v_i

    bool empty() const { return shift == neg_inf; }
    double log_z() const { return empty() ? neg_inf : shift + std::log(z_tilde); }
    double z() const { return empty() ? 0.0 : std::exp(shift) * z_tilde; }
    std::vector<double> numerator() const {
        std::vector<double> n(num_tilde);
        double s = empty() ? 0.0 : std::exp(shift);
        for (double& x : n) x *= s;
        return n;
    }
};

inline ExactTerms empty_exact_terms(std::size_t d_h) {
    ExactTerms t;
    t.num_tilde.assign(d_h, 0.0);
    return t;
}

inline ExactTerms exact_terms(std::span<const double> q, const AttentionHeadState& state,
                              std::span<const std::uint32_t> index_set) {
    if (index_set.empty()) throw std::invalid_argument("exact_terms: empty index set");
    std::vector<double> s = scores(q, state, index_set);
    ExactTerms t;
    t.shift = *std::max_element(s.begin(), s.end());
    t.num_tilde.assign(state.d_h(), 0.0);
    for (std::size_t j = 0; j < index_set.size(); ++j) {
        double w = std::exp(s[j] - t.shift);
        t.z_tilde += w;
        axpy(w, state.values.row(index_set[j]), t.num_tilde);
    }
    return t;
}

/// Subset-normalized output y_sel = N_E / Z_E (the shift cancels).
inline std::vector<double> selection_only_output(const ExactTerms& t) {
    if (t.empty() || t.z_tilde <= 0.0)
        throw std::invalid_argument("selection_only_output: Z_E is zero");
    std::vector<double> y(t.num_tilde);
    for (double& x : y) x /= t.z_tilde;
    return y;
}

/// Exact attention over the full prefill.
inline std::vector<double> full_attention(std::span<const double> q,
                                          const AttentionHeadState& state) {
    state.validate();
    std::vector<std::uint32_t> all(state.n());
    std::iota(all.begin(), all.end(), 0u);
    return selection_only_output(exact_terms(q, state, all));
}

/// Top-K mid indices by score; ties broken toward the smaller index. Returned
/// ascending by index.
inline std::vector<std::uint32_t> topk_select(std::span<const double> q,
                                              const AttentionHeadState& state,
                                              const Partition& part, std::size_t k) {
    if (k > part.mid_size()) throw std::invalid_argument("topk_select: K exceeds |mid|");
    if (k == 0) return {};
    std::vector<std::uint32_t> mid = part.mid_indices();
    std::vector<double> s = scores(q, state, mid);
    std::vector<std::size_t> order(mid.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (s[a] != s[b]) return s[a] > s[b];
                          return mid[a] < mid[b];
                      });
    std::vector<std::uint32_t> sel(k);
    for (std::size_t j = 0; j < k; ++j) sel[j] = mid[order[j]];
    std::sort(sel.begin(), sel.end());
    return sel;
}

// All terms of the subset-bias identity
//   y_full - y_sel = Z_R / (Z_E + Z_R) * (y_R - y_sel)
// for a proper subset E; the remainder R is everything else.
struct SubsetBias {
    std::vector<double> y_full;
    std::vector<double> y_sel;
    double z_e = 0.0;
    double z_r = 0.0;
    std::vector<double> y_r;               // zero vector when R is empty
    std::vector<double> gap;               // y_full - y_sel
    std::vector<double> reconstructed_gap; // right-hand side of the identity
    double residual = 0.0;                 // max |gap - reconstructed_gap|
};

inline SubsetBias subset_bias_decomposition(std::span<const double> q,
                                            const AttentionHeadState& state,
                                            std::span<const std::uint32_t> subset) {
    if (subset.empty()) throw std::invalid_argument("subset_bias: empty subset");
    std::vector<char> in_e(state.n(), 0);
    for (std::uint32_t i : subset) {
        if (i >= state.n()) throw std::out_of_range("subset_bias: index out of range");
        in_e[i] = 1;
    }
    std::vector<std::uint32_t> rest;
    for (std::uint32_t i = 0; i < state.n(); ++i)
        if (!in_e[i]) rest.push_back(i);

    SubsetBias out;
    ExactTerms te = exact_terms(q, state, subset);
    out.y_full = full_attention(q, state);
    out.y_sel = selection_only_output(te);
    out.z_e = te.z();

    std::size_t d = state.d_h();
    out.y_r.assign(d, 0.0);
    out.gap.resize(d);
    out.reconstructed_gap.assign(d, 0.0);
    for (std::size_t c = 0; c < d; ++c) out.gap[c] = out.y_full[c] - out.y_sel[c];

    if (!rest.empty()) {
        ExactTerms tr = exact_terms(q, state, rest);
        out.z_r = tr.z();
        out.y_r = selection_only_output(tr);
        double share = out.z_r / (out.z_e + out.z_r);
        for (std::size_t c = 0; c < d; ++c)
            out.reconstructed_gap[c] = share * (out.y_r[c] - out.y_sel[c]);
    }
    for (std::size_t c = 0; c < d; ++c) {
        double r = std::abs(out.gap[c] - out.reconstructed_gap[c]);
        if (r > out.residual) out.residual = r;
    }
    return out;
}

}  // namespace kvhybrid
