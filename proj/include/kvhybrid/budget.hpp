// Token-equivalent KV-read accounting: exact byte costs per token, the
// one-time completion-cache fetch expressed in token-equivalents (kept as an
// exact rational so floors and ceilings land where the accounting rules put
// them), retrieval budgets for selection-only and hybrid decoding, and
// small-budget feasibility.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace kvhybrid {

struct BudgetConfig {
    std::uint32_t d_h = 128;
    std::uint32_t d_phi = 128;
    std::uint32_t b_dtype = 2;  // bytes per stored element
    std::uint32_t n_sink = 4;
    std::uint32_t n_tail = 16;
    std::uint64_t n = 16384;    // prefill length
    std::uint64_t l_gen = 1;    // generation length the fetch amortizes over

    void validate() const {
        if (d_h == 0 || d_phi == 0 || n == 0)
            throw std::invalid_argument("budget config: zero dimension");
        if (b_dtype != 1 && b_dtype != 2 && b_dtype != 4 && b_dtype != 8)
            throw std::invalid_argument("budget config: b_dtype must be 1, 2, 4, or 8");
        if (std::uint64_t(n_sink) + n_tail > n)
            throw std::invalid_argument("budget config: anchors exceed the prefill length");
        if (l_gen < 1) throw std::invalid_argument("budget config: L_gen must be >= 1");
    }
};

// Designated L_gen value meaning the infinite-generation limit: the one-time
// fetch amortizes to exactly zero. Accepted by the ops below, never stored in
// a config.
inline constexpr std::uint64_t l_gen_limit = 0;

/// Bytes to read one exact KV token: key + value, d_h elements each.
inline std::uint64_t token_bytes(const BudgetConfig& cfg) {
    return 2ull * cfg.d_h * cfg.b_dtype;
}

/// Bytes of the completion cache: T~ (d_phi x d_h) plus the m and u~ vectors.
inline std::uint64_t phi_cache_bytes(const BudgetConfig& cfg) {
    return (std::uint64_t(cfg.d_phi) * cfg.d_h + 2ull * cfg.d_phi) * cfg.b_dtype;
}

// Exact positive rational with a double view.
struct Rational {
    std::int64_t num = 0;
    std::int64_t den = 1;
    double value() const { return double(num) / double(den); }
};

/// One-time cache fetch in token-equivalents, exact:
/// R = B_cache / B_tok = d_phi (d_h + 2) / (2 d_h) = d_phi/2 + d_phi/d_h.
inline Rational phi_fetch_ratio(const BudgetConfig& cfg) {
    return Rational{std::int64_t(cfg.d_phi) * (std::int64_t(cfg.d_h) + 2),
                    2 * std::int64_t(cfg.d_h)};
}

inline double phi_fetch_token_equiv(const BudgetConfig& cfg) {
    return phi_fetch_ratio(cfg).value();
}

/// Worst-case (first decode step) fetch cost in whole tokens: ceil(R).
inline std::uint64_t n_off(const BudgetConfig& cfg) {
    Rational r = phi_fetch_ratio(cfg);
    return std::uint64_t((r.num + r.den - 1) / r.den);
}

/// Token budget from a prefill fraction: n(f) = ceil(f * N). Products that
/// are mathematically integral are snapped before the ceiling so binary
/// representation error cannot add a token.
inline std::uint64_t budget_tokens(std::uint64_t n, double f) {
    if (!(f >= 0.0)) throw std::invalid_argument("budget_tokens: fraction must be >= 0");
    double x = f * double(n);
    double r = std::round(x);
    if (std::abs(x - r) < 1e-9 * std::max(1.0, std::abs(x))) x = r;
    return std::uint64_t(std::ceil(x));
}

/// Selection-only retrieval budget: whatever remains after the anchors.
inline std::uint64_t k_topk(const BudgetConfig& cfg, double f) {
    std::uint64_t nf = budget_tokens(cfg.n, f);
    std::uint64_t anchors = std::uint64_t(cfg.n_sink) + cfg.n_tail;
    return nf > anchors ? nf - anchors : 0;
}

struct HybridBudget {
    std::uint64_t k = 0;
    bool feasible = true;  // false: budget cannot cover anchors + first-step fetch
};

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if (a % b != 0 && ((a < 0) != (b < 0))) --q;
    return q;
}

}  // namespace detail

/// Hybrid retrieval budget with the fetch amortized over l_gen steps:
/// k = max(0, floor(n(f) - n_sink - n_tail - R/l_gen)), evaluated in exact
/// integer arithmetic. Feasibility is judged at l_gen = 1 (worst case): the
/// budget must cover the anchors plus the whole-token fetch ceil(R).
/// l_gen may be l_gen_limit (0) for the infinite-generation limit, where the
/// amortized term is exactly zero and k equals the selection-only budget.
inline HybridBudget k_hyb(const BudgetConfig& cfg, double f, std::uint64_t l_gen) {
    std::uint64_t nf = budget_tokens(cfg.n, f);
    std::uint64_t anchors = std::uint64_t(cfg.n_sink) + cfg.n_tail;
    HybridBudget out;
    out.feasible = nf >= anchors + n_off(cfg);
    if (l_gen == l_gen_limit) {
        out.k = k_topk(cfg, f);
        return out;
    }
    Rational r = phi_fetch_ratio(cfg);
    // floor(nf - anchors - num/(den*l)) = floor(((nf-anchors)*den*l - num) / (den*l))
    std::int64_t den_l = r.den * std::int64_t(l_gen);
    std::int64_t numer = (std::int64_t(nf) - std::int64_t(anchors)) * den_l - r.num;
    std::int64_t k = detail::floor_div(numer, den_l);
    out.k = k > 0 ? std::uint64_t(k) : 0;
    return out;
}

/// Amortized token-equivalent reads per decode step at retrieval budget k:
/// n_sink + n_tail + k + R/l_gen. l_gen_limit drops the fetch term entirely.
inline double per_step_reads(const BudgetConfig& cfg, std::uint64_t k, std::uint64_t l_gen) {
    double exact = double(cfg.n_sink) + double(cfg.n_tail) + double(k);
    if (l_gen == l_gen_limit) return exact;
    return exact + phi_fetch_token_equiv(cfg) / double(l_gen);
}

// One row of the budget table the CLI prints.
struct BudgetRow {
    double f = 0.0;
    std::uint64_t n = 0;
    std::uint64_t k_topk = 0;
    std::uint64_t k_hyb = 0;
    bool feasible = true;
};

inline std::vector<BudgetRow> budget_table(const BudgetConfig& cfg,
                                           const std::vector<double>& fractions,
                                           std::uint64_t l_gen) {
    cfg.validate();
    std::vector<BudgetRow> rows;
    rows.reserve(fractions.size());
    for (double f : fractions) {
        BudgetRow row;
        row.f = f;
        row.n = budget_tokens(cfg.n, f);
        row.k_topk = k_topk(cfg, f);
        HybridBudget hb = k_hyb(cfg, f, l_gen);
        row.k_hyb = hb.k;
        row.feasible = hb.feasible;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace kvhybrid
