// Shared numerical primitives: stable reductions, activations, robust
// penalties, and a reproducible random source. Everything here computes in
// 64-bit; all functions are pure.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace kvhybrid {

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(v))) via max-shift. Entries may be -inf; returns -inf iff all are.
inline double logsumexp(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("logsumexp: empty input");
    double m = neg_inf;
    for (double v : values)
        if (v > m) m = v;
    if (m == neg_inf) return neg_inf;
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - m);
    return m + std::log(acc);
}

inline std::vector<double> softmax(std::span<const double> values) {
    if (values.empty()) throw std::invalid_argument("softmax: empty input");
    double m = neg_inf;
    for (double v : values)
        if (v > m) m = v;
    std::vector<double> out(values.size());
    double z = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = std::exp(values[i] - m);
        z += out[i];
    }
    for (double& p : out) p /= z;
    return out;
}

/// Huber penalty: quadratic inside |x| <= delta, linear outside.
inline double huber(double x, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("huber: delta must be > 0");
    double a = std::abs(x);
    return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

/// d/dx huber(x, delta)
inline double huber_grad(double x, double delta) {
    if (delta <= 0.0) throw std::invalid_argument("huber: delta must be > 0");
    if (x > delta) return delta;
    if (x < -delta) return -delta;
    return x;
}

/// Exact erf-based GELU: x * Phi(x).
inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double gelu_grad(double x) {
    double phi_cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    double phi_pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return phi_cdf + x * phi_pdf;
}

// SplitMix64: counter-based generator (Vigna's reference constants).
// Statistical quality is secondary here; bit-reproducibility across runs and
// platforms is the requirement, which the fixed integer recurrence gives us.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (two uniforms per pair, cached).
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

private:
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace kvhybrid
