#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include "kvhybrid/completion_cache.hpp"
#include "kvhybrid/diagnostics.hpp"

using namespace kvhybrid;
namespace fs = std::filesystem;

namespace {

AttentionHeadState random_state(Rng& rng, std::size_t n, std::size_t d) {
    AttentionHeadState st;
    st.keys = Mat(n, d);
    st.values = Mat(n, d);
    for (auto& x : st.keys.data()) x = rng.normal();
    for (auto& x : st.values.data()) x = rng.normal();
    return st;
}

std::vector<double> random_query(Rng& rng, std::size_t d, double scale) {
    std::vector<double> q(d);
    for (auto& x : q) x = scale * rng.normal();
    return q;
}

// A constant feature map phi(x) = exp(b_o): all weights zero.
FeatureMapParams constant_map(std::size_t d_h, std::size_t d_emb,
                              const std::vector<double>& b_o) {
    FeatureMapParams p;
    p.w_s = Mat(d_emb, d_h);
    p.b_s.assign(d_emb, 0.0);
    p.w_1 = Mat(d_emb, d_emb);
    p.b_1.assign(d_emb, 0.0);
    p.w_2 = Mat(d_emb, d_emb);
    p.b_2.assign(d_emb, 0.0);
    p.w_o = Mat(b_o.size(), d_emb);
    p.b_o = b_o;
    return p;
}

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1e-300, std::abs(a), std::abs(b)});
}

}  // namespace

TEST_CASE("stable cache agrees with the natural form at moderate magnitudes", "[cache]") {
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 8 + rng.below(24);
        std::size_t d = 2 + rng.below(4);
        AttentionHeadState st = random_state(rng, n, d);
        FeatureMapParams phi_k = init_params(rng, d, 2 * d, 4);
        Partition part = make_partition(n, 2, 2);

        StableCompletionCache stable = build_stable_cache(phi_k, st, part);
        NaturalCache natural =
            build_natural_cache_over(phi_k, st, part.mid_indices());
        NaturalCache from_stable = to_natural(stable);

        REQUIRE(stable.count == part.mid_size());
        for (std::size_t f = 0; f < 4; ++f) {
            CHECK(rel_err(from_stable.u[f], natural.u[f]) < 1e-12);
            for (std::size_t c = 0; c < d; ++c)
                CHECK(rel_err(from_stable.s(f, c), natural.s(f, c)) < 1e-12);
        }
    }
}

TEST_CASE("completion matches a natural-form evaluation at moderate magnitudes",
          "[cache]") {
    Rng rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 10 + rng.below(20);
        std::size_t d = 3;
        AttentionHeadState st = random_state(rng, n, d);
        FeatureMapParams phi_q = init_params(rng, d, 6, 5);
        FeatureMapParams phi_k = init_params(rng, d, 6, 5);
        Partition part = make_partition(n, 2, 3);
        std::vector<double> q = random_query(rng, d, 1.0);

        StableCompletionCache cache = build_stable_cache(phi_k, st, part);
        CompletionTerms ct = completion_terms(phi_q, q, cache);

        // Natural-path oracle: Z = <phi_q, u>, y = phi_q^T S / Z.
        NaturalCache nat = build_natural_cache_over(phi_k, st, part.mid_indices());
        std::vector<double> lq = phi_log_forward(phi_q, q);
        double z = 0.0;
        std::vector<double> y(d, 0.0);
        for (std::size_t f = 0; f < 5; ++f) {
            double pq = std::exp(lq[f]);
            z += pq * nat.u[f];
            axpy(pq, nat.s.row(f), y);
        }
        for (double& v : y) v /= z;

        CHECK(rel_err(std::exp(ct.log_z_r), z) < 1e-9);
        for (std::size_t c = 0; c < d; ++c) CHECK(rel_err(ct.y_r_hat[c], y[c]) < 1e-9);
    }
}

TEST_CASE("stable path stays finite where the natural form overflows", "[cache]") {
    Rng rng(3);
    std::size_t d = 2;
    AttentionHeadState st = random_state(rng, 12, d);
    for (double level : {600.0, -600.0}) {
        std::vector<double> b_o{level, level * 0.9};
        FeatureMapParams phi_k = constant_map(d, 3, b_o);
        FeatureMapParams phi_q = constant_map(d, 3, std::vector<double>{level, level});
        Partition part = make_partition(12, 2, 2);

        NaturalCache nat = build_natural_cache_over(phi_k, st, part.mid_indices());
        std::vector<double> q = random_query(rng, d, 1.0);

        // The natural evaluation multiplies exp(+-600) by exp(+-600): the mass
        // estimate overflows to inf (or underflows to exactly zero).
        std::vector<double> lq = phi_log_forward(phi_q, q);
        double z_nat = 0.0;
        for (std::size_t f = 0; f < lq.size(); ++f) z_nat += std::exp(lq[f]) * nat.u[f];
        CHECK((!std::isfinite(z_nat) || z_nat == 0.0));

        StableCompletionCache cache = build_stable_cache(phi_k, st, part);
        CompletionTerms ct = completion_terms(phi_q, q, cache);
        CHECK(std::isfinite(ct.log_z_r));
        for (double v : ct.y_r_hat) CHECK(std::isfinite(v));
    }
}

TEST_CASE("subtraction equals a direct build over the remainder", "[cache]") {
    Rng rng(4);
    for (int rep = 0; rep < 25; ++rep) {
        std::size_t n = 10 + rng.below(30);
        std::size_t d = 2 + rng.below(3);
        AttentionHeadState st = random_state(rng, n, d);
        FeatureMapParams phi_k = init_params(rng, d, 2 * d, 4);
        Partition part = make_partition(n, 2, 3);
        std::vector<std::uint32_t> mid = part.mid_indices();

        // Subset sizes: empty, one, half, all.
        std::size_t sizes[4] = {0, 1, mid.size() / 2, mid.size()};
        for (std::size_t sz : sizes) {
            std::vector<std::uint32_t> pool = mid;
            std::vector<std::uint32_t> retrieved;
            for (std::size_t j = 0; j < sz; ++j) {
                std::size_t pick = rng.below(pool.size());
                retrieved.push_back(pool[pick]);
                pool.erase(pool.begin() + std::ptrdiff_t(pick));
            }
            std::sort(retrieved.begin(), retrieved.end());

            StableCompletionCache cache = build_stable_cache(phi_k, st, part);
            StableCompletionCache rem =
                subtract_retrieved(cache, phi_k, st, part, retrieved);

            if (sz == mid.size()) {
                CHECK(rem.empty());
                continue;
            }
            std::vector<std::uint32_t> rest;
            for (std::uint32_t i : mid)
                if (!std::binary_search(retrieved.begin(), retrieved.end(), i))
                    rest.push_back(i);
            StableCompletionCache direct =
                build_stable_cache_over_at_shift(phi_k, st, rest, cache.m);

            REQUIRE(rem.count == direct.count);
            for (std::size_t f = 0; f < 4; ++f) {
                CHECK(rem.m[f] == direct.m[f]);  // shared shift is never recomputed
                if (direct.u_tilde[f] > 1e-250)  // clamp floor aside
                    CHECK(rel_err(rem.u_tilde[f], direct.u_tilde[f]) < 1e-10);
                for (std::size_t c = 0; c < d; ++c) {
                    double a = rem.t_tilde(f, c), b = direct.t_tilde(f, c);
                    CHECK(std::abs(a - b) <
                          1e-10 * std::max({1.0, std::abs(a), std::abs(b)}));
                }
            }
        }
    }
}

TEST_CASE("subtracting everything yields the designated empty cache", "[cache]") {
    Rng rng(5);
    AttentionHeadState st = random_state(rng, 9, 2);
    FeatureMapParams phi_k = init_params(rng, 2, 4, 3);
    Partition part = make_partition(9, 2, 2);
    StableCompletionCache cache = build_stable_cache(phi_k, st, part);
    StableCompletionCache rem =
        subtract_retrieved(cache, phi_k, st, part, part.mid_indices());
    CHECK(rem.empty());

    FeatureMapParams phi_q = init_params(rng, 2, 4, 3);
    std::vector<double> q = random_query(rng, 2, 1.0);
    CompletionTerms ct = completion_terms(phi_q, q, rem);
    CHECK(ct.empty());
    CHECK(ct.z_r() == 0.0);  // exactly zero, not merely tiny
    for (double v : ct.y_r_hat) CHECK(v == 0.0);
}

TEST_CASE("subtraction validates its inputs", "[cache]") {
    Rng rng(6);
    AttentionHeadState st = random_state(rng, 9, 2);
    FeatureMapParams phi_k = init_params(rng, 2, 4, 3);
    Partition part = make_partition(9, 2, 2);
    StableCompletionCache cache = build_stable_cache(phi_k, st, part);

    std::vector<std::uint32_t> anchor{0};  // not a mid index
    CHECK_THROWS_AS(subtract_retrieved(cache, phi_k, st, part, anchor),
                    std::invalid_argument);

    StableCompletionCache empty = empty_stable_cache(3, 2);
    std::vector<std::uint32_t> one{2};
    CHECK_THROWS_AS(subtract_retrieved(empty, phi_k, st, part, one),
                    std::invalid_argument);
}

TEST_CASE("constant feature maps give the closed-form completion", "[cache]") {
    Rng rng(7);
    std::size_t d = 3, n = 14;
    AttentionHeadState st = random_state(rng, n, d);
    std::vector<double> bk{0.3, -0.7};
    std::vector<double> bq{0.1, 0.5};
    FeatureMapParams phi_k = constant_map(d, 2, bk);
    FeatureMapParams phi_q = constant_map(d, 2, bq);
    Partition part = make_partition(n, 3, 3);
    std::vector<std::uint32_t> mid = part.mid_indices();

    StableCompletionCache cache = build_stable_cache(phi_k, st, part);
    std::vector<double> q = random_query(rng, d, 1.0);
    CompletionTerms ct = completion_terms(phi_q, q, cache);

    // Z_R = |mid| * sum_f exp(bq_f + bk_f); y = mean of mid values.
    double z_expect = 0.0;
    for (std::size_t f = 0; f < 2; ++f) z_expect += std::exp(bq[f] + bk[f]);
    z_expect *= double(mid.size());
    CHECK(rel_err(std::exp(ct.log_z_r), z_expect) < 1e-12);

    std::vector<double> mean_v(d, 0.0);
    for (std::uint32_t i : mid) axpy(1.0 / double(mid.size()), st.values.row(i), mean_v);
    for (std::size_t c = 0; c < d; ++c) CHECK(rel_err(ct.y_r_hat[c], mean_v[c]) < 1e-12);
}

TEST_CASE("merge weights exact and completed mass at a shared shift", "[cache]") {
    ExactTerms ex;
    ex.shift = 0.0;
    ex.z_tilde = 2.0;  // Z_E = 2
    ex.num_tilde = {2.0, 4.0};

    CompletionTerms ct;
    ct.log_z_r = std::log(6.0);  // Z_R = 6
    ct.y_r_hat = {1.0, -1.0};

    HybridOutput out = hybrid_merge(ex, ct);
    CHECK_THAT(out.rho_z, Catch::Matchers::WithinRel(6.0 / 8.0, 1e-15));
    // y = (Z_E * y_sel + Z_R * y_r) / (Z_E + Z_R), y_sel = {1, 2}
    CHECK_THAT(out.y[0], Catch::Matchers::WithinRel((2.0 * 1.0 + 6.0 * 1.0) / 8.0, 1e-15));
    CHECK_THAT(out.y[1], Catch::Matchers::WithinRel((2.0 * 2.0 - 6.0) / 8.0, 1e-15));
}

TEST_CASE("merge survives wildly imbalanced masses", "[cache]") {
    ExactTerms ex;
    ex.shift = 700.0;  // Z_E would overflow naively
    ex.z_tilde = 1.5;
    ex.num_tilde = {1.5};

    CompletionTerms tiny;
    tiny.log_z_r = -700.0;
    tiny.y_r_hat = {-5.0};
    HybridOutput out = hybrid_merge(ex, tiny);
    CHECK(std::isfinite(out.y[0]));
    CHECK_THAT(out.y[0], Catch::Matchers::WithinRel(1.0, 1e-12));
    CHECK(out.rho_z < 1e-300);

    CompletionTerms huge;
    huge.log_z_r = 1400.0;
    huge.y_r_hat = {-5.0};
    out = hybrid_merge(ex, huge);
    CHECK_THAT(out.y[0], Catch::Matchers::WithinRel(-5.0, 1e-12));
    CHECK(out.rho_z > 1.0 - 1e-12);
}

TEST_CASE("merge edge cases: one side empty, both empty", "[cache]") {
    CompletionTerms ct;
    ct.log_z_r = std::log(2.0);
    ct.y_r_hat = {3.0, 4.0};
    HybridOutput only_r = hybrid_merge(empty_exact_terms(2), ct);
    CHECK(only_r.rho_z == 1.0);
    CHECK(only_r.y == std::vector<double>{3.0, 4.0});

    ExactTerms ex;
    ex.shift = 0.0;
    ex.z_tilde = 1.0;
    ex.num_tilde = {5.0, 6.0};
    CompletionTerms none;
    none.y_r_hat = {0.0, 0.0};
    HybridOutput only_e = hybrid_merge(ex, none);
    CHECK(only_e.rho_z == 0.0);
    CHECK(only_e.y == std::vector<double>{5.0, 6.0});

    CHECK_THROWS_AS(hybrid_merge(empty_exact_terms(2), none), std::invalid_argument);
}

TEST_CASE("hybrid decode with exhaustive retrieval equals full attention", "[cache]") {
    Rng rng(8);
    for (int rep = 0; rep < 10; ++rep) {
        std::size_t n = 10 + rng.below(30);
        std::size_t d = 2 + rng.below(4);
        AttentionHeadState st = random_state(rng, n, d);
        Partition part = make_partition(n, 2, 3);
        HeadMapPair maps{0, 0, init_params(rng, d, 2 * d, 4), init_params(rng, d, 2 * d, 4)};
        StableCompletionCache cache = build_stable_cache(maps.phi_k, st, part);
        std::vector<double> q = random_query(rng, d, 2.0);

        HybridDecodeResult res = hybrid_decode(q, st, part, part.mid_size(), maps, cache);
        std::vector<double> y_full = full_attention(q, st);
        CHECK(rel_l1_error(res.y, y_full) < 1e-12);
        CHECK(res.rho_z == 0.0);  // remainder is designated empty
        CHECK(res.log_z_r == neg_inf);
    }
}

TEST_CASE("hybrid decode at k=0 blends anchors with pure completion", "[cache]") {
    Rng rng(9);
    std::size_t n = 16, d = 3;
    AttentionHeadState st = random_state(rng, n, d);
    Partition part = make_partition(n, 2, 2);
    HeadMapPair maps{0, 0, init_params(rng, d, 6, 4), init_params(rng, d, 6, 4)};
    StableCompletionCache cache = build_stable_cache(maps.phi_k, st, part);
    std::vector<double> q = random_query(rng, d, 1.0);

    HybridDecodeResult res = hybrid_decode(q, st, part, 0, maps, cache);
    CHECK(res.retrieved.empty());
    CHECK(res.rho_z > 0.0);
    CHECK(res.rho_z < 1.0);
    ExactTerms anchors = exact_terms(q, st, part.anchor_indices());
    CompletionTerms ct = completion_terms(maps.phi_q, q, cache);
    HybridOutput expect = hybrid_merge(anchors, ct);
    for (std::size_t c = 0; c < d; ++c)
        CHECK_THAT(res.y[c], Catch::Matchers::WithinAbs(expect.y[c], 1e-15));
}

TEST_CASE("cache bank serializes and reloads exactly", "[cache]") {
    Rng rng(10);
    std::size_t d = 3;
    Partition part = make_partition(12, 2, 2);
    CacheBank bank;
    bank.layers = 2;
    bank.kv_heads = 2;
    bank.d_phi = 4;
    bank.d_h = std::uint32_t(d);
    bank.mid_size = std::uint32_t(part.mid_size());
    for (int i = 0; i < 4; ++i) {
        AttentionHeadState st = random_state(rng, 12, d);
        FeatureMapParams phi_k = init_params(rng, d, 6, 4);
        bank.caches.push_back(build_stable_cache(phi_k, st, part));
    }

    fs::path p = fs::temp_directory_path() / "kvhybrid_test_cache.bin";
    cache_serialize(p.string(), bank);
    CacheBank back = cache_deserialize(p.string());
    CHECK(back.layers == bank.layers);
    CHECK(back.kv_heads == bank.kv_heads);
    CHECK(back.mid_size == bank.mid_size);
    REQUIRE(back.caches.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back.caches[i].count == bank.caches[i].count);
        CHECK(back.caches[i].m == bank.caches[i].m);
        CHECK(back.caches[i].u_tilde == bank.caches[i].u_tilde);
        CHECK(back.caches[i].t_tilde == bank.caches[i].t_tilde);
    }
    fs::remove(p);
}

TEST_CASE("empty caches survive the file round-trip", "[cache]") {
    CacheBank bank;
    bank.layers = 1;
    bank.kv_heads = 1;
    bank.d_phi = 3;
    bank.d_h = 2;
    bank.mid_size = 0;
    bank.caches.push_back(empty_stable_cache(3, 2));

    fs::path p = fs::temp_directory_path() / "kvhybrid_test_cache_empty.bin";
    cache_serialize(p.string(), bank);
    CacheBank back = cache_deserialize(p.string());
    REQUIRE(back.caches.size() == 1);
    CHECK(back.caches[0].empty());
    CHECK(back.caches[0].m == std::vector<double>(3, neg_inf));
    fs::remove(p);
}
