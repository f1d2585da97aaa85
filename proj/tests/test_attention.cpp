#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kvhybrid/attention.hpp"
#include "kvhybrid/numerics.hpp"

using namespace kvhybrid;

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

}  // namespace

TEST_CASE("partition splits sink, mid and tail", "[attention]") {
    Partition p = make_partition(10, 2, 3);
    CHECK(p.mid_lo() == 2);
    CHECK(p.mid_hi() == 7);
    CHECK(p.mid_size() == 5);
    CHECK(p.anchor_indices() == std::vector<std::uint32_t>{0, 1, 7, 8, 9});
    CHECK(p.mid_indices() == std::vector<std::uint32_t>{2, 3, 4, 5, 6});
    CHECK(p.in_mid(2));
    CHECK_FALSE(p.in_mid(7));

    CHECK(make_partition(5, 2, 3).mid_size() == 0);  // empty mid is legal
    CHECK_THROWS_AS(make_partition(4, 2, 3), std::invalid_argument);
}

TEST_CASE("scores are scaled dot products", "[attention]") {
    Rng rng(1);
    AttentionHeadState st = random_state(rng, 6, 4);
    std::vector<double> q = random_query(rng, 4, 1.0);
    std::vector<std::uint32_t> idx{0, 3, 5};
    std::vector<double> s = scores(q, st, idx);
    for (std::size_t j = 0; j < idx.size(); ++j)
        CHECK_THAT(s[j],
                   Catch::Matchers::WithinRel(dot(q, st.keys.row(idx[j])) / 2.0, 1e-14));
    std::vector<std::uint32_t> bad{6};
    CHECK_THROWS_AS(scores(q, st, bad), std::out_of_range);
}

TEST_CASE("full attention equals a direct softmax evaluation", "[attention]") {
    Rng rng(2);
    AttentionHeadState st = random_state(rng, 12, 3);
    std::vector<double> q = random_query(rng, 3, 2.0);

    std::vector<std::uint32_t> all(12);
    std::iota(all.begin(), all.end(), 0u);
    std::vector<double> s = scores(q, st, all);
    std::vector<double> w = softmax(s);
    std::vector<double> expect(3, 0.0);
    for (std::size_t i = 0; i < 12; ++i) axpy(w[i], st.values.row(i), expect);

    std::vector<double> got = full_attention(q, st);
    for (std::size_t c = 0; c < 3; ++c)
        CHECK_THAT(got[c], Catch::Matchers::WithinAbs(expect[c], 1e-14));
}

TEST_CASE("exact terms expose consistent mass and numerator", "[attention]") {
    Rng rng(3);
    AttentionHeadState st = random_state(rng, 8, 4);
    std::vector<double> q = random_query(rng, 4, 1.5);
    std::vector<std::uint32_t> idx{1, 4, 6};
    ExactTerms t = exact_terms(q, st, idx);
    std::vector<double> s = scores(q, st, idx);

    double z = 0.0;
    for (double v : s) z += std::exp(v);
    CHECK_THAT(t.z(), Catch::Matchers::WithinRel(z, 1e-12));
    CHECK_THAT(t.log_z(), Catch::Matchers::WithinRel(std::log(z), 1e-12));
    CHECK(t.shift == *std::max_element(s.begin(), s.end()));
    CHECK(t.z_tilde >= 1.0);
    CHECK(t.z_tilde <= double(idx.size()));

    std::vector<double> y = selection_only_output(t);
    std::vector<double> w = softmax(s);
    std::vector<double> expect(4, 0.0);
    for (std::size_t j = 0; j < idx.size(); ++j) axpy(w[j], st.values.row(idx[j]), expect);
    for (std::size_t c = 0; c < 4; ++c)
        CHECK_THAT(y[c], Catch::Matchers::WithinAbs(expect[c], 1e-14));

    CHECK_THROWS_AS(exact_terms(q, st, std::vector<std::uint32_t>{}), std::invalid_argument);
    ExactTerms e = empty_exact_terms(4);
    CHECK(e.empty());
    CHECK(e.z() == 0.0);
    CHECK(e.log_z() == neg_inf);
}

TEST_CASE("exact terms stay finite at huge score magnitudes", "[attention]") {
    AttentionHeadState st;
    st.keys = Mat(2, 1);
    st.values = Mat(2, 1);
    st.keys(0, 0) = 800.0;
    st.keys(1, 0) = 750.0;
    st.values(0, 0) = 1.0;
    st.values(1, 0) = -1.0;
    std::vector<double> q{1.0};
    std::vector<std::uint32_t> idx{0, 1};
    ExactTerms t = exact_terms(q, st, idx);
    CHECK(std::isfinite(t.log_z()));
    std::vector<double> y = selection_only_output(t);
    CHECK(std::isfinite(y[0]));
    CHECK_THAT(y[0], Catch::Matchers::WithinAbs(1.0, 1e-12));  // first token dominates
}

TEST_CASE("topk selects by score with index tie-breaks, ascending output", "[attention]") {
    AttentionHeadState st;
    st.keys = Mat(7, 1);
    st.values = Mat(7, 1);
    // mid = indices 1..5 with scores 3, 5, 5, 2, 5
    double key_vals[7] = {0.0, 3.0, 5.0, 5.0, 2.0, 5.0, 0.0};
    for (std::size_t i = 0; i < 7; ++i) st.keys(i, 0) = key_vals[i];
    std::vector<double> q{1.0};
    Partition part = make_partition(7, 1, 1);

    CHECK(topk_select(q, st, part, 0).empty());
    // Ties on score 5 resolve to smaller indices: 2, 3 then 5.
    CHECK(topk_select(q, st, part, 2) == std::vector<std::uint32_t>{2, 3});
    CHECK(topk_select(q, st, part, 3) == std::vector<std::uint32_t>{2, 3, 5});
    CHECK(topk_select(q, st, part, 4) == std::vector<std::uint32_t>{1, 2, 3, 5});
    CHECK(topk_select(q, st, part, 5) == std::vector<std::uint32_t>{1, 2, 3, 4, 5});
    CHECK_THROWS_AS(topk_select(q, st, part, 6), std::invalid_argument);
}

TEST_CASE("topk matches a brute-force stable sort on random data", "[attention]") {
    Rng rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        std::size_t n = 10 + rng.below(40);
        AttentionHeadState st = random_state(rng, n, 5);
        Partition part = make_partition(n, 2, 3);
        std::vector<double> q = random_query(rng, 5, 2.0);
        std::size_t k = rng.below(part.mid_size() + 1);

        std::vector<std::uint32_t> mid = part.mid_indices();
        std::vector<double> s = scores(q, st, mid);
        std::vector<std::size_t> order(mid.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
        std::vector<std::uint32_t> expect;
        for (std::size_t j = 0; j < k; ++j) expect.push_back(mid[order[j]]);
        std::sort(expect.begin(), expect.end());

        CHECK(topk_select(q, st, part, k) == expect);
    }
}

TEST_CASE("subset-bias identity holds on random subsets", "[attention]") {
    Rng rng(5);
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t n = 4 + rng.below(40);
        std::size_t d = 1 + rng.below(8);
        AttentionHeadState st = random_state(rng, n, d);
        std::vector<double> q = random_query(rng, d, 3.0);

        std::vector<std::uint32_t> subset;
        for (std::uint32_t i = 0; i < n; ++i)
            if (rng.uniform() < 0.4) subset.push_back(i);
        if (subset.empty()) subset.push_back(std::uint32_t(rng.below(n)));

        SubsetBias sb = subset_bias_decomposition(q, st, subset);
        CHECK(sb.residual < 1e-12);
    }
}

TEST_CASE("subset bias is zero when the subset is everything", "[attention]") {
    Rng rng(6);
    AttentionHeadState st = random_state(rng, 9, 3);
    std::vector<double> q = random_query(rng, 3, 1.0);
    std::vector<std::uint32_t> all(9);
    std::iota(all.begin(), all.end(), 0u);
    SubsetBias sb = subset_bias_decomposition(q, st, all);
    CHECK(sb.z_r == 0.0);
    for (double g : sb.gap) CHECK_THAT(g, Catch::Matchers::WithinAbs(0.0, 1e-15));
    CHECK(sb.residual < 1e-15);
}

TEST_CASE("selection bias grows with missing mass", "[attention]") {
    // A diffuse query over many tokens: keeping one token biases the output.
    Rng rng(7);
    AttentionHeadState st = random_state(rng, 30, 4);
    std::vector<double> q(4, 0.0);  // all scores zero: perfectly diffuse
    std::vector<std::uint32_t> one{0};
    SubsetBias sb = subset_bias_decomposition(q, st, one);
    double gap = l1_norm(sb.gap);
    CHECK(gap > 0.0);
    // Z_R/(Z_E+Z_R) = 29/30 for uniform scores.
    CHECK_THAT(sb.z_r / (sb.z_e + sb.z_r), Catch::Matchers::WithinRel(29.0 / 30.0, 1e-12));
}
