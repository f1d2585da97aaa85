#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "kvhybrid/feature_map.hpp"

using namespace kvhybrid;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t d, double scale = 1.0) {
    std::vector<double> v(d);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

// Scalar probe F(params) = <c, log phi(x)> used for finite-difference checks.
double probe_value(const FeatureMapParams& p, std::span<const double> x,
                   std::span<const double> c) {
    std::vector<double> g2 = phi_log_forward(p, x);
    double f = 0.0;
    for (std::size_t i = 0; i < g2.size(); ++i) f += c[i] * g2[i];
    return f;
}

}  // namespace

TEST_CASE("init produces the documented shapes and parameter count", "[feature_map]") {
    Rng rng(1);
    FeatureMapParams p = init_params(rng, 3, 4, 5);
    CHECK(p.d_h() == 3);
    CHECK(p.d_emb() == 4);
    CHECK(p.d_phi() == 5);
    CHECK(p.w_s.rows() == 4);
    CHECK(p.w_s.cols() == 3);
    CHECK(p.w_1.rows() == 4);
    CHECK(p.w_2.cols() == 4);
    CHECK(p.w_o.rows() == 5);
    CHECK(p.w_o.cols() == 4);
    CHECK(p.alpha == 0.0);
    for (double b : p.b_s) CHECK(b == 0.0);
    for (double b : p.b_o) CHECK(b == 0.0);
    // d_emb*d_h + d_emb + 2*(d_emb^2 + d_emb) + 1 + d_phi*d_emb + d_phi
    CHECK(p.param_count() == 4 * 3 + 4 + 2 * (16 + 4) + 1 + 5 * 4 + 5);

    std::size_t visited = 0;
    for_each_param(p, [&visited](double&) { ++visited; });
    CHECK(visited == p.param_count());
}

TEST_CASE("residual branch is inactive at init (alpha = 0)", "[feature_map]") {
    Rng rng(2);
    FeatureMapParams p = init_params(rng, 4, 6, 3);
    std::vector<double> x = random_vec(rng, 4);
    PhiForward f = phi_forward(p, x);
    CHECK(f.g1 == f.g0);  // g1 = g0 + alpha * delta with alpha = 0

    // phi = exp(g2) is strictly positive.
    for (double g : f.g2) CHECK(std::isfinite(g));
    for (double g : f.g2) CHECK(std::exp(g) > 0.0);
}

TEST_CASE("surrogate log score is the feature-space log inner product", "[feature_map]") {
    Rng rng(3);
    FeatureMapParams pq = init_params(rng, 4, 6, 5);
    FeatureMapParams pk = init_params(rng, 4, 6, 5);
    std::vector<double> q = random_vec(rng, 4);
    std::vector<double> k = random_vec(rng, 4);
    std::vector<double> lq = phi_log_forward(pq, q);
    std::vector<double> lk = phi_log_forward(pk, k);

    double direct = 0.0;
    for (std::size_t f = 0; f < 5; ++f) direct += std::exp(lq[f]) * std::exp(lk[f]);
    CHECK_THAT(surrogate_log_score(lq, lk),
               Catch::Matchers::WithinRel(std::log(direct), 1e-12));
}

TEST_CASE("backward matches central finite differences on every parameter",
          "[feature_map]") {
    Rng rng(4);
    for (double alpha : {0.0, 0.5}) {
        FeatureMapParams p = init_params(rng, 3, 4, 3);
        p.alpha = alpha;
        // Perturb biases so the probe point is generic.
        for (auto& b : p.b_1) b = 0.3 * rng.normal();
        std::vector<double> x = random_vec(rng, 3);
        std::vector<double> c = random_vec(rng, 3);

        PhiForward fwd = phi_forward(p, x);
        FeatureMapParams grads = zeros_like(p);
        std::vector<double> dx = phi_backward(p, x, fwd, c, grads);

        // Collect analytic gradients in serialization order.
        std::vector<double> analytic;
        for_each_param(grads, [&analytic](double& g) { analytic.push_back(g); });

        std::vector<double*> slots;
        for_each_param(p, [&slots](double& v) { slots.push_back(&v); });
        const double h = 1e-6;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            double saved = *slots[i];
            *slots[i] = saved + h;
            double up = probe_value(p, x, c);
            *slots[i] = saved - h;
            double down = probe_value(p, x, c);
            *slots[i] = saved;
            double fd = (up - down) / (2 * h);
            CHECK_THAT(analytic[i], Catch::Matchers::WithinAbs(fd, 1e-6));
        }

        // Input gradient too.
        for (std::size_t i = 0; i < x.size(); ++i) {
            double saved = x[i];
            x[i] = saved + h;
            double up = probe_value(p, x, c);
            x[i] = saved - h;
            double down = probe_value(p, x, c);
            x[i] = saved;
            CHECK_THAT(dx[i], Catch::Matchers::WithinAbs((up - down) / (2 * h), 1e-6));
        }
    }
}

TEST_CASE("backward accumulates into existing gradient buffers", "[feature_map]") {
    Rng rng(5);
    FeatureMapParams p = init_params(rng, 3, 4, 2);
    std::vector<double> x = random_vec(rng, 3);
    std::vector<double> c = random_vec(rng, 2);
    PhiForward fwd = phi_forward(p, x);

    FeatureMapParams once = zeros_like(p);
    phi_backward(p, x, fwd, c, once);
    FeatureMapParams twice = zeros_like(p);
    phi_backward(p, x, fwd, c, twice);
    phi_backward(p, x, fwd, c, twice);

    std::vector<double> v1, v2;
    for_each_param(once, [&v1](double& g) { v1.push_back(g); });
    for_each_param(twice, [&v2](double& g) { v2.push_back(g); });
    for (std::size_t i = 0; i < v1.size(); ++i)
        CHECK_THAT(v2[i], Catch::Matchers::WithinRel(2.0 * v1[i], 1e-12));
}

TEST_CASE("checkpoint round-trips a bank exactly", "[feature_map]") {
    Rng rng(6);
    PhiBank bank = make_phi_bank(rng, 2, 3, 4, 6, 5);
    // Make alpha nonzero so it is exercised by the round-trip.
    bank.pair(1, 2).phi_q.alpha = 0.25;
    fs::path p = fs::temp_directory_path() / "kvhybrid_test_ckpt.bin";
    save_checkpoint(p.string(), bank);

    PhiBank back = load_checkpoint(p.string());
    CHECK(back.layers == 2);
    CHECK(back.heads == 3);
    CHECK(back.d_h == 4);
    CHECK(back.d_emb == 6);
    CHECK(back.d_phi == 5);
    REQUIRE(back.pairs.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(back.pairs[i].layer == bank.pairs[i].layer);
        CHECK(back.pairs[i].head == bank.pairs[i].head);
        CHECK(back.pairs[i].phi_q == bank.pairs[i].phi_q);
        CHECK(back.pairs[i].phi_k == bank.pairs[i].phi_k);
    }

    // Golden byte size: header 8 + 6*4, then pairs * 2 maps * params * 8.
    std::size_t params = bank.pairs[0].phi_q.param_count();
    CHECK(fs::file_size(p) == 32 + 6 * 2 * params * 8);
    fs::remove(p);
}

TEST_CASE("checkpoint detects corruption", "[feature_map]") {
    Rng rng(7);
    PhiBank bank = make_phi_bank(rng, 1, 1, 2, 3, 2);
    fs::path dir = fs::temp_directory_path();
    fs::path good = dir / "kvhybrid_test_ckpt_good.bin";
    save_checkpoint(good.string(), bank);
    std::vector<char> bytes;
    {
        std::ifstream in(good, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }

    auto write_variant = [&dir](const std::vector<char>& b, const char* name) {
        fs::path p = dir / name;
        std::ofstream out(p, std::ios::binary);
        out.write(b.data(), std::streamsize(b.size()));
        return p;
    };

    SECTION("bad magic") {
        std::vector<char> b = bytes;
        b[0] = 'X';
        fs::path p = write_variant(b, "kvhybrid_test_ckpt_mag.bin");
        try {
            load_checkpoint(p.string());
            FAIL("expected format_error");
        } catch (const format_error& e) {
            CHECK(e.fault() == format_fault::bad_magic);
        }
        fs::remove(p);
    }
    SECTION("bad version") {
        std::vector<char> b = bytes;
        b[8] = 99;  // little-endian version field
        fs::path p = write_variant(b, "kvhybrid_test_ckpt_ver.bin");
        try {
            load_checkpoint(p.string());
            FAIL("expected format_error");
        } catch (const format_error& e) {
            CHECK(e.fault() == format_fault::bad_version);
        }
        fs::remove(p);
    }
    SECTION("truncated payload") {
        std::vector<char> b(bytes.begin(), bytes.end() - 7);
        fs::path p = write_variant(b, "kvhybrid_test_ckpt_tru.bin");
        try {
            load_checkpoint(p.string());
            FAIL("expected format_error");
        } catch (const format_error& e) {
            CHECK(e.fault() == format_fault::truncated);
        }
        fs::remove(p);
    }
    SECTION("trailing bytes") {
        std::vector<char> b = bytes;
        b.push_back('z');
        fs::path p = write_variant(b, "kvhybrid_test_ckpt_trl.bin");
        try {
            load_checkpoint(p.string());
            FAIL("expected format_error");
        } catch (const format_error& e) {
            CHECK(e.fault() == format_fault::dim_mismatch);
        }
        fs::remove(p);
    }
    fs::remove(good);
}
