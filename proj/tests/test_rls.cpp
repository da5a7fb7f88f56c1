#include <cmath>
#include <vector>

#include "doctest.h"
#include "rmarn/num/gradcheck.hpp"
#include "rmarn/rls.hpp"

using namespace rmarn;
using namespace rmarn::num;
using namespace rmarn::rls;

namespace {

TensorD identity_matrix(int64_t n) {
    TensorD eye({n, n});
    for (int64_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
    return eye;
}

TensorD row_of(const TensorD& m, int64_t r) {
    TensorD out({m.dim(1)});
    for (int64_t j = 0; j < m.dim(1); ++j) out[j] = m.at(r, j);
    return out;
}

// Triple loop over (channel, text token, point token) calling the scalar form.
TensorD map_oracle(const TensorD& t, const TensorD& p, const ManifoldBundleT<double>& bundle) {
    const int64_t k = bundle.manifolds(), s_t = t.dim(0), s_p = p.dim(0);
    TensorD out({k, s_t, s_p});
    for (int64_t c = 0; c < k; ++c)
        for (int64_t i = 0; i < s_t; ++i)
            for (int64_t j = 0; j < s_p; ++j) {
                double e = 0.0;
                if (bundle.e_mode == EMode::learned_bias) e = bundle.e_table.value().at3(c, i, j);
                out.at3(c, i, j) = token_similarity(row_of(t, i), row_of(p, j),
                                                    bundle.a[static_cast<size_t>(c)].value(),
                                                    bundle.b[static_cast<size_t>(c)].value(), e);
            }
    return out;
}

}  // namespace

TEST_CASE("token_similarity analytic cases") {
    SUBCASE("identity factors reduce to the dot product") {
        TensorD eye = identity_matrix(3);
        TensorD t = TensorD::from({3}, {1.0, -2.0, 0.5});
        TensorD p = TensorD::from({3}, {0.3, 0.7, 4.0});
        const double expect = 1.0 * 0.3 - 2.0 * 0.7 + 0.5 * 4.0;
        CHECK(token_similarity(t, p, eye, eye, 0.0) == doctest::Approx(expect).epsilon(1e-15));
    }
    SUBCASE("zero token gives zero") {
        Rng rng(1);
        TensorD a({2, 3}), b({2, 3}), p({3});
        rng.fill_normal(a, 0.0, 1.0);
        rng.fill_normal(b, 0.0, 1.0);
        rng.fill_normal(p, 0.0, 1.0);
        CHECK(token_similarity(TensorD({3}), p, a, b, 0.0) == 0.0);
        CHECK(token_similarity(p, TensorD({3}), a, b, 0.0) == 0.0);
    }
    SUBCASE("random instance equals the dense bilinear form t' (A'B) p") {
        Rng rng(2);
        TensorD a({2, 3}), b({2, 3}), t({3}), p({3});
        rng.fill_normal(a, 0.0, 1.0);
        rng.fill_normal(b, 0.0, 1.0);
        rng.fill_normal(t, 0.0, 1.0);
        rng.fill_normal(p, 0.0, 1.0);
        // dense oracle: Q = A^T B, value = t^T Q p
        double expect = 0.0;
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j) {
                double q = 0.0;
                for (int64_t r = 0; r < 2; ++r) q += a.at(r, i) * b.at(r, j);
                expect += t[i] * q * p[j];
            }
        CHECK(token_similarity(t, p, a, b, 0.0) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(token_similarity(t, p, a, b, 2.5) == doctest::Approx(expect + 2.5).epsilon(1e-12));
    }
}

TEST_CASE("riemann_attention_map: shapes and identity case") {
    Rng rng(3);
    SUBCASE("output shape is (k, s_t, s_p)") {
        auto bundle = init_bundle<double>(3, 4, 8, EMode::off, 0, 0, rng, "rls");
        TensorD t({5, 8}), p({7, 8});
        rng.fill_normal(t, 0.0, 1.0);
        rng.fill_normal(p, 0.0, 1.0);
        auto map = riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle);
        CHECK(map.value().shape() == std::vector<int64_t>{3, 5, 7});
    }
    SUBCASE("k=1 identity factors give T P^T") {
        ManifoldBundleT<double> bundle;
        bundle.a.push_back(VarD::leaf(identity_matrix(4)));
        bundle.b.push_back(VarD::leaf(identity_matrix(4)));
        TensorD t({3, 4}), p({2, 4});
        rng.fill_normal(t, 0.0, 1.0);
        rng.fill_normal(p, 0.0, 1.0);
        auto map = riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle);
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 2; ++j) {
                double dot = 0;
                for (int64_t l = 0; l < 4; ++l) dot += t.at(i, l) * p.at(j, l);
                CHECK(map.value().at3(0, i, j) == doctest::Approx(dot).epsilon(1e-13));
            }
    }
}

TEST_CASE("factorized map equals the naive token loop (central property)") {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const int64_t k = rng.uniform_int(1, 4), s_t = rng.uniform_int(1, 8),
                      s_p = rng.uniform_int(1, 8), d = rng.uniform_int(1, 16),
                      r = rng.uniform_int(1, 8);
        auto e_mode = trial % 3 == 0 ? EMode::learned_bias : EMode::off;
        auto bundle = init_bundle<double>(k, r, d, e_mode, 8, 8, rng, "rls");
        if (e_mode == EMode::learned_bias) rng.fill_normal(bundle.e_table.value_mut(), 0.0, 0.5);
        TensorD t({s_t, d}), p({s_p, d});
        rng.fill_normal(t, 0.0, 1.0);
        rng.fill_normal(p, 0.0, 1.0);
        auto map = riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle);
        TensorD ref = map_oracle(t, p, bundle);
        REQUIRE(map.value().shape() == ref.shape());
        for (int64_t i = 0; i < ref.numel(); ++i) CHECK(std::abs(map.value()[i] - ref[i]) < 1e-10);
    }
}

TEST_CASE("with e off the map is bilinear in each argument") {
    Rng rng(5);
    auto bundle = init_bundle<double>(2, 3, 6, EMode::off, 0, 0, rng, "rls");
    TensorD t({4, 6}), t2({4, 6}), p({5, 6});
    rng.fill_normal(t, 0.0, 1.0);
    rng.fill_normal(t2, 0.0, 1.0);
    rng.fill_normal(p, 0.0, 1.0);
    const double alpha = -1.75;
    TensorD t_scaled = t;
    for (int64_t i = 0; i < t_scaled.numel(); ++i) t_scaled[i] *= alpha;
    TensorD t_sum = t;
    for (int64_t i = 0; i < t_sum.numel(); ++i) t_sum[i] += t2[i];

    auto m = riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle);
    auto m_scaled = riemann_attention_map(VarD::leaf(t_scaled), VarD::leaf(p), bundle);
    auto m2 = riemann_attention_map(VarD::leaf(t2), VarD::leaf(p), bundle);
    auto m_sum = riemann_attention_map(VarD::leaf(t_sum), VarD::leaf(p), bundle);
    for (int64_t i = 0; i < m.value().numel(); ++i) {
        CHECK(std::abs(m_scaled.value()[i] - alpha * m.value()[i]) < 1e-6);
        CHECK(std::abs(m_sum.value()[i] - (m.value()[i] + m2.value()[i])) < 1e-6);
    }
}

TEST_CASE("swapping two text tokens permutes the map rows in every channel") {
    Rng rng(6);
    auto bundle = init_bundle<double>(3, 4, 6, EMode::off, 0, 0, rng, "rls");
    TensorD t({4, 6}), p({5, 6});
    rng.fill_normal(t, 0.0, 1.0);
    rng.fill_normal(p, 0.0, 1.0);
    TensorD t_swapped = t;
    for (int64_t j = 0; j < 6; ++j) std::swap(t_swapped.at(1, j), t_swapped.at(3, j));
    auto m = riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle);
    auto ms = riemann_attention_map(VarD::leaf(t_swapped), VarD::leaf(p), bundle);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t j = 0; j < 5; ++j) {
            CHECK(ms.value().at3(c, 1, j) == m.value().at3(c, 3, j));
            CHECK(ms.value().at3(c, 3, j) == m.value().at3(c, 1, j));
            CHECK(ms.value().at3(c, 0, j) == m.value().at3(c, 0, j));
        }
}

TEST_CASE("gradients through the map pass the checker") {
    Rng rng(7);
    auto bundle = init_bundle<double>(2, 3, 5, EMode::learned_bias, 4, 4, rng, "rls");
    TensorD t({3, 5}), p({4, 5});
    rng.fill_normal(t, 0.0, 1.0);
    rng.fill_normal(p, 0.0, 1.0);
    auto tv = VarD::leaf(t, true, "t");
    auto pv = VarD::leaf(p, true, "p");
    std::vector<VarD> params{tv, pv};
    collect_params(bundle, params);
    auto f = [&] {
        auto m = riemann_attention_map(tv, pv, bundle);
        return sum_all(mul(m, m));
    };
    auto report = check_gradients(f, params);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("bias table capacity violations raise configuration errors") {
    Rng rng(8);
    auto bundle = init_bundle<double>(2, 3, 5, EMode::learned_bias, 3, 3, rng, "rls");
    TensorD t({4, 5}), p({2, 5});
    CHECK_THROWS_WITH_AS(riemann_attention_map(VarD::leaf(t), VarD::leaf(p), bundle),
                         doctest::Contains("exceed bias table capacity"), Error);
}
