#pragma once

#include <string>
#include <vector>

#include "rmarn/num/ops.hpp"

namespace rmarn::rls {

// Positional term of the factorized token similarity: disabled by default,
// or a learned per-position bias table added channel-wise.
enum class EMode { off, learned_bias };

// Learned per-manifold factor pairs. Channel i scores a token pair (t, p) as
// (A_i t) . (B_i p) + e_i(a, b); the metric/transport structure lives
// entirely inside these factors.
template <typename T>
struct ManifoldBundleT {
    std::vector<num::VarT<T>> a;  // k matrices, each r×d (text side)
    std::vector<num::VarT<T>> b;  // k matrices, each r×d (point side)
    EMode e_mode = EMode::off;
    num::VarT<T> e_table;  // (k × max_s_t × max_s_p) when learned_bias

    int64_t manifolds() const { return static_cast<int64_t>(a.size()); }
};

template <typename T>
ManifoldBundleT<T> init_bundle(int64_t k, int64_t rank, int64_t d, EMode e_mode, int64_t max_s_t,
                               int64_t max_s_p, num::Rng& rng, const std::string& prefix) {
    using num::TensorT;
    using num::VarT;
    require(k >= 1 && rank >= 1 && d >= 1, ErrorKind::config,
            "manifold bundle: k, rank and width must be positive");
    ManifoldBundleT<T> bundle;
    bundle.e_mode = e_mode;
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int64_t i = 0; i < k; ++i) {
        TensorT<T> ai({rank, d}), bi({rank, d});
        rng.fill_normal(ai, 0.0, std);
        rng.fill_normal(bi, 0.0, std);
        bundle.a.push_back(VarT<T>::leaf(std::move(ai), true, prefix + ".a" + std::to_string(i)));
        bundle.b.push_back(VarT<T>::leaf(std::move(bi), true, prefix + ".b" + std::to_string(i)));
    }
    if (e_mode == EMode::learned_bias) {
        require(max_s_t >= 1 && max_s_p >= 1, ErrorKind::config,
                "manifold bundle: bias table capacity must be positive");
        bundle.e_table =
            VarT<T>::leaf(TensorT<T>({k, max_s_t, max_s_p}), true, prefix + ".e_table");
    }
    return bundle;
}

template <typename T>
void collect_params(const ManifoldBundleT<T>& bundle, std::vector<num::VarT<T>>& out) {
    for (const auto& p : bundle.a) out.push_back(p);
    for (const auto& p : bundle.b) out.push_back(p);
    if (bundle.e_mode == EMode::learned_bias) out.push_back(bundle.e_table);
}

// Scalar form of the channel score: (A t) . (B p) + e. Plain values; the
// batched map below is the differentiable path and must agree with a loop
// over this function.
template <typename T>
T token_similarity(const num::TensorT<T>& t, const num::TensorT<T>& p, const num::TensorT<T>& a,
                   const num::TensorT<T>& b, T e) {
    const int64_t r = a.dim(0), d = a.dim(1);
    require(b.dim(0) == r && b.dim(1) == d, ErrorKind::argument,
            "token_similarity: factor shapes differ");
    require(t.numel() == d && p.numel() == d, ErrorKind::argument,
            "token_similarity: token width does not match factors");
    T acc = e;
    for (int64_t i = 0; i < r; ++i) {
        T at = T(0), bp = T(0);
        for (int64_t j = 0; j < d; ++j) {
            at += a.at(i, j) * t[j];
            bp += b.at(i, j) * p[j];
        }
        acc += at * bp;
    }
    return acc;
}

// The k-channel similarity map M with M[i][a][b] = (A_i t_a) . (B_i p_b) + e.
// Each channel is two batched projections and one matrix product; no
// per-token loops.
template <typename T>
num::VarT<T> riemann_attention_map(const num::VarT<T>& t_feat, const num::VarT<T>& p_feat,
                                   const ManifoldBundleT<T>& bundle) {
    using namespace num;
    require(t_feat.value().rank() == 2 && p_feat.value().rank() == 2, ErrorKind::argument,
            "riemann_attention_map: expects (s, d) feature matrices");
    const int64_t s_t = t_feat.value().dim(0), s_p = p_feat.value().dim(0);
    const int64_t d = t_feat.value().dim(1);
    require(bundle.manifolds() >= 1, ErrorKind::config, "riemann_attention_map: empty bundle");
    require(p_feat.value().dim(1) == d && bundle.a[0].value().dim(1) == d, ErrorKind::config,
            "riemann_attention_map: feature width does not match bundle");
    std::vector<VarT<T>> channels;
    channels.reserve(static_cast<size_t>(bundle.manifolds()));
    for (int64_t i = 0; i < bundle.manifolds(); ++i) {
        auto ta = matmul_nt(t_feat, bundle.a[static_cast<size_t>(i)]);  // (s_t × r)
        auto pb = matmul_nt(p_feat, bundle.b[static_cast<size_t>(i)]);  // (s_p × r)
        channels.push_back(matmul_nt(ta, pb));                          // (s_t × s_p)
    }
    auto map = stack_channels(channels);
    if (bundle.e_mode == EMode::learned_bias) {
        require(s_t <= bundle.e_table.value().dim(1) && s_p <= bundle.e_table.value().dim(2),
                ErrorKind::config,
                "riemann_attention_map: sequence lengths (" + std::to_string(s_t) + ", " +
                    std::to_string(s_p) + ") exceed bias table capacity (" +
                    std::to_string(bundle.e_table.value().dim(1)) + ", " +
                    std::to_string(bundle.e_table.value().dim(2)) + ")");
        map = add(map, crop3d(bundle.e_table, s_t, s_p));
    }
    return map;
}

}  // namespace rmarn::rls
