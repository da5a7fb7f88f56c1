#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "rmarn/afr.hpp"
#include "rmarn/num/ops.hpp"

namespace rmarn::simhead {

// Pooling operator for the global similarity branch.
enum class Pooling { mean, max };

inline const char* pooling_name(Pooling p) { return p == Pooling::mean ? "mean" : "max"; }

// Parameters of the similarity head: the low-rank filter (channel mix ->
// soft threshold -> channel mix), the two-layer convolution stack reducing a
// k-channel map to one scalar, and the fusion weights combining the local and
// global branches.
template <typename T>
struct SimHeadParamsT {
    num::VarT<T> lrf_d;           // k×k channel mix
    num::VarT<T> lrf_lambda_raw;  // scalar; lambda = softplus(raw) >= 0
    num::VarT<T> lrf_out_w;       // k×k channel mix
    num::VarT<T> lrf_out_b;       // k
    num::VarT<T> conv1_w, conv1_b;  // k -> 2k, 3×3
    num::VarT<T> conv2_w, conv2_b;  // 2k -> k, 3×3
    num::VarT<T> head_w, head_b;    // affine (k) -> scalar
    num::VarT<T> fuse_w_scp, fuse_w_gps;  // learnable fusion weights, init 1
};

template <typename T>
SimHeadParamsT<T> init_head(int64_t k, num::Rng& rng, const std::string& prefix) {
    using num::TensorT;
    using num::VarT;
    require(k >= 1, ErrorKind::config, "sim head: channel count must be positive");
    SimHeadParamsT<T> head;
    TensorT<T> eye({k, k});
    for (int64_t i = 0; i < k; ++i) eye.at(i, i) = T(1);
    head.lrf_d = VarT<T>::leaf(eye, true, prefix + ".lrf_d");
    // softplus(-2.252168...) == 0.1: the filter starts as a mild shrinkage
    head.lrf_lambda_raw = VarT<T>::leaf(TensorT<T>::scalar(T(-2.2521684610440908)), true,
                                        prefix + ".lrf_lambda_raw");
    head.lrf_out_w = VarT<T>::leaf(eye, true, prefix + ".lrf_out_w");
    head.lrf_out_b = VarT<T>::leaf(TensorT<T>({k}), true, prefix + ".lrf_out_b");
    auto conv = [&](int64_t co, int64_t ci, const char* name) {
        TensorT<T> w({co, ci, 3, 3});
        rng.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<double>(ci * 9)));
        return VarT<T>::leaf(std::move(w), true, prefix + "." + name);
    };
    head.conv1_w = conv(2 * k, k, "conv1_w");
    head.conv1_b = VarT<T>::leaf(TensorT<T>({2 * k}), true, prefix + ".conv1_b");
    head.conv2_w = conv(k, 2 * k, "conv2_w");
    head.conv2_b = VarT<T>::leaf(TensorT<T>({k}), true, prefix + ".conv2_b");
    TensorT<T> hw({k});
    rng.fill_normal(hw, 0.0, 1.0 / std::sqrt(static_cast<double>(k)));
    head.head_w = VarT<T>::leaf(std::move(hw), true, prefix + ".head_w");
    head.head_b = VarT<T>::leaf(TensorT<T>({1}), true, prefix + ".head_b");
    head.fuse_w_scp = VarT<T>::leaf(TensorT<T>::scalar(T(1)), true, prefix + ".fuse_w_scp");
    head.fuse_w_gps = VarT<T>::leaf(TensorT<T>::scalar(T(1)), true, prefix + ".fuse_w_gps");
    return head;
}

template <typename T>
void collect_params(const SimHeadParamsT<T>& h, std::vector<num::VarT<T>>& out) {
    for (const auto& p : {h.lrf_d, h.lrf_lambda_raw, h.lrf_out_w, h.lrf_out_b, h.conv1_w,
                          h.conv1_b, h.conv2_w, h.conv2_b, h.head_w, h.head_b, h.fuse_w_scp,
                          h.fuse_w_gps})
        out.push_back(p);
}

// Soft interval (shrinkage) function, the closed-form solution of the
// l1-regularized proximal step. Exposed in scalar and tensor form.
template <typename T>
T soft(T x, T lambda) {
    require(lambda >= T(0), ErrorKind::argument, "soft: lambda must be nonnegative");
    return num::soft_value(x, lambda);
}

template <typename T>
num::VarT<T> soft(const num::VarT<T>& x, const num::VarT<T>& lambda) {
    return num::soft_threshold(x, lambda);
}

template <typename T>
num::VarT<T> soft(const num::VarT<T>& x, double lambda) {
    return num::soft_threshold(x, lambda);
}

// Low-rank filter over the channel axis at each spatial cell:
// out = W_out . soft(D . m, lambda) + b_out.
template <typename T>
num::VarT<T> lrf(const num::VarT<T>& map, const SimHeadParamsT<T>& head) {
    using namespace num;
    require(map.value().rank() == 3, ErrorKind::argument, "lrf: expects a (k, s1, s2) map");
    const int64_t k = map.value().dim(0), s1 = map.value().dim(1), s2 = map.value().dim(2);
    require(head.lrf_d.value().dim(0) == k, ErrorKind::config,
            "lrf: channel count " + std::to_string(k) + " does not match filter width " +
                std::to_string(head.lrf_d.value().dim(0)));
    auto flat = reshape(map, {k, s1 * s2});
    auto mixed = matmul(head.lrf_d, flat);
    auto shrunk = soft(mixed, softplus(head.lrf_lambda_raw));
    auto out = add_colvec(matmul(head.lrf_out_w, shrunk), head.lrf_out_b);
    return reshape(out, {k, s1, s2});
}

// Similarity convolution: two 3×3 conv layers (k -> 2k -> k) with GELU in
// between, global average pooling, and an affine reduction to one scalar.
// Global pooling makes the head independent of the (s_t, s_p) extent.
template <typename T>
num::VarT<T> scp(const num::VarT<T>& map, const SimHeadParamsT<T>& head, const afr::ActOptions& act) {
    using namespace num;
    require(map.value().rank() == 3, ErrorKind::argument, "scp: expects a (k, s1, s2) map");
    require(map.value().dim(1) >= 1 && map.value().dim(2) >= 1, ErrorKind::config,
            "scp: degenerate spatial size " + map.value().shape_str());
    auto h1 = gelu(conv2d(map, head.conv1_w, head.conv1_b, 1, 1), act.gelu_eps, act.gelu_rho);
    auto h2 = conv2d(h1, head.conv2_w, head.conv2_b, 1, 1);
    auto pooled = global_avg_pool(h2);
    auto weighted = sum_all(mul(pooled, head.head_w));
    return add(weighted, head.head_b);
}

// Global pooling similarity: cosine of the pooled sequence features. A
// zero pooled vector yields similarity 0 (with a warning) rather than NaN.
template <typename T>
num::VarT<T> gps(const num::VarT<T>& t_enc, const num::VarT<T>& p_enc, Pooling pooling) {
    using namespace num;
    require(t_enc.value().dim(1) == p_enc.value().dim(1), ErrorKind::config,
            "gps: feature widths differ");
    auto pool = [&](const VarT<T>& x) { return pooling == Pooling::mean ? mean_rows(x) : max_rows(x); };
    bool degenerate = false;
    auto sim = cosine(pool(t_enc), pool(p_enc), &degenerate);
    if (degenerate) {
        std::fprintf(stderr, "[rmarn] warning: zero pooled vector in gps, similarity set to 0\n");
    }
    return sim;
}

// Weighted combination of the two branches; exactly linear in both inputs.
template <typename T>
num::VarT<T> fuse(const num::VarT<T>& s_scp, const num::VarT<T>& s_gps,
                  const SimHeadParamsT<T>& head) {
    using namespace num;
    return add(mul_scalar(s_scp, head.fuse_w_scp), mul_scalar(s_gps, head.fuse_w_gps));
}

}  // namespace rmarn::simhead
