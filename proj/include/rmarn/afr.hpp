#pragma once

#include <string>
#include <vector>

#include "rmarn/num/ops.hpp"

namespace rmarn {

// Per-forward evaluation context. Training mode enables dropout, which draws
// from the supplied generator; evaluation mode is deterministic.
struct ForwardCtx {
    bool training = false;
    num::Rng* rng = nullptr;
};

namespace afr {

// Activation/normalization constants shared by the encoder and the
// similarity head.
struct ActOptions {
    double gelu_eps = 0.5;
    double gelu_rho = 0.044715;
    double ln_eps = 1e-5;
    double dropout = 0.1;
};

template <typename T>
struct EncoderLayerParamsT {
    num::VarT<T> wq, wk, wv, wo;                            // d×d projections
    num::VarT<T> w1, b1, w2, b2;                            // FFN affine pairs
    num::VarT<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;    // post-sublayer norms
};

// One modality's refiner: input projection to the common width followed by a
// stack of self-attention encoder layers.
template <typename T>
struct AfrStackT {
    num::VarT<T> in_proj_w;  // h×d
    num::VarT<T> in_proj_b;  // d
    std::vector<EncoderLayerParamsT<T>> layers;
};

template <typename T>
EncoderLayerParamsT<T> init_encoder_layer(int64_t d, num::Rng& rng, const std::string& prefix) {
    using num::TensorT;
    using num::VarT;
    auto mat = [&](const char* name) {
        TensorT<T> w({d, d});
        rng.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<double>(d)));
        return VarT<T>::leaf(std::move(w), true, prefix + "." + name);
    };
    EncoderLayerParamsT<T> layer;
    layer.wq = mat("wq");
    layer.wk = mat("wk");
    layer.wv = mat("wv");
    layer.wo = mat("wo");
    layer.w1 = mat("w1");
    layer.b1 = VarT<T>::leaf(TensorT<T>({d}), true, prefix + ".b1");
    layer.w2 = mat("w2");
    layer.b2 = VarT<T>::leaf(TensorT<T>({d}), true, prefix + ".b2");
    layer.ln1_gain = VarT<T>::leaf(TensorT<T>({d}, T(1)), true, prefix + ".ln1_gain");
    layer.ln1_bias = VarT<T>::leaf(TensorT<T>({d}), true, prefix + ".ln1_bias");
    layer.ln2_gain = VarT<T>::leaf(TensorT<T>({d}, T(1)), true, prefix + ".ln2_gain");
    layer.ln2_bias = VarT<T>::leaf(TensorT<T>({d}), true, prefix + ".ln2_bias");
    return layer;
}

template <typename T>
AfrStackT<T> init_stack(int64_t h, int64_t d, int64_t n_layers, num::Rng& rng,
                        const std::string& prefix) {
    using num::TensorT;
    using num::VarT;
    AfrStackT<T> stack;
    TensorT<T> w({h, d});
    rng.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<double>(h)));
    stack.in_proj_w = VarT<T>::leaf(std::move(w), true, prefix + ".in_proj.w");
    stack.in_proj_b = VarT<T>::leaf(TensorT<T>({d}), true, prefix + ".in_proj.b");
    stack.layers.reserve(static_cast<size_t>(n_layers));
    for (int64_t i = 0; i < n_layers; ++i)
        stack.layers.push_back(
            init_encoder_layer<T>(d, rng, prefix + ".layer" + std::to_string(i)));
    return stack;
}

template <typename T>
void collect_params(const EncoderLayerParamsT<T>& l, std::vector<num::VarT<T>>& out) {
    for (const auto& p : {l.wq, l.wk, l.wv, l.wo, l.w1, l.b1, l.w2, l.b2, l.ln1_gain, l.ln1_bias,
                          l.ln2_gain, l.ln2_bias})
        out.push_back(p);
}

template <typename T>
void collect_params(const AfrStackT<T>& s, std::vector<num::VarT<T>>& out) {
    out.push_back(s.in_proj_w);
    out.push_back(s.in_proj_b);
    for (const auto& l : s.layers) collect_params(l, out);
}

// Multi-head scaled dot-product self-attention: per head,
// softmax(Q K^T / sqrt(d_e)) V with Q = X Wq etc., heads concatenated and
// passed through the output projection.
template <typename T>
num::VarT<T> self_attention(const num::VarT<T>& x, const EncoderLayerParamsT<T>& layer,
                            int64_t nhead) {
    using namespace num;
    const int64_t d = x.value().dim(1);
    require(nhead >= 1 && d % nhead == 0, ErrorKind::config,
            "self_attention: width " + std::to_string(d) + " is not divisible by nhead " +
                std::to_string(nhead));
    const int64_t de = d / nhead;
    auto q = matmul(x, layer.wq);
    auto k = matmul(x, layer.wk);
    auto v = matmul(x, layer.wv);
    std::vector<VarT<T>> heads;
    heads.reserve(static_cast<size_t>(nhead));
    for (int64_t hidx = 0; hidx < nhead; ++hidx) {
        auto qh = slice_cols(q, hidx * de, (hidx + 1) * de);
        auto kh = slice_cols(k, hidx * de, (hidx + 1) * de);
        auto vh = slice_cols(v, hidx * de, (hidx + 1) * de);
        auto scores = scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(de)));
        heads.push_back(matmul(row_softmax(scores), vh));
    }
    auto cat = nhead == 1 ? heads[0] : concat_cols(heads);
    return matmul(cat, layer.wo);
}

// FFN(x) = GELU(x W1 + b1) W2 + b2, applied row-wise.
template <typename T>
num::VarT<T> feed_forward(const num::VarT<T>& x, const EncoderLayerParamsT<T>& layer,
                          const ActOptions& act) {
    using namespace num;
    auto hidden = gelu(add_rowvec(matmul(x, layer.w1), layer.b1), act.gelu_eps, act.gelu_rho);
    return add_rowvec(matmul(hidden, layer.w2), layer.b2);
}

// One encoder layer: S = LN(x + Att(x)), out = LN(S + FFN(S)).
template <typename T>
num::VarT<T> encoder_layer(const num::VarT<T>& x, const EncoderLayerParamsT<T>& layer,
                           int64_t nhead, const ActOptions& act, const ForwardCtx& ctx) {
    using namespace num;
    auto att = self_attention(x, layer, nhead);
    if (ctx.training && ctx.rng) att = dropout(att, act.dropout, *ctx.rng, true);
    auto s = layer_norm(add(x, att), layer.ln1_gain, layer.ln1_bias, act.ln_eps);
    auto ff = feed_forward(s, layer, act);
    if (ctx.training && ctx.rng) ff = dropout(ff, act.dropout, *ctx.rng, true);
    return layer_norm(add(s, ff), layer.ln2_gain, layer.ln2_bias, act.ln_eps);
}

// Affine map from the modality input width to the common model width.
template <typename T>
num::VarT<T> project_input(const num::VarT<T>& tokens, const AfrStackT<T>& stack) {
    using namespace num;
    require(tokens.value().rank() == 2, ErrorKind::argument, "project_input: expects (s, h) tokens");
    require(tokens.value().dim(1) == stack.in_proj_w.value().dim(0), ErrorKind::config,
            "project_input: token width " + std::to_string(tokens.value().dim(1)) +
                " does not match projection input width " +
                std::to_string(stack.in_proj_w.value().dim(0)));
    return add_rowvec(matmul(tokens, stack.in_proj_w), stack.in_proj_b);
}

// Full refiner: projection followed by the encoder stack. The sequence shape
// (s×d) is preserved across layers.
template <typename T>
num::VarT<T> encode(const num::VarT<T>& tokens, const AfrStackT<T>& stack, int64_t nhead,
                    const ActOptions& act, const ForwardCtx& ctx) {
    require(!stack.layers.empty(), ErrorKind::config, "encode: encoder stack is empty");
    auto x = project_input(tokens, stack);
    for (const auto& layer : stack.layers) x = encoder_layer(x, layer, nhead, act, ctx);
    return x;
}

}  // namespace afr
}  // namespace rmarn
