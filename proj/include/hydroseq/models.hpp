#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hydroseq/rng.hpp"
#include "hydroseq/tensor.hpp"

namespace hydroseq {

enum class ModelVariant { lstm, transformer_vanilla, transformer_modified };

inline std::string to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::lstm: return "lstm";
        case ModelVariant::transformer_vanilla: return "transformer_vanilla";
        default: return "transformer_modified";
    }
}

inline ModelVariant variant_from_string(const std::string& s) {
    if (s == "lstm") return ModelVariant::lstm;
    if (s == "transformer_vanilla") return ModelVariant::transformer_vanilla;
    if (s == "transformer_modified") return ModelVariant::transformer_modified;
    throw ParameterError("unknown model variant '" + s + "'");
}

struct ModelSpec {
    ModelVariant variant = ModelVariant::lstm;
    std::size_t input_dim = 1;   // forcing variables + static attributes
    std::size_t hidden_dim = 64; // LSTM
    std::size_t d_model = 64;    // Transformers
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ff = 128;
    double dropout_rate = 0.1;
    std::size_t seq_len = 365;

    void validate() const {
        if (input_dim < 1 || seq_len < 1) throw ParameterError("ModelSpec: dims must be >= 1");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw ParameterError("ModelSpec: dropout_rate must be in [0,1)");
        if (variant == ModelVariant::lstm) {
            if (hidden_dim < 1) throw ParameterError("ModelSpec: hidden_dim must be >= 1");
        } else {
            if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1)
                throw ParameterError("ModelSpec: transformer dims must be >= 1");
            if (d_model % n_heads != 0)
                throw ParameterError("ModelSpec: d_model must be divisible by n_heads");
            if (d_model % 2 != 0)
                throw ParameterError("ModelSpec: d_model must be even");
        }
    }

    // True for variants supervised at every position (seq2seq heads).
    bool seq2seq() const { return variant != ModelVariant::transformer_vanilla; }
};

// Named parameter tensors. std::map keeps a deterministic iteration order,
// which serialization and the optimizer both rely on.
using ModelWeights = std::map<std::string, Tensor>;

namespace detail {
inline Tensor init_linear(RngStream& rng, std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(Shape{fan_in, fan_out}, -bound, bound, rng, true);
}
inline Tensor init_bias(RngStream& rng, std::size_t fan_in, std::size_t n) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(Shape{n}, -bound, bound, rng, true);
}
}  // namespace detail

inline ModelWeights init_weights(const ModelSpec& spec, RngStream& rng) {
    spec.validate();
    ModelWeights w;
    if (spec.variant == ModelVariant::lstm) {
        const std::size_t in = spec.input_dim, H = spec.hidden_dim;
        for (const char* gate : {"i", "f", "g", "o"}) {
            w["lstm.W_" + std::string(gate)] = detail::init_linear(rng, in, H);
            w["lstm.U_" + std::string(gate)] = detail::init_linear(rng, H, H);
            w["lstm.b_" + std::string(gate)] = detail::init_bias(rng, H, H);
        }
        // forget-gate bias at 1 counters early memory washout
        w["lstm.b_f"] = Tensor::full(Shape{H}, 1.0, true);
        w["head.W"] = detail::init_linear(rng, H, 1);
        w["head.b"] = detail::init_bias(rng, H, 1);
    } else {
        const std::size_t D = spec.d_model, F = spec.d_ff;
        w["embed.W"] = detail::init_linear(rng, spec.input_dim, D);
        w["embed.b"] = detail::init_bias(rng, spec.input_dim, D);
        for (std::size_t l = 0; l < spec.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            w[p + "ln1.gain"] = Tensor::full(Shape{D}, 1.0, true);
            w[p + "ln1.bias"] = Tensor::zeros(Shape{D}, true);
            for (const char* proj : {"Wq", "Wk", "Wv", "Wo"})
                w[p + "attn." + std::string(proj)] = detail::init_linear(rng, D, D);
            for (const char* b : {"bq", "bk", "bv", "bo"})
                w[p + "attn." + std::string(b)] = detail::init_bias(rng, D, D);
            w[p + "ln2.gain"] = Tensor::full(Shape{D}, 1.0, true);
            w[p + "ln2.bias"] = Tensor::zeros(Shape{D}, true);
            w[p + "ffn.W1"] = detail::init_linear(rng, D, F);
            w[p + "ffn.b1"] = detail::init_bias(rng, D, F);
            w[p + "ffn.W2"] = detail::init_linear(rng, F, D);
            w[p + "ffn.b2"] = detail::init_bias(rng, F, D);
        }
        w["final_ln.gain"] = Tensor::full(Shape{D}, 1.0, true);
        w["final_ln.bias"] = Tensor::zeros(Shape{D}, true);
        w["head.W"] = detail::init_linear(rng, D, 1);
        w["head.b"] = detail::init_bias(rng, D, 1);
    }
    return w;
}

// Closed-form parameter count; consistency with the allocated tensors is tested.
inline std::size_t param_count(const ModelSpec& spec) {
    spec.validate();
    if (spec.variant == ModelVariant::lstm) {
        const std::size_t in = spec.input_dim, H = spec.hidden_dim;
        return 4 * (in * H + H * H + H) + (H + 1);
    }
    const std::size_t D = spec.d_model, F = spec.d_ff;
    const std::size_t per_layer = 2 * (2 * D)          // layer norms
                                  + 4 * (D * D + D)    // q/k/v/o projections
                                  + (D * F + F + F * D + D);  // feed-forward
    return (spec.input_dim * D + D) + spec.n_layers * per_layer + 2 * D + (D + 1);
}

// Dropout plumbing: every model takes one of these. rate 0 or training=false
// makes the pass deterministic.
struct DropoutState {
    RngStream* rng = nullptr;
    bool training = false;
    double rate = 0.0;
};

inline Tensor dropout(Tape& tape, const Tensor& x, const DropoutState& ds) {
    if (!ds.training || ds.rate <= 0.0) return x;
    if (ds.rng == nullptr) throw ContractError("dropout: training mode needs an RngStream");
    Tensor mask = Tensor::zeros(x.shape());
    const double keep = 1.0 - ds.rate;
    for (double& m : mask.data()) m = (ds.rng->next_double() < keep) ? 1.0 / keep : 0.0;
    return mul(tape, x, mask);
}

namespace detail {
inline const Tensor& weight(const ModelWeights& w, const std::string& name) {
    auto it = w.find(name);
    if (it == w.end()) throw ContractError("missing weight '" + name + "'");
    return it->second;
}

// y = x W + b for x [N, in], W [in, out], b [out]
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& W, const Tensor& b) {
    return add(tape, matmul(tape, x, W), b);
}
}  // namespace detail

// One LSTM step. x_t [B,in], h_prev/c_prev [B,H] -> (h_t, c_t).
inline std::pair<Tensor, Tensor> lstm_cell(Tape& tape, const Tensor& x_t, const Tensor& h_prev,
                                           const Tensor& c_prev, const ModelWeights& w) {
    using detail::weight;
    auto gate = [&](const char* g, ActKind act) {
        Tensor pre = add(tape,
                         add(tape, matmul(tape, x_t, weight(w, std::string("lstm.W_") + g)),
                             matmul(tape, h_prev, weight(w, std::string("lstm.U_") + g))),
                         weight(w, std::string("lstm.b_") + g));
        return activation(tape, act, pre);
    };
    Tensor i = gate("i", ActKind::sigmoid);
    Tensor f = gate("f", ActKind::sigmoid);
    Tensor g = gate("g", ActKind::tanh);
    Tensor o = gate("o", ActKind::sigmoid);
    Tensor c_t = add(tape, mul(tape, f, c_prev), mul(tape, i, g));
    Tensor h_t = mul(tape, o, tanh_op(tape, c_t));
    return {h_t, c_t};
}

// Unrolls the cell over the window; per-step linear head. x [B,T,in] -> [B,T,1].
inline Tensor lstm_forward(Tape& tape, const Tensor& x, const ModelWeights& w,
                           const ModelSpec& spec, const DropoutState& ds = {}) {
    const Shape& s = x.shape();
    if (s.rank() != 3 || s[2] != spec.input_dim)
        throw ShapeError("lstm_forward: want [B,T," + std::to_string(spec.input_dim) + "], got " +
                         s.to_string());
    const std::size_t B = s[0], T = s[1], H = spec.hidden_dim;
    Tensor h = Tensor::zeros(Shape{B, H});
    Tensor c = Tensor::zeros(Shape{B, H});
    std::vector<Tensor> outs;
    outs.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Tensor x_t = reshape(tape, slice(tape, x, 1, t, t + 1), Shape{B, spec.input_dim});
        auto [h_t, c_t] = lstm_cell(tape, x_t, h, c, w);
        h = h_t;
        c = c_t;
        Tensor hd = dropout(tape, h, ds);
        Tensor y_t = detail::linear(tape, hd, detail::weight(w, "head.W"),
                                    detail::weight(w, "head.b"));  // [B,1]
        outs.push_back(reshape(tape, y_t, Shape{B, 1, 1}));
    }
    return concat(tape, outs, 1);
}

// Standard sinusoidal table: PE(pos, 2i) = sin(pos / 10000^(2i/d)), odd dims cos.
inline Tensor sinusoidal_pe(std::size_t seq_len, std::size_t d_model) {
    if (seq_len < 1 || d_model < 1) throw ParameterError("sinusoidal_pe: dims must be >= 1");
    if (d_model % 2 != 0) throw ParameterError("sinusoidal_pe: d_model must be even");
    Tensor pe = Tensor::zeros(Shape{seq_len, d_model});
    for (std::size_t pos = 0; pos < seq_len; ++pos)
        for (std::size_t i = 0; i < d_model / 2; ++i) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d_model));
            const double angle = static_cast<double>(pos) * freq;
            pe.data()[pos * d_model + 2 * i] = std::sin(angle);
            pe.data()[pos * d_model + 2 * i + 1] = std::cos(angle);
        }
    return pe;
}

enum class AttnMask { none, causal };

// Multi-head self-attention. x [B,T,D] -> [B,T,D]. Causal masking adds -1e9
// above the diagonal of the score matrix before softmax.
inline Tensor multi_head_attention(Tape& tape, const Tensor& x, const ModelWeights& w,
                                   const std::string& prefix, std::size_t n_heads, AttnMask mask,
                                   const DropoutState& ds = {}) {
    using detail::weight;
    const Shape& s = x.shape();
    if (s.rank() != 3) throw ShapeError("multi_head_attention: want [B,T,D], got " + s.to_string());
    const std::size_t B = s[0], T = s[1], D = s[2];
    if (D % n_heads != 0) throw ShapeError("multi_head_attention: D not divisible by n_heads");
    const std::size_t dh = D / n_heads;

    Tensor flat = reshape(tape, x, Shape{B * T, D});
    auto project = [&](const char* W, const char* b) {
        Tensor p = detail::linear(tape, flat, weight(w, prefix + ".attn." + W),
                                  weight(w, prefix + ".attn." + b));
        // [B*T,D] -> [B,T,H,dh] -> [B,H,T,dh] -> [B*H,T,dh]
        Tensor r = reshape(tape, p, Shape{B, T, n_heads, dh});
        Tensor pm = permute(tape, r, {0, 2, 1, 3});
        return reshape(tape, pm, Shape{B * n_heads, T, dh});
    };
    Tensor q = project("Wq", "bq");
    Tensor k = project("Wk", "bk");
    Tensor v = project("Wv", "bv");

    Tensor scores = scale(tape, matmul(tape, q, transpose_last2(tape, k)),
                          1.0 / std::sqrt(static_cast<double>(dh)));  // [B*H,T,T]
    if (mask == AttnMask::causal) {
        Tensor bias = Tensor::zeros(Shape{T, T});
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = i + 1; j < T; ++j) bias.data()[i * T + j] = -1e9;
        scores = add(tape, scores, bias);
    }
    Tensor attn = softmax(tape, scores, 2);
    attn = dropout(tape, attn, ds);
    Tensor ctx = matmul(tape, attn, v);  // [B*H,T,dh]
    Tensor merged = reshape(
        tape, permute(tape, reshape(tape, ctx, Shape{B, n_heads, T, dh}), {0, 2, 1, 3}),
        Shape{B * T, D});
    Tensor out = detail::linear(tape, merged, weight(w, prefix + ".attn.Wo"),
                                weight(w, prefix + ".attn.bo"));
    return reshape(tape, out, Shape{B, T, D});
}

// Pre-norm residual block: x + Drop(MHA(LN(x))), then + Drop(FFN(LN(.))).
inline Tensor encoder_layer(Tape& tape, const Tensor& x, const ModelWeights& w,
                            const std::string& prefix, std::size_t n_heads, AttnMask mask,
                            const DropoutState& ds = {}) {
    using detail::weight;
    const Shape& s = x.shape();
    const std::size_t B = s[0], T = s[1], D = s[2];

    Tensor n1 = layer_norm(tape, x, weight(w, prefix + ".ln1.gain"), weight(w, prefix + ".ln1.bias"));
    Tensor a = multi_head_attention(tape, n1, w, prefix, n_heads, mask, ds);
    Tensor y = add(tape, x, dropout(tape, a, ds));

    Tensor n2 = layer_norm(tape, y, weight(w, prefix + ".ln2.gain"), weight(w, prefix + ".ln2.bias"));
    Tensor flat = reshape(tape, n2, Shape{B * T, D});
    Tensor hidden = relu(tape, detail::linear(tape, flat, weight(w, prefix + ".ffn.W1"),
                                              weight(w, prefix + ".ffn.b1")));
    Tensor ff = detail::linear(tape, hidden, weight(w, prefix + ".ffn.W2"),
                               weight(w, prefix + ".ffn.b2"));
    return add(tape, y, dropout(tape, reshape(tape, ff, Shape{B, T, D}), ds));
}

namespace detail {
// Shared encoder trunk. add_pe and mask are the only differences between the
// two transformer variants up to the head.
inline Tensor transformer_trunk(Tape& tape, const Tensor& x, const ModelWeights& w,
                                const ModelSpec& spec, bool add_pe, AttnMask mask,
                                const DropoutState& ds) {
    const Shape& s = x.shape();
    if (s.rank() != 3 || s[2] != spec.input_dim)
        throw ShapeError("transformer: want [B,T," + std::to_string(spec.input_dim) + "], got " +
                         s.to_string());
    const std::size_t B = s[0], T = s[1], D = spec.d_model;
    Tensor flat = reshape(tape, x, Shape{B * T, spec.input_dim});
    Tensor emb = reshape(
        tape, linear(tape, flat, weight(w, "embed.W"), weight(w, "embed.b")), Shape{B, T, D});
    if (add_pe) emb = add(tape, emb, sinusoidal_pe(T, D));
    emb = dropout(tape, emb, ds);
    Tensor h = emb;
    for (std::size_t l = 0; l < spec.n_layers; ++l)
        h = encoder_layer(tape, h, w, "layer" + std::to_string(l), spec.n_heads, mask, ds);
    return layer_norm(tape, h, weight(w, "final_ln.gain"), weight(w, "final_ln.bias"));
}
}  // namespace detail

// Vanilla encoder: sinusoidal PE, unmasked attention, last-position head.
// x [B,T,in] -> [B,1].
inline Tensor transformer_vanilla_forward(Tape& tape, const Tensor& x, const ModelWeights& w,
                                          const ModelSpec& spec, const DropoutState& ds = {}) {
    const std::size_t B = x.shape()[0], T = x.shape()[1], D = spec.d_model;
    Tensor h = detail::transformer_trunk(tape, x, w, spec, /*add_pe=*/true, AttnMask::none, ds);
    Tensor last = reshape(tape, slice(tape, h, 1, T - 1, T), Shape{B, D});
    return detail::linear(tape, last, detail::weight(w, "head.W"), detail::weight(w, "head.b"));
}

// Recurrence-free variant: no additive PE, causal attention, per-position head.
// x [B,T,in] -> [B,T,1].
inline Tensor transformer_modified_forward(Tape& tape, const Tensor& x, const ModelWeights& w,
                                           const ModelSpec& spec, const DropoutState& ds = {}) {
    const std::size_t B = x.shape()[0], T = x.shape()[1], D = spec.d_model;
    Tensor h = detail::transformer_trunk(tape, x, w, spec, /*add_pe=*/false, AttnMask::causal, ds);
    Tensor flat = reshape(tape, h, Shape{B * T, D});
    Tensor y = detail::linear(tape, flat, detail::weight(w, "head.W"), detail::weight(w, "head.b"));
    return reshape(tape, y, Shape{B, T, 1});
}

// Dispatch on variant. Output is [B,T,1] for seq2seq variants, [B,1] for vanilla.
inline Tensor model_forward(Tape& tape, const Tensor& x, const ModelWeights& w,
                            const ModelSpec& spec, const DropoutState& ds = {}) {
    switch (spec.variant) {
        case ModelVariant::lstm: return lstm_forward(tape, x, w, spec, ds);
        case ModelVariant::transformer_vanilla:
            return transformer_vanilla_forward(tape, x, w, spec, ds);
        default: return transformer_modified_forward(tape, x, w, spec, ds);
    }
}

}  // namespace hydroseq
