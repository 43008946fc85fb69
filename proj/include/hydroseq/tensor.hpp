#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "hydroseq/common.hpp"
#include "hydroseq/rng.hpp"

namespace hydroseq {

struct Shape {
    std::vector<std::size_t> dims;

    Shape() = default;
    Shape(std::initializer_list<std::size_t> d) : dims(d) {}
    explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) {}

    std::size_t rank() const { return dims.size(); }
    std::size_t operator[](std::size_t i) const { return dims[i]; }

    std::size_t numel() const {
        std::size_t n = 1;
        for (std::size_t d : dims) n *= d;
        return n;
    }

    void validate() const {
        if (dims.empty()) throw ShapeError("shape: rank must be >= 1");
        for (std::size_t d : dims)
            if (d == 0) throw ShapeError("shape: every dim must be >= 1");
    }

    std::vector<std::size_t> strides() const {
        std::vector<std::size_t> s(dims.size());
        std::size_t acc = 1;
        for (std::size_t i = dims.size(); i-- > 0;) {
            s[i] = acc;
            acc *= dims[i];
        }
        return s;
    }

    std::string to_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < dims.size(); ++i)
            s += (i ? "," : "") + std::to_string(dims[i]);
        return s + "]";
    }

    friend bool operator==(const Shape& a, const Shape& b) { return a.dims == b.dims; }
    friend bool operator!=(const Shape& a, const Shape& b) { return !(a == b); }
};

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data iff requires_grad
    bool requires_grad = false;
    int tape_node = -1;  // producing node on the tape, -1 for leaves
};
}  // namespace detail

// Dense float64 tensor, value-semantic handle to shared storage. Gradients
// accumulate into grad and are zeroed by the caller, never by backward.
class Tensor {
  public:
    Tensor() : p_(std::make_shared<detail::TensorImpl>()) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return filled(shape, 0.0, requires_grad);
    }

    static Tensor full(const Shape& shape, double value, bool requires_grad = false) {
        return filled(shape, value, requires_grad);
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false) {
        shape.validate();
        if (data.size() != shape.numel())
            throw ShapeError("from_data: buffer length " + std::to_string(data.size()) +
                             " != numel of " + shape.to_string());
        Tensor t;
        t.p_->shape = shape;
        t.p_->data = std::move(data);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor uniform(const Shape& shape, double a, double b, RngStream& rng,
                          bool requires_grad = false) {
        if (!(a < b)) throw ParameterError("uniform init: require a < b");
        Tensor t = zeros(shape, requires_grad);
        for (double& v : t.p_->data) v = rng.uniform(a, b);
        return t;
    }

    static Tensor gaussian(const Shape& shape, double mu, double sigma, RngStream& rng,
                           bool requires_grad = false) {
        if (!(sigma > 0)) throw ParameterError("gaussian init: require sigma > 0");
        Tensor t = zeros(shape, requires_grad);
        for (double& v : t.p_->data) v = rng.gaussian(mu, sigma);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data(Shape{1}, {v}, requires_grad);
    }

    const Shape& shape() const { return p_->shape; }
    std::size_t numel() const { return p_->data.size(); }
    bool requires_grad() const { return p_->requires_grad; }

    void set_requires_grad(bool rg) {
        p_->requires_grad = rg;
        if (rg)
            p_->grad.assign(p_->data.size(), 0.0);
        else
            p_->grad.clear();
    }

    std::vector<double>& data() { return p_->data; }
    const std::vector<double>& data() const { return p_->data; }
    std::vector<double>& grad() {
        if (!p_->requires_grad) throw ContractError("grad(): tensor has requires_grad=false");
        return p_->grad;
    }
    const std::vector<double>& grad() const {
        if (!p_->requires_grad) throw ContractError("grad(): tensor has requires_grad=false");
        return p_->grad;
    }
    void zero_grad() { std::fill(p_->grad.begin(), p_->grad.end(), 0.0); }

    double item() const {
        if (numel() != 1) throw ContractError("item(): tensor is not scalar");
        return p_->data[0];
    }

    // Value copy detached from any tape.
    Tensor detached_copy() const {
        Tensor t;
        t.p_->shape = p_->shape;
        t.p_->data = p_->data;
        return t;
    }

    std::shared_ptr<detail::TensorImpl> impl() const { return p_; }

  private:
    static Tensor filled(const Shape& shape, double value, bool requires_grad) {
        shape.validate();
        Tensor t;
        t.p_->shape = shape;
        t.p_->data.assign(shape.numel(), value);
        t.set_requires_grad(requires_grad);
        return t;
    }

    std::shared_ptr<detail::TensorImpl> p_;
};

// Dynamic tape: append-only node list recorded during the forward pass,
// replayed in exact reverse order by backward() and then freed.
class Tape {
  public:
    struct Node {
        std::string op;
        std::vector<int> input_nodes;
        std::function<void()> backward;
    };

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    int record(std::string op, const std::vector<Tensor>& inputs, const Tensor& output,
               std::function<void()> backward_fn) {
        std::vector<int> ids;
        ids.reserve(inputs.size());
        for (const Tensor& t : inputs) ids.push_back(t.impl()->tape_node);
        nodes_.push_back(Node{std::move(op), std::move(ids), std::move(backward_fn)});
        const int id = static_cast<int>(nodes_.size()) - 1;
        output.impl()->tape_node = id;
        return id;
    }

    // Runs reverse-mode accumulation from a scalar loss and frees the tape.
    void backward(Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
        if (!loss.requires_grad())
            throw ContractError("backward: loss does not require grad (no differentiable path)");
        loss.grad()[0] += 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;)
            if (nodes_[i].backward) nodes_[i].backward();
        nodes_.clear();
    }

    // Line-oriented dump: "id op in0 in1 ..." (leaf inputs print as -1).
    void dump(std::ostream& os) const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            os << i << ' ' << nodes_[i].op;
            for (int id : nodes_[i].input_nodes) os << ' ' << id;
            os << '\n';
        }
    }

    struct NoGradGuard {
        explicit NoGradGuard(Tape& t) : tape(t), prev(t.recording_) { t.recording_ = false; }
        ~NoGradGuard() { tape.recording_ = prev; }
        Tape& tape;
        bool prev;
    };

  private:
    std::vector<Node> nodes_;
    bool recording_ = true;
};

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<const Tensor*> ins) {
    if (!tape.recording()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(const Shape& shape, bool requires_grad) {
    return Tensor::zeros(shape, requires_grad);
}

// Trailing-dimension broadcast: b's dims are right-aligned against a's; each
// aligned dim must equal a's or be 1 (a stretched dim contributes stride 0).
// Returns per-a-dim strides into b, or throws.
inline std::vector<std::size_t> broadcast_strides(const Shape& a, const Shape& b) {
    const std::size_t ra = a.rank(), rb = b.rank();
    if (rb > ra)
        throw ShapeError("broadcast: rank of " + b.to_string() + " exceeds " + a.to_string());
    const std::vector<std::size_t> bs = b.strides();
    std::vector<std::size_t> out(ra, 0);
    for (std::size_t i = 0; i < rb; ++i) {
        const std::size_t ai = ra - rb + i;
        if (b[i] == a[ai])
            out[ai] = bs[i];
        else if (b[i] == 1)
            out[ai] = 0;
        else
            throw ShapeError("broadcast: cannot align " + b.to_string() + " to " + a.to_string());
    }
    return out;
}

// Odometer walk over a's index space yielding the mapped flat index into b.
template <class F>
inline void for_each_broadcast(const Shape& a, const std::vector<std::size_t>& b_strides, F&& f) {
    const std::size_t ra = a.rank();
    std::vector<std::size_t> idx(ra, 0);
    const std::size_t n = a.numel();
    std::size_t bflat = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, bflat);
        for (std::size_t d = ra; d-- > 0;) {
            idx[d]++;
            bflat += b_strides[d];
            if (idx[d] < a[d]) break;
            bflat -= b_strides[d] * a[d];
            idx[d] = 0;
        }
    }
}

}  // namespace detail

enum class EwiseOp { add, sub, mul };

inline Tensor ewise(Tape& tape, EwiseOp op, const Tensor& a, const Tensor& b) {
    const bool rg = detail::want_grad(tape, {&a, &b});
    Tensor out = detail::make_output(a.shape(), rg);
    const std::size_t n = a.numel();
    const auto& ad = a.data();
    const auto& bd = b.data();
    auto& od = out.data();

    if (a.shape() == b.shape()) {
        switch (op) {
            case EwiseOp::add:
                for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
                break;
            case EwiseOp::sub:
                for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] - bd[i];
                break;
            case EwiseOp::mul:
                for (std::size_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i];
                break;
        }
        if (rg) {
            auto ai = a.impl(), bi = b.impl(), oi = out.impl();
            tape.record(op == EwiseOp::add ? "add" : op == EwiseOp::sub ? "sub" : "mul", {a, b},
                        out, [ai, bi, oi, op, n]() {
                            const auto& g = oi->grad;
                            if (ai->requires_grad) {
                                for (std::size_t i = 0; i < n; ++i)
                                    ai->grad[i] += (op == EwiseOp::mul) ? g[i] * bi->data[i] : g[i];
                            }
                            if (bi->requires_grad) {
                                for (std::size_t i = 0; i < n; ++i) {
                                    double gb = (op == EwiseOp::mul) ? g[i] * ai->data[i]
                                                : (op == EwiseOp::sub) ? -g[i]
                                                                       : g[i];
                                    bi->grad[i] += gb;
                                }
                            }
                        });
        }
        return out;
    }

    const auto bstr = detail::broadcast_strides(a.shape(), b.shape());
    detail::for_each_broadcast(a.shape(), bstr, [&](std::size_t i, std::size_t bi_) {
        switch (op) {
            case EwiseOp::add: od[i] = ad[i] + bd[bi_]; break;
            case EwiseOp::sub: od[i] = ad[i] - bd[bi_]; break;
            case EwiseOp::mul: od[i] = ad[i] * bd[bi_]; break;
        }
    });
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        Shape ashape = a.shape();
        tape.record("ewise_bcast", {a, b}, out, [ai, bi, oi, op, ashape, bstr]() {
            const auto& g = oi->grad;
            detail::for_each_broadcast(ashape, bstr, [&](std::size_t i, std::size_t j) {
                if (ai->requires_grad)
                    ai->grad[i] += (op == EwiseOp::mul) ? g[i] * bi->data[j] : g[i];
                if (bi->requires_grad) {
                    double gb = (op == EwiseOp::mul) ? g[i] * ai->data[i]
                                : (op == EwiseOp::sub) ? -g[i]
                                                       : g[i];
                    bi->grad[j] += gb;  // summed over stretched dims
                }
            });
        });
    }
    return out;
}

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return ewise(t, EwiseOp::add, a, b); }
inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return ewise(t, EwiseOp::sub, a, b); }
inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return ewise(t, EwiseOp::mul, a, b); }

// x * c for scalar constant c.
inline Tensor scale(Tape& tape, const Tensor& x, double c) {
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(x.shape(), rg);
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record("scale", {x}, out, [xi, oi, c, n]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

namespace detail {
// C[m,n] += A[m,k] * B[k,n]
inline void mm_accum(const double* A, const double* B, double* C, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* Ci = C + i * n;
        const double* Ai = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double a = Ai[p];
            if (a == 0.0) continue;
            const double* Bp = B + p * n;
            for (std::size_t j = 0; j < n; ++j) Ci[j] += a * Bp[j];
        }
    }
}
// dA[m,k] += dC[m,n] * B^T  (dA[i,p] = sum_j dC[i,j] B[p,j])
inline void mm_accum_abt(const double* dC, const double* B, double* dA, std::size_t m,
                         std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* gi = dC + i * n;
        double* dAi = dA + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* Bp = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gi[j] * Bp[j];
            dAi[p] += acc;
        }
    }
}
// dB[k,n] += A^T * dC  (dB[p,j] = sum_i A[i,p] dC[i,j])
inline void mm_accum_atb(const double* A, const double* dC, double* dB, std::size_t m,
                         std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* Ai = A + i * k;
        const double* gi = dC + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double a = Ai[p];
            if (a == 0.0) continue;
            double* dBp = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) dBp[j] += a * gi[j];
        }
    }
}
}  // namespace detail

// [m,k]x[k,n] -> [m,n], or batched [B,m,k]x[B,k,n] -> [B,m,n].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    std::size_t batch = 1, m, k, n;
    Shape oshape;
    if (sa.rank() == 2 && sb.rank() == 2) {
        m = sa[0], k = sa[1], n = sb[1];
        if (sb[0] != k)
            throw ShapeError("matmul: inner dims disagree, " + sa.to_string() + " x " +
                             sb.to_string());
        oshape = Shape{m, n};
    } else if (sa.rank() == 3 && sb.rank() == 3) {
        batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
        if (sb[0] != batch || sb[1] != k)
            throw ShapeError("matmul: batched dims disagree, " + sa.to_string() + " x " +
                             sb.to_string());
        oshape = Shape{batch, m, n};
    } else {
        throw ShapeError("matmul: want 2-D or 3-D operands, got " + sa.to_string() + " x " +
                         sb.to_string());
    }

    const bool rg = detail::want_grad(tape, {&a, &b});
    Tensor out = detail::make_output(oshape, rg);
    for (std::size_t bb = 0; bb < batch; ++bb)
        detail::mm_accum(a.data().data() + bb * m * k, b.data().data() + bb * k * n,
                         out.data().data() + bb * m * n, m, k, n);
    if (rg) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        tape.record("matmul", {a, b}, out, [ai, bi, oi, batch, m, k, n]() {
            for (std::size_t bb = 0; bb < batch; ++bb) {
                const double* A = ai->data.data() + bb * m * k;
                const double* B = bi->data.data() + bb * k * n;
                const double* G = oi->grad.data() + bb * m * n;
                if (ai->requires_grad)
                    detail::mm_accum_abt(G, B, ai->grad.data() + bb * m * k, m, k, n);
                if (bi->requires_grad)
                    detail::mm_accum_atb(A, G, bi->grad.data() + bb * k * n, m, k, n);
            }
        });
    }
    return out;
}

enum class ActKind { sigmoid, tanh, relu };

namespace detail {
// Test hook: flips the sign of the sigmoid backward rule so the gradient
// checker's negative control has a real fault to catch.
inline bool& corrupt_sigmoid_backward() {
    static bool flag = false;
    return flag;
}
}  // namespace detail

inline Tensor activation(Tape& tape, ActKind kind, const Tensor& x) {
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(x.shape(), rg);
    const std::size_t n = x.numel();
    const auto& xd = x.data();
    auto& od = out.data();
    switch (kind) {
        case ActKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i) od[i] = 1.0 / (1.0 + std::exp(-xd[i]));
            break;
        case ActKind::tanh:
            for (std::size_t i = 0; i < n; ++i) od[i] = std::tanh(xd[i]);
            break;
        case ActKind::relu:
            for (std::size_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
            break;
    }
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(kind == ActKind::sigmoid ? "sigmoid"
                    : kind == ActKind::tanh  ? "tanh"
                                             : "relu",
                    {x}, out, [xi, oi, kind, n]() {
                        const auto& y = oi->data;
                        const auto& g = oi->grad;
                        for (std::size_t i = 0; i < n; ++i) {
                            double d;
                            switch (kind) {
                                case ActKind::sigmoid:
                                    d = y[i] * (1.0 - y[i]);
                                    if (detail::corrupt_sigmoid_backward()) d = -d;
                                    break;
                                case ActKind::tanh: d = 1.0 - y[i] * y[i]; break;
                                default: d = y[i] > 0.0 ? 1.0 : 0.0; break;  // relu'(0) := 0
                            }
                            xi->grad[i] += g[i] * d;
                        }
                    });
    }
    return out;
}

inline Tensor sigmoid(Tape& t, const Tensor& x) { return activation(t, ActKind::sigmoid, x); }
inline Tensor tanh_op(Tape& t, const Tensor& x) { return activation(t, ActKind::tanh, x); }
inline Tensor relu(Tape& t, const Tensor& x) { return activation(t, ActKind::relu, x); }

namespace detail {
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
    if (axis >= s.rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + s.to_string());
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
}
}  // namespace detail

// Numerically stable softmax along one axis (max subtraction).
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(x.shape(), rg);
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -HUGE_VAL;
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
            double sum = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(xd[base + j * inner] - mx);
                od[base + j * inner] = e;
                sum += e;
            }
            for (std::size_t j = 0; j < len; ++j) od[base + j * inner] /= sum;
        }
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record("softmax", {x}, out, [xi, oi, outer, len, inner]() {
            const auto& y = oi->data;
            const auto& g = oi->grad;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j)
                        dot += g[base + j * inner] * y[base + j * inner];
                    for (std::size_t j = 0; j < len; ++j) {
                        const std::size_t idx = base + j * inner;
                        xi->grad[idx] += y[idx] * (g[idx] - dot);
                    }
                }
        });
    }
    return out;
}

// Normalizes over the last dimension: (x - mu)/sqrt(var + eps) * gain + bias.
// gain and bias are vectors of the last-dim extent; var is the population form.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (!(eps > 0)) throw ParameterError("layer_norm: eps must be > 0");
    const Shape& s = x.shape();
    const std::size_t d = s[s.rank() - 1];
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    const std::size_t slices = x.numel() / d;
    const bool rg = detail::want_grad(tape, {&x, &gain, &bias});
    Tensor out = detail::make_output(s, rg);

    std::vector<double> inv_std(slices), xhat;
    if (rg) xhat.resize(x.numel());
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    auto& od = out.data();
    for (std::size_t sidx = 0; sidx < slices; ++sidx) {
        const std::size_t base = sidx * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xd[base + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xd[base + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[sidx] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xd[base + j] - mu) * is;
            if (rg) xhat[base + j] = xh;
            od[base + j] = xh * gd[j] + bd[j];
        }
    }
    if (rg) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        tape.record("layer_norm", {x, gain, bias}, out,
                    [xi, gi, bi, oi, slices, d, inv_std = std::move(inv_std),
                     xhat = std::move(xhat)]() {
                        const auto& g = oi->grad;
                        for (std::size_t sidx = 0; sidx < slices; ++sidx) {
                            const std::size_t base = sidx * d;
                            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                            for (std::size_t j = 0; j < d; ++j) {
                                const double dxh = g[base + j] * gi->data[j];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[base + j];
                            }
                            mean_dxh /= static_cast<double>(d);
                            mean_dxh_xh /= static_cast<double>(d);
                            for (std::size_t j = 0; j < d; ++j) {
                                const std::size_t idx = base + j;
                                if (xi->requires_grad) {
                                    const double dxh = g[idx] * gi->data[j];
                                    xi->grad[idx] += inv_std[sidx] *
                                                     (dxh - mean_dxh - xhat[idx] * mean_dxh_xh);
                                }
                                if (gi->requires_grad) gi->grad[j] += g[idx] * xhat[idx];
                                if (bi->requires_grad) bi->grad[j] += g[idx];
                            }
                        }
                    });
    }
    return out;
}

enum class ReduceKind { sum, mean };

// Reduction over one axis; the axis is dropped unless it is the only one,
// in which case the result is a scalar of shape [1].
inline Tensor reduce(Tape& tape, ReduceKind kind, const Tensor& x, std::size_t axis) {
    std::size_t outer, len, inner;
    detail::axis_split(x.shape(), axis, outer, len, inner);
    std::vector<std::size_t> odims;
    for (std::size_t i = 0; i < x.shape().rank(); ++i)
        if (i != axis) odims.push_back(x.shape()[i]);
    if (odims.empty()) odims.push_back(1);
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(Shape(odims), rg);
    const double denom = kind == ReduceKind::mean ? static_cast<double>(len) : 1.0;
    const auto& xd = x.data();
    auto& od = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            for (std::size_t j = 0; j < len; ++j) acc += xd[o * len * inner + j * inner + in];
            od[o * inner + in] = acc / denom;
        }
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(kind == ReduceKind::sum ? "reduce_sum" : "reduce_mean", {x}, out,
                    [xi, oi, outer, len, inner, denom]() {
                        for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t in = 0; in < inner; ++in) {
                                const double g = oi->grad[o * inner + in] / denom;
                                for (std::size_t j = 0; j < len; ++j)
                                    xi->grad[o * len * inner + j * inner + in] += g;
                            }
                    });
    }
    return out;
}

// Full reduction to a scalar [1].
inline Tensor reduce_all(Tape& tape, ReduceKind kind, const Tensor& x) {
    const std::size_t n = x.numel();
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(Shape{1}, rg);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const double denom = kind == ReduceKind::mean ? static_cast<double>(n) : 1.0;
    out.data()[0] = acc / denom;
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record(kind == ReduceKind::sum ? "sum_all" : "mean_all", {x}, out,
                    [xi, oi, n, denom]() {
                        const double g = oi->grad[0] / denom;
                        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += g;
                    });
    }
    return out;
}

inline Tensor sum_all(Tape& t, const Tensor& x) { return reduce_all(t, ReduceKind::sum, x); }
inline Tensor mean_all(Tape& t, const Tensor& x) { return reduce_all(t, ReduceKind::mean, x); }

inline Tensor reshape(Tape& tape, const Tensor& x, const Shape& shape) {
    shape.validate();
    if (shape.numel() != x.numel())
        throw ShapeError("reshape: numel mismatch " + x.shape().to_string() + " -> " +
                         shape.to_string());
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(shape, rg);
    out.data() = x.data();
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        const std::size_t n = x.numel();
        tape.record("reshape", {x}, out, [xi, oi, n]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.rank()) throw ShapeError("concat: axis out of range");
    std::size_t total_axis = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.rank() != s0.rank()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.rank(); ++i)
            if (i != axis && s[i] != s0[i])
                throw ShapeError("concat: non-axis dims differ, " + s.to_string() + " vs " +
                                 s0.to_string());
        total_axis += s[axis];
    }
    std::vector<std::size_t> odims = s0.dims;
    odims[axis] = total_axis;
    bool rg = false;
    if (tape.recording())
        for (const Tensor& p : parts) rg = rg || p.requires_grad();
    Tensor out = detail::make_output(Shape(odims), rg);

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.rank(); ++i) inner *= s0[i];

    std::size_t axis_off = 0;
    for (const Tensor& p : parts) {
        const std::size_t plen = p.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(p.data().begin() + o * plen * inner, p.data().begin() + (o + 1) * plen * inner,
                      out.data().begin() + (o * total_axis + axis_off) * inner);
        axis_off += plen;
    }
    if (rg) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        std::vector<std::size_t> plens;
        for (const Tensor& p : parts) {
            impls.push_back(p.impl());
            plens.push_back(p.shape()[axis]);
        }
        auto oi = out.impl();
        tape.record("concat", parts, out, [impls, plens, oi, outer, inner, total_axis]() {
            std::size_t axis_off = 0;
            for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                const std::size_t plen = plens[pi];
                if (impls[pi]->requires_grad)
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < plen * inner; ++j)
                            impls[pi]->grad[o * plen * inner + j] +=
                                oi->grad[(o * total_axis + axis_off) * inner + j];
                axis_off += plen;
            }
        });
    }
    return out;
}

// Half-open range [start, stop) along one axis.
inline Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t start,
                    std::size_t stop) {
    const Shape& s = x.shape();
    if (axis >= s.rank()) throw ShapeError("slice: axis out of range");
    if (start >= stop || stop > s[axis])
        throw ShapeError("slice: bad range [" + std::to_string(start) + "," +
                         std::to_string(stop) + ") on axis extent " + std::to_string(s[axis]));
    std::vector<std::size_t> odims = s.dims;
    odims[axis] = stop - start;
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(Shape(odims), rg);

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.rank(); ++i) inner *= s[i];
    const std::size_t len = s[axis], olen = stop - start;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(x.data().begin() + (o * len + start) * inner,
                  x.data().begin() + (o * len + stop) * inner,
                  out.data().begin() + o * olen * inner);
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        tape.record("slice", {x}, out, [xi, oi, outer, inner, len, olen, start]() {
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < olen * inner; ++j)
                    xi->grad[(o * len + start) * inner + j] += oi->grad[o * olen * inner + j];
        });
    }
    return out;
}

// Dimension permutation (generalized transpose); pure data movement.
inline Tensor permute(Tape& tape, const Tensor& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.rank()) throw ShapeError("permute: perm length != rank");
    std::vector<bool> seen(s.rank(), false);
    std::vector<std::size_t> odims(s.rank());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= s.rank() || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
        seen[perm[i]] = true;
        odims[i] = s[perm[i]];
    }
    const bool rg = detail::want_grad(tape, {&x});
    Tensor out = detail::make_output(Shape(odims), rg);

    const auto xstr = s.strides();
    const auto ostr = Shape(odims).strides();
    const std::size_t n = x.numel();
    // forward map: out flat index -> x flat index
    std::vector<std::size_t> idx(s.rank(), 0);
    std::size_t xflat = 0;
    auto& od = out.data();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        od[i] = xd[xflat];
        for (std::size_t d = s.rank(); d-- > 0;) {
            idx[d]++;
            xflat += xstr[perm[d]];
            if (idx[d] < odims[d]) break;
            xflat -= xstr[perm[d]] * odims[d];
            idx[d] = 0;
        }
    }
    if (rg) {
        auto xi = x.impl(), oi = out.impl();
        const std::size_t rank = s.rank();
        tape.record("permute", {x}, out, [xi, oi, xstr, perm, odims, n, rank]() {
            std::vector<std::size_t> idx(rank, 0);
            std::size_t xflat = 0;
            for (std::size_t i = 0; i < n; ++i) {
                xi->grad[xflat] += oi->grad[i];
                for (std::size_t d = rank; d-- > 0;) {
                    idx[d]++;
                    xflat += xstr[perm[d]];
                    if (idx[d] < odims[d]) break;
                    xflat -= xstr[perm[d]] * odims[d];
                    idx[d] = 0;
                }
            }
        });
    }
    return out;
}

// Swap the last two dims of a 2-D or 3-D tensor.
inline Tensor transpose_last2(Tape& tape, const Tensor& x) {
    const std::size_t r = x.shape().rank();
    if (r < 2) throw ShapeError("transpose_last2: need rank >= 2");
    std::vector<std::size_t> perm(r);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[r - 2], perm[r - 1]);
    return permute(tape, x, perm);
}

}  // namespace hydroseq
