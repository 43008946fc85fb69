#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "hydroseq/tensor.hpp"

namespace hydroseq {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_input = 0;    // which input tensor
    std::size_t worst_element = 0;  // flat index within it
    double tol = 0.0;
    bool pass = false;
};

// Scalar-valued function of several tensors, evaluated on a caller-supplied tape.
using TensorFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of f against central finite differences
// (f(x+h) - f(x-h)) / 2h per element. Relative error per element:
// |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-5). The absolute floor in the
// denominator keeps finite-difference cancellation noise (~1e-11 for doubles
// at h=1e-5) from dominating on analytically zero gradients, e.g. attention
// key biases, whose constant score shift cancels inside softmax.
inline GradCheckReport grad_check(const TensorFn& f, std::vector<Tensor> inputs,
                                  double h = 1e-5, double tol = 1e-4) {
    if (!(h > 0)) throw ParameterError("grad_check: h must be > 0");

    for (Tensor& x : inputs) x.set_requires_grad(true);

    // Reverse-mode gradients.
    std::vector<std::vector<double>> ad;
    {
        Tape tape;
        Tensor loss = f(tape, inputs);
        if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
        tape.backward(loss);
        for (Tensor& x : inputs) ad.push_back(x.grad());
    }

    GradCheckReport rep;
    rep.tol = tol;
    Tape eval_tape;
    Tape::NoGradGuard guard(eval_tape);
    auto eval = [&](const std::vector<Tensor>& xs) { return f(eval_tape, xs).item(); };

    for (std::size_t xi = 0; xi < inputs.size(); ++xi) {
        std::vector<Tensor> probe;
        for (const Tensor& x : inputs) probe.push_back(x.detached_copy());
        for (std::size_t e = 0; e < inputs[xi].numel(); ++e) {
            const double x0 = probe[xi].data()[e];
            probe[xi].data()[e] = x0 + h;
            const double fp = eval(probe);
            probe[xi].data()[e] = x0 - h;
            const double fm = eval(probe);
            probe[xi].data()[e] = x0;
            const double fd = (fp - fm) / (2.0 * h);
            const double ga = ad[xi][e];
            const double rel = std::abs(ga - fd) / (std::abs(ga) + std::abs(fd) + 1e-5);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = xi;
                rep.worst_element = e;
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

// Single-input convenience overload.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                                  const Tensor& x, double h = 1e-5, double tol = 1e-4) {
    return grad_check([&f](Tape& t, const std::vector<Tensor>& xs) { return f(t, xs[0]); }, {x},
                      h, tol);
}

}  // namespace hydroseq
