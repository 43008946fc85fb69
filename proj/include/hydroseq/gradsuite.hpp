#pragma once

#include <string>
#include <vector>

#include "hydroseq/gradcheck.hpp"
#include "hydroseq/models.hpp"

namespace hydroseq {

struct GradSuiteRow {
    std::string name;
    double max_rel_err;
    bool pass;
};

// Central-difference checks over every differentiable op and all three
// architectures at tiny specs. Shared by the CLI subcommand and the
// acceptance suite.
inline std::vector<GradSuiteRow> run_grad_suite(double h = 1e-5, double tol = 1e-4) {
    std::vector<GradSuiteRow> rows;
    RngStream rng(20240901);

    auto check = [&](const std::string& name, const TensorFn& f, std::vector<Tensor> inputs) {
        GradCheckReport rep = grad_check(f, std::move(inputs), h, tol);
        rows.push_back({name, rep.max_rel_err, rep.pass});
    };
    auto rnd = [&](Shape s) { return Tensor::uniform(s, -1.0, 1.0, rng); };

    check("matmul_2d",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, matmul(t, xs[0], xs[1]));
          },
          {rnd({5, 4}), rnd({4, 3})});
    check("matmul_batched",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, matmul(t, xs[0], xs[1]));
          },
          {rnd({2, 3, 4}), rnd({2, 4, 2})});
    check("add",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, mul(t, add(t, xs[0], xs[1]), xs[0]));
          },
          {rnd({2, 3}), rnd({2, 3})});
    check("sub_mul",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, mul(t, sub(t, xs[0], xs[1]), xs[1]));
          },
          {rnd({3, 3}), rnd({3, 3})});
    check("add_broadcast",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor s = add(t, xs[0], xs[1]);
              return sum_all(t, mul(t, s, s));
          },
          {rnd({2, 3}), rnd({1, 3})});
    check("mul_broadcast_vector",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, mul(t, mul(t, xs[0], xs[1]), xs[0]));
          },
          {rnd({2, 2, 3}), rnd({3})});
    check("sigmoid",
          [](Tape& t, const std::vector<Tensor>& xs) { return sum_all(t, sigmoid(t, xs[0])); },
          {rnd({4, 4})});
    check("tanh",
          [](Tape& t, const std::vector<Tensor>& xs) { return sum_all(t, tanh_op(t, xs[0])); },
          {rnd({4, 4})});
    check("relu",
          // kept away from the kink at 0, where finite differences are invalid
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, mul(t, relu(t, xs[0]), xs[0]));
          },
          {Tensor::uniform(Shape{4, 4}, 0.1, 1.0, rng)});
    check("softmax",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = softmax(t, xs[0], 1);
              return sum_all(t, mul(t, y, xs[0]));
          },
          {rnd({3, 5})});
    check("softmax_axis0",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = softmax(t, xs[0], 0);
              return sum_all(t, mul(t, y, xs[0]));
          },
          {rnd({4, 3})});
    check("layer_norm",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = layer_norm(t, xs[0], xs[1], xs[2]);
              return sum_all(t, mul(t, y, y));
          },
          {rnd({3, 4}), rnd({4}), rnd({4})});
    check("reduce_sum_axis",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = reduce(t, ReduceKind::sum, xs[0], 1);
              return sum_all(t, mul(t, y, y));
          },
          {rnd({2, 3, 2})});
    check("reduce_mean_axis",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = reduce(t, ReduceKind::mean, xs[0], 0);
              return sum_all(t, mul(t, y, y));
          },
          {rnd({3, 4})});
    check("mean_all",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor y = mean_all(t, mul(t, xs[0], xs[0]));
              return y;
          },
          {rnd({2, 5})});
    check("reshape_slice_concat",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor r = reshape(t, xs[0], Shape{2, 6});
              Tensor a = slice(t, r, 1, 0, 2);
              Tensor b = slice(t, r, 1, 2, 6);
              Tensor c = concat(t, {b, a}, 1);
              return sum_all(t, mul(t, c, c));
          },
          {rnd({3, 4})});
    check("permute",
          [](Tape& t, const std::vector<Tensor>& xs) {
              Tensor p = permute(t, xs[0], {2, 0, 1});
              return sum_all(t, mul(t, p, p));
          },
          {rnd({2, 3, 2})});
    check("scale",
          [](Tape& t, const std::vector<Tensor>& xs) {
              return sum_all(t, scale(t, mul(t, xs[0], xs[0]), -2.5));
          },
          {rnd({3, 3})});

    // architectures at tiny specs: d_model=4, heads=2, layers=2, lstm hidden=4,
    // T=3, batch=2
    const std::size_t T = 3, B = 2, in = 3;

    {
        ModelSpec spec;
        spec.variant = ModelVariant::lstm;
        spec.input_dim = in;
        spec.hidden_dim = 4;
        spec.seq_len = T;
        spec.dropout_rate = 0.0;
        RngStream wrng = rng.split(101);
        ModelWeights w = init_weights(spec, wrng);
        std::vector<Tensor> inputs;
        std::vector<std::string> names;
        for (auto& [name, tns] : w) {
            inputs.push_back(tns);
            names.push_back(name);
        }
        Tensor x = rnd({B, T, in});
        check("arch_lstm",
              [&, x](Tape& t, const std::vector<Tensor>& xs) {
                  ModelWeights wm;
                  for (std::size_t i = 0; i < xs.size(); ++i) wm[names[i]] = xs[i];
                  Tensor y = lstm_forward(t, x, wm, spec);
                  return sum_all(t, mul(t, y, y));
              },
              inputs);
    }
    for (ModelVariant v : {ModelVariant::transformer_vanilla, ModelVariant::transformer_modified}) {
        ModelSpec spec;
        spec.variant = v;
        spec.input_dim = in;
        spec.d_model = 4;
        spec.n_heads = 2;
        spec.n_layers = 2;
        spec.d_ff = 8;
        spec.seq_len = T;
        spec.dropout_rate = 0.0;
        RngStream wrng = rng.split(v == ModelVariant::transformer_vanilla ? 102 : 103);
        ModelWeights w = init_weights(spec, wrng);
        std::vector<Tensor> inputs;
        std::vector<std::string> names;
        for (auto& [name, tns] : w) {
            inputs.push_back(tns);
            names.push_back(name);
        }
        Tensor x = rnd({B, T, in});
        check(v == ModelVariant::transformer_vanilla ? "arch_transformer_vanilla"
                                                     : "arch_transformer_modified",
              [&, x, spec](Tape& t, const std::vector<Tensor>& xs) {
                  ModelWeights wm;
                  for (std::size_t i = 0; i < xs.size(); ++i) wm[names[i]] = xs[i];
                  Tensor y = model_forward(t, x, wm, spec);
                  return sum_all(t, mul(t, y, y));
              },
              inputs);
    }
    return rows;
}

}  // namespace hydroseq
