#include <cmath>
#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "hydroseq/training.hpp"

using namespace hydroseq;

namespace {

std::string tmp_path(const std::string& name) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "hydroseq_test_training";
    fs::create_directories(dir);
    return (dir / name).string();
}

// Small synthetic catchment set shared by the training tests.
std::vector<BasinRecord> synth_records() {
    ReservoirParams base;
    RngStream rng(555);
    return synth_linear_reservoir(3, 500, base, rng);  // 1980-01-01 onward
}

SplitSpec synth_split() {
    SplitSpec s;
    s.train_start = Date::parse("1980-03-01");
    s.train_end = Date::parse("1981-01-31");
    s.test_start = Date::parse("1980-01-01");
    s.test_end = Date::parse("1980-02-28");
    return s;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.learning_rate = 1e-2;
    c.batch_size = 8;
    c.n_iterations = 5;
    c.seq_len = 10;
    c.seed = 42;
    c.eval_every = 1;
    return c;
}

ModelSpec tiny_lstm_spec() {
    ModelSpec s;
    s.variant = ModelVariant::lstm;
    s.hidden_dim = 8;
    s.dropout_rate = 0.0;
    return s;
}

}  // namespace

TEST_CASE("basin_weighted_mse matches a hand loop") {
    Tape t;
    Tensor yhat = Tensor::from_data(Shape{2, 3, 1}, {1.0, 2.0, 3.0, -1.0, 0.5, 4.0});
    Tensor y = Tensor::from_data(Shape{2, 3, 1}, {0.5, 2.5, 3.0, 1.0, 0.0, 0.0});
    Tensor mask = Tensor::from_data(Shape{2, 3, 1}, {1, 1, 1, 1, 1, 0});
    std::vector<double> bstd = {1.0, 0.4};

    // independent oracle: explicit loop over masked elements
    double expect = 0;
    double count = 0;
    const std::vector<double>& yh = yhat.data();
    const std::vector<double>& yy = y.data();
    const std::vector<double>& mm = mask.data();
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t e = s * 3 + i;
            const double d = yh[e] - yy[e];
            expect += mm[e] * d * d / ((bstd[s] + 0.1) * (bstd[s] + 0.1));
            count += mm[e];
        }
    expect /= count;

    Tensor loss = basin_weighted_mse(t, yhat, y, mask, bstd);
    REQUIRE(loss.item() == Catch::Approx(expect).margin(1e-12));

    // masked_mse: constant sigma 0.9 with eps 0.1 makes the weight exactly 1
    double plain = 0;
    for (std::size_t e = 0; e < 6; ++e) {
        const double d = yh[e] - yy[e];
        plain += mm[e] * d * d;
    }
    plain /= count;
    REQUIRE(masked_mse(t, yhat, y, mask).item() == Catch::Approx(plain).margin(1e-12));

    // contract violations
    Tensor zero_mask = Tensor::zeros(Shape{2, 3, 1});
    REQUIRE_THROWS_AS(basin_weighted_mse(t, yhat, y, zero_mask, bstd), TrainingError);
    REQUIRE_THROWS_AS(basin_weighted_mse(t, yhat, y, mask, {1.0}), ShapeError);
    Tensor wrong = Tensor::zeros(Shape{2, 2, 1});
    REQUIRE_THROWS_AS(basin_weighted_mse(t, wrong, y, mask, bstd), ShapeError);
    REQUIRE_THROWS_AS(basin_weighted_mse(t, yhat, y, mask, {1.0, -0.5}), ParameterError);
}

TEST_CASE("basin_weighted_mse gradient ignores masked elements") {
    Tensor yhat = Tensor::from_data(Shape{1, 3, 1}, {1.0, 2.0, 3.0}, /*requires_grad=*/true);
    Tensor y = Tensor::zeros(Shape{1, 3, 1});
    Tensor mask = Tensor::from_data(Shape{1, 3, 1}, {1, 0, 1});
    Tape t;
    Tensor loss = basin_weighted_mse(t, yhat, y, mask, {1.0});
    t.backward(loss);
    REQUIRE(yhat.grad()[1] == 0.0);  // masked element gets no signal
    // d/dyhat of (yhat^2 / 1.21) / 2 = yhat / 1.21
    REQUIRE(yhat.grad()[0] == Catch::Approx(2.0 * 1.0 / 1.21 / 2.0).margin(1e-12));
    REQUIRE(yhat.grad()[2] == Catch::Approx(2.0 * 3.0 / 1.21 / 2.0).margin(1e-12));
}

TEST_CASE("adam_step reproduces a hand-computed three-step sequence") {
    // single parameter vector, loss theta^2 (gradient 2 theta), lr 0.1
    ModelWeights w;
    w["p"] = Tensor::from_data(Shape{2}, {1.0, -3.0}, /*requires_grad=*/true);
    AdamState st;
    const double lr = 0.1;

    // oracle: emulate Adam independently
    std::vector<double> theta = {1.0, -3.0}, m(2, 0.0), v(2, 0.0);
    for (int step = 1; step <= 3; ++step) {
        // set the library gradient from the current library parameter
        for (std::size_t i = 0; i < 2; ++i) w["p"].grad()[i] = 2.0 * w["p"].data()[i];
        adam_step(w, st, lr);
        zero_grads(w);

        for (std::size_t i = 0; i < 2; ++i) {
            const double g = 2.0 * theta[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mhat = m[i] / (1.0 - std::pow(0.9, step));
            const double vhat = v[i] / (1.0 - std::pow(0.999, step));
            theta[i] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
        }
        for (std::size_t i = 0; i < 2; ++i)
            REQUIRE(w["p"].data()[i] == Catch::Approx(theta[i]).margin(1e-12));
    }
    // the very first step moves by ~lr in the negative gradient direction
    REQUIRE(std::abs((1.0 - theta[0]) / lr) > 0.99);  // |delta| ~= lr
    REQUIRE(theta[0] < 1.0);                          // downhill
    REQUIRE(theta[1] > -3.0);

    // NaN gradient is an error
    w["p"].grad()[0] = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(adam_step(w, st, lr), TrainingError);
}

TEST_CASE("clip_gradients: global L2 norm") {
    ModelWeights w;
    w["a"] = Tensor::from_data(Shape{1}, {0.0}, true);
    w["b"] = Tensor::from_data(Shape{1}, {0.0}, true);
    w["a"].grad()[0] = 3.0;
    w["b"].grad()[0] = 4.0;
    REQUIRE(clip_gradients(w, 1.0) == Catch::Approx(5.0));  // returns pre-clip norm
    REQUIRE(w["a"].grad()[0] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(w["b"].grad()[0] == Catch::Approx(0.8).margin(1e-15));
    // below the threshold: untouched
    REQUIRE(clip_gradients(w, 10.0) == Catch::Approx(1.0));
    REQUIRE(w["a"].grad()[0] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE_THROWS_AS(clip_gradients(w, 0.0), ParameterError);

    zero_grads(w);
    REQUIRE(w["a"].grad()[0] == 0.0);
    REQUIRE(w["b"].grad()[0] == 0.0);
}

TEST_CASE("every parameter receives gradient signal in all architectures") {
    auto records = synth_records();
    SplitSpec split = synth_split();
    NormalizationStats stats = compute_norm_stats(records, split, "synthetic");
    const std::size_t width = stats.forcing.size() + stats.attributes.size();

    for (ModelVariant variant : {ModelVariant::lstm, ModelVariant::transformer_vanilla,
                                 ModelVariant::transformer_modified}) {
        ModelSpec spec;
        spec.variant = variant;
        spec.input_dim = width;
        spec.hidden_dim = 8;
        spec.d_model = 8;
        spec.n_heads = 2;
        spec.n_layers = 2;
        spec.d_ff = 16;
        spec.dropout_rate = 0.0;
        spec.seq_len = 10;
        RngStream rng(7);
        ModelWeights w = init_weights(spec, rng);

        const HeadMode head =
            variant == ModelVariant::transformer_vanilla ? HeadMode::seq2one : HeadMode::seq2seq;
        RngStream srng(8);
        Batch batch = make_batch(records, stats, split, 10, 4, srng, head);
        Tape tape;
        Tensor yhat = model_forward(tape, batch.x, w, spec);
        if (variant == ModelVariant::transformer_vanilla)
            yhat = reshape(tape, yhat, Shape{4, 1, 1});
        Tensor loss = basin_weighted_mse(tape, yhat, batch.y, batch.mask, batch.basin_std);
        tape.backward(loss);
        for (auto& [name, param] : w) {
            double asum = 0;
            for (double g : param.grad()) asum += std::abs(g);
            INFO(to_string(variant) << ": parameter " << name);
            REQUIRE(asum > 0.0);
        }
    }
}

TEST_CASE("train: seeded determinism and seed sensitivity") {
    auto records = synth_records();
    SplitSpec split = synth_split();
    TrainConfig config = tiny_config();
    ModelSpec spec = tiny_lstm_spec();

    TrainResult r1 = train(spec, records, split, config, "synthetic");
    TrainResult r2 = train(spec, records, split, config, "synthetic");
    REQUIRE(r1.loss_trace == r2.loss_trace);
    for (const auto& [name, t] : r1.checkpoint.weights)
        REQUIRE(t.data() == r2.checkpoint.weights.at(name).data());  // bit-identical

    TrainConfig other = config;
    other.seed = 43;
    TrainResult r3 = train(spec, records, split, other, "synthetic");
    REQUIRE(r3.checkpoint.weights.at("head.W").data() !=
            r1.checkpoint.weights.at("head.W").data());
}

TEST_CASE("train: loss decreases on the synthetic catchments") {
    auto records = synth_records();
    SplitSpec split = synth_split();
    TrainConfig config = tiny_config();
    config.n_iterations = 60;
    config.learning_rate = 2e-2;
    ModelSpec spec = tiny_lstm_spec();

    TrainResult r = train(spec, records, split, config, "synthetic");
    REQUIRE(r.loss_trace.size() == 60);  // eval_every = 1
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        head += r.loss_trace[i].second;
        tail += r.loss_trace[55 + i].second;
    }
    REQUIRE(tail < head);
    REQUIRE(r.checkpoint.iteration == 60);
    REQUIRE(r.checkpoint.seed == config.seed);
}

TEST_CASE("train: zero iterations yields the initialized model") {
    auto records = synth_records();
    TrainConfig config = tiny_config();
    config.n_iterations = 0;
    TrainResult r = train(tiny_lstm_spec(), records, synth_split(), config, "synthetic");
    REQUIRE(r.loss_trace.empty());
    REQUIRE(r.checkpoint.iteration == 0);
    REQUIRE(r.checkpoint.weights.count("lstm.W_i") == 1);
}

TEST_CASE("train: config validation and divergence reporting") {
    auto records = synth_records();
    SplitSpec split = synth_split();
    TrainConfig config = tiny_config();

    ModelSpec vanilla;
    vanilla.variant = ModelVariant::transformer_vanilla;
    vanilla.d_model = 8;
    vanilla.n_heads = 2;
    vanilla.d_ff = 16;
    config.head_mode = HeadMode::seq2seq;  // unsupported for the vanilla head
    REQUIRE_THROWS_AS(train(vanilla, records, split, config, "synthetic"), ParameterError);

    TrainConfig bad = tiny_config();
    bad.learning_rate = 0.0;
    REQUIRE_THROWS_AS(train(tiny_lstm_spec(), records, split, bad, "synthetic"),
                      ParameterError);

    // an absurd learning rate overflows the squared error within a few steps;
    // the failure must carry the iteration number
    TrainConfig diverge = tiny_config();
    diverge.learning_rate = 1e200;
    diverge.n_iterations = 10;
    try {
        train(tiny_lstm_spec(), records, split, diverge, "synthetic");
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        REQUIRE(std::string(e.what()).find("iteration") != std::string::npos);
    }
}

TEST_CASE("train_ensemble: member isolation and failure reporting") {
    auto records = synth_records();
    SplitSpec split = synth_split();
    TrainConfig config = tiny_config();
    ModelSpec spec = tiny_lstm_spec();

    EnsembleResult ens = train_ensemble(spec, records, split, config, {1, 2, 3}, "synthetic");
    REQUIRE(ens.members.size() == 3);
    REQUIRE(ens.failures.empty());
    for (const auto& m : ens.members) REQUIRE(m.has_value());
    // distinct seeds give distinct members; each member matches a solo run
    REQUIRE(ens.members[0]->checkpoint.weights.at("head.W").data() !=
            ens.members[1]->checkpoint.weights.at("head.W").data());
    TrainConfig solo = config;
    solo.seed = 2;
    TrainResult alone = train(spec, records, split, solo, "synthetic");
    REQUIRE(ens.members[1]->checkpoint.weights.at("head.W").data() ==
            alone.checkpoint.weights.at("head.W").data());

    REQUIRE_THROWS_AS(train_ensemble(spec, records, split, config, {1, 1}, "synthetic"),
                      ParameterError);
    REQUIRE_THROWS_AS(train_ensemble(spec, records, split, config, {}, "synthetic"),
                      ParameterError);

    // failing members are recorded, not fatal
    TrainConfig explode = config;
    explode.learning_rate = 1e200;
    EnsembleResult bad = train_ensemble(spec, records, split, explode, {1, 2}, "synthetic");
    REQUIRE(bad.members.size() == 2);
    REQUIRE(bad.failures.size() == 2);
    REQUIRE_FALSE(bad.members[0].has_value());
}

TEST_CASE("checkpoint: byte-exact round trip") {
    auto records = synth_records();
    TrainResult r = train(tiny_lstm_spec(), records, synth_split(), tiny_config(), "synthetic");
    const std::string path = tmp_path("roundtrip.ckpt");
    save_checkpoint(r.checkpoint, path);
    Checkpoint back = load_checkpoint(path);

    REQUIRE(back.spec.variant == r.checkpoint.spec.variant);
    REQUIRE(back.spec.input_dim == r.checkpoint.spec.input_dim);
    REQUIRE(back.spec.hidden_dim == r.checkpoint.spec.hidden_dim);
    REQUIRE(back.seed == r.checkpoint.seed);
    REQUIRE(back.iteration == r.checkpoint.iteration);
    REQUIRE(back.config.learning_rate == r.checkpoint.config.learning_rate);
    REQUIRE(back.config.seq_len == r.checkpoint.config.seq_len);
    REQUIRE(back.weights.size() == r.checkpoint.weights.size());
    for (const auto& [name, t] : r.checkpoint.weights) {
        REQUIRE(back.weights.at(name).shape() == t.shape());
        REQUIRE(back.weights.at(name).data() == t.data());  // bit-identical
    }
    REQUIRE(back.stats.product == "synthetic");
    REQUIRE(back.stats.forcing.size() == r.checkpoint.stats.forcing.size());
    for (std::size_t i = 0; i < back.stats.forcing.size(); ++i) {
        REQUIRE(back.stats.forcing[i].mean == r.checkpoint.stats.forcing[i].mean);
        REQUIRE(back.stats.forcing[i].std == r.checkpoint.stats.forcing[i].std);
    }
    for (const auto& [id, vs] : r.checkpoint.stats.discharge) {
        REQUIRE(back.stats.discharge.at(id).mean == vs.mean);
        REQUIRE(back.stats.discharge.at(id).std == vs.std);
    }

    // saving twice produces identical bytes
    const std::string path2 = tmp_path("roundtrip2.ckpt");
    save_checkpoint(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
}

TEST_CASE("checkpoint: corrupt files are rejected") {
    auto records = synth_records();
    TrainConfig config = tiny_config();
    config.n_iterations = 0;
    TrainResult r = train(tiny_lstm_spec(), records, synth_split(), config, "synthetic");
    const std::string path = tmp_path("corrupt.ckpt");
    save_checkpoint(r.checkpoint, path);

    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const std::string truncated = tmp_path("truncated.ckpt");
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    REQUIRE_THROWS_AS(load_checkpoint(truncated), IoError);

    const std::string badmagic = tmp_path("badmagic.ckpt");
    std::string flipped = bytes;
    flipped[0] = 'X';
    std::ofstream(badmagic, std::ios::binary) << flipped;
    REQUIRE_THROWS_AS(load_checkpoint(badmagic), IoError);

    const std::string trailing = tmp_path("trailing.ckpt");
    std::ofstream(trailing, std::ios::binary) << bytes << "extra";
    REQUIRE_THROWS_AS(load_checkpoint(trailing), IoError);

    REQUIRE_THROWS_AS(load_checkpoint("/no/such/file.ckpt"), IoError);
}
