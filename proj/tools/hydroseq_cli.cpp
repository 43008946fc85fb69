// hydroseq command-line driver: synthetic data generation, training,
// evaluation, and gradient verification as reproducible batch runs.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hydroseq/data.hpp"
#include "hydroseq/gradsuite.hpp"
#include "hydroseq/metrics.hpp"
#include "hydroseq/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitVerification = 5;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t hash_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw hydroseq::IoError("cannot hash '" + p.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return fnv1a(ss.str());
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct RunConfig {
    // data
    std::map<std::string, std::string> forcing_dirs;  // product -> dir
    std::string streamflow_dir;
    std::string attributes_file;
    std::string basin_manifest;
    std::vector<std::string> products;
    // model + training
    hydroseq::ModelSpec model;
    hydroseq::TrainConfig train;
    hydroseq::SplitSpec split;
    std::vector<std::uint64_t> seeds;
    std::string out_dir;
    json raw;
};

std::string resolve_path(const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    if (const char* root = std::getenv("HYDROSEQ_DATA_ROOT"))
        if (*root) return (fs::path(root) / p).string();
    return p;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw hydroseq::IoError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
        throw hydroseq::ParseError("config '" + path + "': " + e.what());
    }
    RunConfig c;
    c.raw = j;
    const json& data = j.at("data");
    for (const auto& [prod, dir] : data.at("forcing_dirs").items())
        c.forcing_dirs[prod] = resolve_path(dir.get<std::string>());
    c.streamflow_dir = resolve_path(data.at("streamflow_dir").get<std::string>());
    c.attributes_file = resolve_path(data.at("attributes_file").get<std::string>());
    c.basin_manifest = resolve_path(data.at("basin_manifest").get<std::string>());
    c.products = j.at("products").get<std::vector<std::string>>();
    if (c.products.empty()) throw hydroseq::ParameterError("config: products list is empty");
    for (const std::string& p : c.products)
        if (!c.forcing_dirs.count(p))
            throw hydroseq::ParameterError("config: product '" + p + "' has no forcing_dir");

    const json& m = j.at("model");
    c.model.variant = hydroseq::variant_from_string(m.at("variant").get<std::string>());
    c.model.hidden_dim = m.value("hidden_dim", std::size_t{64});
    c.model.d_model = m.value("d_model", std::size_t{64});
    c.model.n_heads = m.value("n_heads", std::size_t{4});
    c.model.n_layers = m.value("n_layers", std::size_t{2});
    c.model.d_ff = m.value("d_ff", std::size_t{128});
    c.model.dropout_rate = m.value("dropout_rate", 0.1);

    const json& t = j.at("train");
    c.train.learning_rate = t.value("learning_rate", 1e-3);
    c.train.batch_size = t.value("batch_size", std::size_t{256});
    c.train.n_iterations = t.value("n_iterations", std::size_t{1000});
    c.train.seq_len = t.value("seq_len", std::size_t{365});
    c.train.clip_norm = t.value("clip_norm", 1.0);
    c.train.eval_every = t.value("eval_every", std::size_t{50});
    c.train.plain_mse = t.value("plain_mse", false);
    c.model.input_dim = 1;  // resolved from the data at train time
    c.model.seq_len = c.train.seq_len;
    std::string head = t.value(
        "head_mode",
        c.model.variant == hydroseq::ModelVariant::transformer_vanilla ? "seq2one" : "seq2seq");
    c.train.head_mode = head == "seq2one" ? hydroseq::HeadMode::seq2one
                                          : hydroseq::HeadMode::seq2seq;

    const json& s = j.at("split");
    c.split.train_start = hydroseq::Date::parse(s.at("train_start").get<std::string>());
    c.split.train_end = hydroseq::Date::parse(s.at("train_end").get<std::string>());
    c.split.test_start = hydroseq::Date::parse(s.at("test_start").get<std::string>());
    c.split.test_end = hydroseq::Date::parse(s.at("test_end").get<std::string>());
    c.split.validate();

    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (c.seeds.empty()) throw hydroseq::ParameterError("config: seeds list is empty");
    for (std::size_t i = 0; i < c.seeds.size(); ++i)
        for (std::size_t k = i + 1; k < c.seeds.size(); ++k)
            if (c.seeds[i] == c.seeds[k])
                throw hydroseq::ParameterError("config: seeds must be distinct");
    c.out_dir = j.at("out_dir").get<std::string>();
    return c;
}

// Loads the manifest's basins, ingests every configured product, fuses them.
std::vector<hydroseq::BasinRecord> load_dataset(const RunConfig& c) {
    std::ifstream manifest(c.basin_manifest);
    if (!manifest) throw hydroseq::IoError("cannot open manifest '" + c.basin_manifest + "'");
    std::vector<std::string> basin_ids;
    std::string line;
    while (std::getline(manifest, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) basin_ids.push_back(line);
    }
    if (basin_ids.empty()) throw hydroseq::IngestionError("manifest lists no basins");

    // attributes: basin_id, area_km2, attr1, ...
    std::ifstream attrs(c.attributes_file);
    if (!attrs) throw hydroseq::IoError("cannot open attributes '" + c.attributes_file + "'");
    std::map<std::string, std::pair<double, std::vector<double>>> attr_map;
    std::getline(attrs, line);  // header
    std::size_t line_no = 1;
    while (std::getline(attrs, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cols = hydroseq::detail::split_csv(line);
        if (cols.size() < 2)
            throw hydroseq::ParseError(c.attributes_file + ":" + std::to_string(line_no) +
                                       ": want basin_id,area_km2,attrs...");
        std::vector<double> a;
        for (std::size_t i = 2; i < cols.size(); ++i)
            a.push_back(hydroseq::detail::parse_num(cols[i], c.attributes_file, line_no));
        attr_map[cols[0]] = {hydroseq::detail::parse_num(cols[1], c.attributes_file, line_no),
                             std::move(a)};
    }

    std::vector<hydroseq::BasinRecord> records;
    for (const std::string& id : basin_ids) {
        auto it = attr_map.find(id);
        if (it == attr_map.end())
            throw hydroseq::IngestionError("basin '" + id + "' missing from attributes file");
        const std::string& first = c.products[0];
        hydroseq::BasinRecord rec = hydroseq::ingest_basin(
            first, (fs::path(c.forcing_dirs.at(first)) / (id + ".csv")).string(),
            (fs::path(c.streamflow_dir) / (id + ".csv")).string(), id, it->second.first,
            it->second.second);
        for (std::size_t p = 1; p < c.products.size(); ++p)
            hydroseq::add_forcing_product(
                rec, c.products[p],
                (fs::path(c.forcing_dirs.at(c.products[p])) / (id + ".csv")).string());
        records.push_back(std::move(rec));
    }
    return hydroseq::fuse_forcings(records, c.products);
}

std::string fused_product_name(const std::vector<std::string>& products) {
    std::string name = products[0];
    for (std::size_t i = 1; i < products.size(); ++i) name += "+" + products[i];
    return name;
}

int cmd_generate_synthetic(const std::string& out_dir, std::size_t n_basins, std::size_t n_days,
                           double k, double et_rate, std::uint64_t seed) {
    hydroseq::ReservoirParams params;
    params.k = k;
    params.et_rate = et_rate;
    hydroseq::RngStream rng(seed);
    const auto records = hydroseq::synth_linear_reservoir(n_basins, n_days, params, rng);

    const fs::path root(out_dir);
    std::error_code ec;
    fs::create_directories(root / "forcing" / "synthetic", ec);
    fs::create_directories(root / "streamflow", ec);
    if (ec) throw hydroseq::IoError("cannot create output dirs under '" + out_dir + "'");

    std::ofstream attrs(root / "attributes.csv");
    std::ofstream manifest(root / "basins.txt");
    if (!attrs || !manifest) throw hydroseq::IoError("cannot write under '" + out_dir + "'");
    attrs << "basin_id,area_km2,k,et_rate,s0\n";
    for (const auto& rec : records) {
        manifest << rec.basin_id << '\n';
        attrs << rec.basin_id << ',' << fmt_double(rec.area_km2);
        for (double a : rec.attributes) attrs << ',' << fmt_double(a);
        attrs << '\n';

        const auto& fs_series = rec.forcings.at("synthetic");
        std::ofstream fout(root / "forcing" / "synthetic" / (rec.basin_id + ".csv"));
        std::ofstream qout(root / "streamflow" / (rec.basin_id + ".csv"));
        if (!fout || !qout) throw hydroseq::IoError("cannot write basin files");
        fout << "date";
        for (const std::string& v : fs_series.var_names) fout << ',' << v;
        fout << '\n';
        const std::size_t nv = fs_series.var_names.size();
        for (std::size_t d = 0; d < rec.n_days; ++d) {
            const std::string date = (rec.start + static_cast<std::int64_t>(d)).to_string();
            fout << date;
            for (std::size_t j = 0; j < nv; ++j)
                fout << ',' << fmt_double(fs_series.values[d * nv + j]);
            fout << '\n';
            qout << date << ','
                 << fmt_double(hydroseq::mm_per_day_to_cfs(rec.discharge_mm_day[d], rec.area_km2))
                 << '\n';
        }
    }
    std::cout << "wrote " << records.size() << " basins x " << n_days << " days to " << out_dir
              << "\n";
    return kExitOk;
}

int cmd_train(const RunConfig& cfg, bool force) {
    const fs::path out(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    const std::uint64_t cfg_hash = fnv1a(cfg.raw.dump());

    const std::string variant = hydroseq::to_string(cfg.model.variant);
    for (std::uint64_t seed : cfg.seeds) {
        const fs::path ckpt = out / (variant + "_seed" + std::to_string(seed) + ".ckpt");
        if (fs::exists(ckpt) && !force)
            throw hydroseq::ParameterError("refusing to overwrite '" + ckpt.string() +
                                           "' (use --force)");
    }

    const auto records = load_dataset(cfg);
    const std::string product = fused_product_name(cfg.products);
    hydroseq::EnsembleResult ens =
        hydroseq::train_ensemble(cfg.model, records, cfg.split, cfg.train, cfg.seeds, product);

    json manifest = {{"config", cfg.raw}, {"config_hash", cfg_hash}, {"seeds", cfg.seeds}};
    json artifacts = json::object();
    bool diverged = false;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        if (!ens.members[i]) continue;
        const hydroseq::TrainResult& r = *ens.members[i];
        const std::string stem = variant + "_seed" + std::to_string(cfg.seeds[i]);
        const fs::path ckpt = out / (stem + ".ckpt");
        hydroseq::save_checkpoint(r.checkpoint, ckpt.string());
        std::ofstream trace(out / (stem + "_loss.csv"));
        trace << "iteration,loss\n";
        for (const auto& [it, loss] : r.loss_trace) trace << it << ',' << fmt_double(loss) << '\n';
        artifacts[stem + ".ckpt"] = hash_file(ckpt);
        std::cout << stem << ": final loss "
                  << (r.loss_trace.empty() ? 0.0 : r.loss_trace.back().second) << "\n";
    }
    for (const auto& [seed, why] : ens.failures) {
        std::cerr << "seed " << seed << " failed: " << why << "\n";
        diverged = true;
    }
    manifest["artifacts"] = artifacts;
    std::ofstream mf(out / "run_manifest.json");
    mf << manifest.dump(2) << '\n';
    return diverged ? kExitDivergence : kExitOk;
}

int cmd_evaluate(const RunConfig& cfg) {
    const fs::path out(cfg.out_dir);
    const auto records = load_dataset(cfg);
    const std::string variant = hydroseq::to_string(cfg.model.variant);

    std::vector<hydroseq::MetricReport> reports;
    std::map<std::string, std::vector<double>> per_metric_values;
    for (std::uint64_t seed : cfg.seeds) {
        const std::string stem = variant + "_seed" + std::to_string(seed);
        hydroseq::Checkpoint ckpt = hydroseq::load_checkpoint((out / (stem + ".ckpt")).string());
        hydroseq::MetricReport rep = hydroseq::evaluate_checkpoint(ckpt, records, cfg.split);
        std::ofstream rf(out / (stem + "_metrics.csv"));
        rep.write_csv(rf);
        for (const hydroseq::BasinMetrics& b : rep.basins) {
            if (b.nse) per_metric_values["nse"].push_back(*b.nse);
            if (b.kge) per_metric_values["kge"].push_back(*b.kge);
            if (b.fhv) per_metric_values["fhv"].push_back(*b.fhv);
            if (b.flv) per_metric_values["flv"].push_back(*b.flv);
        }
        reports.push_back(std::move(rep));
    }
    for (const auto& [name, values] : per_metric_values) {
        hydroseq::CdfSeries cdf = hydroseq::cdf_series(values, name);
        std::ofstream cf(out / (variant + "_cdf_" + name + ".csv"));
        cdf.write_csv(cf);
    }
    hydroseq::EnsembleSummary summary = hydroseq::summarize_ensemble(reports);
    {
        std::ofstream sf(out / (variant + "_ensemble_summary.csv"));
        summary.write_csv(sf);
    }
    for (const auto& [name, e] : summary.metrics)
        std::cout << name << ": " << e.mean << " +- " << e.std
                  << (e.degenerate ? " (degenerate: single member)" : "") << "\n";
    return kExitOk;
}

int cmd_gradcheck(bool inject_fault) {
    hydroseq::detail::corrupt_sigmoid_backward() = inject_fault;
    const auto rows = hydroseq::run_grad_suite();
    hydroseq::detail::corrupt_sigmoid_backward() = false;
    bool ok = true;
    std::string worst;
    double worst_err = -1;
    for (const auto& r : rows) {
        std::printf("%-28s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err,
                    r.pass ? "PASS" : "FAIL");
        if (!r.pass) ok = false;
        if (r.max_rel_err > worst_err) {
            worst_err = r.max_rel_err;
            worst = r.name;
        }
    }
    if (!ok) {
        std::printf("FAILED: worst case %s (max_rel_err=%.3e)\n", worst.c_str(), worst_err);
        return kExitVerification;
    }
    std::printf("all gradient checks passed\n");
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hydroseq: sequence-model benchmarks for rainfall-runoff prediction"};
    app.require_subcommand(1);

    // generate-synthetic
    auto* gen = app.add_subcommand("generate-synthetic",
                                   "Write a synthetic linear-reservoir dataset in the "
                                   "ingestion layout");
    std::string gen_out = "data/synthetic";
    std::size_t gen_basins = 4, gen_days = 4000;
    double gen_k = 0.15, gen_et = 0.03;
    std::uint64_t gen_seed = 1;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--n-basins", gen_basins, "number of basins");
    gen->add_option("--n-days", gen_days, "days per basin");
    gen->add_option("--k", gen_k, "base outflow coefficient");
    gen->add_option("--et-rate", gen_et, "base evaporation coefficient");
    gen->add_option("--seed", gen_seed, "generator seed");

    // train / evaluate
    std::string config_path;
    std::uint64_t seed_override = 0;
    bool have_seed_override = false;
    std::string out_override;
    bool force = false;
    auto* train_cmd = app.add_subcommand("train", "Train one checkpoint per configured seed");
    auto* eval_cmd = app.add_subcommand("evaluate",
                                        "Evaluate checkpoints: metric reports, CDF files, "
                                        "ensemble summary");
    for (CLI::App* sub : {train_cmd, eval_cmd}) {
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--seed", seed_override, "override: run this single seed")
            ->each([&](const std::string&) { have_seed_override = true; });
        sub->add_option("--out", out_override, "override: output directory");
    }
    train_cmd->add_flag("--force", force, "overwrite existing checkpoints");

    auto* gc = app.add_subcommand("gradcheck", "Run the gradient verification suite");
    bool inject_fault = false;
    gc->add_flag("--inject-fault", inject_fault,
                 "negative control: corrupt one backward rule (expects FAIL)")
        ->group("");  // hidden

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            if (gen_days == 0 || gen_basins == 0)
                throw hydroseq::ParameterError("n-days and n-basins must be >= 1");
            return cmd_generate_synthetic(gen_out, gen_basins, gen_days, gen_k, gen_et, gen_seed);
        }
        if (train_cmd->parsed() || eval_cmd->parsed()) {
            RunConfig cfg = load_config(config_path);
            if (have_seed_override) cfg.seeds = {seed_override};
            if (!out_override.empty()) cfg.out_dir = out_override;
            return train_cmd->parsed() ? cmd_train(cfg, force) : cmd_evaluate(cfg);
        }
        if (gc->parsed()) return cmd_gradcheck(inject_fault);
    } catch (const hydroseq::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const hydroseq::IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const hydroseq::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
