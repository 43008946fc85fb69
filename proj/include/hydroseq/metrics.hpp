#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hydroseq/common.hpp"
#include "hydroseq/data.hpp"
#include "hydroseq/models.hpp"

namespace hydroseq {

// Dated observed/simulated pair in mm/day. obs may contain NaN; every metric
// restricts itself to the observed indices.
struct HydrographPair {
    std::vector<double> obs;
    std::vector<double> sim;

    void validate() const {
        if (obs.size() != sim.size()) throw ShapeError("HydrographPair: length mismatch");
        for (double v : sim)
            if (std::isnan(v)) throw ContractError("HydrographPair: sim must be NaN-free");
    }

    // (obs, sim) restricted to observed indices.
    std::pair<std::vector<double>, std::vector<double>> observed() const {
        validate();
        std::vector<double> o, s;
        for (std::size_t i = 0; i < obs.size(); ++i)
            if (!std::isnan(obs[i])) {
                o.push_back(obs[i]);
                s.push_back(sim[i]);
            }
        return {std::move(o), std::move(s)};
    }
};

// Nash-Sutcliffe efficiency: 1 - sum((sim-obs)^2) / sum((obs-mean)^2).
inline double nse(const HydrographPair& pair) {
    auto [o, s] = pair.observed();
    if (o.size() < 2) throw MetricUndefinedError("nse: need >= 2 observed values");
    double mean = 0;
    for (double v : o) mean += v;
    mean /= static_cast<double>(o.size());
    double num = 0, den = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        num += (s[i] - o[i]) * (s[i] - o[i]);
        den += (o[i] - mean) * (o[i] - mean);
    }
    if (den == 0) throw MetricUndefinedError("nse: zero observed variance");
    return 1.0 - num / den;
}

struct KgeComponents {
    double kge, r, alpha, beta;
};

// Kling-Gupta efficiency with its components: r (Pearson correlation),
// alpha = sigma_sim/sigma_obs, beta = mu_sim/mu_obs.
inline KgeComponents kge(const HydrographPair& pair) {
    auto [o, s] = pair.observed();
    const std::size_t n = o.size();
    if (n < 2) throw MetricUndefinedError("kge: need >= 2 observed values");
    double mo = 0, ms = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mo += o[i];
        ms += s[i];
    }
    mo /= static_cast<double>(n);
    ms /= static_cast<double>(n);
    double so = 0, ss = 0, cov = 0;
    for (std::size_t i = 0; i < n; ++i) {
        so += (o[i] - mo) * (o[i] - mo);
        ss += (s[i] - ms) * (s[i] - ms);
        cov += (o[i] - mo) * (s[i] - ms);
    }
    so = std::sqrt(so / static_cast<double>(n));
    ss = std::sqrt(ss / static_cast<double>(n));
    if (so == 0 || ss == 0) throw MetricUndefinedError("kge: zero variance in obs or sim");
    if (mo == 0) throw MetricUndefinedError("kge: zero observed mean");
    KgeComponents c;
    c.r = cov / (static_cast<double>(n) * so * ss);
    c.alpha = ss / so;
    c.beta = ms / mo;
    c.kge = 1.0 - std::sqrt((c.r - 1) * (c.r - 1) + (c.alpha - 1) * (c.alpha - 1) +
                            (c.beta - 1) * (c.beta - 1));
    return c;
}

// High-flow volume percent bias over the top h_frac of the flow-duration
// curves (obs and sim sorted descending independently).
inline double fhv(const HydrographPair& pair, double h_frac = 0.02) {
    if (!(h_frac > 0 && h_frac < 1)) throw ParameterError("fhv: h_frac must be in (0,1)");
    auto [o, s] = pair.observed();
    const std::size_t n = o.size();
    if (n < static_cast<std::size_t>(std::ceil(1.0 / h_frac)))
        throw MetricUndefinedError("fhv: too few observed values");
    std::sort(o.begin(), o.end(), std::greater<>());
    std::sort(s.begin(), s.end(), std::greater<>());
    const std::size_t h = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(h_frac * static_cast<double>(n))));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < h; ++i) {
        num += s[i] - o[i];
        den += o[i];
    }
    if (den == 0) throw MetricUndefinedError("fhv: zero high-flow observed volume");
    return 100.0 * num / den;
}

// Low-flow log-volume percent bias over the bottom l_frac of the FDCs, with
// both series clamped at `floor_mm` before taking logs.
inline double flv(const HydrographPair& pair, double l_frac = 0.30, double floor_mm = 1e-6) {
    if (!(l_frac > 0 && l_frac < 1)) throw ParameterError("flv: l_frac must be in (0,1)");
    if (!(floor_mm > 0)) throw ParameterError("flv: floor must be positive");
    auto [o, s] = pair.observed();
    const std::size_t n = o.size();
    if (n < static_cast<std::size_t>(std::ceil(1.0 / l_frac)))
        throw MetricUndefinedError("flv: too few observed values");
    for (double& v : o) v = std::max(v, floor_mm);
    for (double& v : s) v = std::max(v, floor_mm);
    std::sort(o.begin(), o.end(), std::greater<>());
    std::sort(s.begin(), s.end(), std::greater<>());
    const std::size_t l = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(l_frac * static_cast<double>(n))));
    const double log_om = std::log(o[n - 1]);
    const double log_sm = std::log(s[n - 1]);
    double sum_s = 0, sum_o = 0;
    for (std::size_t i = n - l; i < n; ++i) {
        sum_s += std::log(s[i]) - log_sm;
        sum_o += std::log(o[i]) - log_om;
    }
    if (sum_o == 0) throw MetricUndefinedError("flv: constant low-flow observations");
    return -100.0 * (sum_s - sum_o) / sum_o;
}

struct BasinMetrics {
    std::string basin_id;
    std::optional<double> nse, kge, r, alpha, beta, fhv, flv;
};

struct MetricReport {
    std::vector<BasinMetrics> basins;
    std::map<std::string, double> median;        // metric name -> basin median
    std::map<std::string, std::size_t> n_undefined;

    static double median_of(std::vector<double> v) {
        if (v.empty()) throw MetricUndefinedError("median of empty set");
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    }

    void finalize() {
        auto collect = [&](const char* name, auto getter) {
            std::vector<double> vals;
            std::size_t undef = 0;
            for (const BasinMetrics& b : basins) {
                auto v = getter(b);
                if (v)
                    vals.push_back(*v);
                else
                    ++undef;
            }
            n_undefined[name] = undef;
            if (!vals.empty()) median[name] = median_of(std::move(vals));
        };
        collect("nse", [](const BasinMetrics& b) { return b.nse; });
        collect("kge", [](const BasinMetrics& b) { return b.kge; });
        collect("fhv", [](const BasinMetrics& b) { return b.fhv; });
        collect("flv", [](const BasinMetrics& b) { return b.flv; });
    }

    // CSV emission: per-basin rows plus a summary block.
    void write_csv(std::ostream& os) const {
        os << "basin_id,nse,kge,r,alpha,beta,fhv,flv\n";
        auto cell = [&](const std::optional<double>& v) {
            if (v)
                os << *v;
            else
                os << "undefined";
        };
        for (const BasinMetrics& b : basins) {
            os << b.basin_id << ',';
            cell(b.nse); os << ',';
            cell(b.kge); os << ',';
            cell(b.r); os << ',';
            cell(b.alpha); os << ',';
            cell(b.beta); os << ',';
            cell(b.fhv); os << ',';
            cell(b.flv); os << '\n';
        }
        os << "# summary (basin medians; undefined basins excluded)\n";
        for (const auto& [name, v] : median)
            os << "# median_" << name << ',' << v << ",undefined_count="
               << n_undefined.at(name) << '\n';
    }
};

// Computes all four metrics for one pair, mapping undefined metrics to
// empty optionals.
inline BasinMetrics basin_metrics(const std::string& id, const HydrographPair& pair,
                                  double h_frac = 0.02, double l_frac = 0.30,
                                  double flv_floor = 1e-6) {
    BasinMetrics m;
    m.basin_id = id;
    try {
        m.nse = nse(pair);
    } catch (const MetricUndefinedError&) {}
    try {
        const KgeComponents c = kge(pair);
        m.kge = c.kge;
        m.r = c.r;
        m.alpha = c.alpha;
        m.beta = c.beta;
    } catch (const MetricUndefinedError&) {}
    try {
        m.fhv = fhv(pair, h_frac);
    } catch (const MetricUndefinedError&) {}
    try {
        m.flv = flv(pair, l_frac, flv_floor);
    } catch (const MetricUndefinedError&) {}
    return m;
}

// Sliding seq-to-one inference over a date range: for every day in the range
// with a full lookback window in the record, predict with the window ending at
// that day and read the final-position output. Returns destandardized mm/day.
inline HydrographPair predict_range(const ModelSpec& spec, const ModelWeights& weights,
                                    const NormalizationStats& stats, const BasinRecord& rec,
                                    const SplitSpec& split, bool test_range,
                                    std::size_t max_batch = 256) {
    auto [lo, hi] = detail::window_end_range(rec, split, spec.seq_len, test_range);
    if (lo > hi)
        throw ParameterError("predict_range: no evaluable days for basin " + rec.basin_id);
    const std::size_t n_days = static_cast<std::size_t>(hi - lo + 1);
    const std::size_t width = stats.forcing.size() + stats.attributes.size();
    if (width != spec.input_dim)
        throw ShapeError("predict_range: data input_dim " + std::to_string(width) +
                         " != model input_dim " + std::to_string(spec.input_dim));
    const VarStats& qs = stats.discharge.at(rec.basin_id);

    HydrographPair pair;
    pair.obs.resize(n_days);
    pair.sim.resize(n_days);
    Tape tape;
    Tape::NoGradGuard guard(tape);
    for (std::size_t off = 0; off < n_days; off += max_batch) {
        const std::size_t bsz = std::min(max_batch, n_days - off);
        Tensor x = Tensor::zeros(Shape{bsz, spec.seq_len, width});
        for (std::size_t i = 0; i < bsz; ++i)
            detail::fill_window(rec, stats, stats.product, lo + static_cast<std::int64_t>(off + i),
                                spec.seq_len, x.data().data() + i * spec.seq_len * width);
        Tensor yhat = model_forward(tape, x, weights, spec);
        for (std::size_t i = 0; i < bsz; ++i) {
            const double z = spec.seq2seq() ? yhat.data()[(i + 1) * spec.seq_len - 1]
                                            : yhat.data()[i];
            pair.sim[off + i] = z * qs.std + qs.mean;
            pair.obs[off + i] =
                rec.discharge_mm_day[static_cast<std::size_t>(lo) + off + i];
        }
    }
    return pair;
}

// Per-basin metrics over the test window plus basin medians.
inline MetricReport evaluate_model(const ModelSpec& spec, const ModelWeights& weights,
                                   const NormalizationStats& stats,
                                   const std::vector<BasinRecord>& records,
                                   const SplitSpec& split) {
    MetricReport rep;
    for (const BasinRecord& rec : records) {
        HydrographPair pair = predict_range(spec, weights, stats, rec, split, /*test_range=*/true);
        rep.basins.push_back(basin_metrics(rec.basin_id, pair));
    }
    rep.finalize();
    return rep;
}

struct EnsembleSummary {
    struct Entry {
        std::vector<double> member_medians;
        double mean = 0.0;
        double std = 0.0;       // sample form (n-1)
        bool degenerate = false; // single member: std reported as 0 with this flag
    };
    std::map<std::string, Entry> metrics;

    void write_csv(std::ostream& os) const {
        os << "metric,mean,std,n_members,degenerate\n";
        for (const auto& [name, e] : metrics)
            os << name << ',' << e.mean << ',' << e.std << ',' << e.member_medians.size() << ','
               << (e.degenerate ? 1 : 0) << '\n';
    }
};

// Mean +- sample std of the members' basin-median metrics.
inline EnsembleSummary summarize_ensemble(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw ParameterError("summarize_ensemble: no reports");
    EnsembleSummary out;
    for (const char* name : {"nse", "kge", "fhv", "flv"}) {
        EnsembleSummary::Entry e;
        for (const MetricReport& r : reports) {
            auto it = r.median.find(name);
            if (it != r.median.end()) e.member_medians.push_back(it->second);
        }
        if (e.member_medians.empty()) continue;
        const std::size_t n = e.member_medians.size();
        for (double v : e.member_medians) e.mean += v;
        e.mean /= static_cast<double>(n);
        if (n >= 2) {
            double ss = 0;
            for (double v : e.member_medians) ss += (v - e.mean) * (v - e.mean);
            e.std = std::sqrt(ss / static_cast<double>(n - 1));
        } else {
            e.std = 0.0;
            e.degenerate = true;
        }
        out.metrics[name] = std::move(e);
    }
    return out;
}

struct CdfSeries {
    std::string metric;
    std::vector<double> values;  // ascending
    std::vector<double> levels;  // (i - 0.5)/n
    std::size_t n_excluded = 0;

    void write_csv(std::ostream& os) const {
        os << "value,cdf_level\n";
        for (std::size_t i = 0; i < values.size(); ++i)
            os << values[i] << ',' << levels[i] << '\n';
        if (n_excluded) os << "# excluded_undefined," << n_excluded << '\n';
    }
};

// Empirical CDF of per-basin metric values; non-finite entries are excluded
// with a count.
inline CdfSeries cdf_series(std::vector<double> values, const std::string& metric) {
    CdfSeries s;
    s.metric = metric;
    for (double v : values)
        if (std::isfinite(v))
            s.values.push_back(v);
        else
            ++s.n_excluded;
    if (s.values.empty()) throw ParameterError("cdf_series: no finite values");
    std::sort(s.values.begin(), s.values.end());
    const double n = static_cast<double>(s.values.size());
    for (std::size_t i = 0; i < s.values.size(); ++i)
        s.levels.push_back((static_cast<double>(i) + 0.5) / n);
    return s;
}

// Optional prediction-mean ensemble: average the members' destandardized
// predictions per day, then compute the metrics once.
inline MetricReport evaluate_prediction_mean_ensemble(
    const ModelSpec& spec, const std::vector<const ModelWeights*>& members,
    const NormalizationStats& stats, const std::vector<BasinRecord>& records,
    const SplitSpec& split) {
    if (members.empty()) throw ParameterError("prediction-mean ensemble: no members");
    MetricReport rep;
    for (const BasinRecord& rec : records) {
        HydrographPair mean_pair;
        for (std::size_t m = 0; m < members.size(); ++m) {
            HydrographPair p =
                predict_range(spec, *members[m], stats, rec, split, /*test_range=*/true);
            if (m == 0) {
                mean_pair = p;
            } else {
                for (std::size_t i = 0; i < p.sim.size(); ++i) mean_pair.sim[i] += p.sim[i];
            }
        }
        for (double& v : mean_pair.sim) v /= static_cast<double>(members.size());
        rep.basins.push_back(basin_metrics(rec.basin_id, mean_pair));
    }
    rep.finalize();
    return rep;
}

}  // namespace hydroseq
