#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hydroseq/common.hpp"
#include "hydroseq/rng.hpp"
#include "hydroseq/tensor.hpp"

namespace hydroseq {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// q [cfs] over a basin of area [km^2] -> depth flux [mm/day].
inline double cfs_to_mm_per_day(double q_cfs, double area_km2) {
    if (!(area_km2 > 0)) throw ParameterError("cfs_to_mm_per_day: area must be positive");
    // ft^3/s * 0.0283168 m^3/ft^3 * 86400 s/day * 1000 mm/m / (area_km2 * 1e6 m^2)
    return q_cfs * 0.0283168 * 86400.0 * 1000.0 / (area_km2 * 1e6);
}

inline double mm_per_day_to_cfs(double q_mm, double area_km2) {
    if (!(area_km2 > 0)) throw ParameterError("mm_per_day_to_cfs: area must be positive");
    return q_mm * (area_km2 * 1e6) / (0.0283168 * 86400.0 * 1000.0);
}

// One forcing product's daily series for one basin, aligned to the record's
// date range: values is [n_days x n_vars] row-major.
struct ForcingSeries {
    std::vector<std::string> var_names;
    std::vector<double> values;
};

struct BasinRecord {
    std::string basin_id;
    double area_km2 = 0.0;
    std::vector<double> attributes;
    Date start;
    std::size_t n_days = 0;
    std::vector<double> discharge_mm_day;  // NaN where unobserved
    std::map<std::string, ForcingSeries> forcings;

    Date end() const { return start + (static_cast<std::int64_t>(n_days) - 1); }
};

struct SplitSpec {
    Date train_start, train_end, test_start, test_end;

    static SplitSpec paper_defaults() {
        SplitSpec s;
        s.train_start = Date::parse("1999-10-01");
        s.train_end = Date::parse("2008-09-30");
        s.test_start = Date::parse("1989-10-01");
        s.test_end = Date::parse("1999-09-30");
        return s;
    }

    void validate() const {
        if (!(train_start <= train_end) || !(test_start <= test_end))
            throw ParameterError("SplitSpec: start must not exceed end");
        const bool disjoint = train_end < test_start || test_end < train_start;
        if (!disjoint) throw ParameterError("SplitSpec: train and test ranges overlap");
    }
};

namespace detail {

struct DatedTable {
    Date start;
    std::size_t n_days = 0;
    std::vector<std::string> var_names;
    std::vector<double> values;  // [n_days x n_vars]
};

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    for (std::string& s : out) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        s = (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
    }
    return out;
}

inline double parse_num(const std::string& s, const std::string& file, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ParseError(file + ":" + std::to_string(line_no) + ": bad numeric field '" + s + "'");
    }
}

// Shared CSV reader: optional header, date column first, fixed value count,
// strictly increasing contiguous daily dates.
inline DatedTable read_dated_csv(const std::string& path, bool has_header) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "'");
    DatedTable t;
    std::string line;
    std::size_t line_no = 0;
    if (has_header) {
        if (!std::getline(in, line)) throw ParseError(path + ": empty file");
        ++line_no;
        auto cols = split_csv(line);
        if (cols.size() < 2) throw ParseError(path + ":1: header needs date plus >=1 variable");
        t.var_names.assign(cols.begin() + 1, cols.end());
    }
    bool first = true;
    Date prev;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto cols = split_csv(line);
        Date d;
        try {
            d = Date::parse(cols[0]);
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!has_header && t.var_names.empty())
            t.var_names.assign(cols.size() - 1, "");
        if (cols.size() != t.var_names.size() + 1)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected " +
                             std::to_string(t.var_names.size() + 1) + " fields, got " +
                             std::to_string(cols.size()));
        if (first) {
            t.start = d;
            first = false;
        } else if (d - prev != 1) {
            if (d <= prev)
                throw IngestionError(path + ":" + std::to_string(line_no) +
                                     ": dates not strictly increasing at " + d.to_string());
            throw IngestionError(path + ":" + std::to_string(line_no) + ": date gap between " +
                                 prev.to_string() + " and " + d.to_string());
        }
        prev = d;
        for (std::size_t i = 1; i < cols.size(); ++i)
            t.values.push_back(parse_num(cols[i], path, line_no));
        ++t.n_days;
    }
    if (t.n_days == 0) throw ParseError(path + ": no data rows");
    return t;
}

inline void trim_table(DatedTable& t, Date lo, Date hi) {
    const std::size_t nv = t.var_names.size();
    const std::size_t skip = static_cast<std::size_t>(lo - t.start);
    const std::size_t keep = static_cast<std::size_t>(hi - lo) + 1;
    std::vector<double> v(t.values.begin() + skip * nv, t.values.begin() + (skip + keep) * nv);
    t.values = std::move(v);
    t.start = lo;
    t.n_days = keep;
}

}  // namespace detail

// Parses one basin's forcing + streamflow files, aligns them on their common
// date range, converts discharge to mm/day and maps negative sentinel values
// (e.g. -999) to NaN.
inline BasinRecord ingest_basin(const std::string& product, const std::string& forcing_file,
                                const std::string& streamflow_file, const std::string& basin_id,
                                double area_km2, std::vector<double> attributes) {
    if (!(area_km2 > 0)) throw ParameterError("ingest_basin: area must be positive");
    detail::DatedTable f = detail::read_dated_csv(forcing_file, /*has_header=*/true);
    detail::DatedTable q = detail::read_dated_csv(streamflow_file, /*has_header=*/false);
    if (q.var_names.size() != 1)
        throw ParseError(streamflow_file + ": want rows 'date,discharge_cfs'");

    const Date lo = std::max(f.start, q.start);
    const Date hi = std::min(f.start + (static_cast<std::int64_t>(f.n_days) - 1),
                             q.start + (static_cast<std::int64_t>(q.n_days) - 1));
    if (lo > hi)
        throw IngestionError(basin_id + ": forcing and streamflow date ranges do not overlap");
    detail::trim_table(f, lo, hi);
    detail::trim_table(q, lo, hi);

    BasinRecord rec;
    rec.basin_id = basin_id;
    rec.area_km2 = area_km2;
    rec.attributes = std::move(attributes);
    rec.start = lo;
    rec.n_days = f.n_days;
    rec.discharge_mm_day.resize(q.n_days);
    for (std::size_t i = 0; i < q.n_days; ++i)
        rec.discharge_mm_day[i] =
            q.values[i] < 0.0 ? kNaN : cfs_to_mm_per_day(q.values[i], area_km2);
    rec.forcings[product] = ForcingSeries{std::move(f.var_names), std::move(f.values)};
    return rec;
}

// Adds another product to an existing record, trimming everything to the
// common date range.
inline void add_forcing_product(BasinRecord& rec, const std::string& product,
                                const std::string& forcing_file) {
    detail::DatedTable f = detail::read_dated_csv(forcing_file, /*has_header=*/true);
    const Date lo = std::max(f.start, rec.start);
    const Date hi = std::min(f.start + (static_cast<std::int64_t>(f.n_days) - 1), rec.end());
    if (lo > hi) throw IngestionError(rec.basin_id + ": product '" + product + "' does not overlap");
    detail::trim_table(f, lo, hi);

    const std::size_t skip = static_cast<std::size_t>(lo - rec.start);
    const std::size_t keep = f.n_days;
    rec.discharge_mm_day.assign(rec.discharge_mm_day.begin() + skip,
                                rec.discharge_mm_day.begin() + skip + keep);
    for (auto& [name, fs] : rec.forcings) {
        const std::size_t nv = fs.var_names.size();
        std::vector<double> v(fs.values.begin() + skip * nv,
                              fs.values.begin() + (skip + keep) * nv);
        fs.values = std::move(v);
    }
    rec.start = lo;
    rec.n_days = keep;
    rec.forcings[product] = ForcingSeries{std::move(f.var_names), std::move(f.values)};
}

// Concatenates the listed products' variables, in order, into one product
// named by joining with '+'. Basins missing any product are dropped.
inline std::vector<BasinRecord> fuse_forcings(const std::vector<BasinRecord>& records,
                                              const std::vector<std::string>& products) {
    if (products.empty()) throw ParameterError("fuse_forcings: no products requested");
    std::string fused_name = products[0];
    for (std::size_t i = 1; i < products.size(); ++i) fused_name += "+" + products[i];

    std::vector<BasinRecord> out;
    for (const BasinRecord& rec : records) {
        bool complete = true;
        for (const std::string& p : products)
            if (!rec.forcings.count(p)) complete = false;
        if (!complete) continue;

        BasinRecord fused;
        fused.basin_id = rec.basin_id;
        fused.area_km2 = rec.area_km2;
        fused.attributes = rec.attributes;
        fused.start = rec.start;
        fused.n_days = rec.n_days;
        fused.discharge_mm_day = rec.discharge_mm_day;
        ForcingSeries fs;
        for (const std::string& p : products) {
            const ForcingSeries& src = rec.forcings.at(p);
            for (const std::string& v : src.var_names) fs.var_names.push_back(p + "/" + v);
        }
        const std::size_t n_vars = fs.var_names.size();
        fs.values.resize(rec.n_days * n_vars);
        std::size_t col = 0;
        for (const std::string& p : products) {
            const ForcingSeries& src = rec.forcings.at(p);
            const std::size_t nv = src.var_names.size();
            for (std::size_t d = 0; d < rec.n_days; ++d)
                for (std::size_t j = 0; j < nv; ++j)
                    fs.values[d * n_vars + col + j] = src.values[d * nv + j];
            col += nv;
        }
        fused.forcings[fused_name] = std::move(fs);
        out.push_back(std::move(fused));
    }
    if (out.empty()) throw IngestionError("fuse_forcings: basin intersection is empty");
    return out;
}

struct VarStats {
    double mean = 0.0;
    double std = 1.0;
};

struct NormalizationStats {
    std::string product;                           // product the forcing stats describe
    std::vector<VarStats> forcing;                 // per variable, training window
    std::vector<VarStats> attributes;              // across training basins
    std::map<std::string, VarStats> discharge;     // basin_id -> training-window stats

    static constexpr double kStdFloor = 1e-6;
};

namespace detail {
inline VarStats finalize_stats(double sum, double sumsq, std::size_t n, const std::string& what) {
    if (n == 0) throw Error("stats: no observed values for " + what);
    const double mean = sum / static_cast<double>(n);
    double var = sumsq / static_cast<double>(n) - mean * mean;  // population form
    if (var < 0) var = 0;
    VarStats s;
    s.mean = mean;
    s.std = std::max(std::sqrt(var), NormalizationStats::kStdFloor);
    return s;
}
}  // namespace detail

// Means/stds over the training window and training basins only. Discharge
// stats are per basin; NaN discharge is excluded.
inline NormalizationStats compute_norm_stats(const std::vector<BasinRecord>& records,
                                             const SplitSpec& split, const std::string& product) {
    split.validate();
    if (records.empty()) throw ParameterError("compute_norm_stats: no records");
    NormalizationStats stats;
    stats.product = product;
    const std::size_t n_vars = records[0].forcings.at(product).var_names.size();
    const std::size_t n_attrs = records[0].attributes.size();

    std::vector<double> fsum(n_vars, 0.0), fsumsq(n_vars, 0.0);
    std::size_t fcount = 0;
    for (const BasinRecord& rec : records) {
        const ForcingSeries& fs = rec.forcings.at(product);
        if (fs.var_names.size() != n_vars)
            throw IngestionError(rec.basin_id + ": variable count differs across basins");
        if (rec.attributes.size() != n_attrs)
            throw IngestionError(rec.basin_id + ": attribute count differs across basins");
        const std::int64_t lo = std::max<std::int64_t>(0, split.train_start - rec.start);
        const std::int64_t hi =
            std::min<std::int64_t>(static_cast<std::int64_t>(rec.n_days) - 1,
                                   split.train_end - rec.start);
        double qsum = 0, qsumsq = 0;
        std::size_t qn = 0;
        for (std::int64_t d = lo; d <= hi; ++d) {
            for (std::size_t j = 0; j < n_vars; ++j) {
                const double v = fs.values[static_cast<std::size_t>(d) * n_vars + j];
                if (std::isnan(v))
                    throw IngestionError(rec.basin_id + ": NaN forcing value for variable '" +
                                         fs.var_names[j] + "'");
                fsum[j] += v;
                fsumsq[j] += v * v;
            }
            const double q = rec.discharge_mm_day[static_cast<std::size_t>(d)];
            if (!std::isnan(q)) {
                qsum += q;
                qsumsq += q * q;
                ++qn;
            }
            ++fcount;
        }
        stats.discharge[rec.basin_id] =
            detail::finalize_stats(qsum, qsumsq, qn, "discharge of basin " + rec.basin_id);
    }
    for (std::size_t j = 0; j < n_vars; ++j)
        stats.forcing.push_back(detail::finalize_stats(
            fsum[j], fsumsq[j], fcount,
            "variable '" + records[0].forcings.at(product).var_names[j] + "'"));
    for (std::size_t a = 0; a < n_attrs; ++a) {
        double s = 0, ss = 0;
        for (const BasinRecord& rec : records) {
            s += rec.attributes[a];
            ss += rec.attributes[a] * rec.attributes[a];
        }
        stats.attributes.push_back(
            detail::finalize_stats(s, ss, records.size(), "attribute " + std::to_string(a)));
    }
    return stats;
}

enum class HeadMode { seq2seq, seq2one };

struct Batch {
    Tensor x;     // [B, T, input_dim]
    Tensor y;     // [B, T, 1] (seq2seq) or [B, 1, 1] (seq2one), standardized
    Tensor mask;  // same shape as y, 1 where observed
    std::vector<double> basin_std;  // training-discharge std per sample, standardized units
    std::vector<std::size_t> basin_index;  // which record each sample came from
};

namespace detail {
// Valid window-end offsets (relative to record start) for training windows
// fully inside the training date range.
inline std::pair<std::int64_t, std::int64_t> window_end_range(const BasinRecord& rec,
                                                              const SplitSpec& split,
                                                              std::size_t seq_len, bool test) {
    const Date lo_date = test ? split.test_start : split.train_start;
    const Date hi_date = test ? split.test_end : split.train_end;
    std::int64_t lo = lo_date - rec.start;
    std::int64_t hi = hi_date - rec.start;
    hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(rec.n_days) - 1);
    if (!test) {
        // full window inside the training range
        lo = std::max<std::int64_t>(lo + static_cast<std::int64_t>(seq_len) - 1, 0);
    } else {
        // full lookback must exist in the record, may predate the test range
        lo = std::max<std::int64_t>(lo, static_cast<std::int64_t>(seq_len) - 1);
    }
    return {lo, hi};
}

// Fills one standardized input window ending at day `end` (inclusive).
inline void fill_window(const BasinRecord& rec, const NormalizationStats& stats,
                        const std::string& product, std::int64_t end, std::size_t seq_len,
                        double* out) {
    const ForcingSeries& fs = rec.forcings.at(product);
    const std::size_t n_vars = stats.forcing.size();
    const std::size_t n_attrs = stats.attributes.size();
    const std::size_t width = n_vars + n_attrs;
    for (std::size_t t = 0; t < seq_len; ++t) {
        const std::size_t day = static_cast<std::size_t>(end) - (seq_len - 1) + t;
        for (std::size_t j = 0; j < n_vars; ++j)
            out[t * width + j] =
                (fs.values[day * n_vars + j] - stats.forcing[j].mean) / stats.forcing[j].std;
        for (std::size_t a = 0; a < n_attrs; ++a)
            out[t * width + n_vars + a] =
                (rec.attributes[a] - stats.attributes[a].mean) / stats.attributes[a].std;
    }
}
}  // namespace detail

// Samples (basin, window-end) pairs uniformly over all valid training pairs.
inline Batch make_batch(const std::vector<BasinRecord>& records, const NormalizationStats& stats,
                        const SplitSpec& split, std::size_t seq_len, std::size_t batch_size,
                        RngStream& rng, HeadMode head) {
    if (seq_len < 1 || batch_size < 1) throw ParameterError("make_batch: sizes must be >= 1");
    struct Range {
        std::size_t rec;
        std::int64_t lo, hi;
    };
    std::vector<Range> ranges;
    std::size_t total = 0;
    for (std::size_t r = 0; r < records.size(); ++r) {
        auto [lo, hi] = detail::window_end_range(records[r], split, seq_len, /*test=*/false);
        if (lo <= hi) {
            ranges.push_back({r, lo, hi});
            total += static_cast<std::size_t>(hi - lo + 1);
        }
    }
    if (total == 0)
        throw ParameterError("make_batch: training window shorter than seq_len for every basin");

    const std::size_t width = stats.forcing.size() + stats.attributes.size();
    const std::size_t ylen = head == HeadMode::seq2seq ? seq_len : 1;
    Batch b;
    b.x = Tensor::zeros(Shape{batch_size, seq_len, width});
    b.y = Tensor::zeros(Shape{batch_size, ylen, 1});
    b.mask = Tensor::zeros(Shape{batch_size, ylen, 1});
    b.basin_std.resize(batch_size);
    b.basin_index.resize(batch_size);

    for (std::size_t s = 0; s < batch_size; ++s) {
        std::size_t pick = static_cast<std::size_t>(rng.next_double() * static_cast<double>(total));
        if (pick >= total) pick = total - 1;
        std::size_t ri = 0;
        while (pick > static_cast<std::size_t>(ranges[ri].hi - ranges[ri].lo)) {
            pick -= static_cast<std::size_t>(ranges[ri].hi - ranges[ri].lo + 1);
            ++ri;
        }
        const BasinRecord& rec = records[ranges[ri].rec];
        const std::int64_t end = ranges[ri].lo + static_cast<std::int64_t>(pick);
        detail::fill_window(rec, stats, stats.product, end, seq_len,
                            b.x.data().data() + s * seq_len * width);
        const VarStats& qs = stats.discharge.at(rec.basin_id);
        for (std::size_t t = 0; t < ylen; ++t) {
            const std::size_t day =
                static_cast<std::size_t>(end) - (ylen - 1) + t;  // ylen==1 -> window end
            const double q = rec.discharge_mm_day[day];
            if (std::isnan(q)) {
                b.y.data()[s * ylen + t] = 0.0;
                b.mask.data()[s * ylen + t] = 0.0;
            } else {
                b.y.data()[s * ylen + t] = (q - qs.mean) / qs.std;
                b.mask.data()[s * ylen + t] = 1.0;
            }
        }
        // targets are per-basin standardized, so the basin std is 1 in these units
        b.basin_std[s] = 1.0;
        b.basin_index[s] = ranges[ri].rec;
    }
    return b;
}

// ---- Synthetic Markovian watershed -----------------------------------------

struct ReservoirParams {
    double k = 0.15;          // linear outflow coefficient, per day
    double et_rate = 0.03;    // evaporative loss coefficient, per day
    double s0 = 10.0;         // initial storage, mm
    double wet_prob = 0.3;    // Bernoulli wet-day probability
    double wet_mean_mm = 5.0; // exponential wet-day depth mean

    void validate() const {
        if (!(k > 0.0 && k < 1.0)) throw ParameterError("reservoir: require 0 < k < 1");
        if (!(et_rate >= 0.0 && k + et_rate <= 1.0))
            throw ParameterError("reservoir: require et_rate >= 0 and k + et_rate <= 1");
        if (!(s0 >= 0.0)) throw ParameterError("reservoir: require s0 >= 0");
        if (!(wet_prob > 0.0 && wet_prob < 1.0))
            throw ParameterError("reservoir: require 0 < wet_prob < 1");
        if (!(wet_mean_mm > 0.0)) throw ParameterError("reservoir: require wet_mean_mm > 0");
    }
};

struct ReservoirTrace {
    std::vector<double> precip, evap, discharge, storage;  // storage[t] = S_t (pre-update)
};

// State-determined daily dynamics: Q_t = k*S_t, E_t = et_rate*S_t,
// S_{t+1} = max(0, S_t + P_t - E_t - Q_t).
inline ReservoirTrace simulate_reservoir(const ReservoirParams& p,
                                         const std::vector<double>& precip) {
    p.validate();
    ReservoirTrace tr;
    const std::size_t n = precip.size();
    tr.precip = precip;
    tr.evap.resize(n);
    tr.discharge.resize(n);
    tr.storage.resize(n);
    double s = p.s0;
    for (std::size_t t = 0; t < n; ++t) {
        tr.storage[t] = s;
        tr.discharge[t] = p.k * s;
        tr.evap[t] = p.et_rate * s;
        s = std::max(0.0, s + precip[t] - tr.evap[t] - tr.discharge[t]);
    }
    return tr;
}

inline std::vector<double> sample_precip(std::size_t n_days, const ReservoirParams& p,
                                         RngStream& rng) {
    std::vector<double> precip(n_days, 0.0);
    for (std::size_t t = 0; t < n_days; ++t) {
        const double wet = rng.next_double();
        // exponential depth on wet days; one uniform draw either way keeps the
        // call sequence independent of wetness
        const double u = rng.next_double();
        if (wet < p.wet_prob) precip[t] = -p.wet_mean_mm * std::log(1.0 - u);
    }
    return precip;
}

// Generates n_basins records starting at `start`. Basins share the stochastic
// precipitation model but differ in k and et_rate (deterministic +-20% jitter
// from the seed), recorded in the attribute vector {k, et_rate, s0}.
// Forcings are precipitation and a seasonal potential-ET proxy; the actual
// evaporation stays internal to the dynamics.
inline std::vector<BasinRecord> synth_linear_reservoir(std::size_t n_basins, std::size_t n_days,
                                                       const ReservoirParams& base, RngStream& rng,
                                                       Date start = Date::parse("1980-01-01")) {
    base.validate();
    if (n_basins < 1 || n_days < 1)
        throw ParameterError("synth_linear_reservoir: need n_basins >= 1 and n_days >= 1");
    std::vector<BasinRecord> out;
    for (std::size_t b = 0; b < n_basins; ++b) {
        RngStream child = rng.split(b);
        ReservoirParams p = base;
        p.k = base.k * (0.8 + 0.4 * child.next_double());
        p.et_rate = base.et_rate * (0.8 + 0.4 * child.next_double());
        p.validate();
        const std::vector<double> precip = sample_precip(n_days, p, child);
        const ReservoirTrace tr = simulate_reservoir(p, precip);

        BasinRecord rec;
        char id[16];
        std::snprintf(id, sizeof(id), "synth%03zu", b);
        rec.basin_id = id;
        rec.area_km2 = 100.0;
        rec.attributes = {p.k, p.et_rate, p.s0};
        rec.start = start;
        rec.n_days = n_days;
        rec.discharge_mm_day = tr.discharge;
        ForcingSeries fs;
        fs.var_names = {"prcp", "pet"};
        fs.values.resize(n_days * 2);
        for (std::size_t t = 0; t < n_days; ++t) {
            fs.values[t * 2] = precip[t];
            // seasonal proxy, deliberately blind to the actual storage state
            fs.values[t * 2 + 1] =
                1.0 + 0.5 * std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(t) / 365.25);
        }
        rec.forcings["synthetic"] = std::move(fs);
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace hydroseq
