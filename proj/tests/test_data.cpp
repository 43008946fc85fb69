#include <cmath>
#include <filesystem>
#include <fstream>

#include <catch2/catch_amalgamated.hpp>

#include "hydroseq/data.hpp"

using namespace hydroseq;

namespace {

std::string write_fixture(const std::string& name, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "hydroseq_test_data";
    fs::create_directories(dir);
    const fs::path p = dir / name;
    std::ofstream out(p);
    out << content;
    return p.string();
}

// One-product record built in memory: a single forcing variable plus discharge.
BasinRecord mk_record(const std::string& id, const std::string& start,
                      std::vector<double> forcing, std::vector<double> discharge,
                      std::vector<double> attributes = {5.0}) {
    BasinRecord rec;
    rec.basin_id = id;
    rec.area_km2 = 100.0;
    rec.attributes = std::move(attributes);
    rec.start = Date::parse(start);
    rec.n_days = forcing.size();
    rec.discharge_mm_day = std::move(discharge);
    rec.forcings["daymet"] = ForcingSeries{{"prcp"}, std::move(forcing)};
    return rec;
}

SplitSpec mk_split(const std::string& ts, const std::string& te, const std::string& vs,
                   const std::string& ve) {
    SplitSpec s;
    s.train_start = Date::parse(ts);
    s.train_end = Date::parse(te);
    s.test_start = Date::parse(vs);
    s.test_end = Date::parse(ve);
    return s;
}

}  // namespace

TEST_CASE("unit conversion: cfs to mm/day and back") {
    // 100 cfs over 100 km^2: 100 * 0.0283168 * 86400 * 1000 / 1e8
    REQUIRE(cfs_to_mm_per_day(100.0, 100.0) == Catch::Approx(2.44657152).margin(1e-12));
    const double q = 37.5;
    REQUIRE(mm_per_day_to_cfs(cfs_to_mm_per_day(q, 321.0), 321.0) ==
            Catch::Approx(q).margin(1e-12));
    REQUIRE_THROWS_AS(cfs_to_mm_per_day(1.0, 0.0), ParameterError);
    REQUIRE_THROWS_AS(mm_per_day_to_cfs(1.0, -1.0), ParameterError);
}

TEST_CASE("ingest_basin: alignment, sentinel mapping, unit conversion") {
    const std::string f = write_fixture("f.csv",
                                        "date,prcp,tmax\n"
                                        "2000-01-02,1.0,10.0\n"
                                        "2000-01-03,2.0,11.0\n"
                                        "2000-01-04,3.0,12.0\n");
    const std::string q = write_fixture("q.csv",
                                        "2000-01-01,100.0\n"
                                        "2000-01-02,-999.0\n"
                                        "2000-01-03,200.0\n"
                                        "2000-01-04,300.0\n");
    BasinRecord rec = ingest_basin("daymet", f, q, "b1", 100.0, {1.0, 2.0});
    REQUIRE(rec.start == Date::parse("2000-01-02"));  // common range
    REQUIRE(rec.n_days == 3);
    REQUIRE(rec.end() == Date::parse("2000-01-04"));
    REQUIRE(std::isnan(rec.discharge_mm_day[0]));  // -999 sentinel
    REQUIRE(rec.discharge_mm_day[1] == Catch::Approx(200.0 * 0.0244657152).margin(1e-12));
    REQUIRE(rec.discharge_mm_day[2] == Catch::Approx(300.0 * 0.0244657152).margin(1e-12));
    const ForcingSeries& fs = rec.forcings.at("daymet");
    REQUIRE(fs.var_names == std::vector<std::string>{"prcp", "tmax"});
    REQUIRE(fs.values == std::vector<double>{1, 10, 2, 11, 3, 12});
}

TEST_CASE("ingest_basin: malformed inputs are rejected") {
    const std::string q = write_fixture("q_ok.csv", "2000-01-01,1.0\n2000-01-02,2.0\n");
    const std::string shuffled = write_fixture("f_shuffled.csv",
                                               "date,prcp\n"
                                               "2000-01-02,1.0\n"
                                               "2000-01-01,2.0\n");
    REQUIRE_THROWS_AS(ingest_basin("p", shuffled, q, "b", 1.0, {}), IngestionError);
    const std::string gap = write_fixture("f_gap.csv",
                                          "date,prcp\n"
                                          "2000-01-01,1.0\n"
                                          "2000-01-03,2.0\n");
    REQUIRE_THROWS_AS(ingest_basin("p", gap, q, "b", 1.0, {}), IngestionError);
    const std::string badnum = write_fixture("f_badnum.csv",
                                             "date,prcp\n"
                                             "2000-01-01,oops\n");
    REQUIRE_THROWS_AS(ingest_basin("p", badnum, q, "b", 1.0, {}), ParseError);
    const std::string baddate = write_fixture("f_baddate.csv",
                                              "date,prcp\n"
                                              "01/01/2000,1.0\n");
    REQUIRE_THROWS_AS(ingest_basin("p", baddate, q, "b", 1.0, {}), ParseError);
    const std::string ok = write_fixture("f_ok.csv", "date,prcp\n2000-01-01,1.0\n");
    REQUIRE_THROWS_AS(ingest_basin("p", "/no/such/file.csv", q, "b", 1.0, {}), IoError);
    REQUIRE_THROWS_AS(ingest_basin("p", ok, q, "b", -1.0, {}), ParameterError);
    const std::string disjoint = write_fixture("q_late.csv", "2011-01-01,1.0\n");
    REQUIRE_THROWS_AS(ingest_basin("p", ok, disjoint, "b", 1.0, {}), IngestionError);
}

TEST_CASE("add_forcing_product trims the record to the common range") {
    const std::string f1 = write_fixture("ap_f1.csv",
                                         "date,prcp\n"
                                         "2000-01-01,1.0\n"
                                         "2000-01-02,2.0\n"
                                         "2000-01-03,3.0\n"
                                         "2000-01-04,4.0\n");
    const std::string q = write_fixture("ap_q.csv",
                                        "2000-01-01,10.0\n"
                                        "2000-01-02,20.0\n"
                                        "2000-01-03,30.0\n"
                                        "2000-01-04,40.0\n");
    const std::string f2 = write_fixture("ap_f2.csv",
                                         "date,srad\n"
                                         "2000-01-03,7.0\n"
                                         "2000-01-04,8.0\n"
                                         "2000-01-05,9.0\n");
    BasinRecord rec = ingest_basin("a", f1, q, "b1", 100.0, {});
    add_forcing_product(rec, "b", f2);
    REQUIRE(rec.start == Date::parse("2000-01-03"));
    REQUIRE(rec.n_days == 2);
    REQUIRE(rec.forcings.at("a").values == std::vector<double>{3, 4});
    REQUIRE(rec.forcings.at("b").values == std::vector<double>{7, 8});
    REQUIRE(rec.discharge_mm_day[0] == Catch::Approx(cfs_to_mm_per_day(30.0, 100.0)));

    const std::string f3 = write_fixture("ap_f3.csv", "date,x\n2011-01-01,1.0\n");
    REQUIRE_THROWS_AS(add_forcing_product(rec, "c", f3), IngestionError);
}

TEST_CASE("fuse_forcings: concatenation order and basin intersection") {
    BasinRecord both = mk_record("both", "2000-01-01", {1, 2, 3}, {0.1, 0.2, 0.3});
    both.forcings["maurer"] = ForcingSeries{{"srad", "tmin"}, {10, 20, 11, 21, 12, 22}};
    BasinRecord only_a = mk_record("only_a", "2000-01-01", {9, 9, 9}, {0.9, 0.9, 0.9});

    auto fused = fuse_forcings({both, only_a}, {"daymet", "maurer"});
    REQUIRE(fused.size() == 1);  // only_a lacks maurer and is dropped
    REQUIRE(fused[0].basin_id == "both");
    const ForcingSeries& fs = fused[0].forcings.at("daymet+maurer");
    REQUIRE(fs.var_names ==
            std::vector<std::string>{"daymet/prcp", "maurer/srad", "maurer/tmin"});
    // row-major: each day holds daymet's column then maurer's two
    REQUIRE(fs.values == std::vector<double>{1, 10, 20, 2, 11, 21, 3, 12, 22});
    REQUIRE(fused[0].discharge_mm_day == both.discharge_mm_day);

    REQUIRE_THROWS_AS(fuse_forcings({only_a}, {"maurer"}), IngestionError);
    REQUIRE_THROWS_AS(fuse_forcings({both}, {}), ParameterError);
}

TEST_CASE("compute_norm_stats: hand arithmetic, NaN exclusion, std floor") {
    // training window covers days 1..3 of the record (2000-01-02 .. 2000-01-04)
    SplitSpec split = mk_split("2000-01-02", "2000-01-04", "1990-01-01", "1990-12-31");
    BasinRecord rec =
        mk_record("b1", "2000-01-01", {100, 1, 2, 3, 100}, {9, 1, kNaN, 3, 9});
    NormalizationStats st = compute_norm_stats({rec}, split, "daymet");

    // forcing over {1,2,3}: mean 2, population std sqrt(2/3); values outside
    // the training window (the 100s) must not leak in
    REQUIRE(st.forcing.size() == 1);
    REQUIRE(st.forcing[0].mean == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(st.forcing[0].std == Catch::Approx(std::sqrt(2.0 / 3.0)).margin(1e-12));
    // discharge over {1, 3} (NaN skipped): mean 2, population std 1
    REQUIRE(st.discharge.at("b1").mean == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(st.discharge.at("b1").std == Catch::Approx(1.0).margin(1e-12));
    // single basin: constant attribute hits the std floor
    REQUIRE(st.attributes.size() == 1);
    REQUIRE(st.attributes[0].mean == Catch::Approx(5.0));
    REQUIRE(st.attributes[0].std == NormalizationStats::kStdFloor);

    // two basins: attribute stats across basins
    BasinRecord rec2 = mk_record("b2", "2000-01-01", {1, 1, 1, 1, 1}, {1, 1, 1, 1, 1}, {9.0});
    NormalizationStats st2 = compute_norm_stats({rec, rec2}, split, "daymet");
    REQUIRE(st2.attributes[0].mean == Catch::Approx(7.0));
    REQUIRE(st2.attributes[0].std == Catch::Approx(2.0));
    // constant discharge hits the floor instead of zero
    REQUIRE(st2.discharge.at("b2").std == NormalizationStats::kStdFloor);

    // all-NaN discharge in the window is an error, not a silent zero
    BasinRecord recn =
        mk_record("bn", "2000-01-01", {1, 1, 1, 1, 1}, {1, kNaN, kNaN, kNaN, 1});
    REQUIRE_THROWS_AS(compute_norm_stats({recn}, split, "daymet"), Error);
}

TEST_CASE("make_batch: single valid window is fully determined") {
    SplitSpec split = mk_split("2000-01-02", "2000-01-04", "1990-01-01", "1990-12-31");
    BasinRecord rec =
        mk_record("b1", "2000-01-01", {100, 1, 2, 3, 100}, {9, 1, kNaN, 3, 9});
    NormalizationStats st = compute_norm_stats({rec}, split, "daymet");
    RngStream rng(5);
    // seq_len 3 leaves exactly one window fully inside training: days 1..3
    Batch b = make_batch({rec}, st, split, 3, 2, rng, HeadMode::seq2seq);
    REQUIRE(b.x.shape() == Shape{2, 3, 2});  // 1 forcing var + 1 attribute
    REQUIRE(b.y.shape() == Shape{2, 3, 1});
    const double fstd = std::sqrt(2.0 / 3.0);
    for (std::size_t s = 0; s < 2; ++s) {
        REQUIRE(b.basin_index[s] == 0);
        REQUIRE(b.basin_std[s] == 1.0);  // per-basin standardized targets
        for (std::size_t t = 0; t < 3; ++t) {
            const double raw = static_cast<double>(t + 1);  // forcing 1,2,3
            REQUIRE(b.x.data()[(s * 3 + t) * 2] ==
                    Catch::Approx((raw - 2.0) / fstd).margin(1e-12));
            REQUIRE(b.x.data()[(s * 3 + t) * 2 + 1] == 0.0);  // attr at its own mean
        }
        // targets standardized per basin; NaN day masked out and zero-filled
        REQUIRE(b.y.data()[s * 3 + 0] == Catch::Approx(-1.0).margin(1e-12));
        REQUIRE(b.mask.data()[s * 3 + 0] == 1.0);
        REQUIRE(b.y.data()[s * 3 + 1] == 0.0);
        REQUIRE(b.mask.data()[s * 3 + 1] == 0.0);
        REQUIRE(b.y.data()[s * 3 + 2] == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(b.mask.data()[s * 3 + 2] == 1.0);
    }
    // seq2one keeps only the window-end target
    RngStream rng2(5);
    Batch b1 = make_batch({rec}, st, split, 3, 1, rng2, HeadMode::seq2one);
    REQUIRE(b1.y.shape() == Shape{1, 1, 1});
    REQUIRE(b1.y.data()[0] == Catch::Approx(1.0).margin(1e-12));

    // no window fits -> error
    REQUIRE_THROWS_AS(make_batch({rec}, st, split, 10, 1, rng, HeadMode::seq2seq),
                      ParameterError);
}

TEST_CASE("make_batch: seeded determinism and uniform window sampling") {
    SplitSpec split = mk_split("2000-01-01", "2000-04-09", "1990-01-01", "1990-12-31");
    // basin 1: 100 days -> 91 valid windows at seq_len 10
    // basin 2: 40 days  -> 31 valid windows
    std::vector<double> f1(100), q1(100), f2(40), q2(40);
    for (std::size_t i = 0; i < 100; ++i) f1[i] = q1[i] = 1.0 + 0.01 * i;
    for (std::size_t i = 0; i < 40; ++i) f2[i] = q2[i] = 2.0 + 0.01 * i;
    std::vector<BasinRecord> recs = {mk_record("b1", "2000-01-01", f1, q1),
                                     mk_record("b2", "2000-01-01", f2, q2)};
    NormalizationStats st = compute_norm_stats(recs, split, "daymet");

    RngStream a(77), b(77);
    Batch ba = make_batch(recs, st, split, 10, 32, a, HeadMode::seq2seq);
    Batch bb = make_batch(recs, st, split, 10, 32, b, HeadMode::seq2seq);
    REQUIRE(ba.x.data() == bb.x.data());  // bit-identical under the same seed
    REQUIRE(ba.y.data() == bb.y.data());
    REQUIRE(ba.basin_index == bb.basin_index);

    // uniform over (basin, window): P(b1) = 91/122; check a large sample
    // against the binomial at 4 sigma
    const std::size_t N = 6000;
    RngStream big(123);
    std::size_t n_b1 = 0;
    for (std::size_t chunk = 0; chunk < N / 100; ++chunk) {
        Batch bc = make_batch(recs, st, split, 10, 100, big, HeadMode::seq2one);
        for (std::size_t s : bc.basin_index) n_b1 += (s == 0);
    }
    const double p = 91.0 / 122.0;
    const double sigma = std::sqrt(N * p * (1 - p));
    REQUIRE(std::abs(static_cast<double>(n_b1) - p * N) < 4.0 * sigma);
}

TEST_CASE("reservoir: recession, steady state, mass balance") {
    ReservoirParams p;
    p.k = 0.1;
    p.et_rate = 0.0;
    p.s0 = 10.0;
    // no rain: pure recession, Q_t = k * s0 * (1-k)^t
    ReservoirTrace dry = simulate_reservoir(p, std::vector<double>(20, 0.0));
    for (std::size_t t = 0; t < 20; ++t)
        REQUIRE(dry.discharge[t] ==
                Catch::Approx(1.0 * std::pow(0.9, static_cast<double>(t))).margin(1e-12));

    // constant rain with S* = P / (k + et): storage stays put
    ReservoirParams ps;
    ps.k = 0.15;
    ps.et_rate = 0.05;
    ps.s0 = 4.0 / 0.2;  // P = 4
    ReservoirTrace steady = simulate_reservoir(ps, std::vector<double>(15, 4.0));
    for (double s : steady.storage) REQUIRE(s == Catch::Approx(ps.s0).margin(1e-10));

    // stochastic run conserves mass: sum(P) - sum(E) - sum(Q) = S_end - s0
    ReservoirParams pm;
    RngStream rng(31);
    std::vector<double> precip = sample_precip(500, pm, rng);
    ReservoirTrace tr = simulate_reservoir(pm, precip);
    double in = 0, out = 0;
    for (std::size_t t = 0; t < 500; ++t) {
        in += tr.precip[t];
        out += tr.evap[t] + tr.discharge[t];
    }
    const double s_end = std::max(
        0.0, tr.storage[499] + tr.precip[499] - tr.evap[499] - tr.discharge[499]);
    REQUIRE(in - out == Catch::Approx(s_end - pm.s0).margin(1e-8));

    ReservoirParams bad;
    bad.k = 0.9;
    bad.et_rate = 0.2;  // k + et > 1
    REQUIRE_THROWS_AS(simulate_reservoir(bad, {1.0}), ParameterError);
}

TEST_CASE("sample_precip: wet-day frequency and depth match the generator") {
    ReservoirParams p;  // wet_prob 0.3, mean depth 5 mm
    RngStream rng(99);
    const std::size_t n = 20000;
    std::vector<double> precip = sample_precip(n, p, rng);
    std::size_t wet = 0;
    double depth = 0;
    for (double v : precip) {
        REQUIRE(v >= 0.0);
        if (v > 0) {
            ++wet;
            depth += v;
        }
    }
    const double sigma = std::sqrt(n * 0.3 * 0.7);
    REQUIRE(std::abs(static_cast<double>(wet) - 0.3 * n) < 4.0 * sigma);
    // exponential(5) mean, 4 sigma of the sample mean
    const double mean_depth = depth / static_cast<double>(wet);
    REQUIRE(std::abs(mean_depth - 5.0) < 4.0 * 5.0 / std::sqrt(static_cast<double>(wet)));
}

TEST_CASE("synth_linear_reservoir: seeded reproducibility and self-consistency") {
    ReservoirParams base;
    RngStream r1(2024), r2(2024);
    auto recs1 = synth_linear_reservoir(4, 300, base, r1);
    auto recs2 = synth_linear_reservoir(4, 300, base, r2);
    REQUIRE(recs1.size() == 4);
    for (std::size_t b = 0; b < 4; ++b) {
        REQUIRE(recs1[b].basin_id == recs2[b].basin_id);
        REQUIRE(recs1[b].discharge_mm_day == recs2[b].discharge_mm_day);  // bit-identical
        REQUIRE(recs1[b].forcings.at("synthetic").values ==
                recs2[b].forcings.at("synthetic").values);

        // attributes are {k, et_rate, s0} within the +-20% jitter band
        const auto& attr = recs1[b].attributes;
        REQUIRE(attr.size() == 3);
        REQUIRE(attr[0] >= base.k * 0.8);
        REQUIRE(attr[0] <= base.k * 1.2);
        REQUIRE(attr[1] >= base.et_rate * 0.8);
        REQUIRE(attr[1] <= base.et_rate * 1.2);
        REQUIRE(attr[2] == base.s0);

        // independent oracle: re-run the reservoir from the stored precip and
        // the recorded parameters; discharge must match exactly
        const ForcingSeries& fs = recs1[b].forcings.at("synthetic");
        std::vector<double> precip(recs1[b].n_days);
        for (std::size_t t = 0; t < precip.size(); ++t) precip[t] = fs.values[t * 2];
        ReservoirParams p = base;
        p.k = attr[0];
        p.et_rate = attr[1];
        ReservoirTrace tr = simulate_reservoir(p, precip);
        REQUIRE(tr.discharge == recs1[b].discharge_mm_day);
    }
    // distinct basins see distinct precip and parameters
    REQUIRE(recs1[0].forcings.at("synthetic").values !=
            recs1[1].forcings.at("synthetic").values);
    REQUIRE(recs1[0].attributes[0] != recs1[1].attributes[0]);

    RngStream r3(1);
    REQUIRE_THROWS_AS(synth_linear_reservoir(0, 10, base, r3), ParameterError);
}

TEST_CASE("SplitSpec: defaults and validation") {
    SplitSpec d = SplitSpec::paper_defaults();
    REQUIRE(d.train_start == Date::parse("1999-10-01"));
    REQUIRE(d.train_end == Date::parse("2008-09-30"));
    REQUIRE(d.test_start == Date::parse("1989-10-01"));
    REQUIRE(d.test_end == Date::parse("1999-09-30"));
    d.validate();  // defaults are disjoint

    SplitSpec bad = d;
    bad.test_end = Date::parse("2001-01-01");  // overlaps training
    REQUIRE_THROWS_AS(bad.validate(), ParameterError);
    bad = d;
    bad.train_end = Date::parse("1998-01-01");
    REQUIRE_THROWS_AS(bad.validate(), ParameterError);  // start > end
}
