#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "calda/data.hpp"

using namespace calda;

namespace {

LabeledWindow window1(std::vector<double> vals, int label, int domain = 0) {
    LabeledWindow w;
    w.label = label;
    w.domain = domain;
    const std::size_t n = vals.size();
    w.values = Tensor({1, n}, std::move(vals));
    return w;
}

std::string tmp_dir(const char* name) {
    auto p = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("normalization statistics from the train split only") {
    DomainDataset ds;
    ds.train = {window1({0.0}, 0), window1({2.0}, 1)};
    // poisoned valid/test values must not affect the statistics
    ds.valid = {window1({1000.0}, 0)};
    ds.test = {window1({-1000.0}, 1)};
    normalize(ds);
    REQUIRE(ds.norm_stats.size() == 1);
    REQUIRE(ds.norm_stats[0].mean == 1.0);
    REQUIRE(ds.norm_stats[0].std == 1.0);
    REQUIRE(ds.train[0].values.at(0, 0) == -1.0);
    REQUIRE(ds.train[1].values.at(0, 0) == 1.0);
    REQUIRE(ds.valid[0].values.at(0, 0) == 999.0);
    REQUIRE(ds.test[0].values.at(0, 0) == -1001.0);
    REQUIRE(ds.normalized);
}

TEST_CASE("constant channels normalize to zero, not NaN") {
    DomainDataset ds;
    ds.train = {window1({3.0, 3.0}, 0), window1({3.0, 3.0}, 1)};
    normalize(ds);
    REQUIRE(ds.norm_stats[0].std == 1.0);
    for (const auto& w : ds.train)
        for (double v : w.values.data) REQUIRE(v == 0.0);
}

TEST_CASE("label proportions counting") {
    std::vector<LabeledWindow> s1 = {window1({0}, 0), window1({0}, 0), window1({0}, 1),
                                     window1({0}, 1)};
    REQUIRE(label_proportions(s1, 2).p == std::vector<double>{0.5, 0.5});

    std::vector<LabeledWindow> s2 = {window1({0}, 0), window1({0}, 1), window1({0}, 1),
                                     window1({0}, 2)};
    REQUIRE(label_proportions(s2, 3).p == std::vector<double>{0.25, 0.5, 0.25});

    std::vector<LabeledWindow> one = {window1({0}, 1), window1({0}, 1)};
    REQUIRE(label_proportions(one, 3).p == std::vector<double>{0.0, 1.0, 0.0});

    std::vector<LabeledWindow> bad = {window1({0}, -1)};
    REQUIRE_THROWS_AS(label_proportions(bad, 3), ContractError);
}

TEST_CASE("proportion noise: zero budget is the identity") {
    LabelProportions p{{0.2, 0.5, 0.3}};
    Rng rng(1);
    auto [q, realized] = inject_proportion_noise(p, 0.0, rng);
    REQUIRE(q.p == p.p);
    REQUIRE(realized == 0.0);
}

TEST_CASE("proportion noise: realized noise tracks the budget") {
    // unbalanced 6-class vector; post-normalization noise may exceed the
    // budget (clamping at 0 shifts mass), matching the observed inflation
    LabelProportions p{{0.4, 0.25, 0.15, 0.1, 0.07, 0.03}};
    for (double budget : {0.05, 0.1, 0.2}) {
        double acc = 0.0;
        Rng rng(99);
        for (int i = 0; i < 100; ++i) {
            auto [q, realized] = inject_proportion_noise(p, budget, rng);
            q.validate();
            acc += realized;
        }
        const double mean = acc / 100.0;
        REQUIRE(std::abs(mean - budget) < 0.03);
    }
}

TEST_CASE("sine-wave generator: determinism, amplitude, and composition") {
    SyntheticSpec spec;
    spec.scenario = Scenario::SW;
    spec.n_domains = 3;
    spec.windows_per_class = 10;
    auto a = generate(spec);
    auto b = generate(spec);
    REQUIRE(a.size() == 3);
    for (std::size_t d = 0; d < a.size(); ++d) {
        REQUIRE(a[d].train.size() == b[d].train.size());
        for (std::size_t i = 0; i < a[d].train.size(); ++i)
            REQUIRE(a[d].train[i].values.data == b[d].train[i].values.data);
    }
    // each component wave is a unit-amplitude sine
    for (const auto& w : a[0].train) {
        REQUIRE(w.channels() == 2);
        REQUIRE(w.time() == 50);
        for (double v : w.values.data) REQUIRE(std::abs(v) <= 1.0);
    }
    // summed mode stores the sum of the two components
    SyntheticSpec summed = spec;
    summed.sw_summed = true;
    auto s = generate(summed);
    for (std::size_t i = 0; i < s[1].train.size(); ++i) {
        const auto& comp = a[1].train[i];
        const auto& sum = s[1].train[i];
        REQUIRE(sum.channels() == 1);
        for (std::size_t t = 0; t < sum.time(); ++t) {
            REQUIRE(std::abs(sum.values.at(0, t)) <= 2.0);
            REQUIRE(std::abs(sum.values.at(0, t) -
                             (comp.values.at(0, t) + comp.values.at(1, t))) < 1e-12);
        }
    }
    // signal formula spot value: f=(5,10) at 250 Hz, t=1
    const double x1 = std::sin(2.0 * M_PI * 5.0 * 1.0 / 250.0) +
                      std::sin(2.0 * M_PI * 10.0 * 1.0 / 250.0);
    REQUIRE(std::abs(x1 - 0.37402) < 1e-5);
}

TEST_CASE("sine-wave generator rejects frequencies beyond Nyquist") {
    SyntheticSpec spec;
    spec.scenario = Scenario::SW;
    spec.shift = ShiftKind::InterTranslate;
    spec.shift_magnitude = 10.0;  // pushes late domains past 125 Hz
    spec.n_domains = 12;
    REQUIRE_THROWS_AS(generate(spec), ContractError);
}

TEST_CASE("default spec shape: 12 domains, 3 classes, 50-sample windows") {
    SyntheticSpec spec;
    spec.windows_per_class = 5;
    auto data = generate(spec);
    REQUIRE(data.size() == 12);
    for (const auto& ds : data) {
        REQUIRE(ds.proportions.p.size() == 3);
        REQUIRE(!ds.train.empty());
        REQUIRE(!ds.valid.empty());
        REQUIRE(!ds.test.empty());
        REQUIRE(ds.train.front().channels() == 9);
        REQUIRE(ds.train.front().time() == 50);
        REQUIRE(ds.train.size() + ds.valid.size() + ds.test.size() == 15);
    }
}

TEST_CASE("gmm generator: channel means approach the mixture mean") {
    SyntheticSpec spec;
    spec.scenario = Scenario::GMM1;  // single component: mean is closed-form
    spec.n_domains = 1;
    spec.shift = ShiftKind::None;
    spec.windows_per_class = 30;
    auto data = generate(spec);
    const auto& ds = data[0];
    // gather class-0 windows across splits
    const double sigma = 0.6;
    for (std::size_t k = 0; k < 3; ++k) {  // spot-check a few channels
        double sum = 0.0;
        std::size_t n = 0;
        auto tally = [&](const std::vector<LabeledWindow>& split) {
            for (const auto& w : split) {
                if (w.label != 0) continue;
                for (std::size_t t = 0; t < w.time(); ++t) {
                    sum += w.values.at(k, t);
                    ++n;
                }
            }
        };
        tally(ds.train);
        tally(ds.valid);
        tally(ds.test);
        const double mean = sum / double(n);
        const double expect = 1.2 * std::cos(2.0 * M_PI * double((k + 1) * 1) / 9.0);
        REQUIRE(std::abs(mean - expect) < 3.0 * sigma / std::sqrt(double(n)));
    }
}

TEST_CASE("gmm classes are distinguishable, domains are shifted") {
    SyntheticSpec spec;
    spec.scenario = Scenario::GMM2;
    spec.n_domains = 4;
    spec.windows_per_class = 20;
    auto data = generate(spec);
    auto channel_mean = [](const DomainDataset& ds, int label, std::size_t k) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& w : ds.train) {
            if (w.label != label) continue;
            for (std::size_t t = 0; t < w.time(); ++t) {
                sum += w.values.at(k, t);
                ++n;
            }
        }
        return sum / double(n);
    };
    // class means differ within a domain
    bool classes_differ = false;
    for (std::size_t k = 0; k < 9; ++k)
        if (std::abs(channel_mean(data[0], 0, k) - channel_mean(data[0], 1, k)) > 0.3)
            classes_differ = true;
    REQUIRE(classes_differ);
    // the same class drifts across domains
    bool domains_differ = false;
    for (std::size_t k = 0; k < 9; ++k)
        if (std::abs(channel_mean(data[0], 0, k) - channel_mean(data[3], 0, k)) > 0.3)
            domains_differ = true;
    REQUIRE(domains_differ);
}

TEST_CASE("resampling to target proportions") {
    std::vector<LabeledWindow> split;
    for (int i = 0; i < 30; ++i) split.push_back(window1({double(i)}, i % 3));
    LabelProportions want{{0.6, 0.3, 0.1}};
    Rng rng(5);
    auto out = resample_to_proportions(split, want, rng);
    std::vector<int> counts(3, 0);
    for (const auto& w : out) counts[std::size_t(w.label)]++;
    REQUIRE(counts[0] > counts[1]);
    REQUIRE(counts[1] > counts[2]);
    REQUIRE(counts[2] >= 1);
    const double total = double(out.size());
    REQUIRE(std::abs(double(counts[0]) / total - 0.6) < 0.1);
}

TEST_CASE("dataset directory round trip") {
    SyntheticSpec spec;
    spec.scenario = Scenario::GMM2;
    spec.n_domains = 2;
    spec.windows_per_class = 5;
    auto data = generate(spec);
    DatasetMeta meta;
    meta.name = "roundtrip";
    meta.n_channels = 9;
    meta.window_len = 50;
    meta.n_classes = 3;
    meta.class_names = {"a", "b", "c"};
    const std::string dir = tmp_dir("ds_roundtrip");
    save_dataset(dir, data, meta);

    DatasetMeta loaded_meta;
    auto loaded = load_dataset(dir, &loaded_meta);
    REQUIRE(loaded_meta.name == "roundtrip");
    REQUIRE(loaded_meta.n_classes == 3);
    REQUIRE(loaded.size() == 2);
    for (std::size_t d = 0; d < 2; ++d) {
        REQUIRE(loaded[d].domain_id == data[d].domain_id);
        REQUIRE(loaded[d].train.size() == data[d].train.size());
        for (std::size_t i = 0; i < loaded[d].train.size(); ++i) {
            REQUIRE(loaded[d].train[i].label == data[d].train[i].label);
            // %.17g round-trips doubles exactly
            REQUIRE(loaded[d].train[i].values.data == data[d].train[i].values.data);
        }
        REQUIRE(loaded[d].proportions.p == data[d].proportions.p);
    }
}

TEST_CASE("unlabeled rows round-trip as label -1") {
    DomainDataset ds;
    ds.domain_id = 0;
    ds.train = {window1({1.0, 2.0}, -1), window1({3.0, 4.0}, -1)};
    ds.valid = {window1({1.0, 2.0}, 0)};
    ds.test = {window1({1.0, 2.0}, 1)};
    DatasetMeta meta;
    meta.n_channels = 1;
    meta.window_len = 2;
    meta.n_classes = 2;
    const std::string dir = tmp_dir("ds_unlabeled");
    save_dataset(dir, {ds}, meta);
    auto loaded = load_dataset(dir);
    REQUIRE(loaded[0].train[0].label == -1);
    REQUIRE(loaded[0].proportions.p.empty());  // no proportions without labels
}

TEST_CASE("malformed manifest and rows are rejected with context") {
    const std::string dir = tmp_dir("ds_bad");
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir + "/manifest.json");
        os << "{ not json";
    }
    REQUIRE_THROWS_AS(load_dataset(dir), ContractError);

    {
        std::ofstream os(dir + "/manifest.json");
        os << R"({"name":"x","n_channels":9,"window_len":2,"n_classes":2,"domains":[0]})";
    }
    {
        std::ofstream os(dir + "/d0_train.csv");
        os << "label,ch0_t0\n0,1.0,2.0,3.0,4.0,5.0\n";  // 5 values, not divisible by 9
    }
    {
        std::ofstream os(dir + "/d0_valid.csv");
        os << "label,ch0_t0\n";
    }
    {
        std::ofstream os(dir + "/d0_test.csv");
        os << "label,ch0_t0\n";
    }
    try {
        load_dataset(dir);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("row 1") != std::string::npos);
        REQUIRE(msg.find("9") != std::string::npos);
    }
}

TEST_CASE("window length disagreements are rejected unless variable") {
    const std::string dir = tmp_dir("ds_varlen");
    std::filesystem::create_directories(dir);
    auto write_csvs = [&] {
        std::ofstream tr(dir + "/d0_train.csv");
        tr << "label,ch0_t0,ch0_t1\n0,1.0,2.0\n1,1.0,2.0,3.0\n";  // lengths 2 and 3
        std::ofstream va(dir + "/d0_valid.csv");
        va << "label,ch0_t0\n0,1.0,2.0\n";
        std::ofstream te(dir + "/d0_test.csv");
        te << "label,ch0_t0\n1,1.0,2.0\n";
    };
    write_csvs();
    {
        std::ofstream os(dir + "/manifest.json");
        os << R"({"name":"x","n_channels":1,"window_len":2,"n_classes":2,"domains":[0]})";
    }
    REQUIRE_THROWS_AS(load_dataset(dir), ContractError);
    {
        std::ofstream os(dir + "/manifest.json");
        os << R"({"name":"x","n_channels":1,"window_len":"variable","n_classes":2,"domains":[0]})";
    }
    auto loaded = load_dataset(dir);
    REQUIRE(loaded[0].train[0].time() == 2);
    REQUIRE(loaded[0].train[1].time() == 3);
}
