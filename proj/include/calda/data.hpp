#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calda/losses.hpp"
#include "calda/rng.hpp"
#include "calda/tensor.hpp"

namespace calda {

// One fixed-rate multichannel window, channel-major [K x H].
struct LabeledWindow {
    Tensor values;      // shape [channels, time]
    int label = -1;     // -1 = unlabeled
    int domain = 0;

    std::size_t channels() const { return values.shape[0]; }
    std::size_t time() const { return values.shape[1]; }
};

struct ChannelStats {
    double mean = 0.0;
    double std = 1.0;
};

struct DomainDataset {
    int domain_id = 0;
    std::vector<LabeledWindow> train, valid, test;
    std::vector<ChannelStats> norm_stats;
    LabelProportions proportions;
    bool normalized = false;
};

enum class Scenario { SW, GMM1, GMM2, GMM3 };
enum class ShiftKind { None, InterTranslate, IntraTranslate, InterRotate, IntraRotate };

struct SyntheticSpec {
    Scenario scenario = Scenario::GMM2;
    std::size_t n_domains = 12;
    std::size_t n_classes = 3;
    std::size_t window_len = 50;
    double sample_rate_hz = 250.0;
    ShiftKind shift = ShiftKind::InterTranslate;
    double shift_magnitude = 1.0;
    std::size_t windows_per_class = 40;
    std::uint64_t seed = 1;
    bool sw_summed = false;   // store the summed single-channel signal instead
                              // of the two component waves

    std::size_t channels() const {
        if (scenario == Scenario::SW) return sw_summed ? 1 : 2;
        return 9;
    }
    std::size_t mixture_components() const {
        switch (scenario) {
            case Scenario::GMM1: return 1;
            case Scenario::GMM2: return 2;
            case Scenario::GMM3: return 3;
            default: return 0;
        }
    }
};

// ---------------------------------------------------------------------------
// Normalization and label statistics

inline std::vector<ChannelStats> compute_channel_stats(const std::vector<LabeledWindow>& split) {
    check(!split.empty(), "compute_channel_stats: empty split");
    const std::size_t ch = split.front().channels();
    std::vector<double> sum(ch, 0.0), sumsq(ch, 0.0);
    std::vector<std::size_t> count(ch, 0);
    for (const auto& w : split) {
        check(w.channels() == ch, "compute_channel_stats: channel count mismatch");
        for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t t = 0; t < w.time(); ++t) {
                const double v = w.values.at(c, t);
                sum[c] += v;
                sumsq[c] += v * v;
                ++count[c];
            }
    }
    std::vector<ChannelStats> stats(ch);
    for (std::size_t c = 0; c < ch; ++c) {
        const double n = static_cast<double>(count[c]);
        const double mean = sum[c] / n;
        const double var = std::max(sumsq[c] / n - mean * mean, 0.0);
        stats[c].mean = mean;
        // Constant channels get std clamped to 1 (values map to 0).
        stats[c].std = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return stats;
}

// Normalize all three splits with statistics from the train split only.
inline void normalize(DomainDataset& ds) {
    check(!ds.train.empty(), "normalize: empty train split");
    ds.norm_stats = compute_channel_stats(ds.train);
    auto apply = [&](std::vector<LabeledWindow>& split) {
        for (auto& w : split)
            for (std::size_t c = 0; c < w.channels(); ++c)
                for (std::size_t t = 0; t < w.time(); ++t)
                    w.values.at(c, t) =
                        (w.values.at(c, t) - ds.norm_stats[c].mean) / ds.norm_stats[c].std;
    };
    apply(ds.train);
    apply(ds.valid);
    apply(ds.test);
    ds.normalized = true;
}

inline LabelProportions label_proportions(const std::vector<LabeledWindow>& split,
                                          std::size_t n_classes) {
    check(!split.empty(), "label_proportions: empty split");
    std::vector<double> counts(n_classes, 0.0);
    for (const auto& w : split) {
        check(w.label >= 0, "label_proportions: unlabeled window present");
        check(static_cast<std::size_t>(w.label) < n_classes,
              "label_proportions: label out of range");
        counts[static_cast<std::size_t>(w.label)] += 1.0;
    }
    const double total = static_cast<double>(split.size());
    for (double& c : counts) c /= total;
    return LabelProportions{counts};
}

// Redistribute roughly `budget` probability mass between random class pairs,
// clamp at 0, renormalize. Returns the noisy vector and the realized noise
// 0.5 * L1(p, noisy) (the post-normalization figure can exceed the budget).
inline std::pair<LabelProportions, double> inject_proportion_noise(const LabelProportions& p,
                                                                  double budget, Rng& rng) {
    check(budget >= 0.0 && budget <= 1.0, "inject_proportion_noise: budget out of [0,1]");
    p.validate();
    const std::size_t l = p.p.size();
    if (budget == 0.0 || l < 2) return {p, 0.0};

    // random zero-sum redistribution direction, L1-normalized to 2 so that a
    // scale of `budget` would move exactly that much mass if nothing clamped
    std::vector<double> delta(l);
    double l1 = 0.0;
    while (l1 < 1e-12) {
        double mean = 0.0;
        for (double& v : delta) {
            v = rng.normal();
            mean += v;
        }
        mean /= static_cast<double>(l);
        l1 = 0.0;
        for (double& v : delta) {
            v -= mean;
            l1 += std::abs(v);
        }
    }
    for (double& v : delta) v *= 2.0 / l1;

    auto apply = [&](double s) {
        std::vector<double> q(l);
        double sum = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            q[i] = std::max(p.p[i] + s * delta[i], 0.0);
            sum += q[i];
        }
        double moved = 0.0;
        for (std::size_t i = 0; i < l; ++i) {
            q[i] /= sum;
            moved += std::abs(q[i] - p.p[i]);
        }
        return std::make_pair(q, 0.5 * moved);
    };

    // clamping at 0 bends the movement curve, so find the scale whose
    // post-normalization movement hits the budget; saturate when infeasible
    double lo = 0.0, hi = 2.0;
    if (apply(hi).second > budget) {
        for (int it = 0; it < 60; ++it) {
            const double mid = 0.5 * (lo + hi);
            (apply(mid).second < budget ? lo : hi) = mid;
        }
    }
    auto [q, realized] = apply(hi);
    return {LabelProportions{q}, realized};
}

// ---------------------------------------------------------------------------
// Synthetic generators

namespace detail {

// Deterministic per-class split: within each class, last 20% to test, then
// last 20% of the remainder to valid, so every split keeps the class balance.
inline void split_windows(std::vector<LabeledWindow> windows, DomainDataset& ds) {
    std::map<int, std::vector<LabeledWindow>> by_class;
    for (auto& w : windows) by_class[w.label].push_back(std::move(w));
    for (auto& [label, group] : by_class) {
        const std::size_t n = group.size();
        const std::size_t n_test = std::max<std::size_t>(1, n / 5);
        const std::size_t n_rest = n - n_test;
        const std::size_t n_valid = std::max<std::size_t>(1, n_rest / 5);
        for (std::size_t i = 0; i < n; ++i) {
            if (i < n - n_test - n_valid)
                ds.train.push_back(std::move(group[i]));
            else if (i < n - n_test)
                ds.valid.push_back(std::move(group[i]));
            else
                ds.test.push_back(std::move(group[i]));
        }
    }
}

inline void rotate2(double& x, double& y, double cx, double cy, double angle) {
    const double dx = x - cx, dy = y - cy;
    const double ca = std::cos(angle), sa = std::sin(angle);
    x = cx + ca * dx - sa * dy;
    y = cy + sa * dx + ca * dy;
}

}  // namespace detail

// Sum-of-two-sine-waves scenario. Per (domain, class) the frequency pair is
// drawn from a 2D normal whose mean encodes class identity; shifts translate
// or rotate the class-mean constellation per domain.
inline std::vector<DomainDataset> generate_sw(const SyntheticSpec& spec) {
    check(spec.scenario == Scenario::SW, "generate_sw: wrong scenario");
    const double nyquist = spec.sample_rate_hz / 2.0;
    const double freq_sigma = 1.5;
    Rng rng(spec.seed);
    std::vector<DomainDataset> out;
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        const double dd = static_cast<double>(d);
        // class-mean frequency pairs after the domain shift
        std::vector<std::pair<double, double>> means(spec.n_classes);
        double cx = 0.0, cy = 0.0;
        for (std::size_t c = 0; c < spec.n_classes; ++c) {
            means[c] = {15.0 + 12.0 * static_cast<double>(c),
                        45.0 + 12.0 * static_cast<double>(c)};
            cx += means[c].first;
            cy += means[c].second;
        }
        cx /= static_cast<double>(spec.n_classes);
        cy /= static_cast<double>(spec.n_classes);
        double cov_angle = 0.0;  // orientation of the per-class covariance
        switch (spec.shift) {
            case ShiftKind::None:
                break;
            case ShiftKind::InterTranslate:
                for (auto& m : means) {
                    m.first += spec.shift_magnitude * dd;
                    m.second += spec.shift_magnitude * dd;
                }
                break;
            case ShiftKind::IntraTranslate:
                for (std::size_t c = 0; c < spec.n_classes; ++c) {
                    const double a = 6.283185307179586 * static_cast<double>(c) /
                                     static_cast<double>(spec.n_classes);
                    means[c].first += spec.shift_magnitude * dd * std::cos(a);
                    means[c].second += spec.shift_magnitude * dd * std::sin(a);
                }
                break;
            case ShiftKind::InterRotate:
                for (auto& m : means)
                    detail::rotate2(m.first, m.second, cx, cy,
                                    spec.shift_magnitude * dd * 0.05235987755982988);  // 3 deg
                break;
            case ShiftKind::IntraRotate:
                cov_angle = spec.shift_magnitude * dd * 0.05235987755982988;
                break;
        }
        std::vector<LabeledWindow> windows;
        for (std::size_t c = 0; c < spec.n_classes; ++c) {
            for (std::size_t w = 0; w < spec.windows_per_class; ++w) {
                // anisotropic draw so rotation shifts are observable
                const double s1 = spec.shift == ShiftKind::IntraRotate ? 2.0 : freq_sigma;
                const double s2 = spec.shift == ShiftKind::IntraRotate ? 0.5 : freq_sigma;
                double u = rng.normal(0.0, s1), v = rng.normal(0.0, s2);
                const double ca = std::cos(cov_angle), sa = std::sin(cov_angle);
                const double f1 = means[c].first + ca * u - sa * v;
                const double f2 = means[c].second + sa * u + ca * v;
                check(f1 < nyquist && f2 < nyquist,
                      "generate_sw: frequency exceeds the Nyquist rate");
                LabeledWindow win;
                win.label = static_cast<int>(c);
                win.domain = static_cast<int>(d);
                win.values = Tensor({spec.channels(), spec.window_len});
                for (std::size_t t = 0; t < spec.window_len; ++t) {
                    const double tt = static_cast<double>(t) / spec.sample_rate_hz;
                    const double w1 = std::sin(6.283185307179586 * f1 * tt);
                    const double w2 = std::sin(6.283185307179586 * f2 * tt);
                    if (spec.sw_summed) {
                        win.values.at(0, t) = w1 + w2;
                    } else {
                        win.values.at(0, t) = w1;
                        win.values.at(1, t) = w2;
                    }
                }
                windows.push_back(std::move(win));
            }
        }
        detail::split_windows(std::move(windows), ds);
        ds.proportions = label_proportions(ds.train, spec.n_classes);
        out.push_back(std::move(ds));
    }
    return out;
}

// Gaussian-mixture scenario: 9 channels, each timestep sampled i.i.d. from a
// per-(domain, class, channel) mixture. Class identity sets the base means as
// a cosine signature over the channel index with frequency c+1; domain
// identity slides that frequency toward the neighboring class (0.05 per
// domain step at magnitude 1), adds a bounded mean offset (up to 0.5 sigma at
// the last domain, opposite directions per component), and widens the
// variances. The frequency slide makes an unadapted source-trained classifier
// confuse neighboring classes on far domains while leaving classes separable
// within each domain; the offset keeps domains identifiable after per-domain
// normalization without drowning the class signal.
inline std::vector<DomainDataset> generate_gmm(const SyntheticSpec& spec) {
    const std::size_t m_comp = spec.mixture_components();
    check(m_comp >= 1, "generate_gmm: wrong scenario");
    const std::size_t ch = 9;
    const double base_sigma = 0.6;
    Rng rng(spec.seed);
    std::vector<DomainDataset> out;
    for (std::size_t d = 0; d < spec.n_domains; ++d) {
        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        const double dd = static_cast<double>(d);
        const double mag = spec.shift == ShiftKind::None ? 0.0 : spec.shift_magnitude;
        const double freq_slide = 0.05 * mag * dd;
        const double sigma = base_sigma * (1.0 + 0.05 * mag * dd);
        check(sigma > 0.0, "generate_gmm: nonpositive variance");
        std::vector<LabeledWindow> windows;
        for (std::size_t c = 0; c < spec.n_classes; ++c) {
            // mixture parameters for this (domain, class)
            std::vector<std::vector<double>> mean(ch, std::vector<double>(m_comp));
            for (std::size_t k = 0; k < ch; ++k)
                for (std::size_t m = 0; m < m_comp; ++m) {
                    const double class_term =
                        1.2 * std::cos(6.283185307179586 * static_cast<double>(k + 1) *
                                       (static_cast<double>(c + 1) + freq_slide) / 9.0);
                    const double comp_term =
                        2.0 * (static_cast<double>(m) - static_cast<double>(m_comp - 1) / 2.0);
                    const double dir = ((k + m) % 2 == 0) ? 1.0 : -1.0;
                    const double domain_frac = dd / static_cast<double>(spec.n_domains);
                    mean[k][m] =
                        class_term + comp_term + 0.5 * base_sigma * mag * domain_frac * dir;
                }
            for (std::size_t w = 0; w < spec.windows_per_class; ++w) {
                LabeledWindow win;
                win.label = static_cast<int>(c);
                win.domain = static_cast<int>(d);
                win.values = Tensor({ch, spec.window_len});
                for (std::size_t k = 0; k < ch; ++k)
                    for (std::size_t t = 0; t < spec.window_len; ++t) {
                        const std::size_t m =
                            m_comp == 1 ? 0 : static_cast<std::size_t>(rng.uniform_index(m_comp));
                        win.values.at(k, t) = rng.normal(mean[k][m], sigma);
                    }
                windows.push_back(std::move(win));
            }
        }
        detail::split_windows(std::move(windows), ds);
        ds.proportions = label_proportions(ds.train, spec.n_classes);
        out.push_back(std::move(ds));
    }
    return out;
}

inline std::vector<DomainDataset> generate(const SyntheticSpec& spec) {
    return spec.scenario == Scenario::SW ? generate_sw(spec) : generate_gmm(spec);
}

// Subsample a window list so the class frequencies approximate the given
// proportions (used to build unbalanced targets). Deterministic given rng.
inline std::vector<LabeledWindow> resample_to_proportions(const std::vector<LabeledWindow>& split,
                                                          const LabelProportions& props,
                                                          Rng& rng) {
    props.validate();
    const std::size_t l = props.p.size();
    std::vector<std::vector<std::size_t>> by_class(l);
    for (std::size_t i = 0; i < split.size(); ++i) {
        check(split[i].label >= 0, "resample_to_proportions: unlabeled window");
        by_class[static_cast<std::size_t>(split[i].label)].push_back(i);
    }
    // the scarcest class relative to its proportion bounds the total
    double max_total = static_cast<double>(split.size());
    for (std::size_t c = 0; c < l; ++c)
        if (props.p[c] > 0.0)
            max_total = std::min(max_total, static_cast<double>(by_class[c].size()) / props.p[c]);
    std::vector<LabeledWindow> out;
    for (std::size_t c = 0; c < l; ++c) {
        std::size_t want = static_cast<std::size_t>(std::round(max_total * props.p[c]));
        want = std::min(want, by_class[c].size());
        rng.shuffle(by_class[c]);
        for (std::size_t i = 0; i < want; ++i) out.push_back(split[by_class[c][i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// manifest.json + per-domain per-split CSV d<id>_<split>.csv with header
// label,ch0_t0,...,ch{K-1}_t{H-1}; label -1 marks unlabeled rows.

namespace detail {

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void save_split_csv(const std::string& path, const std::vector<LabeledWindow>& split,
                           std::size_t channels) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "save_dataset: cannot open " + path);
    // header from the first window's length (rows may vary when variable)
    const std::size_t h = split.empty() ? 0 : split.front().time();
    os << "label";
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t t = 0; t < h; ++t) os << ",ch" << c << "_t" << t;
    os << "\n";
    for (const auto& w : split) {
        os << w.label;
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t t = 0; t < w.time(); ++t)
                os << "," << fmt_double(w.values.at(c, t));
        os << "\n";
    }
}

inline std::vector<LabeledWindow> load_split_csv(const std::string& path, int domain,
                                                 std::size_t channels, std::size_t window_len,
                                                 bool variable_len) {
    std::ifstream is(path);
    check(static_cast<bool>(is), "load_dataset: cannot open " + path);
    std::string line;
    check(static_cast<bool>(std::getline(is, line)), "load_dataset: missing header in " + path);
    std::vector<LabeledWindow> out;
    std::size_t row = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++row;
        std::vector<double> vals;
        std::size_t pos = 0;
        int label = 0;
        {
            const std::size_t comma = line.find(',');
            check(comma != std::string::npos,
                  "load_dataset: malformed row " + std::to_string(row) + " in " + path);
            label = std::stoi(line.substr(0, comma));
            pos = comma + 1;
        }
        while (pos <= line.size()) {
            const std::size_t comma = line.find(',', pos);
            const std::string tok = comma == std::string::npos ? line.substr(pos)
                                                               : line.substr(pos, comma - pos);
            vals.push_back(std::stod(tok));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        check(vals.size() % channels == 0,
              "load_dataset: row " + std::to_string(row) + " in " + path +
                  " does not divide into " + std::to_string(channels) + " channels");
        const std::size_t h = vals.size() / channels;
        if (!variable_len)
            check(h == window_len, "load_dataset: row " + std::to_string(row) + " in " + path +
                                       " has window length " + std::to_string(h) +
                                       ", manifest declares " + std::to_string(window_len));
        LabeledWindow w;
        w.label = label;
        w.domain = domain;
        w.values = Tensor({channels, h}, std::move(vals));
        out.push_back(std::move(w));
    }
    return out;
}

}  // namespace detail

struct DatasetMeta {
    std::string name = "dataset";
    std::size_t n_channels = 0;
    std::size_t window_len = 0;   // 0 = variable
    std::size_t n_classes = 0;
    std::vector<std::string> class_names;
    std::vector<int> domains;
    std::string signal_mode;      // optional; "components" or "summed" for SW
};

inline void save_dataset(const std::string& dir, const std::vector<DomainDataset>& datasets,
                         const DatasetMeta& meta) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["name"] = meta.name;
    manifest["n_channels"] = meta.n_channels;
    if (meta.window_len == 0)
        manifest["window_len"] = "variable";
    else
        manifest["window_len"] = meta.window_len;
    manifest["n_classes"] = meta.n_classes;
    manifest["class_names"] = meta.class_names;
    std::vector<int> domains;
    for (const auto& ds : datasets) domains.push_back(ds.domain_id);
    manifest["domains"] = domains;
    if (!meta.signal_mode.empty()) manifest["signal_mode"] = meta.signal_mode;
    {
        std::ofstream os(dir + "/manifest.json", std::ios::binary);
        check(static_cast<bool>(os), "save_dataset: cannot write manifest");
        os << manifest.dump(2) << "\n";
    }
    for (const auto& ds : datasets) {
        const std::string base = dir + "/d" + std::to_string(ds.domain_id) + "_";
        detail::save_split_csv(base + "train.csv", ds.train, meta.n_channels);
        detail::save_split_csv(base + "valid.csv", ds.valid, meta.n_channels);
        detail::save_split_csv(base + "test.csv", ds.test, meta.n_channels);
    }
}

inline std::vector<DomainDataset> load_dataset(const std::string& dir, DatasetMeta* meta_out = nullptr) {
    std::ifstream is(dir + "/manifest.json");
    check(static_cast<bool>(is), "load_dataset: cannot open " + dir + "/manifest.json");
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("load_dataset: malformed manifest: ") + e.what());
    }
    DatasetMeta meta;
    meta.name = manifest.value("name", "dataset");
    check(manifest.contains("n_channels") && manifest.contains("n_classes") &&
              manifest.contains("domains"),
          "load_dataset: manifest missing required fields");
    meta.n_channels = manifest["n_channels"].get<std::size_t>();
    meta.n_classes = manifest["n_classes"].get<std::size_t>();
    bool variable = false;
    if (manifest.contains("window_len")) {
        if (manifest["window_len"].is_string()) {
            check(manifest["window_len"].get<std::string>() == "variable",
                  "load_dataset: bad window_len value");
            variable = true;
        } else {
            meta.window_len = manifest["window_len"].get<std::size_t>();
        }
    } else {
        variable = true;
    }
    if (manifest.contains("class_names"))
        meta.class_names = manifest["class_names"].get<std::vector<std::string>>();
    if (manifest.contains("signal_mode"))
        meta.signal_mode = manifest["signal_mode"].get<std::string>();
    std::vector<DomainDataset> out;
    for (int d : manifest["domains"].get<std::vector<int>>()) {
        meta.domains.push_back(d);
        DomainDataset ds;
        ds.domain_id = d;
        const std::string base = dir + "/d" + std::to_string(d) + "_";
        ds.train = detail::load_split_csv(base + "train.csv", d, meta.n_channels,
                                          meta.window_len, variable);
        ds.valid = detail::load_split_csv(base + "valid.csv", d, meta.n_channels,
                                          meta.window_len, variable);
        ds.test = detail::load_split_csv(base + "test.csv", d, meta.n_channels,
                                         meta.window_len, variable);
        bool all_labeled = true;
        for (const auto& w : ds.train)
            if (w.label < 0) all_labeled = false;
        if (all_labeled && !ds.train.empty())
            ds.proportions = label_proportions(ds.train, meta.n_classes);
        out.push_back(std::move(ds));
    }
    if (meta_out) *meta_out = meta;
    return out;
}

}  // namespace calda
