#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calda/data.hpp"
#include "calda/losses.hpp"
#include "calda/model.hpp"
#include "calda/pairing.hpp"

namespace calda {

enum class Method { NoAdaptation, AdversaryOnly, Calda };

inline Method parse_method(const std::string& s) {
    if (s == "no_adaptation") return Method::NoAdaptation;
    if (s == "adversary_only") return Method::AdversaryOnly;
    if (s == "calda") return Method::Calda;
    throw ContractError("unknown method: " + s);
}

inline Strategy parse_strategy(const std::string& s) {
    if (s == "within") return Strategy::Within;
    if (s == "any") return Strategy::Any;
    if (s == "cross") return Strategy::Cross;
    throw ContractError("unknown strategy: " + s);
}

inline SamplingMode parse_sampling(const std::string& s) {
    if (s == "hard") return SamplingMode::Hard;
    if (s == "random") return SamplingMode::Random;
    throw ContractError("unknown sampling mode: " + s);
}

struct ExperimentConfig {
    // data: a dataset directory, or a synthetic spec when the directory is empty
    std::string dataset_dir;
    SyntheticSpec synth;

    std::string method = "calda";
    std::string strategy = "cross";
    std::string sampling = "hard";
    bool pl = false;
    bool ws = false;
    bool dg = false;
    bool no_adversary = false;

    std::size_t n_sources = 2;
    int target = 0;
    std::vector<int> sources;          // explicit source set; sampled when empty
    std::uint64_t source_set_seed = 1;
    std::uint64_t model_seed = 1;

    std::size_t iterations = 3000;     // desk scale; --paper-scale restores 30000
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double lambda_c = 10.0;
    double tau = 0.1;
    std::size_t k1 = 10;
    std::size_t r = 2;                 // k2 = r * k1
    double ws_noise_budget = 0.0;
    double grl_gamma = 10.0;

    std::vector<std::size_t> conv_filters{64, 128, 64};
    std::vector<std::size_t> conv_widths{8, 5, 3};
    std::size_t domain_hidden = 128;
    std::size_t proj_dim = 128;

    std::size_t valid_every = 100;
    bool use_target_validation = false;  // oracle studies only
    bool record_loss_trace = false;
    std::string checkpoint_out;

    std::size_t k2() const { return r * k1; }

    void validate() const {
        check(n_sources >= 2, "config: n_sources must be >= 2 for multi-source runs");
        check(!(ws && dg), "config: ws requires target rows, dg excludes them");
        check(lambda_c >= 0.0, "config: lambda_c must be >= 0");
        check(tau > 0.0, "config: tau must be > 0");
        check(k1 >= 1 && r >= 1, "config: k1 and r must be >= 1");
        check(iterations >= 1 && batch_size >= 1, "config: iterations/batch_size must be >= 1");
        check(conv_filters.size() == conv_widths.size(),
              "config: conv_filters and conv_widths lengths disagree");
    }
};

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("dataset", c.dataset_dir);
    std::string scenario, shift;
    if (j.contains("scenario")) {
        scenario = j.at("scenario").get<std::string>();
        if (scenario == "sw") c.synth.scenario = Scenario::SW;
        else if (scenario == "gmm1") c.synth.scenario = Scenario::GMM1;
        else if (scenario == "gmm2") c.synth.scenario = Scenario::GMM2;
        else if (scenario == "gmm3") c.synth.scenario = Scenario::GMM3;
        else throw ContractError("unknown scenario: " + scenario);
    }
    if (j.contains("shift")) {
        shift = j.at("shift").get<std::string>();
        if (shift == "none") c.synth.shift = ShiftKind::None;
        else if (shift == "inter_translate") c.synth.shift = ShiftKind::InterTranslate;
        else if (shift == "intra_translate") c.synth.shift = ShiftKind::IntraTranslate;
        else if (shift == "inter_rotate") c.synth.shift = ShiftKind::InterRotate;
        else if (shift == "intra_rotate") c.synth.shift = ShiftKind::IntraRotate;
        else throw ContractError("unknown shift: " + shift);
    }
    get("shift_magnitude", c.synth.shift_magnitude);
    get("n_domains", c.synth.n_domains);
    get("n_classes", c.synth.n_classes);
    get("window_len", c.synth.window_len);
    get("windows_per_class", c.synth.windows_per_class);
    get("data_seed", c.synth.seed);
    get("method", c.method);
    get("strategy", c.strategy);
    get("sampling", c.sampling);
    get("pl", c.pl);
    get("ws", c.ws);
    get("dg", c.dg);
    get("no_adversary", c.no_adversary);
    get("n_sources", c.n_sources);
    get("target", c.target);
    get("sources", c.sources);
    get("source_set_seed", c.source_set_seed);
    get("model_seed", c.model_seed);
    get("iterations", c.iterations);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("lambda_c", c.lambda_c);
    get("tau", c.tau);
    get("k1", c.k1);
    get("r", c.r);
    get("ws_noise_budget", c.ws_noise_budget);
    get("grl_gamma", c.grl_gamma);
    get("conv_filters", c.conv_filters);
    get("conv_widths", c.conv_widths);
    get("domain_hidden", c.domain_hidden);
    get("proj_dim", c.proj_dim);
    get("valid_every", c.valid_every);
    get("use_target_validation", c.use_target_validation);
    get("record_loss_trace", c.record_loss_trace);
    get("checkpoint_out", c.checkpoint_out);
}

// ---------------------------------------------------------------------------
// Batch assembly

struct Batch {
    Tensor x;                 // [rows, ch, time]
    std::vector<int> labels;  // -1 = unlabeled target row
    std::vector<int> domains; // 0 = target, i = source i

    std::size_t rows() const { return labels.size(); }
};

// With WS, half the batch goes to the target and the other half is split
// equally among the sources; without WS the batch is split evenly across the
// n sources plus the target; with DG there are no target rows. Remainder
// rows go to the first listed domain (target, or the first source when the
// target takes a fixed half / is absent).
inline Batch assemble_batch(const std::vector<const DomainDataset*>& sources,
                            const DomainDataset* target, std::size_t batch_size, bool ws,
                            bool dg, Rng& rng) {
    check(!sources.empty(), "assemble_batch: no source domains");
    const std::size_t n = sources.size();
    std::vector<std::size_t> counts;   // target first when present
    if (dg) {
        const std::size_t per = batch_size / n;
        counts.assign(n, per);
        counts[0] += batch_size - per * n;
        check(per >= 1, "assemble_batch: batch too small for source count");
    } else if (ws) {
        const std::size_t t_rows = batch_size / 2;
        const std::size_t s_rows = batch_size - t_rows;
        const std::size_t per = s_rows / n;
        check(t_rows >= 1 && per >= 1, "assemble_batch: batch too small");
        counts.push_back(t_rows);
        for (std::size_t i = 0; i < n; ++i) counts.push_back(per);
        counts[1] += s_rows - per * n;
    } else {
        const std::size_t per = batch_size / (n + 1);
        check(per >= 1, "assemble_batch: batch too small for domain count");
        counts.assign(n + 1, per);
        counts[0] += batch_size - per * (n + 1);
    }

    std::vector<const DomainDataset*> domains_in_order;
    std::vector<int> domain_ids;
    if (!dg) {
        check(target != nullptr, "assemble_batch: target dataset required");
        domains_in_order.push_back(target);
        domain_ids.push_back(0);
    }
    for (std::size_t i = 0; i < n; ++i) {
        domains_in_order.push_back(sources[i]);
        domain_ids.push_back(static_cast<int>(i + 1));
    }

    Batch batch;
    std::vector<const LabeledWindow*> rows;
    for (std::size_t di = 0; di < domains_in_order.size(); ++di) {
        const auto& train = domains_in_order[di]->train;
        check(!train.empty(), "assemble_batch: empty train split for domain " +
                                  std::to_string(domain_ids[di]));
        for (std::size_t r = 0; r < counts[di]; ++r) {
            const auto& w = train[rng.uniform_index(train.size())];
            rows.push_back(&w);
            batch.labels.push_back(domain_ids[di] == 0 ? -1 : w.label);
            batch.domains.push_back(domain_ids[di]);
        }
    }
    const std::size_t ch = rows.front()->channels(), time = rows.front()->time();
    batch.x = Tensor({rows.size(), ch, time});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        check(rows[i]->channels() == ch && rows[i]->time() == time,
              "assemble_batch: mixed window shapes in one batch");
        std::copy(rows[i]->values.data.begin(), rows[i]->values.data.end(),
                  batch.x.data.begin() + static_cast<std::ptrdiff_t>(i * ch * time));
    }
    return batch;
}

// ---------------------------------------------------------------------------
// One training step: forward, losses, manual backward

struct StepOptions {
    double lambda_d = 0.0;
    double lambda_c = 0.0;
    SamplingConfig pairing;
    bool use_task = true;
    bool use_domain = true;
    bool use_contrastive = true;
    bool use_ws = false;
    const LabelProportions* ws_proportions = nullptr;
    std::uint64_t sampling_seed = 0;
    bool dg = false;
};

// Computes the loss breakdown for one batch; when `grads` is non-null also
// accumulates d(total)/d(params), with the gradient reversal applied to the
// feature-extractor part of the domain term.
inline LossBreakdown train_step(const ModelParams& params, const Batch& batch,
                                const StepOptions& opt, ModelParams* grads) {
    const std::size_t rows = batch.rows();
    const std::size_t n_classes = params.config.n_classes;

    FeatureCache fc;
    Tensor features = feature_extract(params, batch.x, &fc);
    HeadsCache hc;
    heads_forward(params, features, hc);

    Tensor dfeatures({rows, params.feature_dim()});
    Tensor dtask_lsm(hc.task_log_probs.shape);
    LossBreakdown breakdown;

    // task loss over labeled rows only
    std::size_t labeled = 0;
    for (int l : batch.labels)
        if (l >= 0) ++labeled;
    if (opt.use_task) {
        check(labeled > 0, "train_step: no labeled rows for the task loss");
        std::vector<bool> include(rows);
        std::vector<int> labels(rows, 0);
        for (std::size_t i = 0; i < rows; ++i) {
            include[i] = batch.labels[i] >= 0;
            if (include[i]) labels[i] = batch.labels[i];
        }
        breakdown.task = cross_entropy_mean(hc.task_log_probs, labels, include);
        const double inv = 1.0 / static_cast<double>(labeled);
        for (std::size_t i = 0; i < rows; ++i)
            if (include[i])
                dtask_lsm.at(i, static_cast<std::size_t>(labels[i])) -= inv;
    }

    // weak-supervision KL on the mean predicted target distribution
    if (opt.use_ws) {
        check(opt.ws_proportions != nullptr, "train_step: ws enabled without proportions");
        std::vector<std::size_t> target_rows;
        for (std::size_t i = 0; i < rows; ++i)
            if (batch.domains[i] == 0) target_rows.push_back(i);
        check(!target_rows.empty(), "train_step: ws enabled with empty target batch");
        std::vector<double> mean_pred(n_classes, 0.0);
        const double inv_t = 1.0 / static_cast<double>(target_rows.size());
        for (std::size_t i : target_rows)
            for (std::size_t j = 0; j < n_classes; ++j)
                mean_pred[j] += std::exp(hc.task_log_probs.at(i, j)) * inv_t;
        breakdown.weak_supervision = weak_supervision_loss(*opt.ws_proportions, mean_pred);
        const std::vector<double> dmean = weak_supervision_grad(*opt.ws_proportions, mean_pred);
        // d(mean_pred_j)/d(lsm_ij) = inv_t * p_ij
        for (std::size_t i : target_rows)
            for (std::size_t j = 0; j < n_classes; ++j)
                dtask_lsm.at(i, j) += dmean[j] * inv_t * std::exp(hc.task_log_probs.at(i, j));
    }

    if (grads && (opt.use_task || opt.use_ws)) {
        const Tensor dlogits = log_softmax_backward(hc.task_log_probs, dtask_lsm);
        AffineGrads ag = affine_backward(hc.features, params.task_head.w, dlogits);
        for (std::size_t i = 0; i < ag.dw.size(); ++i)
            grads->task_head.w.data[i] += ag.dw.data[i];
        for (std::size_t i = 0; i < ag.db.size(); ++i)
            grads->task_head.b.data[i] += ag.db.data[i];
        for (std::size_t i = 0; i < dfeatures.size(); ++i)
            dfeatures.data[i] += ag.dx.data[i];
    }

    // domain loss over all rows (adversary); DG maps source i to output i-1
    if (opt.use_domain) {
        std::vector<int> adv_labels(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            adv_labels[i] = opt.dg ? batch.domains[i] - 1 : batch.domains[i];
            check(adv_labels[i] >= 0 &&
                      static_cast<std::size_t>(adv_labels[i]) < params.config.n_domains,
                  "train_step: domain label outside adversary range");
        }
        breakdown.domain = cross_entropy_mean(hc.domain_log_probs, adv_labels,
                                              std::vector<bool>(rows, true));
        if (grads) {
            Tensor dlsm(hc.domain_log_probs.shape);
            const double inv = 1.0 / static_cast<double>(rows);
            for (std::size_t i = 0; i < rows; ++i)
                dlsm.at(i, static_cast<std::size_t>(adv_labels[i])) -= inv;
            const Tensor dlogits = log_softmax_backward(hc.domain_log_probs, dlsm);
            AffineGrads g2 =
                affine_backward(hc.domain_hidden, params.domain_head[1].w, dlogits);
            for (std::size_t i = 0; i < g2.dw.size(); ++i)
                grads->domain_head[1].w.data[i] += g2.dw.data[i];
            for (std::size_t i = 0; i < g2.db.size(); ++i)
                grads->domain_head[1].b.data[i] += g2.db.data[i];
            const Tensor dhidden = relu_backward(hc.domain_hidden_pre, g2.dx);
            AffineGrads g1 = affine_backward(hc.features, params.domain_head[0].w, dhidden);
            for (std::size_t i = 0; i < g1.dw.size(); ++i)
                grads->domain_head[0].w.data[i] += g1.dw.data[i];
            for (std::size_t i = 0; i < g1.db.size(); ++i)
                grads->domain_head[0].b.data[i] += g1.db.data[i];
            // gradient reversal between F and D
            const Tensor reversed = grl_backward(g1.dx, opt.lambda_d);
            for (std::size_t i = 0; i < dfeatures.size(); ++i)
                dfeatures.data[i] += reversed.data[i];
        }
    }

    // contrastive loss on the projected embeddings
    if (opt.use_contrastive) {
        const std::size_t proj = params.config.proj_dim;
        std::vector<std::vector<double>> z_rows(rows), lp_rows(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            z_rows[i].assign(&hc.z.data[i * proj], &hc.z.data[(i + 1) * proj]);
            lp_rows[i].assign(&hc.task_log_probs.data[i * n_classes],
                              &hc.task_log_probs.data[(i + 1) * n_classes]);
        }
        int max_domain = 0;
        for (int d : batch.domains) max_domain = std::max(max_domain, d);
        const std::vector<BatchMember> k =
            build_auxiliary(z_rows, batch.labels, batch.domains, lp_rows, opt.pairing.pl);
        const auto queries = build_queries(k, opt.pairing.pl, max_domain + 1);
        ContrastiveResult res = contrastive_objective(k, queries, opt.pairing,
                                                      opt.sampling_seed, grads != nullptr);
        breakdown.contrastive = res.loss;
        if (grads) {
            Tensor dz({rows, proj});
            for (std::size_t i = 0; i < k.size(); ++i)
                for (std::size_t j = 0; j < proj; ++j)
                    dz.at(k[i].index, j) = opt.lambda_c * res.dz[i][j];
            AffineGrads ag = affine_backward(hc.features, params.contrastive_head.w, dz);
            for (std::size_t i = 0; i < ag.dw.size(); ++i)
                grads->contrastive_head.w.data[i] += ag.dw.data[i];
            for (std::size_t i = 0; i < ag.db.size(); ++i)
                grads->contrastive_head.b.data[i] += ag.db.data[i];
            for (std::size_t i = 0; i < dfeatures.size(); ++i)
                dfeatures.data[i] += ag.dx.data[i];
        }
    }

    if (grads) feature_backward(params, fc, dfeatures, *grads);

    return total_loss(breakdown.task, breakdown.domain, breakdown.contrastive,
                      breakdown.weak_supervision, opt.lambda_c, opt.use_ws);
}

// ---------------------------------------------------------------------------
// Evaluation

inline double evaluate(const ModelParams& params, const std::vector<LabeledWindow>& split) {
    check(!split.empty(), "evaluate: empty split");
    // group by window length so variable-length splits batch cleanly
    std::map<std::size_t, std::vector<const LabeledWindow*>> by_len;
    for (const auto& w : split) {
        check(w.label >= 0, "evaluate: unlabeled row in evaluation split");
        by_len[w.time()].push_back(&w);
    }
    std::size_t correct = 0;
    for (const auto& [time, windows] : by_len) {
        const std::size_t ch = windows.front()->channels();
        Tensor x({windows.size(), ch, time});
        for (std::size_t i = 0; i < windows.size(); ++i)
            std::copy(windows[i]->values.data.begin(), windows[i]->values.data.end(),
                      x.data.begin() + static_cast<std::ptrdiff_t>(i * ch * time));
        const Tensor f = feature_extract(params, x);
        const Tensor logits = affine_forward(f, params.task_head.w, params.task_head.b);
        for (std::size_t i = 0; i < windows.size(); ++i) {
            const double* row = &logits.data[i * params.config.n_classes];
            const std::size_t pred = static_cast<std::size_t>(
                std::max_element(row, row + params.config.n_classes) - row);
            if (static_cast<int>(pred) == windows[i]->label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(split.size());
}

// ---------------------------------------------------------------------------
// Full training run

struct TrialResult {
    std::string fingerprint;
    double target_test_acc = 0.0;
    double source_valid_acc = 0.0;
    std::size_t best_iteration = 0;
    double realized_ws_noise = 0.0;
    std::vector<LossBreakdown> loss_trace;
};

inline std::vector<int> select_sources(const std::vector<int>& available, int target,
                                       std::size_t n, std::uint64_t seed) {
    std::vector<int> pool;
    for (int d : available)
        if (d != target) pool.push_back(d);
    check(n <= pool.size(), "select_sources: n exceeds available domains");
    Rng rng(seed);
    rng.shuffle(pool);
    pool.resize(n);
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline std::string fingerprint(const ExperimentConfig& cfg, const std::vector<int>& sources) {
    std::ostringstream os;
    os << cfg.method << "/" << cfg.strategy << "/" << cfg.sampling << "/pl" << cfg.pl << "/ws"
       << cfg.ws << "/dg" << cfg.dg << "/noadv" << cfg.no_adversary << "/n" << cfg.n_sources
       << "/t" << cfg.target << "/s";
    for (std::size_t i = 0; i < sources.size(); ++i) os << (i ? "|" : "") << sources[i];
    os << "/seed" << cfg.model_seed;
    return os.str();
}

// Algorithm: iterate batches, forward all four networks, apply the per-
// variant losses, Adam-update; keep the checkpoint that performs best on the
// union of the source validation splits (target validation only behind the
// oracle flag).
inline TrialResult train(const ExperimentConfig& cfg,
                         const std::vector<DomainDataset>& raw_datasets) {
    cfg.validate();
    const Method method = parse_method(cfg.method);

    std::vector<int> available;
    for (const auto& ds : raw_datasets) available.push_back(ds.domain_id);
    check(std::find(available.begin(), available.end(), cfg.target) != available.end(),
          "train: target domain not in dataset");
    std::vector<int> sources = cfg.sources.empty()
                                   ? select_sources(available, cfg.target, cfg.n_sources,
                                                    cfg.source_set_seed)
                                   : cfg.sources;
    check(sources.size() == cfg.n_sources, "train: source set size disagrees with n_sources");

    auto find_domain = [&](int id) -> const DomainDataset& {
        for (const auto& ds : raw_datasets)
            if (ds.domain_id == id) return ds;
        throw ContractError("train: domain " + std::to_string(id) + " not found");
    };

    // working copies: strip target train labels, then normalize per domain
    TrialResult result;
    DomainDataset target_ds = find_domain(cfg.target);
    LabelProportions ws_props;
    if (cfg.ws) {
        bool labeled = !target_ds.train.empty();
        for (const auto& w : target_ds.train)
            if (w.label < 0) labeled = false;
        check(labeled, "train: ws requires labeled target train data to estimate proportions");
        const std::size_t n_cls = find_domain(sources.front()).proportions.p.size();
        check(n_cls > 0, "train: cannot infer class count from the source proportions");
        ws_props = label_proportions(target_ds.train, n_cls);
        if (cfg.ws_noise_budget > 0.0) {
            Rng noise_rng(cfg.model_seed ^ 0xA5A5A5A5DEADBEEFULL);
            auto [noisy, realized] =
                inject_proportion_noise(ws_props, cfg.ws_noise_budget, noise_rng);
            ws_props = noisy;
            result.realized_ws_noise = realized;
        }
    }
    for (auto& w : target_ds.train) w.label = -1;
    normalize(target_ds);

    std::vector<DomainDataset> source_ds;
    for (int id : sources) {
        DomainDataset ds = find_domain(id);
        normalize(ds);
        source_ds.push_back(std::move(ds));
    }

    const std::size_t n_classes = source_ds.front().proportions.p.size();
    ModelConfig mc;
    mc.in_channels = source_ds.front().train.front().channels();
    mc.conv_filters = cfg.conv_filters;
    mc.conv_widths = cfg.conv_widths;
    mc.n_classes = n_classes;
    mc.n_domains = cfg.dg ? cfg.n_sources : cfg.n_sources + 1;
    mc.domain_hidden = cfg.domain_hidden;
    mc.proj_dim = cfg.proj_dim;

    Rng init_rng(cfg.model_seed ^ 0x1234567887654321ULL);
    ModelParams params = init_params(mc, init_rng);
    AdamState adam = init_adam(params);
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg.lr;

    std::vector<const DomainDataset*> source_ptrs;
    for (const auto& ds : source_ds) source_ptrs.push_back(&ds);

    std::vector<LabeledWindow> valid_split;
    if (cfg.use_target_validation) {
        valid_split = target_ds.valid;
    } else {
        for (const auto& ds : source_ds)
            valid_split.insert(valid_split.end(), ds.valid.begin(), ds.valid.end());
    }

    StepOptions opt;
    opt.lambda_c = method == Method::Calda ? cfg.lambda_c : 0.0;
    opt.pairing.strategy = parse_strategy(cfg.strategy);
    opt.pairing.sampling = parse_sampling(cfg.sampling);
    opt.pairing.k1 = cfg.k1;
    opt.pairing.k2 = cfg.k2();
    opt.pairing.pl = cfg.pl;
    opt.pairing.tau = cfg.tau;
    opt.use_task = true;
    opt.use_domain = method != Method::NoAdaptation;
    opt.use_contrastive = method == Method::Calda;
    opt.use_ws = cfg.ws;
    opt.ws_proportions = cfg.ws ? &ws_props : nullptr;
    opt.dg = cfg.dg;

    GrlSchedule schedule{cfg.grl_gamma};
    Rng batch_rng(cfg.model_seed);

    ModelParams best_params = params;
    AdamState best_adam = adam;
    double best_valid = -1.0;
    std::size_t best_iter = 0;

    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        const double progress = static_cast<double>(iter) / static_cast<double>(cfg.iterations);
        opt.lambda_d = cfg.no_adversary ? 0.0 : lambda_schedule(schedule, progress);
        opt.sampling_seed = cfg.model_seed ^ (0x100000001B3ULL * (iter + 1));
        Batch batch = assemble_batch(source_ptrs, cfg.dg ? nullptr : &target_ds,
                                     cfg.batch_size, cfg.ws, cfg.dg, batch_rng);
        ModelParams grads = zeros_like(params);
        LossBreakdown breakdown = train_step(params, batch, opt, &grads);
        if (!std::isfinite(breakdown.total))
            throw ContractError("train: non-finite loss at iteration " + std::to_string(iter) +
                                " (task=" + std::to_string(breakdown.task) +
                                ", domain=" + std::to_string(breakdown.domain) +
                                ", contrastive=" + std::to_string(breakdown.contrastive) +
                                ", ws=" + std::to_string(breakdown.weak_supervision) + ")");
        adam_step(params, grads, adam, adam_cfg);
        if (cfg.record_loss_trace) result.loss_trace.push_back(breakdown);

        const bool last = iter + 1 == cfg.iterations;
        if ((iter + 1) % cfg.valid_every == 0 || last) {
            const double acc = evaluate(params, valid_split);
            if (acc > best_valid) {
                best_valid = acc;
                best_params = params;
                best_adam = adam;
                best_iter = iter + 1;
            }
        }
    }

    result.fingerprint = fingerprint(cfg, sources);
    result.source_valid_acc = best_valid;
    result.best_iteration = best_iter;
    result.target_test_acc = evaluate(best_params, target_ds.test);
    if (!cfg.checkpoint_out.empty()) checkpoint_save(best_params, best_adam, cfg.checkpoint_out);
    return result;
}

inline std::vector<DomainDataset> load_or_generate(const ExperimentConfig& cfg) {
    if (!cfg.dataset_dir.empty()) return load_dataset(cfg.dataset_dir);
    return generate(cfg.synth);
}

inline TrialResult train(const ExperimentConfig& cfg) {
    return train(cfg, load_or_generate(cfg));
}

// ---------------------------------------------------------------------------
// Results CSV and evaluation protocol

struct ResultRow {
    std::string dataset;
    ExperimentConfig cfg;
    std::vector<int> sources;
    TrialResult trial;
};

inline constexpr const char* kResultsHeader =
    "dataset,method,strategy,sampling,pl,ws,dg,n_sources,target,source_set,seed,"
    "target_test_acc,source_valid_acc,realized_ws_noise";

inline std::string result_row_csv(const ResultRow& row) {
    std::ostringstream os;
    char buf[32];
    os << row.dataset << "," << row.cfg.method << "," << row.cfg.strategy << ","
       << row.cfg.sampling << "," << (row.cfg.pl ? 1 : 0) << "," << (row.cfg.ws ? 1 : 0) << ","
       << (row.cfg.dg ? 1 : 0) << "," << row.cfg.n_sources << "," << row.cfg.target << ",";
    for (std::size_t i = 0; i < row.sources.size(); ++i) os << (i ? "|" : "") << row.sources[i];
    os << "," << row.cfg.model_seed;
    std::snprintf(buf, sizeof buf, ",%.6f", row.trial.target_test_acc);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.6f", row.trial.source_valid_acc);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.6f", row.trial.realized_ws_noise);
    os << buf;
    return os.str();
}

inline void write_results_csv(const std::string& path, const std::vector<ResultRow>& rows) {
    std::ofstream os(path, std::ios::binary);
    check(static_cast<bool>(os), "write_results_csv: cannot open " + path);
    os << kResultsHeader << "\n";
    for (const auto& row : rows) os << result_row_csv(row) << "\n";
}

struct ProtocolSummary {
    std::size_t n_sources = 0;
    double mean_accuracy = 0.0;
    // the deviation convention: average over targets of the std over each
    // target's 3 source sets
    double deviation = 0.0;
};

// MS-UDA evaluation protocol: for each n, sample `n_targets` random targets
// and `sets_per_target` random source sets per target, train each, and
// aggregate.
inline std::pair<std::vector<ResultRow>, std::vector<ProtocolSummary>> run_protocol(
    const std::vector<DomainDataset>& datasets, const ExperimentConfig& base,
    const std::vector<std::size_t>& n_values, std::size_t n_targets,
    std::size_t sets_per_target, std::uint64_t protocol_seed, const std::string& dataset_name) {
    std::vector<int> available;
    for (const auto& ds : datasets) available.push_back(ds.domain_id);
    std::vector<ResultRow> rows;
    std::vector<ProtocolSummary> summaries;
    Rng rng(protocol_seed);
    for (std::size_t n : n_values) {
        check(n < available.size(), "run_protocol: n must be below the number of domains");
        std::vector<int> targets = available;
        rng.shuffle(targets);
        targets.resize(std::min(n_targets, targets.size()));
        double acc_sum = 0.0;
        double dev_sum = 0.0;
        std::size_t count = 0;
        for (int target : targets) {
            std::vector<double> set_accs;
            std::set<std::vector<int>> seen;
            for (std::size_t s = 0; s < sets_per_target; ++s) {
                // distinct source sets per target
                std::vector<int> srcs;
                std::uint64_t seed = rng.raw();
                for (int tries = 0; tries < 64; ++tries) {
                    srcs = select_sources(available, target, n, seed);
                    if (seen.insert(srcs).second) break;
                    seed = rng.raw();
                }
                ExperimentConfig cfg = base;
                cfg.n_sources = n;
                cfg.target = target;
                cfg.sources = srcs;
                cfg.source_set_seed = seed;
                cfg.model_seed = base.model_seed + s;
                TrialResult trial = train(cfg, datasets);
                set_accs.push_back(trial.target_test_acc);
                rows.push_back({dataset_name, cfg, srcs, std::move(trial)});
            }
            double mean = 0.0;
            for (double a : set_accs) mean += a;
            mean /= static_cast<double>(set_accs.size());
            double var = 0.0;
            for (double a : set_accs) var += (a - mean) * (a - mean);
            var /= static_cast<double>(set_accs.size());
            acc_sum += mean;
            dev_sum += std::sqrt(var);
            ++count;
        }
        summaries.push_back({n, acc_sum / static_cast<double>(count),
                             dev_sum / static_cast<double>(count)});
    }
    return {rows, summaries};
}

// Weak-supervision noise sweep: for each budget, run the WS variant and
// report accuracy together with the realized post-normalization noise.
inline std::vector<ResultRow> ws_noise_sweep(const std::vector<DomainDataset>& datasets,
                                             const ExperimentConfig& base,
                                             const std::vector<double>& budgets,
                                             const std::string& dataset_name) {
    std::vector<ResultRow> rows;
    for (double budget : budgets) {
        ExperimentConfig cfg = base;
        cfg.ws = true;
        cfg.ws_noise_budget = budget;
        std::vector<int> srcs = cfg.sources.empty()
                                    ? select_sources(
                                          [&] {
                                              std::vector<int> a;
                                              for (const auto& ds : datasets)
                                                  a.push_back(ds.domain_id);
                                              return a;
                                          }(),
                                          cfg.target, cfg.n_sources, cfg.source_set_seed)
                                    : cfg.sources;
        cfg.sources = srcs;
        TrialResult trial = train(cfg, datasets);
        rows.push_back({dataset_name, cfg, srcs, std::move(trial)});
    }
    return rows;
}

}  // namespace calda
