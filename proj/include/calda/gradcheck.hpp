#pragma once

#include <string>
#include <vector>

#include "calda/experiment.hpp"
#include "calda/model.hpp"

namespace calda {

// Finite-difference verification of the manual backward pass. Central
// differences with h = 1e-5; pair selection and pseudo-labels are treated as
// constant under the perturbation (generic parameter values keep the argmax
// and sort orders stable).

inline double rel_err(double a, double b, double floor_) {
    const double denom = std::max(std::abs(a) + std::abs(b), floor_);
    return std::abs(a - b) / denom;
}

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;

    void add(const std::string& name, double err) {
        entries.push_back({name, err});
        worst = std::max(worst, err);
    }
};

namespace detail {

inline double loss_at(const ModelParams& params, const Batch& batch, const StepOptions& opt) {
    return train_step(params, batch, opt, nullptr).total;
}

}  // namespace detail

// Compare analytic gradients against central differences of the total loss.
// `fd_scale` maps the finite-difference slope to the expected analytic value
// per parameter group (used for the gradient reversal: feature-extractor
// gradients of the domain term are -lambda_d times the true slope).
inline GradCheckReport gradcheck_against_fd(const ModelParams& params, const Batch& batch,
                                            const StepOptions& opt, double h,
                                            double (*fd_scale)(const std::string&,
                                                               const StepOptions&)) {
    ModelParams grads = zeros_like(params);
    train_step(params, batch, opt, &grads);

    GradCheckReport report;
    ModelParams work = params;
    std::vector<std::pair<std::string, Tensor*>> work_slots;
    for_each_param(work, [&](const std::string& n, Tensor& t) { work_slots.emplace_back(n, &t); });
    std::vector<std::pair<std::string, const Tensor*>> grad_slots;
    for_each_param(const_cast<ModelParams&>(grads), [&](const std::string& n, Tensor& t) {
        grad_slots.emplace_back(n, &t);
    });

    for (std::size_t s = 0; s < work_slots.size(); ++s) {
        const std::string& name = work_slots[s].first;
        Tensor& t = *work_slots[s].second;
        const Tensor& g = *grad_slots[s].second;
        const double scale = fd_scale ? fd_scale(name, opt) : 1.0;
        double worst = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double orig = t.data[i];
            t.data[i] = orig + h;
            const double up = detail::loss_at(work, batch, opt);
            t.data[i] = orig - h;
            const double down = detail::loss_at(work, batch, opt);
            t.data[i] = orig;
            const double fd = scale * (up - down) / (2.0 * h);
            worst = std::max(worst, rel_err(g.data[i], fd, 1e-4));
        }
        report.add(name, worst);
    }
    return report;
}

// Small model and batch used for end-to-end gradient checking: two conv
// blocks of 3 filters (width 3), 2 input channels, 8 timesteps, 2 classes,
// 2 source domains, 4-dim projection.
inline ModelConfig gradcheck_model_config(bool dg = false) {
    ModelConfig mc;
    mc.in_channels = 2;
    mc.conv_filters = {3, 3};
    mc.conv_widths = {3, 3};
    mc.n_classes = 2;
    mc.n_domains = dg ? 2 : 3;
    mc.domain_hidden = 4;
    mc.proj_dim = 4;
    return mc;
}

inline Batch gradcheck_batch(std::uint64_t seed, bool dg = false) {
    Rng rng(seed);
    const std::size_t per_domain = 4, n_domains = dg ? 2 : 3;
    const std::size_t rows = per_domain * n_domains;
    Batch batch;
    batch.x = Tensor({rows, 2, 8});
    for (double& v : batch.x.data) v = rng.normal(0.0, 1.0);
    std::size_t i = 0;
    for (std::size_t d = 0; d < n_domains; ++d)
        for (std::size_t r = 0; r < per_domain; ++r, ++i) {
            const int domain = dg ? static_cast<int>(d + 1) : static_cast<int>(d);
            batch.domains.push_back(domain);
            batch.labels.push_back(domain == 0 ? -1 : static_cast<int>(r % 2));
        }
    return batch;
}

inline StepOptions gradcheck_step_options(bool pl, Strategy strategy = Strategy::Cross,
                                          SamplingMode sampling = SamplingMode::Hard) {
    StepOptions opt;
    opt.lambda_d = 0.7;
    opt.lambda_c = 0.5;
    opt.pairing.strategy = strategy;
    opt.pairing.sampling = sampling;
    opt.pairing.k1 = 2;
    opt.pairing.k2 = 3;
    opt.pairing.pl = pl;
    opt.pairing.tau = 0.1;
    opt.sampling_seed = 99;
    return opt;
}

// Full-model check, split into two passes so the gradient reversal can be
// verified: (a) task + contrastive + WS with the domain head off, expecting
// analytic == FD everywhere; (b) domain loss alone, expecting the
// feature-extractor gradients to be -lambda_d times the FD slope.
inline GradCheckReport gradcheck_full_model(std::uint64_t seed, bool pl, bool with_ws,
                                            Strategy strategy = Strategy::Cross,
                                            SamplingMode sampling = SamplingMode::Hard) {
    Rng init_rng(seed);
    ModelParams params = init_params(gradcheck_model_config(), init_rng);
    // jitter every parameter (including the zero-initialized biases) so no
    // ReLU preactivation sits exactly on the kink, where the subgradient and
    // the finite difference legitimately disagree
    for_each_param(params, [&](const std::string&, Tensor& t) {
        for (double& v : t.data) v += init_rng.normal(0.0, 0.05);
    });
    Batch batch = gradcheck_batch(seed + 1);
    StepOptions opt = gradcheck_step_options(pl, strategy, sampling);
    LabelProportions props{{0.5, 0.5}};
    opt.use_ws = with_ws;
    opt.ws_proportions = &props;
    const double h = 1e-5;

    opt.use_domain = false;
    GradCheckReport report =
        gradcheck_against_fd(params, batch, opt, h,
                             +[](const std::string&, const StepOptions&) { return 1.0; });

    opt.use_domain = true;
    opt.use_task = false;
    opt.use_contrastive = false;
    opt.use_ws = false;
    GradCheckReport domain_report = gradcheck_against_fd(
        params, batch, opt, h, +[](const std::string& name, const StepOptions& o) {
            // F sees the reversed gradient of the domain loss
            return name.rfind("f.", 0) == 0 ? -o.lambda_d : 1.0;
        });
    for (const auto& e : domain_report.entries) report.add("domain:" + e.name, e.max_rel_err);
    return report;
}

}  // namespace calda
