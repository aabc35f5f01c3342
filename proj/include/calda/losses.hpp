#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "calda/ops.hpp"
#include "calda/pairing.hpp"
#include "calda/tensor.hpp"

namespace calda {

struct LossBreakdown {
    double task = 0.0;
    double domain = 0.0;
    double contrastive = 0.0;
    double weak_supervision = 0.0;
    double total = 0.0;
};

struct LabelProportions {
    std::vector<double> p;

    void validate() const {
        double sum = 0.0;
        for (double v : p) {
            check(v >= 0.0, "LabelProportions: negative entry");
            sum += v;
        }
        check(std::abs(sum - 1.0) <= 1e-9, "LabelProportions: entries must sum to 1");
    }
};

namespace detail {

inline int onehot_index(const double* row, std::size_t n, const char* ctx) {
    int idx = -1;
    for (std::size_t j = 0; j < n; ++j) {
        if (row[j] == 1.0) {
            check(idx < 0, std::string(ctx) + ": row is not one-hot");
            idx = static_cast<int>(j);
        } else {
            check(row[j] == 0.0, std::string(ctx) + ": row is not one-hot");
        }
    }
    check(idx >= 0, std::string(ctx) + ": row is not one-hot");
    return idx;
}

}  // namespace detail

// Mean categorical cross-entropy over the included rows, from integer labels
// and log-probabilities.
inline double cross_entropy_mean(const Tensor& log_probs, const std::vector<int>& labels,
                                 const std::vector<bool>& include) {
    const std::size_t rows = log_probs.shape[0], classes = log_probs.shape[1];
    check(labels.size() == rows && include.size() == rows,
          "cross_entropy_mean: column lengths disagree");
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (!include[i]) continue;
        check(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes,
              "cross_entropy_mean: label out of range");
        acc -= log_probs.at(i, static_cast<std::size_t>(labels[i]));
        ++count;
    }
    check(count > 0, "cross_entropy_mean: no included rows");
    return acc / static_cast<double>(count);
}

// Task loss over one-hot labels; rows are averaged. Unlabeled target rows
// must be excluded by the caller before this point.
inline double task_loss(const Tensor& onehot, const Tensor& log_probs) {
    check_same_shape(onehot, log_probs, "task_loss");
    const std::size_t rows = onehot.shape[0], classes = onehot.shape[1];
    std::vector<int> labels(rows);
    for (std::size_t i = 0; i < rows; ++i)
        labels[i] = detail::onehot_index(&onehot.data[i * classes], classes, "task_loss");
    return cross_entropy_mean(log_probs, labels, std::vector<bool>(rows, true));
}

// Domain loss: cross-entropy over domain labels (target -> 0, source i -> i),
// averaged over all rows including the target.
inline double domain_loss(const Tensor& onehot_domains, const Tensor& log_probs) {
    return task_loss(onehot_domains, log_probs);
}

// Multiple-positive InfoNCE for one query. Each positive competes only
// against the negatives plus itself in the denominator. Computed via
// max-subtracted log-sum-exp.
inline double infonce(const std::vector<double>& sim_pos, const std::vector<double>& sim_neg,
                      double tau) {
    check(tau > 0.0, "infonce: tau must be > 0");
    check(!sim_pos.empty(), "infonce: empty positive set");
    double loss = 0.0;
    for (double sp : sim_pos) {
        double mx = sp / tau;
        for (double sn : sim_neg) mx = std::max(mx, sn / tau);
        double denom = std::exp(sp / tau - mx);
        for (double sn : sim_neg) denom += std::exp(sn / tau - mx);
        loss += -(sp / tau - mx) + std::log(denom);
    }
    return loss / static_cast<double>(sim_pos.size());
}

inline double infonce(const Tensor& z_query, const std::vector<Tensor>& positives,
                      const std::vector<Tensor>& negatives, double tau) {
    std::vector<double> sp, sn;
    sp.reserve(positives.size());
    sn.reserve(negatives.size());
    for (const auto& p : positives) sp.push_back(cosine_similarity(z_query, p));
    for (const auto& n : negatives) sn.push_back(cosine_similarity(z_query, n));
    return infonce(sp, sn, tau);
}

// d(infonce)/d(similarity) for every positive and negative.
inline void infonce_sim_grads(const std::vector<double>& sim_pos,
                              const std::vector<double>& sim_neg, double tau,
                              std::vector<double>& dpos, std::vector<double>& dneg) {
    const double inv_p = 1.0 / static_cast<double>(sim_pos.size());
    dpos.assign(sim_pos.size(), 0.0);
    dneg.assign(sim_neg.size(), 0.0);
    for (std::size_t pi = 0; pi < sim_pos.size(); ++pi) {
        const double sp = sim_pos[pi];
        double mx = sp / tau;
        for (double sn : sim_neg) mx = std::max(mx, sn / tau);
        double denom = std::exp(sp / tau - mx);
        for (double sn : sim_neg) denom += std::exp(sn / tau - mx);
        const double soft_p = std::exp(sp / tau - mx) / denom;
        dpos[pi] += inv_p * (soft_p - 1.0) / tau;
        for (std::size_t ni = 0; ni < sim_neg.size(); ++ni)
            dneg[ni] += inv_p * std::exp(sim_neg[ni] / tau - mx) / denom / tau;
    }
}

// Deterministic per-query sampling stream: independent of the order queries
// are processed, shared by the efficient path and any reimplementation.
inline std::uint64_t pair_sampling_seed(std::uint64_t base_seed, std::size_t batch_row) {
    std::uint64_t x = base_seed ^ (0x9E3779B97F4A7C15ULL * (batch_row + 1));
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

struct ContrastiveResult {
    double loss = 0.0;
    // d(loss)/d(z) per auxiliary-set member, same order as K.
    std::vector<std::vector<double>> dz;
    std::size_t skipped_queries = 0;
};

// Sum over domains of the per-domain mean InfoNCE over valid queries.
// Queries with an empty positive or negative candidate set contribute 0 and
// are excluded from that domain's query count. The target-domain term is
// present only when cfg.pl is set.
inline ContrastiveResult contrastive_objective(const std::vector<BatchMember>& k,
                                               const std::vector<std::vector<std::size_t>>& queries,
                                               const SamplingConfig& cfg,
                                               std::uint64_t sampling_seed,
                                               bool want_grads = false) {
    ContrastiveResult result;
    if (want_grads) {
        result.dz.resize(k.size());
        for (std::size_t i = 0; i < k.size(); ++i)
            result.dz[i].assign(k[i].z.size(), 0.0);
    }
    for (std::size_t d = 0; d < queries.size(); ++d) {
        if (d == 0 && !cfg.pl) continue;
        if (queries[d].empty()) continue;
        double domain_loss_sum = 0.0;
        std::size_t valid = 0;
        std::vector<std::pair<std::size_t, std::pair<std::vector<double>, std::vector<double>>>>
            query_grads;  // (query k-index, (dpos, dneg)) alongside pair lists
        std::vector<PairSets> query_pairs;
        for (std::size_t qi : queries[d]) {
            PairSets cand = candidate_sets(qi, k, cfg.strategy);
            if (cand.positives.empty() || cand.negatives.empty()) {
                ++result.skipped_queries;
                continue;
            }
            Rng qrng(pair_sampling_seed(sampling_seed, k[qi].index));
            PairSets pairs = sample_pairs(cand, k, cfg, qrng);
            const std::size_t dim = k[qi].z.size();
            std::vector<double> sp, sn;
            for (std::size_t p : pairs.positives)
                sp.push_back(cosine_similarity(k[qi].z.data(), k[p].z.data(), dim));
            for (std::size_t n : pairs.negatives)
                sn.push_back(cosine_similarity(k[qi].z.data(), k[n].z.data(), dim));
            domain_loss_sum += infonce(sp, sn, cfg.tau);
            ++valid;
            if (want_grads) {
                std::vector<double> dpos, dneg;
                infonce_sim_grads(sp, sn, cfg.tau, dpos, dneg);
                query_grads.push_back({qi, {std::move(dpos), std::move(dneg)}});
                query_pairs.push_back(std::move(pairs));
            }
        }
        if (valid == 0) continue;
        const double inv_valid = 1.0 / static_cast<double>(valid);
        result.loss += domain_loss_sum * inv_valid;
        if (want_grads) {
            for (std::size_t g = 0; g < query_grads.size(); ++g) {
                const std::size_t qi = query_grads[g].first;
                const auto& [dpos, dneg] = query_grads[g].second;
                const PairSets& pairs = query_pairs[g];
                const std::size_t dim = k[qi].z.size();
                for (std::size_t i = 0; i < pairs.positives.size(); ++i) {
                    const std::size_t p = pairs.positives[i];
                    cosine_similarity_backward(k[qi].z.data(), k[p].z.data(), dim,
                                               dpos[i] * inv_valid, result.dz[qi].data(),
                                               result.dz[p].data());
                }
                for (std::size_t i = 0; i < pairs.negatives.size(); ++i) {
                    const std::size_t n = pairs.negatives[i];
                    cosine_similarity_backward(k[qi].z.data(), k[n].z.data(), dim,
                                               dneg[i] * inv_valid, result.dz[qi].data(),
                                               result.dz[n].data());
                }
            }
        }
    }
    return result;
}

inline constexpr double kWsEpsilon = 1e-8;

inline std::vector<double> floor_and_renormalize(const std::vector<double>& p) {
    std::vector<double> q(p.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        q[i] = std::max(p[i], kWsEpsilon);
        sum += q[i];
    }
    for (double& v : q) v /= sum;
    return q;
}

// D_KL(Y_true || mean predicted target distribution), both floored at 1e-8
// and renormalized.
inline double weak_supervision_loss(const LabelProportions& y_true,
                                    const std::vector<double>& mean_pred) {
    check(y_true.p.size() == mean_pred.size(), "weak_supervision_loss: size mismatch");
    check(!mean_pred.empty(), "weak_supervision_loss: empty distribution");
    const std::vector<double> yt = floor_and_renormalize(y_true.p);
    const std::vector<double> q = floor_and_renormalize(mean_pred);
    double kl = 0.0;
    for (std::size_t i = 0; i < yt.size(); ++i) kl += yt[i] * (std::log(yt[i]) - std::log(q[i]));
    return kl;
}

// Gradient of the KL term with respect to the raw (pre-floor) mean predicted
// distribution.
inline std::vector<double> weak_supervision_grad(const LabelProportions& y_true,
                                                 const std::vector<double>& mean_pred) {
    const std::vector<double> yt = floor_and_renormalize(y_true.p);
    std::vector<double> m(mean_pred.size());
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = std::max(mean_pred[i], kWsEpsilon);
        s += m[i];
    }
    std::vector<double> grad(mean_pred.size(), 0.0);
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (mean_pred[i] <= kWsEpsilon) continue;  // clamped entries get no gradient
        const double qi = m[i] / s;
        grad[i] = (1.0 - yt[i] / qi) / s;
    }
    return grad;
}

// total = task + domain + lambda_c * contrastive (+ WS term when enabled);
// lambda_d enters through the gradient reversal layer, not here.
inline LossBreakdown total_loss(double task, double domain, double contrastive,
                                double weak_supervision, double lambda_c, bool ws_flag) {
    check(lambda_c >= 0.0, "total_loss: lambda_c must be >= 0");
    LossBreakdown b;
    b.task = task;
    b.domain = domain;
    b.contrastive = contrastive;
    b.weak_supervision = ws_flag ? weak_supervision : 0.0;
    b.total = task + domain + lambda_c * contrastive + b.weak_supervision;
    return b;
}

}  // namespace calda
