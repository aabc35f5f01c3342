#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "calda/rng.hpp"
#include "calda/tensor.hpp"

namespace calda {

// One row of a mini-batch as seen by contrastive pair construction.
// Targets carry the argmax pseudo-label when PL is enabled; domain 0 is
// always the target.
struct BatchMember {
    std::size_t index = 0;            // batch row
    std::vector<double> z;            // projected embedding
    int domain = 0;                   // 0 = target, i = source i
    int label = -1;                   // class y, or pseudo-label for targets
    std::vector<double> task_log_probs;
    bool is_target = false;
};

enum class Strategy { Within, Any, Cross };
enum class SamplingMode { Hard, Random };

struct SamplingConfig {
    Strategy strategy = Strategy::Cross;
    SamplingMode sampling = SamplingMode::Hard;
    std::size_t k1 = 10;   // max positives
    std::size_t k2 = 20;   // max negatives (k2 = r * k1)
    bool pl = false;
    double tau = 0.1;
};

// Candidate or sampled pair sets for one query. Members are stored by index
// into the auxiliary set.
struct PairSets {
    std::size_t query;
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
};

// Auxiliary set K: all labeled rows. When pl is false target rows are
// excluded entirely (unlabeled rows cannot satisfy the labeled set-builder
// predicates); when pl is true they join with the argmax pseudo-label.
inline std::vector<BatchMember> build_auxiliary(
    const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
    const std::vector<int>& domains, const std::vector<std::vector<double>>& task_log_probs,
    bool pl) {
    const std::size_t n = z.size();
    check(labels.size() == n && domains.size() == n && task_log_probs.size() == n,
          "build_auxiliary: column lengths disagree");
    std::vector<BatchMember> k;
    for (std::size_t i = 0; i < n; ++i) {
        const bool is_target = domains[i] == 0;
        if (is_target && !pl) continue;
        BatchMember m;
        m.index = i;
        m.z = z[i];
        m.domain = domains[i];
        m.is_target = is_target;
        m.task_log_probs = task_log_probs[i];
        if (is_target) {
            const auto& lp = task_log_probs[i];
            m.label = static_cast<int>(
                std::max_element(lp.begin(), lp.end()) - lp.begin());
        } else {
            check(labels[i] >= 0, "build_auxiliary: unlabeled source row");
            m.label = labels[i];
        }
        k.push_back(std::move(m));
    }
    return k;
}

// Query indices into K, grouped by domain label. Q_T (domain 0) is present
// only when pl is true.
inline std::vector<std::vector<std::size_t>> build_queries(const std::vector<BatchMember>& k,
                                                           bool pl, int n_domains_total) {
    std::vector<std::vector<std::size_t>> queries(
        static_cast<std::size_t>(n_domains_total));
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (k[i].is_target && !pl) continue;
        queries[static_cast<std::size_t>(k[i].domain)].push_back(i);
    }
    if (!pl && !queries.empty()) queries[0].clear();
    return queries;
}

// Full positive/negative sets before sampling, by the set-builder semantics:
// within keeps the query's domain, cross excludes it, any is unconstrained.
// The query itself is excluded from P; label disjointness excludes it from N.
inline PairSets candidate_sets(std::size_t query_idx, const std::vector<BatchMember>& k,
                               Strategy strategy) {
    const BatchMember& q = k[query_idx];
    PairSets sets;
    sets.query = query_idx;
    for (std::size_t i = 0; i < k.size(); ++i) {
        if (i == query_idx) continue;
        const BatchMember& m = k[i];
        const bool same_domain = m.domain == q.domain;
        if (strategy == Strategy::Within && !same_domain) continue;
        if (strategy == Strategy::Cross && same_domain) continue;
        if (m.label == q.label)
            sets.positives.push_back(i);
        else
            sets.negatives.push_back(i);
    }
    return sets;
}

// Cross-entropy of a member under a given label, from its cached
// log-probabilities.
inline double member_ce(const BatchMember& m, int label) {
    return -m.task_log_probs[static_cast<std::size_t>(label)];
}

// Hard mode: positives sorted descending by their own-label cross-entropy,
// negatives ascending by cross-entropy with the query's label substituted;
// ties broken by ascending batch index. Random mode: seeded uniform shuffle.
// Take the first k1 / k2 either way.
inline PairSets sample_pairs(const PairSets& candidates, const std::vector<BatchMember>& k,
                             const SamplingConfig& cfg, Rng& rng) {
    check(cfg.k1 >= 1 && cfg.k2 >= 1, "sample_pairs: k1 and k2 must be >= 1");
    const BatchMember& q = k[candidates.query];
    PairSets out;
    out.query = candidates.query;
    std::vector<std::size_t> pos = candidates.positives;
    std::vector<std::size_t> neg = candidates.negatives;
    if (cfg.sampling == SamplingMode::Hard) {
        std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
            const double ca = member_ce(k[a], k[a].label), cb = member_ce(k[b], k[b].label);
            if (ca != cb) return ca > cb;
            return k[a].index < k[b].index;
        });
        std::stable_sort(neg.begin(), neg.end(), [&](std::size_t a, std::size_t b) {
            const double ca = member_ce(k[a], q.label), cb = member_ce(k[b], q.label);
            if (ca != cb) return ca < cb;
            return k[a].index < k[b].index;
        });
    } else {
        rng.shuffle(pos);
        rng.shuffle(neg);
    }
    if (pos.size() > cfg.k1) pos.resize(cfg.k1);
    if (neg.size() > cfg.k2) neg.resize(cfg.k2);
    out.positives = std::move(pos);
    out.negatives = std::move(neg);
    return out;
}

}  // namespace calda
