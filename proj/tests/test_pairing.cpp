#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "calda/pairing.hpp"

using namespace calda;

namespace {

BatchMember member(std::size_t index, int domain, int label,
                   std::vector<double> log_probs = {std::log(0.5), std::log(0.5)}) {
    BatchMember m;
    m.index = index;
    m.domain = domain;
    m.label = label;
    m.is_target = domain == 0;
    m.z = {1.0, double(index)};
    m.task_log_probs = std::move(log_probs);
    return m;
}

std::multiset<std::size_t> as_multiset(const std::vector<std::size_t>& v) {
    return {v.begin(), v.end()};
}

}  // namespace

TEST_CASE("auxiliary set membership under the pseudo-label flag") {
    std::vector<std::vector<double>> z = {{1, 0}, {0, 1}, {1, 1}};
    std::vector<int> labels = {-1, 0, 1};
    std::vector<int> domains = {0, 1, 2};
    // target log-probs peaked at class 2 of 3
    std::vector<std::vector<double>> lp = {
        {std::log(0.1), std::log(0.2), std::log(0.7)},
        {std::log(0.5), std::log(0.3), std::log(0.2)},
        {std::log(0.5), std::log(0.3), std::log(0.2)}};

    auto off = build_auxiliary(z, labels, domains, lp, false);
    REQUIRE(off.size() == 2);
    for (const auto& m : off) REQUIRE_FALSE(m.is_target);

    auto on = build_auxiliary(z, labels, domains, lp, true);
    REQUIRE(on.size() == 3);
    REQUIRE(on[0].is_target);
    REQUIRE(on[0].label == 2);  // argmax pseudo-label

    // unlabeled source row is a contract violation
    std::vector<int> bad = {-1, -1, 1};
    REQUIRE_THROWS_AS(build_auxiliary(z, bad, domains, lp, false), ContractError);
}

TEST_CASE("query sets group by domain, target gated by pl") {
    std::vector<BatchMember> k;
    for (std::size_t i = 0; i < 3; ++i) k.push_back(member(i, 1, int(i % 2)));
    for (std::size_t i = 3; i < 6; ++i) k.push_back(member(i, 2, int(i % 2)));
    auto q = build_queries(k, false, 3);
    REQUIRE(q.size() == 3);
    REQUIRE(q[0].empty());
    REQUIRE(q[1].size() == 3);
    REQUIRE(q[2].size() == 3);

    k.push_back(member(6, 0, 1));
    k.back().is_target = true;
    auto q_on = build_queries(k, true, 3);
    REQUIRE(q_on[0].size() == 1);
    auto q_off = build_queries(k, false, 3);
    REQUIRE(q_off[0].empty());
}

TEST_CASE("candidate sets by strategy on the five-member example") {
    // a,b share (d1,y0); c is (d1,y1); e is (d2,y0); f is (d2,y1)
    std::vector<BatchMember> k = {member(0, 1, 0), member(1, 1, 0), member(2, 1, 1),
                                  member(3, 2, 0), member(4, 2, 1)};
    const std::size_t a = 0, b = 1, c = 2, e = 3, f = 4;

    PairSets within = candidate_sets(a, k, Strategy::Within);
    REQUIRE(within.positives == std::vector<std::size_t>{b});
    REQUIRE(within.negatives == std::vector<std::size_t>{c});

    PairSets cross = candidate_sets(a, k, Strategy::Cross);
    REQUIRE(cross.positives == std::vector<std::size_t>{e});
    REQUIRE(cross.negatives == std::vector<std::size_t>{f});

    PairSets any = candidate_sets(a, k, Strategy::Any);
    REQUIRE(as_multiset(any.positives) == std::multiset<std::size_t>{b, e});
    REQUIRE(as_multiset(any.negatives) == std::multiset<std::size_t>{c, f});
}

TEST_CASE("no negatives when every member shares one label") {
    std::vector<BatchMember> k = {member(0, 1, 0), member(1, 1, 0), member(2, 2, 0)};
    for (Strategy s : {Strategy::Within, Strategy::Any, Strategy::Cross})
        REQUIRE(candidate_sets(0, k, s).negatives.empty());
}

TEST_CASE("candidate sets match brute-force enumeration on random micro-batches") {
    Rng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + rng.uniform_index(30);
        std::vector<BatchMember> k;
        for (std::size_t i = 0; i < n; ++i)
            k.push_back(member(i, 1 + int(rng.uniform_index(3)), int(rng.uniform_index(3))));
        const std::size_t q = rng.uniform_index(n);
        for (Strategy s : {Strategy::Within, Strategy::Any, Strategy::Cross}) {
            PairSets got = candidate_sets(q, k, s);
            std::vector<std::size_t> pos, neg;
            for (std::size_t i = 0; i < n; ++i) {
                if (i == q) continue;
                bool admissible = s == Strategy::Any ||
                                  (s == Strategy::Within && k[i].domain == k[q].domain) ||
                                  (s == Strategy::Cross && k[i].domain != k[q].domain);
                if (!admissible) continue;
                (k[i].label == k[q].label ? pos : neg).push_back(i);
            }
            REQUIRE(got.positives == pos);
            REQUIRE(got.negatives == neg);
            // invariants: disjoint, query excluded
            for (std::size_t p : got.positives)
                REQUIRE(std::find(got.negatives.begin(), got.negatives.end(), p) ==
                        got.negatives.end());
            REQUIRE(std::find(got.positives.begin(), got.positives.end(), q) ==
                    got.positives.end());
            REQUIRE(std::find(got.negatives.begin(), got.negatives.end(), q) ==
                    got.negatives.end());
        }
    }
}

TEST_CASE("hard sampling ranks positives by own-label cross-entropy") {
    // one misclassified positive among confident ones is chosen first at k1=1
    std::vector<BatchMember> k = {
        member(0, 1, 0, {std::log(0.9), std::log(0.1)}),   // query
        member(1, 2, 0, {std::log(0.9), std::log(0.1)}),   // confident positive
        member(2, 2, 0, {std::log(0.05), std::log(0.95)}), // misclassified positive
        member(3, 2, 1, {std::log(0.5), std::log(0.5)}),
    };
    PairSets cand = candidate_sets(0, k, Strategy::Cross);
    SamplingConfig cfg;
    cfg.sampling = SamplingMode::Hard;
    cfg.k1 = 1;
    cfg.k2 = 1;
    Rng rng(1);
    PairSets picked = sample_pairs(cand, k, cfg, rng);
    REQUIRE(picked.positives == std::vector<std::size_t>{2});
}

TEST_CASE("hard sampling ranks negatives by query-label cross-entropy, ascending") {
    std::vector<BatchMember> k = {
        member(0, 1, 0, {std::log(0.9), std::log(0.1)}),  // query, label 0
        member(1, 2, 0),
        member(2, 2, 1, {std::log(0.8), std::log(0.2)}),  // looks like label 0: hardest
        member(3, 2, 1, {std::log(0.1), std::log(0.9)}),  // clearly label 1: easiest
    };
    PairSets cand = candidate_sets(0, k, Strategy::Cross);
    SamplingConfig cfg;
    cfg.k1 = 5;
    cfg.k2 = 1;
    Rng rng(1);
    PairSets picked = sample_pairs(cand, k, cfg, rng);
    REQUIRE(picked.negatives == std::vector<std::size_t>{2});
}

TEST_CASE("hard sampling breaks ties by batch index") {
    std::vector<BatchMember> k = {member(0, 1, 0), member(1, 2, 0), member(2, 2, 0),
                                  member(3, 2, 1), member(4, 2, 1)};
    // all log-probs identical -> pure index order
    SamplingConfig cfg;
    cfg.k1 = 2;
    cfg.k2 = 2;
    Rng rng(1);
    PairSets picked = sample_pairs(candidate_sets(0, k, Strategy::Cross), k, cfg, rng);
    REQUIRE(picked.positives == std::vector<std::size_t>{1, 2});
    REQUIRE(picked.negatives == std::vector<std::size_t>{3, 4});
}

TEST_CASE("hard sampling at a smaller budget is a prefix of the larger one") {
    Rng mk(5);
    std::vector<BatchMember> k;
    for (std::size_t i = 0; i < 20; ++i) {
        const double p = 0.05 + 0.9 * mk.uniform();
        k.push_back(member(i, 1 + int(mk.uniform_index(3)), int(mk.uniform_index(2)),
                           {std::log(p), std::log(1.0 - p)}));
    }
    PairSets cand = candidate_sets(0, k, Strategy::Any);
    SamplingConfig small, large;
    small.k1 = 2;
    small.k2 = 3;
    large.k1 = 4;
    large.k2 = 6;
    Rng r1(1), r2(1);
    PairSets s = sample_pairs(cand, k, small, r1);
    PairSets l = sample_pairs(cand, k, large, r2);
    REQUIRE(std::equal(s.positives.begin(), s.positives.end(), l.positives.begin()));
    REQUIRE(std::equal(s.negatives.begin(), s.negatives.end(), l.negatives.begin()));
}

TEST_CASE("hard and random coincide when budgets cover the candidates") {
    Rng mk(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<BatchMember> k;
        const std::size_t n = 4 + mk.uniform_index(12);
        for (std::size_t i = 0; i < n; ++i) {
            const double p = 0.05 + 0.9 * mk.uniform();
            k.push_back(member(i, 1 + int(mk.uniform_index(2)), int(mk.uniform_index(2)),
                               {std::log(p), std::log(1.0 - p)}));
        }
        PairSets cand = candidate_sets(0, k, Strategy::Any);
        SamplingConfig cfg;
        cfg.k1 = n;
        cfg.k2 = n;
        Rng r1(3), r2(3);
        cfg.sampling = SamplingMode::Hard;
        PairSets hard = sample_pairs(cand, k, cfg, r1);
        cfg.sampling = SamplingMode::Random;
        PairSets random = sample_pairs(cand, k, cfg, r2);
        REQUIRE(as_multiset(hard.positives) == as_multiset(random.positives));
        REQUIRE(as_multiset(hard.negatives) == as_multiset(random.negatives));
    }
}

TEST_CASE("random sampling is deterministic in the seed") {
    std::vector<BatchMember> k;
    for (std::size_t i = 0; i < 12; ++i) k.push_back(member(i, 1 + int(i % 2), int(i % 2)));
    PairSets cand = candidate_sets(0, k, Strategy::Any);
    SamplingConfig cfg;
    cfg.sampling = SamplingMode::Random;
    cfg.k1 = 3;
    cfg.k2 = 3;
    Rng r1(42), r2(42), r3(43);
    PairSets a = sample_pairs(cand, k, cfg, r1);
    PairSets b = sample_pairs(cand, k, cfg, r2);
    PairSets c = sample_pairs(cand, k, cfg, r3);
    REQUIRE(a.positives == b.positives);
    REQUIRE(a.negatives == b.negatives);
    REQUIRE((a.positives != c.positives || a.negatives != c.negatives));
}

TEST_CASE("empty candidate sets pass through sampling") {
    std::vector<BatchMember> k = {member(0, 1, 0), member(1, 1, 0)};
    PairSets cand = candidate_sets(0, k, Strategy::Cross);  // nothing cross-domain
    REQUIRE(cand.positives.empty());
    REQUIRE(cand.negatives.empty());
    SamplingConfig cfg;
    Rng rng(1);
    PairSets out = sample_pairs(cand, k, cfg, rng);
    REQUIRE(out.positives.empty());
    REQUIRE(out.negatives.empty());
}
