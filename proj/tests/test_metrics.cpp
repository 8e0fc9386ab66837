#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "softmix/metrics.hpp"
#include "softmix/rng.hpp"

using namespace softmix;

namespace {

Tensor dist_from(const std::vector<double>& v) {
    Tensor t(1, static_cast<int>(v.size()));
    t.v = v;
    return t;
}

// independent sort-based ranking oracle with the same tie-break
int rank_oracle(const std::vector<double>& p, int gold) {
    std::vector<int> ids(p.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::sort(ids.begin(), ids.end(), [&](int a, int b) {
        if (p[static_cast<size_t>(a)] != p[static_cast<size_t>(b)])
            return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
        return a < b;
    });
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == gold) return static_cast<int>(i) + 1;
    return -1;
}

}  // namespace

TEST_CASE("rank_gold") {
    SUBCASE("strictly highest probability ranks first") {
        CHECK(rank_gold(dist_from({0.1, 0.7, 0.2}), 1) == 1);
    }
    SUBCASE("uniform distribution breaks ties by token id") {
        Tensor u = dist_from(std::vector<double>(8, 0.125));
        CHECK(rank_gold(u, 0) == 1);
        CHECK(rank_gold(u, 3) == 4);
        CHECK(rank_gold(u, 7) == 8);
    }
    SUBCASE("random vectors match the full-sort oracle") {
        Rng rng(5);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<double> p(30);
            for (double& x : p) x = rng.uniform01();
            if (trial % 3 == 0) p[7] = p[21];  // inject ties
            int gold = static_cast<int>(rng.uniform_index(30));
            CHECK(rank_gold(dist_from(p), gold) == rank_oracle(p, gold));
        }
    }
}

TEST_CASE("compute_metrics") {
    SUBCASE("worked example: ranks 1, 2, 20") {
        std::vector<RankRecord> rs = {{"a", "r", 1}, {"b", "r", 2}, {"c", "r", 20}};
        MetricReport rep = compute_metrics(rs);
        REQUIRE(rep.per_relation.size() == 1);
        CHECK(rep.per_relation[0].p1 == doctest::Approx(1.0 / 3).epsilon(1e-12));
        CHECK(rep.per_relation[0].p10 == doctest::Approx(2.0 / 3).epsilon(1e-12));
        CHECK(rep.per_relation[0].mrr == doctest::Approx((1.0 + 0.5 + 0.05) / 3).epsilon(1e-12));
        CHECK(rep.per_relation[0].mrr == doctest::Approx(0.5167).epsilon(1e-3));
    }
    SUBCASE("all rank one gives all metrics one") {
        std::vector<RankRecord> rs = {{"a", "r", 1}, {"b", "s", 1}};
        MetricReport rep = compute_metrics(rs);
        CHECK(rep.macro.p1 == 1.0);
        CHECK(rep.macro.p10 == 1.0);
        CHECK(rep.macro.mrr == 1.0);
        CHECK(rep.micro.p1 == 1.0);
    }
    SUBCASE("200 random records match independent recomputation within 1e-12") {
        Rng rng(7);
        std::vector<RankRecord> rs;
        for (int i = 0; i < 200; ++i)
            rs.push_back({"e" + std::to_string(i), "rel" + std::to_string(rng.uniform_index(3)),
                          1 + static_cast<int>(rng.uniform_index(40))});
        MetricReport rep = compute_metrics(rs);
        for (const MetricRow& row : rep.per_relation) {
            double p1 = 0, p10 = 0, mrr = 0;
            int n = 0;
            for (const RankRecord& r : rs) {
                if (r.relation != row.relation) continue;
                ++n;
                p1 += r.rank <= 1 ? 1 : 0;
                p10 += r.rank <= 10 ? 1 : 0;
                mrr += 1.0 / r.rank;
            }
            CHECK(std::abs(row.p1 - p1 / n) < 1e-12);
            CHECK(std::abs(row.p10 - p10 / n) < 1e-12);
            CHECK(std::abs(row.mrr - mrr / n) < 1e-12);
            CHECK(row.n == n);
        }
        // micro pooled
        double mrr_all = 0;
        for (const RankRecord& r : rs) mrr_all += 1.0 / r.rank;
        CHECK(std::abs(rep.micro.mrr - mrr_all / 200) < 1e-12);
        // invariants
        for (const MetricRow& row : rep.per_relation) {
            CHECK(row.p1 <= row.p10);
            CHECK(row.p10 <= 1.0);
            CHECK(row.p1 <= row.mrr);
            CHECK(row.mrr <= 1.0);
        }
    }
}

TEST_CASE("sign_test") {
    SUBCASE("identical correctness vectors give p = 1") {
        std::vector<bool> a = {true, false, true, true};
        CHECK(sign_test(a, a) == 1.0);
    }
    SUBCASE("eight discordant pairs all favoring one system") {
        std::vector<bool> a(8, true), b(8, false);
        CHECK(sign_test(a, b) == doctest::Approx(2.0 / 256).epsilon(1e-12));
    }
    SUBCASE("(7,3) discordance matches exhaustive binomial enumeration") {
        std::vector<bool> a, b;
        for (int i = 0; i < 7; ++i) {
            a.push_back(true);
            b.push_back(false);
        }
        for (int i = 0; i < 3; ++i) {
            a.push_back(false);
            b.push_back(true);
        }
        for (int i = 0; i < 5; ++i) {  // concordant padding
            a.push_back(true);
            b.push_back(true);
        }
        // oracle: exact two-sided binomial tail, doubles over all subsets
        int n = 10, k = 3;
        double tail = 0;
        for (int i = 0; i <= k; ++i) {
            double c = 1;
            for (int j = 0; j < i; ++j) c = c * (n - j) / (j + 1);
            tail += c;
        }
        double expected = std::min(1.0, 2.0 * tail / std::pow(2.0, n));
        CHECK(sign_test(a, b) == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("symmetric in its arguments") {
        Rng rng(11);
        std::vector<bool> a, b;
        for (int i = 0; i < 40; ++i) {
            a.push_back(rng.uniform01() < 0.5);
            b.push_back(rng.uniform01() < 0.4);
        }
        CHECK(sign_test(a, b) == doctest::Approx(sign_test(b, a)).epsilon(1e-14));
    }
    SUBCASE("length mismatch is an input error") {
        CHECK_THROWS_AS(sign_test({true}, {true, false}), InputError);
    }
    SUBCASE("balanced discordance clamps to 1") {
        std::vector<bool> a = {true, true, false, false};
        std::vector<bool> b = {false, false, true, true};
        CHECK(sign_test(a, b) == 1.0);
    }
}

namespace {

// brute-force oracle: recursive enumeration of sign flips
double perm_oracle(const std::vector<double>& d) {
    size_t n = d.size();
    double obs = 0;
    for (double x : d) obs += x;
    obs = std::abs(obs / static_cast<double>(n));
    double tol = 1e-12 * (1.0 + obs);
    uint64_t count = 0, total = 1ull << n;
    for (uint64_t bits = 0; bits < total; ++bits) {
        double s = 0;
        for (size_t i = 0; i < n; ++i) s += (bits >> i) & 1 ? -d[i] : d[i];
        if (std::abs(s / static_cast<double>(n)) >= obs - tol) ++count;
    }
    return static_cast<double>(count) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("paired_permutation_test") {
    SUBCASE("all-zero differences give p = 1") {
        std::vector<double> a = {0.3, 0.5, 0.7}, b = a;
        CHECK(paired_permutation_test(a, b, PermutationMode::exact_mode()) == 1.0);
    }
    SUBCASE("n = 10 exact equals brute-force enumeration of 1024 flips") {
        Rng rng(13);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<double> a(10), b(10);
            for (size_t i = 0; i < 10; ++i) {
                a[i] = rng.uniform01();
                b[i] = rng.uniform01();
            }
            std::vector<double> d(10);
            for (size_t i = 0; i < 10; ++i) d[i] = a[i] - b[i];
            CHECK(paired_permutation_test(a, b, PermutationMode::exact_mode()) ==
                  doctest::Approx(perm_oracle(d)).epsilon(1e-14));
        }
    }
    SUBCASE("sampled mode converges to the exact value") {
        Rng rng(17);
        std::vector<double> a(12), b(12);
        for (size_t i = 0; i < 12; ++i) {
            a[i] = rng.uniform01();
            b[i] = rng.uniform01() * 0.8;
        }
        double exact = paired_permutation_test(a, b, PermutationMode::exact_mode());
        double sampled = paired_permutation_test(a, b, PermutationMode::sampled(10000, 3));
        CHECK(std::abs(exact - sampled) < 0.02);
    }
    SUBCASE("two-sided symmetry") {
        std::vector<double> a = {0.9, 0.2, 0.7, 0.4, 0.6}, b = {0.1, 0.3, 0.5, 0.9, 0.2};
        CHECK(paired_permutation_test(a, b, PermutationMode::exact_mode()) ==
              paired_permutation_test(b, a, PermutationMode::exact_mode()));
    }
    SUBCASE("exact mode caps n at 20") {
        std::vector<double> a(21, 0.5), b(21, 0.4);
        CHECK_THROWS_AS(paired_permutation_test(a, b, PermutationMode::exact_mode()), InputError);
    }
}

TEST_CASE("effective_prompt_count") {
    SUBCASE("uniform weights maximize the effective count") {
        for (int k : {1, 2, 4, 8}) {
            std::vector<double> w(static_cast<size_t>(k), 1.0 / k);
            EffectivePromptCount e = effective_prompt_count(w);
            CHECK(e.effective == doctest::Approx(k).epsilon(1e-12));
        }
    }
    SUBCASE("one-hot weights give effective count 1") {
        EffectivePromptCount e = effective_prompt_count({0.0, 1.0, 0.0});
        CHECK(e.entropy_bits == 0.0);
        CHECK(e.effective == 1.0);
    }
    SUBCASE("worked example (0.5, 0.25, 0.25)") {
        EffectivePromptCount e = effective_prompt_count({0.5, 0.25, 0.25});
        CHECK(e.entropy_bits == doctest::Approx(1.5).epsilon(1e-12));
        CHECK(e.effective == doctest::Approx(std::pow(2.0, 1.5)).epsilon(1e-12));
        CHECK(e.effective == doctest::Approx(2.8284).epsilon(1e-4));
    }
    SUBCASE("permutation invariance and maximality at uniform") {
        std::vector<double> w = {0.1, 0.2, 0.3, 0.4};
        double e1 = effective_prompt_count(w).effective;
        std::vector<double> w2 = {0.4, 0.1, 0.3, 0.2};
        CHECK(effective_prompt_count(w2).effective == doctest::Approx(e1).epsilon(1e-12));
        CHECK(e1 < 4.0);
        CHECK(e1 >= 1.0);
    }
    SUBCASE("invalid distributions are input errors") {
        CHECK_THROWS_AS(effective_prompt_count({0.5, 0.4}), InputError);
        CHECK_THROWS_AS(effective_prompt_count({1.2, -0.2}), InputError);
    }
}

TEST_CASE("visualize_prompt") {
    using testutil::make_lm;
    LMConfig cfg;
    cfg.d = 32;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_len = 16;
    cfg.seed = 3;
    MaskedLM lm = make_lm(40, cfg);

    HardPrompt hp;
    hp.pattern = {"[X]", "w3", "w7", "[Y]", "w11"};
    SoftPrompt sp = init_soft_from_hard(hp, lm);

    SUBCASE("untuned slots report their origin word with ratio 1.00") {
        std::vector<SlotReportRow> rows = visualize_prompt(sp, lm);
        REQUIRE(rows.size() == 3);
        for (const SlotReportRow& r : rows) {
            REQUIRE(r.origin_word.has_value());
            CHECK(r.nearest_word == *r.origin_word);
            CHECK(r.norm_ratio == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(r.p_nearest == doctest::Approx(r.p_origin).epsilon(1e-12));
        }
    }
    SUBCASE("scaling a slot doubles the norm ratio but keeps the argmax") {
        SoftPrompt scaled = sp;
        for (int j = 0; j < lm.config.d; ++j) scaled.slots.at(0, j) *= 2.0;
        std::vector<SlotReportRow> rows = visualize_prompt(scaled, lm);
        CHECK(rows[0].norm_ratio == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(rows[0].nearest_word == *rows[0].origin_word);
    }
    SUBCASE("random vectors match an exhaustive inner-product scan") {
        Rng rng(23);
        SoftPrompt rnd = sp;
        for (double& x : rnd.slots.v) x = rng.gauss(0.0, 0.2);
        std::vector<SlotReportRow> rows = visualize_prompt(rnd, lm);
        for (int s = 0; s < 3; ++s) {
            int best = 0;
            double best_dot = -1e300;
            for (int w = 0; w < lm.config.vocab_size; ++w) {
                double dot = 0;
                for (int j = 0; j < lm.config.d; ++j)
                    dot += rnd.slots.at(s, j) * lm.embedding.at(w, j);
                if (dot > best_dot) {
                    best_dot = dot;
                    best = w;
                }
            }
            CHECK(rows[static_cast<size_t>(s)].nearest_word == lm.vocab.token(best));
        }
    }
    SUBCASE("random-provenance prompts omit origin fields") {
        auto [mean, std] = fit_embedding_gaussian(lm);
        SoftPrompt rnd = init_soft_random(hp, mean, std, lm.config, 5);
        std::vector<SlotReportRow> rows = visualize_prompt(rnd, lm);
        for (const SlotReportRow& r : rows) CHECK(!r.origin_word.has_value());
    }
}
