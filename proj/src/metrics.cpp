#include "softmix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "softmix/rng.hpp"

namespace softmix {

int rank_gold(const Tensor& distribution, int gold_id) {
    if (distribution.rows != 1) throw InputError("rank_gold: expected a 1 x V distribution");
    if (gold_id < 0 || gold_id >= distribution.cols) throw InputError("rank_gold: gold id out of range");
    double pg = distribution.v[static_cast<size_t>(gold_id)];
    int rank = 1;
    for (int w = 0; w < distribution.cols; ++w) {
        double p = distribution.v[static_cast<size_t>(w)];
        if (p > pg || (p == pg && w < gold_id)) ++rank;
    }
    return rank;
}

namespace {

MetricRow row_from_ranks(const std::string& name, const std::vector<int>& ranks) {
    MetricRow row;
    row.relation = name;
    row.n = static_cast<int>(ranks.size());
    for (int r : ranks) {
        if (r <= 1) row.p1 += 1;
        if (r <= 10) row.p10 += 1;
        row.mrr += 1.0 / r;
    }
    row.p1 /= row.n;
    row.p10 /= row.n;
    row.mrr /= row.n;
    return row;
}

}  // namespace

MetricReport compute_metrics(const std::vector<RankRecord>& records) {
    if (records.empty()) throw InputError("compute_metrics: no records");
    std::map<std::string, std::vector<int>> grouped;
    std::vector<int> all;
    for (const RankRecord& r : records) {
        if (r.rank < 1) throw InputError("compute_metrics: rank must be >= 1");
        grouped[r.relation].push_back(r.rank);
        all.push_back(r.rank);
    }
    MetricReport report;
    for (auto& [rel, ranks] : grouped) report.per_relation.push_back(row_from_ranks(rel, ranks));
    report.micro = row_from_ranks("_micro", all);
    report.macro.relation = "_macro";
    report.macro.n = static_cast<int>(records.size());
    for (const MetricRow& row : report.per_relation) {
        report.macro.p1 += row.p1;
        report.macro.p10 += row.p10;
        report.macro.mrr += row.mrr;
    }
    double k = static_cast<double>(report.per_relation.size());
    report.macro.p1 /= k;
    report.macro.p10 /= k;
    report.macro.mrr /= k;
    return report;
}

double sign_test(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b) {
    if (correct_a.size() != correct_b.size()) throw InputError("sign_test: length mismatch");
    int a_only = 0, b_only = 0;
    for (size_t i = 0; i < correct_a.size(); ++i) {
        if (correct_a[i] && !correct_b[i]) ++a_only;
        if (!correct_a[i] && correct_b[i]) ++b_only;
    }
    int n = a_only + b_only;
    if (n == 0) return 1.0;
    int k = std::min(a_only, b_only);
    // log-space binomial tail: P(X <= k), X ~ Bin(n, 1/2)
    double log_half_n = -static_cast<double>(n) * std::log(2.0);
    double tail = 0;
    for (int i = 0; i <= k; ++i) {
        double log_c = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
        tail += std::exp(log_c + log_half_n);
    }
    return std::min(1.0, 2.0 * tail);
}

double paired_permutation_test(const std::vector<double>& scores_a,
                               const std::vector<double>& scores_b, PermutationMode mode) {
    if (scores_a.size() != scores_b.size())
        throw InputError("paired_permutation_test: length mismatch");
    size_t n = scores_a.size();
    if (n == 0) throw InputError("paired_permutation_test: empty input");
    std::vector<double> diff(n);
    for (size_t i = 0; i < n; ++i) diff[i] = scores_a[i] - scores_b[i];
    double observed = 0;
    for (double d : diff) observed += d;
    observed = std::abs(observed / static_cast<double>(n));
    // Tolerance keeps |stat| == |observed| flips (identity, full flip) counted
    // despite floating-point noise.
    double tol = 1e-12 * (1.0 + observed);

    if (mode.exact) {
        if (n > 20) throw InputError("paired_permutation_test: exact mode needs n <= 20");
        uint64_t total = 1ull << n;
        uint64_t count = 0;
        for (uint64_t bits = 0; bits < total; ++bits) {
            double s = 0;
            for (size_t i = 0; i < n; ++i) s += (bits >> i) & 1 ? -diff[i] : diff[i];
            if (std::abs(s / static_cast<double>(n)) >= observed - tol) ++count;
        }
        return static_cast<double>(count) / static_cast<double>(total);
    }

    if (mode.resamples < 1) throw InputError("paired_permutation_test: need resamples >= 1");
    Rng rng(mode.seed ^ 0x9e37);
    uint64_t count = 1;  // identity flip
    for (int r = 0; r < mode.resamples; ++r) {
        double s = 0;
        uint64_t bits = 0;
        int have = 0;
        for (size_t i = 0; i < n; ++i) {
            if (have == 0) {
                bits = rng.next_u64();
                have = 64;
            }
            s += (bits & 1) ? -diff[i] : diff[i];
            bits >>= 1;
            --have;
        }
        if (std::abs(s / static_cast<double>(n)) >= observed - tol) ++count;
    }
    return static_cast<double>(count) / static_cast<double>(mode.resamples + 1);
}

EffectivePromptCount effective_prompt_count(const std::vector<double>& weights) {
    if (weights.empty()) throw InputError("effective_prompt_count: empty weights");
    double sum = 0;
    for (double w : weights) {
        if (w < 0 || w > 1 + 1e-9) throw InputError("effective_prompt_count: weight out of [0,1]");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw InputError("effective_prompt_count: weights do not sum to 1");
    EffectivePromptCount out;
    for (double w : weights)
        if (w > 0) out.entropy_bits -= w * std::log2(w);
    out.effective = std::exp2(out.entropy_bits);
    return out;
}

std::vector<SlotReportRow> visualize_prompt(const SoftPrompt& prompt, const MaskedLM& lm) {
    std::vector<SlotReportRow> rows;
    bool has_origin = !prompt.origin_token_ids.empty();
    int V = lm.config.vocab_size;
    for (int s = 0; s < prompt.slot_count(); ++s) {
        SlotReportRow row;
        row.slot = s;
        // softmax over inner products with every embedding row
        std::vector<double> scores(static_cast<size_t>(V));
        const double* v = prompt.slots.row(s);
        double mx = -1e300;
        for (int w = 0; w < V; ++w) {
            double dot = 0;
            const double* e = lm.embedding.row(w);
            for (int j = 0; j < lm.config.d; ++j) dot += v[j] * e[j];
            scores[static_cast<size_t>(w)] = dot;
            mx = std::max(mx, dot);
        }
        double z = 0;
        for (double& sc : scores) {
            sc = std::exp(sc - mx);
            z += sc;
        }
        int best = 0;
        for (int w = 1; w < V; ++w)
            if (scores[static_cast<size_t>(w)] > scores[static_cast<size_t>(best)]) best = w;
        row.nearest_word = lm.vocab.token(best);
        row.p_nearest = scores[static_cast<size_t>(best)] / z;
        if (has_origin) {
            int w0 = prompt.origin_token_ids[static_cast<size_t>(s)];
            row.origin_word = lm.vocab.token(w0);
            row.p_origin = scores[static_cast<size_t>(w0)] / z;
            double nv = 0, nv0 = 0;
            const double* e0 = lm.embedding.row(w0);
            for (int j = 0; j < lm.config.d; ++j) {
                nv += v[j] * v[j];
                nv0 += e0[j] * e0[j];
            }
            row.norm_ratio = std::sqrt(nv) / std::sqrt(nv0);
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace softmix
