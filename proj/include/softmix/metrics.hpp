#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "softmix/lm.hpp"
#include "softmix/prompt.hpp"
#include "softmix/tensor.hpp"

namespace softmix {

struct RankRecord {
    std::string example_id;
    std::string relation;
    int rank = 0;  // >= 1

    double reciprocal_rank() const { return 1.0 / rank; }
};

struct MetricRow {
    std::string relation;  // a relation name, "_macro" or "_micro"
    int n = 0;
    double p1 = 0, p10 = 0, mrr = 0;
};

struct MetricReport {
    std::vector<MetricRow> per_relation;
    MetricRow macro;  // unweighted mean over relations
    MetricRow micro;  // pooled over all examples
};

// 1 + #{w : p(w) > p(gold)} + #{w : p(w) = p(gold), id(w) < gold}; ties
// break deterministically by token id.
int rank_gold(const Tensor& distribution, int gold_id);

MetricReport compute_metrics(const std::vector<RankRecord>& ranks);

// Two-sided exact sign test over discordant pairs; p = 1 without them.
double sign_test(const std::vector<bool>& correct_a, const std::vector<bool>& correct_b);

struct PermutationMode {
    bool exact = true;
    int resamples = 10000;
    uint64_t seed = 1;

    static PermutationMode exact_mode() { return {true, 0, 0}; }
    static PermutationMode sampled(int resamples, uint64_t seed) {
        return {false, resamples, seed};
    }
};

// Two-sided p-value for the mean paired difference under sign flips. Exact
// mode enumerates all 2^n flips (n <= 20); sampled mode seeds its draws and
// counts the identity flip.
double paired_permutation_test(const std::vector<double>& scores_a,
                               const std::vector<double>& scores_b, PermutationMode mode);

struct EffectivePromptCount {
    double entropy_bits = 0;
    double effective = 1;  // 2^H
};

EffectivePromptCount effective_prompt_count(const std::vector<double>& weights);

struct SlotReportRow {
    int slot = 0;
    std::string nearest_word;       // argmax_w p(w | v)
    double p_nearest = 0;
    std::optional<std::string> origin_word;  // absent without hard provenance
    double p_origin = 0;
    double norm_ratio = 0;          // ||v|| / ||v0||
};

// p(w | v) is the softmax over the vocabulary of <v, embedding_w>.
std::vector<SlotReportRow> visualize_prompt(const SoftPrompt& prompt, const MaskedLM& lm);

}  // namespace softmix
