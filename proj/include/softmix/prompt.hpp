#pragma once

#include <cstdint>
#include <string>
#include <tuple>
#include <vector>

#include "softmix/lm.hpp"
#include "softmix/tensor.hpp"
#include "softmix/vocab.hpp"

namespace softmix {

enum class PromptSource { single, mined, paraphrase, per_example, random };

std::string prompt_source_name(PromptSource s);
PromptSource prompt_source_from_name(const std::string& name);

// A cloze pattern over vocabulary tokens with one [X] and one [Y] marker.
struct HardPrompt {
    std::vector<std::string> pattern;  // includes the two markers
    PromptSource source = PromptSource::mined;

    int x_index() const;
    int y_index() const;
    int ordinary_token_count() const { return static_cast<int>(pattern.size()) - 2; }
    std::string render() const;  // single-space joined
};

HardPrompt parse_hard_prompt(const std::string& text, const Vocabulary& vocab,
                             PromptSource source = PromptSource::mined);

// Layout entry codes for SoftPrompt::layout.
constexpr int kLayoutX = -1;
constexpr int kLayoutY = -2;

// Tunable continuous prompt: n slot vectors plus blank positions, with a
// zero-initialized perturbation tensor for every layer boundary. Slot count
// and blank positions are fixed at construction.
struct SoftPrompt {
    Tensor slots;              // n x d
    std::vector<Tensor> deep;  // L+1 tensors of n x d
    std::vector<int> layout;   // length n+2; kLayoutX, kLayoutY or slot index
    std::string provenance;    // rendered hard prompt, or "random"
    PromptSource source = PromptSource::random;
    std::vector<int> origin_token_ids;  // per slot; empty without hard provenance

    int slot_count() const { return slots.rows; }
    int x_blank_slot() const;
    int y_blank_slot() const;
    double deep_norm() const;
};

struct PromptSet {
    std::string relation;
    std::vector<SoftPrompt> prompts;
};

SoftPrompt init_soft_from_hard(const HardPrompt& hard, const MaskedLM& lm);

// Same shape as the donor, slot vectors drawn i.i.d. per dimension from the
// given diagonal Gaussian.
SoftPrompt init_soft_random(const HardPrompt& shape_from, const Tensor& mean, const Tensor& std,
                            const LMConfig& config, uint64_t seed);

// Splices x token embeddings at the x blank and the [MASK] embedding at the
// y blank. Length is slot_count + |x| + 1.
EmbeddingSequence instantiate(const SoftPrompt& prompt, const std::vector<int>& x_token_ids,
                              const MaskedLM& lm);

// ConceptNet-style per-example prompts: keep the distinct patterns occurring
// strictly more than min_count times, ordered by descending count.
std::vector<HardPrompt> aggregate_example_prompts(
    const std::vector<std::tuple<HardPrompt, std::string, std::string>>& examples,
    int min_count = 10);

// One prompt per line; '#' lines ignored; duplicate patterns collapsed with
// a warning appended to `warnings` when given.
std::vector<HardPrompt> load_prompt_file(const std::string& path, const Vocabulary& vocab,
                                         PromptSource source,
                                         std::vector<std::string>* warnings = nullptr);

struct PromptManifestEntry {
    std::string relation;
    PromptSource source = PromptSource::mined;
    std::string path;
};

// Tab-separated: relation <TAB> source <TAB> path. Paths are resolved
// relative to the manifest's directory.
std::vector<PromptManifestEntry> load_prompt_manifest(const std::string& path);

}  // namespace softmix
