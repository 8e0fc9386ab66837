#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "softmix/corpus.hpp"
#include "softmix/vocab.hpp"

namespace softmix {

constexpr const char* kXMarker = "[X]";
constexpr const char* kYMarker = "[Y]";

struct RelationSpec {
    std::string name;
    int n_facts = 0;
    int y_domain_size = 0;
    int n_templates = 2;
    // Probe templates approximate the corpus surfaces the way mined or
    // hand-written prompts approximate a pretraining corpus: related
    // wording, partly fresh words, never the exact corpus sentences.
    // 0 means "reuse the corpus templates as probes".
    int n_probe_templates = 0;
};

struct RelationSchema {
    std::string name;
    // Token templates with exactly one [X] and one [Y] each.
    std::vector<std::vector<std::string>> surface_templates;
    std::vector<std::vector<std::string>> probe_templates;
    std::vector<std::string> y_domain;

    const std::vector<std::vector<std::string>>& probes_or_surfaces() const {
        return probe_templates.empty() ? surface_templates : probe_templates;
    }
};

struct Fact {
    std::string relation;
    std::string x;  // 1-3 space-separated tokens
    std::string y;  // single token

    auto operator<=>(const Fact&) const = default;
};

struct FactTable {
    std::vector<Fact> facts;

    // Throws InternalError if some (relation, x) maps to two distinct y.
    void check_functional() const;
    std::optional<std::string> lookup(const std::string& relation, const std::string& x) const;
};

struct World {
    Vocabulary vocab;
    std::vector<RelationSchema> schemas;
    FactTable facts;
    std::vector<std::string> entities;

    const RelationSchema& schema(const std::string& relation) const;
};

// A closed world of entities, relation schemas and gold facts, deterministic
// per seed. Every x/y surface form tokenizes into vocabulary entries.
World generate_world(int n_entities, const std::vector<RelationSpec>& specs, uint64_t seed);

// Fact sentences (repetitions_per_fact renderings each, templates drawn
// uniformly) plus distractor word salads at the given rate. Facts listed in
// `exclude` are never expressed (leakage-controlled mode).
std::vector<CorpusSentence> generate_corpus(const World& world, int repetitions_per_fact,
                                            double distractor_rate, uint64_t seed,
                                            const std::set<Fact>* exclude = nullptr);

void write_facts_tsv(const FactTable& facts, const std::string& path);
void write_corpus(const std::vector<CorpusSentence>& corpus, const std::string& text_path,
                  const std::string& mask_path);
std::vector<CorpusSentence> load_corpus(const std::string& text_path, const std::string& mask_path);
void write_vocab(const Vocabulary& vocab, const std::string& path);
Vocabulary load_vocab(const std::string& path);

}  // namespace softmix
