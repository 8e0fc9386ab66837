#include "softmix/prompt.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "softmix/rng.hpp"
#include "softmix/world.hpp"

namespace softmix {

std::string prompt_source_name(PromptSource s) {
    switch (s) {
        case PromptSource::single: return "single";
        case PromptSource::mined: return "mined";
        case PromptSource::paraphrase: return "paraphrase";
        case PromptSource::per_example: return "per_example";
        case PromptSource::random: return "random";
    }
    throw InternalError("bad prompt source");
}

PromptSource prompt_source_from_name(const std::string& name) {
    if (name == "single") return PromptSource::single;
    if (name == "mined") return PromptSource::mined;
    if (name == "paraphrase") return PromptSource::paraphrase;
    if (name == "per_example") return PromptSource::per_example;
    if (name == "random") return PromptSource::random;
    throw InputError("unknown prompt source: " + name);
}

int HardPrompt::x_index() const {
    for (size_t i = 0; i < pattern.size(); ++i)
        if (pattern[i] == kXMarker) return static_cast<int>(i);
    throw InternalError("HardPrompt without [X]");
}

int HardPrompt::y_index() const {
    for (size_t i = 0; i < pattern.size(); ++i)
        if (pattern[i] == kYMarker) return static_cast<int>(i);
    throw InternalError("HardPrompt without [Y]");
}

std::string HardPrompt::render() const {
    std::string out;
    for (size_t i = 0; i < pattern.size(); ++i) {
        if (i) out += ' ';
        out += pattern[i];
    }
    return out;
}

HardPrompt parse_hard_prompt(const std::string& text, const Vocabulary& vocab,
                             PromptSource source) {
    HardPrompt hp;
    hp.source = source;
    hp.pattern = split_tokens(text);
    int n_x = 0, n_y = 0;
    for (const std::string& tok : hp.pattern) {
        if (tok == kXMarker) {
            ++n_x;
        } else if (tok == kYMarker) {
            ++n_y;
        } else if (!vocab.contains(tok)) {
            throw InputError("prompt token not in vocabulary: " + tok);
        }
    }
    if (n_x != 1) throw FormatError("prompt needs exactly one [X]: " + text);
    if (n_y != 1) throw FormatError("prompt needs exactly one [Y]: " + text);
    return hp;
}

int SoftPrompt::x_blank_slot() const {
    for (size_t i = 0; i < layout.size(); ++i)
        if (layout[i] == kLayoutX) return static_cast<int>(i);
    throw InternalError("SoftPrompt without x blank");
}

int SoftPrompt::y_blank_slot() const {
    for (size_t i = 0; i < layout.size(); ++i)
        if (layout[i] == kLayoutY) return static_cast<int>(i);
    throw InternalError("SoftPrompt without y blank");
}

double SoftPrompt::deep_norm() const {
    double s = 0;
    for (const Tensor& t : deep)
        for (double x : t.v) s += x * x;
    return std::sqrt(s);
}

namespace {

std::vector<int> layout_from_hard(const HardPrompt& hard) {
    std::vector<int> layout;
    layout.reserve(hard.pattern.size());
    int slot = 0;
    for (const std::string& tok : hard.pattern) {
        if (tok == kXMarker) layout.push_back(kLayoutX);
        else if (tok == kYMarker) layout.push_back(kLayoutY);
        else layout.push_back(slot++);
    }
    return layout;
}

std::vector<Tensor> zero_deep(const LMConfig& config, int n_slots) {
    std::vector<Tensor> deep;
    deep.reserve(static_cast<size_t>(config.layers) + 1);
    for (int l = 0; l <= config.layers; ++l) deep.emplace_back(n_slots, config.d);
    return deep;
}

}  // namespace

SoftPrompt init_soft_from_hard(const HardPrompt& hard, const MaskedLM& lm) {
    SoftPrompt sp;
    sp.layout = layout_from_hard(hard);
    sp.source = hard.source;
    sp.provenance = hard.render();
    int n = hard.ordinary_token_count();
    sp.slots = Tensor(n, lm.config.d);
    sp.origin_token_ids.reserve(static_cast<size_t>(n));
    int s = 0;
    for (const std::string& tok : hard.pattern) {
        if (tok == kXMarker || tok == kYMarker) continue;
        int id = lm.vocab.id(tok);
        sp.origin_token_ids.push_back(id);
        std::copy(lm.embedding.row(id), lm.embedding.row(id) + lm.config.d, sp.slots.row(s));
        ++s;
    }
    sp.deep = zero_deep(lm.config, n);
    return sp;
}

SoftPrompt init_soft_random(const HardPrompt& shape_from, const Tensor& mean, const Tensor& std,
                            const LMConfig& config, uint64_t seed) {
    if (mean.rows != 1 || mean.cols != config.d || !std.same_shape(mean))
        throw InputError("init_soft_random: gaussian shape must be 1 x d");
    for (double s : std.v)
        if (s < 0) throw InputError("init_soft_random: negative std");
    SoftPrompt sp;
    sp.layout = layout_from_hard(shape_from);
    sp.source = PromptSource::random;
    sp.provenance = "random";
    int n = shape_from.ordinary_token_count();
    sp.slots = Tensor(n, config.d);
    Rng rng(seed ^ 0x50f7);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < config.d; ++j)
            sp.slots.at(i, j) = rng.gauss(mean.v[static_cast<size_t>(j)], std.v[static_cast<size_t>(j)]);
    sp.deep = zero_deep(config, n);
    return sp;
}

EmbeddingSequence instantiate(const SoftPrompt& prompt, const std::vector<int>& x_token_ids,
                              const MaskedLM& lm) {
    if (x_token_ids.empty()) throw InputError("instantiate: empty x");
    for (int id : x_token_ids)
        if (id < 0 || id >= lm.config.vocab_size) throw InputError("instantiate: x id out of range");
    int len = prompt.slot_count() + static_cast<int>(x_token_ids.size()) + 1;
    if (len > lm.config.max_len)
        throw InputError("instantiate: sequence longer than the LM's max_len");

    EmbeddingSequence seq;
    seq.vectors = Tensor(len, lm.config.d);
    seq.origin.resize(static_cast<size_t>(len));
    int pos = 0;
    auto put_row = [&](const double* src, SequencePosition tag) {
        std::copy(src, src + lm.config.d, seq.vectors.row(pos));
        seq.origin[static_cast<size_t>(pos)] = tag;
        ++pos;
    };
    for (int entry : prompt.layout) {
        if (entry == kLayoutX) {
            for (int id : x_token_ids)
                put_row(lm.embedding.row(id), {PositionOrigin::x_token, -1});
        } else if (entry == kLayoutY) {
            seq.blank_y = pos;
            put_row(lm.embedding.row(lm.vocab.mask_id), {PositionOrigin::y_mask, -1});
        } else {
            put_row(prompt.slots.row(entry), {PositionOrigin::prompt_slot, entry});
        }
    }
    return seq;
}

std::vector<HardPrompt> aggregate_example_prompts(
    const std::vector<std::tuple<HardPrompt, std::string, std::string>>& examples, int min_count) {
    std::map<std::string, int> counts;
    std::map<std::string, size_t> first_seen;
    std::map<std::string, HardPrompt> by_key;
    for (size_t i = 0; i < examples.size(); ++i) {
        const HardPrompt& hp = std::get<0>(examples[i]);
        std::string key = hp.render();
        if (counts.emplace(key, 0).second) {
            first_seen[key] = i;
            HardPrompt tagged = hp;
            tagged.source = PromptSource::per_example;
            by_key.emplace(key, std::move(tagged));
        }
        ++counts[key];
    }
    std::vector<std::string> keys;
    for (auto& [key, c] : counts)
        if (c > min_count) keys.push_back(key);
    std::sort(keys.begin(), keys.end(), [&](const std::string& a, const std::string& b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return first_seen[a] < first_seen[b];
    });
    std::vector<HardPrompt> out;
    out.reserve(keys.size());
    for (const std::string& k : keys) out.push_back(by_key[k]);
    return out;
}

std::vector<HardPrompt> load_prompt_file(const std::string& path, const Vocabulary& vocab,
                                         PromptSource source,
                                         std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open prompt file: " + path);
    std::vector<HardPrompt> out;
    std::map<std::string, int> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string trimmed = line;
        size_t first = trimmed.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        if (trimmed[first] == '#') continue;
        HardPrompt hp;
        try {
            hp = parse_hard_prompt(trimmed, vocab, source);
        } catch (const FormatError& e) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        std::string key = hp.render();
        if (!seen.emplace(key, lineno).second) {
            if (warnings)
                warnings->push_back(path + ":" + std::to_string(lineno) +
                                    ": duplicate prompt collapsed: " + key);
            continue;
        }
        out.push_back(std::move(hp));
    }
    return out;
}

std::vector<PromptManifestEntry> load_prompt_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open prompt manifest: " + path);
    std::filesystem::path dir = std::filesystem::path(path).parent_path();
    std::vector<PromptManifestEntry> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        PromptManifestEntry e;
        std::string source, rel_path;
        if (!std::getline(ls, e.relation, '\t') || !std::getline(ls, source, '\t') ||
            !std::getline(ls, rel_path))
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
        e.source = prompt_source_from_name(source);
        e.path = (dir / rel_path).string();
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace softmix
