#include "softmix/world.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_set>

#include "softmix/rng.hpp"

namespace softmix {

namespace {

const std::vector<std::string> kFunctionWords = {
    "the", "of", "a", "in", "by", "with", "is", "was", "near", "and", "every", ",", ".",
};

// Pronounceable pseudo-words, unique across the whole world.
class WordMint {
public:
    explicit WordMint(Rng& rng) : rng_(rng) {
        for (const auto& w : kFunctionWords) used_.insert(w);
        used_.insert(kXMarker);
        used_.insert(kYMarker);
        used_.insert(kMaskToken);
        used_.insert(kPadToken);
    }

    std::string fresh(int min_syllables = 2, int max_syllables = 3) {
        static const std::vector<std::string> onsets = {"b", "d",  "f",  "g",  "k",  "l",  "m",
                                                        "n", "p",  "r",  "s",  "t",  "v",  "z",
                                                        "br", "dr", "st", "tr", "kl", "pl"};
        static const std::vector<std::string> vowels = {"a", "e", "i", "o", "u"};
        static const std::vector<std::string> codas = {"", "", "n", "r", "s", "l", "k", "t"};
        for (int attempt = 0; attempt < 1000; ++attempt) {
            int ns = rng_.uniform_int(min_syllables, max_syllables);
            std::string w;
            for (int s = 0; s < ns; ++s) {
                w += onsets[rng_.uniform_index(onsets.size())];
                w += vowels[rng_.uniform_index(vowels.size())];
                if (s + 1 == ns) w += codas[rng_.uniform_index(codas.size())];
            }
            if (used_.insert(w).second) return w;
        }
        throw InternalError("WordMint: exhausted word space");
    }

private:
    Rng& rng_;
    std::unordered_set<std::string> used_;
};

std::vector<std::string> make_template(int shape, const std::string& v, const std::string& n) {
    switch (shape % 6) {
        case 0: return {kXMarker, v, "the", n, kYMarker, "."};
        case 1: return {"the", n, "of", kXMarker, "is", kYMarker, "."};
        case 2: return {kXMarker, v, kYMarker, "."};
        case 3: return {kYMarker, "was", "the", n, "of", kXMarker, "."};
        case 4: return {kXMarker, "was", v, "with", "the", kYMarker, "."};
        case 5: return {"in", "every", n, ",", kXMarker, v, kYMarker, "."};
        default: return {};
    }
}

// Probe shapes play the role of externally mined or hand-written prompts:
// related to the pretraining text but never identical to it. Quality is
// deliberately heterogeneous, from near-paraphrases of a corpus surface to
// rewirings around fresh words (pv, pn, pw) the LM never saw in context.
std::vector<std::string> make_probe_template(int shape, const std::string& v,
                                             const std::string& n, const std::string& pv,
                                             const std::string& pn, const std::string& pw) {
    switch (shape % 6) {
        case 0: return {kXMarker, v, "a", n, pw, kYMarker, "."};
        case 1: return {"the", n, "of", kXMarker, v, "the", pw, kYMarker, "."};
        case 2: return {kXMarker, pv, "the", n, "near", kYMarker, "."};
        case 3: return {kYMarker, "was", pv, "by", kXMarker, "."};
        case 4: return {kXMarker, pv, "a", pw, kYMarker, "."};
        case 5: return {"in", "a", pn, ",", kXMarker, v, kYMarker, "."};
        default: return {};
    }
}

}  // namespace

void FactTable::check_functional() const {
    std::map<std::pair<std::string, std::string>, std::string> seen;
    for (const Fact& f : facts) {
        auto key = std::make_pair(f.relation, f.x);
        auto [it, inserted] = seen.emplace(key, f.y);
        if (!inserted && it->second != f.y)
            throw InternalError("FactTable: (" + f.relation + ", " + f.x + ") maps to two answers");
    }
}

std::optional<std::string> FactTable::lookup(const std::string& relation,
                                             const std::string& x) const {
    for (const Fact& f : facts)
        if (f.relation == relation && f.x == x) return f.y;
    return std::nullopt;
}

const RelationSchema& World::schema(const std::string& relation) const {
    for (const RelationSchema& s : schemas)
        if (s.name == relation) return s;
    throw InputError("unknown relation: " + relation);
}

World generate_world(int n_entities, const std::vector<RelationSpec>& specs, uint64_t seed) {
    if (specs.empty()) throw InputError("generate_world: empty relation spec");
    if (n_entities < 1) throw InputError("generate_world: need at least one entity");
    for (const RelationSpec& s : specs) {
        if (s.name.empty()) throw InputError("generate_world: relation needs a name");
        if (s.y_domain_size < 1) throw InputError("generate_world: empty y domain");
        if (s.n_facts < 1) throw InputError("generate_world: relation needs facts");
        if (s.n_facts > n_entities)
            throw InputError("generate_world: more facts than entities for " + s.name);
        if (s.n_templates < 2)
            throw InputError("generate_world: need at least two surface templates");
    }

    Rng rng(seed ^ 0x70707070u);
    WordMint mint(rng);
    World world;

    // Entity names: a unique head word, with optional shared affix words.
    std::vector<std::string> prefixes, suffixes;
    for (int i = 0; i < 5; ++i) prefixes.push_back(mint.fresh(1, 1));
    for (int i = 0; i < 5; ++i) suffixes.push_back(mint.fresh(1, 1));
    std::vector<std::string> ordered_words;  // vocabulary in generation order
    auto note = [&](const std::string& w) { ordered_words.push_back(w); };
    for (const auto& w : kFunctionWords) note(w);
    for (const auto& w : prefixes) note(w);
    for (const auto& w : suffixes) note(w);

    world.entities.reserve(static_cast<size_t>(n_entities));
    for (int i = 0; i < n_entities; ++i) {
        std::string head = mint.fresh();
        note(head);
        std::string name = head;
        if (rng.uniform01() < 0.15) name = prefixes[rng.uniform_index(prefixes.size())] + " " + name;
        if (rng.uniform01() < 0.15) name += " " + suffixes[rng.uniform_index(suffixes.size())];
        world.entities.push_back(name);
    }

    for (const RelationSpec& spec : specs) {
        RelationSchema schema;
        schema.name = spec.name;
        std::string v0, n0;
        for (int t = 0; t < spec.n_templates; ++t) {
            std::string v = mint.fresh();
            std::string n = mint.fresh();
            note(v);
            note(n);
            if (t == 0) {
                v0 = v;
                n0 = n;
            }
            schema.surface_templates.push_back(make_template(t, v, n));
        }
        for (int t = 0; t < spec.n_probe_templates; ++t) {
            std::string pv = mint.fresh();
            std::string pn = mint.fresh();
            std::string pw = mint.fresh();
            note(pv);
            note(pn);
            note(pw);
            schema.probe_templates.push_back(make_probe_template(t, v0, n0, pv, pn, pw));
        }
        for (int yi = 0; yi < spec.y_domain_size; ++yi) {
            std::string y = mint.fresh();
            note(y);
            schema.y_domain.push_back(y);
        }

        std::vector<int> entity_idx(world.entities.size());
        for (size_t i = 0; i < entity_idx.size(); ++i) entity_idx[i] = static_cast<int>(i);
        rng.shuffle(entity_idx);
        // Round-robin over the y domain keeps every answer represented.
        std::vector<std::string> ys;
        ys.reserve(static_cast<size_t>(spec.n_facts));
        for (int i = 0; i < spec.n_facts; ++i)
            ys.push_back(schema.y_domain[static_cast<size_t>(i) % schema.y_domain.size()]);
        rng.shuffle(ys);
        for (int i = 0; i < spec.n_facts; ++i)
            world.facts.facts.push_back(
                {spec.name, world.entities[static_cast<size_t>(entity_idx[i])], ys[static_cast<size_t>(i)]});
        world.schemas.push_back(std::move(schema));
    }

    world.vocab = Vocabulary::build(ordered_words);
    world.facts.check_functional();
    return world;
}

namespace {

CorpusSentence render_fact(const std::vector<std::string>& tmpl, const Fact& fact) {
    CorpusSentence s;
    for (const std::string& tok : tmpl) {
        if (tok == kXMarker) {
            std::istringstream xs(fact.x);
            std::string part;
            while (xs >> part) s.tokens.push_back(part);
        } else if (tok == kYMarker) {
            s.fact_token_index = static_cast<int>(s.tokens.size());
            s.tokens.push_back(fact.y);
        } else {
            s.tokens.push_back(tok);
        }
    }
    return s;
}

}  // namespace

std::vector<CorpusSentence> generate_corpus(const World& world, int repetitions_per_fact,
                                            double distractor_rate, uint64_t seed,
                                            const std::set<Fact>* exclude) {
    if (repetitions_per_fact < 1) throw InputError("generate_corpus: repetitions must be >= 1");
    if (distractor_rate < 0) throw InputError("generate_corpus: negative distractor rate");
    Rng rng(seed ^ 0xc0121715u);
    std::vector<CorpusSentence> out;

    size_t n_fact_sentences = 0;
    for (const Fact& fact : world.facts.facts) {
        if (exclude && exclude->count(fact)) continue;
        const RelationSchema& schema = world.schema(fact.relation);
        for (int rep = 0; rep < repetitions_per_fact; ++rep) {
            const auto& tmpl =
                schema.surface_templates[rng.uniform_index(schema.surface_templates.size())];
            out.push_back(render_fact(tmpl, fact));
            ++n_fact_sentences;
        }
    }

    // Distractor pool: anything except answer tokens, so no distractor can
    // state a fact.
    std::vector<std::string> pool = kFunctionWords;
    for (const std::string& e : world.entities) {
        std::istringstream es(e);
        std::string part;
        while (es >> part) pool.push_back(part);
    }
    size_t n_distractors =
        static_cast<size_t>(distractor_rate * static_cast<double>(n_fact_sentences) + 0.5);
    for (size_t i = 0; i < n_distractors; ++i) {
        CorpusSentence s;
        int len = rng.uniform_int(5, 9);
        for (int k = 0; k < len; ++k) s.tokens.push_back(pool[rng.uniform_index(pool.size())]);
        out.push_back(std::move(s));
    }
    rng.shuffle(out);
    return out;
}

void write_facts_tsv(const FactTable& facts, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path);
    for (const Fact& f : facts.facts) out << f.relation << "\t" << f.x << "\t" << f.y << "\n";
}

void write_corpus(const std::vector<CorpusSentence>& corpus, const std::string& text_path,
                  const std::string& mask_path) {
    std::filesystem::path p(text_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream text(text_path, std::ios::trunc);
    std::ofstream mask(mask_path, std::ios::trunc);
    if (!text || !mask) throw InputError("cannot write corpus files");
    for (size_t i = 0; i < corpus.size(); ++i) {
        const CorpusSentence& s = corpus[i];
        for (size_t k = 0; k < s.tokens.size(); ++k) {
            if (k) text << " ";
            text << s.tokens[k];
        }
        text << "\n";
        mask << i << "\t" << s.fact_token_index << "\n";
    }
}

std::vector<CorpusSentence> load_corpus(const std::string& text_path,
                                        const std::string& mask_path) {
    std::ifstream text(text_path);
    if (!text) throw InputError("cannot open corpus: " + text_path);
    std::vector<CorpusSentence> out;
    std::string line;
    while (std::getline(text, line)) {
        CorpusSentence s;
        s.tokens = split_tokens(line);
        if (s.tokens.empty()) throw FormatError("empty corpus line " + std::to_string(out.size() + 1));
        out.push_back(std::move(s));
    }
    std::ifstream mask(mask_path);
    if (!mask) throw InputError("cannot open corpus mask file: " + mask_path);
    size_t lineno = 0;
    while (std::getline(mask, line)) {
        ++lineno;
        std::istringstream ls(line);
        size_t idx;
        int fact_idx;
        if (!(ls >> idx >> fact_idx) || idx >= out.size())
            throw FormatError("bad corpus mask line " + std::to_string(lineno));
        if (fact_idx >= static_cast<int>(out[idx].tokens.size()))
            throw FormatError("mask index out of range at line " + std::to_string(lineno));
        out[idx].fact_token_index = fact_idx;
    }
    return out;
}

void write_vocab(const Vocabulary& vocab, const std::string& path) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + path);
    for (const std::string& t : vocab.tokens) out << t << "\n";
}

Vocabulary load_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary: " + path);
    std::vector<std::string> words;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) throw FormatError("empty vocabulary line " + std::to_string(lineno));
        if (lineno == 1 && line != kMaskToken)
            throw FormatError("vocabulary must start with " + std::string(kMaskToken));
        if (lineno == 2 && line != kPadToken)
            throw FormatError("vocabulary line 2 must be " + std::string(kPadToken));
        if (lineno > 2) words.push_back(line);
    }
    return Vocabulary::build(words);
}

}  // namespace softmix
