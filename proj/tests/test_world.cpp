#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>

#include "softmix/dataset.hpp"
#include "softmix/world.hpp"

using namespace softmix;

namespace {

std::vector<RelationSpec> three_relations() {
    return {{"craft", 120, 6, 3}, {"origin", 150, 25, 4}, {"emblem", 100, 12, 2}};
}

}  // namespace

TEST_CASE("a fully constrained world has exactly one fact") {
    World w = generate_world(1, {{"only", 1, 1, 2}}, 3);
    CHECK(w.facts.facts.size() == 1);
    CHECK(w.facts.facts[0].relation == "only");
    CHECK(w.facts.facts[0].y == w.schemas[0].y_domain[0]);
}

TEST_CASE("same seed gives identical worlds") {
    World a = generate_world(200, three_relations(), 77);
    World b = generate_world(200, three_relations(), 77);
    CHECK(a.entities == b.entities);
    CHECK(a.facts.facts == b.facts.facts);
    CHECK(a.vocab.tokens == b.vocab.tokens);
    World c = generate_world(200, three_relations(), 78);
    CHECK(a.facts.facts != c.facts.facts);
}

TEST_CASE("fact counts match the request and stay functional") {
    World w = generate_world(500, three_relations(), 5);
    // independent recount
    std::map<std::string, int> counts;
    std::map<std::pair<std::string, std::string>, std::set<std::string>> ys;
    for (const Fact& f : w.facts.facts) {
        ++counts[f.relation];
        ys[{f.relation, f.x}].insert(f.y);
    }
    CHECK(counts["craft"] == 120);
    CHECK(counts["origin"] == 150);
    CHECK(counts["emblem"] == 100);
    for (auto& [key, set] : ys) CHECK(set.size() == 1);
    // every y sits in the relation's domain
    for (const Fact& f : w.facts.facts) {
        const RelationSchema& s = w.schema(f.relation);
        CHECK(std::count(s.y_domain.begin(), s.y_domain.end(), f.y) == 1);
    }
}

TEST_CASE("world generation rejects bad specs") {
    CHECK_THROWS_AS(generate_world(10, {}, 1), InputError);
    CHECK_THROWS_AS(generate_world(10, {{"r", 5, 0, 2}}, 1), InputError);
    CHECK_THROWS_AS(generate_world(3, {{"r", 5, 2, 2}}, 1), InputError);  // facts > entities
    CHECK_THROWS_AS(generate_world(0, {{"r", 1, 1, 2}}, 1), InputError);
}

TEST_CASE("templates carry exactly one [X] and one [Y] and at least two variants") {
    World w = generate_world(200, three_relations(), 9);
    for (const RelationSchema& s : w.schemas) {
        CHECK(s.surface_templates.size() >= 2);
        for (const auto& tmpl : s.surface_templates) {
            CHECK(std::count(tmpl.begin(), tmpl.end(), std::string(kXMarker)) == 1);
            CHECK(std::count(tmpl.begin(), tmpl.end(), std::string(kYMarker)) == 1);
        }
    }
}

TEST_CASE("corpus counting and vocabulary closure") {
    World w = generate_world(10, {{"craft", 10, 3, 2}}, 13);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 1, 0.0, 1);
    CHECK(corpus.size() == 10);  // 10 facts x 1 repetition, no distractors
    for (const CorpusSentence& s : corpus) {
        CHECK(s.carries_fact());
        for (const std::string& tok : s.tokens) CHECK(w.vocab.contains(tok));
    }
}

TEST_CASE("fact token index marks the answer token") {
    World w = generate_world(20, {{"craft", 20, 5, 3}}, 17);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 2, 0.0, 2);
    for (const CorpusSentence& s : corpus) {
        const std::string& y = s.tokens[static_cast<size_t>(s.fact_token_index)];
        const RelationSchema& schema = w.schemas[0];
        CHECK(std::count(schema.y_domain.begin(), schema.y_domain.end(), y) == 1);
    }
}

namespace {

// Renders fact via template, as the generator does. Test-side oracle.
std::vector<std::string> render_oracle(const std::vector<std::string>& tmpl, const Fact& f,
                                       int* y_pos) {
    std::vector<std::string> out;
    for (const std::string& tok : tmpl) {
        if (tok == kXMarker) {
            for (const std::string& part : split_tokens(f.x)) out.push_back(part);
        } else if (tok == kYMarker) {
            if (y_pos) *y_pos = static_cast<int>(out.size());
            out.push_back(f.y);
        } else {
            out.push_back(tok);
        }
    }
    return out;
}

std::string join(const std::vector<std::string>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += toks[i];
    }
    return s;
}

}  // namespace

TEST_CASE("template usage is uniform within five percent") {
    World w = generate_world(100, {{"craft", 100, 10, 4}}, 23);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 100, 0.0, 3);  // 10000 sentences
    REQUIRE(corpus.size() == 10000);
    // sentence string -> template index, over all fact x template renders
    std::map<std::string, int> render_to_template;
    for (const Fact& f : w.facts.facts)
        for (size_t ti = 0; ti < w.schemas[0].surface_templates.size(); ++ti)
            render_to_template[join(render_oracle(w.schemas[0].surface_templates[ti], f, nullptr))] =
                static_cast<int>(ti);
    std::map<int, int> usage;
    for (const CorpusSentence& s : corpus) {
        auto it = render_to_template.find(join(s.tokens));
        REQUIRE(it != render_to_template.end());
        ++usage[it->second];
    }
    REQUIRE(usage.size() == 4);
    for (auto& [ti, count] : usage) CHECK(std::abs(count / 10000.0 - 0.25) < 0.05);
}

TEST_CASE("ground-truth closure: a fact-table oracle answers every masked sentence") {
    World w = generate_world(40, {{"craft", 40, 8, 3}, {"origin", 30, 5, 2}}, 31);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 3, 0.0, 7);
    // The oracle memorizes every (masked sentence -> answer) pair derivable
    // from the fact table. Each masked corpus sentence must hit exactly one
    // answer, and it is the token that was masked.
    std::map<std::string, std::set<std::string>> oracle;
    for (const Fact& f : w.facts.facts) {
        for (const auto& tmpl : w.schema(f.relation).surface_templates) {
            int y_pos = -1;
            std::vector<std::string> toks = render_oracle(tmpl, f, &y_pos);
            toks[static_cast<size_t>(y_pos)] = "[MASK]";
            oracle[join(toks) + "#" + std::to_string(y_pos)].insert(f.y);
        }
    }
    for (const CorpusSentence& s : corpus) {
        REQUIRE(s.carries_fact());
        std::vector<std::string> masked = s.tokens;
        std::string gold = masked[static_cast<size_t>(s.fact_token_index)];
        masked[static_cast<size_t>(s.fact_token_index)] = "[MASK]";
        auto it = oracle.find(join(masked) + "#" + std::to_string(s.fact_token_index));
        REQUIRE(it != oracle.end());
        CHECK(it->second.size() == 1);
        CHECK(*it->second.begin() == gold);
    }
}

TEST_CASE("leakage-controlled corpus never expresses excluded facts") {
    World w = generate_world(30, {{"craft", 30, 6, 3}}, 41);
    std::set<Fact> held_out(w.facts.facts.begin(), w.facts.facts.begin() + 10);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 4, 0.2, 11, &held_out);
    for (const CorpusSentence& s : corpus) {
        if (!s.carries_fact()) continue;
        for (const Fact& f : held_out) {
            std::vector<std::string> xtoks = split_tokens(f.x);
            bool has_x = false;
            for (size_t i = 0; i + xtoks.size() <= s.tokens.size(); ++i) {
                bool all = true;
                for (size_t k = 0; k < xtoks.size(); ++k)
                    if (s.tokens[i + k] != xtoks[k]) all = false;
                if (all) has_x = true;
            }
            bool states_fact =
                has_x && s.tokens[static_cast<size_t>(s.fact_token_index)] == f.y;
            CHECK(!states_fact);
        }
    }
}

TEST_CASE("distractors carry no maskable position and corpus files round-trip") {
    World w = generate_world(25, {{"craft", 25, 5, 2}}, 43);
    std::vector<CorpusSentence> corpus = generate_corpus(w, 2, 0.5, 5);
    size_t n_distract = 0;
    for (const CorpusSentence& s : corpus)
        if (!s.carries_fact()) ++n_distract;
    CHECK(n_distract == 25);  // 0.5 * 50 fact sentences

    write_corpus(corpus, "test_world_corpus.txt", "test_world_corpus_mask.tsv");
    std::vector<CorpusSentence> loaded =
        load_corpus("test_world_corpus.txt", "test_world_corpus_mask.tsv");
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].tokens == corpus[i].tokens);
        CHECK(loaded[i].fact_token_index == corpus[i].fact_token_index);
    }
}

TEST_CASE("facts export round-trips through the triples loader") {
    World w = generate_world(60, {{"craft", 50, 10, 3}, {"origin", 40, 7, 2}}, 47);
    write_facts_tsv(w.facts, "test_world_facts.tsv");
    std::vector<Triple> triples = load_triples("test_world_facts.tsv");
    REQUIRE(triples.size() == w.facts.facts.size());
    for (size_t i = 0; i < triples.size(); ++i) {
        CHECK(triples[i].relation == w.facts.facts[i].relation);
        CHECK(triples[i].x == w.facts.facts[i].x);
        CHECK(triples[i].y == w.facts.facts[i].y);
    }
}

TEST_CASE("vocabulary file round-trips") {
    World w = generate_world(15, {{"craft", 10, 4, 2}}, 53);
    write_vocab(w.vocab, "test_world_vocab.txt");
    Vocabulary v = load_vocab("test_world_vocab.txt");
    CHECK(v.tokens == w.vocab.tokens);
    CHECK(v.mask_id == w.vocab.mask_id);
}
