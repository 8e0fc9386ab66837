#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "softmix/vocab.hpp"

namespace softmix {

struct Triple {
    std::string relation;
    std::string x;
    std::string y;

    auto operator<=>(const Triple&) const = default;
};

enum class SplitRegime { random_80_10_10, distinct_y };

std::string split_regime_name(SplitRegime r);
SplitRegime split_regime_from_name(const std::string& name);

struct Split {
    std::vector<Triple> train, dev, test;
    SplitRegime regime = SplitRegime::random_80_10_10;

    const std::vector<Triple>& part(const std::string& name) const;
};

// Tab-separated relation<TAB>x<TAB>y, order-preserving; duplicate triples
// are rejected (all pairs must be distinct).
std::vector<Triple> load_triples(const std::string& path);

void write_triples(const std::vector<Triple>& triples, const std::string& path);

// Keeps exactly the triples whose y is a single vocabulary token.
std::vector<Triple> filter_single_token_y(const std::vector<Triple>& triples,
                                          const Vocabulary& vocab);

// Seeded shuffle into floor(0.8n) / floor(0.1n) / remainder.
Split split_random(const std::vector<Triple>& triples, uint64_t seed);

// Partitions distinct y values into three groups targeting 80-10-10 triple
// mass; performed independently per relation. The three parts share no y.
Split split_distinct_y(const std::vector<Triple>& triples, uint64_t seed);

void write_split(const Split& split, uint64_t seed, const std::string& dir);
Split load_split(const std::string& dir);

}  // namespace softmix
