#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "softmix/common.hpp"

namespace softmix {

constexpr const char* kMaskToken = "[MASK]";
constexpr const char* kPadToken = "[PAD]";

struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> token_to_id;
    int mask_id = -1;
    int pad_id = -1;

    int size() const { return static_cast<int>(tokens.size()); }

    bool contains(const std::string& t) const { return token_to_id.count(t) > 0; }

    int id(const std::string& t) const {
        auto it = token_to_id.find(t);
        if (it == token_to_id.end()) throw InputError("unknown token: " + t);
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw InputError("token id out of range");
        return tokens[static_cast<size_t>(id)];
    }

    // Builds a vocabulary with [MASK] and [PAD] first, then `words` in the
    // given order. Duplicates among `words` are an input error.
    static Vocabulary build(const std::vector<std::string>& words);
};

// Whitespace tokenization of a line.
std::vector<std::string> split_tokens(const std::string& text);

}  // namespace softmix
