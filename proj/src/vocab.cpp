#include "softmix/vocab.hpp"

#include <sstream>

namespace softmix {

Vocabulary Vocabulary::build(const std::vector<std::string>& words) {
    Vocabulary v;
    v.tokens.reserve(words.size() + 2);
    auto push = [&](const std::string& w) {
        if (v.token_to_id.count(w)) throw InputError("duplicate vocabulary token: " + w);
        v.token_to_id.emplace(w, static_cast<int>(v.tokens.size()));
        v.tokens.push_back(w);
    };
    push(kMaskToken);
    push(kPadToken);
    v.mask_id = 0;
    v.pad_id = 1;
    for (const auto& w : words) {
        if (w.empty()) throw InputError("empty vocabulary token");
        push(w);
    }
    return v;
}

std::vector<std::string> split_tokens(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace softmix
