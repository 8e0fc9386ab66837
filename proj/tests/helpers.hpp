#pragma once

#include <string>
#include <vector>

#include "softmix/lm.hpp"
#include "softmix/rng.hpp"

namespace testutil {

// A vocabulary of n generic words w0..w{n-1} plus the two specials.
inline softmix::Vocabulary make_vocab(int n_words) {
    std::vector<std::string> words;
    words.reserve(static_cast<size_t>(n_words));
    for (int i = 0; i < n_words; ++i) words.push_back("w" + std::to_string(i));
    return softmix::Vocabulary::build(words);
}

inline softmix::MaskedLM make_lm(int n_words, softmix::LMConfig cfg = {}) {
    softmix::Vocabulary vocab = make_vocab(n_words);
    cfg.vocab_size = vocab.size();
    return softmix::init_masked_lm(cfg, std::move(vocab));
}

inline std::vector<int> random_ids(int n, int vocab_size, softmix::Rng& rng) {
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        ids.push_back(2 + static_cast<int>(rng.uniform_index(static_cast<uint64_t>(vocab_size - 2))));
    return ids;
}

}  // namespace testutil
