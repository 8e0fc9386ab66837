#pragma once

#include <string>
#include <vector>

namespace softmix {

// One pretraining sentence. fact_token_index marks the maskable token that
// carries the fact's answer; -1 marks a distractor sentence.
struct CorpusSentence {
    std::vector<std::string> tokens;
    int fact_token_index = -1;

    bool carries_fact() const { return fact_token_index >= 0; }
};

}  // namespace softmix
