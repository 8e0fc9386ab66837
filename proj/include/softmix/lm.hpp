#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "softmix/autodiff.hpp"
#include "softmix/corpus.hpp"
#include "softmix/optim.hpp"
#include "softmix/tensor.hpp"
#include "softmix/vocab.hpp"

namespace softmix {

struct LMConfig {
    int d = 32;
    int layers = 2;
    int heads = 4;
    int ffn_dim = 128;
    int vocab_size = 0;
    int max_len = 32;
    uint64_t seed = 1;
    bool tied_output = true;

    void validate() const;
};

struct EncoderLayerParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
};

// A small bidirectional masked transformer. Parameters are plain tensors;
// all forward/gradient work goes through an ad::Tape, so the same code path
// serves pretraining (parameters trainable) and prompt tuning (frozen).
struct MaskedLM {
    LMConfig config;
    Vocabulary vocab;
    Tensor embedding;       // V x d
    Tensor pos_embedding;   // max_len x d
    std::vector<EncoderLayerParams> layers;
    Tensor lnf_g, lnf_b;
    Tensor out_w;           // d x V, only when untied
    Tensor out_b;           // 1 x V

    std::vector<std::pair<std::string, Tensor*>> parameters();
    std::vector<std::pair<std::string, const Tensor*>> parameters() const;
    uint64_t param_checksum() const;
    void validate_finite() const;
};

MaskedLM init_masked_lm(const LMConfig& config, Vocabulary vocab);

enum class PositionOrigin { prompt_slot, x_token, y_mask };

struct SequencePosition {
    PositionOrigin origin = PositionOrigin::x_token;
    int slot_index = -1;  // valid when origin == prompt_slot
};

struct EmbeddingSequence {
    Tensor vectors;  // length x d
    int blank_y = -1;
    std::vector<SequencePosition> origin;

    int length() const { return vectors.rows; }
    bool has_blank() const { return blank_y >= 0; }
    int slot_count() const;
    // Sequence positions of prompt slots, indexed by slot number.
    std::vector<int> slot_positions() const;
};

// Additive offsets for the hidden state of each prompt slot at every layer
// boundary: deltas[l] is (slot_count x d) for l = 0..L.
struct LayerPerturbations {
    std::vector<Tensor> deltas;

    static LayerPerturbations zeros(int layers_plus_one, int n_slots, int d);
    bool is_zero() const;
};

struct ForwardResult {
    Tensor log_probs;            // length x V
    std::vector<Tensor> hidden;  // L+1 entries, each length x d
};

EmbeddingSequence embed_tokens(const MaskedLM& lm, const std::vector<int>& ids);

ForwardResult forward(const MaskedLM& lm, const EmbeddingSequence& seq,
                      const LayerPerturbations* perturb = nullptr);

// Probability row over the vocabulary at the blank position.
Tensor predict_blank(const MaskedLM& lm, const EmbeddingSequence& seq,
                     const LayerPerturbations* perturb = nullptr);

struct PromptGradients {
    Tensor slot_vectors;         // slot_count x d
    std::vector<Tensor> deltas;  // L+1, each slot_count x d
};

// d(-log p(gold at blank)) / d{slot vectors, all deltas}. The LM itself is
// frozen: x-token positions and model parameters get no gradient.
PromptGradients prompt_gradients(const MaskedLM& lm, const EmbeddingSequence& seq,
                                 const LayerPerturbations* perturb, int gold_id);

// Per-dimension mean and std over all embedding rows (population statistics).
std::pair<Tensor, Tensor> fit_embedding_gaussian(const MaskedLM& lm);

struct PretrainConfig {
    int batch_size = 64;
    int max_epochs = 30;
    int patience = 4;
    double dev_fraction = 0.05;
    AdamConfig adam;
};

struct PretrainReport {
    double init_dev_ce = 0;
    double final_dev_ce = 0;
    int best_epoch = 0;
    int epochs_run = 0;
};

// Masked-token pretraining on fact-bearing sentences; the fact token is
// the only masked position. Deterministic for a fixed config.seed.
MaskedLM pretrain(const LMConfig& config, const Vocabulary& vocab,
                  const std::vector<CorpusSentence>& corpus, const PretrainConfig& pcfg,
                  PretrainReport* report = nullptr,
                  const std::function<void(int, double, double)>& on_epoch = {});

// ----- graph building blocks, shared with the mixture trainer -----

struct LMVars {
    struct Layer {
        ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
        ad::Var ln1g, ln1b, ln2g, ln2b;
        ad::Var w1, b1, w2, b2;
    };
    ad::Var embedding, pos;
    std::vector<Layer> layers;
    ad::Var lnf_g, lnf_b, out_w, out_b;
    bool tied = true;
    std::vector<ad::Var> all;  // aligned with MaskedLM::parameters() order
};

LMVars register_lm(ad::Tape& tape, const MaskedLM& lm, bool trainable);

struct EncodeOut {
    std::vector<ad::Var> hidden;  // L+1
    ad::Var final_normed;
};

// input is (length x d). deltas, when present, holds L+1 Vars of
// (slot_count x d) applied at slot_positions.
EncodeOut encode(ad::Tape& tape, const LMVars& vars, const LMConfig& config, ad::Var input,
                 const std::vector<ad::Var>* deltas, const std::vector<int>& slot_positions);

// rows x V logits for already-selected final states.
ad::Var vocab_logits(ad::Tape& tape, const LMVars& vars, ad::Var states);

constexpr double kLayerNormEps = 1e-5;

}  // namespace softmix
