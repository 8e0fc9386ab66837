#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "softmix/dataset.hpp"
#include "softmix/lm.hpp"
#include "softmix/optim.hpp"
#include "softmix/prompt.hpp"
#include "softmix/tensor.hpp"

namespace softmix {

enum class WeightingMode { static_weights, data_dependent };
enum class TuneMode { weights_only, vectors_only, both, deep_all_layers };
enum class OptimizerKind { adam, em };

std::string weighting_mode_name(WeightingMode m);
WeightingMode weighting_mode_from_name(const std::string& name);
std::string tune_mode_name(TuneMode m);
TuneMode tune_mode_from_name(const std::string& name);
std::string optimizer_name(OptimizerKind k);
OptimizerKind optimizer_from_name(const std::string& name);

// A relation's prompt set with softmax-parameterized mixture weights and a
// tunable log-temperature for data-dependent weighting.
struct MixtureModel {
    PromptSet prompt_set;
    Tensor mixture_logits;   // 1 x K
    Tensor log_temperature;  // 1 x 1
    WeightingMode weighting_mode = WeightingMode::static_weights;

    int prompt_count() const { return static_cast<int>(prompt_set.prompts.size()); }
    std::vector<double> static_weights() const;  // softmax of the logits
    uint64_t vector_checksum() const;            // slots and perturbations
    uint64_t logits_checksum() const;
};

// Uniform mixture (zero logits), T = 1.
MixtureModel make_mixture(PromptSet prompt_set,
                          WeightingMode mode = WeightingMode::static_weights);

struct TuningExample {
    std::vector<int> x_ids;
    int y_id = -1;
    std::string relation, x_text, y_text;
};

// Throws InputError when y is not a single vocabulary token or an x token
// is unknown.
TuningExample to_example(const Triple& t, const Vocabulary& vocab);
std::vector<TuningExample> to_examples(const std::vector<Triple>& ts, const Vocabulary& vocab);

struct TrainConfig {
    int batch_size = 64;
    int patience = 4;
    int max_epochs = 16;
    OptimizerKind optimizer = OptimizerKind::adam;
    TuneMode tune_mode = TuneMode::both;
    uint64_t seed = 1;
    AdamConfig adam;  // step size 1e-3, betas 0.9/0.999, eps 1e-8

    void validate() const;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;  // mean per-example negative log-likelihood
    double dev_loss = 0;
    double dev_p1 = 0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    int best_epoch = 0;
    double wall_seconds = 0;  // excluded from deterministic artifacts
};

// Ensemble distribution over the vocabulary for one query: the per-prompt
// weighted sum of blank-position distributions.
Tensor predict(const MixtureModel& model, const std::vector<int>& x_ids, const MaskedLM& lm);

// w_t(x) proportional to p(t|r) * p_hat(x|t)^(1/T), normalized over t.
std::vector<double> data_dependent_weights(const MixtureModel& model,
                                           const std::vector<int>& x_ids, const MaskedLM& lm);

// Product over x positions of the probability of the true x token when all
// x positions and the y blank are masked. In (0, 1].
double estimate_x_likelihood(const SoftPrompt& prompt, const std::vector<int>& x_ids,
                             const MaskedLM& lm);

// Sum over the batch of -log predict(model, x)[y] (natural log).
double mixture_loss(const MixtureModel& model, std::span<const TuningExample> batch,
                    const MaskedLM& lm);

// Gradients of the summed loss with respect to every parameter group,
// plus the loss value as computed by the differentiation graph.
struct MixtureGradients {
    double loss = 0;
    Tensor logits;
    Tensor log_temperature;
    std::vector<Tensor> slots;                // per prompt
    std::vector<std::vector<Tensor>> deltas;  // per prompt, layers 0..L
};

MixtureGradients mixture_gradients(const MixtureModel& model,
                                   std::span<const TuningExample> batch, const MaskedLM& lm);

// E-step posterior q(t | x, y) from a prior and per-prompt gold
// probabilities; zero-likelihood prompts get zero posterior.
std::vector<double> em_posterior(const std::vector<double>& prior,
                                 const std::vector<double>& component_gold_probs);

// One EM iteration: exact mixture-weight update to the average posterior,
// then (unless weights_only) one Adam step on slot vectors against the
// expected complete-data loss. Static weighting only.
void em_step(MixtureModel& model, std::span<const TuningExample> data, const MaskedLM& lm,
             TuneMode mode = TuneMode::both, Adam* slot_adam = nullptr);

// Trains the parameter groups selected by tune_mode (plus log_temperature
// under data-dependent weighting), early-stops on dev loss and restores the
// best epoch's parameters. The LM stays frozen.
TrainReport train(MixtureModel& model, const Split& split, const MaskedLM& lm,
                  const TrainConfig& config);

void save_mixture_checkpoint(const std::vector<MixtureModel>& models, const TrainConfig& config,
                             const std::string& stem,
                             const std::vector<std::pair<std::string, std::string>>& extra_meta = {});

std::vector<MixtureModel> load_mixture_checkpoint(const std::string& stem, const MaskedLM& lm);

}  // namespace softmix
