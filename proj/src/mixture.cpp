#include "softmix/mixture.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "softmix/checkpoint.hpp"
#include "softmix/metrics.hpp"
#include "softmix/rng.hpp"

namespace softmix {

std::string weighting_mode_name(WeightingMode m) {
    return m == WeightingMode::static_weights ? "static" : "data_dependent";
}

WeightingMode weighting_mode_from_name(const std::string& name) {
    if (name == "static") return WeightingMode::static_weights;
    if (name == "data_dependent") return WeightingMode::data_dependent;
    throw InputError("unknown weighting mode: " + name);
}

std::string tune_mode_name(TuneMode m) {
    switch (m) {
        case TuneMode::weights_only: return "weights_only";
        case TuneMode::vectors_only: return "vectors_only";
        case TuneMode::both: return "both";
        case TuneMode::deep_all_layers: return "deep_all_layers";
    }
    throw InternalError("bad tune mode");
}

TuneMode tune_mode_from_name(const std::string& name) {
    if (name == "weights_only") return TuneMode::weights_only;
    if (name == "vectors_only") return TuneMode::vectors_only;
    if (name == "both") return TuneMode::both;
    if (name == "deep_all_layers") return TuneMode::deep_all_layers;
    throw InputError("unknown tune mode: " + name);
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "em"; }

OptimizerKind optimizer_from_name(const std::string& name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "em") return OptimizerKind::em;
    throw InputError("unknown optimizer: " + name);
}

std::vector<double> MixtureModel::static_weights() const {
    int k = prompt_count();
    std::vector<double> w(static_cast<size_t>(k));
    double mx = -1e300;
    for (int t = 0; t < k; ++t) mx = std::max(mx, mixture_logits.v[static_cast<size_t>(t)]);
    double z = 0;
    for (int t = 0; t < k; ++t) {
        w[static_cast<size_t>(t)] = std::exp(mixture_logits.v[static_cast<size_t>(t)] - mx);
        z += w[static_cast<size_t>(t)];
    }
    for (double& x : w) x /= z;
    return w;
}

uint64_t MixtureModel::vector_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const SoftPrompt& p : prompt_set.prompts) {
        h = fnv1a64(p.slots.v.data(), p.slots.v.size() * sizeof(double), h);
        for (const Tensor& d : p.deep) h = fnv1a64(d.v.data(), d.v.size() * sizeof(double), h);
    }
    return h;
}

uint64_t MixtureModel::logits_checksum() const {
    return fnv1a64(mixture_logits.v.data(), mixture_logits.v.size() * sizeof(double));
}

MixtureModel make_mixture(PromptSet prompt_set, WeightingMode mode) {
    if (prompt_set.prompts.empty()) throw InputError("make_mixture: empty prompt set");
    MixtureModel m;
    m.mixture_logits = Tensor(1, static_cast<int>(prompt_set.prompts.size()));
    m.log_temperature = Tensor::scalar(0.0);
    m.weighting_mode = mode;
    m.prompt_set = std::move(prompt_set);
    return m;
}

TuningExample to_example(const Triple& t, const Vocabulary& vocab) {
    TuningExample ex;
    ex.relation = t.relation;
    ex.x_text = t.x;
    ex.y_text = t.y;
    for (const std::string& tok : split_tokens(t.x)) {
        if (!vocab.contains(tok)) throw InputError("x token not in vocabulary: " + tok);
        ex.x_ids.push_back(vocab.token_to_id.at(tok));
    }
    if (ex.x_ids.empty()) throw InputError("empty x in triple");
    std::vector<std::string> ytoks = split_tokens(t.y);
    if (ytoks.size() != 1 || !vocab.contains(ytoks[0]))
        throw InputError("y is not a single vocabulary token: " + t.y);
    ex.y_id = vocab.token_to_id.at(ytoks[0]);
    return ex;
}

std::vector<TuningExample> to_examples(const std::vector<Triple>& ts, const Vocabulary& vocab) {
    std::vector<TuningExample> out;
    out.reserve(ts.size());
    for (const Triple& t : ts) out.push_back(to_example(t, vocab));
    return out;
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw InputError("TrainConfig: batch_size must be >= 1");
    if (max_epochs < 1) throw InputError("TrainConfig: max_epochs must be >= 1");
    if (patience < 1 || patience > max_epochs)
        throw InputError("TrainConfig: need 1 <= patience <= max_epochs");
}

namespace {

LayerPerturbations deep_perturbations(const SoftPrompt& p) {
    LayerPerturbations lp;
    lp.deltas = p.deep;
    return lp;
}

// ---- graph construction -------------------------------------------------

struct PromptVars {
    ad::Var slots;
    std::vector<ad::Var> deltas;
};

struct MixtureVars {
    ad::Var logits, log_temp;
    std::vector<PromptVars> prompts;
};

struct GradFlags {
    bool logits = false, log_temp = false, slots = false, deltas = false;
};

MixtureVars register_mixture(ad::Tape& tape, const MixtureModel& m, GradFlags f) {
    MixtureVars mv;
    mv.logits = tape.leaf_ref(&m.mixture_logits, f.logits);
    mv.log_temp = tape.leaf_ref(&m.log_temperature, f.log_temp);
    mv.prompts.reserve(m.prompt_set.prompts.size());
    for (const SoftPrompt& p : m.prompt_set.prompts) {
        PromptVars pv;
        pv.slots = tape.leaf_ref(&p.slots, f.slots);
        pv.deltas.reserve(p.deep.size());
        for (const Tensor& d : p.deep) pv.deltas.push_back(tape.leaf_ref(&d, f.deltas));
        mv.prompts.push_back(std::move(pv));
    }
    return mv;
}

// Blank-position probability row for one prompt, with slot rows routed
// through the prompt's tunable leaves.
ad::Var prompt_blank_probs(ad::Tape& tape, const LMVars& lmv, const MaskedLM& lm,
                           const SoftPrompt& prompt, const PromptVars& pv,
                           const std::vector<int>& x_ids, bool mask_x,
                           std::vector<int>* x_positions_out, int* blank_out) {
    EmbeddingSequence seq = instantiate(prompt, x_ids, lm);
    std::vector<int> slot_pos = seq.slot_positions();
    std::vector<int> x_pos;
    for (size_t i = 0; i < seq.origin.size(); ++i)
        if (seq.origin[i].origin == PositionOrigin::x_token) x_pos.push_back(static_cast<int>(i));
    Tensor base = seq.vectors;
    if (mask_x) {
        const double* mask_row = lm.embedding.row(lm.vocab.mask_id);
        for (int pos : x_pos) std::copy(mask_row, mask_row + lm.config.d, base.row(pos));
    }
    for (int pos : slot_pos) std::fill(base.row(pos), base.row(pos) + base.cols, 0.0);
    ad::Var input = tape.constant(std::move(base));
    if (!slot_pos.empty()) input = tape.add_rows_at(input, pv.slots, slot_pos);
    EncodeOut enc = encode(tape, lmv, lm.config, input, &pv.deltas, slot_pos);
    if (x_positions_out) *x_positions_out = x_pos;
    if (blank_out) *blank_out = seq.blank_y;
    return enc.final_normed;
}

// -log of the ensemble gold probability for one example.
ad::Var example_nll(ad::Tape& tape, const LMVars& lmv, const MixtureVars& mv,
                    const MixtureModel& model, const MaskedLM& lm, const TuningExample& ex) {
    int K = model.prompt_count();
    std::vector<ad::Var> gold_picks, xliks;
    gold_picks.reserve(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) {
        const SoftPrompt& prompt = model.prompt_set.prompts[static_cast<size_t>(t)];
        const PromptVars& pv = mv.prompts[static_cast<size_t>(t)];
        int blank = -1;
        ad::Var final_normed =
            prompt_blank_probs(tape, lmv, lm, prompt, pv, ex.x_ids, false, nullptr, &blank);
        ad::Var sel = tape.select_rows(final_normed, {blank});
        ad::Var probs = tape.softmax_rows(vocab_logits(tape, lmv, sel));
        gold_picks.push_back(tape.pick(probs, 0, ex.y_id));

        if (model.weighting_mode == WeightingMode::data_dependent) {
            std::vector<int> x_pos;
            ad::Var fn2 = prompt_blank_probs(tape, lmv, lm, prompt, pv, ex.x_ids, true, &x_pos, nullptr);
            ad::Var selx = tape.select_rows(fn2, x_pos);
            ad::Var logp = tape.log_softmax_rows(vocab_logits(tape, lmv, selx));
            std::vector<ad::Var> picks;
            picks.reserve(ex.x_ids.size());
            for (size_t j = 0; j < ex.x_ids.size(); ++j)
                picks.push_back(tape.pick(logp, static_cast<int>(j), ex.x_ids[j]));
            xliks.push_back(tape.sum(tape.concat_cols(picks)));
        }
    }

    ad::Var w;
    if (model.weighting_mode == WeightingMode::static_weights) {
        w = tape.softmax_rows(mv.logits);
    } else {
        ad::Var log_prior = tape.log_softmax_rows(mv.logits);
        ad::Var xrow = tape.concat_cols(xliks);
        ad::Var inv_t = tape.expv(tape.scale(mv.log_temp, -1.0));
        w = tape.softmax_rows(tape.add(log_prior, tape.mul_scalar(xrow, inv_t)));
    }
    ad::Var picks_row = tape.concat_cols(gold_picks);
    ad::Var p_gold = tape.sum(tape.mul(w, picks_row));
    return tape.scale(tape.logv(p_gold), -1.0);
}

// Cached variant: component gold probabilities and log x-likelihoods are
// frozen, only the weights (logits, log T) stay live. Exact while no slot
// vector moves, i.e. in weights_only training.
ad::Var cached_nll(ad::Tape& tape, const MixtureVars& mv, const MixtureModel& model,
                   const Tensor& comp_gold, const Tensor& log_xlik) {
    ad::Var w;
    if (model.weighting_mode == WeightingMode::static_weights) {
        w = tape.softmax_rows(mv.logits);
    } else {
        ad::Var log_prior = tape.log_softmax_rows(mv.logits);
        ad::Var inv_t = tape.expv(tape.scale(mv.log_temp, -1.0));
        w = tape.softmax_rows(tape.add(log_prior, tape.mul_scalar(tape.constant(log_xlik), inv_t)));
    }
    ad::Var p_gold = tape.sum(tape.mul(w, tape.constant(comp_gold)));
    return tape.scale(tape.logv(p_gold), -1.0);
}

double prompt_gold_prob(const SoftPrompt& prompt, const std::vector<int>& x_ids, int gold,
                        const MaskedLM& lm) {
    LayerPerturbations lp = deep_perturbations(prompt);
    Tensor probs = predict_blank(lm, instantiate(prompt, x_ids, lm), &lp);
    return probs.v[static_cast<size_t>(gold)];
}

}  // namespace

double estimate_x_likelihood(const SoftPrompt& prompt, const std::vector<int>& x_ids,
                             const MaskedLM& lm) {
    EmbeddingSequence seq = instantiate(prompt, x_ids, lm);
    std::vector<int> x_pos;
    for (size_t i = 0; i < seq.origin.size(); ++i)
        if (seq.origin[i].origin == PositionOrigin::x_token) x_pos.push_back(static_cast<int>(i));
    const double* mask_row = lm.embedding.row(lm.vocab.mask_id);
    for (int pos : x_pos) std::copy(mask_row, mask_row + lm.config.d, seq.vectors.row(pos));
    LayerPerturbations lp = deep_perturbations(prompt);
    ForwardResult res = forward(lm, seq, &lp);
    double log_prod = 0;
    for (size_t j = 0; j < x_pos.size(); ++j)
        log_prod += res.log_probs.at(x_pos[j], x_ids[j]);
    return std::exp(log_prod);
}

std::vector<double> data_dependent_weights(const MixtureModel& model,
                                           const std::vector<int>& x_ids, const MaskedLM& lm) {
    if (model.weighting_mode != WeightingMode::data_dependent)
        throw InputError("data_dependent_weights: model uses static weighting");
    std::vector<double> prior = model.static_weights();
    double inv_t = std::exp(-model.log_temperature.item());
    int K = model.prompt_count();
    std::vector<double> score(static_cast<size_t>(K));
    for (int t = 0; t < K; ++t) {
        double xlik =
            estimate_x_likelihood(model.prompt_set.prompts[static_cast<size_t>(t)], x_ids, lm);
        score[static_cast<size_t>(t)] = std::log(prior[static_cast<size_t>(t)]) + inv_t * std::log(xlik);
    }
    double mx = *std::max_element(score.begin(), score.end());
    double z = 0;
    for (double& s : score) {
        s = std::exp(s - mx);
        z += s;
    }
    for (double& s : score) s /= z;
    return score;
}

Tensor predict(const MixtureModel& model, const std::vector<int>& x_ids, const MaskedLM& lm) {
    if (model.prompt_set.prompts.empty()) throw InputError("predict: empty prompt set");
    std::vector<double> w = model.weighting_mode == WeightingMode::data_dependent
                                ? data_dependent_weights(model, x_ids, lm)
                                : model.static_weights();
    Tensor out(1, lm.config.vocab_size);
    for (int t = 0; t < model.prompt_count(); ++t) {
        const SoftPrompt& prompt = model.prompt_set.prompts[static_cast<size_t>(t)];
        LayerPerturbations lp = deep_perturbations(prompt);
        Tensor pt = predict_blank(lm, instantiate(prompt, x_ids, lm), &lp);
        double wt = w[static_cast<size_t>(t)];
        for (size_t j = 0; j < out.v.size(); ++j) out.v[j] += wt * pt.v[j];
    }
    return out;
}

double mixture_loss(const MixtureModel& model, std::span<const TuningExample> batch,
                    const MaskedLM& lm) {
    if (batch.empty()) throw InputError("mixture_loss: empty batch");
    double total = 0;
    for (const TuningExample& ex : batch) {
        if (ex.y_id < 0 || ex.y_id >= lm.config.vocab_size)
            throw InputError("mixture_loss: y not in vocabulary");
        Tensor p = predict(model, ex.x_ids, lm);
        total += -std::log(p.v[static_cast<size_t>(ex.y_id)]);
    }
    return total;
}

MixtureGradients mixture_gradients(const MixtureModel& model,
                                   std::span<const TuningExample> batch, const MaskedLM& lm) {
    MixtureGradients out;
    out.logits = Tensor(1, model.prompt_count());
    out.log_temperature = Tensor(1, 1);
    for (const SoftPrompt& p : model.prompt_set.prompts) {
        out.slots.emplace_back(p.slots.rows, p.slots.cols);
        std::vector<Tensor> ds;
        for (const Tensor& d : p.deep) ds.emplace_back(d.rows, d.cols);
        out.deltas.push_back(std::move(ds));
    }
    GradFlags flags{true, true, true, true};
    for (const TuningExample& ex : batch) {
        ad::Tape tape;
        LMVars lmv = register_lm(tape, lm, false);
        MixtureVars mv = register_mixture(tape, model, flags);
        ad::Var nll = example_nll(tape, lmv, mv, model, lm, ex);
        out.loss += tape.value(nll).item();
        tape.backward(nll);
        if (!tape.grad(mv.logits).empty()) out.logits.add_(tape.grad(mv.logits));
        if (!tape.grad(mv.log_temp).empty()) out.log_temperature.add_(tape.grad(mv.log_temp));
        for (int t = 0; t < model.prompt_count(); ++t) {
            const PromptVars& pv = mv.prompts[static_cast<size_t>(t)];
            if (!tape.grad(pv.slots).empty()) out.slots[static_cast<size_t>(t)].add_(tape.grad(pv.slots));
            for (size_t l = 0; l < pv.deltas.size(); ++l)
                if (!tape.grad(pv.deltas[l]).empty())
                    out.deltas[static_cast<size_t>(t)][l].add_(tape.grad(pv.deltas[l]));
        }
    }
    return out;
}

std::vector<double> em_posterior(const std::vector<double>& prior,
                                 const std::vector<double>& component_gold_probs) {
    if (prior.size() != component_gold_probs.size() || prior.empty())
        throw InputError("em_posterior: size mismatch");
    std::vector<double> q(prior.size());
    double z = 0;
    for (size_t t = 0; t < prior.size(); ++t) {
        q[t] = prior[t] * component_gold_probs[t];
        z += q[t];
    }
    if (z <= 0) throw NumericalError("em_posterior: all components assign zero probability");
    for (double& x : q) x /= z;
    return q;
}

void em_step(MixtureModel& model, std::span<const TuningExample> data, const MaskedLM& lm,
             TuneMode mode, Adam* slot_adam) {
    if (model.weighting_mode != WeightingMode::static_weights)
        throw InputError("em_step: EM requires static mixture weighting");
    if (mode == TuneMode::deep_all_layers)
        throw InputError("em_step: EM tunes mixture weights and slot vectors only");
    if (data.empty()) throw InputError("em_step: empty training set");
    int K = model.prompt_count();

    std::vector<double> prior = model.static_weights();
    std::vector<std::vector<double>> posteriors;
    posteriors.reserve(data.size());
    for (const TuningExample& ex : data) {
        std::vector<double> comp(static_cast<size_t>(K));
        for (int t = 0; t < K; ++t)
            comp[static_cast<size_t>(t)] =
                prompt_gold_prob(model.prompt_set.prompts[static_cast<size_t>(t)], ex.x_ids, ex.y_id, lm);
        posteriors.push_back(em_posterior(prior, comp));
    }

    if (mode != TuneMode::vectors_only) {
        for (int t = 0; t < K; ++t) {
            double mean = 0;
            for (const auto& q : posteriors) mean += q[static_cast<size_t>(t)];
            mean /= static_cast<double>(posteriors.size());
            model.mixture_logits.v[static_cast<size_t>(t)] = std::log(mean);
        }
    }

    if (mode != TuneMode::weights_only) {
        // One gradient step on the expected complete-data loss, posteriors fixed.
        std::vector<Tensor> grads;
        std::vector<Tensor*> slot_ptrs;
        for (SoftPrompt& p : model.prompt_set.prompts) {
            grads.emplace_back(p.slots.rows, p.slots.cols);
            slot_ptrs.push_back(&p.slots);
        }
        for (size_t i = 0; i < data.size(); ++i) {
            const TuningExample& ex = data[i];
            for (int t = 0; t < K; ++t) {
                double q = posteriors[i][static_cast<size_t>(t)];
                if (q == 0) continue;
                const SoftPrompt& prompt = model.prompt_set.prompts[static_cast<size_t>(t)];
                LayerPerturbations lp = deep_perturbations(prompt);
                PromptGradients pg =
                    prompt_gradients(lm, instantiate(prompt, ex.x_ids, lm), &lp, ex.y_id);
                Tensor& acc = grads[static_cast<size_t>(t)];
                for (size_t k = 0; k < acc.v.size(); ++k)
                    acc.v[k] += q * pg.slot_vectors.v[k];
            }
        }
        double inv = 1.0 / static_cast<double>(data.size());
        for (Tensor& g : grads) g.scale_(inv);
        if (slot_adam) {
            slot_adam->step(grads);
        } else {
            Adam local(slot_ptrs, AdamConfig{});
            local.step(grads);
        }
    }
}

namespace {

std::vector<Tensor> snapshot_mixture(const MixtureModel& m) {
    std::vector<Tensor> out;
    out.push_back(m.mixture_logits);
    out.push_back(m.log_temperature);
    for (const SoftPrompt& p : m.prompt_set.prompts) {
        out.push_back(p.slots);
        for (const Tensor& d : p.deep) out.push_back(d);
    }
    return out;
}

void restore_mixture(MixtureModel& m, const std::vector<Tensor>& snap) {
    size_t k = 0;
    m.mixture_logits = snap[k++];
    m.log_temperature = snap[k++];
    for (SoftPrompt& p : m.prompt_set.prompts) {
        p.slots = snap[k++];
        for (Tensor& d : p.deep) d = snap[k++];
    }
}

struct DevCache {
    // full component rows per dev example (K x V), for the cached fast path
    std::vector<Tensor> comp_rows;
    std::vector<Tensor> log_xlik;
};

}  // namespace

TrainReport train(MixtureModel& model, const Split& split, const MaskedLM& lm,
                  const TrainConfig& config) {
    auto t0 = std::chrono::steady_clock::now();
    config.validate();
    if (model.prompt_set.prompts.empty()) throw InputError("train: empty prompt set");
    if (split.train.empty() || split.dev.empty())
        throw InputError("train: train and dev parts must be nonempty");
    std::vector<TuningExample> train_exs = to_examples(split.train, lm.vocab);
    std::vector<TuningExample> dev_exs = to_examples(split.dev, lm.vocab);

    const bool data_dep = model.weighting_mode == WeightingMode::data_dependent;
    const bool tune_logits = config.tune_mode != TuneMode::vectors_only;
    const bool tune_slots = config.tune_mode != TuneMode::weights_only;
    const bool tune_deep = config.tune_mode == TuneMode::deep_all_layers;
    const bool tune_logt = data_dep;

    if (config.optimizer == OptimizerKind::em) {
        if (data_dep) throw InputError("train: EM requires static weighting");
        if (tune_deep) throw InputError("train: EM does not tune deep perturbations");
    }

    const int K = model.prompt_count();
    const int L = lm.config.layers;

    // Tuned tensors in a fixed order; gradient accumulators mirror it.
    std::vector<Tensor*> tuned;
    if (tune_logits) tuned.push_back(&model.mixture_logits);
    if (tune_logt) tuned.push_back(&model.log_temperature);
    std::vector<Tensor*> slot_ptrs;
    for (SoftPrompt& p : model.prompt_set.prompts) {
        if (tune_slots) tuned.push_back(&p.slots);
        slot_ptrs.push_back(&p.slots);
        if (tune_deep)
            for (int l = 1; l <= L; ++l) tuned.push_back(&p.deep[static_cast<size_t>(l)]);
    }
    if (tuned.empty()) throw InternalError("train: nothing to tune");
    Adam adam(tuned, config.adam);
    Adam em_adam(slot_ptrs, config.adam);

    // Fast path: with frozen vectors the per-example component probabilities
    // and x-likelihoods never change, so compute them once.
    const bool cacheable =
        config.optimizer == OptimizerKind::adam && config.tune_mode == TuneMode::weights_only;
    std::vector<Tensor> train_comp, train_xlik;
    DevCache dev_cache;
    if (cacheable) {
        auto fill = [&](const TuningExample& ex, Tensor* comp_gold, Tensor* comp_row, Tensor* xlik) {
            Tensor row(K, lm.config.vocab_size);
            for (int t = 0; t < K; ++t) {
                const SoftPrompt& p = model.prompt_set.prompts[static_cast<size_t>(t)];
                LayerPerturbations lp = deep_perturbations(p);
                Tensor pt = predict_blank(lm, instantiate(p, ex.x_ids, lm), &lp);
                std::copy(pt.v.begin(), pt.v.end(), row.row(t));
            }
            if (comp_gold) {
                *comp_gold = Tensor(1, K);
                for (int t = 0; t < K; ++t)
                    comp_gold->v[static_cast<size_t>(t)] = row.at(t, ex.y_id);
            }
            if (comp_row) *comp_row = row;
            if (xlik && data_dep) {
                *xlik = Tensor(1, K);
                for (int t = 0; t < K; ++t)
                    xlik->v[static_cast<size_t>(t)] = std::log(estimate_x_likelihood(
                        model.prompt_set.prompts[static_cast<size_t>(t)], ex.x_ids, lm));
            }
        };
        train_comp.resize(train_exs.size());
        train_xlik.resize(train_exs.size());
        for (size_t i = 0; i < train_exs.size(); ++i)
            fill(train_exs[i], &train_comp[i], nullptr, &train_xlik[i]);
        dev_cache.comp_rows.resize(dev_exs.size());
        dev_cache.log_xlik.resize(dev_exs.size());
        for (size_t i = 0; i < dev_exs.size(); ++i)
            fill(dev_exs[i], nullptr, &dev_cache.comp_rows[i], &dev_cache.log_xlik[i]);
    }

    auto cached_weights = [&](const Tensor& log_xlik) {
        std::vector<double> w = model.static_weights();
        if (!data_dep) return w;
        double inv_t = std::exp(-model.log_temperature.item());
        double mx = -1e300;
        for (int t = 0; t < K; ++t) {
            w[static_cast<size_t>(t)] =
                std::log(w[static_cast<size_t>(t)]) + inv_t * log_xlik.v[static_cast<size_t>(t)];
            mx = std::max(mx, w[static_cast<size_t>(t)]);
        }
        double z = 0;
        for (double& x : w) {
            x = std::exp(x - mx);
            z += x;
        }
        for (double& x : w) x /= z;
        return w;
    };

    // One dev pass: mean loss and P@1.
    auto eval_dev = [&](double* loss_out, double* p1_out) {
        double loss = 0;
        int hits = 0;
        for (size_t i = 0; i < dev_exs.size(); ++i) {
            Tensor p;
            if (cacheable) {
                std::vector<double> w = cached_weights(dev_cache.log_xlik[i]);
                p = Tensor(1, lm.config.vocab_size);
                for (int t = 0; t < K; ++t) {
                    const double* row = dev_cache.comp_rows[i].row(t);
                    for (size_t j = 0; j < p.v.size(); ++j) p.v[j] += w[static_cast<size_t>(t)] * row[j];
                }
            } else {
                p = predict(model, dev_exs[i].x_ids, lm);
            }
            loss += -std::log(p.v[static_cast<size_t>(dev_exs[i].y_id)]);
            if (rank_gold(p, dev_exs[i].y_id) == 1) ++hits;
        }
        *loss_out = loss / static_cast<double>(dev_exs.size());
        *p1_out = static_cast<double>(hits) / static_cast<double>(dev_exs.size());
    };

    Rng rng(config.seed ^ 0x7a17);
    std::vector<size_t> order(train_exs.size());
    std::iota(order.begin(), order.end(), 0);

    EarlyStopper stopper(config.patience);
    std::vector<Tensor> best = snapshot_mixture(model);
    TrainReport report;
    GradFlags flags{tune_logits, tune_logt, tune_slots, tune_slots || tune_deep};

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        double train_loss = 0;
        if (config.optimizer == OptimizerKind::adam) {
            rng.shuffle(order);
            size_t done = 0;
            while (done < order.size()) {
                size_t bn = std::min(static_cast<size_t>(config.batch_size), order.size() - done);
                std::vector<Tensor> grads;
                grads.reserve(tuned.size());
                for (Tensor* p : tuned) grads.emplace_back(p->rows, p->cols);
                for (size_t k = 0; k < bn; ++k) {
                    const TuningExample& ex = train_exs[order[done + k]];
                    ad::Tape tape;
                    MixtureVars mv;
                    ad::Var nll;
                    if (cacheable) {
                        mv = register_mixture(tape, model, flags);
                        nll = cached_nll(tape, mv, model, train_comp[order[done + k]],
                                         train_xlik[order[done + k]]);
                    } else {
                        LMVars lmv = register_lm(tape, lm, false);
                        mv = register_mixture(tape, model, flags);
                        nll = example_nll(tape, lmv, mv, model, lm, ex);
                    }
                    train_loss += tape.value(nll).item();
                    tape.backward(nll);
                    size_t gi = 0;
                    auto pull = [&](ad::Var v) {
                        const Tensor& g = tape.grad(v);
                        if (!g.empty()) grads[gi].add_(g);
                        ++gi;
                    };
                    if (tune_logits) pull(mv.logits);
                    if (tune_logt) pull(mv.log_temp);
                    for (int t = 0; t < K; ++t) {
                        if (tune_slots) pull(mv.prompts[static_cast<size_t>(t)].slots);
                        if (tune_deep)
                            for (int l = 1; l <= L; ++l)
                                pull(mv.prompts[static_cast<size_t>(t)].deltas[static_cast<size_t>(l)]);
                    }
                }
                double inv = 1.0 / static_cast<double>(bn);
                for (Tensor& g : grads) g.scale_(inv);
                adam.step(grads);
                done += bn;
            }
            train_loss /= static_cast<double>(train_exs.size());
        } else {
            em_step(model, train_exs, lm, config.tune_mode, &em_adam);
            train_loss = mixture_loss(model, train_exs, lm) / static_cast<double>(train_exs.size());
        }
        if (!std::isfinite(train_loss))
            throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch));

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = train_loss;
        eval_dev(&stats.dev_loss, &stats.dev_p1);
        if (!std::isfinite(stats.dev_loss))
            throw NumericalError("train: non-finite dev loss at epoch " + std::to_string(epoch));
        report.epochs.push_back(stats);
        bool stop = stopper.record(epoch, stats.dev_loss);
        if (stopper.improved_at(epoch)) best = snapshot_mixture(model);
        if (stop) break;
    }
    restore_mixture(model, best);
    report.best_epoch = stopper.best_epoch;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------

namespace {

std::string layout_string(const std::vector<int>& layout) {
    std::string out;
    for (size_t i = 0; i < layout.size(); ++i) {
        if (i) out += ' ';
        if (layout[i] == kLayoutX) out += 'x';
        else if (layout[i] == kLayoutY) out += 'y';
        else out += 's';
    }
    return out;
}

std::vector<int> layout_from_string(const std::string& s) {
    std::vector<int> layout;
    int slot = 0;
    for (const std::string& tok : split_tokens(s)) {
        if (tok == "x") layout.push_back(kLayoutX);
        else if (tok == "y") layout.push_back(kLayoutY);
        else if (tok == "s") layout.push_back(slot++);
        else throw FormatError("bad layout token: " + tok);
    }
    return layout;
}

}  // namespace

void save_mixture_checkpoint(const std::vector<MixtureModel>& models, const TrainConfig& config,
                             const std::string& stem,
                             const std::vector<std::pair<std::string, std::string>>& extra_meta) {
    std::vector<std::pair<std::string, std::string>> meta;
    meta.emplace_back("n_relations", std::to_string(models.size()));
    meta.emplace_back("train.batch_size", std::to_string(config.batch_size));
    meta.emplace_back("train.patience", std::to_string(config.patience));
    meta.emplace_back("train.max_epochs", std::to_string(config.max_epochs));
    meta.emplace_back("train.optimizer", optimizer_name(config.optimizer));
    meta.emplace_back("train.tune_mode", tune_mode_name(config.tune_mode));
    meta.emplace_back("train.seed", std::to_string(config.seed));
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (size_t r = 0; r < models.size(); ++r) {
        const MixtureModel& m = models[r];
        std::string pre = "relation." + std::to_string(r) + ".";
        meta.emplace_back(pre + "name", m.prompt_set.relation);
        meta.emplace_back(pre + "weighting", weighting_mode_name(m.weighting_mode));
        meta.emplace_back(pre + "n_prompts", std::to_string(m.prompt_count()));
        std::string rt = "r" + std::to_string(r) + ".";
        tensors.emplace_back(rt + "logits", &m.mixture_logits);
        tensors.emplace_back(rt + "log_temp", &m.log_temperature);
        for (int t = 0; t < m.prompt_count(); ++t) {
            const SoftPrompt& p = m.prompt_set.prompts[static_cast<size_t>(t)];
            std::string pp = pre + "prompt." + std::to_string(t) + ".";
            meta.emplace_back(pp + "layout", layout_string(p.layout));
            meta.emplace_back(pp + "source", prompt_source_name(p.source));
            meta.emplace_back(pp + "provenance", p.provenance);
            std::string ids;
            for (size_t k = 0; k < p.origin_token_ids.size(); ++k) {
                if (k) ids += ' ';
                ids += std::to_string(p.origin_token_ids[k]);
            }
            meta.emplace_back(pp + "origin_ids", ids.empty() ? "-" : ids);
            std::string pt = rt + "p" + std::to_string(t) + ".";
            tensors.emplace_back(pt + "slots", &p.slots);
            for (size_t l = 0; l < p.deep.size(); ++l)
                tensors.emplace_back(pt + "delta" + std::to_string(l), &p.deep[l]);
        }
    }
    for (const auto& kv : extra_meta) meta.push_back(kv);
    write_checkpoint(stem, "mixture", meta, tensors);
}

std::vector<MixtureModel> load_mixture_checkpoint(const std::string& stem, const MaskedLM& lm) {
    Checkpoint cp = read_checkpoint(stem);
    if (cp.kind != "mixture") throw FormatError("checkpoint is not a mixture checkpoint");
    size_t n_rel = 0;
    try {
        n_rel = std::stoul(cp.meta_value("n_relations"));
    } catch (const std::exception&) {
        throw FormatError("mixture checkpoint: bad n_relations");
    }
    std::vector<MixtureModel> models;
    for (size_t r = 0; r < n_rel; ++r) {
        std::string pre = "relation." + std::to_string(r) + ".";
        std::string rt = "r" + std::to_string(r) + ".";
        PromptSet ps;
        ps.relation = cp.meta_value(pre + "name");
        int n_prompts = 0;
        try {
            n_prompts = std::stoi(cp.meta_value(pre + "n_prompts"));
        } catch (const std::exception&) {
            throw FormatError("mixture checkpoint: bad prompt count");
        }
        for (int t = 0; t < n_prompts; ++t) {
            std::string pp = pre + "prompt." + std::to_string(t) + ".";
            std::string pt = rt + "p" + std::to_string(t) + ".";
            SoftPrompt p;
            p.layout = layout_from_string(cp.meta_value(pp + "layout"));
            p.source = prompt_source_from_name(cp.meta_value(pp + "source"));
            p.provenance = cp.meta_value(pp + "provenance");
            std::string ids = cp.meta_value(pp + "origin_ids");
            if (ids != "-") {
                std::istringstream is(ids);
                int id;
                while (is >> id) p.origin_token_ids.push_back(id);
            }
            p.slots = cp.tensor(pt + "slots");
            int n_slots = static_cast<int>(p.layout.size()) - 2;
            if (p.slots.rows != n_slots || p.slots.cols != lm.config.d)
                throw FormatError("mixture checkpoint: slot shape mismatch");
            for (int l = 0; l <= lm.config.layers; ++l) {
                Tensor d = cp.tensor(pt + "delta" + std::to_string(l));
                if (d.rows != n_slots || d.cols != lm.config.d)
                    throw FormatError("mixture checkpoint: delta shape mismatch");
                p.deep.push_back(std::move(d));
            }
            ps.prompts.push_back(std::move(p));
        }
        MixtureModel m = make_mixture(std::move(ps),
                                      weighting_mode_from_name(cp.meta_value(pre + "weighting")));
        Tensor logits = cp.tensor(rt + "logits");
        if (logits.cols != n_prompts) throw FormatError("mixture checkpoint: logits shape mismatch");
        m.mixture_logits = logits;
        m.log_temperature = cp.tensor(rt + "log_temp");
        models.push_back(std::move(m));
    }
    return models;
}

}  // namespace softmix
