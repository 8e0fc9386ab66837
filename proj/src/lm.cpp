#include "softmix/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "softmix/rng.hpp"

namespace softmix {

void LMConfig::validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0) throw InputError("LMConfig: d must be divisible by heads");
    if (layers < 1) throw InputError("LMConfig: layers must be >= 1");
    if (ffn_dim <= 0) throw InputError("LMConfig: ffn_dim must be positive");
    if (vocab_size <= 0) throw InputError("LMConfig: vocab_size must be positive");
    if (max_len <= 0) throw InputError("LMConfig: max_len must be positive");
}

std::vector<std::pair<std::string, Tensor*>> MaskedLM::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("embedding", &embedding);
    out.emplace_back("pos_embedding", &pos_embedding);
    for (size_t l = 0; l < layers.size(); ++l) {
        EncoderLayerParams& p = layers[l];
        std::string pre = "layer" + std::to_string(l) + ".";
        out.emplace_back(pre + "wq", &p.wq);
        out.emplace_back(pre + "bq", &p.bq);
        out.emplace_back(pre + "wk", &p.wk);
        out.emplace_back(pre + "bk", &p.bk);
        out.emplace_back(pre + "wv", &p.wv);
        out.emplace_back(pre + "bv", &p.bv);
        out.emplace_back(pre + "wo", &p.wo);
        out.emplace_back(pre + "bo", &p.bo);
        out.emplace_back(pre + "ln1_g", &p.ln1_g);
        out.emplace_back(pre + "ln1_b", &p.ln1_b);
        out.emplace_back(pre + "ln2_g", &p.ln2_g);
        out.emplace_back(pre + "ln2_b", &p.ln2_b);
        out.emplace_back(pre + "w1", &p.w1);
        out.emplace_back(pre + "b1", &p.b1);
        out.emplace_back(pre + "w2", &p.w2);
        out.emplace_back(pre + "b2", &p.b2);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    if (!config.tied_output) out.emplace_back("out_w", &out_w);
    out.emplace_back("out_b", &out_b);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> MaskedLM::parameters() const {
    auto named = const_cast<MaskedLM*>(this)->parameters();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(named.size());
    for (auto& [name, t] : named) out.emplace_back(name, t);
    return out;
}

uint64_t MaskedLM::param_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto& [name, t] : parameters()) {
        h = fnv1a64(name, h);
        h = fnv1a64(t->v.data(), t->v.size() * sizeof(double), h);
    }
    return h;
}

void MaskedLM::validate_finite() const {
    for (auto& [name, t] : parameters())
        if (!t->all_finite()) throw InternalError("non-finite LM parameter: " + name);
}

MaskedLM init_masked_lm(const LMConfig& config, Vocabulary vocab) {
    config.validate();
    if (vocab.size() != config.vocab_size)
        throw InputError("init_masked_lm: vocab size does not match config");
    MaskedLM lm;
    lm.config = config;
    lm.vocab = std::move(vocab);
    Rng rng(config.seed ^ 0x5eedf00d);
    auto fill_gauss = [&](Tensor& t, double std) {
        for (double& x : t.v) x = rng.gauss(0.0, std);
    };
    auto glorot = [&](Tensor& t) {
        double std = std::sqrt(2.0 / (t.rows + t.cols));
        fill_gauss(t, std);
    };
    int d = config.d, V = config.vocab_size, f = config.ffn_dim;
    lm.embedding = Tensor(V, d);
    fill_gauss(lm.embedding, 0.1);
    lm.pos_embedding = Tensor(config.max_len, d);
    fill_gauss(lm.pos_embedding, 0.1);
    lm.layers.resize(static_cast<size_t>(config.layers));
    for (auto& p : lm.layers) {
        p.wq = Tensor(d, d); glorot(p.wq); p.bq = Tensor(1, d);
        p.wk = Tensor(d, d); glorot(p.wk); p.bk = Tensor(1, d);
        p.wv = Tensor(d, d); glorot(p.wv); p.bv = Tensor(1, d);
        p.wo = Tensor(d, d); glorot(p.wo); p.bo = Tensor(1, d);
        p.ln1_g = Tensor(1, d); p.ln1_g.fill(1.0); p.ln1_b = Tensor(1, d);
        p.ln2_g = Tensor(1, d); p.ln2_g.fill(1.0); p.ln2_b = Tensor(1, d);
        p.w1 = Tensor(d, f); glorot(p.w1); p.b1 = Tensor(1, f);
        p.w2 = Tensor(f, d); glorot(p.w2); p.b2 = Tensor(1, d);
    }
    lm.lnf_g = Tensor(1, d); lm.lnf_g.fill(1.0);
    lm.lnf_b = Tensor(1, d);
    if (!config.tied_output) lm.out_w = Tensor(d, V);  // zero: uniform head at init
    lm.out_b = Tensor(1, V);
    return lm;
}

int EmbeddingSequence::slot_count() const {
    int n = 0;
    for (const auto& p : origin)
        if (p.origin == PositionOrigin::prompt_slot) ++n;
    return n;
}

std::vector<int> EmbeddingSequence::slot_positions() const {
    int n = slot_count();
    std::vector<int> pos(static_cast<size_t>(n), -1);
    for (size_t i = 0; i < origin.size(); ++i) {
        if (origin[i].origin != PositionOrigin::prompt_slot) continue;
        int s = origin[i].slot_index;
        if (s < 0 || s >= n || pos[static_cast<size_t>(s)] != -1)
            throw InternalError("EmbeddingSequence: bad slot indexing");
        pos[static_cast<size_t>(s)] = static_cast<int>(i);
    }
    return pos;
}

LayerPerturbations LayerPerturbations::zeros(int layers_plus_one, int n_slots, int d) {
    LayerPerturbations p;
    p.deltas.reserve(static_cast<size_t>(layers_plus_one));
    for (int i = 0; i < layers_plus_one; ++i) p.deltas.emplace_back(n_slots, d);
    return p;
}

bool LayerPerturbations::is_zero() const {
    for (const Tensor& t : deltas)
        for (double x : t.v)
            if (x != 0.0) return false;
    return true;
}

EmbeddingSequence embed_tokens(const MaskedLM& lm, const std::vector<int>& ids) {
    if (ids.empty()) throw InputError("embed_tokens: empty id list");
    EmbeddingSequence seq;
    seq.vectors = Tensor(static_cast<int>(ids.size()), lm.config.d);
    seq.origin.resize(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= lm.config.vocab_size) throw InputError("embed_tokens: id out of range");
        std::copy(lm.embedding.row(id), lm.embedding.row(id) + lm.config.d,
                  seq.vectors.row(static_cast<int>(i)));
        if (id == lm.vocab.mask_id && seq.blank_y < 0) {
            seq.blank_y = static_cast<int>(i);
            seq.origin[i] = {PositionOrigin::y_mask, -1};
        } else {
            seq.origin[i] = {PositionOrigin::x_token, -1};
        }
    }
    return seq;
}

LMVars register_lm(ad::Tape& tape, const MaskedLM& lm, bool trainable) {
    LMVars vars;
    vars.tied = lm.config.tied_output;
    auto named = lm.parameters();
    std::vector<ad::Var> vs;
    vs.reserve(named.size());
    for (auto& [name, t] : named) vs.push_back(tape.leaf_ref(t, trainable));
    vars.all = vs;
    size_t k = 0;
    vars.embedding = vs[k++];
    vars.pos = vs[k++];
    vars.layers.resize(lm.layers.size());
    for (auto& lv : vars.layers) {
        lv.wq = vs[k++]; lv.bq = vs[k++];
        lv.wk = vs[k++]; lv.bk = vs[k++];
        lv.wv = vs[k++]; lv.bv = vs[k++];
        lv.wo = vs[k++]; lv.bo = vs[k++];
        lv.ln1g = vs[k++]; lv.ln1b = vs[k++];
        lv.ln2g = vs[k++]; lv.ln2b = vs[k++];
        lv.w1 = vs[k++]; lv.b1 = vs[k++];
        lv.w2 = vs[k++]; lv.b2 = vs[k++];
    }
    vars.lnf_g = vs[k++];
    vars.lnf_b = vs[k++];
    if (!lm.config.tied_output) vars.out_w = vs[k++];
    vars.out_b = vs[k++];
    return vars;
}

EncodeOut encode(ad::Tape& tape, const LMVars& vars, const LMConfig& config, ad::Var input,
                 const std::vector<ad::Var>* deltas, const std::vector<int>& slot_positions) {
    const int n = tape.value(input).rows;
    if (n > config.max_len) throw InputError("encode: sequence longer than max_len");
    if (deltas && static_cast<int>(deltas->size()) != config.layers + 1)
        throw InputError("encode: perturbation layer count mismatch");

    EncodeOut out;
    ad::Var h = input;
    if (deltas && !slot_positions.empty()) h = tape.add_rows_at(h, (*deltas)[0], slot_positions);
    out.hidden.push_back(h);

    std::vector<int> iota(static_cast<size_t>(n));
    std::iota(iota.begin(), iota.end(), 0);
    ad::Var x = tape.add(h, tape.select_rows(vars.pos, iota));

    const int dh = config.d / config.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < config.layers; ++l) {
        const LMVars::Layer& p = vars.layers[static_cast<size_t>(l)];
        ad::Var a = tape.layer_norm_rows(x, p.ln1g, p.ln1b, kLayerNormEps);
        ad::Var q = tape.add_rowvec(tape.matmul(a, p.wq), p.bq);
        ad::Var kk = tape.add_rowvec(tape.matmul(a, p.wk), p.bk);
        ad::Var v = tape.add_rowvec(tape.matmul(a, p.wv), p.bv);
        std::vector<ad::Var> heads;
        heads.reserve(static_cast<size_t>(config.heads));
        for (int hh = 0; hh < config.heads; ++hh) {
            ad::Var qh = tape.slice_cols(q, hh * dh, dh);
            ad::Var kh = tape.slice_cols(kk, hh * dh, dh);
            ad::Var vh = tape.slice_cols(v, hh * dh, dh);
            ad::Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh);
            ad::Var attn = tape.softmax_rows(scores);
            heads.push_back(tape.matmul(attn, vh));
        }
        ad::Var ctx = config.heads == 1 ? heads[0] : tape.concat_cols(heads);
        x = tape.add(x, tape.add_rowvec(tape.matmul(ctx, p.wo), p.bo));
        ad::Var b = tape.layer_norm_rows(x, p.ln2g, p.ln2b, kLayerNormEps);
        ad::Var f = tape.gelu(tape.add_rowvec(tape.matmul(b, p.w1), p.b1));
        x = tape.add(x, tape.add_rowvec(tape.matmul(f, p.w2), p.b2));
        if (deltas && !slot_positions.empty())
            x = tape.add_rows_at(x, (*deltas)[static_cast<size_t>(l) + 1], slot_positions);
        out.hidden.push_back(x);
    }
    out.final_normed = tape.layer_norm_rows(x, vars.lnf_g, vars.lnf_b, kLayerNormEps);
    return out;
}

ad::Var vocab_logits(ad::Tape& tape, const LMVars& vars, ad::Var states) {
    ad::Var logits = vars.tied ? tape.matmul_nt(states, vars.embedding)
                               : tape.matmul(states, vars.out_w);
    return tape.add_rowvec(logits, vars.out_b);
}

namespace {

void check_perturb_shape(const MaskedLM& lm, const EmbeddingSequence& seq,
                         const LayerPerturbations* perturb) {
    if (!perturb) return;
    int n_slots = seq.slot_count();
    if (static_cast<int>(perturb->deltas.size()) != lm.config.layers + 1)
        throw InputError("perturbation has wrong layer count");
    for (const Tensor& t : perturb->deltas)
        if (t.rows != n_slots || t.cols != lm.config.d)
            throw InputError("perturbation slot shape mismatch");
}

// Splits the sequence input into a constant base (slot rows zeroed) plus a
// slot matrix, so slot gradients are separable from x/y rows.
struct SeqGraph {
    ad::Var input;
    ad::Var slots;  // invalid when the sequence has no prompt slots
    std::vector<int> slot_positions;
    std::vector<ad::Var> delta_vars;
};

SeqGraph build_sequence_input(ad::Tape& tape, const MaskedLM& lm, const EmbeddingSequence& seq,
                              const LayerPerturbations* perturb, bool slots_need_grad,
                              bool deltas_need_grad) {
    SeqGraph g;
    g.slot_positions = seq.slot_positions();
    int n_slots = static_cast<int>(g.slot_positions.size());
    if (n_slots == 0) {
        g.input = tape.constant(seq.vectors);
    } else {
        Tensor base = seq.vectors;
        Tensor slot_rows(n_slots, lm.config.d);
        for (int s = 0; s < n_slots; ++s) {
            int pos = g.slot_positions[static_cast<size_t>(s)];
            std::copy(base.row(pos), base.row(pos) + base.cols, slot_rows.row(s));
            std::fill(base.row(pos), base.row(pos) + base.cols, 0.0);
        }
        g.slots = tape.leaf(std::move(slot_rows), slots_need_grad);
        g.input = tape.add_rows_at(tape.constant(std::move(base)), g.slots, g.slot_positions);
    }
    LayerPerturbations zero;
    const LayerPerturbations* src = perturb;
    if (!src && deltas_need_grad) {
        zero = LayerPerturbations::zeros(lm.config.layers + 1, n_slots, lm.config.d);
        src = &zero;
    }
    if (src) {
        g.delta_vars.reserve(src->deltas.size());
        for (const Tensor& t : src->deltas) g.delta_vars.push_back(tape.leaf(t, deltas_need_grad));
    }
    return g;
}

}  // namespace

ForwardResult forward(const MaskedLM& lm, const EmbeddingSequence& seq,
                      const LayerPerturbations* perturb) {
    if (seq.length() == 0) throw InputError("forward: empty sequence");
    if (seq.length() > lm.config.max_len) throw InputError("forward: sequence longer than max_len");
    check_perturb_shape(lm, seq, perturb);

    ad::Tape tape;
    LMVars vars = register_lm(tape, lm, false);
    SeqGraph g = build_sequence_input(tape, lm, seq, perturb, false, false);
    EncodeOut enc = encode(tape, vars, lm.config, g.input,
                           g.delta_vars.empty() ? nullptr : &g.delta_vars, g.slot_positions);
    ad::Var logp = tape.log_softmax_rows(vocab_logits(tape, vars, enc.final_normed));

    ForwardResult res;
    res.log_probs = tape.value(logp);
    if (!res.log_probs.all_finite()) throw InternalError("forward: non-finite output");
    res.hidden.reserve(enc.hidden.size());
    for (ad::Var h : enc.hidden) res.hidden.push_back(tape.value(h));
    return res;
}

Tensor predict_blank(const MaskedLM& lm, const EmbeddingSequence& seq,
                     const LayerPerturbations* perturb) {
    if (!seq.has_blank()) throw InputError("predict_blank: sequence has no blank");
    ForwardResult res = forward(lm, seq, perturb);
    Tensor out(1, lm.config.vocab_size);
    const double* lp = res.log_probs.row(seq.blank_y);
    for (int j = 0; j < lm.config.vocab_size; ++j) out.v[static_cast<size_t>(j)] = std::exp(lp[j]);
    return out;
}

PromptGradients prompt_gradients(const MaskedLM& lm, const EmbeddingSequence& seq,
                                 const LayerPerturbations* perturb, int gold_id) {
    if (gold_id < 0 || gold_id >= lm.config.vocab_size)
        throw InputError("prompt_gradients: gold id out of range");
    if (!seq.has_blank()) throw InputError("prompt_gradients: sequence has no blank");
    check_perturb_shape(lm, seq, perturb);

    ad::Tape tape;
    LMVars vars = register_lm(tape, lm, false);
    SeqGraph g = build_sequence_input(tape, lm, seq, perturb, true, true);
    EncodeOut enc = encode(tape, vars, lm.config, g.input, &g.delta_vars, g.slot_positions);
    ad::Var sel = tape.select_rows(enc.final_normed, {seq.blank_y});
    ad::Var logp = tape.log_softmax_rows(vocab_logits(tape, vars, sel));
    ad::Var loss = tape.scale(tape.pick(logp, 0, gold_id), -1.0);
    tape.backward(loss);

    int n_slots = static_cast<int>(g.slot_positions.size());
    PromptGradients out;
    out.slot_vectors = Tensor(n_slots, lm.config.d);
    if (g.slots.valid() && !tape.grad(g.slots).empty()) out.slot_vectors = tape.grad(g.slots);
    out.deltas.reserve(g.delta_vars.size());
    for (ad::Var dv : g.delta_vars) {
        if (!tape.grad(dv).empty()) out.deltas.push_back(tape.grad(dv));
        else out.deltas.emplace_back(n_slots, lm.config.d);
    }
    return out;
}

std::pair<Tensor, Tensor> fit_embedding_gaussian(const MaskedLM& lm) {
    int V = lm.embedding.rows, d = lm.embedding.cols;
    Tensor mean(1, d), std(1, d);
    for (int j = 0; j < d; ++j) {
        double s = 0;
        for (int i = 0; i < V; ++i) s += lm.embedding.at(i, j);
        mean.v[static_cast<size_t>(j)] = s / V;
    }
    for (int j = 0; j < d; ++j) {
        double s = 0;
        for (int i = 0; i < V; ++i) {
            double dft = lm.embedding.at(i, j) - mean.v[static_cast<size_t>(j)];
            s += dft * dft;
        }
        std.v[static_cast<size_t>(j)] = std::sqrt(s / V);
    }
    return {mean, std};
}

// ---------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------

namespace {

struct MaskedExample {
    std::vector<int> input_ids;  // fact token replaced by [MASK]
    int mask_pos = 0;
    int gold_id = 0;
};

double example_loss_and_grads(MaskedLM& lm, const MaskedExample& ex,
                              std::vector<Tensor>* grad_accum) {
    ad::Tape tape;
    LMVars vars = register_lm(tape, lm, grad_accum != nullptr);
    ad::Var input = tape.select_rows(vars.embedding, ex.input_ids);
    EncodeOut enc = encode(tape, vars, lm.config, input, nullptr, {});
    ad::Var sel = tape.select_rows(enc.final_normed, {ex.mask_pos});
    ad::Var logp = tape.log_softmax_rows(vocab_logits(tape, vars, sel));
    ad::Var loss = tape.scale(tape.pick(logp, 0, ex.gold_id), -1.0);
    double value = tape.value(loss).item();
    if (grad_accum) {
        tape.backward(loss);
        for (size_t i = 0; i < vars.all.size(); ++i) {
            const Tensor& g = tape.grad(vars.all[i]);
            if (!g.empty()) (*grad_accum)[i].add_(g);
        }
    }
    return value;
}

}  // namespace

MaskedLM pretrain(const LMConfig& config, const Vocabulary& vocab,
                  const std::vector<CorpusSentence>& corpus, const PretrainConfig& pcfg,
                  PretrainReport* report, const std::function<void(int, double, double)>& on_epoch) {
    if (corpus.empty()) throw InputError("pretrain: empty corpus");
    MaskedLM lm = init_masked_lm(config, vocab);

    std::vector<MaskedExample> examples;
    examples.reserve(corpus.size());
    for (const CorpusSentence& s : corpus) {
        if (static_cast<int>(s.tokens.size()) > config.max_len)
            throw InputError("pretrain: sentence longer than max_len");
        std::vector<int> ids;
        ids.reserve(s.tokens.size());
        for (const std::string& t : s.tokens) ids.push_back(lm.vocab.id(t));  // throws on unknown
        if (!s.carries_fact()) continue;
        if (s.fact_token_index >= static_cast<int>(ids.size()))
            throw InputError("pretrain: fact index out of range");
        MaskedExample ex;
        ex.gold_id = ids[static_cast<size_t>(s.fact_token_index)];
        ex.mask_pos = s.fact_token_index;
        ids[static_cast<size_t>(s.fact_token_index)] = lm.vocab.mask_id;
        ex.input_ids = std::move(ids);
        examples.push_back(std::move(ex));
    }
    if (examples.empty()) throw InputError("pretrain: no fact-bearing sentences");

    Rng rng(config.seed ^ 0x9c0ffee1);
    std::vector<size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    size_t n_dev = static_cast<size_t>(pcfg.dev_fraction * static_cast<double>(examples.size()));
    n_dev = std::min(n_dev, examples.size() > 1 ? examples.size() - 1 : size_t{0});
    std::vector<size_t> dev_idx(order.end() - static_cast<long>(n_dev), order.end());
    order.resize(order.size() - n_dev);

    auto dev_ce = [&]() {
        if (dev_idx.empty()) return 0.0;
        double s = 0;
        for (size_t i : dev_idx) s += example_loss_and_grads(lm, examples[i], nullptr);
        return s / static_cast<double>(dev_idx.size());
    };

    auto named = lm.parameters();
    std::vector<Tensor*> ptrs;
    for (auto& [name, t] : named) ptrs.push_back(t);
    Adam adam(ptrs, pcfg.adam);
    std::vector<Tensor> grads;
    grads.reserve(ptrs.size());
    for (Tensor* p : ptrs) grads.emplace_back(p->rows, p->cols);

    double init_ce = dev_ce();
    EarlyStopper stopper(pcfg.patience);
    std::vector<Tensor> best_params;
    auto snapshot = [&]() {
        best_params.clear();
        for (Tensor* p : ptrs) best_params.push_back(*p);
    };
    snapshot();
    bool track_dev = !dev_idx.empty();
    int epochs_run = 0;

    for (int epoch = 1; epoch <= pcfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double train_loss = 0;
        size_t done = 0;
        while (done < order.size()) {
            size_t bn = std::min(static_cast<size_t>(pcfg.batch_size), order.size() - done);
            for (Tensor& g : grads) g.fill(0.0);
            for (size_t k = 0; k < bn; ++k)
                train_loss += example_loss_and_grads(lm, examples[order[done + k]], &grads);
            double inv = 1.0 / static_cast<double>(bn);
            for (Tensor& g : grads) g.scale_(inv);
            adam.step(grads);
            done += bn;
        }
        train_loss /= static_cast<double>(order.size());
        if (!std::isfinite(train_loss)) throw NumericalError("pretrain: non-finite training loss");
        epochs_run = epoch;
        double dc = track_dev ? dev_ce() : train_loss;
        if (on_epoch) on_epoch(epoch, train_loss, dc);
        bool stop = stopper.record(epoch, dc);
        if (stopper.improved_at(epoch)) snapshot();
        if (stop) break;
    }
    for (size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = best_params[i];

    if (report) {
        report->init_dev_ce = init_ce;
        report->final_dev_ce = stopper.best;
        report->best_epoch = stopper.best_epoch;
        report->epochs_run = epochs_run;
    }
    return lm;
}

}  // namespace softmix
