#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <fstream>

#include "helpers.hpp"
#include "softmix/checkpoint.hpp"
#include "softmix/lm.hpp"
#include "softmix/rng.hpp"

using namespace softmix;
using testutil::make_lm;
using testutil::make_vocab;

namespace {

LMConfig small_config() {
    LMConfig c;
    c.d = 16;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 32;
    c.max_len = 16;
    c.seed = 42;
    return c;
}

// Marks every position of a plain token sequence as a prompt slot so that
// perturbations and slot gradients apply to it. Test-only device.
EmbeddingSequence as_all_slots(EmbeddingSequence seq) {
    int s = 0;
    for (size_t i = 0; i < seq.origin.size(); ++i) {
        if (static_cast<int>(i) == seq.blank_y) continue;
        seq.origin[i] = {PositionOrigin::prompt_slot, s++};
    }
    return seq;
}

double nll_at_blank(const MaskedLM& lm, const EmbeddingSequence& seq,
                    const LayerPerturbations* p, int gold) {
    Tensor probs = predict_blank(lm, seq, p);
    return -std::log(probs.v[static_cast<size_t>(gold)]);
}

}  // namespace

TEST_CASE("embed_tokens looks up embedding rows") {
    MaskedLM lm = make_lm(20, small_config());

    SUBCASE("single mask id yields the mask row and sets the blank") {
        EmbeddingSequence seq = embed_tokens(lm, {lm.vocab.mask_id});
        CHECK(seq.length() == 1);
        CHECK(seq.blank_y == 0);
        for (int j = 0; j < lm.config.d; ++j)
            CHECK(seq.vectors.at(0, j) == lm.embedding.at(lm.vocab.mask_id, j));
    }
    SUBCASE("repeated ids carry identical vectors") {
        EmbeddingSequence seq = embed_tokens(lm, {5, 5});
        CHECK(seq.blank_y == -1);
        for (int j = 0; j < lm.config.d; ++j)
            CHECK(seq.vectors.at(0, j) == seq.vectors.at(1, j));
    }
    SUBCASE("random id list matches direct row indexing") {
        Rng rng(3);
        std::vector<int> ids = testutil::random_ids(8, lm.config.vocab_size, rng);
        EmbeddingSequence seq = embed_tokens(lm, ids);
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < lm.config.d; ++j)
                CHECK(seq.vectors.at(static_cast<int>(i), j) == lm.embedding.at(ids[i], j));
    }
    SUBCASE("out-of-range id is an input error") {
        CHECK_THROWS_AS(embed_tokens(lm, {lm.config.vocab_size}), InputError);
        CHECK_THROWS_AS(embed_tokens(lm, {-1}), InputError);
    }
    SUBCASE("only the first mask becomes the blank") {
        EmbeddingSequence seq = embed_tokens(lm, {lm.vocab.mask_id, 4, lm.vocab.mask_id});
        CHECK(seq.blank_y == 0);
    }
}

TEST_CASE("forward with zero perturbations equals forward without") {
    MaskedLM lm = make_lm(20, small_config());
    Rng rng(5);
    EmbeddingSequence seq = embed_tokens(lm, {3, 7, lm.vocab.mask_id, 9});
    seq = as_all_slots(seq);
    LayerPerturbations zeros =
        LayerPerturbations::zeros(lm.config.layers + 1, seq.slot_count(), lm.config.d);
    ForwardResult with = forward(lm, seq, &zeros);
    ForwardResult without = forward(lm, seq, nullptr);
    REQUIRE(with.log_probs.same_shape(without.log_probs));
    for (size_t i = 0; i < with.log_probs.v.size(); ++i)
        CHECK(with.log_probs.v[i] == without.log_probs.v[i]);
    for (size_t l = 0; l < with.hidden.size(); ++l)
        for (size_t i = 0; i < with.hidden[l].v.size(); ++i)
            CHECK(with.hidden[l].v[i] == without.hidden[l].v[i]);
}

TEST_CASE("forward emits normalized distributions at every position") {
    MaskedLM lm = make_lm(33, small_config());
    Rng rng(6);
    std::vector<int> ids = testutil::random_ids(6, lm.config.vocab_size, rng);
    ForwardResult res = forward(lm, embed_tokens(lm, ids));
    for (int i = 0; i < res.log_probs.rows; ++i) {
        double s = 0;
        for (int j = 0; j < res.log_probs.cols; ++j) s += std::exp(res.log_probs.at(i, j));
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK(static_cast<int>(res.hidden.size()) == lm.config.layers + 1);
}

TEST_CASE("perturbation shape mismatch is an input error") {
    MaskedLM lm = make_lm(20, small_config());
    EmbeddingSequence seq = as_all_slots(embed_tokens(lm, {3, lm.vocab.mask_id}));
    LayerPerturbations bad = LayerPerturbations::zeros(lm.config.layers, seq.slot_count(), lm.config.d);
    CHECK_THROWS_AS(forward(lm, seq, &bad), InputError);
    LayerPerturbations bad2 =
        LayerPerturbations::zeros(lm.config.layers + 1, seq.slot_count() + 1, lm.config.d);
    CHECK_THROWS_AS(forward(lm, seq, &bad2), InputError);
}

TEST_CASE("predict_blank on a zero-initialized untied head is near uniform") {
    LMConfig cfg = small_config();
    cfg.tied_output = false;
    MaskedLM lm = make_lm(25, cfg);
    Tensor probs = predict_blank(lm, embed_tokens(lm, {4, lm.vocab.mask_id, 8}));
    double mx = 0, mn = 1;
    for (double p : probs.v) {
        mx = std::max(mx, p);
        mn = std::min(mn, p);
    }
    CHECK(mx / mn < 1.05);
}

TEST_CASE("predict_blank is pure: identical calls give bitwise-identical outputs") {
    MaskedLM lm = make_lm(30, small_config());
    EmbeddingSequence seq = embed_tokens(lm, {3, 9, lm.vocab.mask_id});
    Tensor a = predict_blank(lm, seq);
    Tensor b = predict_blank(lm, seq);
    CHECK(std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0);
}

TEST_CASE("predict_blank requires a blank") {
    MaskedLM lm = make_lm(20, small_config());
    CHECK_THROWS_AS(predict_blank(lm, embed_tokens(lm, {3, 4})), InputError);
}

TEST_CASE("prompt gradients match central finite differences") {
    MaskedLM lm = make_lm(24, small_config());
    Rng rng(9);
    EmbeddingSequence seq = embed_tokens(lm, {3, 6, lm.vocab.mask_id, 12, 15});
    seq = as_all_slots(seq);
    int n_slots = seq.slot_count();
    LayerPerturbations perturb =
        LayerPerturbations::zeros(lm.config.layers + 1, n_slots, lm.config.d);
    for (Tensor& t : perturb.deltas)
        for (double& x : t.v) x = rng.gauss(0.0, 0.05);
    int gold = 7;

    PromptGradients g = prompt_gradients(lm, seq, &perturb, gold);
    REQUIRE(g.slot_vectors.rows == n_slots);
    REQUIRE(static_cast<int>(g.deltas.size()) == lm.config.layers + 1);

    std::vector<int> slot_pos = seq.slot_positions();
    int checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        bool is_delta = rng.uniform01() < 0.6;
        double eps = 1e-5;
        double analytic, fd;
        if (is_delta) {
            int l = rng.uniform_int(0, lm.config.layers);
            int s = rng.uniform_int(0, n_slots - 1);
            int c = rng.uniform_int(0, lm.config.d - 1);
            analytic = g.deltas[static_cast<size_t>(l)].at(s, c);
            LayerPerturbations p2 = perturb;
            p2.deltas[static_cast<size_t>(l)].at(s, c) += eps;
            double fp = nll_at_blank(lm, seq, &p2, gold);
            p2.deltas[static_cast<size_t>(l)].at(s, c) -= 2 * eps;
            double fm = nll_at_blank(lm, seq, &p2, gold);
            fd = (fp - fm) / (2 * eps);
        } else {
            int s = rng.uniform_int(0, n_slots - 1);
            int c = rng.uniform_int(0, lm.config.d - 1);
            analytic = g.slot_vectors.at(s, c);
            EmbeddingSequence s2 = seq;
            s2.vectors.at(slot_pos[static_cast<size_t>(s)], c) += eps;
            double fp = nll_at_blank(lm, s2, &perturb, gold);
            s2.vectors.at(slot_pos[static_cast<size_t>(s)], c) -= 2 * eps;
            double fm = nll_at_blank(lm, s2, &perturb, gold);
            fd = (fp - fm) / (2 * eps);
        }
        if (std::abs(analytic) < 1e-8 && std::abs(fd) < 1e-8) continue;
        CHECK(std::abs(analytic - fd) <= 1e-4 * std::max({std::abs(analytic), std::abs(fd)}));
        ++checked;
    }
    CHECK(checked > 50);
}

TEST_CASE("slot gradient equals layer-0 delta gradient") {
    MaskedLM lm = make_lm(20, small_config());
    EmbeddingSequence seq = as_all_slots(embed_tokens(lm, {3, 6, lm.vocab.mask_id}));
    PromptGradients g = prompt_gradients(lm, seq, nullptr, 4);
    REQUIRE(g.slot_vectors.same_shape(g.deltas[0]));
    for (size_t i = 0; i < g.slot_vectors.v.size(); ++i)
        CHECK(g.slot_vectors.v[i] == doctest::Approx(g.deltas[0].v[i]).epsilon(1e-12));
}

TEST_CASE("gradient is tiny when the gold token already has probability near 1") {
    LMConfig cfg = small_config();
    cfg.tied_output = false;
    MaskedLM lm = make_lm(20, cfg);
    int gold = 5;
    lm.out_b.v[static_cast<size_t>(gold)] = 50.0;  // force p(gold) ~ 1
    EmbeddingSequence seq = as_all_slots(embed_tokens(lm, {3, lm.vocab.mask_id}));
    Tensor probs = predict_blank(lm, seq);
    REQUIRE(probs.v[static_cast<size_t>(gold)] > 0.999999);
    PromptGradients g = prompt_gradients(lm, seq, nullptr, gold);
    CHECK(g.slot_vectors.norm() < 1e-6);
    for (const Tensor& d : g.deltas) CHECK(d.norm() < 1e-6);
}

TEST_CASE("gradients cover only prompt slots, not x positions") {
    MaskedLM lm = make_lm(20, small_config());
    // two slots, one x token, one mask
    EmbeddingSequence seq = embed_tokens(lm, {3, 6, 9, lm.vocab.mask_id});
    seq.origin[0] = {PositionOrigin::prompt_slot, 0};
    seq.origin[1] = {PositionOrigin::prompt_slot, 1};
    // position 2 stays an x token
    PromptGradients g = prompt_gradients(lm, seq, nullptr, 4);
    CHECK(g.slot_vectors.rows == 2);
    for (const Tensor& d : g.deltas) CHECK(d.rows == 2);
}

TEST_CASE("fit_embedding_gaussian") {
    SUBCASE("identical rows give zero std") {
        MaskedLM lm = make_lm(10, small_config());
        for (int i = 0; i < lm.embedding.rows; ++i)
            for (int j = 0; j < lm.embedding.cols; ++j) lm.embedding.at(i, j) = 3.25;
        auto [mean, std] = fit_embedding_gaussian(lm);
        for (double m : mean.v) CHECK(m == doctest::Approx(3.25));
        for (double s : std.v) CHECK(s == 0.0);
    }
    SUBCASE("two-row midpoint") {
        LMConfig cfg = small_config();
        Vocabulary v = Vocabulary::build({});  // just [MASK] and [PAD]
        cfg.vocab_size = v.size();
        MaskedLM lm = init_masked_lm(cfg, std::move(v));
        for (int j = 0; j < lm.config.d; ++j) {
            lm.embedding.at(0, j) = 0.0;
            lm.embedding.at(1, j) = 2.0;
        }
        auto [mean, std] = fit_embedding_gaussian(lm);
        for (double m : mean.v) CHECK(m == doctest::Approx(1.0));
    }
    SUBCASE("random table matches an independent two-pass oracle") {
        MaskedLM lm = make_lm(40, small_config());
        auto [mean, std] = fit_embedding_gaussian(lm);
        int V = lm.embedding.rows;
        for (int j = 0; j < lm.config.d; ++j) {
            double s = 0;
            for (int i = 0; i < V; ++i) s += lm.embedding.at(i, j);
            double mu = s / V;
            double var = 0;
            for (int i = 0; i < V; ++i) {
                double d = lm.embedding.at(i, j) - mu;
                var += d * d;
            }
            CHECK(std::abs(mean.v[static_cast<size_t>(j)] - mu) < 1e-10);
            CHECK(std::abs(std.v[static_cast<size_t>(j)] - std::sqrt(var / V)) < 1e-10);
        }
    }
}

TEST_CASE("pretrain memorizes a one-sentence corpus") {
    Vocabulary vocab = Vocabulary::build({"ada", "plays", "the", "oud", "."});
    LMConfig cfg;
    cfg.d = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_len = 8;
    cfg.vocab_size = vocab.size();
    cfg.seed = 11;
    CorpusSentence s;
    s.tokens = {"ada", "plays", "the", "oud", "."};
    s.fact_token_index = 3;
    PretrainConfig pcfg;
    pcfg.max_epochs = 300;
    pcfg.batch_size = 1;
    pcfg.dev_fraction = 0.0;
    MaskedLM lm = pretrain(cfg, vocab, {s}, pcfg);

    std::vector<int> ids = {vocab.id("ada"), vocab.id("plays"), vocab.id("the"), vocab.mask_id,
                            vocab.id(".")};
    Tensor probs = predict_blank(lm, embed_tokens(lm, ids));
    int best = 0;
    for (int j = 1; j < probs.cols; ++j)
        if (probs.v[static_cast<size_t>(j)] > probs.v[static_cast<size_t>(best)]) best = j;
    CHECK(best == vocab.id("oud"));
}

TEST_CASE("pretrain is deterministic: same seed gives bit-identical parameters") {
    Vocabulary vocab = make_vocab(12);
    LMConfig cfg = small_config();
    cfg.vocab_size = vocab.size();
    std::vector<CorpusSentence> corpus;
    Rng rng(21);
    for (int i = 0; i < 20; ++i) {
        CorpusSentence s;
        for (int k = 0; k < 5; ++k)
            s.tokens.push_back(vocab.token(2 + static_cast<int>(rng.uniform_index(12))));
        s.fact_token_index = 2;
        corpus.push_back(s);
    }
    PretrainConfig pcfg;
    pcfg.max_epochs = 3;
    pcfg.dev_fraction = 0.2;
    MaskedLM a = pretrain(cfg, vocab, corpus, pcfg);
    MaskedLM b = pretrain(cfg, vocab, corpus, pcfg);
    CHECK(a.param_checksum() == b.param_checksum());
}

TEST_CASE("pretrain rejects unknown tokens and empty corpora") {
    Vocabulary vocab = make_vocab(5);
    LMConfig cfg = small_config();
    cfg.vocab_size = vocab.size();
    CHECK_THROWS_AS(pretrain(cfg, vocab, {}, PretrainConfig{}), InputError);
    CorpusSentence s;
    s.tokens = {"nope"};
    s.fact_token_index = 0;
    CHECK_THROWS_AS(pretrain(cfg, vocab, {s}, PretrainConfig{}), InputError);
}

TEST_CASE("lm checkpoint round-trips through manifest and blob") {
    MaskedLM lm = make_lm(18, small_config());
    std::string stem = "test_ckpt_lm";
    save_lm_checkpoint(lm, stem);
    MaskedLM loaded = load_lm_checkpoint(stem);
    CHECK(loaded.config.d == lm.config.d);
    CHECK(loaded.vocab.tokens == lm.vocab.tokens);
    // float32 storage: loaded parameters match to float precision
    for (size_t i = 0; i < lm.embedding.v.size(); ++i)
        CHECK(loaded.embedding.v[i] == doctest::Approx(lm.embedding.v[i]).epsilon(1e-6));
    // and a reload of a saved-loaded model is bit-exact
    save_lm_checkpoint(loaded, stem + "_2");
    MaskedLM again = load_lm_checkpoint(stem + "_2");
    CHECK(again.param_checksum() == loaded.param_checksum());
}

TEST_CASE("checkpoint detects corruption") {
    MaskedLM lm = make_lm(10, small_config());
    std::string stem = "test_ckpt_corrupt";
    save_lm_checkpoint(lm, stem);
    {
        std::fstream f(stem + ".blob", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(10);
        char junk = 0x7f;
        f.write(&junk, 1);
    }
    CHECK_THROWS_AS(load_lm_checkpoint(stem), FormatError);
}
