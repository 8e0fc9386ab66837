#include "softmix/commands.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "softmix/checkpoint.hpp"
#include "softmix/dataset.hpp"
#include "softmix/metrics.hpp"
#include "softmix/mixture.hpp"
#include "softmix/world.hpp"

namespace softmix {

namespace fs = std::filesystem;

namespace {

std::string world_dir(const RunConfig& cfg) {
    return cfg.get("paths.world", cfg.out_dir() + "/world");
}
std::string lm_stem(const RunConfig& cfg) { return cfg.get("paths.lm", cfg.out_dir() + "/lm"); }
std::string split_dir(const RunConfig& cfg) {
    return cfg.get("paths.split", cfg.out_dir() + "/split");
}
std::string run_dir_for_mode(const RunConfig& cfg, const std::string& mode) {
    return cfg.out_dir() + "/runs/" + mode;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep))
        if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<RelationSpec> parse_relations_spec(const std::string& text) {
    // name:facts:y_domain[:templates[:probes]], comma separated
    std::vector<RelationSpec> specs;
    for (const std::string& item : split_list(text, ',')) {
        std::vector<std::string> parts = split_list(item, ':');
        if (parts.size() < 3 || parts.size() > 5)
            throw UsageError("bad relation spec '" + item +
                             "', expected name:facts:y_domain[:templates[:probes]]");
        RelationSpec spec;
        spec.name = parts[0];
        try {
            spec.n_facts = std::stoi(parts[1]);
            spec.y_domain_size = std::stoi(parts[2]);
            spec.n_templates = parts.size() >= 4 ? std::stoi(parts[3]) : 4;
            spec.n_probe_templates = parts.size() >= 5 ? std::stoi(parts[4]) : 0;
        } catch (const std::exception&) {
            throw UsageError("bad relation spec numbers in '" + item + "'");
        }
        specs.push_back(std::move(spec));
    }
    if (specs.empty()) throw UsageError("world.relations is empty");
    return specs;
}

std::string join_tokens(const std::vector<std::string>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += toks[i];
    }
    return s;
}

// Per-relation splits, deterministic per (seed, relation). Used by both
// cmd_train and the leakage-controlled corpus so they agree on test facts.
Split split_triples_per_relation(const std::vector<Triple>& triples, SplitRegime regime,
                                 uint64_t seed) {
    std::vector<std::string> relation_order;
    std::map<std::string, std::vector<Triple>> grouped;
    for (const Triple& t : triples) {
        if (!grouped.count(t.relation)) relation_order.push_back(t.relation);
        grouped[t.relation].push_back(t);
    }
    Split out;
    out.regime = regime;
    for (const std::string& rel : relation_order) {
        uint64_t rel_seed = seed ^ fnv1a64(rel);
        Split s = regime == SplitRegime::random_80_10_10 ? split_random(grouped[rel], rel_seed)
                                                         : split_distinct_y(grouped[rel], rel_seed);
        out.train.insert(out.train.end(), s.train.begin(), s.train.end());
        out.dev.insert(out.dev.end(), s.dev.begin(), s.dev.end());
        out.test.insert(out.test.end(), s.test.begin(), s.test.end());
    }
    return out;
}

void stamp(std::ofstream& out, const RunConfig& cfg) {
    out << "# config " << cfg.checksum_hex() << "\n";
    out << "# seed " << cfg.seed() << "\n";
}

std::vector<std::pair<std::string, std::string>> stamp_meta(const RunConfig& cfg) {
    return {{"run.config_checksum", cfg.checksum_hex()}, {"run.seed", std::to_string(cfg.seed())}};
}

PretrainConfig pretrain_config(const RunConfig& cfg) {
    PretrainConfig p;
    p.batch_size = cfg.get_int("pretrain.batch", 64);
    p.max_epochs = cfg.get_int("pretrain.epochs", 30);
    p.patience = cfg.get_int("pretrain.patience", 4);
    p.dev_fraction = cfg.get_double("pretrain.dev_fraction", 0.05);
    p.adam.lr = cfg.get_double("pretrain.lr", 1e-3);
    return p;
}

LMConfig lm_config(const RunConfig& cfg, int vocab_size) {
    LMConfig c;
    c.d = cfg.get_int("lm.d", 48);
    c.layers = cfg.get_int("lm.layers", 2);
    c.heads = cfg.get_int("lm.heads", 4);
    c.ffn_dim = cfg.get_int("lm.ffn_dim", 192);
    c.max_len = cfg.get_int("lm.max_len", 24);
    c.tied_output = cfg.get_bool("lm.tied", true);
    c.seed = cfg.seed();
    c.vocab_size = vocab_size;
    return c;
}

TrainConfig train_config(const RunConfig& cfg, TuneMode mode, uint64_t seed) {
    TrainConfig t;
    t.batch_size = cfg.get_int("train.batch", 64);
    t.max_epochs = cfg.get_int("train.epochs", 16);
    t.patience = cfg.get_int("train.patience", 4);
    t.optimizer = optimizer_from_name(cfg.get("train.optimizer", "adam"));
    t.tune_mode = mode;
    t.adam.lr = cfg.get_double("train.lr", 1e-3);
    t.seed = seed;
    return t;
}

PromptSet build_prompt_set(const std::string& relation, PromptSource source, const RunConfig& cfg,
                           const MaskedLM& lm, uint64_t seed) {
    std::string manifest_path =
        cfg.get("paths.prompts", world_dir(cfg) + "/prompts/manifest.tsv");
    auto from_manifest = [&](PromptSource src) {
        for (const PromptManifestEntry& e : load_prompt_manifest(manifest_path))
            if (e.relation == relation && e.source == src) {
                std::vector<std::string> warnings;
                auto prompts = load_prompt_file(e.path, lm.vocab, src, &warnings);
                for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
                return prompts;
            }
        throw InputError("no prompt file for relation '" + relation + "' with source '" +
                         prompt_source_name(src) + "' in " + manifest_path);
    };

    PromptSet ps;
    ps.relation = relation;
    if (source == PromptSource::random) {
        // shapes donated by the mined prompts, vectors from the embedding fit
        std::vector<HardPrompt> donors = from_manifest(PromptSource::mined);
        auto [mean, std] = fit_embedding_gaussian(lm);
        uint64_t k = 0;
        for (const HardPrompt& donor : donors)
            ps.prompts.push_back(init_soft_random(donor, mean, std, lm.config, seed ^ (0xabc1 + k++)));
    } else if (source == PromptSource::per_example) {
        std::string path = cfg.require("train.per_example_file");
        std::ifstream in(path);
        if (!in) throw InputError("cannot open per-example prompt file: " + path);
        std::vector<std::tuple<HardPrompt, std::string, std::string>> examples;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty() || line[0] == '#') continue;
            std::istringstream ls(line);
            std::string rel, pattern, x, y;
            if (!std::getline(ls, rel, '\t') || !std::getline(ls, pattern, '\t') ||
                !std::getline(ls, x, '\t') || !std::getline(ls, y))
                throw FormatError(path + ":" + std::to_string(lineno) +
                                  ": expected relation<TAB>prompt<TAB>x<TAB>y");
            if (rel != relation) continue;
            examples.emplace_back(parse_hard_prompt(pattern, lm.vocab, PromptSource::per_example),
                                  x, y);
        }
        int min_count = cfg.get_int("train.per_example_min_count", 10);
        for (const HardPrompt& hp : aggregate_example_prompts(examples, min_count))
            ps.prompts.push_back(init_soft_from_hard(hp, lm));
    } else {
        for (const HardPrompt& hp : from_manifest(source))
            ps.prompts.push_back(init_soft_from_hard(hp, lm));
    }
    if (ps.prompts.empty())
        throw InputError("prompt set for relation '" + relation + "' is empty");
    return ps;
}

std::string format4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string format6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

void cmd_world(const RunConfig& cfg) {
    std::vector<RelationSpec> specs = parse_relations_spec(cfg.require("world.relations"));
    int entities = cfg.get_int("world.entities", 500);
    uint64_t seed = cfg.seed();
    World world = generate_world(entities, specs, seed);

    std::set<Fact> excluded;
    if (cfg.get_bool("world.leakage_controlled", false)) {
        // exclude the facts that the (deterministic) split will hold out
        std::vector<Triple> triples;
        for (const Fact& f : world.facts.facts) triples.push_back({f.relation, f.x, f.y});
        SplitRegime regime = split_regime_from_name(cfg.get("split.regime", "random_80_10_10"));
        Split split = split_triples_per_relation(triples, regime, seed);
        for (const Triple& t : split.test) excluded.insert({t.relation, t.x, t.y});
    }
    std::vector<CorpusSentence> corpus =
        generate_corpus(world, cfg.get_int("world.repetitions", 8),
                        cfg.get_double("world.distractor_rate", 0.0), seed ^ 0xc0a1,
                        excluded.empty() ? nullptr : &excluded);

    std::string dir = world_dir(cfg);
    fs::create_directories(dir);
    write_facts_tsv(world.facts, dir + "/facts.tsv");
    write_corpus(corpus, dir + "/corpus.txt", dir + "/corpus_mask.tsv");
    write_vocab(world.vocab, dir + "/vocab.txt");

    // Prompt files play the role of externally sourced prompts: the probe
    // templates, not the literal corpus surfaces.
    fs::create_directories(dir + "/prompts");
    std::ofstream manifest(dir + "/prompts/manifest.tsv", std::ios::trunc);
    for (const RelationSchema& schema : world.schemas) {
        const auto& probes = schema.probes_or_surfaces();
        std::string single_name = schema.name + ".single.txt";
        std::string mined_name = schema.name + ".mined.txt";
        std::string para_name = schema.name + ".paraphrase.txt";
        {
            std::ofstream f(dir + "/prompts/" + single_name, std::ios::trunc);
            f << join_tokens(probes[0]) << "\n";
        }
        {
            std::ofstream f(dir + "/prompts/" + mined_name, std::ios::trunc);
            for (const auto& tmpl : probes) f << join_tokens(tmpl) << "\n";
        }
        {
            // paraphrases: the probe list read back to front, minus the first
            std::ofstream f(dir + "/prompts/" + para_name, std::ios::trunc);
            for (auto it = probes.rbegin(); it != probes.rend(); ++it) f << join_tokens(*it) << "\n";
        }
        manifest << schema.name << "\tsingle\t" << single_name << "\n";
        manifest << schema.name << "\tmined\t" << mined_name << "\n";
        manifest << schema.name << "\tparaphrase\t" << para_name << "\n";
    }

    std::ofstream meta(dir + "/world_meta.txt", std::ios::trunc);
    stamp(meta, cfg);
    meta << "entities " << entities << "\n";
    meta << "sentences " << corpus.size() << "\n";
    meta << "excluded_facts " << excluded.size() << "\n";
    for (const RelationSchema& s : world.schemas) {
        meta << "relation " << s.name << " templates " << s.surface_templates.size()
             << " y_domain " << s.y_domain.size() << "\n";
    }
    std::cerr << "world: " << world.facts.facts.size() << " facts, " << corpus.size()
              << " sentences, vocabulary " << world.vocab.size() << "\n";
}

void cmd_pretrain(const RunConfig& cfg) {
    std::string dir = world_dir(cfg);
    Vocabulary vocab = load_vocab(dir + "/vocab.txt");
    std::vector<CorpusSentence> corpus = load_corpus(dir + "/corpus.txt", dir + "/corpus_mask.tsv");
    LMConfig lc = lm_config(cfg, vocab.size());
    PretrainConfig pc = pretrain_config(cfg);

    std::vector<std::array<double, 3>> curve;
    PretrainReport report;
    MaskedLM lm = pretrain(lc, vocab, corpus, pc, &report, [&](int epoch, double tr, double dev) {
        curve.push_back({static_cast<double>(epoch), tr, dev});
        std::cerr << "pretrain epoch " << epoch << " train_ce " << format4(tr) << " dev_ce "
                  << format4(dev) << "\n";
    });
    save_lm_checkpoint(lm, lm_stem(cfg), stamp_meta(cfg));

    std::ofstream rep(cfg.out_dir() + "/pretrain_report.tsv", std::ios::trunc);
    stamp(rep, cfg);
    rep << "epoch\ttrain_ce\tdev_ce\n";
    for (const auto& row : curve)
        rep << static_cast<int>(row[0]) << "\t" << format6(row[1]) << "\t" << format6(row[2])
            << "\n";
    rep << "# init_dev_ce " << format6(report.init_dev_ce) << "\n";
    rep << "# final_dev_ce " << format6(report.final_dev_ce) << "\n";
    rep << "# best_epoch " << report.best_epoch << "\n";
    std::cerr << "pretrain: dev ce " << format4(report.init_dev_ce) << " -> "
              << format4(report.final_dev_ce) << " (best epoch " << report.best_epoch << ")\n";
}

void cmd_train(const RunConfig& cfg) {
    MaskedLM lm = load_lm_checkpoint(lm_stem(cfg));
    std::string facts_path = cfg.get("paths.facts", world_dir(cfg) + "/facts.tsv");
    std::vector<Triple> triples = filter_single_token_y(load_triples(facts_path), lm.vocab);
    if (triples.empty()) throw InputError("no usable triples in " + facts_path);

    SplitRegime regime = split_regime_from_name(cfg.get("split.regime", "random_80_10_10"));
    Split split = split_triples_per_relation(triples, regime, cfg.seed());
    write_split(split, cfg.seed(), split_dir(cfg));
    {
        std::ofstream meta(split_dir(cfg) + "/split_meta.txt", std::ios::app);
        meta << "config " << cfg.checksum_hex() << "\n";
    }

    std::vector<std::string> relation_order;
    for (const Triple& t : triples)
        if (std::count(relation_order.begin(), relation_order.end(), t.relation) == 0)
            relation_order.push_back(t.relation);

    PromptSource source = prompt_source_from_name(cfg.get("train.init", "mined"));
    WeightingMode weighting = weighting_mode_from_name(cfg.get("train.weighting", "static"));

    for (const std::string& mode_name : split_list(cfg.get("train.mode", "both"), ',')) {
        TuneMode mode = tune_mode_from_name(mode_name);
        std::string run_dir = run_dir_for_mode(cfg, mode_name);
        fs::create_directories(run_dir);
        std::vector<MixtureModel> models, init_models;
        std::ofstream rep(run_dir + "/train_report.tsv", std::ios::trunc);
        stamp(rep, cfg);
        rep << "relation\tepoch\ttrain_loss\tdev_loss\tdev_p1\n";
        TrainConfig tc = train_config(cfg, mode, cfg.seed());
        for (const std::string& rel : relation_order) {
            PromptSet ps = build_prompt_set(rel, source, cfg, lm, cfg.seed() ^ fnv1a64(rel));
            MixtureModel model = make_mixture(std::move(ps), weighting);
            init_models.push_back(model);
            Split rel_split;
            rel_split.regime = regime;
            auto filter = [&](const std::vector<Triple>& part) {
                std::vector<Triple> out;
                for (const Triple& t : part)
                    if (t.relation == rel) out.push_back(t);
                return out;
            };
            rel_split.train = filter(split.train);
            rel_split.dev = filter(split.dev);
            rel_split.test = filter(split.test);
            TrainConfig rel_tc = tc;
            rel_tc.seed = cfg.seed() ^ fnv1a64(rel);
            TrainReport r = train(model, rel_split, lm, rel_tc);
            for (const EpochStats& e : r.epochs)
                rep << rel << "\t" << e.epoch << "\t" << format6(e.train_loss) << "\t"
                    << format6(e.dev_loss) << "\t" << format6(e.dev_p1) << "\n";
            rep << "# " << rel << " best_epoch " << r.best_epoch << "\n";
            std::cerr << "train[" << mode_name << "] " << rel << ": best epoch " << r.best_epoch
                      << ", dev_p1 "
                      << format4(r.epochs[static_cast<size_t>(r.best_epoch - 1)].dev_p1)
                      << " (" << format4(r.wall_seconds) << "s)\n";
            models.push_back(std::move(model));
        }
        // the untrained initialization too, so "init" rows can be evaluated
        save_mixture_checkpoint(init_models, tc, run_dir + "/mixture_init", stamp_meta(cfg));
        save_mixture_checkpoint(models, tc, run_dir + "/mixture", stamp_meta(cfg));
    }
}

namespace {

struct EvalPaths {
    std::string run_dir;
    std::string part;
    std::string checkpoint;  // stem inside run_dir, normally "mixture"
    std::string prefix() const {
        std::string tag = checkpoint == "mixture" ? "" : checkpoint + "_";
        return run_dir + "/eval_" + tag + part + "_";
    }
};

EvalPaths eval_paths(const RunConfig& cfg) {
    std::string first_mode = split_list(cfg.get("train.mode", "both"), ',')[0];
    EvalPaths p;
    p.run_dir = cfg.get("paths.run", run_dir_for_mode(cfg, first_mode));
    p.part = cfg.get("eval.part", "test");
    p.checkpoint = cfg.get("eval.checkpoint", "mixture");
    return p;
}

}  // namespace

void cmd_eval(const RunConfig& cfg) {
    MaskedLM lm = load_lm_checkpoint(lm_stem(cfg));
    Split split = load_split(split_dir(cfg));
    EvalPaths paths = eval_paths(cfg);
    if (paths.part != "train" && paths.part != "dev" && paths.part != "test")
        throw UsageError("eval.part must be train, dev or test, got '" + paths.part + "'");
    std::vector<MixtureModel> models =
        load_mixture_checkpoint(paths.run_dir + "/" + paths.checkpoint, lm);
    std::map<std::string, const MixtureModel*> by_relation;
    for (const MixtureModel& m : models) by_relation[m.prompt_set.relation] = &m;

    const std::vector<Triple>& part = split.part(paths.part);
    if (part.empty()) throw InputError("split part '" + paths.part + "' is empty");

    std::vector<RankRecord> records;
    std::ofstream ex_out(paths.prefix() + "examples.tsv", std::ios::trunc);
    stamp(ex_out, cfg);
    ex_out << "id\trelation\trank\treciprocal_rank\tcorrect1\tgold\ttop1\n";
    for (const Triple& t : part) {
        auto it = by_relation.find(t.relation);
        if (it == by_relation.end())
            throw InputError("no trained mixture for relation '" + t.relation + "'");
        TuningExample ex = to_example(t, lm.vocab);
        Tensor p = predict(*it->second, ex.x_ids, lm);
        int rank = rank_gold(p, ex.y_id);
        RankRecord rec;
        rec.example_id = t.relation + ":" + t.x + ":" + t.y;
        rec.relation = t.relation;
        rec.rank = rank;
        records.push_back(rec);
        int top1 = 0;
        for (int w = 1; w < p.cols; ++w)
            if (p.v[static_cast<size_t>(w)] > p.v[static_cast<size_t>(top1)]) top1 = w;
        ex_out << rec.example_id << "\t" << t.relation << "\t" << rank << "\t"
               << format4(1.0 / rank) << "\t" << (rank == 1 ? 1 : 0) << "\t" << t.y << "\t"
               << lm.vocab.token(top1) << "\n";
    }

    MetricReport metrics = compute_metrics(records);
    {
        std::ofstream out(paths.prefix() + "metrics.tsv", std::ios::trunc);
        stamp(out, cfg);
        out << "relation\tn\tp1\tp10\tmrr\n";
        for (const MetricRow& row : metrics.per_relation)
            out << row.relation << "\t" << row.n << "\t" << format4(row.p1) << "\t"
                << format4(row.p10) << "\t" << format4(row.mrr) << "\n";
        out << metrics.macro.relation << "\t" << metrics.macro.n << "\t" << format4(metrics.macro.p1)
            << "\t" << format4(metrics.macro.p10) << "\t" << format4(metrics.macro.mrr) << "\n";
        out << metrics.micro.relation << "\t" << metrics.micro.n << "\t" << format4(metrics.micro.p1)
            << "\t" << format4(metrics.micro.p10) << "\t" << format4(metrics.micro.mrr) << "\n";
    }
    {
        nlohmann::json j;
        j["config_checksum"] = cfg.checksum_hex();
        j["seed"] = cfg.seed();
        j["part"] = paths.part;
        auto row_json = [](const MetricRow& row) {
            return nlohmann::json{
                {"relation", row.relation}, {"n", row.n}, {"p1", row.p1}, {"p10", row.p10},
                {"mrr", row.mrr}};
        };
        j["per_relation"] = nlohmann::json::array();
        for (const MetricRow& row : metrics.per_relation) j["per_relation"].push_back(row_json(row));
        j["macro"] = row_json(metrics.macro);
        j["micro"] = row_json(metrics.micro);
        std::ofstream out(paths.prefix() + "metrics.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(paths.prefix() + "diagnostics.tsv", std::ios::trunc);
        stamp(out, cfg);
        out << "relation\tn_prompts\tentropy_bits\teffective_prompts\n";
        for (const MixtureModel& m : models) {
            EffectivePromptCount e = effective_prompt_count(m.static_weights());
            out << m.prompt_set.relation << "\t" << m.prompt_count() << "\t"
                << format4(e.entropy_bits) << "\t" << format4(e.effective) << "\n";
        }
    }
    std::cerr << "eval[" << paths.part << "]: macro P@1 " << format4(metrics.macro.p1) << " P@10 "
              << format4(metrics.macro.p10) << " MRR " << format4(metrics.macro.mrr) << "\n";
}

namespace {

struct ExampleRow {
    std::string id;
    int rank = 0;
    double rr = 0;
    bool correct1 = false;
};

std::vector<ExampleRow> load_examples_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open examples file: " + path);
    std::vector<ExampleRow> out;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {  // column header
            header_seen = true;
            continue;
        }
        std::istringstream ls(line);
        ExampleRow row;
        std::string relation, rank, rr, correct;
        if (!std::getline(ls, row.id, '\t') || !std::getline(ls, relation, '\t') ||
            !std::getline(ls, rank, '\t') || !std::getline(ls, rr, '\t') ||
            !std::getline(ls, correct, '\t'))
            throw FormatError("bad examples line in " + path);
        try {
            row.rank = std::stoi(rank);
        } catch (const std::exception&) {
            throw FormatError("bad rank in " + path);
        }
        if (row.rank < 1) throw FormatError("bad rank in " + path);
        row.rr = 1.0 / row.rank;  // full precision; the file's rr column is rounded
        row.correct1 = correct == "1";
        out.push_back(std::move(row));
    }
    return out;
}

}  // namespace

void cmd_compare(const RunConfig& cfg, const std::string& run_a, const std::string& run_b) {
    std::string part = cfg.get("eval.part", "test");
    std::string name = cfg.get("compare.examples", "eval_" + part + "_examples.tsv");
    std::vector<ExampleRow> a = load_examples_file(run_a + "/" + name);
    std::vector<ExampleRow> b = load_examples_file(run_b + "/" + name);
    if (a.size() != b.size()) throw InputError("compare: example sets differ in size");
    for (size_t i = 0; i < a.size(); ++i)
        if (a[i].id != b[i].id)
            throw InputError("compare: example mismatch at row " + std::to_string(i + 1) + ": " +
                             a[i].id + " vs " + b[i].id);

    std::vector<bool> ca, cb;
    std::vector<double> ra, rb;
    for (size_t i = 0; i < a.size(); ++i) {
        ca.push_back(a[i].correct1);
        cb.push_back(b[i].correct1);
        ra.push_back(a[i].rr);
        rb.push_back(b[i].rr);
    }
    double sign_p = sign_test(ca, cb);
    PermutationMode pm = a.size() <= 20
                             ? PermutationMode::exact_mode()
                             : PermutationMode::sampled(cfg.get_int("compare.resamples", 10000),
                                                        cfg.seed());
    double perm_p = paired_permutation_test(ra, rb, pm);

    const double alpha = 0.02;
    fs::create_directories(cfg.out_dir());
    std::string out_path = cfg.get("paths.compare_out", cfg.out_dir() + "/significance.tsv");
    std::ofstream out(out_path, std::ios::trunc);
    stamp(out, cfg);
    out << "id\tcorrect_a\tcorrect_b\trr_a\trr_b\n";
    for (size_t i = 0; i < a.size(); ++i)
        out << a[i].id << "\t" << (a[i].correct1 ? 1 : 0) << "\t" << (b[i].correct1 ? 1 : 0) << "\t"
            << format6(a[i].rr) << "\t" << format6(b[i].rr) << "\n";
    out << "# sign_test_p " << format6(sign_p) << "\n";
    out << "# permutation_test_p " << format6(perm_p) << "\n";
    out << "# permutation_mode " << (pm.exact ? "exact" : "sampled") << "\n";
    out << "# sign_verdict "
        << (sign_p < alpha ? "significant at 0.02" : "not significant") << "\n";
    out << "# permutation_verdict "
        << (perm_p < alpha ? "significant at 0.02" : "not significant") << "\n";
    std::cout << "sign test p = " << format6(sign_p) << " ("
              << (sign_p < alpha ? "significant" : "not significant") << " at 0.02)\n";
    std::cout << "paired permutation p = " << format6(perm_p) << " ("
              << (perm_p < alpha ? "significant" : "not significant") << " at 0.02)\n";
}

void cmd_viz(const RunConfig& cfg) {
    MaskedLM lm = load_lm_checkpoint(lm_stem(cfg));
    EvalPaths paths = eval_paths(cfg);
    std::vector<MixtureModel> models =
        load_mixture_checkpoint(paths.run_dir + "/" + paths.checkpoint, lm);

    std::ofstream txt(paths.run_dir + "/viz.txt", std::ios::trunc);
    std::ofstream html(paths.run_dir + "/viz.html", std::ios::trunc);
    stamp(txt, cfg);
    html << "<!doctype html><html><head><meta charset=\"utf-8\"><title>soft prompts</title>\n"
         << "<style>body{font-family:sans-serif} .p{margin:0.6em 0} .w{margin-right:0.4em}\n"
         << ".soft{color:#2244cc} .orig{color:#cc3322}</style></head><body>\n";

    for (const MixtureModel& m : models) {
        std::vector<double> w = m.static_weights();
        std::vector<int> order(static_cast<size_t>(m.prompt_count()));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
            return w[static_cast<size_t>(x)] > w[static_cast<size_t>(y)];
        });
        txt << "relation " << m.prompt_set.relation << "\n";
        html << "<h2>" << m.prompt_set.relation << "</h2>\n";
        for (int t : order) {
            const SoftPrompt& p = m.prompt_set.prompts[static_cast<size_t>(t)];
            std::vector<SlotReportRow> rows = visualize_prompt(p, lm);
            txt << "  prompt " << t << " weight " << format4(w[static_cast<size_t>(t)])
                << " init " << p.provenance << "\n";
            txt << "    slot\tword\tp(word|v)\torigin\tp(origin|v)\tnorm_ratio\n";
            html << "<div class=\"p\"><b>" << format4(w[static_cast<size_t>(t)]) << "</b> ";
            double max_p = 1e-300;
            for (const SlotReportRow& r : rows) max_p = std::max(max_p, r.p_nearest);
            for (const SlotReportRow& r : rows) {
                txt << "    " << r.slot << "\t" << r.nearest_word << "\t"
                    << format6(r.p_nearest) << "\t" << (r.origin_word ? *r.origin_word : "-")
                    << "\t" << (r.origin_word ? format6(r.p_origin) : "-") << "\t"
                    << (r.origin_word ? format4(r.norm_ratio) : "-") << "\n";
                double opacity = 0.35 + 0.65 * (r.p_nearest / max_p);
                double size = r.origin_word ? r.norm_ratio : 1.0;
                html << "<span class=\"w soft\" style=\"opacity:" << format4(opacity)
                     << ";font-size:" << format4(size) << "em\">" << r.nearest_word << "</span>";
                if (r.origin_word)
                    html << "<span class=\"w orig\">" << *r.origin_word << "</span>";
            }
            html << "</div>\n";
        }
    }
    html << "</body></html>\n";
    std::cerr << "viz: wrote " << paths.run_dir << "/viz.txt and viz.html\n";
}

}  // namespace softmix
