#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    std::string cmd = std::string(SOFTMIX_BIN) + " " + args + " 2>>cli_test_stderr.log";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_config(const std::string& path, const std::string& out_dir) {
    std::ofstream f(path);
    f << "seed 5\n";
    f << "out " << out_dir << "\n";
    f << "world.entities 60\n";
    f << "world.relations craft:60:8:2:3\n";
    f << "world.repetitions 5\n";
    f << "lm.d 24\n";
    f << "lm.layers 2\n";
    f << "lm.heads 2\n";
    f << "lm.ffn_dim 48\n";
    f << "lm.max_len 16\n";
    f << "pretrain.epochs 6\n";
    f << "pretrain.batch 32\n";
    f << "pretrain.lr 0.002\n";
    f << "train.epochs 3\n";
    f << "train.patience 3\n";
    f << "train.init mined\n";
    f << "train.mode both\n";
}

}  // namespace

TEST_CASE("pipeline runs end to end and is byte-deterministic") {
    fs::remove_all("cli_a");
    fs::remove_all("cli_b");
    write_config("cli_a.cfg", "cli_a");
    write_config("cli_b.cfg", "cli_b");

    for (const std::string& cfg : {"cli_a.cfg", "cli_b.cfg"}) {
        CHECK(run("world --config " + cfg) == 0);
        CHECK(run("pretrain --config " + cfg) == 0);
        CHECK(run("train --config " + cfg) == 0);
        CHECK(run("eval --config " + cfg) == 0);
        CHECK(run("viz --config " + cfg) == 0);
    }

    // identical seeds and configs (modulo the out path) give byte-identical
    // artifacts
    for (const std::string& rel : {
             std::string("world/facts.tsv"),
             std::string("world/corpus.txt"),
             std::string("world/vocab.txt"),
             std::string("lm.blob"),
             std::string("split/train.tsv"),
             std::string("runs/both/mixture.blob"),
         }) {
        CAPTURE(rel);
        CHECK(slurp("cli_a/" + rel) == slurp("cli_b/" + rel));
    }
    // re-running a stage in place reproduces the same bytes
    std::string before = slurp("cli_a/runs/both/mixture.blob");
    CHECK(run("train --config cli_a.cfg") == 0);
    CHECK(slurp("cli_a/runs/both/mixture.blob") == before);

    // reports exist and carry the config stamp
    std::string metrics = slurp("cli_a/runs/both/eval_test_metrics.tsv");
    CHECK(metrics.find("# config ") != std::string::npos);
    CHECK(metrics.find("# seed 5") != std::string::npos);
    CHECK(metrics.find("_macro") != std::string::npos);
    CHECK(fs::exists("cli_a/runs/both/eval_test_metrics.json"));
    CHECK(fs::exists("cli_a/runs/both/eval_test_diagnostics.tsv"));
    CHECK(fs::exists("cli_a/runs/both/viz.html"));
}

TEST_CASE("compare of a run against itself is not significant") {
    // relies on the pipeline test having produced cli_a
    REQUIRE(fs::exists("cli_a/runs/both/eval_test_examples.tsv"));
    CHECK(run("compare --config cli_a.cfg --run-a cli_a/runs/both --run-b cli_a/runs/both") == 0);
    std::string sig = slurp("cli_a/significance.tsv");
    CHECK(sig.find("# sign_test_p 1.000000") != std::string::npos);
    CHECK(sig.find("not significant") != std::string::npos);
}

TEST_CASE("compare flags an 8-vs-0 discordance as significant") {
    fs::create_directories("cli_cmp_a");
    fs::create_directories("cli_cmp_b");
    auto write_examples = [](const std::string& dir, bool a_side) {
        std::ofstream f(dir + "/eval_test_examples.tsv");
        f << "id\trelation\trank\treciprocal_rank\tcorrect1\tgold\ttop1\n";
        for (int i = 0; i < 8; ++i)
            f << "r:x" << i << ":y\tr\t" << (a_side ? 1 : 3) << "\t"
              << (a_side ? "1.0000" : "0.3333") << "\t" << (a_side ? 1 : 0) << "\ty\tw\n";
        for (int i = 8; i < 12; ++i)  // concordant padding
            f << "r:x" << i << ":y\tr\t1\t1.0000\t1\ty\ty\n";
    };
    write_examples("cli_cmp_a", true);
    write_examples("cli_cmp_b", false);
    CHECK(run("compare --run-a cli_cmp_a --run-b cli_cmp_b --out cli_cmp_out") == 0);
    std::string sig = slurp("cli_cmp_out/significance.tsv");
    CHECK(sig.find("# sign_test_p 0.007813") != std::string::npos);  // 2/256 under %.6f
    CHECK(sig.find("# sign_verdict significant at 0.02") != std::string::npos);
}

TEST_CASE("ablation grids expand list-valued tune modes") {
    fs::remove_all("cli_grid");
    write_config("cli_grid.cfg", "cli_grid");
    CHECK(run("world --config cli_grid.cfg") == 0);
    CHECK(run("pretrain --config cli_grid.cfg") == 0);
    CHECK(run("train --config cli_grid.cfg --set train.mode=weights_only,vectors_only,both") == 0);
    CHECK(fs::exists("cli_grid/runs/weights_only/mixture.blob"));
    CHECK(fs::exists("cli_grid/runs/vectors_only/mixture.blob"));
    CHECK(fs::exists("cli_grid/runs/both/mixture.blob"));
    CHECK(run("eval --config cli_grid.cfg --set paths.run=cli_grid/runs/weights_only") == 0);
    CHECK(fs::exists("cli_grid/runs/weights_only/eval_test_metrics.tsv"));
}

TEST_CASE("untrained inits are evaluable and random inits mirror mined shapes") {
    REQUIRE(fs::exists("cli_a/runs/both/mixture_init.manifest.txt"));
    // "init" column semantics: evaluate the untrained initialization
    CHECK(run("eval --config cli_a.cfg --set eval.checkpoint=mixture_init") == 0);
    CHECK(fs::exists("cli_a/runs/both/eval_mixture_init_test_metrics.tsv"));
    CHECK(run("compare --config cli_a.cfg --run-a cli_a/runs/both --run-b cli_a/runs/both "
              "--set compare.examples=eval_mixture_init_test_examples.tsv") == 0);

    // structural diff: --init random layouts match the mined donors
    std::string mined = slurp("cli_a/runs/both/mixture_init.manifest.txt");
    CHECK(run("train --config cli_a.cfg --set train.init=random --set train.epochs=1 "
              "--set train.patience=1 --set paths.split=cli_a/split2") == 0);
    std::string random = slurp("cli_a/runs/both/mixture_init.manifest.txt");
    auto layca = [](const std::string& manifest) {
        std::vector<std::string> layouts;
        std::istringstream in(manifest);
        std::string line;
        while (std::getline(in, line))
            if (line.find(".layout ") != std::string::npos) layouts.push_back(line);
        return layouts;
    };
    CHECK(layca(mined) == layca(random));
    CHECK(!layca(mined).empty());
}

TEST_CASE("per-example prompt files aggregate above the occurrence threshold") {
    REQUIRE(fs::exists("cli_a/world/prompts/craft.mined.txt"));
    // reuse two real probe patterns; one occurs 12 times, the other 3
    std::ifstream mined("cli_a/world/prompts/craft.mined.txt");
    std::string p1, p2;
    std::getline(mined, p1);
    std::getline(mined, p2);
    {
        std::ofstream f("cli_a/per_example.tsv");
        for (int i = 0; i < 12; ++i) f << "craft\t" << p1 << "\tx" << i << "\ty\n";
        for (int i = 0; i < 3; ++i) f << "craft\t" << p2 << "\tx" << i << "\ty\n";
    }
    CHECK(run("train --config cli_a.cfg --set train.init=per_example "
              "--set train.per_example_file=cli_a/per_example.tsv "
              "--set train.epochs=1 --set train.patience=1") == 0);
    std::string manifest = slurp("cli_a/runs/both/mixture_init.manifest.txt");
    CHECK(manifest.find("n_prompts 1") != std::string::npos);  // only the 12x pattern survives
    CHECK(manifest.find("source per_example") != std::string::npos);
}

TEST_CASE("exit codes distinguish usage, input and format errors") {
    // usage: missing required key
    CHECK(run("world --set seed=1 --out cli_err") == 2);
    // usage: unknown subcommand
    CHECK(run("frobnicate") == 2);
    // input: missing checkpoint
    CHECK(run("pretrain --set paths.world=does_not_exist --out cli_err") == 3);
    // format: malformed config file
    {
        std::ofstream f("cli_bad.cfg");
        f << "keywithoutvalue\n";
    }
    CHECK(run("world --config cli_bad.cfg") == 4);
    // input: unparsable relation spec is a usage error
    CHECK(run("world --set world.relations=oops --out cli_err") == 2);
}
