#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "softmix/commands.hpp"

namespace {

// Exit codes: 0 success, 2 usage, 3 bad input, 4 file format, 5 numerical
// abort, 1 anything else.
constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;
constexpr int kExitFormat = 4;
constexpr int kExitNumerical = 5;

struct GlobalFlags {
    std::string config_path;
    std::string out_dir;
    std::string seed;
    std::vector<std::string> overrides;  // key=value
};

softmix::RunConfig merge_config(const GlobalFlags& flags) {
    softmix::RunConfig cfg;
    if (!flags.config_path.empty()) cfg = softmix::RunConfig::from_file(flags.config_path);
    for (const std::string& kv : flags.overrides) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw softmix::UsageError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!flags.out_dir.empty()) cfg.set("out", flags.out_dir);
    if (!flags.seed.empty()) cfg.set("seed", flags.seed);
    return cfg;
}

void add_globals(CLI::App* app, GlobalFlags& flags) {
    app->add_option("--config", flags.config_path, "run configuration file");
    app->add_option("--out", flags.out_dir, "output directory (overrides config)");
    app->add_option("--seed", flags.seed, "seed (overrides config)");
    app->add_option("--set", flags.overrides, "override a config key (key=value), repeatable");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"softmix: mixtures of tuned soft cloze prompts over a toy masked LM"};
    app.require_subcommand(1);

    GlobalFlags flags;
    std::string run_a, run_b;

    CLI::App* world = app.add_subcommand("world", "generate a synthetic world and corpus");
    CLI::App* pretrain_cmd = app.add_subcommand("pretrain", "pretrain the toy masked LM");
    CLI::App* train_cmd = app.add_subcommand("train", "train soft prompt mixtures");
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained mixture");
    CLI::App* compare_cmd = app.add_subcommand("compare", "significance-test two runs");
    CLI::App* viz = app.add_subcommand("viz", "report nearest words for tuned prompts");
    for (CLI::App* sub : {world, pretrain_cmd, train_cmd, eval_cmd, compare_cmd, viz})
        add_globals(sub, flags);
    compare_cmd->add_option("--run-a", run_a, "first run directory")->required();
    compare_cmd->add_option("--run-b", run_b, "second run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        softmix::RunConfig cfg = merge_config(flags);
        if (world->parsed()) softmix::cmd_world(cfg);
        if (pretrain_cmd->parsed()) softmix::cmd_pretrain(cfg);
        if (train_cmd->parsed()) softmix::cmd_train(cfg);
        if (eval_cmd->parsed()) softmix::cmd_eval(cfg);
        if (compare_cmd->parsed()) softmix::cmd_compare(cfg, run_a, run_b);
        if (viz->parsed()) softmix::cmd_viz(cfg);
        return 0;
    } catch (const softmix::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const softmix::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitFormat;
    } catch (const softmix::NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const softmix::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
