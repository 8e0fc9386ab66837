#pragma once

#include <string>

#include "softmix/runconfig.hpp"

namespace softmix {

// Subcommand bodies, shared between the CLI binary and the test suites.
// Each throws on failure; the CLI maps exception types to exit codes.

void cmd_world(const RunConfig& cfg);
void cmd_pretrain(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_compare(const RunConfig& cfg, const std::string& run_a, const std::string& run_b);
void cmd_viz(const RunConfig& cfg);

}  // namespace softmix
