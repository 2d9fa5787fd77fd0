#pragma once

#include "bnnoise/config.hpp"

#include <ostream>
#include <string>
#include <vector>

namespace bnnoise {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 1;
inline constexpr int kExitNotConverged = 2;

// Each command writes its artifacts under config.output.dir and returns an
// exit code. Config and input errors propagate as exceptions; run_cli maps
// them to kExitConfigError.
int cmd_train(const ExperimentConfig& config, std::ostream& log);
int cmd_inject(const ExperimentConfig& config, std::ostream& log);
int cmd_sweep(const ExperimentConfig& config, std::ostream& log);
int cmd_search_bn(const ExperimentConfig& config, std::ostream& log);
int cmd_diagnose(const ExperimentConfig& config, std::ostream& log);

/// Full command line entry point: `bnnoise <subcommand> [--config FILE] [flags]`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bnnoise
