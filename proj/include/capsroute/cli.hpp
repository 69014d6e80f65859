#pragma once

#include <string>
#include <vector>

#include "capsroute/config.hpp"
#include "capsroute/data.hpp"

namespace capsroute {

/// Runs the command-line tool. Exit codes: 0 success, 2 usage error,
/// 3 missing or malformed data, 4 training divergence, 1 other failure.
int cli_run(const std::vector<std::string>& args);

/// Loads the dataset pair named by a config ("mnist", "cifar10",
/// "multimnist", or one of the procedural "synth-*" fixtures). File-backed
/// datasets come from data_dir; per-class hints size the synthetic ones.
SplitPair resolve_dataset(const std::string& name,
                          const std::filesystem::path& data_dir,
                          std::size_t train_per_class_hint = 0,
                          std::size_t test_per_class_hint = 0);

}  // namespace capsroute
