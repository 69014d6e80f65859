#include "capsroute/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "capsroute/analysis.hpp"
#include "capsroute/checkpoint.hpp"
#include "capsroute/gradcheck.hpp"
#include "capsroute/training.hpp"

namespace capsroute {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

std::filesystem::path default_data_dir(const std::string& flag_value,
                                       const std::string& config_value) {
  if (!flag_value.empty()) return flag_value;
  if (!config_value.empty()) return config_value;
  if (const char* env = std::getenv("CAPSROUTE_DATA_DIR")) return env;
  return ".";
}

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

std::filesystem::path make_run_dir(const std::filesystem::path& out_root,
                                   const std::string& config_hash) {
  const std::string base = config_hash.substr(0, 8) + "-" + timestamp_now();
  std::filesystem::path dir = out_root / base;
  for (int suffix = 2; std::filesystem::exists(dir); ++suffix) {
    dir = out_root / (base + "-" + std::to_string(suffix));
  }
  std::filesystem::create_directories(dir);
  return dir;
}

Dataset pick_split(SplitPair&& pair, const std::string& split) {
  if (split == "train") return std::move(pair.train);
  if (split == "test") return std::move(pair.test);
  throw DataError("unknown split '" + split + "' (expected train|test)");
}

/// CLI flags shared by train/eval/analyze that override config keys.
struct Overrides {
  std::vector<std::pair<std::string, std::string>> kv;

  void attach(CLI::App* cmd) {
    auto add = [this, cmd](const std::string& flag, const std::string& key,
                           const std::string& help) {
      cmd->add_option_function<std::string>(
             flag, [this, key](const std::string& v) { kv.emplace_back(key, v); },
             help)
          ->expected(1);
    };
    add("--preset", "preset", "architecture preset (desk-mnist, desk-cifar, "
                              "desk-multimnist, mnist, cifar10-prim8, cifar10-prim64, multimnist)");
    add("--dataset", "dataset", "dataset name (mnist|cifar10|multimnist|synth-mnist|synth-cifar|synth-multimnist)");
    add("--activation", "activation", "primary-capsule activation: squash|ci|pa");
    add("--pa-n", "pa_n", "power of the powered activation");
    add("--ci-bar", "ci_bar", "saturation threshold of ci-squash");
    add("--ci-exponent", "ci_exponent", "growth exponent of ci-squash");
    add("--prim-channels", "prim_channels", "primary capsule channels (2|8|64)");
    add("--routing-iters", "routing_iters", "routing iterations");
    add("--weight-decay", "weight_decay", "L2 penalty coefficient");
    add("--dropout-keep", "dropout_keep", "capsule dropout keep probability");
    add("--seed", "seed", "random seed");
    add("--batch-size", "batch_size", "training batch size");
    add("--steps", "steps", "training steps");
    add("--threads", "threads", "worker threads per batch");
    add("--lr", "adam_lr", "base step size");
    add("--stop-at-accuracy", "stop_at_accuracy", "early stop threshold (0=off)");
  }

  void apply(RunConfig& cfg) const {
    for (const auto& [k, v] : kv) cfg.set(k, v);
  }
};

RunConfig load_config(const std::string& config_file, const Overrides& overrides) {
  RunConfig cfg;
  if (!config_file.empty()) {
    cfg = RunConfig::from_file(config_file);
  } else {
    cfg.apply_preset(cfg.preset);
  }
  overrides.apply(cfg);
  cfg.validate();
  return cfg;
}

std::vector<std::filesystem::path> collect_checkpoints(
    const std::filesystem::path& target, std::size_t last_n) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(target)) {
    for (const auto& entry : std::filesystem::directory_iterator(target)) {
      if (entry.path().extension() == ".caps") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::exists(target)) {
    files.push_back(target);
  }
  if (files.empty()) {
    throw DataError("no checkpoints found at " + target.string());
  }
  if (last_n > 0 && files.size() > last_n) {
    files.erase(files.begin(), files.end() - static_cast<std::ptrdiff_t>(last_n));
  }
  return files;
}

int run_parsed(CLI::App& app);

}  // namespace

SplitPair resolve_dataset(const std::string& name,
                          const std::filesystem::path& data_dir,
                          std::size_t train_per_class_hint,
                          std::size_t test_per_class_hint) {
  // Fixed generator seeds: a synthetic dataset behaves like files on disk,
  // identical for every run and config.
  const std::size_t train_n = 10 * (train_per_class_hint ? train_per_class_hint : 500);
  const std::size_t test_n = 10 * (test_per_class_hint ? test_per_class_hint : 100);
  if (name == "mnist") {
    return load_mnist(data_dir);
  }
  if (name == "cifar10") {
    return load_cifar10(data_dir);
  }
  if (name == "multimnist") {
    SplitPair pair;
    pair.train = load_idx_two_label_pair(
        data_dir / "multimnist-train-images-idx3-ubyte",
        data_dir / "multimnist-train-labels-idx2-ubyte", "train");
    pair.test = load_idx_two_label_pair(
        data_dir / "multimnist-test-images-idx3-ubyte",
        data_dir / "multimnist-test-labels-idx2-ubyte", "test");
    return pair;
  }
  if (name == "synth-mnist") {
    SplitPair pair;
    pair.train = synthetic_digits(train_n, 424242, "train");
    pair.test = synthetic_digits(test_n, 434343, "test");
    return pair;
  }
  if (name == "synth-cifar") {
    SplitPair pair;
    pair.train = synthetic_color_shapes(train_n, 424242, "train");
    pair.test = synthetic_color_shapes(test_n, 434343, "test");
    return pair;
  }
  if (name == "synth-multimnist") {
    SplitPair pair;
    pair.train = synthesize_multimnist(synthetic_digits(train_n, 424242, "train"), 1, 5000);
    pair.test = synthesize_multimnist(synthetic_digits(test_n, 434343, "test"), 1, 5001);
    return pair;
  }
  throw DataError("unknown dataset '" + name + "'");
}

namespace {

SplitPair load_for_config(const RunConfig& cfg, const std::string& data_dir_flag) {
  const auto dir = default_data_dir(data_dir_flag, cfg.data_dir);
  SplitPair pair = resolve_dataset(cfg.dataset, dir, cfg.train_subset_per_class,
                                   cfg.test_subset_per_class);
  if (cfg.train_subset_per_class > 0) {
    pair.train = stratified_subset(pair.train, cfg.train_subset_per_class);
  }
  if (cfg.test_subset_per_class > 0) {
    pair.test = stratified_subset(pair.test, cfg.test_subset_per_class);
  }
  return pair;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir_flag,
              const std::string& out_root) {
  SplitPair data = load_for_config(cfg, data_dir_flag);
  const std::filesystem::path run_dir = make_run_dir(out_root, cfg.hash());
  cfg.save(run_dir / "effective.cfg");
  std::cout << "run directory: " << run_dir.string() << "\n";
  const TrainResult result = train(cfg, data.train, data.test, run_dir);
  std::cout << "steps run: " << result.steps_run
            << (result.stopped_early ? " (stopped early)" : "") << "\n";
  std::cout << "final eval accuracy: " << result.final_eval_accuracy << "\n";
  std::cout << "checkpoints: " << result.checkpoints.size() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const RunConfig& cfg,
             const std::string& data_dir_flag, const std::string& split,
             std::size_t last_n, bool weight_avg) {
  const auto files = collect_checkpoints(checkpoint, last_n);
  Dataset ds = pick_split(load_for_config(cfg, data_dir_flag), split);
  const double err = eval_checkpoint_averaged(files, ds, weight_avg);
  std::cout << "checkpoints: " << files.size() << "\n";
  std::cout << "error rate: " << err << "\n";
  std::cout << "accuracy: " << 1.0 - err << "\n";
  return kExitOk;
}

CapsuleNetwork network_from_checkpoint(const std::string& checkpoint) {
  Checkpoint c = load_checkpoint(collect_checkpoints(checkpoint, 1).front());
  return CapsuleNetwork(std::move(c.config), std::move(c.params));
}

}  // namespace

int cli_run(const std::vector<std::string>& args) {
  CLI::App app{"capsule network training, evaluation, and routing diagnostics"};
  app.require_subcommand(1);

  // Shared flag storage.
  std::string config_file, data_dir_flag, out_root = "runs", split = "test";
  std::string checkpoint, out_file;
  Overrides overrides;
  std::size_t top = 0, count = 64, index = 0, last_n = 0, cases = 100;
  double threshold = 0.15;
  std::uint64_t seed = 7;
  bool weight_avg = false, agg_mean = false;

  CLI::App* train_cmd = app.add_subcommand("train", "train a capsule network");
  train_cmd->add_option("--config", config_file, "config file (key = value lines)");
  train_cmd->add_option("--data-dir", data_dir_flag,
                        "dataset root (default $CAPSROUTE_DATA_DIR)");
  train_cmd->add_option("--out-dir", out_root, "root for run directories");
  overrides.attach(train_cmd);

  CLI::App* eval_cmd =
      app.add_subcommand("eval", "checkpoint-averaged error rate on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file or directory")
      ->required();
  eval_cmd->add_option("--config", config_file, "config file for dataset selection");
  eval_cmd->add_option("--data-dir", data_dir_flag, "dataset root");
  eval_cmd->add_option("--split", split, "train|test");
  eval_cmd->add_option("--last", last_n, "use only the last N checkpoints (0=all)");
  eval_cmd->add_flag("--weight-avg", weight_avg,
                     "average checkpoint weights instead of metrics");
  Overrides eval_overrides;
  eval_overrides.attach(eval_cmd);

  CLI::App* analyze = app.add_subcommand("analyze", "routing and activation diagnostics");
  analyze->require_subcommand(1);
  auto add_analyze_common = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "checkpoint file or directory")
        ->required();
    cmd->add_option("--config", config_file, "config file for dataset selection");
    cmd->add_option("--data-dir", data_dir_flag, "dataset root");
    cmd->add_option("--split", split, "train|test");
    cmd->add_option("--count", count, "number of images to analyze");
    overrides.attach(cmd);
  };
  CLI::App* curve_cmd =
      analyze->add_subcommand("curve", "mean ordered primary activation curve");
  add_analyze_common(curve_cmd);
  curve_cmd->add_option("--top", top, "emit only the largest N positions (0=all)");
  curve_cmd->add_option("--out", out_file, "output CSV path");

  CLI::App* coeff_cmd = analyze->add_subcommand(
      "coeff", "per-capsule max routing coefficient statistic");
  add_analyze_common(coeff_cmd);
  coeff_cmd->add_option("--top", top, "emit only the largest N positions (0=all)");
  coeff_cmd->add_option("--threshold", threshold, "count capsules above this value");
  coeff_cmd->add_option("--out", out_file, "output CSV path");

  CLI::App* influence_cmd = analyze->add_subcommand(
      "influence", "per-capsule influence vs activation norm");
  add_analyze_common(influence_cmd);
  influence_cmd->add_option("--out", out_file, "output CSV path");

  CLI::App* actmap_cmd =
      analyze->add_subcommand("actmap", "primary-layer activation map for one image");
  add_analyze_common(actmap_cmd);
  actmap_cmd->add_option("--index", index, "image index within the split");
  actmap_cmd->add_flag("--mean", agg_mean, "aggregate channels by mean instead of max");
  actmap_cmd->add_option("--out", out_file, "output CSV path");

  CLI::App* synth_cmd = app.add_subcommand(
      "synth-multimnist", "overlay digit pairs into a two-label dataset");
  std::string synth_out = ".";
  std::string synth_base = "mnist";
  std::size_t per_image = 20;
  synth_cmd->add_option("--data-dir", data_dir_flag, "dataset root");
  synth_cmd->add_option("--base", synth_base, "base dataset (mnist|synth-mnist)");
  synth_cmd->add_option("--split", split, "base split to synthesize from");
  synth_cmd->add_option("--per-image", per_image, "overlays per base image");
  synth_cmd->add_option("--seed", seed, "synthesis seed");
  synth_cmd->add_option("--out", synth_out, "output directory");

  CLI::App* gradcheck_cmd = app.add_subcommand(
      "gradcheck", "finite-difference checks for every differentiable primitive");
  gradcheck_cmd->add_option("--seed", seed, "random seed");
  gradcheck_cmd->add_option("--cases", cases, "random cases per primitive");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      return cmd_train(load_config(config_file, overrides), data_dir_flag, out_root);
    }
    if (eval_cmd->parsed()) {
      RunConfig cfg = load_config(config_file, eval_overrides);
      return cmd_eval(checkpoint, cfg, data_dir_flag, split, last_n, weight_avg);
    }
    if (analyze->parsed()) {
      RunConfig cfg = load_config(config_file, overrides);
      CapsuleNetwork net = network_from_checkpoint(checkpoint);
      // The checkpoint's architecture decides the dataset geometry; the
      // config only picks which dataset and split to read.
      Dataset ds = pick_split(load_for_config(cfg, data_dir_flag), split);
      if (curve_cmd->parsed()) {
        const auto curve = ordered_activation_curve(net, ds, count);
        const std::string path = out_file.empty() ? "curve.csv" : out_file;
        write_curve_csv(curve, path, top);
        std::cout << "wrote " << path << "\n";
      } else if (coeff_cmd->parsed()) {
        const auto stat = routing_coeff_stat(net, ds, threshold, count);
        const std::string path = out_file.empty() ? "coeff.csv" : out_file;
        write_coeff_csv(stat, path, top);
        std::cout << "wrote " << path << "\n";
        std::cout << "capsules above " << threshold << " (mean per image): "
                  << stat.mean_count_above << "\n";
      } else if (influence_cmd->parsed()) {
        const auto report = influence_report(net, ds, count);
        const std::string path = out_file.empty() ? "influence.csv" : out_file;
        write_influence_csv(report, path);
        std::cout << "wrote " << path << "\n";
        std::cout << "correlation(influence, activation): " << report.correlation
                  << "\n";
      } else if (actmap_cmd->parsed()) {
        if (index >= ds.size()) {
          throw DataError("image index " + std::to_string(index) +
                          " out of range for split of " + std::to_string(ds.size()));
        }
        const Tensor map = activation_map(net, ds.image(index), agg_mean);
        const std::string path = out_file.empty() ? "actmap.csv" : out_file;
        write_actmap_csv(map, path);
        std::cout << "wrote " << path << "\n";
      }
      return kExitOk;
    }
    if (synth_cmd->parsed()) {
      const auto dir = default_data_dir(data_dir_flag, "");
      Dataset base;
      if (synth_base == "mnist") {
        base = pick_split(load_mnist(dir), split);
      } else if (synth_base == "synth-mnist") {
        base = pick_split(resolve_dataset("synth-mnist", dir), split);
      } else {
        throw DataError("unknown base dataset '" + synth_base + "'");
      }
      const Dataset multi = synthesize_multimnist(base, static_cast<int>(per_image), seed);
      std::filesystem::create_directories(synth_out);
      const std::filesystem::path out_dir = synth_out;
      write_idx_images(multi, out_dir / ("multimnist-" + split + "-images-idx3-ubyte"));
      write_idx_labels(multi, out_dir / ("multimnist-" + split + "-labels-idx2-ubyte"));
      std::cout << "wrote " << multi.size() << " items to " << out_dir.string() << "\n";
      return kExitOk;
    }
    if (gradcheck_cmd->parsed()) {
      const auto results = run_gradient_suite(seed, static_cast<int>(cases));
      bool all_pass = true;
      std::printf("%-26s %6s %12s  %s\n", "primitive", "cases", "max_rel_err",
                  "status");
      for (const auto& r : results) {
        std::printf("%-26s %6d %12.3e  %s\n", r.name.c_str(), r.cases,
                    r.max_rel_err, r.pass ? "PASS" : "FAIL");
        if (!r.pass) all_pass = false;
      }
      return all_pass ? kExitOk : 1;
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    if (!e.last_checkpoint().empty()) {
      std::cerr << "last good checkpoint: " << e.last_checkpoint().string() << "\n";
    }
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

}  // namespace capsroute
