#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "capsroute/network.hpp"

namespace capsroute {

/// Margin-loss hinge parameters.
struct MarginLossParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_down = 0.5;

  void validate() const;
};

/// Full experiment description. Every field has a key in the flat key=value
/// config format (see to_key_values), and every key can be set from file or
/// overridden on the command line.
struct RunConfig {
  std::string preset = "desk-mnist";
  std::string dataset = "synth-mnist";  // mnist | cifar10 | synth-mnist | synth-cifar
  std::string data_dir;                 // empty -> $CAPSROUTE_DATA_DIR

  NetworkConfig network;
  double init_routing_w_stddev = 0.1;

  MarginLossParams loss;

  // Optimizer: adaptive moment estimation plus exponential step decay.
  double adam_lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lr_decay_rate = 0.96;
  std::uint64_t lr_decay_steps = 2000;

  std::uint64_t batch_size = 128;
  std::uint64_t steps = 5000;
  std::uint64_t seed = 1;

  double weight_decay = 0.0;    // lambda on the squared weight norm
  double dropout_keep = 1.0;    // 1 = off; drops whole primary capsules
  bool dropout_elementwise = false;

  int augment_shift_px = 0;     // random +-k px training shifts, zero fill

  std::uint64_t checkpoint_gap = 1500;
  std::uint64_t eval_checkpoints = 40;  // how many trailing checkpoints eval averages
  std::uint64_t eval_interval = 500;
  std::uint64_t log_interval = 100;
  std::uint64_t train_subset_per_class = 0;  // 0 = whole split
  std::uint64_t test_subset_per_class = 0;
  double stop_at_accuracy = 0.0;  // early stop once eval accuracy reaches this
  bool average_weights_on_eval = false;
  std::uint64_t threads = 1;
  bool prefetch = false;

  // MultiMNIST synthesis knobs.
  std::uint64_t multimnist_per_image = 20;

  void validate() const;

  /// Canonical sorted key=value map; the config hash is computed over it.
  std::map<std::string, std::string> to_key_values() const;
  void set(const std::string& key, const std::string& value);

  /// FNV-1a 64 over the canonical serialization, as 16 hex digits.
  std::string hash() const;

  static RunConfig from_file(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;

  /// Applies one of the named architecture presets.
  void apply_preset(const std::string& name);
};

std::string activation_kind_name(const ActivationFn& a);
ActivationFn::Kind parse_activation_kind(const std::string& name);

}  // namespace capsroute
