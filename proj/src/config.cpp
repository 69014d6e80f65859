#include "capsroute/config.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace capsroute {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("config: bad boolean '" + s + "'");
}

std::uint64_t parse_u64(const std::string& s) { return std::stoull(s); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

void MarginLossParams::validate() const {
  if (!(0.0 < m_minus && m_minus < m_plus && m_plus <= 1.0)) {
    throw std::invalid_argument("margin loss: need 0 < m_minus < m_plus <= 1");
  }
  if (lambda_down < 0.0) {
    throw std::invalid_argument("margin loss: lambda_down must be >= 0");
  }
}

std::string activation_kind_name(const ActivationFn& a) {
  switch (a.kind) {
    case ActivationFn::Kind::OriginalSquash:
      return "squash";
    case ActivationFn::Kind::CISquash:
      return "ci";
    case ActivationFn::Kind::PoweredActivation:
      return "pa";
  }
  return "?";
}

ActivationFn::Kind parse_activation_kind(const std::string& name) {
  if (name == "squash") return ActivationFn::Kind::OriginalSquash;
  if (name == "ci") return ActivationFn::Kind::CISquash;
  if (name == "pa") return ActivationFn::Kind::PoweredActivation;
  throw std::invalid_argument("config: unknown activation '" + name +
                              "' (expected squash|ci|pa)");
}

void RunConfig::validate() const {
  network.validate();
  loss.validate();
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) {
    throw std::invalid_argument("config: dropout_keep must be in (0, 1]");
  }
  if (weight_decay < 0.0) {
    throw std::invalid_argument("config: weight_decay must be >= 0");
  }
  if (threads < 1) throw std::invalid_argument("config: threads must be >= 1");
  if (adam_lr < 0.0) throw std::invalid_argument("config: adam_lr must be >= 0");
}

std::map<std::string, std::string> RunConfig::to_key_values() const {
  std::map<std::string, std::string> kv;
  kv["preset"] = preset;
  kv["dataset"] = dataset;
  kv["data_dir"] = data_dir;
  kv["activation"] = activation_kind_name(network.activation);
  kv["pa_n"] = std::to_string(network.activation.pa_n);
  kv["ci_bar"] = fmt_double(network.activation.ci_bar);
  kv["ci_exponent"] = std::to_string(network.activation.ci_exponent);
  kv["in_channels"] = std::to_string(network.in_channels);
  kv["in_h"] = std::to_string(network.in_h);
  kv["in_w"] = std::to_string(network.in_w);
  kv["conv1_channels"] = std::to_string(network.conv1_channels);
  kv["conv1_pad"] = std::to_string(network.conv1_pad);
  kv["prim_channels"] = std::to_string(network.prim_channels);
  kv["prim_dim"] = std::to_string(network.prim_dim);
  kv["digit_dim"] = std::to_string(network.digit_dim);
  kv["num_classes"] = std::to_string(network.num_classes);
  kv["routing_iters"] = std::to_string(network.routing_iters);
  kv["init_routing_w_stddev"] = fmt_double(init_routing_w_stddev);
  kv["m_plus"] = fmt_double(loss.m_plus);
  kv["m_minus"] = fmt_double(loss.m_minus);
  kv["lambda_down"] = fmt_double(loss.lambda_down);
  kv["adam_lr"] = fmt_double(adam_lr);
  kv["adam_beta1"] = fmt_double(adam_beta1);
  kv["adam_beta2"] = fmt_double(adam_beta2);
  kv["adam_eps"] = fmt_double(adam_eps);
  kv["lr_decay_rate"] = fmt_double(lr_decay_rate);
  kv["lr_decay_steps"] = std::to_string(lr_decay_steps);
  kv["batch_size"] = std::to_string(batch_size);
  kv["steps"] = std::to_string(steps);
  kv["seed"] = std::to_string(seed);
  kv["weight_decay"] = fmt_double(weight_decay);
  kv["dropout_keep"] = fmt_double(dropout_keep);
  kv["dropout_elementwise"] = fmt_bool(dropout_elementwise);
  kv["augment_shift_px"] = std::to_string(augment_shift_px);
  kv["checkpoint_gap"] = std::to_string(checkpoint_gap);
  kv["eval_checkpoints"] = std::to_string(eval_checkpoints);
  kv["eval_interval"] = std::to_string(eval_interval);
  kv["log_interval"] = std::to_string(log_interval);
  kv["train_subset_per_class"] = std::to_string(train_subset_per_class);
  kv["test_subset_per_class"] = std::to_string(test_subset_per_class);
  kv["stop_at_accuracy"] = fmt_double(stop_at_accuracy);
  kv["average_weights_on_eval"] = fmt_bool(average_weights_on_eval);
  kv["threads"] = std::to_string(threads);
  kv["prefetch"] = fmt_bool(prefetch);
  kv["multimnist_per_image"] = std::to_string(multimnist_per_image);
  return kv;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "preset") {
    apply_preset(value);
  } else if (key == "dataset") {
    dataset = value;
  } else if (key == "data_dir") {
    data_dir = value;
  } else if (key == "activation") {
    network.activation.kind = parse_activation_kind(value);
  } else if (key == "pa_n") {
    network.activation.pa_n = std::stoi(value);
  } else if (key == "ci_bar") {
    network.activation.ci_bar = std::stod(value);
  } else if (key == "ci_exponent") {
    network.activation.ci_exponent = std::stoi(value);
  } else if (key == "in_channels") {
    network.in_channels = parse_u64(value);
  } else if (key == "in_h") {
    network.in_h = parse_u64(value);
  } else if (key == "in_w") {
    network.in_w = parse_u64(value);
  } else if (key == "conv1_channels") {
    network.conv1_channels = parse_u64(value);
  } else if (key == "conv1_pad") {
    network.conv1_pad = parse_u64(value);
  } else if (key == "prim_channels") {
    network.prim_channels = parse_u64(value);
  } else if (key == "prim_dim") {
    network.prim_dim = parse_u64(value);
  } else if (key == "digit_dim") {
    network.digit_dim = parse_u64(value);
  } else if (key == "num_classes") {
    network.num_classes = parse_u64(value);
  } else if (key == "routing_iters") {
    network.routing_iters = std::stoi(value);
  } else if (key == "init_routing_w_stddev") {
    init_routing_w_stddev = std::stod(value);
  } else if (key == "m_plus") {
    loss.m_plus = std::stod(value);
  } else if (key == "m_minus") {
    loss.m_minus = std::stod(value);
  } else if (key == "lambda_down") {
    loss.lambda_down = std::stod(value);
  } else if (key == "adam_lr") {
    adam_lr = std::stod(value);
  } else if (key == "adam_beta1") {
    adam_beta1 = std::stod(value);
  } else if (key == "adam_beta2") {
    adam_beta2 = std::stod(value);
  } else if (key == "adam_eps") {
    adam_eps = std::stod(value);
  } else if (key == "lr_decay_rate") {
    lr_decay_rate = std::stod(value);
  } else if (key == "lr_decay_steps") {
    lr_decay_steps = parse_u64(value);
  } else if (key == "batch_size") {
    batch_size = parse_u64(value);
  } else if (key == "steps") {
    steps = parse_u64(value);
  } else if (key == "seed") {
    seed = parse_u64(value);
  } else if (key == "weight_decay") {
    weight_decay = std::stod(value);
  } else if (key == "dropout_keep") {
    dropout_keep = std::stod(value);
  } else if (key == "dropout_elementwise") {
    dropout_elementwise = parse_bool(value);
  } else if (key == "augment_shift_px") {
    augment_shift_px = std::stoi(value);
  } else if (key == "checkpoint_gap") {
    checkpoint_gap = parse_u64(value);
  } else if (key == "eval_checkpoints") {
    eval_checkpoints = parse_u64(value);
  } else if (key == "eval_interval") {
    eval_interval = parse_u64(value);
  } else if (key == "log_interval") {
    log_interval = parse_u64(value);
  } else if (key == "train_subset_per_class") {
    train_subset_per_class = parse_u64(value);
  } else if (key == "test_subset_per_class") {
    test_subset_per_class = parse_u64(value);
  } else if (key == "stop_at_accuracy") {
    stop_at_accuracy = std::stod(value);
  } else if (key == "average_weights_on_eval") {
    average_weights_on_eval = parse_bool(value);
  } else if (key == "threads") {
    threads = parse_u64(value);
  } else if (key == "prefetch") {
    prefetch = parse_bool(value);
  } else if (key == "multimnist_per_image") {
    multimnist_per_image = parse_u64(value);
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [k, v] : to_key_values()) {
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig RunConfig::from_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) {
    throw std::runtime_error("config: cannot open " + file.string());
  }
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: " + file.string() + ":" +
                               std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("config: cannot write " + file.string());
  }
  for (const auto& [k, v] : to_key_values()) {
    out << k << " = " << v << "\n";
  }
}

void RunConfig::apply_preset(const std::string& name) {
  preset = name;
  if (name == "mnist") {
    network = NetworkConfig{};
    network.in_channels = 1;
    network.in_h = network.in_w = 28;
    network.conv1_channels = 256;
    network.conv1_pad = 0;
    network.prim_channels = 32;
    dataset = "mnist";
    augment_shift_px = 2;
    batch_size = 128;
  } else if (name == "cifar10-prim8" || name == "cifar10-prim64") {
    network = NetworkConfig{};
    network.in_channels = 3;
    network.in_h = network.in_w = 32;
    network.conv1_channels = 256;
    network.conv1_pad = 4;  // keeps 32x32 maps so the primary grid is 12x12
    network.prim_channels = name == "cifar10-prim8" ? 8 : 64;
    dataset = "cifar10";
    augment_shift_px = 0;
    batch_size = 128;
  } else if (name == "multimnist") {
    network = NetworkConfig{};
    network.in_channels = 1;
    network.in_h = network.in_w = 36;
    network.conv1_channels = 256;
    network.conv1_pad = 0;
    network.prim_channels = 32;
    dataset = "multimnist";
    augment_shift_px = 0;
    batch_size = 128;
  } else if (name == "desk-mnist") {
    network = NetworkConfig{};
    network.in_channels = 1;
    network.in_h = network.in_w = 28;
    network.conv1_channels = 16;
    network.conv1_pad = 0;
    network.prim_channels = 2;
    dataset = "synth-mnist";
    augment_shift_px = 0;
    batch_size = 16;
    steps = 5000;
    lr_decay_rate = 1.0;
    checkpoint_gap = 1000;
    eval_interval = 100;
    log_interval = 25;
    train_subset_per_class = 100;
    test_subset_per_class = 50;
  } else if (name == "desk-cifar") {
    network = NetworkConfig{};
    network.in_channels = 3;
    network.in_h = network.in_w = 32;
    network.conv1_channels = 8;
    network.conv1_pad = 4;
    network.prim_channels = 2;
    dataset = "synth-cifar";
    augment_shift_px = 0;
    batch_size = 16;
    steps = 400;
    lr_decay_rate = 1.0;
    checkpoint_gap = 200;
    eval_interval = 100;
    log_interval = 25;
    train_subset_per_class = 100;
    test_subset_per_class = 30;
  } else if (name == "desk-multimnist") {
    network = NetworkConfig{};
    network.in_channels = 1;
    network.in_h = network.in_w = 36;
    network.conv1_channels = 16;
    network.conv1_pad = 0;
    network.prim_channels = 2;
    dataset = "synth-multimnist";
    augment_shift_px = 0;
    batch_size = 16;
    steps = 1000;
    lr_decay_rate = 1.0;
    checkpoint_gap = 500;
    eval_interval = 200;
    log_interval = 50;
    train_subset_per_class = 100;
    test_subset_per_class = 20;
  } else {
    throw std::invalid_argument("config: unknown preset '" + name + "'");
  }
}

}  // namespace capsroute
