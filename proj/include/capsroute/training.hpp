#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsroute/config.hpp"
#include "capsroute/data.hpp"
#include "capsroute/network.hpp"
#include "capsroute/rng.hpp"

namespace capsroute {

/// Raised when the training loss stops being finite. The last checkpoint
/// written before the divergence is retained and reported.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& msg, std::filesystem::path last_checkpoint)
      : std::runtime_error(msg), last_checkpoint_(std::move(last_checkpoint)) {}
  const std::filesystem::path& last_checkpoint() const { return last_checkpoint_; }

 private:
  std::filesystem::path last_checkpoint_;
};

/// Adaptive moment estimation over a parameter set.
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1, double beta2, double eps);
  void step(NetworkParams& params, const NetworkParams& grads, double lr);

 private:
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Margin loss plus gradient-producing forward/backward for one sample.
/// Returns the loss; accumulates parameter gradients into `grads` (which must
/// be zero-shaped like the params) and reports whether the prediction was
/// correct under the sample's label set.
struct SampleOutcome {
  double loss = 0.0;
  bool correct = false;
};
SampleOutcome train_sample(const NetworkConfig& net_cfg,
                           const NetworkParams& params,
                           const MarginLossParams& loss_params,
                           const Tensor& image, const LabelSet& labels,
                           const Tensor* capsule_dropout_scale,
                           const Tensor* element_dropout_mask,
                           NetworkParams& grads);

/// Scalar margin loss over class activations for a label set.
double margin_loss_value(const Tensor& class_activations, const LabelSet& labels,
                         const MarginLossParams& params);

/// Prediction correctness: argmax for single-label items, top-2 set match for
/// two-label items.
bool prediction_correct(const Tensor& class_activations, const LabelSet& labels);

double accuracy(const CapsuleNetwork& net, const Dataset& ds);
inline double error_rate(const CapsuleNetwork& net, const Dataset& ds) {
  return 1.0 - accuracy(net, ds);
}

/// Capsule-wise dropout scales: entry i is 1/keep_prob with probability
/// keep_prob and 0 otherwise. Applied at train time only.
Tensor draw_capsule_dropout(Rng& rng, std::size_t num_capsules, double keep_prob);

struct TrainLogRow {
  std::uint64_t step = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = -1.0;  // negative when no evaluation ran at this step
};

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;
  std::vector<TrainLogRow> log;
  std::uint64_t steps_run = 0;
  double final_eval_accuracy = 0.0;
  bool stopped_early = false;
};

/// Runs the full training loop. Deterministic given the config seed: batch
/// order, augmentation shifts, dropout masks, and parameter updates replay
/// bit-identically. Writes checkpoints and a CSV log under run_dir.
TrainResult train(const RunConfig& cfg, const Dataset& train_split,
                  const Dataset& test_split,
                  const std::filesystem::path& run_dir);

/// Mean of per-checkpoint error rates (metric averaging). With
/// average_weights set, the checkpoints' weights are averaged into a single
/// model first and that model's error rate is returned.
double eval_checkpoint_averaged(const std::vector<std::filesystem::path>& checkpoints,
                                const Dataset& test_set,
                                bool average_weights = false);

void write_train_log_csv(const std::vector<TrainLogRow>& log,
                         const std::filesystem::path& file);

}  // namespace capsroute
