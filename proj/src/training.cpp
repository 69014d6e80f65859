#include "capsroute/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>

#include "capsroute/bounded_queue.hpp"
#include "capsroute/checkpoint.hpp"
#include "capsroute/parallel.hpp"
#include "capsroute/rng.hpp"

namespace capsroute {

AdamOptimizer::AdamOptimizer(double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(NetworkParams& params, const NetworkParams& grads,
                         double lr) {
  auto p_entries = params.entries();
  auto g_entries = const_cast<NetworkParams&>(grads).entries();
  if (m_.empty()) {
    m_.resize(p_entries.size());
    v_.resize(p_entries.size());
    for (std::size_t i = 0; i < p_entries.size(); ++i) {
      m_[i].assign(p_entries[i].second->size(), 0.0);
      v_[i].assign(p_entries[i].second->size(), 0.0);
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < p_entries.size(); ++i) {
    Tensor& p = *p_entries[i].second;
    const Tensor& g = *g_entries[i].second;
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double margin_loss_value(const Tensor& class_activations, const LabelSet& labels,
                         const MarginLossParams& params) {
  Tape tape;
  Var a = tape.constant(class_activations);
  Var l = tape.margin_loss(a, labels.to_vector(), params.m_plus, params.m_minus,
                           params.lambda_down);
  return tape.value(l)[0];
}

bool prediction_correct(const Tensor& class_activations, const LabelSet& labels) {
  const std::size_t k_n = class_activations.size();
  if (labels.single()) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < k_n; ++k) {
      if (class_activations[k] > class_activations[best]) best = k;
    }
    return static_cast<int>(best) == labels.first;
  }
  // Two-label items: the two true classes must hold the two largest activations.
  std::size_t top1 = 0, top2 = 1;
  if (class_activations[top2] > class_activations[top1]) std::swap(top1, top2);
  for (std::size_t k = 2; k < k_n; ++k) {
    if (class_activations[k] > class_activations[top1]) {
      top2 = top1;
      top1 = k;
    } else if (class_activations[k] > class_activations[top2]) {
      top2 = k;
    }
  }
  return labels.contains(static_cast<int>(top1)) &&
         labels.contains(static_cast<int>(top2));
}

SampleOutcome train_sample(const NetworkConfig& net_cfg,
                           const NetworkParams& params,
                           const MarginLossParams& loss_params,
                           const Tensor& image, const LabelSet& labels,
                           const Tensor* capsule_dropout_scale,
                           const Tensor* element_dropout_mask,
                           NetworkParams& grads) {
  Tape tape;
  BoundParams bound = bind_params(tape, params, true);
  Var img = tape.constant(image);
  ForwardVars fv = network_forward(tape, net_cfg, bound, img,
                                   capsule_dropout_scale, element_dropout_mask);
  Var loss = tape.margin_loss(fv.class_activations, labels.to_vector(),
                              loss_params.m_plus, loss_params.m_minus,
                              loss_params.lambda_down);
  tape.backward(loss);

  auto accumulate = [&tape](Tensor& dst, Var src) {
    const Tensor& g = tape.grad(src);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
  };
  accumulate(grads.conv1_w, bound.conv1_w);
  accumulate(grads.conv1_b, bound.conv1_b);
  accumulate(grads.conv2_w, bound.conv2_w);
  accumulate(grads.conv2_b, bound.conv2_b);
  accumulate(grads.routing_w, bound.routing_w);

  SampleOutcome out;
  out.loss = tape.value(loss)[0];
  out.correct = prediction_correct(tape.value(fv.class_activations), labels);
  return out;
}

Tensor draw_capsule_dropout(Rng& rng, std::size_t num_capsules, double keep_prob) {
  Tensor scales({num_capsules});
  for (double& v : scales.storage()) {
    v = rng.bernoulli(keep_prob) ? 1.0 / keep_prob : 0.0;
  }
  return scales;
}

double accuracy(const CapsuleNetwork& net, const Dataset& ds) {
  if (ds.size() == 0) {
    throw std::invalid_argument("accuracy: empty dataset");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor acts = net.evaluate(ds.image(i)).class_activations;
    if (prediction_correct(acts, ds.labels[i])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

NetworkParams zero_like(const NetworkParams& p) {
  NetworkParams z;
  z.conv1_w = Tensor::zeros(p.conv1_w.shape());
  z.conv1_b = Tensor::zeros(p.conv1_b.shape());
  z.conv2_w = Tensor::zeros(p.conv2_w.shape());
  z.conv2_b = Tensor::zeros(p.conv2_b.shape());
  z.routing_w = Tensor::zeros(p.routing_w.shape());
  return z;
}

struct PreparedSample {
  Tensor image;
  LabelSet labels;
  Tensor capsule_scale;  // empty when dropout off
  Tensor element_mask;   // empty unless elementwise dropout
};

using PreparedBatch = std::vector<PreparedSample>;

/// Draws everything random for one batch, in a fixed order, so results do not
/// depend on whether batches are prepared inline or on a prefetch thread.
class BatchBuilder {
 public:
  BatchBuilder(const RunConfig& cfg, const Dataset& train, std::uint64_t seed)
      : cfg_(cfg), train_(train), rng_(seed) {
    order_.resize(train.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
  }

  PreparedBatch next() {
    PreparedBatch batch;
    batch.reserve(cfg_.batch_size);
    const std::size_t n_caps = cfg_.network.num_primary();
    const std::size_t prim_dim = cfg_.network.prim_dim;
    for (std::uint64_t b = 0; b < cfg_.batch_size; ++b) {
      if (cursor_ == order_.size()) {
        cursor_ = 0;
        rng_.shuffle(order_);
      }
      const std::size_t idx = order_[cursor_++];
      PreparedSample s;
      s.labels = train_.labels[idx];
      if (cfg_.augment_shift_px > 0) {
        const int dx = static_cast<int>(
            rng_.range(-cfg_.augment_shift_px, cfg_.augment_shift_px));
        const int dy = static_cast<int>(
            rng_.range(-cfg_.augment_shift_px, cfg_.augment_shift_px));
        s.image = shifted_image(train_.image(idx), dx, dy);
      } else {
        s.image = train_.image(idx);
      }
      if (cfg_.dropout_keep < 1.0) {
        if (cfg_.dropout_elementwise) {
          s.element_mask = Tensor({n_caps, prim_dim});
          for (double& v : s.element_mask.storage()) {
            v = rng_.bernoulli(cfg_.dropout_keep) ? 1.0 / cfg_.dropout_keep : 0.0;
          }
        } else {
          s.capsule_scale = draw_capsule_dropout(rng_, n_caps, cfg_.dropout_keep);
        }
      }
      batch.push_back(std::move(s));
    }
    return batch;
  }

 private:
  const RunConfig& cfg_;
  const Dataset& train_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

double weight_norm_sq(const NetworkParams& p) {
  double s = 0.0;
  for (const auto& [name, t] : p.entries()) {
    for (double v : t->storage()) s += v * v;
  }
  return s;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_split,
                  const Dataset& test_split,
                  const std::filesystem::path& run_dir) {
  cfg.validate();
  if (train_split.size() == 0 || test_split.size() == 0) {
    throw std::invalid_argument("train: empty dataset split");
  }
  std::filesystem::create_directories(run_dir / "checkpoints");

  Rng init_rng(cfg.seed);
  NetworkParams params =
      NetworkParams::init(cfg.network, init_rng, cfg.init_routing_w_stddev);
  AdamOptimizer opt(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  const std::string config_hash = cfg.hash();

  // Training-time randomness comes from an independent stream so adding or
  // removing parameters does not shift batch order.
  BatchBuilder builder(cfg, train_split, cfg.seed + 1);

  BoundedQueue<PreparedBatch> queue(4);
  std::thread producer;
  if (cfg.prefetch) {
    producer = std::thread([&] {
      for (std::uint64_t s = 0; s < cfg.steps; ++s) queue.push(builder.next());
      queue.close();
    });
  }
  auto next_batch = [&]() -> PreparedBatch {
    if (cfg.prefetch) {
      auto item = queue.pop();
      if (!item) throw std::logic_error("train: prefetch queue closed early");
      return std::move(*item);
    }
    return builder.next();
  };
  auto shutdown_producer = [&] {
    if (cfg.prefetch) {
      queue.close();
      // Drain so a blocked push wakes up before join.
      while (queue.pop().has_value()) {
      }
      if (producer.joinable()) producer.join();
    }
  };

  TrainResult result;
  std::filesystem::path last_checkpoint;
  std::uint64_t last_saved_step = 0;
  auto save_at = [&](std::uint64_t step) {
    char name[64];
    std::snprintf(name, sizeof(name), "ckpt_%08llu.caps",
                  static_cast<unsigned long long>(step));
    const std::filesystem::path file = run_dir / "checkpoints" / name;
    save_checkpoint(Checkpoint{cfg.network, params, step, config_hash}, file);
    result.checkpoints.push_back(file);
    last_checkpoint = file;
    last_saved_step = step;
  };

  double interval_loss = 0.0;
  std::uint64_t interval_correct = 0, interval_samples = 0, interval_steps = 0;
  double last_eval = -1.0;

  std::vector<NetworkParams> sample_grads;
  std::vector<SampleOutcome> outcomes(cfg.batch_size);

  for (std::uint64_t step = 1; step <= cfg.steps; ++step) {
    PreparedBatch batch = next_batch();

    sample_grads.clear();
    sample_grads.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      sample_grads.push_back(zero_like(params));
    }
    parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
      const PreparedSample& s = batch[i];
      outcomes[i] = train_sample(
          cfg.network, params, cfg.loss, s.image, s.labels,
          s.capsule_scale.size() ? &s.capsule_scale : nullptr,
          s.element_mask.size() ? &s.element_mask : nullptr, sample_grads[i]);
    });

    // Reduce in index order: results are bitwise independent of thread count.
    NetworkParams grads = zero_like(params);
    double batch_loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      batch_loss += outcomes[i].loss;
      if (outcomes[i].correct) ++interval_correct;
      auto ge = grads.entries();
      auto se = sample_grads[i].entries();
      for (std::size_t e = 0; e < ge.size(); ++e) {
        Tensor& dst = *ge[e].second;
        const Tensor& src = *se[e].second;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (auto& [name, t] : grads.entries()) {
      for (double& v : t->storage()) v *= inv_b;
    }
    batch_loss *= inv_b;

    if (cfg.weight_decay > 0.0) {
      batch_loss += cfg.weight_decay * weight_norm_sq(params);
      auto ge = grads.entries();
      auto pe = params.entries();
      for (std::size_t e = 0; e < ge.size(); ++e) {
        Tensor& g = *ge[e].second;
        const Tensor& p = *pe[e].second;
        for (std::size_t k = 0; k < g.size(); ++k) {
          g[k] += 2.0 * cfg.weight_decay * p[k];
        }
      }
    }

    if (!std::isfinite(batch_loss)) {
      shutdown_producer();
      write_train_log_csv(result.log, run_dir / "train_log.csv");
      throw DivergenceError("train: loss diverged to " + std::to_string(batch_loss) +
                                " at step " + std::to_string(step),
                            last_checkpoint);
    }

    const double lr =
        cfg.adam_lr * std::pow(cfg.lr_decay_rate,
                               static_cast<double>(step) /
                                   static_cast<double>(cfg.lr_decay_steps));
    opt.step(params, grads, lr);

    interval_loss += batch_loss;
    interval_samples += batch.size();
    ++interval_steps;
    result.steps_run = step;

    const bool do_eval = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
    if (do_eval) {
      CapsuleNetwork net(cfg.network, params);
      last_eval = accuracy(net, test_split);
    }
    if (step % cfg.log_interval == 0 || do_eval || step == cfg.steps) {
      TrainLogRow row;
      row.step = step;
      row.loss = interval_loss / static_cast<double>(interval_steps);
      row.train_acc =
          static_cast<double>(interval_correct) / static_cast<double>(interval_samples);
      row.eval_acc = do_eval ? last_eval : -1.0;
      result.log.push_back(row);
      interval_loss = 0.0;
      interval_correct = 0;
      interval_samples = 0;
      interval_steps = 0;
    }
    if (cfg.checkpoint_gap > 0 && step % cfg.checkpoint_gap == 0) {
      save_at(step);
    }
    if (do_eval && cfg.stop_at_accuracy > 0.0 && last_eval >= cfg.stop_at_accuracy) {
      result.stopped_early = true;
      break;
    }
  }

  shutdown_producer();
  if (last_saved_step != result.steps_run) {
    save_at(result.steps_run);
  }

  if (last_eval < 0.0) {
    CapsuleNetwork net(cfg.network, params);
    last_eval = accuracy(net, test_split);
  }
  result.final_eval_accuracy = last_eval;
  write_train_log_csv(result.log, run_dir / "train_log.csv");
  return result;
}

double eval_checkpoint_averaged(const std::vector<std::filesystem::path>& checkpoints,
                                const Dataset& test_set, bool average_weights) {
  if (checkpoints.empty()) {
    throw std::invalid_argument("eval: need at least one checkpoint");
  }
  if (test_set.size() == 0) {
    throw std::invalid_argument("eval: empty test set");
  }
  if (average_weights) {
    Checkpoint first = load_checkpoint(checkpoints.front());
    NetworkParams acc = std::move(first.params);
    for (std::size_t i = 1; i < checkpoints.size(); ++i) {
      Checkpoint c = load_checkpoint(checkpoints[i]);
      auto ae = acc.entries();
      auto ce = c.params.entries();
      for (std::size_t e = 0; e < ae.size(); ++e) {
        Tensor& dst = *ae[e].second;
        const Tensor& src = *ce[e].second;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
    const double inv = 1.0 / static_cast<double>(checkpoints.size());
    for (auto& [name, t] : acc.entries()) {
      for (double& v : t->storage()) v *= inv;
    }
    CapsuleNetwork net(first.config, std::move(acc));
    return error_rate(net, test_set);
  }
  double sum = 0.0;
  for (const auto& file : checkpoints) {
    Checkpoint c = load_checkpoint(file);
    CapsuleNetwork net(std::move(c.config), std::move(c.params));
    sum += error_rate(net, test_set);
  }
  return sum / static_cast<double>(checkpoints.size());
}

void write_train_log_csv(const std::vector<TrainLogRow>& log,
                         const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) {
    throw std::runtime_error("train log: cannot write " + file.string());
  }
  out << "step,loss,train_acc,eval_acc\n";
  for (const TrainLogRow& row : log) {
    out << row.step << "," << row.loss << "," << row.train_acc << ",";
    if (row.eval_acc >= 0.0) out << row.eval_acc;
    out << "\n";
  }
}

}  // namespace capsroute
