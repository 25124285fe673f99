#pragma once

// AdamW optimization of the negated ELBO with cosine decay, global-norm
// clipping, a seeded validation holdout and best-validation checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "stemfold/dataset.hpp"
#include "stemfold/model.hpp"

namespace stemfold {

struct TrainConfig {
  ModelConfig model;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-3;
  double grad_clip_norm = 10.0;
  int batch_size = 128;
  int epochs = 100;
  std::uint64_t seed = 1991;
  double val_fraction = 0.1;
  // Samples per tape; bounds peak memory.
  int micro_batch = 8;
  int threads = 1;
  bool deterministic = true;
  // Caps the optimizer steps (0 = epochs * steps per epoch).
  long max_steps = 0;

  void validate() const;
  void write(KeyValueFile& kv) const;
  static TrainConfig read(const KeyValueFile& kv);
};

// base_lr * (1 + cos(pi * step / total)) / 2; steps past the end clamp to 0.
double cosine_lr(long step, long total_steps, double base_lr);

// Scales grads in place to global L2 norm <= max_norm. Returns the norm before
// clipping. Non-finite gradients raise TrainingDiverged.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

// Adam moments with decoupled weight decay.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr);
  long steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct TrainLogRow {
  int epoch = 0;
  double train_loss = 0.0;  // mean negated ELBO per sample over the epoch
  double val_mse = 0.0;     // MSE at the last forecast step
  double lr = 0.0;          // learning rate of the last step in the epoch
  double wall_seconds = 0.0;
};

struct TrainResult {
  ParamSet params;       // final parameters
  ParamSet best_params;  // parameters with the lowest validation MSE
  int best_epoch = 0;
  double best_val_mse = 0.0;
  std::vector<TrainLogRow> log;
  std::vector<double> step_loss;  // per optimizer step
  std::vector<double> step_lr;
  double max_clipped_norm = 0.0;  // largest post-clip gradient norm seen
  long total_steps = 0;
  std::vector<std::size_t> train_indices, val_indices;
};

using EpochCallback = std::function<void(const TrainLogRow&)>;

// Seeded holdout of round(val_fraction * n) samples (none when n < 2).
void split_validation(std::size_t n, double val_fraction, std::uint64_t seed,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& val);

TrainResult train(const ObservedDataset& data, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});
// Continues from given initial parameters instead of a fresh initialization.
TrainResult train(const ObservedDataset& data, const TrainConfig& cfg, ParamSet init,
                  const EpochCallback& on_epoch = {});

// Mean-mode forecasts (N x t_f x 4 each) for many samples.
std::vector<Tensor> predict_forecasts(const ParamSet& params, const ModelConfig& cfg,
                                      std::span<const ObservedSample* const> samples, int t_h,
                                      int t_f, double obs_dt, int micro_batch = 8,
                                      int threads = 1);

// Ground truth of the forecast window as N x t_f x 4.
Tensor target_window(const ObservedSample& sample, int t_h, int t_f);
// MSE over agents and features at forecast step `step` (1-based).
double sample_mse_at_step(const Tensor& pred, const Tensor& target, int step);

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows);

// Runs fn(0..n-1) on up to `threads` workers; exceptions are rethrown in index order.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace stemfold
