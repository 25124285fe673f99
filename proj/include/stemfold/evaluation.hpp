#pragma once

// Forecast metrics, baseline and ablation runs, the hidden-fraction sweep and
// attention-map export.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stemfold/baselines.hpp"
#include "stemfold/dataset.hpp"
#include "stemfold/training.hpp"

namespace stemfold {

struct StepStats {
  double mean = 0.0;
  double std = 0.0;  // population std across samples (or seeds)
};

StepStats mean_std(std::span<const double> values);

// Per-sample MSE (agents x features) at forecast step `step` (1-based),
// summarized across samples. Throws InvalidArgument for a step outside [1, T_f].
StepStats mse_at_step(std::span<const Tensor> preds, std::span<const Tensor> targets, int step);

struct EvalReport {
  std::string model = "stemfold";
  std::string variant = "original";
  std::vector<StepStats> per_step;  // entry k is forecast step k + 1
  std::string config_fingerprint;
  std::vector<std::uint64_t> seeds;
  std::size_t n_samples = 0;

  StepStats at(int step) const;
  std::vector<double> curve() const;
  // Columns: step, mse_mean, mse_std.
  void write_csv(const std::filesystem::path& path) const;
  KeyValueFile summary() const;
};

EvalReport evaluate_forecasts(std::span<const Tensor> preds, std::span<const Tensor> targets);
EvalReport evaluate_model(const ParamSet& params, const ModelConfig& cfg, const ObservedDataset& test,
                          int threads = 1);
EvalReport evaluate_baseline(const BaselineModel& model, const ObservedDataset& test, int threads = 1);

std::string config_fingerprint(const TrainConfig& cfg);

// Trains the baseline on `train` and evaluates it on `test`.
EvalReport run_baseline(BaselineKind kind, const ObservedDataset& train, const ObservedDataset& test,
                        const TrainConfig& cfg, int hidden = 128);

inline const std::vector<std::string> kAblationVariants = {"original", "fully_connected",
                                                           "no_attention", "no_temporal_encoding"};
// Applies a variant name to a base config (flags off except the named one).
ModelConfig apply_variant(ModelConfig base, const std::string& variant);

struct AblationCell {
  std::string variant;
  std::uint64_t seed = 0;
  double mse = 0.0;      // mean MSE at the last forecast step
  double mse_std = 0.0;  // across test samples
};

struct AblationReport {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationCell> cells;  // variant-major
  int step = 30;

  const AblationCell& cell(const std::string& variant, std::uint64_t seed) const;
  StepStats across_seeds(const std::string& variant) const;
  void write_csv(const std::filesystem::path& path) const;
  std::string table() const;
};

using ProgressFn = std::function<void(const std::string&)>;

AblationReport run_ablation_suite(const ObservedDataset& train, const ObservedDataset& test,
                                  const TrainConfig& base, std::span<const std::uint64_t> seeds,
                                  std::span<const std::string> variants = kAblationVariants,
                                  const ProgressFn& progress = {});

// Sequence-attention pooling weights of each visible agent over the encoder
// window. `raw` rows are probability vectors over the agent's observed steps;
// `scaled` divides each row by its maximum so values lie in [0, 1].
struct AttentionMap {
  Tensor raw;     // N x T_h
  Tensor scaled;  // N x T_h
};

AttentionMap export_attention_maps(const ParamSet& params, const ModelConfig& cfg,
                                   const ObservedSample& sample, int t_h);
// Writes <stem>.stemtens (scaled), <stem>_raw.stemtens and <stem>.csv.
void write_attention_map(const std::filesystem::path& dir, const std::string& stem,
                         const AttentionMap& map);

struct SweepReport {
  std::vector<double> fractions;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> mse;  // [fraction][seed]
  int step = 30;

  std::vector<double> means() const;
  // Share of consecutive fraction pairs whose mean MSE increases.
  double monotonicity() const;
  // Mean MSE at the largest fraction over that at the smallest.
  double ratio() const;
  void write_csv(const std::filesystem::path& path) const;
};

// For each fraction f, generates data with round(f * n_agents) hidden agents
// (dataset seed = run seed), trains and evaluates at the last forecast step.
SweepReport hidden_fraction_sweep(const GenerateOptions& base, std::span<const double> fractions,
                                  std::span<const std::uint64_t> seeds, const TrainConfig& cfg,
                                  const ProgressFn& progress = {});

}  // namespace stemfold
