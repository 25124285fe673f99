#pragma once

// Recurrent baselines: an LSTM shared across agents (single_rnn) and an LSTM
// over the concatenated state of all visible agents (joint_rnn). Both predict
// the next-step delta, are teacher-forced over the observed history and roll
// out on their own predictions afterwards.

#include <filesystem>
#include <string>
#include <vector>

#include "stemfold/training.hpp"

namespace stemfold {

enum class BaselineKind { kSingleRnn, kJointRnn };
std::string to_string(BaselineKind kind);
BaselineKind parse_baseline_kind(const std::string& name);

struct BaselineModel {
  BaselineKind kind = BaselineKind::kSingleRnn;
  int n_agents = 1;  // agents per scene (joint_rnn input width is 4 * n_agents)
  int hidden = 128;
  int teacher_forcing = 30;
  ParamSet params;   // lstm.w ((in + hidden) x 4 hidden), lstm.b, out.w, out.b

  int input_width() const { return kind == BaselineKind::kJointRnn ? 4 * n_agents : 4; }
};

BaselineModel init_baseline(BaselineKind kind, int n_agents, int hidden, int teacher_forcing,
                            std::uint64_t seed);

// Next-step predictions for steps 1..T-1 of each sample, as N x (T-1) x 4.
// Inputs are ground truth where observed and before the teacher-forcing
// horizon, otherwise the model's own previous prediction.
std::vector<Tensor> baseline_rollout(const BaselineModel& model,
                                     std::span<const ObservedSample* const> samples, int steps);

// Forecast window (N x t_f x 4) for each sample.
std::vector<Tensor> predict_baseline(const BaselineModel& model,
                                     std::span<const ObservedSample* const> samples, int t_h,
                                     int t_f, int micro_batch = 8, int threads = 1);

struct BaselineTrainResult {
  BaselineModel model;  // best-validation parameters
  std::vector<TrainLogRow> log;
  std::vector<double> step_loss;
};

// Same optimizer, schedule, clipping and holdout as the main model; the loss
// is the masked next-step MSE over the whole sequence.
BaselineTrainResult train_baseline(BaselineKind kind, const ObservedDataset& data,
                                   const TrainConfig& cfg, int hidden = 128);

// Checkpoint directory with kind = baseline_checkpoint; same layout as the
// main model's checkpoints.
void save_baseline(const std::filesystem::path& dir, const BaselineModel& model,
                   const KeyValueFile& extra = {});
BaselineModel load_baseline(const std::filesystem::path& dir, KeyValueFile* manifest = nullptr);

}  // namespace stemfold
