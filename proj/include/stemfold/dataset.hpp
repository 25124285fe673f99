#pragma once

// Partially observed datasets: hidden-agent masking, observation corruptions,
// normalization and the on-disk STEMTENS dataset container.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stemfold/rng.hpp"
#include "stemfold/simulation.hpp"
#include "stemfold/tensor.hpp"
#include "stemfold/text_format.hpp"

namespace stemfold {

enum class Split { kTrain, kTest };
std::string to_string(Split split);

// One observed scene. Only visible agents appear; row order follows the
// original agent order with hidden agents removed.
struct ObservedSample {
  Tensor loc;        // N x T x 2
  Tensor vel;        // N x T x 2
  Tensor adjacency;  // N x N, visible-visible block of the true interactions
  Tensor mask;       // N x T, 1 = observed

  int n_agents() const { return static_cast<int>(loc.dim(0)); }
  int timesteps() const { return static_cast<int>(loc.dim(1)); }
  // [x, y, vx, vy] of agent i at time t.
  std::array<double, 4> feature(int i, int t) const;
  bool observed(int i, int t) const;
};

struct ObservedDataset {
  std::vector<ObservedSample> samples;
  int n_total = 0;
  int n_visible = 0;
  Split split = Split::kTrain;
  int t_h = 30;
  int t_f = 30;
  double obs_dt = 0.1;
};

// Removes m_hidden uniformly chosen agents. `visible_out` (optional) receives
// the kept original indices. Throws InvalidArgument unless 0 <= m_hidden < M.
ObservedSample mask_hidden(const TrajectorySet& traj, int m_hidden, Rng& rng,
                           std::vector<int>* visible_out = nullptr);
// Keeps exactly the given original agent indices (ascending).
ObservedSample select_agents(const TrajectorySet& traj, const std::vector<int>& visible);

enum class SparsityMode { kUniform, kSyncFailure, kAsyncFailure };
std::string to_string(SparsityMode mode);
SparsityMode parse_sparsity_mode(const std::string& name);

// `keep` >= 1 is a timestep count, 0 < keep < 1 a fraction of the t_h encoder
// steps. sync_failure shares one kept subset across agents, async_failure
// draws one per agent, uniform keeps each entry independently with
// probability keep (at least one per agent). Steps >= t_h are never masked.
ObservedSample apply_sparsity(const ObservedSample& sample, SparsityMode mode, double keep,
                              int t_h, Rng& rng);

// Adds iid Normal(0, sigma^2) to positions and velocities at steps < t_h.
ObservedSample add_observation_noise(const ObservedSample& sample, double sigma, int t_h,
                                     Rng& rng);

// M x M 0/1 matrix: visible agents 0..n_visible-1 form a complete graph, every
// hidden agent links to exactly r distinct visible agents, no hidden-hidden links.
Tensor build_r_topology(int n_visible, int n_hidden, int r, Rng& rng);

// Min-max scaling of positions and velocities to [-1, 1], fitted on training data.
struct Normalizer {
  double loc_min = -1.0, loc_max = 1.0;
  double vel_min = -1.0, vel_max = 1.0;

  static Normalizer fit(const std::vector<ObservedSample>& samples);
  void apply(ObservedSample& s) const;
  void write(KeyValueFile& kv) const;
  static Normalizer read(const KeyValueFile& kv);
};

struct CorruptionSpec {
  std::optional<SparsityMode> sparsity;
  double keep = 1.0;
  double noise_sigma = 0.0;
  bool apply_to_train = false;
};

struct GenerateOptions {
  SimConfig sim;
  int n_hidden = 5;
  int n_train = 10000;
  int n_test = 2000;
  int t_h = 30;
  int t_f = 30;
  std::optional<int> r_topology;
  CorruptionSpec corruption;
};

struct GeneratedData {
  ObservedDataset train;
  ObservedDataset test;
  Normalizer normalizer;
};

// Deterministic in options: sample k of the train split uses seed + k, test
// sample k uses seed + n_train + k.
GeneratedData generate_dataset(const GenerateOptions& opt);

inline constexpr int kDatasetFormatVersion = 1;

// Writes `manifest` plus {split}_{loc,vel,adj,mask}.stemtens into `dir`.
// `extra` entries are appended to the manifest. Returns the fingerprint.
std::string save_dataset(const std::filesystem::path& dir, const GeneratedData& data,
                         const GenerateOptions& opt, const KeyValueFile& extra = {});

// Generic loader for any container following the layout above. Adjacency and
// mask files are optional (complete graph / fully observed).
ObservedDataset load_dataset(const std::filesystem::path& dir, Split split);
KeyValueFile load_dataset_manifest(const std::filesystem::path& dir);
// Hash over every tensor file present in the container.
std::string dataset_fingerprint(const std::filesystem::path& dir);

}  // namespace stemfold
