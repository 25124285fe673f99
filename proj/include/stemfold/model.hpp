#pragma once

// Attention encoder over the spatiotemporal graph, Gaussian posterior over
// per-agent initial latents, graph latent ODE, observation decoder and the
// negative ELBO.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stemfold/autodiff.hpp"
#include "stemfold/dataset.hpp"
#include "stemfold/rng.hpp"
#include "stemfold/stgraph.hpp"
#include "stemfold/text_format.hpp"

namespace stemfold {

struct ModelConfig {
  int d_feature = 4;
  int d_g = 64;
  int n_layers = 2;
  int d_ctx = 128;
  int d_latent = 16;
  int d_ode = 128;
  int d_decoder = 64;
  double dropout = 0.2;
  double max_gap = 5.0;
  int ode_substeps = 1;
  double obs_std = 0.01;
  // Ablations.
  bool fully_connected = false;
  bool no_attention = false;
  bool no_temporal_encoding = false;

  void validate() const;
  void write(KeyValueFile& kv) const;
  static ModelConfig read(const KeyValueFile& kv);
  // Name of the ablation variant ("original", "fully_connected", ...).
  std::string variant() const;
};

// Named learnable tensors in a fixed order.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const;
  Tensor& operator[](std::size_t i) { return values_[i]; }
  const Tensor& operator[](std::size_t i) const { return values_[i]; }
  Tensor& at(const std::string& name) { return values_[index(name)]; }
  const Tensor& at(const std::string& name) const { return values_[index(name)]; }
  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::size_t scalar_count() const;
  // Group = name prefix before the first '.'.
  static std::string group_of(const std::string& name);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Glorot-uniform weights, zero biases.
ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed);
// Throws FingerprintError if `params` does not have the layout `cfg` implies.
void check_param_layout(const ParamSet& params, const ModelConfig& cfg);

// Binds a ParamSet onto a tape (as parameters or constants).
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamSet& params, bool trainable);
  // Binds existing Vars, one per entry of `params` in order.
  BoundParams(ad::Tape& tape, const ParamSet& params, std::vector<ad::Var> vars);
  const ad::Var& operator()(const std::string& name) const;
  const std::vector<ad::Var>& vars() const { return vars_; }
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  const ParamSet* params_;
  std::vector<ad::Var> vars_;
};

// Sinusoidal encoding: q[2k] = sin(dt / 10000^(2k/d)), q[2k+1] = cos(same).
std::vector<double> positional_encoding(double dt, int d);

// Everything the batched forward pass needs, flattened over several samples.
struct ModelBatch {
  std::size_t n_nodes = 0;
  std::size_t n_agents = 0;
  std::size_t n_samples = 0;
  Tensor node_input;  // n_nodes x (d_feature + 1): [o, anchor]
  Tensor node_pe;     // n_nodes x d_g
  ad::Index edge_src, edge_dst;
  Tensor edge_dt;     // E x 1, anchor difference a_src - a_dst
  Tensor pe_table;        // positional encodings of the distinct edge time gaps
  ad::Index edge_pe_row;  // row of pe_table per edge
  Tensor edge_uniform;  // E x 1, 1 / in-degree of dst (attention ablation)
  ad::Index node_agent;  // global agent id per node
  ad::Index node_time;   // observation time index per node
  std::vector<ad::Index> agent_nodes;  // node rows of each global agent
  ad::Index ode_recv, ode_send;
  Tensor agent_degree;  // n_agents x 1
  std::vector<std::size_t> sample_agent_offset;  // n_samples + 1
  // Forecast targets, time-major rows (t * n_agents + agent) x d_feature.
  Tensor target;
  Tensor target_mask;
  int t_f = 0;
};

// Graphs must have been built over the encoder window of the matching samples.
ModelBatch make_batch(std::span<const STGraph* const> graphs,
                      std::span<const ObservedSample* const> samples, const ModelConfig& cfg,
                      int t_h, int t_f);
ModelBatch make_batch(const STGraph& graph, const ObservedSample& sample, const ModelConfig& cfg,
                      int t_h, int t_f);

struct ForwardOptions {
  bool training = false;    // enables dropout
  bool mean_latent = true;  // z0 = mu instead of a reparameterized sample
  Rng* rng = nullptr;       // required when training or sampling
  double obs_dt = 0.1;
};

struct ForwardResult {
  ad::Var mu, sigma;       // n_agents x d_latent
  ad::Var z0;
  ad::Var pred;            // (t_f * n_agents) x d_feature, time-major
  ad::Var pool_weights;    // n_nodes x 1, sequence-attention pooling weight per node
};

ForwardResult run_model(const BoundParams& p, const ModelBatch& batch, const ModelConfig& cfg,
                        const ForwardOptions& opt);

// Encoder pieces, exposed on Vars so the batched path and the oracles share code.
ad::Var initial_representation(const BoundParams& p, const ModelBatch& batch,
                               const ModelConfig& cfg);
ad::Var edge_messages_hidden(const BoundParams& p, int layer, const ad::Var& h,
                             const ModelBatch& batch, const ModelConfig& cfg);
ad::Var edge_attention(const BoundParams& p, int layer, const ad::Var& h, const ad::Var& hhat,
                       const ModelBatch& batch, const ModelConfig& cfg);
// Interaction-ODE weights with the linear output layer of f_R folded into the
// first layer of f_O (both are affine with nothing in between).
struct OdeWeights {
  ad::Var recv, send, r1_b;  // halves of the first f_R layer
  ad::Var mid, mid_deg;      // W_r2 W_o1 and b_r2 W_o1
  ad::Var o1_b, o2_w, o2_b;
};
OdeWeights ode_weights(const BoundParams& p, const ModelConfig& cfg);
ad::Var ode_derivative(const OdeWeights& w, const ad::Var& z, const ModelBatch& batch,
                       const ModelConfig& cfg, const Tensor* drop_sum = nullptr,
                       const Tensor* drop_hidden = nullptr);
ad::Var ode_derivative(const BoundParams& p, const ad::Var& z, const ModelBatch& batch,
                       const ModelConfig& cfg, const Tensor* drop_sum = nullptr,
                       const Tensor* drop_hidden = nullptr);
ad::Var decode(const BoundParams& p, const ad::Var& z);

struct PosteriorState {
  Tensor mu;     // N x d_latent
  Tensor sigma;  // N x d_latent, > 0
};

// Single-item conveniences on plain tensors (evaluation mode).
Tensor init_node_repr(const std::array<double, 4>& o, double dt_start, const ParamSet& params,
                      const ModelConfig& cfg);
// Message from a source representation over an edge with time gap dt.
Tensor message(const Tensor& h_src, double dt, const ParamSet& params, int layer,
               const ModelConfig& cfg);
// Hidden message representation (before the value map) for the same inputs.
Tensor message_hidden(const Tensor& h_src, double dt, const ParamSet& params, int layer,
                      const ModelConfig& cfg);
// Softmax over neighbors of (W_key hhat_s)^T (W_query h_r) / sqrt(d_g); hhats is k x d_g.
Tensor attention_scores(const Tensor& h_r, const Tensor& hhats, const ParamSet& params, int layer,
                        const ModelConfig& cfg);
// h + sum_k weights[k] * messages[k]; messages is k x d (k may be 0).
Tensor aggregate(const Tensor& h_r, const Tensor& messages, const Tensor& weights);
PosteriorState encode_posterior(const STGraph& graph, const ParamSet& params,
                                const ModelConfig& cfg);
Tensor sample_latent(const PosteriorState& post, Rng& rng);
Tensor ode_dynamics(const Tensor& z, const Tensor& adjacency, const ParamSet& params,
                    const ModelConfig& cfg);
Tensor decode(const Tensor& z, const ParamSet& params);

// Forecast N x t_f x 4 for one sample. rng == nullptr selects mean mode.
Tensor forecast(const ObservedSample& sample, const ParamSet& params, const ModelConfig& cfg,
                int t_h, int t_f, double obs_dt, Rng* rng = nullptr);

// Sequence-attention pooling weights as an N x t_h matrix (zeros where unobserved).
Tensor pooling_weights(const ObservedSample& sample, const ParamSet& params,
                       const ModelConfig& cfg, int t_h);

// ELBO pieces.
double gaussian_kl(double mu, double sigma);
double gaussian_log_likelihood(double x, double mean, double stddev);

struct ElboTerms {
  double reconstruction = 0.0;  // log-likelihood summed over unmasked entries
  double kl = 0.0;
};

// Negated ELBO; `mask` has one entry per row of `pred` (or matches its shape).
ad::Var elbo_loss(const ad::Var& pred, const Tensor& target, const Tensor& mask,
                  const ad::Var& mu, const ad::Var& sigma, double obs_std,
                  ElboTerms* terms = nullptr);

// Checkpoint directory: `manifest` plus one STEMTENS file per parameter.
inline constexpr int kCheckpointFormatVersion = 1;
void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params,
                     const ModelConfig& cfg, const KeyValueFile& extra = {});
struct Checkpoint {
  ParamSet params;
  ModelConfig config;
  KeyValueFile manifest;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace stemfold
