#pragma once

#include <cstdint>
#include <string>

#include "stemfold/text_format.hpp"

namespace stemfold::cli {

// Flags shared by every subcommand.
struct Common {
  std::string out;
  bool force = false;
  int threads = 1;
  bool quiet = false;
  std::uint64_t seed = 1991;
  std::string command;      // subcommand name
  std::string command_line; // argv as given
  KeyValueFile resolved;    // config.* entries
};

struct SimulateFlags {
  std::string system = "springs";
  int agents = 10;
  int hidden = 5;
  int samples = 10000;
  int test_samples = -1;  // default samples / 5
  double edge_prob = 0.5;
  std::string hetero_set = "1";
  int r_topology = 0;
  long raw_steps = 6000;
  int t_h = 30;
  int t_f = 30;
  std::string sparsity = "none";
  double keep = 1.0;
  double noise = 0.0;
  bool corrupt_train = false;
};

struct TrainFlags {
  std::string model = "stemfold";
  std::string ablation = "none";
  int epochs = 100;
  int batch_size = 128;
  double lr = 5e-4;
  double weight_decay = 1e-3;
  double clip = 10.0;
  double val_fraction = 0.1;
  long max_steps = 0;
  int micro_batch = 8;
  bool deterministic = false;
  double dropout = 0.2;
  int d_g = 64;
  int layers = 2;
  int d_ctx = 128;
  int d_latent = 16;
  int d_ode = 128;
  int d_decoder = 64;
  double max_gap = 5.0;
  int ode_substeps = 1;
  double obs_std = 0.01;
  int rnn_hidden = 128;
};

struct DataFlags {
  std::string data;
  std::string split = "test";
};

struct EvalFlags {
  std::string checkpoint;
  int step = 0;  // 0 = last forecast step
};

struct AblateFlags {
  std::string seeds = "1991,1992,1993";
  std::string variants = "original,fully_connected,no_attention,no_temporal_encoding";
};

struct SweepFlags {
  std::string fractions = "0.2,0.4,0.6";
  std::string seeds = "1991,1992,1993";
};

struct AttentionFlags {
  std::string checkpoint;
  int index = 0;
  int count = 1;
};

struct PlotFlags {
  std::string inputs;  // comma-separated CSV files
  std::string labels;  // optional comma-separated series names
  std::string title;
};

int run_simulate(const Common& c, const SimulateFlags& f);
int run_train(const Common& c, const TrainFlags& t, const DataFlags& d);
int run_eval(const Common& c, const EvalFlags& e, const DataFlags& d);
int run_ablate(const Common& c, const TrainFlags& t, const DataFlags& d, const AblateFlags& a);
int run_sweep(const Common& c, const SimulateFlags& s, const TrainFlags& t, const SweepFlags& w);
int run_export_attention(const Common& c, const AttentionFlags& a, const DataFlags& d);
int run_plot(const Common& c, const PlotFlags& p);

// Maps a variant or its short alias (fc, noattn, notemp, none) to the full name.
std::string variant_name(const std::string& alias);

}  // namespace stemfold::cli
