#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "stemfold/errors.hpp"
#include "stemfold/text_format.hpp"

using namespace stemfold;
using namespace stemfold::cli;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;

int exit_code(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kInvalidArgument: return kExitInvalid;
    case ErrorKind::kData:
    case ErrorKind::kFingerprint:
    case ErrorKind::kIo:
    case ErrorKind::kAgentUnobservable: return kExitData;
    case ErrorKind::kTrainingDiverged:
    case ErrorKind::kNumericalOverflow:
    case ErrorKind::kSimulationDiverged: return kExitDiverged;
  }
  return 1;
}

// Value of --config among the explicit arguments, if any.
std::string find_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

bool has_flag(const std::vector<std::string>& args, const std::string& name) {
  for (const auto& a : args) {
    if (a == name || a.rfind(name + "=", 0) == 0) return true;
  }
  return false;
}

// Config files hold `option = value` lines. Run manifests can be fed back
// directly: when any key carries the `config.` prefix only those keys are
// used.
std::vector<std::string> config_args(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("config file not found: " + path);
  const KeyValueFile kv = KeyValueFile::load(path);
  bool prefixed = false;
  for (const auto& [k, v] : kv.entries()) prefixed = prefixed || k.rfind("config.", 0) == 0;
  std::vector<std::string> out;
  for (const auto& [k, v] : kv.entries()) {
    std::string key = k;
    if (prefixed) {
      if (key.rfind("config.", 0) != 0) continue;
      key = key.substr(7);
    }
    if (key == "config") continue;
    out.push_back("--" + key + "=" + v);
  }
  return out;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", "Key/value file of option defaults; flags override it");
  app->add_option("--out", c.out, "Output directory");
  app->add_flag("--force", c.force, "Write into a non-empty output directory");
  app->add_option("--threads", c.threads, "Worker threads")->check(CLI::PositiveNumber);
  app->add_flag("--quiet", c.quiet, "Suppress progress output");
  app->add_option("--seed", c.seed, "Random seed (STEMFOLD_SEED overrides the config value)");
}

void add_simulate(CLI::App* app, SimulateFlags& f) {
  app->add_option("--system", f.system, "springs or charged")
      ->check(CLI::IsMember({"springs", "charged"}));
  app->add_option("--agents", f.agents, "Total agents M");
  app->add_option("--hidden", f.hidden, "Hidden agents");
  app->add_option("--samples", f.samples, "Training samples");
  app->add_option("--test-samples", f.test_samples, "Test samples (default samples / 5)");
  app->add_option("--edge-prob", f.edge_prob, "Spring connection probability");
  app->add_option("--hetero-set", f.hetero_set, "Comma-separated coupling values");
  app->add_option("--r-topology", f.r_topology, "Visible links per hidden agent (0 = random graph)");
  app->add_option("--raw-steps", f.raw_steps, "Raw integrator steps per trajectory");
  app->add_option("--t-h", f.t_h, "Encoder window length");
  app->add_option("--t-f", f.t_f, "Forecast window length");
  app->add_option("--sparsity", f.sparsity, "none, uniform, sync_failure or async_failure");
  app->add_option("--keep", f.keep, "Kept encoder steps (count, or fraction below 1)");
  app->add_option("--noise", f.noise, "Observation noise std on the encoder window");
  app->add_flag("--corrupt-train", f.corrupt_train, "Also corrupt the training split");
}

void add_train(CLI::App* app, TrainFlags& t) {
  app->add_option("--model", t.model, "stemfold, single_rnn or joint_rnn")
      ->check(CLI::IsMember({"stemfold", "single_rnn", "joint_rnn"}));
  app->add_option("--ablation", t.ablation, "none, fc, noattn or notemp")
      ->check(CLI::IsMember({"none", "fc", "noattn", "notemp", "original", "fully_connected",
                             "no_attention", "no_temporal_encoding"}));
  app->add_option("--epochs", t.epochs, "Training epochs");
  app->add_option("--batch-size", t.batch_size, "Samples per optimizer step");
  app->add_option("--lr", t.lr, "Base learning rate");
  app->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  app->add_option("--clip", t.clip, "Global gradient-norm clip");
  app->add_option("--val-fraction", t.val_fraction, "Held-out share of the training split");
  app->add_option("--max-steps", t.max_steps, "Cap on optimizer steps (0 = none)");
  app->add_option("--micro-batch", t.micro_batch, "Samples per tape");
  app->add_flag("--deterministic", t.deterministic, "Bit-exact reduction order");
  app->add_option("--dropout", t.dropout, "Dropout rate");
  app->add_option("--d-g", t.d_g, "Graph representation width");
  app->add_option("--layers", t.layers, "Graph attention layers");
  app->add_option("--d-ctx", t.d_ctx, "Sequence context width");
  app->add_option("--d-latent", t.d_latent, "Latent state width");
  app->add_option("--d-ode", t.d_ode, "ODE network hidden width");
  app->add_option("--d-decoder", t.d_decoder, "Decoder hidden width");
  app->add_option("--max-gap", t.max_gap, "Largest temporal edge gap in steps");
  app->add_option("--ode-substeps", t.ode_substeps, "RK4 steps per output interval");
  app->add_option("--obs-std", t.obs_std, "Observation noise std of the likelihood");
  app->add_option("--rnn-hidden", t.rnn_hidden, "LSTM width of the baselines");
}

void add_data(CLI::App* app, DataFlags& d, bool with_split) {
  app->add_option("--data", d.data, "Dataset directory");
  if (with_split) {
    app->add_option("--split", d.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  }
}

// Resolved option values of the chosen subcommand as config.* entries.
KeyValueFile resolved_config(CLI::App* sub) {
  KeyValueFile kv;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    } else {
      value = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    }
    kv.set("config." + name, value);
  }
  return kv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partially observed multi-agent forecasting with a spatiotemporal latent ODE",
               "stemfold"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

  Common common;
  SimulateFlags sim;
  TrainFlags train;
  DataFlags data;
  EvalFlags eval;
  AblateFlags ablate;
  SweepFlags sweep;
  AttentionFlags attention;
  PlotFlags plot;

  auto* c_sim = app.add_subcommand("simulate", "Generate a partially observed dataset");
  add_common(c_sim, common);
  add_simulate(c_sim, sim);

  auto* c_train = app.add_subcommand("train", "Train STEMFold or a recurrent baseline");
  add_common(c_train, common);
  add_data(c_train, data, false);
  add_train(c_train, train);

  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(c_eval, common);
  add_data(c_eval, data, true);
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory");
  c_eval->add_option("--step", eval.step, "Forecast step to report (default: last)");

  auto* c_ablate = app.add_subcommand("ablate", "Train and compare ablation variants");
  add_common(c_ablate, common);
  add_data(c_ablate, data, false);
  add_train(c_ablate, train);
  c_ablate->add_option("--seeds", ablate.seeds, "Comma-separated seeds");
  c_ablate->add_option("--variants", ablate.variants, "Comma-separated variants");

  auto* c_sweep = app.add_subcommand("sweep", "Hidden-fraction sweep on fresh datasets");
  add_common(c_sweep, common);
  add_simulate(c_sweep, sim);
  add_train(c_sweep, train);
  c_sweep->add_option("--fractions", sweep.fractions, "Comma-separated hidden fractions");
  c_sweep->add_option("--seeds", sweep.seeds, "Comma-separated seeds");

  auto* c_attn = app.add_subcommand("export-attention", "Export sequence-attention maps");
  add_common(c_attn, common);
  add_data(c_attn, data, true);
  c_attn->add_option("--checkpoint", attention.checkpoint, "Checkpoint directory");
  c_attn->add_option("--index", attention.index, "First sample");
  c_attn->add_option("--count", attention.count, "Number of samples");

  auto* c_plot = app.add_subcommand("plot", "Render report CSVs as SVG figures");
  add_common(c_plot, common);
  c_plot->add_option("--input", plot.inputs, "Comma-separated CSV files")->required();
  c_plot->add_option("--labels", plot.labels, "Comma-separated series names");
  c_plot->add_option("--title", plot.title, "Figure title");

  std::vector<std::string> explicit_args(argv + 1, argv + argc);
  try {
    // Config values go right after the subcommand so later flags win.
    std::vector<std::string> args = explicit_args;
    const std::string config = find_config(explicit_args);
    if (!config.empty()) {
      std::size_t pos = 0;
      while (pos < args.size() && args[pos].rfind("-", 0) == 0) ++pos;
      const auto extra = config_args(config);
      args.insert(args.begin() + static_cast<std::ptrdiff_t>(std::min(pos + 1, args.size())),
                  extra.begin(), extra.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  common.command = sub->get_name();
  common.command_line = "stemfold";
  for (const auto& a : explicit_args) common.command_line += " " + a;

  if (!has_flag(explicit_args, "--seed")) {
    if (const char* env = std::getenv("STEMFOLD_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        const std::string s(env);
        common.seed = std::stoull(s, &used);
        if (used != s.size() || s.find_first_not_of("0123456789") != std::string::npos) {
          throw std::invalid_argument(s);
        }
      } catch (const std::exception&) {
        std::cerr << "error: STEMFOLD_SEED must be a non-negative integer\n";
        return kExitInvalid;
      }
    }
  }
  common.resolved = resolved_config(sub);
  common.resolved.set("config.seed", common.seed);

  try {
    if (sub == c_sim) return run_simulate(common, sim);
    if (sub == c_train) return run_train(common, train, data);
    if (sub == c_eval) return run_eval(common, eval, data);
    if (sub == c_ablate) return run_ablate(common, train, data, ablate);
    if (sub == c_sweep) return run_sweep(common, sim, train, sweep);
    if (sub == c_attn) return run_export_attention(common, attention, data);
    if (sub == c_plot) return run_plot(common, plot);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
