#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "stemfold/baselines.hpp"
#include "stemfold/dataset.hpp"
#include "stemfold/errors.hpp"
#include "stemfold/evaluation.hpp"
#include "stemfold/model.hpp"
#include "stemfold/svg.hpp"
#include "stemfold/tensor_io.hpp"
#include "stemfold/training.hpp"
#include "stemfold/version.hpp"

namespace stemfold::cli {

namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void prepare_out(const Common& c) {
  if (c.out.empty()) throw InvalidArgument("--out is required");
  const fs::path out(c.out);
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) throw InvalidArgument("output path is not a directory: " + c.out);
    if (!fs::is_empty(out) && !c.force) {
      throw InvalidArgument("output directory " + c.out + " is not empty (use --force to overwrite)");
    }
  }
  fs::create_directories(out);
}

KeyValueFile run_manifest(const Common& c, const std::string& started, const std::string& data_fp) {
  KeyValueFile kv;
  kv.set("command", c.command);
  kv.set("command_line", c.command_line);
  kv.set("code_version", kCodeVersion);
  kv.set("seed", c.seed);
  kv.set("dataset_fingerprint", data_fp);
  kv.set("started_at", started);
  kv.set("finished_at", utc_now());
  for (const auto& [k, v] : c.resolved.entries()) kv.set(k, v);
  return kv;
}

// Entries of `extra` override those already in `kv`.
void merge(KeyValueFile& kv, const KeyValueFile& extra) {
  for (const auto& [k, v] : extra.entries()) kv.set(k, v);
}

void note(const Common& c, const std::string& msg) {
  if (!c.quiet) std::cout << msg << '\n' << std::flush;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (double v : parse_double_list(text)) {
    if (v < 0 || v != std::floor(v)) throw InvalidArgument("seeds must be non-negative integers");
    seeds.push_back(static_cast<std::uint64_t>(v));
  }
  if (seeds.empty()) throw InvalidArgument("at least one seed is required");
  return seeds;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw InvalidArgument("unknown split '" + s + "' (expected train or test)");
}

struct DataInfo {
  ObservedDataset ds;
  KeyValueFile manifest;
  std::string fingerprint;
  fs::path dir;
};

DataInfo open_data(const std::string& dir, Split split) {
  if (dir.empty()) throw InvalidArgument("--data is required");
  DataInfo d;
  d.dir = dir;
  d.manifest = load_dataset_manifest(dir);
  d.ds = load_dataset(dir, split);
  d.fingerprint = d.manifest.get("fingerprint").value_or(dataset_fingerprint(dir));
  if (d.ds.samples.empty()) throw DataError("split " + to_string(split) + " of " + dir + " is empty");
  return d;
}

const char* const kNormKeys[] = {"loc_min", "loc_max", "vel_min", "vel_max"};

void record_data(KeyValueFile& kv, const DataInfo& d) {
  kv.set("data.dir", fs::absolute(d.dir).string());
  kv.set("data.fingerprint", d.fingerprint);
  kv.set("data.n_visible", d.ds.n_visible);
  kv.set("data.t_h", d.ds.t_h);
  kv.set("data.t_f", d.ds.t_f);
  kv.set("data.obs_dt", d.ds.obs_dt);
  for (const char* k : kNormKeys) {
    if (auto v = d.manifest.get(std::string("norm.") + k)) kv.set(std::string("data.norm.") + k, *v);
  }
}

// A model only makes sense on data scaled the way its training data was.
void check_normalization(const KeyValueFile& checkpoint, const KeyValueFile& data) {
  for (const char* k : kNormKeys) {
    const std::string ck = std::string("data.norm.") + k, dk = std::string("norm.") + k;
    if (!checkpoint.contains(ck) || !data.contains(dk)) continue;
    const double a = checkpoint.get_double(ck), b = data.get_double(dk);
    if (std::abs(a - b) > 1e-9 * std::max({1.0, std::abs(a), std::abs(b)})) {
      throw FingerprintError("dataset normalization (" + dk + " = " + format_double(b) +
                             ") differs from the checkpoint's (" + format_double(a) + ")");
    }
  }
}

std::string checkpoint_config_fingerprint(const KeyValueFile& kv) {
  Fnv1a h;
  for (const auto& [k, v] : kv.entries()) {
    if (k.rfind("model.", 0) == 0 || k.rfind("train.", 0) == 0 || k.rfind("baseline.", 0) == 0) {
      h.update(k + "=" + v + "\n");
    }
  }
  return h.hex();
}

TrainConfig make_train_config(const Common& c, const TrainFlags& t) {
  TrainConfig cfg;
  cfg.lr = t.lr;
  cfg.weight_decay = t.weight_decay;
  cfg.grad_clip_norm = t.clip;
  cfg.batch_size = t.batch_size;
  cfg.epochs = t.epochs;
  cfg.seed = c.seed;
  cfg.val_fraction = t.val_fraction;
  cfg.micro_batch = t.micro_batch;
  cfg.threads = c.threads;
  cfg.deterministic = t.deterministic;
  cfg.max_steps = t.max_steps;
  ModelConfig& m = cfg.model;
  m.d_g = t.d_g;
  m.n_layers = t.layers;
  m.d_ctx = t.d_ctx;
  m.d_latent = t.d_latent;
  m.d_ode = t.d_ode;
  m.d_decoder = t.d_decoder;
  m.dropout = t.dropout;
  m.max_gap = t.max_gap;
  m.ode_substeps = t.ode_substeps;
  m.obs_std = t.obs_std;
  m = apply_variant(m, variant_name(t.ablation));
  cfg.validate();
  return cfg;
}

GenerateOptions make_generate(const Common& c, const SimulateFlags& f) {
  GenerateOptions o;
  o.sim.system = parse_system_kind(f.system);
  o.sim.n_agents = f.agents;
  o.sim.edge_prob = f.edge_prob;
  o.sim.coupling_set = parse_double_list(f.hetero_set);
  o.sim.raw_steps = f.raw_steps;
  o.sim.seed = c.seed;
  o.sim.validate();
  o.n_hidden = f.hidden;
  o.n_train = f.samples;
  o.n_test = f.test_samples < 0 ? std::max(1, f.samples / 5) : f.test_samples;
  o.t_h = f.t_h;
  o.t_f = f.t_f;
  if (f.r_topology > 0) o.r_topology = f.r_topology;
  if (f.sparsity != "none") o.corruption.sparsity = parse_sparsity_mode(f.sparsity);
  o.corruption.keep = f.keep;
  o.corruption.noise_sigma = f.noise;
  o.corruption.apply_to_train = f.corrupt_train;
  return o;
}

EpochCallback epoch_printer(const Common& c, int epochs) {
  if (c.quiet) return {};
  return [epochs](const TrainLogRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %d/%d  loss %.6g  val_mse %.6g  lr %.3g  %.1fs", r.epoch,
                  epochs, r.train_loss, r.val_mse, r.lr, r.wall_seconds);
    std::cout << buf << '\n' << std::flush;
  };
}

std::vector<const ObservedSample*> pointers(const ObservedDataset& d) {
  std::vector<const ObservedSample*> p;
  for (const auto& s : d.samples) p.push_back(&s);
  return p;
}

}  // namespace

std::string variant_name(const std::string& alias) {
  static const std::map<std::string, std::string> names = {
      {"none", "original"},
      {"original", "original"},
      {"fc", "fully_connected"},
      {"fully_connected", "fully_connected"},
      {"noattn", "no_attention"},
      {"no_attention", "no_attention"},
      {"notemp", "no_temporal_encoding"},
      {"no_temporal_encoding", "no_temporal_encoding"},
  };
  auto it = names.find(alias);
  if (it == names.end()) {
    throw InvalidArgument("unknown ablation '" + alias + "' (expected none, fc, noattn or notemp)");
  }
  return it->second;
}

int run_simulate(const Common& c, const SimulateFlags& f) {
  const std::string started = utc_now();
  prepare_out(c);
  const GenerateOptions opt = make_generate(c, f);
  note(c, "generating " + std::to_string(opt.n_train) + " train / " + std::to_string(opt.n_test) +
              " test samples");
  const GeneratedData data = generate_dataset(opt);
  const std::string fp = save_dataset(c.out, data, opt, run_manifest(c, started, ""));
  KeyValueFile kv = load_dataset_manifest(c.out);
  kv.set("dataset_fingerprint", fp);
  kv.set("finished_at", utc_now());
  kv.save(fs::path(c.out) / "manifest");
  note(c, "wrote " + c.out + " (fingerprint " + fp + ")");
  return 0;
}

int run_train(const Common& c, const TrainFlags& t, const DataFlags& d) {
  const std::string started = utc_now();
  prepare_out(c);
  const DataInfo data = open_data(d.data, Split::kTrain);
  TrainConfig cfg = make_train_config(c, t);
  const fs::path out(c.out);

  KeyValueFile extra;
  record_data(extra, data);
  extra.set("model", t.model);
  if (t.model == "stemfold") {
    const TrainResult res = train(data.ds, cfg, epoch_printer(c, cfg.epochs));
    write_train_log(out / "train_log.csv", res.log);
    cfg.write(extra);
    extra.set("variant", cfg.model.variant());
    extra.set("best_epoch", res.best_epoch);
    extra.set("best_val_mse", res.best_val_mse);
    extra.set("total_steps", static_cast<std::int64_t>(res.total_steps));
    merge(extra, run_manifest(c, started, data.fingerprint));
    save_checkpoint(out, res.best_params, cfg.model, extra);
    note(c, "best epoch " + std::to_string(res.best_epoch) + " val_mse " +
                format_double(res.best_val_mse) + "; checkpoint in " + c.out);
  } else {
    const BaselineKind kind = parse_baseline_kind(t.model);
    if (variant_name(t.ablation) != "original") {
      throw InvalidArgument("--ablation applies to the stemfold model only");
    }
    const BaselineTrainResult res = train_baseline(kind, data.ds, cfg, t.rnn_hidden);
    if (!c.quiet) {
      for (const auto& row : res.log) epoch_printer(c, cfg.epochs)(row);
    }
    write_train_log(out / "train_log.csv", res.log);
    cfg.write(extra);
    extra.set("variant", "-");
    merge(extra, run_manifest(c, started, data.fingerprint));
    save_baseline(out, res.model, extra);
    note(c, "baseline checkpoint in " + c.out);
  }
  return 0;
}

int run_eval(const Common& c, const EvalFlags& e, const DataFlags& d) {
  const std::string started = utc_now();
  if (e.checkpoint.empty()) throw InvalidArgument("--checkpoint is required");
  prepare_out(c);
  const fs::path ckdir(e.checkpoint);
  if (!fs::exists(ckdir / "manifest")) throw DataError("checkpoint not found: " + e.checkpoint);
  const KeyValueFile ckm = KeyValueFile::load(ckdir / "manifest");
  const DataInfo data = open_data(d.data, parse_split(d.split));
  check_normalization(ckm, data.manifest);

  EvalReport rep;
  if (ckm.get("kind").value_or("") == "baseline_checkpoint") {
    const BaselineModel model = load_baseline(ckdir);
    if (model.kind == BaselineKind::kJointRnn && model.n_agents != data.ds.n_visible) {
      throw FingerprintError("joint_rnn checkpoint expects " + std::to_string(model.n_agents) +
                             " agents, dataset has " + std::to_string(data.ds.n_visible));
    }
    rep = evaluate_baseline(model, data.ds, c.threads);
  } else {
    const Checkpoint ck = load_checkpoint(ckdir);
    rep = evaluate_model(ck.params, ck.config, data.ds, c.threads);
  }
  rep.config_fingerprint = checkpoint_config_fingerprint(ckm);
  rep.seeds = {static_cast<std::uint64_t>(ckm.get_int_or("train.seed", 0))};

  const fs::path out(c.out);
  rep.write_csv(out / "report.csv");
  KeyValueFile summary = rep.summary();
  const int step = e.step > 0 ? e.step : data.ds.t_f;
  const StepStats st = rep.at(step);
  summary.set("step", step);
  summary.set("mse_mean", st.mean);
  summary.set("mse_std", st.std);
  summary.save(out / "summary");

  KeyValueFile kv = run_manifest(c, started, data.fingerprint);
  kv.set("kind", "eval");
  kv.set("checkpoint", fs::absolute(ckdir).string());
  record_data(kv, data);
  kv.set("data.split", d.split);
  kv.save(out / "manifest");
  char buf[128];
  std::snprintf(buf, sizeof buf, "mse@%d %.6g +- %.6g (%zu samples)", step, st.mean, st.std,
                rep.n_samples);
  std::cout << buf << '\n';
  return 0;
}

int run_ablate(const Common& c, const TrainFlags& t, const DataFlags& d, const AblateFlags& a) {
  const std::string started = utc_now();
  prepare_out(c);
  const DataInfo train_data = open_data(d.data, Split::kTrain);
  const DataInfo test_data = open_data(d.data, Split::kTest);
  const TrainConfig cfg = make_train_config(c, t);
  const auto seeds = parse_seeds(a.seeds);
  std::vector<std::string> variants;
  for (const auto& v : split_list(a.variants)) variants.push_back(variant_name(v));
  const AblationReport rep = run_ablation_suite(
      train_data.ds, test_data.ds, cfg, seeds, variants, [&](const std::string& m) { note(c, m); });
  const fs::path out(c.out);
  rep.write_csv(out / "ablation.csv");
  std::ofstream(out / "ablation.txt") << rep.table();
  KeyValueFile kv = run_manifest(c, started, train_data.fingerprint);
  kv.set("kind", "ablation");
  record_data(kv, train_data);
  cfg.write(kv);
  kv.save(out / "manifest");
  std::cout << rep.table();
  return 0;
}

int run_sweep(const Common& c, const SimulateFlags& s, const TrainFlags& t, const SweepFlags& w) {
  const std::string started = utc_now();
  prepare_out(c);
  const GenerateOptions base = make_generate(c, s);
  const TrainConfig cfg = make_train_config(c, t);
  const auto fractions = parse_double_list(w.fractions);
  const auto seeds = parse_seeds(w.seeds);
  const SweepReport rep =
      hidden_fraction_sweep(base, fractions, seeds, cfg, [&](const std::string& m) { note(c, m); });
  const fs::path out(c.out);
  rep.write_csv(out / "sweep.csv");
  KeyValueFile kv = run_manifest(c, started, "");
  kv.set("kind", "sweep");
  cfg.write(kv);
  kv.set("sweep.means", join_doubles(rep.means()));
  kv.set("sweep.monotonicity", rep.monotonicity());
  kv.set("sweep.ratio", rep.ratio());
  kv.save(out / "manifest");
  const auto means = rep.means();
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    std::cout << "hidden " << format_double(fractions[k]) << "  mse@" << rep.step << " "
              << format_double(means[k]) << '\n';
  }
  std::cout << "ratio " << format_double(rep.ratio()) << "  monotonicity "
            << format_double(rep.monotonicity()) << '\n';
  return 0;
}

int run_export_attention(const Common& c, const AttentionFlags& a, const DataFlags& d) {
  const std::string started = utc_now();
  if (a.checkpoint.empty()) throw InvalidArgument("--checkpoint is required");
  if (a.index < 0 || a.count < 1) throw InvalidArgument("--index must be >= 0 and --count >= 1");
  prepare_out(c);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const DataInfo data = open_data(d.data, parse_split(d.split));
  check_normalization(ck.manifest, data.manifest);
  const std::size_t end = static_cast<std::size_t>(a.index + a.count);
  if (end > data.ds.samples.size()) {
    throw InvalidArgument("sample range exceeds the split size " +
                          std::to_string(data.ds.samples.size()));
  }
  const fs::path out(c.out);
  for (std::size_t k = static_cast<std::size_t>(a.index); k < end; ++k) {
    const AttentionMap map = export_attention_maps(ck.params, ck.config, data.ds.samples[k], data.ds.t_h);
    const std::string stem = "attention_" + std::to_string(k);
    write_attention_map(out, stem, map);
    std::ofstream(out / (stem + ".svg"))
        << heatmap_svg(map.scaled, "Sequence attention, sample " + std::to_string(k), "timestep",
                       "agent");
    note(c, "wrote " + stem + " (" + map.scaled.shape_string() + ")");
  }
  KeyValueFile kv = run_manifest(c, started, data.fingerprint);
  kv.set("kind", "attention");
  kv.set("checkpoint", fs::absolute(a.checkpoint).string());
  record_data(kv, data);
  kv.set("data.split", d.split);
  kv.save(out / "manifest");
  return 0;
}

namespace {

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
  double num(std::size_t r, int col) const {
    try {
      return std::stod(rows[r].at(static_cast<std::size_t>(col)));
    } catch (const std::exception&) {
      throw DataError("malformed number in CSV row " + std::to_string(r + 2));
    }
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

Csv read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV: " + path.string());
  csv.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (!line.empty()) csv.rows.push_back(split_csv_line(line));
  }
  return csv;
}

// Mean of y per distinct x, in ascending x.
Series grouped_mean(const std::string& name, const Csv& csv, int xcol, int ycol) {
  std::map<double, std::pair<double, int>> acc;
  for (std::size_t r = 0; r < csv.rows.size(); ++r) {
    auto& [sum, n] = acc[csv.num(r, xcol)];
    sum += csv.num(r, ycol);
    ++n;
  }
  Series s{name, {}, {}};
  for (const auto& [x, v] : acc) {
    s.x.push_back(x);
    s.y.push_back(v.first / v.second);
  }
  return s;
}

}  // namespace

int run_plot(const Common& c, const PlotFlags& p) {
  const std::string started = utc_now();
  const auto inputs = split_list(p.inputs);
  if (inputs.empty()) throw InvalidArgument("--input needs at least one CSV file");
  const auto labels = split_list(p.labels);
  if (!labels.empty() && labels.size() != inputs.size()) {
    throw InvalidArgument("--labels must name every input");
  }
  prepare_out(c);
  const fs::path out(c.out);

  std::string kind;
  std::vector<Series> series;
  std::string x_label, y_label, title;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Csv csv = read_csv(inputs[i]);
    const fs::path in(inputs[i]);
    const std::string label = labels.empty()
                                  ? (in.has_parent_path() ? in.parent_path().filename().string() : in.stem().string())
                                  : labels[i];
    std::string k;
    if (csv.column("mse_mean") >= 0 && csv.column("step") >= 0 && csv.column("variant") < 0) {
      k = "mse_curve";
      series.push_back(grouped_mean(label, csv, csv.column("step"), csv.column("mse_mean")));
      x_label = "forecast step";
      y_label = "MSE";
      title = "Forecast MSE by step";
    } else if (csv.column("epoch") >= 0 && csv.column("val_mse") >= 0) {
      k = "train_log";
      series.push_back(grouped_mean(label + " val_mse", csv, csv.column("epoch"), csv.column("val_mse")));
      x_label = "epoch";
      y_label = "validation MSE";
      title = "Validation MSE by epoch";
    } else if (csv.column("hidden_fraction") >= 0) {
      k = "sweep";
      series.push_back(grouped_mean(label, csv, csv.column("hidden_fraction"), csv.column("mse")));
      x_label = "hidden fraction";
      y_label = "MSE";
      title = "MSE by hidden fraction";
    } else if (csv.column("variant") >= 0) {
      k = "ablation";
      std::map<std::string, Series> by_variant;
      std::vector<std::string> order;
      const int vcol = csv.column("variant"), scol = csv.column("seed"), mcol = csv.column("mse_mean");
      for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        const std::string& v = csv.rows[r].at(static_cast<std::size_t>(vcol));
        if (!by_variant.count(v)) {
          order.push_back(v);
          by_variant[v].name = v;
        }
        by_variant[v].x.push_back(csv.num(r, scol));
        by_variant[v].y.push_back(csv.num(r, mcol));
      }
      for (const auto& v : order) series.push_back(by_variant[v]);
      x_label = "seed";
      y_label = "MSE";
      title = "Ablation MSE by seed";
    } else if (!csv.header.empty() && csv.header.front() == "agent") {
      k = "attention";
      const std::size_t cols = csv.header.size() - 1;
      Tensor m({csv.rows.size(), cols});
      for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        for (std::size_t j = 0; j < cols; ++j) m.at(r, j) = csv.num(r, static_cast<int>(j + 1));
      }
      std::ofstream(out / (in.stem().string() + ".svg"))
          << heatmap_svg(m, p.title.empty() ? "Sequence attention" : p.title, "timestep", "agent");
    } else {
      throw DataError("unrecognized CSV layout in " + inputs[i]);
    }
    if (!kind.empty() && kind != k) throw InvalidArgument("cannot mix " + kind + " and " + k + " inputs");
    kind = k;
  }

  if (kind != "attention") {
    std::ofstream(out / (kind + ".svg"))
        << line_chart_svg(series, p.title.empty() ? title : p.title, x_label, y_label);
    std::ofstream data(out / "plot_data.csv");
    data << "series,x,y\n";
    for (const auto& s : series) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        data << s.name << ',' << format_double(s.x[i]) << ',' << format_double(s.y[i]) << '\n';
      }
    }
  }
  KeyValueFile kv = run_manifest(c, started, "");
  kv.set("kind", "plot");
  kv.set("plot.kind", kind);
  kv.save(out / "manifest");
  note(c, "wrote " + kind + " figure to " + c.out);
  return 0;
}

}  // namespace stemfold::cli
