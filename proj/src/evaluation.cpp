#include "stemfold/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stemfold/errors.hpp"
#include "stemfold/tensor_io.hpp"

namespace stemfold {

StepStats mean_std(std::span<const double> values) {
  StepStats s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

StepStats mse_at_step(std::span<const Tensor> preds, std::span<const Tensor> targets, int step) {
  if (preds.size() != targets.size()) throw InvalidArgument("prediction/target count mismatch");
  if (preds.empty()) throw InvalidArgument("no samples to evaluate");
  std::vector<double> per_sample;
  per_sample.reserve(preds.size());
  for (std::size_t k = 0; k < preds.size(); ++k) {
    per_sample.push_back(sample_mse_at_step(preds[k], targets[k], step));
  }
  return mean_std(per_sample);
}

StepStats EvalReport::at(int step) const {
  if (step < 1 || static_cast<std::size_t>(step) > per_step.size()) {
    throw InvalidArgument("report has no forecast step " + std::to_string(step));
  }
  return per_step[static_cast<std::size_t>(step) - 1];
}

std::vector<double> EvalReport::curve() const {
  std::vector<double> c;
  for (const auto& s : per_step) c.push_back(s.mean);
  return c;
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,mse_mean,mse_std\n";
  for (std::size_t k = 0; k < per_step.size(); ++k) {
    out << k + 1 << ',' << format_double(per_step[k].mean) << ',' << format_double(per_step[k].std)
        << '\n';
  }
}

KeyValueFile EvalReport::summary() const {
  KeyValueFile kv;
  kv.set("model", model);
  kv.set("variant", variant);
  kv.set("n_samples", static_cast<std::int64_t>(n_samples));
  kv.set("forecast_steps", static_cast<std::int64_t>(per_step.size()));
  if (!per_step.empty()) {
    kv.set("mse_last_mean", per_step.back().mean);
    kv.set("mse_last_std", per_step.back().std);
  }
  kv.set("config_fingerprint", config_fingerprint);
  std::vector<double> s(seeds.begin(), seeds.end());
  kv.set("seeds", join_doubles(s));
  return kv;
}

EvalReport evaluate_forecasts(std::span<const Tensor> preds, std::span<const Tensor> targets) {
  if (preds.empty()) throw InvalidArgument("no samples to evaluate");
  EvalReport r;
  r.n_samples = preds.size();
  const int tf = static_cast<int>(preds.front().dim(1));
  for (int step = 1; step <= tf; ++step) r.per_step.push_back(mse_at_step(preds, targets, step));
  return r;
}

namespace {

std::vector<Tensor> targets_of(const ObservedDataset& test) {
  std::vector<Tensor> t;
  for (const auto& s : test.samples) t.push_back(target_window(s, test.t_h, test.t_f));
  return t;
}

std::vector<const ObservedSample*> pointers(const ObservedDataset& d) {
  std::vector<const ObservedSample*> p;
  for (const auto& s : d.samples) p.push_back(&s);
  return p;
}

}  // namespace

EvalReport evaluate_model(const ParamSet& params, const ModelConfig& cfg, const ObservedDataset& test,
                          int threads) {
  const auto ptrs = pointers(test);
  const auto preds = predict_forecasts(params, cfg, ptrs, test.t_h, test.t_f, test.obs_dt, 8, threads);
  EvalReport r = evaluate_forecasts(preds, targets_of(test));
  r.variant = cfg.variant();
  return r;
}

EvalReport evaluate_baseline(const BaselineModel& model, const ObservedDataset& test, int threads) {
  const auto ptrs = pointers(test);
  const auto preds = predict_baseline(model, ptrs, test.t_h, test.t_f, 8, threads);
  EvalReport r = evaluate_forecasts(preds, targets_of(test));
  r.model = to_string(model.kind);
  r.variant = "-";
  return r;
}

std::string config_fingerprint(const TrainConfig& cfg) {
  KeyValueFile kv;
  cfg.write(kv);
  Fnv1a h;
  h.update(kv.to_string());
  return h.hex();
}

EvalReport run_baseline(BaselineKind kind, const ObservedDataset& train, const ObservedDataset& test,
                        const TrainConfig& cfg, int hidden) {
  const BaselineTrainResult tr = train_baseline(kind, train, cfg, hidden);
  EvalReport r = evaluate_baseline(tr.model, test, cfg.threads);
  r.config_fingerprint = config_fingerprint(cfg);
  r.seeds = {cfg.seed};
  return r;
}

ModelConfig apply_variant(ModelConfig base, const std::string& variant) {
  base.fully_connected = false;
  base.no_attention = false;
  base.no_temporal_encoding = false;
  if (variant == "original") return base;
  if (variant == "fully_connected") {
    base.fully_connected = true;
  } else if (variant == "no_attention") {
    base.no_attention = true;
  } else if (variant == "no_temporal_encoding") {
    base.no_temporal_encoding = true;
  } else {
    throw InvalidArgument("unknown ablation variant '" + variant + "'");
  }
  return base;
}

const AblationCell& AblationReport::cell(const std::string& variant, std::uint64_t seed) const {
  for (const auto& c : cells) {
    if (c.variant == variant && c.seed == seed) return c;
  }
  throw InvalidArgument("no ablation cell for " + variant + " / seed " + std::to_string(seed));
}

StepStats AblationReport::across_seeds(const std::string& variant) const {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.variant == variant) v.push_back(c.mse);
  }
  return mean_std(v);
}

void AblationReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,seed,step,mse_mean,mse_std\n";
  for (const auto& c : cells) {
    out << c.variant << ',' << c.seed << ',' << step << ',' << format_double(c.mse) << ','
        << format_double(c.mse_std) << '\n';
  }
}

std::string AblationReport::table() const {
  std::ostringstream os;
  os << "variant";
  for (auto s : seeds) os << "\tseed " << s;
  os << "\tmean\tstd\n";
  char buf[64];
  for (const auto& v : variants) {
    os << v;
    for (auto s : seeds) {
      std::snprintf(buf, sizeof buf, "\t%.6f", cell(v, s).mse);
      os << buf;
    }
    const StepStats st = across_seeds(v);
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f", st.mean, st.std);
    os << buf << '\n';
  }
  return os.str();
}

AblationReport run_ablation_suite(const ObservedDataset& train, const ObservedDataset& test,
                                  const TrainConfig& base, std::span<const std::uint64_t> seeds,
                                  std::span<const std::string> variants, const ProgressFn& progress) {
  if (seeds.empty()) throw InvalidArgument("ablation needs at least one seed");
  AblationReport rep;
  rep.variants.assign(variants.begin(), variants.end());
  rep.seeds.assign(seeds.begin(), seeds.end());
  rep.step = test.t_f;
  for (const auto& v : variants) {
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.model = apply_variant(base.model, v);
      cfg.seed = seed;
      const TrainResult tr = stemfold::train(train, cfg);
      const EvalReport er = evaluate_model(tr.best_params, cfg.model, test, cfg.threads);
      rep.cells.push_back({v, seed, er.at(test.t_f).mean, er.at(test.t_f).std});
      if (progress) {
        progress(v + " seed " + std::to_string(seed) + " mse " + format_double(rep.cells.back().mse));
      }
    }
  }
  return rep;
}

AttentionMap export_attention_maps(const ParamSet& params, const ModelConfig& cfg,
                                   const ObservedSample& sample, int t_h) {
  AttentionMap m;
  m.raw = pooling_weights(sample, params, cfg, t_h);
  m.scaled = m.raw;
  const std::size_t n = m.raw.rows(), t = m.raw.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = 0.0;
    for (std::size_t j = 0; j < t; ++j) mx = std::max(mx, m.raw.at(i, j));
    for (std::size_t j = 0; j < t; ++j) m.scaled.at(i, j) = mx > 0.0 ? m.raw.at(i, j) / mx : 0.0;
  }
  return m;
}

void write_attention_map(const std::filesystem::path& dir, const std::string& stem,
                         const AttentionMap& map) {
  std::filesystem::create_directories(dir);
  write_tensor(dir / (stem + ".stemtens"), map.scaled);
  write_tensor(dir / (stem + "_raw.stemtens"), map.raw);
  std::ofstream out(dir / (stem + ".csv"));
  if (!out) throw IoError("cannot write attention CSV in " + dir.string());
  out << "agent";
  for (std::size_t j = 0; j < map.scaled.cols(); ++j) out << ",t" << j;
  out << '\n';
  for (std::size_t i = 0; i < map.scaled.rows(); ++i) {
    out << i;
    for (std::size_t j = 0; j < map.scaled.cols(); ++j) out << ',' << format_double(map.scaled.at(i, j));
    out << '\n';
  }
}

std::vector<double> SweepReport::means() const {
  std::vector<double> m;
  for (const auto& row : mse) m.push_back(mean_std(row).mean);
  return m;
}

double SweepReport::monotonicity() const {
  const auto m = means();
  if (m.size() < 2) return 1.0;
  int inc = 0;
  for (std::size_t k = 1; k < m.size(); ++k) inc += m[k] > m[k - 1] ? 1 : 0;
  return static_cast<double>(inc) / static_cast<double>(m.size() - 1);
}

double SweepReport::ratio() const {
  const auto m = means();
  if (m.empty() || m.front() <= 0.0) return 0.0;
  return m.back() / m.front();
}

void SweepReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "hidden_fraction,seed,step,mse\n";
  for (std::size_t f = 0; f < fractions.size(); ++f) {
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      out << format_double(fractions[f]) << ',' << seeds[s] << ',' << step << ','
          << format_double(mse[f][s]) << '\n';
    }
  }
}

SweepReport hidden_fraction_sweep(const GenerateOptions& base, std::span<const double> fractions,
                                  std::span<const std::uint64_t> seeds, const TrainConfig& cfg,
                                  const ProgressFn& progress) {
  if (fractions.empty() || seeds.empty()) throw InvalidArgument("sweep needs fractions and seeds");
  if (!std::is_sorted(fractions.begin(), fractions.end())) {
    throw InvalidArgument("hidden fractions must be sorted ascending");
  }
  SweepReport rep;
  rep.fractions.assign(fractions.begin(), fractions.end());
  rep.seeds.assign(seeds.begin(), seeds.end());
  rep.step = base.t_f;
  for (double f : fractions) {
    if (!(f >= 0.0 && f < 1.0)) throw InvalidArgument("hidden fraction must lie in [0, 1)");
    std::vector<double> row;
    for (std::uint64_t seed : seeds) {
      GenerateOptions opt = base;
      opt.n_hidden = static_cast<int>(std::lround(f * base.sim.n_agents));
      opt.sim.seed = seed;
      const GeneratedData data = generate_dataset(opt);
      TrainConfig tc = cfg;
      tc.seed = seed;
      const TrainResult tr = stemfold::train(data.train, tc);
      const EvalReport er = evaluate_model(tr.best_params, tc.model, data.test, tc.threads);
      row.push_back(er.at(data.test.t_f).mean);
      if (progress) {
        progress("hidden " + format_double(f) + " seed " + std::to_string(seed) + " mse " +
                 format_double(row.back()));
      }
    }
    rep.mse.push_back(std::move(row));
  }
  return rep;
}

}  // namespace stemfold
