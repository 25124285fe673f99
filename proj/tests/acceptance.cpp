// Acceptance gate: one PASS/FAIL line per criterion. The core group runs the
// analytic and contract checks; the desk group trains at reduced scale and
// caches each finished run under --workdir so an interrupted gate resumes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "stemfold/autodiff.hpp"
#include "stemfold/baselines.hpp"
#include "stemfold/dataset.hpp"
#include "stemfold/evaluation.hpp"
#include "stemfold/model.hpp"
#include "stemfold/ode.hpp"
#include "stemfold/simulation.hpp"
#include "stemfold/stgraph.hpp"
#include "stemfold/tensor_io.hpp"
#include "stemfold/text_format.hpp"
#include "stemfold/training.hpp"
#include "stemfold/version.hpp"
#include "toy_fixtures.hpp"

using namespace stemfold;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail
            << " [" << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
}

void progress(const std::string& msg) { std::cerr << "  " << msg << std::endl; }

// ---------------------------------------------------------------- core group

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const ModelConfig cfg = toy::tiny_config();
  const ObservedSample s = toy::random_sample(2, 5, 21);
  const STGraph g = build_temporal_graph(s, 0, 3, {cfg.max_gap, false});
  const ModelBatch batch = make_batch(g, s, cfg, 3, 2);
  const ParamSet ps = toy::random_params(cfg, 22);
  double worst = 0.0;
  std::string worst_group;
  for (const auto& group : toy::param_groups(ps)) {
    const double err = toy::elbo_group_error(ps, cfg, batch, group);
    if (err >= worst) {
      worst = err;
      worst_group = group;
    }
  }
  const double elapsed = seconds_since(t0);
  return {worst < 1e-4 && elapsed < 60.0, "max relative error " + fmt("%.2e", worst) + " (" + worst_group +
                                              "), " + fmt("%.2f", elapsed) + " s"};
}

Outcome rk4_order() {
  const auto decay = [](const ad::Var& z) { return ad::scale(z, -1.0); };
  const auto error_at = [&](int n) {
    ad::Tape tape;
    const ad::Var z0 = tape.constant(Tensor::scalar(1.0));
    const double grid[] = {0.0, 1.0};
    return std::abs(rk4_integrate(decay, z0, grid, n).back().value()[0] - std::exp(-1.0));
  };
  std::vector<double> x, y;
  for (int n : {10, 20, 40, 80}) {
    x.push_back(std::log(1.0 / n));
    y.push_back(std::log(error_at(n)));
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / 4;
    my += y[i] / 4;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const double slope = sxy / sxx;
  const double e100 = error_at(100);
  return {std::abs(slope - 4.0) <= 0.3 && e100 < 1e-9,
          "slope " + fmt("%.3f", slope) + ", error at 100 steps " + fmt("%.2e", e100)};
}

Vec2 momentum(const ParticleState& s) {
  Vec2 p{0.0, 0.0};
  for (const auto& v : s.vel) {
    p[0] += v[0];
    p[1] += v[1];
  }
  return p;
}

Outcome physics() {
  // Energy drift, wall-free.
  double drift = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    SimConfig cfg;
    cfg.box_half_width = 1e6;
    cfg.coupling_set = {0.5, 1.0, 1.5};
    Rng rng(seed);
    const ParticleSystem sys = sample_system(cfg, rng);
    ParticleState s = sys.initial;
    auto forces = total_forces(cfg, sys, s);
    const double e0 = total_spring_energy(s, sys.adjacency);
    for (int step = 0; step < 10000; ++step) {
      leapfrog_step(cfg, sys, s, forces);
      drift = std::max(drift, std::abs(total_spring_energy(s, sys.adjacency) - e0) / e0);
    }
  }

  // Two unit masses on a unit spring oscillate at sqrt(2).
  SimConfig two;
  two.n_agents = 2;
  two.box_half_width = 1e6;
  ParticleSystem pair;
  pair.adjacency = Tensor::matrix(2, 2, {0, 1, 1, 0});
  pair.initial.pos = {{{-0.5, 0.0}}, {{0.5, 0.0}}};
  pair.initial.vel = {{{0.0, 0.0}}, {{0.0, 0.0}}};
  ParticleState s = pair.initial;
  auto forces = total_forces(two, pair, s);
  std::vector<double> crossings;
  double prev = s.pos[1][0] - s.pos[0][0];
  for (long step = 1; step <= 30000; ++step) {
    leapfrog_step(two, pair, s, forces);
    const double cur = s.pos[1][0] - s.pos[0][0];
    if ((prev > 0) != (cur > 0)) crossings.push_back(two.dt * (step - 1 + prev / (prev - cur)));
    prev = cur;
  }
  const double omega =
      crossings.size() < 2 ? 0.0 : std::numbers::pi * (crossings.size() - 1) / (crossings.back() - crossings.front());

  // Pairwise antisymmetry and momentum between wall contacts, both systems.
  double antisym = 0.0, momentum_drift = 0.0;
  for (SystemKind kind : {SystemKind::kSprings, SystemKind::kCharged}) {
    SimConfig cfg;
    cfg.system = kind;
    cfg.edge_prob = 0.7;
    cfg.coupling_set = {0.5, 1.0, 2.0};
    Rng rng(10);
    const ParticleSystem sys = sample_system(cfg, rng);
    ParticleState st = sys.initial;
    auto f = total_forces(cfg, sys, st);
    Vec2 p0 = momentum(st);
    for (int step = 0; step < 6000; ++step) {
      if (step % 500 == 0) {
        for (int i = 0; i < cfg.n_agents; ++i) {
          for (int j = 0; j < cfg.n_agents; ++j) {
            const Vec2 a = pair_force(cfg, sys, st, i, j), b = pair_force(cfg, sys, st, j, i);
            antisym = std::max({antisym, std::abs(a[0] + b[0]), std::abs(a[1] + b[1])});
          }
        }
      }
      const int reflections = leapfrog_step(cfg, sys, st, f);
      const Vec2 p1 = momentum(st);
      if (reflections > 0) {
        p0 = p1;
      } else {
        momentum_drift = std::max({momentum_drift, std::abs(p1[0] - p0[0]), std::abs(p1[1] - p0[1])});
      }
    }
  }
  const bool ok = drift < 1e-4 && std::abs(omega - std::sqrt(2.0)) < 1e-3 && antisym < 1e-12 &&
                  momentum_drift < 1e-9;
  return {ok, "energy drift " + fmt("%.2e", drift) + ", omega " + fmt("%.6f", omega) + ", |F_ij+F_ji| " +
                  fmt("%.1e", antisym) + ", momentum drift between contacts " + fmt("%.1e", momentum_drift)};
}

Outcome graph_oracle() {
  Rng rng(77);
  int graphs = 0, mismatches = 0;
  for (int n = 1; n <= 4; ++n) {
    for (int T = 1; T <= 5; ++T) {
      for (double gap : {1.0, 2.0, kUnboundedGap}) {
        for (int trial = 0; trial < 20; ++trial) {
          std::vector<double> mask(static_cast<std::size_t>(n * T));
          for (auto& m : mask) m = trial == 0 || rng.uniform() < 0.5 ? 1.0 : 0.0;
          for (int i = 0; i < n; ++i) {
            mask[static_cast<std::size_t>(i * T) + rng.uniform_index(static_cast<std::size_t>(T))] = 1.0;
          }
          std::vector<double> adj(static_cast<std::size_t>(n * n), 0.0);
          for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
              const double w = rng.uniform() < 0.5 ? 0.0 : 0.5 + rng.uniform();
              adj[static_cast<std::size_t>(i * n + j)] = w;
              adj[static_cast<std::size_t>(j * n + i)] = w;
            }
          }
          const ObservedSample s = toy::make_sample(n, T, mask, adj);
          for (bool fc : {false, true}) {
            const STGraph g = build_temporal_graph(s, 0, T, {gap, fc});
            if (toy::graph_edges(g) != toy::brute_force_edges(s, gap, fc) ||
                g.edges.size() != toy::brute_force_edges(s, gap, fc).size()) {
              ++mismatches;
            }
            ++graphs;
          }
        }
      }
    }
  }
  return {mismatches == 0, std::to_string(graphs) + " graphs, " + std::to_string(mismatches) + " mismatches"};
}

Outcome closed_forms() {
  const double kl = gaussian_kl(1.0, 1.0);

  // Graph-attention weights over a random neighborhood.
  const ModelConfig cfg = toy::tiny_config();
  const ParamSet ps = toy::random_params(cfg, 4);
  Rng rng(5);
  double sum_err = 0.0;
  for (std::size_t k : {1, 2, 5, 17}) {
    Tensor h({1, static_cast<std::size_t>(cfg.d_g)});
    Tensor hh({k, static_cast<std::size_t>(cfg.d_g)});
    for (double& v : h.data()) v = rng.normal();
    for (double& v : hh.data()) v = rng.normal(0.0, 3.0);
    for (int layer = 1; layer <= cfg.n_layers; ++layer) {
      const Tensor w = attention_scores(h, hh, ps, layer, cfg);
      double total = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) total += w[i];
      sum_err = std::max(sum_err, std::abs(total - 1.0));
    }
  }

  // Reconstruction log-likelihood at a perfect prediction, per element.
  const double expected = -std::log(0.01 * std::sqrt(2.0 * std::numbers::pi));
  double rec_err = std::abs(gaussian_log_likelihood(0.37, 0.37, 0.01) - expected);
  ad::Tape tape;
  const Tensor target = Tensor::matrix(3, 4, {0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9, 1.0, 1.1, 1.2});
  const ad::Var pred = tape.constant(target);
  const ad::Var mu = tape.constant(Tensor::zeros({2, 2}));
  const ad::Var sigma = tape.constant(Tensor::full({2, 2}, 1.0));
  ElboTerms terms;
  elbo_loss(pred, target, Tensor::full({3}, 1.0), mu, sigma, 0.01, &terms);
  rec_err = std::max(rec_err, std::abs(terms.reconstruction / 12.0 - expected));

  return {std::abs(kl - 0.5) < 1e-12 && sum_err < 1e-12 && rec_err < 1e-10,
          "KL " + fmt("%.15f", kl) + ", attention sum error " + fmt("%.1e", sum_err) +
              ", log-likelihood error " + fmt("%.1e", rec_err)};
}

GenerateOptions small_generation(std::uint64_t seed) {
  GenerateOptions o;
  o.sim.n_agents = 5;
  o.sim.raw_steps = 1600;
  o.sim.seed = seed;
  o.n_hidden = 2;
  o.n_train = 40;
  o.n_test = 8;
  o.t_h = 10;
  o.t_f = 6;
  o.corruption.sparsity = SparsityMode::kUniform;
  o.corruption.keep = 0.6;
  o.corruption.apply_to_train = true;
  return o;
}

TrainConfig small_training() {
  TrainConfig c;
  c.model = toy::tiny_config();
  c.model.dropout = 0.1;
  c.epochs = 3;
  c.batch_size = 8;
  c.lr = 1e-3;
  c.deterministic = true;
  return c;
}

Outcome determinism() {
  const GeneratedData a = generate_dataset(small_generation(31));
  const GeneratedData b = generate_dataset(small_generation(31));
  bool same_data = a.train.samples.size() == b.train.samples.size();
  for (std::size_t k = 0; same_data && k < a.train.samples.size(); ++k) {
    const auto& x = a.train.samples[k];
    const auto& y = b.train.samples[k];
    same_data = encode_tensor(x.loc) == encode_tensor(y.loc) && encode_tensor(x.vel) == encode_tensor(y.vel) &&
                encode_tensor(x.mask) == encode_tensor(y.mask) &&
                encode_tensor(x.adjacency) == encode_tensor(y.adjacency);
  }
  const TrainResult r1 = train(a.train, small_training());
  const TrainResult r2 = train(b.train, small_training());
  double diff = r1.step_loss.size() == r2.step_loss.size() ? 0.0 : INFINITY;
  for (std::size_t k = 0; k < std::min(r1.step_loss.size(), r2.step_loss.size()); ++k) {
    diff = std::max(diff, std::abs(r1.step_loss[k] - r2.step_loss[k]));
  }
  for (std::size_t k = 0; k < std::min(r1.log.size(), r2.log.size()); ++k) {
    diff = std::max(diff, std::abs(r1.log[k].val_mse - r2.log[k].val_mse));
  }
  return {same_data && diff <= 1e-12, std::string(same_data ? "datasets bit-identical" : "datasets differ") +
                                          ", " + std::to_string(r1.step_loss.size()) +
                                          " step losses, max difference " + fmt("%.1e", diff)};
}

Outcome attention_contract() {
  const GeneratedData data = generate_dataset(small_generation(32));
  TrainConfig cfg = small_training();
  cfg.epochs = 2;
  const TrainResult tr = train(data.train, cfg);
  const int t_h = data.test.t_h;
  const std::size_t n = static_cast<std::size_t>(data.test.n_visible);
  bool shape_ok = true;
  double lo = 1.0, hi = 0.0, row_err = 0.0;
  for (const auto& s : data.test.samples) {
    const AttentionMap m = export_attention_maps(tr.best_params, cfg.model, s, t_h);
    shape_ok = shape_ok && m.raw.rows() == n && m.raw.cols() == static_cast<std::size_t>(t_h) &&
               m.scaled.same_shape(m.raw);
    for (std::size_t i = 0; i < m.scaled.size(); ++i) {
      lo = std::min(lo, m.scaled[i]);
      hi = std::max(hi, m.scaled[i]);
    }
    for (std::size_t i = 0; i < m.raw.rows(); ++i) {
      double total = 0.0;
      for (std::size_t t = 0; t < m.raw.cols(); ++t) total += m.raw.at(i, t);
      row_err = std::max(row_err, std::abs(total - 1.0));
    }
  }
  return {shape_ok && lo >= 0.0 && hi <= 1.0 && row_err < 1e-6,
          std::to_string(data.test.samples.size()) + " maps of " + std::to_string(n) + "x" +
              std::to_string(t_h) + ", values in [" + fmt("%.3g", lo) + ", " + fmt("%.3g", hi) +
              "], row-sum error " + fmt("%.1e", row_err)};
}

// ---------------------------------------------------------------- desk group

class RunCache {
 public:
  explicit RunCache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  // Test MSE at the last forecast step, computed once per key.
  double get(const std::string& name, const std::string& key, const std::function<double()>& compute) const {
    const fs::path file = dir_ / (name + ".result");
    if (fs::exists(file)) {
      const KeyValueFile kv = KeyValueFile::load(file);
      if (kv.get("key") == key) {
        progress(name + ": cached mse " + kv.require("mse"));
        return kv.get_double("mse");
      }
    }
    const auto t0 = Clock::now();
    const double mse = compute();
    KeyValueFile kv;
    kv.set("key", key);
    kv.set("mse", mse);
    kv.set("seconds", seconds_since(t0));
    kv.save(file);
    progress(name + ": mse " + format_double(mse) + " in " + fmt("%.0f", seconds_since(t0)) + " s");
    return mse;
  }

 private:
  fs::path dir_;
};

std::string data_key(const ObservedDataset& d) {
  Fnv1a h;
  for (const auto& s : d.samples) {
    const auto bytes = encode_tensor(s.loc);
    h.update(bytes.data(), bytes.size());
  }
  return h.hex();
}

int threads() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

TrainConfig desk_training(int epochs, int batch) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.threads = threads();
  c.deterministic = true;
  return c;
}

const std::vector<std::uint64_t> kSeeds = {1991, 1992, 1993};

struct DeskData {
  GeneratedData data;
  std::string key;
};

DeskData springs10() {
  GenerateOptions o;
  o.sim.n_agents = 10;
  o.sim.seed = 1991;
  o.n_hidden = 5;
  o.n_train = 1000;
  o.n_test = 200;
  o.t_h = 30;
  o.t_f = 30;
  DeskData d{generate_dataset(o), ""};
  d.key = data_key(d.data.train) + "-" + data_key(d.data.test);
  return d;
}

double stemfold_mse(const RunCache& cache, const DeskData& d, const std::string& variant, std::uint64_t seed) {
  TrainConfig cfg = desk_training(60, 64);
  cfg.model = apply_variant(cfg.model, variant);
  cfg.seed = seed;
  return cache.get(variant + "_" + std::to_string(seed), std::string(kCodeVersion) + "/" + config_fingerprint(cfg) + "/" + d.key,
                   [&] {
                     const TrainResult tr = train(d.data.train, cfg);
                     return evaluate_model(tr.best_params, cfg.model, d.data.test, cfg.threads)
                         .at(d.data.test.t_f)
                         .mean;
                   });
}

double single_rnn_mse(const RunCache& cache, const DeskData& d, std::uint64_t seed) {
  TrainConfig cfg = desk_training(60, 64);
  cfg.seed = seed;
  return cache.get("single_rnn_" + std::to_string(seed),
                   std::string(kCodeVersion) + "/" + config_fingerprint(cfg) + "/" + d.key, [&] {
                     return run_baseline(BaselineKind::kSingleRnn, d.data.train, d.data.test, cfg)
                         .at(d.data.test.t_f)
                         .mean;
                   });
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : "/") + fmt("%.4g", x);
  return s;
}

Outcome ablation_ordering(const RunCache& cache, const DeskData& d) {
  std::vector<double> orig, noattn, fc;
  int wins = 0;
  for (std::uint64_t seed : kSeeds) {
    orig.push_back(stemfold_mse(cache, d, "original", seed));
    noattn.push_back(stemfold_mse(cache, d, "no_attention", seed));
    fc.push_back(stemfold_mse(cache, d, "fully_connected", seed));
    wins += orig.back() < noattn.back() && orig.back() < fc.back() ? 1 : 0;
  }
  return {wins >= 2, "original beats both in " + std::to_string(wins) + "/3 seeds; mse@30 original " + join(orig) +
                         ", no_attention " + join(noattn) + ", fully_connected " + join(fc)};
}

Outcome baseline_ordering(const RunCache& cache, const DeskData& d) {
  std::vector<double> orig, rnn;
  int wins = 0;
  for (std::uint64_t seed : kSeeds) {
    orig.push_back(stemfold_mse(cache, d, "original", seed));
    rnn.push_back(single_rnn_mse(cache, d, seed));
    wins += orig.back() < rnn.back() ? 1 : 0;
  }
  return {wins >= 2, "STEMFold beats single_rnn in " + std::to_string(wins) + "/3 seeds; mse@30 " + join(orig) +
                         " vs " + join(rnn)};
}

Outcome hidden_trend(const RunCache& cache) {
  GenerateOptions base;
  base.sim.n_agents = 10;
  base.n_train = 300;
  base.n_test = 100;
  base.t_h = 30;
  base.t_f = 30;
  std::vector<double> means;
  for (double f : {0.2, 0.6}) {
    double total = 0.0;
    for (std::uint64_t seed : kSeeds) {
      GenerateOptions opt = base;
      opt.n_hidden = static_cast<int>(std::lround(f * base.sim.n_agents));
      opt.sim.seed = seed;
      TrainConfig cfg = desk_training(30, 32);
      cfg.seed = seed;
      const std::string name = "hidden" + fmt("%.0f", 100 * f) + "_" + std::to_string(seed);
      total += cache.get(name, std::string(kCodeVersion) + "/" + config_fingerprint(cfg) + "/" + name, [&] {
        const GeneratedData data = generate_dataset(opt);
        const TrainResult tr = train(data.train, cfg);
        return evaluate_model(tr.best_params, cfg.model, data.test, cfg.threads).at(data.test.t_f).mean;
      });
    }
    means.push_back(total / static_cast<double>(kSeeds.size()));
  }
  const double ratio = means[1] / means[0];
  return {ratio >= 1.5, "mean mse@30 at 20% hidden " + fmt("%.4g", means[0]) + ", at 60% " + fmt("%.4g", means[1]) +
                            ", ratio " + fmt("%.3f", ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance gate", "acceptance"};
  std::string group = "all";
  std::string workdir = "acceptance_runs";
  app.add_option("--group", group, "core, desk or all")->check(CLI::IsMember({"core", "desk", "all"}));
  app.add_option("--workdir", workdir, "Cache directory for desk-scale runs");
  CLI11_PARSE(app, argc, argv);

  if (group == "core" || group == "all") {
    report(1, "ELBO gradients", gradient_check);
    report(2, "RK4 order", rk4_order);
    report(3, "simulator physics", physics);
    report(4, "graph oracle", graph_oracle);
    report(5, "closed forms", closed_forms);
    report(9, "determinism", determinism);
    report(10, "attention maps", attention_contract);
  }
  if (group == "desk" || group == "all") {
    const RunCache cache{fs::path(workdir)};
    std::optional<DeskData> data;
    const auto desk = [&]() -> const DeskData& {
      if (!data) data = springs10();
      return *data;
    };
    report(6, "ablation ordering", [&] { return ablation_ordering(cache, desk()); });
    report(7, "baseline ordering", [&] { return baseline_ordering(cache, desk()); });
    report(8, "hidden-fraction trend", [&] { return hidden_trend(cache); });
  }
  return 0;
}
