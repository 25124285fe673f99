#include "stemfold/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "stemfold/errors.hpp"
#include "stemfold/tensor_io.hpp"

namespace stemfold {

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

std::array<double, 4> ObservedSample::feature(int i, int t) const {
  const std::size_t T = static_cast<std::size_t>(timesteps());
  const std::size_t base = (static_cast<std::size_t>(i) * T + static_cast<std::size_t>(t)) * 2;
  return {loc[base], loc[base + 1], vel[base], vel[base + 1]};
}

bool ObservedSample::observed(int i, int t) const {
  return mask[static_cast<std::size_t>(i) * static_cast<std::size_t>(timesteps()) +
              static_cast<std::size_t>(t)] != 0.0;
}

ObservedSample select_agents(const TrajectorySet& traj, const std::vector<int>& visible) {
  const std::size_t T = static_cast<std::size_t>(traj.timesteps());
  const std::size_t n = visible.size();
  if (n == 0) throw InvalidArgument("no visible agents");
  ObservedSample s;
  s.loc = Tensor::zeros({n, T, 2});
  s.vel = Tensor::zeros({n, T, 2});
  s.adjacency = Tensor::zeros({n, n});
  s.mask = Tensor::full({n, T}, 1.0);
  for (std::size_t a = 0; a < n; ++a) {
    const std::size_t src = static_cast<std::size_t>(visible[a]);
    if (src >= static_cast<std::size_t>(traj.n_agents())) {
      throw InvalidArgument("visible index out of range");
    }
    std::copy_n(traj.positions.data().begin() + src * T * 2, T * 2,
                s.loc.data().begin() + a * T * 2);
    std::copy_n(traj.velocities.data().begin() + src * T * 2, T * 2,
                s.vel.data().begin() + a * T * 2);
    for (std::size_t b = 0; b < n; ++b) {
      s.adjacency.at(a, b) = traj.adjacency.at(src, static_cast<std::size_t>(visible[b]));
    }
  }
  return s;
}

ObservedSample mask_hidden(const TrajectorySet& traj, int m_hidden, Rng& rng,
                           std::vector<int>* visible_out) {
  const int m = traj.n_agents();
  if (m_hidden < 0 || m_hidden >= m) {
    throw InvalidArgument("m_hidden must satisfy 0 <= m_hidden < " + std::to_string(m));
  }
  const auto hidden = rng.choose(static_cast<std::size_t>(m), static_cast<std::size_t>(m_hidden));
  std::vector<int> visible;
  for (int i = 0; i < m; ++i) {
    if (!std::binary_search(hidden.begin(), hidden.end(), static_cast<std::size_t>(i))) {
      visible.push_back(i);
    }
  }
  if (visible_out != nullptr) *visible_out = visible;
  return select_agents(traj, visible);
}

std::string to_string(SparsityMode mode) {
  switch (mode) {
    case SparsityMode::kUniform: return "uniform";
    case SparsityMode::kSyncFailure: return "sync_failure";
    case SparsityMode::kAsyncFailure: return "async_failure";
  }
  return "uniform";
}

SparsityMode parse_sparsity_mode(const std::string& name) {
  if (name == "uniform") return SparsityMode::kUniform;
  if (name == "sync_failure" || name == "sync") return SparsityMode::kSyncFailure;
  if (name == "async_failure" || name == "async") return SparsityMode::kAsyncFailure;
  throw InvalidArgument("unknown sparsity mode '" + name + "'");
}

ObservedSample apply_sparsity(const ObservedSample& sample, SparsityMode mode, double keep,
                              int t_h, Rng& rng) {
  if (!(keep > 0.0)) throw InvalidArgument("keep must be positive");
  if (t_h < 1 || t_h > sample.timesteps()) throw InvalidArgument("t_h outside the sample");
  const bool fractional = keep < 1.0;
  if (!fractional && keep > t_h) {
    throw InvalidArgument("keep exceeds the encoder window of " + std::to_string(t_h));
  }
  const std::size_t window = static_cast<std::size_t>(t_h);
  const std::size_t count =
      fractional ? std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(keep * t_h)))
                 : static_cast<std::size_t>(keep);
  const std::size_t n = static_cast<std::size_t>(sample.n_agents());
  const std::size_t T = static_cast<std::size_t>(sample.timesteps());

  ObservedSample out = sample;
  auto row = [&](std::size_t i) { return out.mask.data().subspan(i * T, window); };
  switch (mode) {
    case SparsityMode::kSyncFailure: {
      const auto kept = rng.choose(window, count);
      for (std::size_t i = 0; i < n; ++i) {
        auto r = row(i);
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t t : kept) r[t] = 1.0;
      }
      break;
    }
    case SparsityMode::kAsyncFailure: {
      for (std::size_t i = 0; i < n; ++i) {
        const auto kept = rng.choose(window, count);
        auto r = row(i);
        std::fill(r.begin(), r.end(), 0.0);
        for (std::size_t t : kept) r[t] = 1.0;
      }
      break;
    }
    case SparsityMode::kUniform: {
      const double p = fractional ? keep : keep / static_cast<double>(t_h);
      for (std::size_t i = 0; i < n; ++i) {
        auto r = row(i);
        bool any = false;
        for (std::size_t t = 0; t < window; ++t) {
          r[t] = rng.bernoulli(p) ? 1.0 : 0.0;
          any = any || r[t] != 0.0;
        }
        if (!any) r[rng.uniform_index(window)] = 1.0;
      }
      break;
    }
  }
  // Entries that were already unobserved stay unobserved.
  for (std::size_t i = 0; i < out.mask.size(); ++i) out.mask[i] *= sample.mask[i];
  return out;
}

ObservedSample add_observation_noise(const ObservedSample& sample, double sigma, int t_h,
                                     Rng& rng) {
  if (!(sigma >= 0.0)) throw InvalidArgument("noise sigma must be >= 0");
  ObservedSample out = sample;
  if (sigma == 0.0) return out;
  const std::size_t n = static_cast<std::size_t>(sample.n_agents());
  const std::size_t T = static_cast<std::size_t>(sample.timesteps());
  const std::size_t window = std::min<std::size_t>(T, static_cast<std::size_t>(std::max(t_h, 0)));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < window; ++t) {
      for (std::size_t c = 0; c < 2; ++c) {
        out.loc[(i * T + t) * 2 + c] += rng.normal(0.0, sigma);
        out.vel[(i * T + t) * 2 + c] += rng.normal(0.0, sigma);
      }
    }
  }
  return out;
}

Tensor build_r_topology(int n_visible, int n_hidden, int r, Rng& rng) {
  if (n_visible < 1 || n_hidden < 0) throw InvalidArgument("invalid agent counts");
  if (r < 1 || r > n_visible) {
    throw InvalidArgument("r must lie in [1, " + std::to_string(n_visible) + "]");
  }
  const std::size_t m = static_cast<std::size_t>(n_visible + n_hidden);
  const std::size_t nv = static_cast<std::size_t>(n_visible);
  Tensor adj = Tensor::zeros({m, m});
  for (std::size_t i = 0; i < nv; ++i) {
    for (std::size_t j = 0; j < nv; ++j) adj.at(i, j) = i == j ? 0.0 : 1.0;
  }
  for (std::size_t h = nv; h < m; ++h) {
    for (std::size_t v : rng.choose(nv, static_cast<std::size_t>(r))) {
      adj.at(h, v) = 1.0;
      adj.at(v, h) = 1.0;
    }
  }
  return adj;
}

Normalizer Normalizer::fit(const std::vector<ObservedSample>& samples) {
  if (samples.empty()) throw InvalidArgument("cannot fit a normalizer on no samples");
  Normalizer n;
  n.loc_min = n.vel_min = INFINITY;
  n.loc_max = n.vel_max = -INFINITY;
  for (const auto& s : samples) {
    for (double v : s.loc.data()) {
      n.loc_min = std::min(n.loc_min, v);
      n.loc_max = std::max(n.loc_max, v);
    }
    for (double v : s.vel.data()) {
      n.vel_min = std::min(n.vel_min, v);
      n.vel_max = std::max(n.vel_max, v);
    }
  }
  if (!(n.loc_max > n.loc_min)) n.loc_max = n.loc_min + 1.0;
  if (!(n.vel_max > n.vel_min)) n.vel_max = n.vel_min + 1.0;
  return n;
}

void Normalizer::apply(ObservedSample& s) const {
  for (double& v : s.loc.data()) v = 2.0 * (v - loc_min) / (loc_max - loc_min) - 1.0;
  for (double& v : s.vel.data()) v = 2.0 * (v - vel_min) / (vel_max - vel_min) - 1.0;
}

void Normalizer::write(KeyValueFile& kv) const {
  kv.set("norm.loc_min", loc_min);
  kv.set("norm.loc_max", loc_max);
  kv.set("norm.vel_min", vel_min);
  kv.set("norm.vel_max", vel_max);
}

Normalizer Normalizer::read(const KeyValueFile& kv) {
  Normalizer n;
  n.loc_min = kv.get_double_or("norm.loc_min", -1.0);
  n.loc_max = kv.get_double_or("norm.loc_max", 1.0);
  n.vel_min = kv.get_double_or("norm.vel_min", -1.0);
  n.vel_max = kv.get_double_or("norm.vel_max", 1.0);
  return n;
}

namespace {

ObservedSample generate_one(const GenerateOptions& opt, std::uint64_t seed) {
  SimConfig cfg = opt.sim;
  cfg.seed = seed;
  Rng rng(seed);
  if (opt.r_topology) {
    const int n_visible = cfg.n_agents - opt.n_hidden;
    const Tensor topo = build_r_topology(n_visible, opt.n_hidden, *opt.r_topology, rng);
    const ParticleSystem sys = sample_system(cfg, topo, rng);
    const TrajectorySet traj = simulate(sys, cfg);
    std::vector<int> visible(static_cast<std::size_t>(n_visible));
    for (int i = 0; i < n_visible; ++i) visible[static_cast<std::size_t>(i)] = i;
    return select_agents(traj, visible);
  }
  const ParticleSystem sys = sample_system(cfg, rng);
  const TrajectorySet traj = simulate(sys, cfg);
  return mask_hidden(traj, opt.n_hidden, rng);
}

void corrupt(ObservedDataset& ds, const GenerateOptions& opt, std::uint64_t seed_base) {
  const CorruptionSpec& c = opt.corruption;
  if (!c.sparsity && c.noise_sigma == 0.0) return;
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    // Corruption draws use their own stream so clean data is unaffected.
    Rng rng(seed_base + k + 0x9e3779b97f4a7c15ULL);
    if (c.sparsity) ds.samples[k] = apply_sparsity(ds.samples[k], *c.sparsity, c.keep, ds.t_h, rng);
    if (c.noise_sigma > 0.0) {
      ds.samples[k] = add_observation_noise(ds.samples[k], c.noise_sigma, ds.t_h, rng);
    }
  }
}

}  // namespace

GeneratedData generate_dataset(const GenerateOptions& opt) {
  opt.sim.validate();
  if (opt.n_hidden < 0 || opt.n_hidden >= opt.sim.n_agents) {
    throw InvalidArgument("hidden agent count must be in [0, n_agents)");
  }
  if (opt.n_train < 1 || opt.n_test < 0) throw InvalidArgument("invalid sample counts");
  if (opt.t_h < 1 || opt.t_f < 1 || opt.t_h + opt.t_f > opt.sim.timesteps()) {
    throw InvalidArgument("t_h + t_f must fit in the " + std::to_string(opt.sim.timesteps()) +
                          " simulated timesteps");
  }
  GeneratedData out;
  for (ObservedDataset* ds : {&out.train, &out.test}) {
    ds->n_total = opt.sim.n_agents;
    ds->n_visible = opt.sim.n_agents - opt.n_hidden;
    ds->t_h = opt.t_h;
    ds->t_f = opt.t_f;
    ds->obs_dt = opt.sim.dt * opt.sim.subsample;
  }
  out.train.split = Split::kTrain;
  out.test.split = Split::kTest;
  const std::uint64_t seed = opt.sim.seed;
  for (int k = 0; k < opt.n_train; ++k) {
    out.train.samples.push_back(generate_one(opt, seed + static_cast<std::uint64_t>(k)));
  }
  for (int k = 0; k < opt.n_test; ++k) {
    out.test.samples.push_back(
        generate_one(opt, seed + static_cast<std::uint64_t>(opt.n_train + k)));
  }
  out.normalizer = Normalizer::fit(out.train.samples);
  for (auto& s : out.train.samples) out.normalizer.apply(s);
  for (auto& s : out.test.samples) out.normalizer.apply(s);
  if (opt.corruption.apply_to_train) corrupt(out.train, opt, seed);
  corrupt(out.test, opt, seed + static_cast<std::uint64_t>(opt.n_train));
  return out;
}

namespace {

const char* kArrays[] = {"loc", "vel", "adj", "mask"};

std::filesystem::path array_path(const std::filesystem::path& dir, Split split,
                                 const std::string& name) {
  return dir / (to_string(split) + "_" + name + ".stemtens");
}

void write_split(const std::filesystem::path& dir, const ObservedDataset& ds) {
  if (ds.samples.empty()) return;
  const std::size_t S = ds.samples.size();
  const std::size_t n = static_cast<std::size_t>(ds.samples[0].n_agents());
  const std::size_t T = static_cast<std::size_t>(ds.samples[0].timesteps());
  Tensor loc({S, n, T, 2}), vel({S, n, T, 2}), adj({S, n, n}), mask({S, n, T});
  for (std::size_t k = 0; k < S; ++k) {
    const auto& s = ds.samples[k];
    if (static_cast<std::size_t>(s.n_agents()) != n ||
        static_cast<std::size_t>(s.timesteps()) != T) {
      throw InvalidArgument("all samples in a split must share agent count and length");
    }
    std::copy(s.loc.data().begin(), s.loc.data().end(), loc.data().begin() + k * n * T * 2);
    std::copy(s.vel.data().begin(), s.vel.data().end(), vel.data().begin() + k * n * T * 2);
    std::copy(s.adjacency.data().begin(), s.adjacency.data().end(),
              adj.data().begin() + k * n * n);
    std::copy(s.mask.data().begin(), s.mask.data().end(), mask.data().begin() + k * n * T);
  }
  write_tensor(array_path(dir, ds.split, "loc"), loc);
  write_tensor(array_path(dir, ds.split, "vel"), vel);
  write_tensor(array_path(dir, ds.split, "adj"), adj);
  write_tensor(array_path(dir, ds.split, "mask"), mask);
}

}  // namespace

std::string dataset_fingerprint(const std::filesystem::path& dir) {
  Fnv1a h;
  for (Split split : {Split::kTrain, Split::kTest}) {
    for (const char* name : kArrays) {
      const auto p = array_path(dir, split, name);
      if (!std::filesystem::exists(p)) continue;
      h.update(p.filename().string());
      h.update(file_fingerprint(p));
    }
  }
  return h.hex();
}

std::string save_dataset(const std::filesystem::path& dir, const GeneratedData& data,
                         const GenerateOptions& opt, const KeyValueFile& extra) {
  std::filesystem::create_directories(dir);
  write_split(dir, data.train);
  write_split(dir, data.test);

  KeyValueFile kv;
  kv.set("format_version", kDatasetFormatVersion);
  kv.set("kind", "dataset");
  kv.set("system", to_string(opt.sim.system));
  kv.set("n_agents", opt.sim.n_agents);
  kv.set("n_hidden", opt.n_hidden);
  kv.set("n_visible", opt.sim.n_agents - opt.n_hidden);
  kv.set("n_train", static_cast<std::int64_t>(data.train.samples.size()));
  kv.set("n_test", static_cast<std::int64_t>(data.test.samples.size()));
  kv.set("timesteps", opt.sim.timesteps());
  kv.set("t_h", opt.t_h);
  kv.set("t_f", opt.t_f);
  kv.set("obs_dt", opt.sim.dt * opt.sim.subsample);
  kv.set("seed", opt.sim.seed);
  kv.set("sim.edge_prob", opt.sim.edge_prob);
  kv.set("sim.coupling_set", join_doubles(opt.sim.coupling_set));
  kv.set("sim.charge_magnitude", opt.sim.charge_magnitude);
  kv.set("sim.coulomb_constant", opt.sim.coulomb_constant);
  kv.set("sim.softening", opt.sim.softening);
  kv.set("sim.dt", opt.sim.dt);
  kv.set("sim.subsample", opt.sim.subsample);
  kv.set("sim.raw_steps", static_cast<std::int64_t>(opt.sim.raw_steps));
  kv.set("sim.box_half_width", opt.sim.box_half_width);
  kv.set("r_topology", opt.r_topology ? static_cast<std::int64_t>(*opt.r_topology) : 0);
  kv.set("corruption.sparsity",
         opt.corruption.sparsity ? to_string(*opt.corruption.sparsity) : std::string("none"));
  kv.set("corruption.keep", opt.corruption.keep);
  kv.set("corruption.noise_sigma", opt.corruption.noise_sigma);
  kv.set("corruption.apply_to_train", opt.corruption.apply_to_train);
  data.normalizer.write(kv);
  const std::string fp = dataset_fingerprint(dir);
  kv.set("fingerprint", fp);
  for (const auto& [k, v] : extra.entries()) kv.set(k, v);
  kv.save(dir / "manifest");
  return fp;
}

KeyValueFile load_dataset_manifest(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset not found: " + dir.string());
  const auto path = dir / "manifest";
  if (!std::filesystem::exists(path)) throw DataError("dataset has no manifest: " + dir.string());
  KeyValueFile kv = KeyValueFile::load(path);
  const auto version = kv.get_int_or("format_version", kDatasetFormatVersion);
  if (version != kDatasetFormatVersion) {
    throw DataError("unsupported dataset format version " + std::to_string(version));
  }
  return kv;
}

ObservedDataset load_dataset(const std::filesystem::path& dir, Split split) {
  const KeyValueFile kv = load_dataset_manifest(dir);
  if (auto fp = kv.get("fingerprint"); fp && *fp != dataset_fingerprint(dir)) {
    throw DataError("dataset contents do not match manifest fingerprint in " + dir.string());
  }
  const Tensor loc = read_tensor(array_path(dir, split, "loc"));
  const Tensor vel = read_tensor(array_path(dir, split, "vel"));
  if (loc.rank() != 4 || loc.dim(3) != 2 || !loc.same_shape(vel)) {
    throw DataError("loc/vel must both be S x N x T x 2");
  }
  const std::size_t S = loc.dim(0), n = loc.dim(1), T = loc.dim(2);
  std::optional<Tensor> adj, mask;
  if (auto p = array_path(dir, split, "adj"); std::filesystem::exists(p)) {
    adj = read_tensor(p);
    if (adj->shape() != std::vector<std::size_t>{S, n, n}) throw DataError("adj must be S x N x N");
  }
  if (auto p = array_path(dir, split, "mask"); std::filesystem::exists(p)) {
    mask = read_tensor(p);
    if (mask->shape() != std::vector<std::size_t>{S, n, T}) {
      throw DataError("mask must be S x N x T");
    }
  }

  ObservedDataset ds;
  ds.split = split;
  ds.n_visible = static_cast<int>(n);
  ds.n_total = static_cast<int>(kv.get_int_or("n_agents", static_cast<std::int64_t>(n)));
  ds.t_h = static_cast<int>(kv.get_int("t_h"));
  ds.t_f = static_cast<int>(kv.get_int("t_f"));
  ds.obs_dt = kv.get_double_or("obs_dt", 0.1);
  if (ds.t_h < 1 || ds.t_f < 1 || static_cast<std::size_t>(ds.t_h + ds.t_f) > T) {
    throw DataError("t_h + t_f exceed the stored sequence length");
  }
  ds.samples.resize(S);
  for (std::size_t k = 0; k < S; ++k) {
    ObservedSample& s = ds.samples[k];
    s.loc = Tensor({n, T, 2}, std::vector<double>(loc.data().begin() + k * n * T * 2,
                                                  loc.data().begin() + (k + 1) * n * T * 2));
    s.vel = Tensor({n, T, 2}, std::vector<double>(vel.data().begin() + k * n * T * 2,
                                                  vel.data().begin() + (k + 1) * n * T * 2));
    if (adj) {
      s.adjacency = Tensor({n, n}, std::vector<double>(adj->data().begin() + k * n * n,
                                                       adj->data().begin() + (k + 1) * n * n));
    } else {
      s.adjacency = Tensor::zeros({n, n});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) s.adjacency.at(i, j) = i == j ? 0.0 : 1.0;
      }
    }
    if (mask) {
      s.mask = Tensor({n, T}, std::vector<double>(mask->data().begin() + k * n * T,
                                                  mask->data().begin() + (k + 1) * n * T));
    } else {
      s.mask = Tensor::full({n, T}, 1.0);
    }
  }
  return ds;
}

}  // namespace stemfold
