#include "stemfold/simulation.hpp"

#include <cmath>
#include <numbers>

#include "stemfold/errors.hpp"

namespace stemfold {

std::string to_string(SystemKind kind) {
  return kind == SystemKind::kSprings ? "springs" : "charged";
}

SystemKind parse_system_kind(const std::string& name) {
  if (name == "springs") return SystemKind::kSprings;
  if (name == "charged") return SystemKind::kCharged;
  throw InvalidArgument("unknown system '" + name + "' (expected springs or charged)");
}

void SimConfig::validate() const {
  if (n_agents < 1) throw InvalidArgument("n_agents must be positive");
  if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  if (subsample < 1) throw InvalidArgument("subsample must be >= 1");
  if (raw_steps < subsample || raw_steps % subsample != 0) {
    throw InvalidArgument("raw_steps must be a positive multiple of subsample");
  }
  if (edge_prob < 0.0 || edge_prob > 1.0) throw InvalidArgument("edge_prob must lie in [0, 1]");
  if (coupling_set.empty()) throw InvalidArgument("coupling_set must be nonempty");
  for (double k : coupling_set) {
    if (!(k >= 0.0)) throw InvalidArgument("coupling values must be >= 0");
  }
  if (!(charge_magnitude > 0.0)) throw InvalidArgument("charge magnitude must be positive");
  if (!(softening >= 0.0)) throw InvalidArgument("softening must be >= 0");
  if (!(box_half_width > 0.0)) throw InvalidArgument("box half-width must be positive");
}

namespace {

ParticleState sample_initial(const SimConfig& cfg, Rng& rng) {
  const int m = cfg.n_agents;
  ParticleState s;
  s.pos.resize(m);
  s.vel.resize(m);
  for (int i = 0; i < m; ++i) {
    s.pos[i] = {rng.normal(0.0, 0.5), rng.normal(0.0, 0.5)};
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    s.vel[i] = {0.5 * std::cos(angle), 0.5 * std::sin(angle)};
  }
  return s;
}

double draw_coupling(const SimConfig& cfg, Rng& rng) {
  return cfg.coupling_set[rng.uniform_index(cfg.coupling_set.size())];
}

}  // namespace

ParticleSystem sample_system(const SimConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t m = static_cast<std::size_t>(cfg.n_agents);
  ParticleSystem sys;
  sys.adjacency = Tensor::zeros({m, m});
  if (cfg.system == SystemKind::kSprings) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        if (rng.bernoulli(cfg.edge_prob)) {
          const double k = draw_coupling(cfg, rng);
          sys.adjacency.at(i, j) = k;
          sys.adjacency.at(j, i) = k;
        }
      }
    }
  } else {
    sys.charges.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      sys.charges[i] = rng.bernoulli(0.5) ? cfg.charge_magnitude : -cfg.charge_magnitude;
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < m; ++j) sys.adjacency.at(i, j) = i == j ? 0.0 : 1.0;
    }
  }
  sys.initial = sample_initial(cfg, rng);
  return sys;
}

ParticleSystem sample_system(const SimConfig& cfg, const Tensor& topology, Rng& rng) {
  cfg.validate();
  const std::size_t m = static_cast<std::size_t>(cfg.n_agents);
  if (topology.rank() != 2 || topology.rows() != m || topology.cols() != m) {
    throw InvalidArgument("topology must be " + std::to_string(m) + "x" + std::to_string(m));
  }
  ParticleSystem sys;
  sys.adjacency = Tensor::zeros({m, m});
  if (cfg.system == SystemKind::kCharged) {
    sys.charges.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      sys.charges[i] = rng.bernoulli(0.5) ? cfg.charge_magnitude : -cfg.charge_magnitude;
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      if (topology.at(i, j) != 0.0 || topology.at(j, i) != 0.0) {
        const double w = cfg.system == SystemKind::kSprings ? draw_coupling(cfg, rng) : 1.0;
        sys.adjacency.at(i, j) = w;
        sys.adjacency.at(j, i) = w;
      }
    }
  }
  sys.initial = sample_initial(cfg, rng);
  return sys;
}

Vec2 pair_force(const SimConfig& cfg, const ParticleSystem& sys, const ParticleState& s, int i,
                int j) {
  if (i == j) return {0.0, 0.0};
  const double dx = s.pos[i][0] - s.pos[j][0];
  const double dy = s.pos[i][1] - s.pos[j][1];
  const double w = sys.adjacency.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  if (cfg.system == SystemKind::kSprings) {
    return {-w * dx, -w * dy};
  }
  if (w == 0.0) return {0.0, 0.0};
  const double r2 = dx * dx + dy * dy + cfg.softening * cfg.softening;
  const double inv = cfg.coulomb_constant * sys.charges[i] * sys.charges[j] / (r2 * std::sqrt(r2));
  return {inv * dx, inv * dy};
}

std::vector<Vec2> total_forces(const SimConfig& cfg, const ParticleSystem& sys,
                               const ParticleState& s) {
  const int m = static_cast<int>(s.pos.size());
  std::vector<Vec2> f(m, Vec2{0.0, 0.0});
  for (int i = 0; i < m; ++i) {
    for (int j = i + 1; j < m; ++j) {
      const Vec2 fij = pair_force(cfg, sys, s, i, j);
      f[i][0] += fij[0];
      f[i][1] += fij[1];
      f[j][0] -= fij[0];
      f[j][1] -= fij[1];
    }
  }
  return f;
}

int leapfrog_step(const SimConfig& cfg, const ParticleSystem& sys, ParticleState& s,
                  std::vector<Vec2>& forces) {
  const double h = cfg.dt;
  const double box = cfg.box_half_width;
  const std::size_t m = s.pos.size();
  int reflections = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (int c = 0; c < 2; ++c) {
      s.vel[i][c] += 0.5 * h * forces[i][c];
      s.pos[i][c] += h * s.vel[i][c];
      // Mirror back into the box; the loop handles multi-width overshoot.
      // Non-finite positions are left for the caller's divergence check.
      while (std::isfinite(s.pos[i][c]) && (s.pos[i][c] > box || s.pos[i][c] < -box)) {
        s.pos[i][c] = s.pos[i][c] > box ? 2.0 * box - s.pos[i][c] : -2.0 * box - s.pos[i][c];
        s.vel[i][c] = -s.vel[i][c];
        ++reflections;
      }
    }
  }
  forces = total_forces(cfg, sys, s);
  for (std::size_t i = 0; i < m; ++i) {
    for (int c = 0; c < 2; ++c) s.vel[i][c] += 0.5 * h * forces[i][c];
  }
  return reflections;
}

TrajectorySet simulate(const ParticleSystem& sys, const SimConfig& cfg) {
  cfg.validate();
  const std::size_t m = sys.initial.pos.size();
  if (m != static_cast<std::size_t>(cfg.n_agents) || sys.adjacency.rows() != m) {
    throw InvalidArgument("particle system does not match n_agents");
  }
  if (cfg.system == SystemKind::kCharged && sys.charges.size() != m) {
    throw InvalidArgument("charged system requires one charge per particle");
  }
  const std::size_t t_out = static_cast<std::size_t>(cfg.timesteps());
  TrajectorySet traj;
  traj.positions = Tensor::zeros({m, t_out, 2});
  traj.velocities = Tensor::zeros({m, t_out, 2});
  traj.adjacency = sys.adjacency;
  traj.charges = sys.charges;
  traj.config = cfg;

  ParticleState s = sys.initial;
  std::vector<Vec2> forces = total_forces(cfg, sys, s);
  std::size_t rec = 0;
  for (long step = 0; step < cfg.raw_steps; ++step) {
    if (step % cfg.subsample == 0) {
      for (std::size_t i = 0; i < m; ++i) {
        for (int c = 0; c < 2; ++c) {
          traj.positions[(i * t_out + rec) * 2 + c] = s.pos[i][c];
          traj.velocities[(i * t_out + rec) * 2 + c] = s.vel[i][c];
        }
      }
      ++rec;
    }
    leapfrog_step(cfg, sys, s, forces);
    for (std::size_t i = 0; i < m; ++i) {
      if (!std::isfinite(s.pos[i][0]) || !std::isfinite(s.pos[i][1]) ||
          !std::isfinite(s.vel[i][0]) || !std::isfinite(s.vel[i][1])) {
        throw SimulationDiverged(step + 1);
      }
    }
  }
  return traj;
}

double total_spring_energy(const ParticleState& s, const Tensor& adjacency) {
  const std::size_t m = s.pos.size();
  double e = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    e += 0.5 * (s.vel[i][0] * s.vel[i][0] + s.vel[i][1] * s.vel[i][1]);
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double dx = s.pos[i][0] - s.pos[j][0];
      const double dy = s.pos[i][1] - s.pos[j][1];
      e += 0.5 * adjacency.at(i, j) * (dx * dx + dy * dy);
    }
  }
  return e;
}

}  // namespace stemfold
