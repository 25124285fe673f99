#pragma once

// Ground-truth generators for interacting particle systems in a 2D box:
// Hooke springs on a random graph and softened Coulomb charges on the
// complete graph, both advanced with kick-drift-kick leapfrog.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stemfold/rng.hpp"
#include "stemfold/tensor.hpp"

namespace stemfold {

enum class SystemKind { kSprings, kCharged };

std::string to_string(SystemKind kind);
SystemKind parse_system_kind(const std::string& name);

struct SimConfig {
  SystemKind system = SystemKind::kSprings;
  int n_agents = 10;
  double edge_prob = 0.5;
  std::vector<double> coupling_set{1.0};
  double charge_magnitude = 1.0;
  double coulomb_constant = 1.0;
  double softening = 0.1;
  double dt = 0.001;
  int subsample = 100;
  long raw_steps = 6000;
  double box_half_width = 5.0;
  std::uint64_t seed = 1991;

  void validate() const;
  int timesteps() const { return static_cast<int>(raw_steps / subsample); }
};

using Vec2 = std::array<double, 2>;

struct ParticleState {
  std::vector<Vec2> pos;
  std::vector<Vec2> vel;
};

// Output of sample_system: interaction weights plus initial conditions.
// For springs `adjacency[i][j]` is the spring constant (0 = no spring); for
// charged systems it is 1 for every interacting pair and `charges` is set.
struct ParticleSystem {
  Tensor adjacency;  // M x M
  std::vector<double> charges;
  ParticleState initial;
};

struct TrajectorySet {
  Tensor positions;   // M x T x 2
  Tensor velocities;  // M x T x 2
  Tensor adjacency;   // M x M
  std::vector<double> charges;
  SimConfig config;

  int n_agents() const { return static_cast<int>(positions.dim(0)); }
  int timesteps() const { return static_cast<int>(positions.dim(1)); }
};

ParticleSystem sample_system(const SimConfig& cfg, Rng& rng);
// Same draw, but springs are restricted to the nonzero entries of `topology`.
ParticleSystem sample_system(const SimConfig& cfg, const Tensor& topology, Rng& rng);

// Force exerted on particle i by particle j.
Vec2 pair_force(const SimConfig& cfg, const ParticleSystem& sys, const ParticleState& s, int i,
                int j);
std::vector<Vec2> total_forces(const SimConfig& cfg, const ParticleSystem& sys,
                               const ParticleState& s);

// One kick-drift-kick step. `forces` holds F(r) on entry and is updated to
// F(r') on exit. Returns the number of wall reflections performed.
int leapfrog_step(const SimConfig& cfg, const ParticleSystem& sys, ParticleState& s,
                  std::vector<Vec2>& forces);

// Runs cfg.raw_steps steps, recording every cfg.subsample-th state starting
// with the initial one. Throws SimulationDiverged on a non-finite state.
TrajectorySet simulate(const ParticleSystem& sys, const SimConfig& cfg);

// Kinetic plus spring potential: sum 1/2 |v|^2 + sum_{i<j} 1/2 k_ij |r_i - r_j|^2.
double total_spring_energy(const ParticleState& s, const Tensor& adjacency);

}  // namespace stemfold
