#pragma once

// Spatiotemporal graph with temporal anchors: one node per observed
// (agent, time) pair of the encoder window.
//
//  * anchor a = t - t0, where t0 is the agent's first observed time in the window
//  * temporal edge u -> v (t_u != t_v, same or adjacent agents) when
//    |a_u - a_v| <= max_gap, weighted r_uv = a_u - a_v
//  * spatial edge u -> v (t_u == t_v, adjacent agents) weighted by the
//    visible adjacency entry

#include <array>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stemfold/dataset.hpp"

namespace stemfold {

enum class EdgeKind { kSpatial, kTemporal };

struct STNode {
  int agent = 0;
  double obs_time = 0.0;
  double anchor = 0.0;
  std::array<double, 4> feature{};
};

struct STEdge {
  int src = 0;
  int dst = 0;
  EdgeKind kind = EdgeKind::kTemporal;
  double weight = 0.0;
};

struct STGraph {
  std::vector<STNode> nodes;
  std::vector<STEdge> edges;
  double max_gap = 5.0;
  int n_agents = 0;

  // Debug export: one line per node and per edge.
  std::string to_text() const;
};

inline constexpr double kUnboundedGap = std::numeric_limits<double>::infinity();

double time_anchor(double t_i, double t_0i);
// r = a_i - a_j when |a_i - a_j| <= max_gap (inclusive), otherwise nothing.
std::optional<double> temporal_edge(double a_i, double a_j, double max_gap);

struct GraphOptions {
  double max_gap = 5.0;
  // Treat every pair of visible agents as adjacent.
  bool fully_connected = false;
};

// Builds the graph over time indices [t_begin, t_end) of `sample`. Throws
// AgentUnobservable if an agent has no observation inside the window.
STGraph build_temporal_graph(const ObservedSample& sample, int t_begin, int t_end,
                             const GraphOptions& opt = {});

}  // namespace stemfold
