#include "stemfold/stgraph.hpp"

#include <cmath>
#include <sstream>

#include "stemfold/errors.hpp"
#include "stemfold/text_format.hpp"

namespace stemfold {

double time_anchor(double t_i, double t_0i) {
  if (t_i < t_0i) throw InvalidArgument("observation time precedes the agent's first observation");
  return t_i - t_0i;
}

std::optional<double> temporal_edge(double a_i, double a_j, double max_gap) {
  if (!(max_gap >= 0.0)) throw InvalidArgument("max_gap must be >= 0");
  const double r = a_i - a_j;
  if (std::abs(r) <= max_gap) return r;
  return std::nullopt;
}

STGraph build_temporal_graph(const ObservedSample& sample, int t_begin, int t_end,
                             const GraphOptions& opt) {
  if (!(opt.max_gap >= 0.0)) throw InvalidArgument("max_gap must be >= 0");
  if (t_begin < 0 || t_end > sample.timesteps() || t_begin >= t_end) {
    throw InvalidArgument("graph window outside the sample");
  }
  const int n = sample.n_agents();
  STGraph g;
  g.max_gap = opt.max_gap;
  g.n_agents = n;

  std::vector<std::size_t> first(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 0; i < n; ++i) {
    first[static_cast<std::size_t>(i)] = g.nodes.size();
    double t0 = -1.0;
    for (int t = t_begin; t < t_end; ++t) {
      if (!sample.observed(i, t)) continue;
      if (t0 < 0.0) t0 = t;
      g.nodes.push_back(STNode{i, static_cast<double>(t), time_anchor(t, t0), sample.feature(i, t)});
    }
    if (t0 < 0.0) throw AgentUnobservable(i);
  }
  first[static_cast<std::size_t>(n)] = g.nodes.size();

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double w = sample.adjacency.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      const bool linked = i == j || opt.fully_connected || w > 0.0;
      if (!linked) continue;
      for (std::size_t u = first[i]; u < first[i + 1]; ++u) {
        for (std::size_t v = first[j]; v < first[j + 1]; ++v) {
          if (u == v) continue;
          const STNode& a = g.nodes[u];
          const STNode& b = g.nodes[v];
          if (a.obs_time == b.obs_time) {
            g.edges.push_back(STEdge{static_cast<int>(u), static_cast<int>(v), EdgeKind::kSpatial,
                                     opt.fully_connected ? 1.0 : w});
          } else if (auto r = temporal_edge(a.anchor, b.anchor, opt.max_gap)) {
            g.edges.push_back(
                STEdge{static_cast<int>(u), static_cast<int>(v), EdgeKind::kTemporal, *r});
          }
        }
      }
    }
  }
  return g;
}

std::string STGraph::to_text() const {
  std::ostringstream os;
  os << "graph nodes=" << nodes.size() << " edges=" << edges.size()
     << " max_gap=" << format_double(max_gap) << "\n";
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto& nd = nodes[k];
    os << "node " << k << " agent=" << nd.agent << " time=" << format_double(nd.obs_time)
       << " anchor=" << format_double(nd.anchor) << "\n";
  }
  for (const auto& e : edges) {
    os << "edge " << e.src << " " << e.dst << " "
       << (e.kind == EdgeKind::kSpatial ? "spatial" : "temporal")
       << " weight=" << format_double(e.weight) << "\n";
  }
  return os.str();
}

}  // namespace stemfold
