#include "stemfold/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "stemfold/errors.hpp"
#include "stemfold/ode.hpp"
#include "stemfold/tensor_io.hpp"

namespace stemfold {

// ---------------------------------------------------------------------------
// Configuration and parameters

void ModelConfig::validate() const {
  if (d_feature < 1 || d_g < 2 || d_ctx < 1 || d_latent < 1 || d_ode < 1 || d_decoder < 1) {
    throw InvalidArgument("model dimensions must be positive");
  }
  if (d_g % 2 != 0) throw InvalidArgument("d_g must be even for the positional encoding");
  if (n_layers < 0) throw InvalidArgument("n_layers must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("dropout must lie in [0, 1)");
  if (!(max_gap >= 0.0)) throw InvalidArgument("max_gap must be >= 0");
  if (ode_substeps < 1) throw InvalidArgument("ode_substeps must be >= 1");
  if (!(obs_std > 0.0)) throw InvalidArgument("obs_std must be positive");
}

void ModelConfig::write(KeyValueFile& kv) const {
  kv.set("model.d_feature", d_feature);
  kv.set("model.d_g", d_g);
  kv.set("model.n_layers", n_layers);
  kv.set("model.d_ctx", d_ctx);
  kv.set("model.d_latent", d_latent);
  kv.set("model.d_ode", d_ode);
  kv.set("model.d_decoder", d_decoder);
  kv.set("model.dropout", dropout);
  kv.set("model.max_gap", max_gap);
  kv.set("model.ode_substeps", ode_substeps);
  kv.set("model.obs_std", obs_std);
  kv.set("model.fully_connected", fully_connected);
  kv.set("model.no_attention", no_attention);
  kv.set("model.no_temporal_encoding", no_temporal_encoding);
  kv.set("model.variant", variant());
}

ModelConfig ModelConfig::read(const KeyValueFile& kv) {
  ModelConfig c;
  c.d_feature = static_cast<int>(kv.get_int_or("model.d_feature", c.d_feature));
  c.d_g = static_cast<int>(kv.get_int_or("model.d_g", c.d_g));
  c.n_layers = static_cast<int>(kv.get_int_or("model.n_layers", c.n_layers));
  c.d_ctx = static_cast<int>(kv.get_int_or("model.d_ctx", c.d_ctx));
  c.d_latent = static_cast<int>(kv.get_int_or("model.d_latent", c.d_latent));
  c.d_ode = static_cast<int>(kv.get_int_or("model.d_ode", c.d_ode));
  c.d_decoder = static_cast<int>(kv.get_int_or("model.d_decoder", c.d_decoder));
  c.dropout = kv.get_double_or("model.dropout", c.dropout);
  c.max_gap = kv.get_double_or("model.max_gap", c.max_gap);
  c.ode_substeps = static_cast<int>(kv.get_int_or("model.ode_substeps", c.ode_substeps));
  c.obs_std = kv.get_double_or("model.obs_std", c.obs_std);
  c.fully_connected = kv.get_bool_or("model.fully_connected", false);
  c.no_attention = kv.get_bool_or("model.no_attention", false);
  c.no_temporal_encoding = kv.get_bool_or("model.no_temporal_encoding", false);
  c.validate();
  return c;
}

std::string ModelConfig::variant() const {
  std::string v;
  auto add = [&](const char* s) { v += v.empty() ? s : std::string("+") + s; };
  if (fully_connected) add("fully_connected");
  if (no_attention) add("no_attention");
  if (no_temporal_encoding) add("no_temporal_encoding");
  return v.empty() ? "original" : v;
}

std::size_t ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw InvalidArgument("duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return names_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  throw InvalidArgument("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::string ParamSet::group_of(const std::string& name) {
  return name.substr(0, name.find('.'));
}

namespace {

std::string layer_name(int layer, const char* what) {
  return "layer" + std::to_string(layer) + "." + what;
}

struct Shape2 {
  std::string name;
  std::size_t rows, cols;
  bool bias;
};

std::vector<Shape2> param_layout(const ModelConfig& c) {
  const auto dg = static_cast<std::size_t>(c.d_g), dctx = static_cast<std::size_t>(c.d_ctx),
             dl = static_cast<std::size_t>(c.d_latent), dode = static_cast<std::size_t>(c.d_ode),
             ddec = static_cast<std::size_t>(c.d_decoder),
             df = static_cast<std::size_t>(c.d_feature);
  std::vector<Shape2> s;
  s.push_back({"init.w", df + 1, dg, false});
  s.push_back({"init.b", 1, dg, true});
  for (int l = 0; l < c.n_layers; ++l) {
    s.push_back({layer_name(l, "wt"), dg + 1, dg, false});
    s.push_back({layer_name(l, "bt"), 1, dg, true});
    s.push_back({layer_name(l, "wv"), dg, dg, false});
    s.push_back({layer_name(l, "wk"), dg, dg, false});
    s.push_back({layer_name(l, "wq"), dg, dg, false});
  }
  s.push_back({"seq.wq", dg, dctx, false});
  s.push_back({"seq.wk", dg, dctx, false});
  s.push_back({"seq.wv", dg, dctx, false});
  s.push_back({"post.mu_w", dctx, dl, false});
  s.push_back({"post.mu_b", 1, dl, true});
  s.push_back({"post.sigma_w", dctx, dl, false});
  s.push_back({"post.sigma_b", 1, dl, true});
  s.push_back({"ode.r1_w", 2 * dl, dode, false});
  s.push_back({"ode.r1_b", 1, dode, true});
  s.push_back({"ode.r2_w", dode, dode, false});
  s.push_back({"ode.r2_b", 1, dode, true});
  s.push_back({"ode.o1_w", dode, dode, false});
  s.push_back({"ode.o1_b", 1, dode, true});
  s.push_back({"ode.o2_w", dode, dl, false});
  s.push_back({"ode.o2_b", 1, dl, true});
  s.push_back({"dec.w1", dl, ddec, false});
  s.push_back({"dec.b1", 1, ddec, true});
  s.push_back({"dec.w2", ddec, df, false});
  s.push_back({"dec.b2", 1, df, true});
  return s;
}

}  // namespace

ParamSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet ps;
  for (const auto& s : param_layout(cfg)) {
    Tensor t = Tensor::zeros({s.rows, s.cols});
    if (!s.bias) {
      const double limit = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
      for (double& v : t.data()) v = rng.uniform(-limit, limit);
    }
    ps.add(s.name, std::move(t));
  }
  return ps;
}

void check_param_layout(const ParamSet& params, const ModelConfig& cfg) {
  const auto layout = param_layout(cfg);
  if (layout.size() != params.size()) {
    throw FingerprintError("parameter count " + std::to_string(params.size()) +
                           " does not match architecture (" + std::to_string(layout.size()) + ")");
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& s = layout[i];
    if (params.names()[i] != s.name ||
        params[i].shape() != std::vector<std::size_t>{s.rows, s.cols}) {
      throw FingerprintError("parameter " + params.names()[i] + " " + params[i].shape_string() +
                             " does not match architecture entry " + s.name);
    }
  }
}

BoundParams::BoundParams(ad::Tape& tape, const ParamSet& params, bool trainable)
    : tape_(&tape), params_(&params) {
  vars_.reserve(params.size());
  for (const Tensor& t : params.values()) {
    vars_.push_back(trainable ? tape.parameter(t) : tape.constant(t));
  }
}

BoundParams::BoundParams(ad::Tape& tape, const ParamSet& params, std::vector<ad::Var> vars)
    : tape_(&tape), params_(&params), vars_(std::move(vars)) {
  if (vars_.size() != params.size()) throw InvalidArgument("one Var per parameter required");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i].value().same_shape(params[i])) {
      throw InvalidArgument("Var shape does not match parameter " + params.names()[i]);
    }
  }
}

const ad::Var& BoundParams::operator()(const std::string& name) const {
  return vars_[params_->index(name)];
}

std::vector<double> positional_encoding(double dt, int d) {
  if (d <= 0 || d % 2 != 0) throw InvalidArgument("positional encoding dimension must be even");
  std::vector<double> q(static_cast<std::size_t>(d));
  for (int k = 0; k < d / 2; ++k) {
    const double freq = std::pow(10000.0, 2.0 * k / d);
    q[2 * static_cast<std::size_t>(k)] = std::sin(dt / freq);
    q[2 * static_cast<std::size_t>(k) + 1] = std::cos(dt / freq);
  }
  return q;
}

// ---------------------------------------------------------------------------
// Batch assembly

namespace {

void set_row(Tensor& t, std::size_t r, const std::vector<double>& v) {
  std::copy(v.begin(), v.end(), t.data().begin() + r * t.cols());
}

// Memoized encodings; time gaps take few distinct values.
class PeCache {
 public:
  explicit PeCache(int d) : d_(d) {}
  std::uint32_t row(double dt) {
    auto [it, inserted] = rows_.try_emplace(dt, static_cast<std::uint32_t>(values_.size()));
    if (inserted) values_.push_back(positional_encoding(dt, d_));
    return it->second;
  }
  const std::vector<double>& values(std::uint32_t r) const { return values_[r]; }
  Tensor table() const {
    Tensor t = Tensor::uninitialized({std::max<std::size_t>(1, values_.size()), static_cast<std::size_t>(d_)});
    if (values_.empty()) t.fill(0.0);
    for (std::size_t r = 0; r < values_.size(); ++r) set_row(t, r, values_[r]);
    return t;
  }

 private:
  int d_;
  std::map<double, std::uint32_t> rows_;
  std::vector<std::vector<double>> values_;
};

void fill_encoder(ModelBatch& b, std::span<const STGraph* const> graphs, const ModelConfig& cfg) {
  const std::size_t df = static_cast<std::size_t>(cfg.d_feature);
  const std::size_t dg = static_cast<std::size_t>(cfg.d_g);
  std::size_t n_nodes = 0, n_edges = 0, n_agents = 0;
  for (const STGraph* g : graphs) {
    n_nodes += g->nodes.size();
    n_edges += g->edges.size();
    n_agents += static_cast<std::size_t>(g->n_agents);
  }
  if (n_nodes == 0) throw InvalidArgument("batch has no graph nodes");
  b.n_nodes = n_nodes;
  b.n_agents = n_agents;
  b.n_samples = graphs.size();
  b.node_input = Tensor::zeros({n_nodes, df + 1});
  b.node_pe = Tensor::zeros({n_nodes, dg});
  b.node_agent.resize(n_nodes);
  b.node_time.resize(n_nodes);
  b.edge_src.clear();
  b.edge_dst.clear();
  b.edge_src.reserve(n_edges);
  b.edge_dst.reserve(n_edges);
  std::vector<double> edge_dt;
  edge_dt.reserve(n_edges);
  b.sample_agent_offset.assign(1, 0);

  const bool temporal = !cfg.no_temporal_encoding;
  PeCache pe(cfg.d_g);
  std::size_t node_off = 0, agent_off = 0;
  for (const STGraph* g : graphs) {
    std::vector<std::vector<std::uint32_t>> per_agent(static_cast<std::size_t>(g->n_agents));
    for (std::size_t k = 0; k < g->nodes.size(); ++k) {
      const STNode& nd = g->nodes[k];
      const std::size_t row = node_off + k;
      for (std::size_t c = 0; c < df && c < 4; ++c) b.node_input.at(row, c) = nd.feature[c];
      b.node_input.at(row, df) = temporal ? nd.anchor : 0.0;
      if (temporal) set_row(b.node_pe, row, pe.values(pe.row(nd.anchor)));
      if (nd.agent < 0 || nd.agent >= g->n_agents) throw InvalidArgument("node agent out of range");
      b.node_agent[row] = static_cast<std::uint32_t>(agent_off + static_cast<std::size_t>(nd.agent));
      b.node_time[row] = static_cast<std::uint32_t>(nd.obs_time);
      per_agent[static_cast<std::size_t>(nd.agent)].push_back(static_cast<std::uint32_t>(row));
    }
    for (std::size_t a = 0; a < per_agent.size(); ++a) {
      if (per_agent[a].empty()) throw AgentUnobservable(static_cast<int>(a));
      b.agent_nodes.push_back(std::move(per_agent[a]));
    }
    for (const STEdge& e : g->edges) {
      b.edge_src.push_back(static_cast<std::uint32_t>(node_off + static_cast<std::size_t>(e.src)));
      b.edge_dst.push_back(static_cast<std::uint32_t>(node_off + static_cast<std::size_t>(e.dst)));
      edge_dt.push_back(temporal ? g->nodes[static_cast<std::size_t>(e.src)].anchor -
                                       g->nodes[static_cast<std::size_t>(e.dst)].anchor
                                 : 0.0);
    }
    node_off += g->nodes.size();
    agent_off += static_cast<std::size_t>(g->n_agents);
    b.sample_agent_offset.push_back(agent_off);
  }

  const std::size_t E = b.edge_src.size();
  if (E > 0) {
    b.edge_dt = Tensor({E, 1}, edge_dt);
    // Without temporal encoding every edge maps to the zero row.
    PeCache edge_pe(cfg.d_g);
    b.edge_pe_row.assign(E, 0);
    if (temporal) {
      for (std::size_t e = 0; e < E; ++e) b.edge_pe_row[e] = edge_pe.row(edge_dt[e]);
    }
    b.pe_table = edge_pe.table();
    std::vector<double> indeg(n_nodes, 0.0);
    for (std::uint32_t d : b.edge_dst) indeg[d] += 1.0;
    b.edge_uniform = Tensor::zeros({E, 1});
    for (std::size_t e = 0; e < E; ++e) b.edge_uniform[e] = 1.0 / indeg[b.edge_dst[e]];
  }
}

void fill_ode_edges(ModelBatch& b, std::span<const Tensor* const> adjacency,
                    const ModelConfig& cfg) {
  b.ode_recv.clear();
  b.ode_send.clear();
  b.agent_degree = Tensor::zeros({b.n_agents, 1});
  std::size_t off = 0;
  for (const Tensor* adj : adjacency) {
    const std::size_t n = adj->rows();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        if (cfg.fully_connected || adj->at(i, j) > 0.0) {
          b.ode_recv.push_back(static_cast<std::uint32_t>(off + i));
          b.ode_send.push_back(static_cast<std::uint32_t>(off + j));
          b.agent_degree[off + i] += 1.0;
        }
      }
    }
    off += n;
  }
  if (off != b.n_agents) throw InvalidArgument("adjacency sizes do not match agent count");
}

}  // namespace

ModelBatch make_batch(std::span<const STGraph* const> graphs,
                      std::span<const ObservedSample* const> samples, const ModelConfig& cfg,
                      int t_h, int t_f) {
  if (graphs.size() != samples.size()) throw InvalidArgument("graphs and samples differ in count");
  ModelBatch b;
  fill_encoder(b, graphs, cfg);
  std::vector<const Tensor*> adj;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s]->n_agents() != graphs[s]->n_agents) {
      throw InvalidArgument("graph and sample disagree on agent count");
    }
    adj.push_back(&samples[s]->adjacency);
  }
  fill_ode_edges(b, adj, cfg);

  b.t_f = t_f;
  if (t_f > 0) {
    const std::size_t df = static_cast<std::size_t>(cfg.d_feature);
    const std::size_t na = b.n_agents;
    b.target = Tensor::zeros({static_cast<std::size_t>(t_f) * na, df});
    b.target_mask = Tensor::zeros({static_cast<std::size_t>(t_f) * na, 1});
    for (std::size_t s = 0; s < samples.size(); ++s) {
      const ObservedSample& smp = *samples[s];
      if (t_h + t_f > smp.timesteps()) throw InvalidArgument("sample shorter than t_h + t_f");
      for (int t = 0; t < t_f; ++t) {
        for (int i = 0; i < smp.n_agents(); ++i) {
          const std::size_t row =
              static_cast<std::size_t>(t) * na + b.sample_agent_offset[s] + static_cast<std::size_t>(i);
          const auto f = smp.feature(i, t_h + t);
          for (std::size_t c = 0; c < df && c < 4; ++c) b.target.at(row, c) = f[c];
          b.target_mask[row] = smp.observed(i, t_h + t) ? 1.0 : 0.0;
        }
      }
    }
  }
  return b;
}

ModelBatch make_batch(const STGraph& graph, const ObservedSample& sample, const ModelConfig& cfg,
                      int t_h, int t_f) {
  const STGraph* g[] = {&graph};
  const ObservedSample* s[] = {&sample};
  return make_batch(g, s, cfg, t_h, t_f);
}

// ---------------------------------------------------------------------------
// Forward pass

ad::Var initial_representation(const BoundParams& p, const ModelBatch& batch,
                               const ModelConfig& cfg) {
  ad::Tape& tape = p.tape();
  (void)cfg;
  const ad::Var x = tape.constant(batch.node_input);
  const ad::Var pre = ad::add_row(ad::matmul(x, p("init.w")), p("init.b"));
  return ad::add(ad::relu(pre), tape.constant(batch.node_pe));
}

ad::Var edge_messages_hidden(const BoundParams& p, int layer, const ad::Var& h,
                             const ModelBatch& batch, const ModelConfig& cfg) {
  ad::Tape& tape = p.tape();
  const std::size_t dg = static_cast<std::size_t>(cfg.d_g);
  const ad::Var& wt = p(layer_name(layer, "wt"));
  const ad::Var proj = ad::matmul(h, ad::slice_rows(wt, 0, dg));
  ad::Var pre = ad::gather_rows(proj, batch.edge_src);
  pre = ad::add(pre, ad::matmul(tape.constant(batch.edge_dt), ad::slice_rows(wt, dg, 1)));
  pre = ad::add_row(pre, p(layer_name(layer, "bt")));
  return ad::add(ad::relu(pre), ad::gather_rows(tape.constant(batch.pe_table), batch.edge_pe_row));
}

ad::Var edge_attention(const BoundParams& p, int layer, const ad::Var& h, const ad::Var& hhat,
                       const ModelBatch& batch, const ModelConfig& cfg) {
  if (cfg.no_attention) return p.tape().constant(batch.edge_uniform);
  // (W_k hhat)^T (W_q h) = hhat . (h W_q W_k^T) in row-vector form.
  const ad::Var u =
      ad::matmul(ad::matmul(h, p(layer_name(layer, "wq"))), ad::transpose(p(layer_name(layer, "wk"))));
  const ad::Var scores =
      ad::scale(ad::row_dot(hhat, ad::gather_rows(u, batch.edge_dst)), 1.0 / std::sqrt(cfg.d_g));
  return ad::segment_softmax(scores, batch.edge_dst, batch.n_nodes);
}

OdeWeights ode_weights(const BoundParams& p, const ModelConfig& cfg) {
  const std::size_t dl = static_cast<std::size_t>(cfg.d_latent);
  const ad::Var& r1 = p("ode.r1_w");
  OdeWeights w;
  w.recv = ad::slice_rows(r1, 0, dl);
  w.send = ad::slice_rows(r1, dl, dl);
  w.r1_b = p("ode.r1_b");
  w.mid = ad::matmul(p("ode.r2_w"), p("ode.o1_w"));
  w.mid_deg = ad::matmul(p("ode.r2_b"), p("ode.o1_w"));
  w.o1_b = p("ode.o1_b");
  w.o2_w = p("ode.o2_w");
  w.o2_b = p("ode.o2_b");
  return w;
}

ad::Var ode_derivative(const OdeWeights& w, const ad::Var& z, const ModelBatch& batch,
                       const ModelConfig& cfg, const Tensor* drop_sum, const Tensor* drop_hidden) {
  ad::Tape& tape = z.tape();
  ad::Var summed;
  if (batch.ode_recv.empty()) {
    summed = tape.constant(Tensor::zeros({z.rows(), static_cast<std::size_t>(cfg.d_ode)}));
  } else {
    // f_R first layer on [z_i || z_j] = z_i W_recv + z_j W_send + b.
    const ad::Var a = ad::add_row(ad::matmul(z, w.recv), w.r1_b);
    const ad::Var b = ad::matmul(z, w.send);
    const ad::Var hidden = ad::relu(
        ad::add(ad::gather_rows(a, batch.ode_recv), ad::gather_rows(b, batch.ode_send)));
    summed = ad::segment_sum(hidden, batch.ode_recv, batch.n_agents);
  }
  if (drop_sum != nullptr) summed = ad::mul(summed, tape.constant(*drop_sum));
  // Sum over neighbors of f_R's affine output, fed straight into f_O's first layer.
  const ad::Var pre = ad::add(ad::matmul(summed, w.mid),
                              ad::matmul(tape.constant(batch.agent_degree), w.mid_deg));
  ad::Var hid = ad::relu(ad::add_row(pre, w.o1_b));
  if (drop_hidden != nullptr) hid = ad::mul(hid, tape.constant(*drop_hidden));
  return ad::add_row(ad::matmul(hid, w.o2_w), w.o2_b);
}

ad::Var ode_derivative(const BoundParams& p, const ad::Var& z, const ModelBatch& batch,
                       const ModelConfig& cfg, const Tensor* drop_sum, const Tensor* drop_hidden) {
  return ode_derivative(ode_weights(p, cfg), z, batch, cfg, drop_sum, drop_hidden);
}

ad::Var decode(const BoundParams& p, const ad::Var& z) {
  const ad::Var hid = ad::relu(ad::add_row(ad::matmul(z, p("dec.w1")), p("dec.b1")));
  return ad::add_row(ad::matmul(hid, p("dec.w2")), p("dec.b2"));
}

namespace {

Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  Tensor m({rows, cols});
  const double keep = 1.0 - rate;
  for (double& v : m.data()) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return m;
}

struct EncoderOutput {
  ad::Var mu, sigma, pool;
};

EncoderOutput encode(const BoundParams& p, const ModelBatch& batch, const ModelConfig& cfg,
                     const ForwardOptions& opt) {
  ad::Tape& tape = p.tape();
  const bool drop = opt.training && cfg.dropout > 0.0;
  if (drop && opt.rng == nullptr) throw InvalidArgument("dropout requires an rng");
  ad::Var h = initial_representation(p, batch, cfg);
  if (!batch.edge_src.empty()) {
    const std::size_t dg = static_cast<std::size_t>(cfg.d_g);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const ad::Var& wt = p(layer_name(l, "wt"));
      const ad::Var hhat =
          ad::edge_message(ad::matmul(h, ad::slice_rows(wt, 0, dg)), batch.edge_src, batch.edge_dt,
                           ad::slice_rows(wt, dg, 1), p(layer_name(l, "bt")), batch.pe_table,
                           batch.edge_pe_row);
      ad::Var pooled;
      if (cfg.no_attention) {
        pooled = ad::weighted_aggregate(hhat, batch.edge_uniform, batch.edge_dst, batch.n_nodes);
      } else {
        const ad::Var u = ad::matmul(ad::matmul(h, p(layer_name(l, "wq"))),
                                     ad::transpose(p(layer_name(l, "wk"))));
        pooled = ad::attention_aggregate(hhat, u, batch.edge_dst, batch.n_nodes,
                                         1.0 / std::sqrt(cfg.d_g));
      }
      ad::Var msg = ad::matmul(pooled, p(layer_name(l, "wv")));
      if (drop) {
        msg = ad::mul(msg, tape.constant(dropout_mask(msg.rows(), msg.cols(), cfg.dropout, *opt.rng)));
      }
      h = ad::add(h, msg);
    }
  }
  // Sequence self-attention within each agent, mean-pooled over query positions.
  const ad::Var q = ad::matmul(h, p("seq.wq"));
  const ad::Var k = ad::matmul(h, p("seq.wk"));
  const ad::Var v = ad::matmul(h, p("seq.wv"));
  const ad::Var pool = ad::group_attention_pool(q, k, batch.agent_nodes, 1.0 / std::sqrt(cfg.d_ctx));
  const ad::Var ctx = ad::segment_sum(ad::mul_col(v, pool), batch.node_agent, batch.n_agents);

  EncoderOutput out;
  out.mu = ad::add_row(ad::matmul(ctx, p("post.mu_w")), p("post.mu_b"));
  out.sigma = ad::add_scalar(
      ad::softplus(ad::add_row(ad::matmul(ctx, p("post.sigma_w")), p("post.sigma_b"))), 1e-6);
  out.pool = pool;
  return out;
}

}  // namespace

ForwardResult run_model(const BoundParams& p, const ModelBatch& batch, const ModelConfig& cfg,
                        const ForwardOptions& opt) {
  cfg.validate();
  ad::Tape& tape = p.tape();
  const EncoderOutput enc = encode(p, batch, cfg, opt);
  ForwardResult r;
  r.mu = enc.mu;
  r.sigma = enc.sigma;
  r.pool_weights = enc.pool;
  if (opt.mean_latent) {
    r.z0 = enc.mu;
  } else {
    if (opt.rng == nullptr) throw InvalidArgument("latent sampling requires an rng");
    Tensor eps({batch.n_agents, static_cast<std::size_t>(cfg.d_latent)});
    for (double& e : eps.data()) e = opt.rng->normal();
    r.z0 = ad::add(enc.mu, ad::mul(enc.sigma, tape.constant(std::move(eps))));
  }
  if (batch.t_f <= 0) return r;

  std::optional<Tensor> drop_sum, drop_hidden;
  if (opt.training && cfg.dropout > 0.0) {
    if (opt.rng == nullptr) throw InvalidArgument("dropout requires an rng");
    // One mask per solve keeps the vector field fixed along the trajectory.
    drop_sum = dropout_mask(batch.n_agents, static_cast<std::size_t>(cfg.d_ode), cfg.dropout, *opt.rng);
    drop_hidden = dropout_mask(batch.n_agents, static_cast<std::size_t>(cfg.d_ode), cfg.dropout, *opt.rng);
  }
  std::vector<double> grid(static_cast<std::size_t>(batch.t_f) + 1);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<double>(i) * opt.obs_dt;
  const OdeWeights w = ode_weights(p, cfg);
  const OdeFunction f = [&](const ad::Var& z) {
    return ode_derivative(w, z, batch, cfg, drop_sum ? &*drop_sum : nullptr,
                          drop_hidden ? &*drop_hidden : nullptr);
  };
  const std::vector<ad::Var> states = rk4_integrate(f, r.z0, grid, cfg.ode_substeps);
  const std::vector<ad::Var> future(states.begin() + 1, states.end());
  r.pred = decode(p, ad::concat_rows(future));
  return r;
}

// ---------------------------------------------------------------------------
// ELBO

double gaussian_kl(double mu, double sigma) {
  return 0.5 * (mu * mu + sigma * sigma - 1.0 - std::log(sigma * sigma));
}

double gaussian_log_likelihood(double x, double mean, double stddev) {
  const double z = (x - mean) / stddev;
  return -0.5 * z * z - std::log(stddev * std::sqrt(2.0 * std::numbers::pi));
}

ad::Var elbo_loss(const ad::Var& pred, const Tensor& target, const Tensor& mask,
                  const ad::Var& mu, const ad::Var& sigma, double obs_std, ElboTerms* terms) {
  if (!(obs_std > 0.0)) throw InvalidArgument("obs_std must be positive");
  ad::Tape& tape = pred.tape();
  const Tensor& pv = pred.value();
  if (target.size() != pv.size()) throw InvalidArgument("prediction and target sizes differ");
  Tensor full_mask({pv.rows(), pv.cols()});
  if (mask.size() == pv.size()) {
    std::copy(mask.data().begin(), mask.data().end(), full_mask.data().begin());
  } else if (mask.size() == pv.rows()) {
    for (std::size_t r = 0; r < pv.rows(); ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) full_mask.at(r, c) = mask[r];
    }
  } else {
    throw InvalidArgument("mask must have one entry per row or per element");
  }
  double n_obs = 0.0;
  for (double m : full_mask.data()) n_obs += m;

  const ad::Var diff = ad::sub(pred, tape.constant(target.reshaped({pv.rows(), pv.cols()})));
  const ad::Var sq = ad::sum(ad::mul(ad::square(diff), tape.constant(std::move(full_mask))));
  const double log_norm = std::log(obs_std * std::sqrt(2.0 * std::numbers::pi));
  const ad::Var recon = ad::add_scalar(ad::scale(sq, -0.5 / (obs_std * obs_std)), -n_obs * log_norm);

  // KL(N(mu, sigma^2) || N(0, 1)) = 1/2 (mu^2 + sigma^2 - 1 - ln sigma^2)
  const ad::Var kl_terms = ad::sub(ad::add(ad::square(mu), ad::square(sigma)),
                                   ad::scale(ad::log(sigma), 2.0));
  const ad::Var kl = ad::add_scalar(ad::scale(ad::sum(kl_terms), 0.5),
                                    -0.5 * static_cast<double>(mu.value().size()));
  if (terms != nullptr) {
    terms->reconstruction = recon.value()[0];
    terms->kl = kl.value()[0];
  }
  return ad::sub(kl, recon);
}

// ---------------------------------------------------------------------------
// Single-item conveniences

namespace {

ModelBatch edge_batch(std::size_t n_nodes, const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges,
                      const std::vector<double>& dts, const ModelConfig& cfg) {
  ModelBatch b;
  b.n_nodes = n_nodes;
  b.n_agents = 1;
  const std::size_t E = edges.size();
  for (const auto& [s, d] : edges) {
    b.edge_src.push_back(s);
    b.edge_dst.push_back(d);
  }
  b.edge_dt = Tensor::zeros({E, 1});
  b.edge_uniform = Tensor::full({E, 1}, 1.0 / static_cast<double>(E));
  b.pe_table = Tensor::zeros({E, static_cast<std::size_t>(cfg.d_g)});
  for (std::size_t e = 0; e < E; ++e) {
    const double dt = cfg.no_temporal_encoding ? 0.0 : dts[e];
    b.edge_dt[e] = dt;
    b.edge_pe_row.push_back(static_cast<std::uint32_t>(e));
    if (!cfg.no_temporal_encoding) set_row(b.pe_table, e, positional_encoding(dt, cfg.d_g));
  }
  return b;
}

void check_layer(int layer, const ModelConfig& cfg) {
  if (layer < 1 || layer > cfg.n_layers) {
    throw InvalidArgument("layer must lie in [1, " + std::to_string(cfg.n_layers) + "]");
  }
}

Tensor as_row(const Tensor& t) { return t.reshaped({1, t.size()}); }

}  // namespace

Tensor init_node_repr(const std::array<double, 4>& o, double dt_start, const ParamSet& params,
                      const ModelConfig& cfg) {
  ModelBatch b;
  b.n_nodes = 1;
  b.node_input = Tensor::zeros({1, static_cast<std::size_t>(cfg.d_feature) + 1});
  for (std::size_t c = 0; c < 4 && c < static_cast<std::size_t>(cfg.d_feature); ++c) {
    b.node_input[c] = o[c];
  }
  const bool temporal = !cfg.no_temporal_encoding;
  b.node_input[static_cast<std::size_t>(cfg.d_feature)] = temporal ? dt_start : 0.0;
  b.node_pe = temporal ? Tensor::row(positional_encoding(dt_start, cfg.d_g))
                       : Tensor::zeros({1, static_cast<std::size_t>(cfg.d_g)});
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  return initial_representation(p, b, cfg).value();
}

Tensor message_hidden(const Tensor& h_src, double dt, const ParamSet& params, int layer,
                      const ModelConfig& cfg) {
  check_layer(layer, cfg);
  const ModelBatch b = edge_batch(2, {{0, 1}}, {dt}, cfg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  Tensor h = Tensor::zeros({2, static_cast<std::size_t>(cfg.d_g)});
  std::copy(h_src.data().begin(), h_src.data().end(), h.data().begin());
  return edge_messages_hidden(p, layer - 1, tape.constant(h), b, cfg).value();
}

Tensor message(const Tensor& h_src, double dt, const ParamSet& params, int layer,
               const ModelConfig& cfg) {
  const Tensor hhat = message_hidden(h_src, dt, params, layer, cfg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  return ad::matmul(tape.constant(hhat), p(layer_name(layer - 1, "wv"))).value();
}

Tensor attention_scores(const Tensor& h_r, const Tensor& hhats, const ParamSet& params, int layer,
                        const ModelConfig& cfg) {
  check_layer(layer, cfg);
  const std::size_t k = hhats.rows();
  const std::size_t dg = static_cast<std::size_t>(cfg.d_g);
  if (k == 0) throw InvalidArgument("attention over zero neighbors");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  for (std::size_t i = 0; i < k; ++i) edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(k));
  const ModelBatch b = edge_batch(k + 1, edges, std::vector<double>(k, 0.0), cfg);
  Tensor h = Tensor::zeros({k + 1, dg});
  std::copy(h_r.data().begin(), h_r.data().end(), h.data().begin() + k * dg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  return edge_attention(p, layer - 1, tape.constant(h), tape.constant(hhats.reshaped({k, dg})), b, cfg)
      .value()
      .reshaped({k});
}

Tensor aggregate(const Tensor& h_r, const Tensor& messages, const Tensor& weights) {
  Tensor out = as_row(h_r);
  if (messages.size() == 0) return out;
  const std::size_t k = messages.rows();
  const std::size_t d = messages.cols();
  if (weights.size() != k || d != out.size()) throw InvalidArgument("aggregate: misaligned inputs");
  ad::Tape tape;
  const ad::Var m = tape.constant(messages);
  const ad::Var w = tape.constant(weights.reshaped({k, 1}));
  const ad::Var s = ad::segment_sum(ad::mul_col(m, w), ad::Index(k, 0), 1);
  return ad::add(tape.constant(out), s).value();
}

PosteriorState encode_posterior(const STGraph& graph, const ParamSet& params,
                                const ModelConfig& cfg) {
  ModelBatch b;
  const STGraph* g[] = {&graph};
  fill_encoder(b, g, cfg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  const EncoderOutput enc = encode(p, b, cfg, ForwardOptions{});
  return PosteriorState{enc.mu.value(), enc.sigma.value()};
}

Tensor sample_latent(const PosteriorState& post, Rng& rng) {
  if (!post.mu.same_shape(post.sigma)) throw InvalidArgument("mu and sigma shapes differ");
  Tensor z = post.mu;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!(post.sigma[i] > 0.0)) throw InvalidArgument("sigma must be positive");
    z[i] += post.sigma[i] * rng.normal();
  }
  return z;
}

Tensor ode_dynamics(const Tensor& z, const Tensor& adjacency, const ParamSet& params,
                    const ModelConfig& cfg) {
  ModelBatch b;
  b.n_agents = z.rows();
  const Tensor* adj[] = {&adjacency};
  if (adjacency.rows() != z.rows() || adjacency.cols() != z.rows()) {
    throw InvalidArgument("adjacency must be N x N for N latent rows");
  }
  fill_ode_edges(b, adj, cfg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  return ode_derivative(p, tape.constant(z), b, cfg).value();
}

Tensor decode(const Tensor& z, const ParamSet& params) {
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  const Tensor zz = z.rank() == 1 ? as_row(z) : z;
  return decode(p, tape.constant(zz)).value();
}

Tensor forecast(const ObservedSample& sample, const ParamSet& params, const ModelConfig& cfg,
                int t_h, int t_f, double obs_dt, Rng* rng) {
  const STGraph g = build_temporal_graph(sample, 0, t_h, GraphOptions{cfg.max_gap, cfg.fully_connected});
  const ModelBatch b = make_batch(g, sample, cfg, t_h, t_f);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  ForwardOptions opt;
  opt.mean_latent = rng == nullptr;
  opt.rng = rng;
  opt.obs_dt = obs_dt;
  const ForwardResult r = run_model(p, b, cfg, opt);
  const std::size_t n = b.n_agents, df = static_cast<std::size_t>(cfg.d_feature);
  const std::size_t tf = static_cast<std::size_t>(t_f);
  Tensor out({n, tf, df});
  const Tensor& pv = r.pred.value();
  for (std::size_t t = 0; t < tf; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < df; ++c) out[(i * tf + t) * df + c] = pv[(t * n + i) * df + c];
    }
  }
  return out;
}

Tensor pooling_weights(const ObservedSample& sample, const ParamSet& params,
                       const ModelConfig& cfg, int t_h) {
  const STGraph g = build_temporal_graph(sample, 0, t_h, GraphOptions{cfg.max_gap, cfg.fully_connected});
  ModelBatch b;
  const STGraph* gs[] = {&g};
  fill_encoder(b, gs, cfg);
  ad::Tape tape;
  const BoundParams p(tape, params, false);
  const EncoderOutput enc = encode(p, b, cfg, ForwardOptions{});
  const std::size_t n = static_cast<std::size_t>(sample.n_agents());
  Tensor out = Tensor::zeros({n, static_cast<std::size_t>(t_h)});
  for (std::size_t k = 0; k < b.n_nodes; ++k) {
    out.at(b.node_agent[k], b.node_time[k]) = enc.pool.value()[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params,
                     const ModelConfig& cfg, const KeyValueFile& extra) {
  check_param_layout(params, cfg);
  std::filesystem::create_directories(dir);
  KeyValueFile kv;
  kv.set("format_version", kCheckpointFormatVersion);
  kv.set("kind", "checkpoint");
  cfg.write(kv);
  kv.set("param_count", static_cast<std::int64_t>(params.size()));
  Fnv1a h;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string file = "param_" + params.names()[i] + ".stemtens";
    write_tensor(dir / file, params[i]);
    h.update(file);
    h.update(file_fingerprint(dir / file));
  }
  kv.set("param_fingerprint", h.hex());
  for (const auto& [k, v] : extra.entries()) kv.set(k, v);
  kv.save(dir / "manifest");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest")) {
    throw DataError("checkpoint not found: " + dir.string());
  }
  Checkpoint ck;
  ck.manifest = KeyValueFile::load(dir / "manifest");
  if (ck.manifest.get_int_or("format_version", 0) != kCheckpointFormatVersion ||
      ck.manifest.get("kind").value_or("") != "checkpoint") {
    throw FingerprintError("not a checkpoint manifest: " + dir.string());
  }
  ck.config = ModelConfig::read(ck.manifest);
  for (const auto& s : param_layout(ck.config)) {
    const auto path = dir / ("param_" + s.name + ".stemtens");
    if (!std::filesystem::exists(path)) throw FingerprintError("checkpoint lacks " + s.name);
    ck.params.add(s.name, read_tensor(path));
  }
  check_param_layout(ck.params, ck.config);
  return ck;
}

}  // namespace stemfold
