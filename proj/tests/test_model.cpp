#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "stemfold/errors.hpp"
#include "stemfold/model.hpp"
#include "stemfold/text_format.hpp"
#include "toy_fixtures.hpp"

using namespace stemfold;
namespace fs = std::filesystem;

namespace {

using Vec = std::vector<double>;

// Row vector times matrix, with rows [row0, row0 + x.size()) of w.
Vec vecmat(const Vec& x, const Tensor& w, std::size_t row0 = 0) {
  Vec out(w.cols(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * w.at(row0 + i, j);
  }
  return out;
}

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec relu(Vec a) {
  for (double& v : a) v = std::max(v, 0.0);
  return a;
}

Vec bias(const Tensor& b) { return Vec(b.data().begin(), b.data().end()); }

double dot(const Vec& a, const Vec& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }

Vec sinusoid(double dt, std::size_t d) {
  Vec q(d);
  for (std::size_t k = 0; k < d / 2; ++k) {
    const double w = std::exp(-std::log(10000.0) * 2.0 * static_cast<double>(k) / static_cast<double>(d));
    q[2 * k] = std::sin(dt * w);
    q[2 * k + 1] = std::cos(dt * w);
  }
  return q;
}

Vec softmax(const Vec& s) {
  const double m = *std::max_element(s.begin(), s.end());
  Vec e(s.size());
  double z = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) z += e[i] = std::exp(s[i] - m);
  for (double& v : e) v /= z;
  return e;
}

Vec as_vec(const Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

void check_close(const Vec& a, const Vec& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (tol == 0.0) {
      CHECK(a[i] == b[i]);
    } else {
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
    }
  }
}

void check_close(const Tensor& a, const Vec& b, double tol) { check_close(as_vec(a), b, tol); }

std::string layer(int l, const char* what) { return "layer" + std::to_string(l) + "." + what; }

struct Reference {
  const ParamSet& p;
  const ModelConfig& c;

  Vec init(const std::array<double, 4>& o, double dt) const {
    Vec x(o.begin(), o.end());
    x.push_back(c.no_temporal_encoding ? 0.0 : dt);
    Vec h = relu(plus(vecmat(x, p.at("init.w")), bias(p.at("init.b"))));
    if (!c.no_temporal_encoding) h = plus(h, sinusoid(dt, h.size()));
    return h;
  }
  Vec hidden(int l, const Vec& h, double dt) const {
    Vec x = h;
    x.push_back(c.no_temporal_encoding ? 0.0 : dt);
    Vec m = relu(plus(vecmat(x, p.at(layer(l, "wt"))), bias(p.at(layer(l, "bt")))));
    if (!c.no_temporal_encoding) m = plus(m, sinusoid(dt, m.size()));
    return m;
  }
  Vec weights(int l, const Vec& h_r, const std::vector<Vec>& hhats) const {
    if (c.no_attention) return Vec(hhats.size(), 1.0 / static_cast<double>(hhats.size()));
    const Vec q = vecmat(h_r, p.at(layer(l, "wq")));
    Vec s;
    for (const Vec& hh : hhats) s.push_back(dot(vecmat(hh, p.at(layer(l, "wk"))), q) / std::sqrt(c.d_g));
    return softmax(s);
  }
  Vec f_r(const Vec& zi, const Vec& zj) const {
    Vec x = zi;
    x.insert(x.end(), zj.begin(), zj.end());
    const Vec h = relu(plus(vecmat(x, p.at("ode.r1_w")), bias(p.at("ode.r1_b"))));
    return plus(vecmat(h, p.at("ode.r2_w")), bias(p.at("ode.r2_b")));
  }
  Vec f_o(const Vec& s) const {
    const Vec h = relu(plus(vecmat(s, p.at("ode.o1_w")), bias(p.at("ode.o1_b"))));
    return plus(vecmat(h, p.at("ode.o2_w")), bias(p.at("ode.o2_b")));
  }
  std::vector<Vec> dynamics(const std::vector<Vec>& z, const Tensor& adj) const {
    std::vector<Vec> out;
    for (std::size_t i = 0; i < z.size(); ++i) {
      Vec s(static_cast<std::size_t>(c.d_ode), 0.0);
      for (std::size_t j = 0; j < z.size(); ++j) {
        if (i != j && (c.fully_connected || adj.at(i, j) > 0.0)) s = plus(s, f_r(z[i], z[j]));
      }
      out.push_back(f_o(s));
    }
    return out;
  }
  Vec decode(const Vec& z) const {
    const Vec h = relu(plus(vecmat(z, p.at("dec.w1")), bias(p.at("dec.b1"))));
    return plus(vecmat(h, p.at("dec.w2")), bias(p.at("dec.b2")));
  }

  // Node-by-node encoder; returns (mu, sigma) per agent.
  std::pair<std::vector<Vec>, std::vector<Vec>> posterior(const STGraph& g) const {
    std::vector<Vec> h;
    for (const auto& nd : g.nodes) h.push_back(init(nd.feature, nd.anchor));
    for (int l = 0; l < c.n_layers; ++l) {
      std::vector<Vec> next = h;
      for (std::size_t r = 0; r < g.nodes.size(); ++r) {
        std::vector<Vec> hhats;
        for (const auto& e : g.edges) {
          if (static_cast<std::size_t>(e.dst) != r) continue;
          const auto& src = g.nodes[static_cast<std::size_t>(e.src)];
          hhats.push_back(hidden(l, h[static_cast<std::size_t>(e.src)], src.anchor - g.nodes[r].anchor));
        }
        if (hhats.empty()) continue;
        const Vec w = weights(l, h[r], hhats);
        Vec pooled(h[r].size(), 0.0);
        for (std::size_t k = 0; k < hhats.size(); ++k) {
          for (std::size_t d = 0; d < pooled.size(); ++d) pooled[d] += w[k] * hhats[k][d];
        }
        next[r] = plus(h[r], vecmat(pooled, p.at(layer(l, "wv"))));
      }
      h = next;
    }
    std::vector<Vec> mus, sigmas;
    for (int a = 0; a < g.n_agents; ++a) {
      std::vector<std::size_t> rows;
      for (std::size_t k = 0; k < g.nodes.size(); ++k) {
        if (g.nodes[k].agent == a) rows.push_back(k);
      }
      Vec pool(rows.size(), 0.0);
      for (std::size_t qi : rows) {
        const Vec q = vecmat(h[qi], p.at("seq.wq"));
        Vec s;
        for (std::size_t kj : rows) s.push_back(dot(q, vecmat(h[kj], p.at("seq.wk"))) / std::sqrt(c.d_ctx));
        const Vec w = softmax(s);
        for (std::size_t j = 0; j < rows.size(); ++j) pool[j] += w[j] / static_cast<double>(rows.size());
      }
      Vec ctx(static_cast<std::size_t>(c.d_ctx), 0.0);
      for (std::size_t j = 0; j < rows.size(); ++j) {
        const Vec v = vecmat(h[rows[j]], p.at("seq.wv"));
        for (std::size_t d = 0; d < ctx.size(); ++d) ctx[d] += pool[j] * v[d];
      }
      mus.push_back(plus(vecmat(ctx, p.at("post.mu_w")), bias(p.at("post.mu_b"))));
      Vec sg = plus(vecmat(ctx, p.at("post.sigma_w")), bias(p.at("post.sigma_b")));
      for (double& v : sg) v = std::log1p(std::exp(v)) + 1e-6;
      sigmas.push_back(sg);
    }
    return {mus, sigmas};
  }
};

ParamSet zero_params(const ModelConfig& cfg) {
  ParamSet ps = init_params(cfg, 1);
  for (auto& t : ps.values()) t.fill(0.0);
  return ps;
}

}  // namespace

TEST_CASE("positional encoding") {
  const auto q0 = positional_encoding(0.0, 8);
  for (std::size_t k = 0; k < 8; ++k) CHECK(q0[k] == (k % 2 == 0 ? 0.0 : 1.0));
  CHECK(positional_encoding(2.0 * std::numbers::pi, 8)[0] == doctest::Approx(q0[0]).epsilon(1e-12).scale(1.0));
  for (double dt : {-3.0, 0.5, 17.0, 1e4}) {
    const auto q = positional_encoding(dt, 16);
    check_close(q, sinusoid(dt, 16), 1e-12);
    for (double v : q) CHECK(std::fabs(v) <= 1.0);
  }
  CHECK_THROWS_AS(positional_encoding(1.0, 7), InvalidArgument);
}

TEST_CASE("initial node representation") {
  ModelConfig cfg = toy::tiny_config();
  const ParamSet zeros = zero_params(cfg);
  check_close(init_node_repr({0.3, -0.2, 0.1, 0.5}, 0.0, zeros, cfg), sinusoid(0.0, 8), 0.0);
  check_close(init_node_repr({0.3, -0.2, 0.1, 0.5}, 2.0, zeros, cfg), sinusoid(2.0, 8), 1e-15);

  ParamSet neg = zeros;
  neg.at("init.b").fill(-1.0);
  check_close(init_node_repr({0.0, 0.0, 0.0, 0.0}, 1.5, neg, cfg), sinusoid(1.5, 8), 1e-15);

  const ParamSet ps = toy::random_params(cfg, 3);
  const Reference ref{ps, cfg};
  for (double dt : {0.0, 1.0, 4.0}) {
    const std::array<double, 4> o{0.4, -0.7, 0.2, 0.9};
    check_close(init_node_repr(o, dt, ps, cfg), ref.init(o, dt), 1e-12);
  }
}

TEST_CASE("messages") {
  ModelConfig cfg = toy::tiny_config();
  ParamSet ps = zero_params(cfg);
  Rng rng(4);
  Tensor wv({8, 8});
  for (double& v : wv.data()) v = rng.uniform(-1, 1);
  ps.at(layer(0, "wv")) = wv;
  const Tensor h = Tensor::row({0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8});
  check_close(message_hidden(h, 2.0, ps, 1, cfg), sinusoid(2.0, 8), 1e-15);
  check_close(message(h, 2.0, ps, 1, cfg), vecmat(sinusoid(2.0, 8), wv), 1e-12);

  ParamSet ident = toy::random_params(cfg, 5);
  ident.at(layer(1, "wv")) = Tensor::zeros({8, 8});
  for (std::size_t i = 0; i < 8; ++i) ident.at(layer(1, "wv")).at(i, i) = 1.0;
  check_close(message(h, -1.0, ident, 2, cfg), as_vec(message_hidden(h, -1.0, ident, 2, cfg)), 0.0);

  const ParamSet rp = toy::random_params(cfg, 6);
  const Reference ref{rp, cfg};
  for (int l = 1; l <= 2; ++l) {
    for (double dt : {-2.0, 0.0, 3.0}) {
      const Vec hh = ref.hidden(l - 1, as_vec(h), dt);
      check_close(message_hidden(h, dt, rp, l, cfg), hh, 1e-12);
      check_close(message(h, dt, rp, l, cfg), vecmat(hh, rp.at(layer(l - 1, "wv"))), 1e-12);
    }
  }
  CHECK_THROWS_AS(message(h, 0.0, rp, 0, cfg), InvalidArgument);
  CHECK_THROWS_AS(message(h, 0.0, rp, 3, cfg), InvalidArgument);
}

TEST_CASE("attention scores") {
  ModelConfig cfg = toy::tiny_config();
  cfg.d_g = 4;
  ParamSet ps = init_params(cfg, 8);
  for (const char* w : {"wk", "wq"}) {
    Tensor& t = ps.at(layer(0, w));
    t.fill(0.0);
    for (std::size_t i = 0; i < 4; ++i) t.at(i, i) = 1.0;
  }
  // |h_r|^2 = sqrt(d) ln 3 with d = 4, second neighbor orthogonal.
  const double c = std::sqrt(2.0 * std::log(3.0));
  const Tensor h_r = Tensor::row({c, 0, 0, 0});
  const Tensor hhats = Tensor::matrix(2, 4, {c, 0, 0, 0, 0, 1, 0, 0});
  const Tensor w = attention_scores(h_r, hhats, ps, 1, cfg);
  CHECK(w[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(std::fabs(w[0] + w[1] - 1.0) < 1e-12);

  const Tensor same = Tensor::matrix(3, 4, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  const Tensor uniform = attention_scores(h_r, same, ps, 1, cfg);
  for (double v : uniform.data()) CHECK(v == doctest::Approx(1.0 / 3.0));

  const ParamSet rp = toy::random_params(cfg, 9);
  const Reference ref{rp, cfg};
  Rng rng(10);
  Tensor many({7, 4});
  for (double& v : many.data()) v = rng.uniform(-2, 2);
  std::vector<Vec> rows;
  for (std::size_t k = 0; k < 7; ++k) rows.emplace_back(many.row_span(k).begin(), many.row_span(k).end());
  const Tensor got = attention_scores(h_r, many, rp, 2, cfg);
  check_close(got, ref.weights(1, as_vec(h_r), rows), 1e-12);
  double total = 0.0;
  for (double v : got.data()) {
    CHECK(v > 0.0);
    total += v;
  }
  CHECK(std::fabs(total - 1.0) < 1e-12);
  CHECK_THROWS_AS(attention_scores(h_r, Tensor({0, 4}), rp, 1, cfg), InvalidArgument);

  cfg.no_attention = true;
  const Tensor flat = attention_scores(h_r, many, rp, 1, cfg);
  for (double v : flat.data()) CHECK(v == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("residual aggregation") {
  const Tensor h = Tensor::row({1.0, -2.0, 0.5});
  check_close(aggregate(h, Tensor(), Tensor()), as_vec(h), 0.0);
  const Tensor m1 = Tensor::row({0.5, 0.5, 1.0});
  check_close(aggregate(h, m1, Tensor::row({1.0})), {1.5, -1.5, 1.5}, 0.0);
  const Tensor m2 = Tensor::matrix(2, 3, {1, 2, 3, 3, 2, 1});
  check_close(aggregate(h, m2, Tensor::row({0.5, 0.5})), {3.0, 0.0, 2.5}, 1e-15);
  CHECK_THROWS_AS(aggregate(h, m2, Tensor::row({1.0})), InvalidArgument);
}

TEST_CASE("posterior encoder") {
  const ModelConfig cfg = toy::tiny_config();
  const ObservedSample s = toy::random_sample(3, 8, 11, 0.7);
  const STGraph g = build_temporal_graph(s, 0, 6, {cfg.max_gap, false});

  SUBCASE("zero weights") {
    const PosteriorState post = encode_posterior(g, zero_params(cfg), cfg);
    for (double v : post.mu.data()) CHECK(v == 0.0);
    for (double v : post.sigma.data()) CHECK(v == doctest::Approx(std::log(2.0) + 1e-6).epsilon(1e-15));
  }
  SUBCASE("matches a node-by-node reference") {
    for (ModelConfig c : {cfg, [&] { auto x = cfg; x.no_attention = true; return x; }(),
                          [&] { auto x = cfg; x.no_temporal_encoding = true; return x; }()}) {
      const ParamSet ps = toy::random_params(c, 12);
      const PosteriorState post = encode_posterior(g, ps, c);
      const auto [mus, sigmas] = Reference{ps, c}.posterior(g);
      for (std::size_t a = 0; a < 3; ++a) {
        check_close(Vec(post.mu.row_span(a).begin(), post.mu.row_span(a).end()), mus[a], 1e-10);
        check_close(Vec(post.sigma.row_span(a).begin(), post.sigma.row_span(a).end()), sigmas[a], 1e-10);
      }
      for (double v : post.sigma.data()) CHECK(v > 0.0);
    }
  }
  SUBCASE("node order within an agent does not matter") {
    const ParamSet ps = toy::random_params(cfg, 13);
    const PosteriorState base = encode_posterior(g, ps, cfg);
    STGraph perm = g;
    std::vector<std::size_t> order(g.nodes.size());
    std::iota(order.begin(), order.end(), 0);
    std::reverse(order.begin(), order.end());
    std::vector<int> where(g.nodes.size());
    for (std::size_t k = 0; k < order.size(); ++k) {
      perm.nodes[k] = g.nodes[order[k]];
      where[order[k]] = static_cast<int>(k);
    }
    for (auto& e : perm.edges) {
      e.src = where[static_cast<std::size_t>(e.src)];
      e.dst = where[static_cast<std::size_t>(e.dst)];
    }
    std::reverse(perm.edges.begin(), perm.edges.end());
    const PosteriorState moved = encode_posterior(perm, ps, cfg);
    for (std::size_t i = 0; i < base.mu.size(); ++i) {
      CHECK(std::fabs(base.mu[i] - moved.mu[i]) < 1e-10);
      CHECK(std::fabs(base.sigma[i] - moved.sigma[i]) < 1e-10);
    }
  }
  SUBCASE("an agent without nodes") {
    STGraph missing = g;
    missing.n_agents = 4;
    CHECK_THROWS_AS(encode_posterior(missing, toy::random_params(cfg, 1), cfg), AgentUnobservable);
  }
}

TEST_CASE("latent sampling") {
  PosteriorState post{Tensor::row({0.5, -1.0}), Tensor::row({2.0, 1e-300})};
  Rng r1(5), r2(5);
  const Tensor a = sample_latent(post, r1);
  check_close(a, as_vec(sample_latent(post, r2)), 0.0);
  CHECK(a[1] == -1.0);
  double sum = 0.0;
  const int n = 100000;
  Rng rng(6);
  for (int k = 0; k < n; ++k) sum += sample_latent(post, rng)[0];
  CHECK(std::fabs(sum / n - 0.5) < 3.0 * 2.0 / std::sqrt(n));
  post.sigma[1] = 0.0;
  CHECK_THROWS_AS(sample_latent(post, rng), InvalidArgument);
}

TEST_CASE("latent dynamics") {
  ModelConfig cfg = toy::tiny_config();
  const ParamSet ps = toy::random_params(cfg, 14);
  const Reference ref{ps, cfg};
  Rng rng(15);
  Tensor z({3, 4});
  for (double& v : z.data()) v = rng.uniform(-1, 1);
  std::vector<Vec> zs;
  for (std::size_t i = 0; i < 3; ++i) zs.emplace_back(z.row_span(i).begin(), z.row_span(i).end());
  // Agent 2 is isolated.
  const Tensor adj = Tensor::matrix(3, 3, {0, 1, 0, 1, 0, 0, 0, 0, 0});
  const Tensor dz = ode_dynamics(z, adj, ps, cfg);
  const auto expected = ref.dynamics(zs, adj);
  for (std::size_t i = 0; i < 3; ++i) {
    check_close(Vec(dz.row_span(i).begin(), dz.row_span(i).end()), expected[i], 1e-12);
  }
  check_close(Vec(dz.row_span(2).begin(), dz.row_span(2).end()), ref.f_o(Vec(8, 0.0)), 1e-12);

  const Tensor empty = Tensor::zeros({3, 3});
  const Tensor iso = ode_dynamics(z, empty, ps, cfg);
  for (std::size_t i = 1; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(iso.at(i, c) == iso.at(0, c));
  }

  ModelConfig fc = cfg;
  fc.fully_connected = true;
  const Tensor full = Tensor::matrix(3, 3, {0, 1, 1, 1, 0, 1, 1, 1, 0});
  check_close(ode_dynamics(z, empty, ps, fc), as_vec(ode_dynamics(z, full, ps, cfg)), 1e-15);

  ParamSet frozen = ps;
  frozen.at("ode.o2_w").fill(0.0);
  frozen.at("ode.o2_b").fill(0.0);
  const Tensor still = ode_dynamics(z, full, frozen, cfg);
  for (double v : still.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(ode_dynamics(z, Tensor::zeros({2, 2}), ps, cfg), InvalidArgument);
}

TEST_CASE("decoder") {
  ModelConfig cfg = toy::tiny_config();
  const Tensor zero = decode(Tensor::row({1, 2, 3, 4}), zero_params(cfg));
  for (double v : zero.data()) CHECK(v == 0.0);
  cfg.d_latent = 7;
  const ParamSet ps = toy::random_params(cfg, 16);
  const Vec z{0.1, -0.4, 0.9, 0.0, -1.2, 0.3, 0.6};
  const Tensor out = decode(Tensor::row(z), ps);
  CHECK(out.size() == 4);
  check_close(out, Reference{ps, cfg}.decode(z), 1e-12);
}

TEST_CASE("evidence lower bound") {
  CHECK(gaussian_kl(0.0, 1.0) == 0.0);
  CHECK(std::fabs(gaussian_kl(1.0, 1.0) - 0.5) < 1e-12);
  CHECK(gaussian_kl(0.3, 0.2) > 0.0);
  const double per_element = -std::log(0.01 * std::sqrt(2.0 * std::numbers::pi));
  CHECK(per_element == doctest::Approx(3.6862).epsilon(1e-4));
  CHECK(std::fabs(gaussian_log_likelihood(0.4, 0.4, 0.01) - per_element) < 1e-10);

  ad::Tape tape;
  const Tensor target = Tensor::matrix(3, 4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  const ad::Var pred = tape.constant(target);
  const ad::Var mu = tape.constant(Tensor::row({1.0}));
  const ad::Var sigma = tape.constant(Tensor::row({1.0}));
  ElboTerms terms;
  const Tensor mask = Tensor::column({1.0, 0.0, 1.0});
  const ad::Var loss = elbo_loss(pred, target, mask, mu, sigma, 0.01, &terms);
  CHECK(std::fabs(terms.kl - 0.5) < 1e-12);
  CHECK(std::fabs(terms.reconstruction - 8.0 * per_element) < 1e-10 * 8.0);
  CHECK(loss.value()[0] == doctest::Approx(terms.kl - terms.reconstruction));

  // Per-element masks and a nonzero residual.
  Tensor shifted = target;
  shifted[0] += 0.02;
  Tensor emask = Tensor::full({3, 4}, 1.0);
  emask[5] = 0.0;
  elbo_loss(tape.constant(shifted), target, emask, tape.constant(Tensor::row({0.0})),
            tape.constant(Tensor::row({1.0})), 0.01, &terms);
  CHECK(terms.kl == 0.0);
  CHECK(terms.reconstruction == doctest::Approx(11.0 * per_element - 2.0).epsilon(1e-12));

  CHECK_THROWS_AS(elbo_loss(pred, target, mask, mu, sigma, 0.0), InvalidArgument);
  CHECK_THROWS_AS(elbo_loss(pred, target, Tensor::row({1.0, 1.0}), mu, sigma, 0.01), InvalidArgument);
}

TEST_CASE("forecasting") {
  const ModelConfig cfg = toy::tiny_config();
  const ObservedSample s = toy::random_sample(3, 9, 17, 0.8);
  const ParamSet ps = toy::random_params(cfg, 18);

  SUBCASE("mean mode matches an explicit RK4 rollout") {
    const Tensor out = forecast(s, ps, cfg, 5, 4, 0.1);
    CHECK(out.shape() == std::vector<std::size_t>{3, 4, 4});
    const STGraph g = build_temporal_graph(s, 0, 5, {cfg.max_gap, false});
    const Reference ref{ps, cfg};
    std::vector<Vec> z = ref.posterior(g).first;
    auto step = [&](const std::vector<Vec>& a, const std::vector<Vec>& k, double h) {
      std::vector<Vec> r = a;
      for (std::size_t i = 0; i < r.size(); ++i) {
        for (std::size_t d = 0; d < r[i].size(); ++d) r[i][d] += h * k[i][d];
      }
      return r;
    };
    const double h = 0.1;
    for (std::size_t t = 0; t < 4; ++t) {
      const auto k1 = ref.dynamics(z, s.adjacency);
      const auto k2 = ref.dynamics(step(z, k1, h / 2), s.adjacency);
      const auto k3 = ref.dynamics(step(z, k2, h / 2), s.adjacency);
      const auto k4 = ref.dynamics(step(z, k3, h), s.adjacency);
      for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t d = 0; d < z[i].size(); ++d) {
          z[i][d] += h / 6.0 * (k1[i][d] + 2 * k2[i][d] + 2 * k3[i][d] + k4[i][d]);
        }
        const Vec x = ref.decode(z[i]);
        for (std::size_t c = 0; c < 4; ++c) {
          CHECK(out[(i * 4 + t) * 4 + c] == doctest::Approx(x[c]).epsilon(1e-10).scale(1.0));
        }
      }
    }
  }
  SUBCASE("frozen dynamics give a constant forecast") {
    ParamSet frozen = ps;
    frozen.at("ode.o2_w").fill(0.0);
    frozen.at("ode.o2_b").fill(0.0);
    const Tensor out = forecast(s, frozen, cfg, 5, 4, 0.1);
    const PosteriorState post =
        encode_posterior(build_temporal_graph(s, 0, 5, {cfg.max_gap, false}), frozen, cfg);
    const Tensor x0 = decode(post.mu, frozen);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t c = 0; c < 4; ++c) CHECK(out[(i * 4 + t) * 4 + c] == doctest::Approx(x0.at(i, c)).epsilon(1e-12));
      }
    }
  }
  SUBCASE("determinism") {
    const Tensor a = forecast(s, ps, cfg, 5, 4, 0.1);
    const Tensor b = forecast(s, ps, cfg, 5, 4, 0.1);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    Rng r1(3), r2(3);
    const Tensor c = forecast(s, ps, cfg, 5, 4, 0.1, &r1);
    const Tensor d = forecast(s, ps, cfg, 5, 4, 0.1, &r2);
    CHECK(std::equal(c.data().begin(), c.data().end(), d.data().begin()));
    CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
  }
  SUBCASE("pooling weights per agent sum to one") {
    const Tensor w = pooling_weights(s, ps, cfg, 5);
    CHECK(w.shape() == std::vector<std::size_t>{3, 5});
    for (std::size_t i = 0; i < 3; ++i) {
      double total = 0.0;
      for (std::size_t t = 0; t < 5; ++t) {
        if (!s.observed(static_cast<int>(i), static_cast<int>(t))) CHECK(w.at(i, t) == 0.0);
        total += w.at(i, t);
      }
      CHECK(std::fabs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("batched forward equals per-sample forward") {
  const ModelConfig cfg = toy::tiny_config();
  const ParamSet ps = toy::random_params(cfg, 19);
  std::vector<ObservedSample> samples;
  std::vector<STGraph> graphs;
  for (int k = 0; k < 3; ++k) {
    samples.push_back(toy::random_sample(2 + k, 8, 40 + static_cast<std::uint64_t>(k), 0.8));
    graphs.push_back(build_temporal_graph(samples.back(), 0, 5, {cfg.max_gap, false}));
  }
  std::vector<const STGraph*> gp;
  std::vector<const ObservedSample*> sp;
  for (int k = 0; k < 3; ++k) {
    gp.push_back(&graphs[static_cast<std::size_t>(k)]);
    sp.push_back(&samples[static_cast<std::size_t>(k)]);
  }
  const ModelBatch batch = make_batch(gp, sp, cfg, 5, 3);
  ad::Tape tape;
  const BoundParams p(tape, ps, false);
  ForwardOptions opt;
  const ForwardResult r = run_model(p, batch, cfg, opt);
  const std::size_t na = batch.n_agents;
  CHECK(na == 9);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor single = forecast(samples[k], ps, cfg, 5, 3, 0.1);
    const std::size_t n = static_cast<std::size_t>(samples[k].n_agents());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t c = 0; c < 4; ++c) {
          const double got = r.pred.value()[(t * na + batch.sample_agent_offset[k] + i) * 4 + c];
          CHECK(got == doctest::Approx(single[(i * 3 + t) * 4 + c]).epsilon(1e-12).scale(1.0));
        }
      }
    }
  }
}

TEST_CASE("negated ELBO gradients match finite differences for every parameter group") {
  const ModelConfig cfg = toy::tiny_config();
  const ObservedSample s = toy::random_sample(2, 5, 21);
  const STGraph g = build_temporal_graph(s, 0, 3, {cfg.max_gap, false});
  const ModelBatch batch = make_batch(g, s, cfg, 3, 2);
  const ParamSet ps = toy::random_params(cfg, 22);
  const auto groups = toy::param_groups(ps);
  CHECK(groups == std::vector<std::string>{"init", "layer0", "layer1", "seq", "post", "ode", "dec"});
  for (const auto& group : groups) {
    CAPTURE(group);
    CHECK(toy::elbo_group_error(ps, cfg, batch, group) < 1e-4);
  }
}

TEST_CASE("configuration and checkpoints") {
  ModelConfig cfg = toy::tiny_config();
  CHECK(cfg.variant() == "original");
  cfg.d_g = 7;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = toy::tiny_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
  cfg = toy::tiny_config();
  cfg.no_temporal_encoding = true;
  CHECK(cfg.variant() == "no_temporal_encoding");

  const fs::path dir = fs::temp_directory_path() / ("stemfold_ckpt_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  const ParamSet ps = toy::random_params(cfg, 23);
  KeyValueFile extra;
  extra.set("note", "roundtrip");
  save_checkpoint(dir, ps, cfg, extra);
  const Checkpoint ck = load_checkpoint(dir);
  CHECK(ck.config.d_g == cfg.d_g);
  CHECK(ck.config.no_temporal_encoding);
  CHECK(ck.manifest.require("note") == "roundtrip");
  REQUIRE(ck.params.names() == ps.names());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (std::size_t k = 0; k < ps[i].size(); ++k) {
      CHECK(ck.params[i][k] == static_cast<double>(static_cast<float>(ps[i][k])));
    }
  }

  KeyValueFile kv = KeyValueFile::load(dir / "manifest");
  kv.set("model.d_ode", 16);
  kv.save(dir / "manifest");
  CHECK_THROWS_AS(load_checkpoint(dir), FingerprintError);
  kv.set("kind", "dataset");
  kv.save(dir / "manifest");
  CHECK_THROWS_AS(load_checkpoint(dir), FingerprintError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent"), DataError);
  fs::remove_all(dir);

  ParamSet wrong = ps;
  wrong.at("dec.w1") = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(check_param_layout(wrong, cfg), FingerprintError);
}
