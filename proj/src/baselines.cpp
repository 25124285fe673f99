#include "stemfold/baselines.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "stemfold/errors.hpp"
#include "stemfold/tensor_io.hpp"

namespace stemfold {

std::string to_string(BaselineKind kind) {
  return kind == BaselineKind::kJointRnn ? "joint_rnn" : "single_rnn";
}

BaselineKind parse_baseline_kind(const std::string& name) {
  if (name == "single_rnn") return BaselineKind::kSingleRnn;
  if (name == "joint_rnn") return BaselineKind::kJointRnn;
  throw InvalidArgument("unknown baseline '" + name + "' (expected single_rnn or joint_rnn)");
}

BaselineModel init_baseline(BaselineKind kind, int n_agents, int hidden, int teacher_forcing,
                            std::uint64_t seed) {
  if (n_agents < 1 || hidden < 1 || teacher_forcing < 1) {
    throw InvalidArgument("baseline dimensions must be positive");
  }
  BaselineModel m;
  m.kind = kind;
  m.n_agents = n_agents;
  m.hidden = hidden;
  m.teacher_forcing = teacher_forcing;
  const std::size_t in = static_cast<std::size_t>(m.input_width());
  const std::size_t h = static_cast<std::size_t>(hidden);
  Rng rng(seed);
  auto uniform = [&](std::size_t r, std::size_t c, double limit) {
    Tensor t({r, c});
    for (double& v : t.data()) v = rng.uniform(-limit, limit);
    return t;
  };
  const double k = 1.0 / std::sqrt(static_cast<double>(h));
  m.params.add("lstm.w", uniform(in + h, 4 * h, k));
  Tensor b = Tensor::zeros({1, 4 * h});
  for (std::size_t j = h; j < 2 * h; ++j) b[j] = 1.0;  // forget-gate bias
  m.params.add("lstm.b", std::move(b));
  m.params.add("out.w", uniform(h, in, k));
  m.params.add("out.b", Tensor::zeros({1, in}));
  return m;
}

namespace {

// Sequence tensors for one chunk: row r of step t is a scene (joint) or an agent (single).
struct SeqBatch {
  std::size_t rows = 0, width = 0;
  std::vector<Tensor> x, m;  // per step, rows x width
};

SeqBatch make_seq(const BaselineModel& model, std::span<const ObservedSample* const> samples,
                  int steps) {
  SeqBatch b;
  const bool joint = model.kind == BaselineKind::kJointRnn;
  b.width = static_cast<std::size_t>(model.input_width());
  for (const ObservedSample* s : samples) {
    if (s->timesteps() < steps) throw InvalidArgument("sample shorter than the rollout");
    if (joint && s->n_agents() != model.n_agents) {
      throw FingerprintError("joint_rnn expects " + std::to_string(model.n_agents) +
                             " agents, sample has " + std::to_string(s->n_agents()));
    }
    b.rows += joint ? 1 : static_cast<std::size_t>(s->n_agents());
  }
  for (int t = 0; t < steps; ++t) {
    Tensor x({b.rows, b.width}), m({b.rows, b.width});
    std::size_t r = 0;
    for (const ObservedSample* s : samples) {
      for (int i = 0; i < s->n_agents(); ++i) {
        const std::size_t row = joint ? r : r + static_cast<std::size_t>(i);
        const std::size_t col = joint ? 4 * static_cast<std::size_t>(i) : 0;
        const auto f = s->feature(i, t);
        const double obs = s->observed(i, t) ? 1.0 : 0.0;
        for (std::size_t d = 0; d < 4; ++d) {
          x.at(row, col + d) = f[d];
          m.at(row, col + d) = obs;
        }
      }
      r += joint ? 1 : static_cast<std::size_t>(s->n_agents());
    }
    b.x.push_back(std::move(x));
    b.m.push_back(std::move(m));
  }
  return b;
}

// Returns predictions for steps 1..steps-1.
std::vector<ad::Var> rollout(const BoundParams& p, const BaselineModel& model, const SeqBatch& b) {
  ad::Tape& tape = p.tape();
  const std::size_t h = static_cast<std::size_t>(model.hidden);
  ad::Var hs = tape.constant(Tensor::zeros({b.rows, h}));
  ad::Var cs = hs;
  ad::Var prev;
  std::vector<ad::Var> preds;
  const std::size_t steps = b.x.size();
  for (std::size_t t = 0; t + 1 < steps; ++t) {
    ad::Var input;
    const bool forced = static_cast<int>(t) < model.teacher_forcing;
    if (!prev.valid()) {
      Tensor x0 = b.x[t];
      for (std::size_t i = 0; i < x0.size(); ++i) x0[i] *= b.m[t][i];
      input = tape.constant(std::move(x0));
    } else if (forced) {
      Tensor keep = b.m[t], fill = b.m[t];
      for (std::size_t i = 0; i < keep.size(); ++i) {
        keep[i] = b.m[t][i] * b.x[t][i];
        fill[i] = 1.0 - b.m[t][i];
      }
      input = ad::add(tape.constant(std::move(keep)), ad::mul(prev, tape.constant(std::move(fill))));
    } else {
      input = prev;
    }
    const ad::Var parts[] = {input, hs};
    const ad::Var gates = ad::add_row(ad::matmul(ad::concat_cols(parts), p("lstm.w")), p("lstm.b"));
    const ad::Var ig = ad::sigmoid(ad::slice_cols(gates, 0, h));
    const ad::Var fg = ad::sigmoid(ad::slice_cols(gates, h, h));
    const ad::Var gg = ad::tanh(ad::slice_cols(gates, 2 * h, h));
    const ad::Var og = ad::sigmoid(ad::slice_cols(gates, 3 * h, h));
    cs = ad::add(ad::mul(fg, cs), ad::mul(ig, gg));
    hs = ad::mul(og, ad::tanh(cs));
    prev = ad::add(input, ad::add_row(ad::matmul(hs, p("out.w")), p("out.b")));
    preds.push_back(prev);
  }
  return preds;
}

// Unpacks per-step rows x width predictions into per-sample N x len x 4 for steps [from, to).
std::vector<Tensor> unpack(const BaselineModel& model, std::span<const ObservedSample* const> samples,
                           const std::vector<ad::Var>& preds, std::size_t from, std::size_t to) {
  const bool joint = model.kind == BaselineKind::kJointRnn;
  std::vector<Tensor> out;
  std::size_t r = 0;
  const std::size_t len = to - from;
  for (const ObservedSample* s : samples) {
    const std::size_t n = static_cast<std::size_t>(s->n_agents());
    Tensor f({n, len, 4});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = joint ? r : r + i;
      const std::size_t col = joint ? 4 * i : 0;
      for (std::size_t t = 0; t < len; ++t) {
        const Tensor& v = preds[from + t].value();
        for (std::size_t d = 0; d < 4; ++d) f[(i * len + t) * 4 + d] = v.at(row, col + d);
      }
    }
    out.push_back(std::move(f));
    r += joint ? 1 : n;
  }
  return out;
}

}  // namespace

std::vector<Tensor> baseline_rollout(const BaselineModel& model,
                                     std::span<const ObservedSample* const> samples, int steps) {
  if (steps < 2) throw InvalidArgument("rollout needs at least two steps");
  const SeqBatch b = make_seq(model, samples, steps);
  ad::Tape tape;
  const BoundParams p(tape, model.params, false);
  const auto preds = rollout(p, model, b);
  return unpack(model, samples, preds, 0, preds.size());
}

std::vector<Tensor> predict_baseline(const BaselineModel& model,
                                     std::span<const ObservedSample* const> samples, int t_h,
                                     int t_f, int micro_batch, int threads) {
  if (t_h < 1 || t_f < 1) throw InvalidArgument("t_h and t_f must be positive");
  const std::size_t mb = static_cast<std::size_t>(std::max(1, micro_batch));
  const std::size_t n_chunks = (samples.size() + mb - 1) / mb;
  std::vector<Tensor> out(samples.size());
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * mb, hi = std::min(samples.size(), lo + mb);
    const auto part = samples.subspan(lo, hi - lo);
    const SeqBatch b = make_seq(model, part, t_h + t_f);
    ad::Tape tape;
    const BoundParams p(tape, model.params, false);
    const auto preds = rollout(p, model, b);
    // preds[k] is the prediction of step k + 1.
    auto f = unpack(model, part, preds, static_cast<std::size_t>(t_h) - 1,
                    static_cast<std::size_t>(t_h + t_f) - 1);
    for (std::size_t s = lo; s < hi; ++s) out[s] = std::move(f[s - lo]);
  });
  return out;
}

BaselineTrainResult train_baseline(BaselineKind kind, const ObservedDataset& data,
                                   const TrainConfig& cfg, int hidden) {
  cfg.validate();
  if (data.samples.empty()) throw DataError("training set is empty");
  const auto t_start = std::chrono::steady_clock::now();
  const int steps = data.t_h + data.t_f;
  BaselineTrainResult res;
  BaselineModel model =
      init_baseline(kind, data.samples.front().n_agents(), hidden, data.t_h, cfg.seed);

  std::vector<std::size_t> train_idx, val_idx;
  split_validation(data.samples.size(), cfg.val_fraction, cfg.seed, train_idx, val_idx);
  if (val_idx.empty()) val_idx = train_idx;

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t mb = static_cast<std::size_t>(cfg.micro_batch);
  const long steps_per_epoch = static_cast<long>((train_idx.size() + bs - 1) / bs);
  long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);

  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng shuffle_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order = train_idx;
  double best = std::numeric_limits<double>::infinity();
  BaselineModel best_model = model;

  std::vector<const ObservedSample*> val_ptrs;
  for (std::size_t i : val_idx) val_ptrs.push_back(&data.samples[i]);

  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    double last_lr = 0.0;
    for (std::size_t b0 = 0; b0 < order.size() && step < total; b0 += bs) {
      const std::size_t b1 = std::min(order.size(), b0 + bs);
      const std::size_t n_chunks = (b1 - b0 + mb - 1) / mb;
      // Count observed targets of the whole batch so the loss is a batch mean.
      double n_obs = 0.0;
      for (std::size_t k = b0; k < b1; ++k) {
        const ObservedSample& s = data.samples[order[k]];
        for (int i = 0; i < s.n_agents(); ++i) {
          for (int t = 1; t < steps; ++t) n_obs += s.observed(i, t) ? 4.0 : 0.0;
        }
      }
      n_obs = std::max(1.0, n_obs);
      std::vector<double> losses(n_chunks);
      std::vector<std::vector<Tensor>> grads(n_chunks);
      parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
        const std::size_t lo = b0 + c * mb, hi = std::min(b1, lo + mb);
        std::vector<const ObservedSample*> sp;
        for (std::size_t k = lo; k < hi; ++k) sp.push_back(&data.samples[order[k]]);
        const SeqBatch b = make_seq(model, sp, steps);
        ad::Tape tape;
        const BoundParams p(tape, model.params, true);
        const auto preds = rollout(p, model, b);
        ad::Var acc;
        for (std::size_t t = 0; t < preds.size(); ++t) {
          const ad::Var diff = ad::sub(preds[t], tape.constant(b.x[t + 1]));
          const ad::Var term = ad::sum(ad::mul(ad::square(diff), tape.constant(b.m[t + 1])));
          acc = acc.valid() ? ad::add(acc, term) : term;
        }
        const ad::Var loss = ad::scale(acc, 1.0 / n_obs);
        tape.backward(loss);
        losses[c] = loss.value()[0];
        for (const ad::Var& v : p.vars()) grads[c].push_back(tape.grad(v));
      });
      std::vector<Tensor> g = std::move(grads[0]);
      double batch_loss = losses[0];
      for (std::size_t c = 1; c < n_chunks; ++c) {
        batch_loss += losses[c];
        for (std::size_t k = 0; k < g.size(); ++k) {
          for (std::size_t i = 0; i < g[k].size(); ++i) g[k][i] += grads[c][k][i];
        }
      }
      if (!std::isfinite(batch_loss)) throw TrainingDiverged("non-finite baseline loss", step);
      clip_gradients(g, cfg.grad_clip_norm);
      const double lr = cosine_lr(step, total, cfg.lr);
      opt.step(model.params.values(), g, lr);
      res.step_loss.push_back(batch_loss);
      last_lr = lr;
      epoch_loss += batch_loss;
      ++epoch_batches;
      ++step;
    }
    const auto preds = predict_baseline(model, val_ptrs, data.t_h, data.t_f, cfg.micro_batch, cfg.threads);
    double val = 0.0;
    for (std::size_t k = 0; k < val_ptrs.size(); ++k) {
      val += sample_mse_at_step(preds[k], target_window(*val_ptrs[k], data.t_h, data.t_f), data.t_f);
    }
    val /= static_cast<double>(val_ptrs.size());
    if (!std::isfinite(val)) throw TrainingDiverged("non-finite baseline validation error", step);
    TrainLogRow row;
    row.epoch = epoch;
    row.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_batches));
    row.val_mse = val;
    row.lr = last_lr;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    res.log.push_back(row);
    if (val < best) {
      best = val;
      best_model = model;
    }
  }
  res.model = std::move(best_model);
  return res;
}

void save_baseline(const std::filesystem::path& dir, const BaselineModel& model,
                   const KeyValueFile& extra) {
  std::filesystem::create_directories(dir);
  KeyValueFile kv;
  kv.set("format_version", kCheckpointFormatVersion);
  kv.set("kind", "baseline_checkpoint");
  kv.set("baseline.kind", to_string(model.kind));
  kv.set("baseline.n_agents", model.n_agents);
  kv.set("baseline.hidden", model.hidden);
  kv.set("baseline.teacher_forcing", model.teacher_forcing);
  Fnv1a h;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const std::string file = "param_" + model.params.names()[i] + ".stemtens";
    write_tensor(dir / file, model.params[i]);
    h.update(file);
    h.update(file_fingerprint(dir / file));
  }
  kv.set("param_fingerprint", h.hex());
  for (const auto& [k, v] : extra.entries()) kv.set(k, v);
  kv.save(dir / "manifest");
}

BaselineModel load_baseline(const std::filesystem::path& dir, KeyValueFile* manifest) {
  if (!std::filesystem::exists(dir / "manifest")) {
    throw DataError("checkpoint not found: " + dir.string());
  }
  const KeyValueFile kv = KeyValueFile::load(dir / "manifest");
  if (kv.get_int_or("format_version", 0) != kCheckpointFormatVersion ||
      kv.get("kind").value_or("") != "baseline_checkpoint") {
    throw FingerprintError("not a baseline checkpoint manifest: " + dir.string());
  }
  BaselineModel m = init_baseline(parse_baseline_kind(kv.require("baseline.kind")),
                                  static_cast<int>(kv.get_int("baseline.n_agents")),
                                  static_cast<int>(kv.get_int("baseline.hidden")),
                                  static_cast<int>(kv.get_int("baseline.teacher_forcing")), 0);
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto path = dir / ("param_" + m.params.names()[i] + ".stemtens");
    if (!std::filesystem::exists(path)) throw FingerprintError("checkpoint lacks " + m.params.names()[i]);
    Tensor t = read_tensor(path);
    if (!t.same_shape(m.params[i])) {
      throw FingerprintError("parameter " + m.params.names()[i] + " has shape " + t.shape_string() +
                             ", expected " + m.params[i].shape_string());
    }
    m.params[i] = std::move(t);
  }
  if (manifest) *manifest = kv;
  return m;
}

}  // namespace stemfold
