#include "stemfold/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <numbers>
#include <thread>

#include "stemfold/errors.hpp"

namespace stemfold {

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0)) throw InvalidArgument("lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw InvalidArgument("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw InvalidArgument("adam eps must be positive");
  if (!(weight_decay >= 0.0)) throw InvalidArgument("weight decay must be >= 0");
  if (!(grad_clip_norm > 0.0)) throw InvalidArgument("gradient clip norm must be positive");
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw InvalidArgument("validation fraction must lie in [0, 1)");
  }
  if (micro_batch < 1) throw InvalidArgument("micro batch must be >= 1");
  if (threads < 1) throw InvalidArgument("threads must be >= 1");
  if (max_steps < 0) throw InvalidArgument("max steps must be >= 0");
}

void TrainConfig::write(KeyValueFile& kv) const {
  model.write(kv);
  kv.set("train.lr", lr);
  kv.set("train.beta1", beta1);
  kv.set("train.beta2", beta2);
  kv.set("train.adam_eps", adam_eps);
  kv.set("train.weight_decay", weight_decay);
  kv.set("train.grad_clip_norm", grad_clip_norm);
  kv.set("train.batch_size", batch_size);
  kv.set("train.epochs", epochs);
  kv.set("train.seed", seed);
  kv.set("train.val_fraction", val_fraction);
  kv.set("train.micro_batch", micro_batch);
  kv.set("train.threads", threads);
  kv.set("train.deterministic", deterministic);
  kv.set("train.max_steps", static_cast<std::int64_t>(max_steps));
}

TrainConfig TrainConfig::read(const KeyValueFile& kv) {
  TrainConfig c;
  c.model = ModelConfig::read(kv);
  c.lr = kv.get_double_or("train.lr", c.lr);
  c.beta1 = kv.get_double_or("train.beta1", c.beta1);
  c.beta2 = kv.get_double_or("train.beta2", c.beta2);
  c.adam_eps = kv.get_double_or("train.adam_eps", c.adam_eps);
  c.weight_decay = kv.get_double_or("train.weight_decay", c.weight_decay);
  c.grad_clip_norm = kv.get_double_or("train.grad_clip_norm", c.grad_clip_norm);
  c.batch_size = static_cast<int>(kv.get_int_or("train.batch_size", c.batch_size));
  c.epochs = static_cast<int>(kv.get_int_or("train.epochs", c.epochs));
  if (kv.contains("train.seed")) c.seed = kv.get_u64("train.seed");
  c.val_fraction = kv.get_double_or("train.val_fraction", c.val_fraction);
  c.micro_batch = static_cast<int>(kv.get_int_or("train.micro_batch", c.micro_batch));
  c.threads = static_cast<int>(kv.get_int_or("train.threads", c.threads));
  c.deterministic = kv.get_bool_or("train.deterministic", c.deterministic);
  c.max_steps = kv.get_int_or("train.max_steps", c.max_steps);
  c.validate();
  return c;
}

double cosine_lr(long step, long total_steps, double base_lr) {
  if (step < 0) throw InvalidArgument("cosine_lr: negative step");
  if (total_steps <= 0) throw InvalidArgument("cosine_lr: total steps must be positive");
  const long s = std::min(step, total_steps);
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(s) / static_cast<double>(total_steps)));
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw InvalidArgument("clip norm must be positive");
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingDiverged("non-finite gradient norm");
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return norm;
}

void AdamW::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw InvalidArgument("AdamW: params/grads mismatch");
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    auto g = grads[k].data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      p[i] -= lr * weight_decay_ * p[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void split_validation(std::size_t n, double val_fraction, std::uint64_t seed,
                      std::vector<std::size_t>& train, std::vector<std::size_t>& val) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  train.clear();
  val.clear();
  std::size_t n_val = n < 2 ? 0 : static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  n_val = std::min(n_val, n - std::min<std::size_t>(n, 1));
  Rng rng(seed ^ 0x5bd1e995ULL);
  rng.shuffle(idx);
  val.assign(idx.begin(), idx.begin() + static_cast<long>(n_val));
  train.assign(idx.begin() + static_cast<long>(n_val), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
}

Tensor target_window(const ObservedSample& sample, int t_h, int t_f) {
  if (t_h < 0 || t_f < 1 || t_h + t_f > sample.timesteps()) {
    throw InvalidArgument("forecast window outside the sample");
  }
  const std::size_t n = static_cast<std::size_t>(sample.n_agents());
  const std::size_t tf = static_cast<std::size_t>(t_f);
  Tensor out({n, tf, 4});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < tf; ++t) {
      const auto f = sample.feature(static_cast<int>(i), t_h + static_cast<int>(t));
      std::copy(f.begin(), f.end(), out.data().begin() + static_cast<long>((i * tf + t) * 4));
    }
  }
  return out;
}

double sample_mse_at_step(const Tensor& pred, const Tensor& target, int step) {
  if (pred.rank() != 3 || !pred.same_shape(target)) {
    throw InvalidArgument("prediction and target must both be N x T_f x D");
  }
  const std::size_t n = pred.dim(0), tf = pred.dim(1), d = pred.dim(2);
  if (step < 1 || static_cast<std::size_t>(step) > tf) {
    throw InvalidArgument("forecast step " + std::to_string(step) + " outside [1, " +
                          std::to_string(tf) + "]");
  }
  const std::size_t t = static_cast<std::size_t>(step) - 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double e = pred[(i * tf + t) * d + c] - target[(i * tf + t) * d + c];
      acc += e * e;
    }
  }
  return acc / static_cast<double>(n * d);
}

std::vector<Tensor> predict_forecasts(const ParamSet& params, const ModelConfig& cfg,
                                      std::span<const ObservedSample* const> samples, int t_h,
                                      int t_f, double obs_dt, int micro_batch, int threads) {
  const std::size_t mb = static_cast<std::size_t>(std::max(1, micro_batch));
  const std::size_t n_chunks = (samples.size() + mb - 1) / mb;
  std::vector<Tensor> out(samples.size());
  const GraphOptions gopt{cfg.max_gap, cfg.fully_connected};
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * mb, hi = std::min(samples.size(), lo + mb);
    std::vector<STGraph> graphs;
    graphs.reserve(hi - lo);
    std::vector<const STGraph*> gp;
    for (std::size_t s = lo; s < hi; ++s) {
      graphs.push_back(build_temporal_graph(*samples[s], 0, t_h, gopt));
    }
    for (const auto& g : graphs) gp.push_back(&g);
    const ModelBatch batch = make_batch(gp, samples.subspan(lo, hi - lo), cfg, t_h, t_f);
    ad::Tape tape;
    const BoundParams p(tape, params, false);
    ForwardOptions opt;
    opt.obs_dt = obs_dt;
    const ForwardResult r = run_model(p, batch, cfg, opt);
    const Tensor& pv = r.pred.value();
    const std::size_t na = batch.n_agents, tf = static_cast<std::size_t>(t_f);
    for (std::size_t s = lo; s < hi; ++s) {
      const std::size_t off = batch.sample_agent_offset[s - lo];
      const std::size_t n = batch.sample_agent_offset[s - lo + 1] - off;
      Tensor f({n, tf, 4});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < tf; ++t) {
          for (std::size_t d = 0; d < 4; ++d) f[(i * tf + t) * 4 + d] = pv[(t * na + off + i) * 4 + d];
        }
      }
      out[s] = std::move(f);
    }
  });
  return out;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t chunk_seed(std::uint64_t seed, long step, std::size_t chunk) {
  return splitmix(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(step)) ^ chunk);
}

double validation_mse(const ParamSet& params, const TrainConfig& cfg, const ObservedDataset& data,
                      const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  std::vector<const ObservedSample*> ptrs;
  for (std::size_t i : idx) ptrs.push_back(&data.samples[i]);
  const auto preds = predict_forecasts(params, cfg.model, ptrs, data.t_h, data.t_f, data.obs_dt,
                                       cfg.micro_batch, cfg.threads);
  double acc = 0.0;
  for (std::size_t k = 0; k < ptrs.size(); ++k) {
    acc += sample_mse_at_step(preds[k], target_window(*ptrs[k], data.t_h, data.t_f), data.t_f);
  }
  return acc / static_cast<double>(ptrs.size());
}

struct ChunkOutput {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

}  // namespace

TrainResult train(const ObservedDataset& data, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  return train(data, cfg, init_params(cfg.model, cfg.seed), on_epoch);
}

TrainResult train(const ObservedDataset& data, const TrainConfig& cfg, ParamSet init,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.samples.empty()) throw DataError("training set is empty");
  check_param_layout(init, cfg.model);
  const auto t_start = std::chrono::steady_clock::now();

  TrainResult res;
  split_validation(data.samples.size(), cfg.val_fraction, cfg.seed, res.train_indices,
                   res.val_indices);
  const auto& val_idx = res.val_indices.empty() ? res.train_indices : res.val_indices;

  // Encoder graphs depend only on the data, so build them once.
  const GraphOptions gopt{cfg.model.max_gap, cfg.model.fully_connected};
  std::vector<STGraph> graphs(data.samples.size());
  for (std::size_t i : res.train_indices) {
    graphs[i] = build_temporal_graph(data.samples[i], 0, data.t_h, gopt);
  }

  const std::size_t n_train = res.train_indices.size();
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const long steps_per_epoch = static_cast<long>((n_train + bs - 1) / bs);
  long total = static_cast<long>(cfg.epochs) * steps_per_epoch;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  res.total_steps = total;

  ParamSet params = std::move(init);
  AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng shuffle_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  std::vector<std::size_t> order = res.train_indices;
  res.best_val_mse = std::numeric_limits<double>::infinity();
  const std::size_t mb = static_cast<std::size_t>(cfg.micro_batch);

  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs && step < total; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_samples = 0;
    double last_lr = 0.0;
    for (std::size_t b0 = 0; b0 < n_train && step < total; b0 += bs) {
      const std::size_t b1 = std::min(n_train, b0 + bs);
      const std::size_t n_batch = b1 - b0;
      const std::size_t n_chunks = (n_batch + mb - 1) / mb;
      std::vector<ChunkOutput> chunks(n_chunks);
      parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
        const std::size_t lo = b0 + c * mb, hi = std::min(b1, lo + mb);
        std::vector<const STGraph*> gp;
        std::vector<const ObservedSample*> sp;
        for (std::size_t k = lo; k < hi; ++k) {
          gp.push_back(&graphs[order[k]]);
          sp.push_back(&data.samples[order[k]]);
        }
        const ModelBatch batch = make_batch(gp, sp, cfg.model, data.t_h, data.t_f);
        ad::Tape tape;
        const BoundParams p(tape, params, true);
        Rng rng(chunk_seed(cfg.seed, step, c));
        ForwardOptions fo;
        fo.training = true;
        fo.mean_latent = false;
        fo.rng = &rng;
        fo.obs_dt = data.obs_dt;
        const ForwardResult r = run_model(p, batch, cfg.model, fo);
        const ad::Var total_loss =
            elbo_loss(r.pred, batch.target, batch.target_mask, r.mu, r.sigma, cfg.model.obs_std);
        // Mean over the samples of the whole batch.
        const ad::Var loss = ad::scale(total_loss, 1.0 / static_cast<double>(n_batch));
        tape.backward(loss);
        chunks[c].loss = total_loss.value()[0];
        for (const ad::Var& v : p.vars()) chunks[c].grads.push_back(tape.grad(v));
      });

      // Fixed-order reduction keeps the result independent of thread count.
      std::vector<Tensor> grads = std::move(chunks[0].grads);
      double batch_loss = chunks[0].loss;
      for (std::size_t c = 1; c < n_chunks; ++c) {
        batch_loss += chunks[c].loss;
        for (std::size_t k = 0; k < grads.size(); ++k) {
          auto dst = grads[k].data();
          auto src = chunks[c].grads[k].data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      if (!std::isfinite(batch_loss)) throw TrainingDiverged("non-finite loss", step);
      double norm;
      try {
        norm = clip_gradients(grads, cfg.grad_clip_norm);
      } catch (const TrainingDiverged&) {
        throw TrainingDiverged("non-finite gradient", step);
      }
      res.max_clipped_norm = std::max(res.max_clipped_norm, std::min(norm, cfg.grad_clip_norm));
      const double lr = cosine_lr(step, total, cfg.lr);
      opt.step(params.values(), grads, lr);
      res.step_loss.push_back(batch_loss / static_cast<double>(n_batch));
      res.step_lr.push_back(lr);
      last_lr = lr;
      epoch_loss += batch_loss;
      epoch_samples += n_batch;
      ++step;
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(1, epoch_samples));
    row.val_mse = validation_mse(params, cfg, data, val_idx);
    row.lr = last_lr;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (!std::isfinite(row.val_mse)) throw TrainingDiverged("non-finite validation error", step);
    if (row.val_mse < res.best_val_mse) {
      res.best_val_mse = row.val_mse;
      res.best_epoch = epoch;
      res.best_params = params;
    }
    res.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  res.params = std::move(params);
  return res;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_mse,lr,wall_seconds\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_mse) << ','
        << format_double(r.lr) << ',' << format_double(r.wall_seconds) << '\n';
  }
}

}  // namespace stemfold
