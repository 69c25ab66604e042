#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "backbones.hpp"
#include "episodes.hpp"
#include "mapper.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace metamap {

struct DivergenceError : std::runtime_error {
  int64_t step;
  int64_t task_index;
  DivergenceError(int64_t step_, int64_t task_index_ = -1)
      : std::runtime_error("divergence: non-finite loss at inner step " + std::to_string(step_) +
                           (task_index_ >= 0 ? " (task " + std::to_string(task_index_) + ")" : "")),
        step(step_),
        task_index(task_index_) {}
};

// Bi-level optimization hyperparameters; defaults follow the reference
// configuration (five inner steps at 0.01, AdamW outer loop at 0.001, four
// tasks per meta-batch).
struct MetaConfig {
  int64_t inner_steps = 5;
  double inner_lr = 0.01;
  double meta_lr = 0.001;
  int64_t meta_batch_tasks = 4;
  bool second_order = true;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    // inner_lr = 0 is allowed: it collapses the bi-level structure and the
    // collapse checks rely on it
    if (inner_lr < 0 || meta_lr <= 0)
      throw ConfigError("meta config: learning rates must be non-negative (meta_lr positive)");
    if (inner_steps < 0) throw ConfigError("meta config: inner_steps must be >= 0");
    if (meta_batch_tasks < 1) throw ConfigError("meta config: meta_batch_tasks must be >= 1");
  }
};

// Frozen backbones plus the mapper wiring; theta itself lives in a
// ParameterSet so task-specific copies stay functional.
template <class Real>
struct ModelT {
  BackboneConfig backbone;
  MapperConfig mapper;
  VisionEncoderT<Real> encoder;
  LanguageModelT<Real> lm;
};

template <class Real>
ModelT<Real> build_model(const BackboneConfig& bb, const MapperConfig& mc, int64_t image_h,
                         int64_t image_w, int64_t image_c, int64_t vocab_size,
                         uint64_t backbone_seed) {
  ModelT<Real> m;
  m.backbone = bb;
  m.mapper = mc;
  m.encoder = build_vision_encoder<Real>(bb, image_h, image_w, image_c, backbone_seed);
  m.lm = build_language_model<Real>(bb, vocab_size, backbone_seed);
  return m;
}

// Full parameter partition: trainable theta (the mapper) and frozen phi, psi,
// omega (encoder and language model).
template <class Real>
ParameterSetT<Real> init_params(const ModelT<Real>& model, uint64_t theta_seed) {
  auto p = init_mapper_params<Real>(model.mapper, model.backbone.d_v, model.backbone.d_e,
                                    theta_seed);
  for (auto& [name, t] : model.encoder.named_parameters()) p.add_frozen(name, t);
  for (auto& [name, t] : model.lm.named_parameters()) p.add_frozen(name, t);
  return p;
}

struct TaskSample {
  ImageT<double> image;
  TokenSequence input_text;   // conditioned on, never scored
  TokenSequence target_text;  // scored (teacher forcing), plus the closing EOS
  int64_t sample_id = -1;
};

inline std::vector<TaskSample> support_samples(const Episode& ep) {
  std::vector<TaskSample> out;
  out.reserve(ep.support.size());
  for (const auto& s : ep.support) out.push_back({s.image, {}, s.caption, s.sample_id});
  return out;
}

inline std::vector<TaskSample> query_samples(const Episode& ep) {
  std::vector<TaskSample> out;
  out.reserve(ep.query.size());
  for (const auto& q : ep.query) out.push_back({q.image, q.input_text, q.target_text, q.sample_id});
  return out;
}

template <class Real>
ImageT<Real> to_image(const ImageT<double>& img) {
  ImageT<Real> out;
  out.h = img.h;
  out.w = img.w;
  out.c = img.c;
  out.pix.assign(img.pix.begin(), img.pix.end());
  return out;
}

// Teacher-forced per-sample loss: encode the image, map it to the visual
// prefix, run [prefix; BOS, input, target] through the frozen decoder, and
// score categorical cross entropy on the target positions plus EOS.
template <class Real>
TensorT<Real> sample_loss(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                          const TaskSample& sample) {
  auto features = encode_image(model.encoder, to_image<Real>(sample.image));
  auto prefix = map_to_prefix(model.mapper, params, features);
  const int64_t l = prefix.dim(0);

  TokenSequence full;
  full.push_back(Vocabulary::kBos);
  full.insert(full.end(), sample.input_text.begin(), sample.input_text.end());
  full.insert(full.end(), sample.target_text.begin(), sample.target_text.end());
  full.push_back(Vocabulary::kEos);
  const TokenSequence fed(full.begin(), full.end() - 1);

  auto logits = forward_logits(model.lm, prefix, embed_tokens(model.lm, fed));
  const int64_t positions = logits.dim(0);
  const int64_t first_scored = 1 + static_cast<int64_t>(sample.input_text.size());
  std::vector<int64_t> targets(static_cast<size_t>(positions), Vocabulary::kPad);
  std::vector<bool> mask(static_cast<size_t>(positions), false);
  for (int64_t p = 0; p < positions; ++p) {
    const int64_t next = p - l + 1;  // index into `full` predicted at position p
    if (next < 1 || next >= static_cast<int64_t>(full.size())) continue;
    targets[static_cast<size_t>(p)] = full[static_cast<size_t>(next)];
    mask[static_cast<size_t>(p)] = next >= first_scored;
  }
  return cross_entropy(logits, targets, mask);
}

template <class Real>
TensorT<Real> task_loss(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                        const std::vector<TaskSample>& samples);

namespace detail {

// One packed forward over a chunk of samples: feature rows, prefix blocks and
// decoder sequences are stacked and isolated by block masks, which matches
// the per-sample pipeline bitwise while building far fewer graph nodes.
template <class Real>
TensorT<Real> packed_chunk_loss(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                                const std::vector<TaskSample>& samples) {
  const auto count = static_cast<int64_t>(samples.size());
  const int64_t l = model.mapper.prefix_len;

  std::vector<ImageT<Real>> images;
  images.reserve(samples.size());
  for (const auto& s : samples) images.push_back(to_image<Real>(s.image));
  auto prefixes = map_to_prefix_packed(model.mapper, params,
                                       encode_images_packed(model.encoder, images), count);

  // token streams: full = BOS + input + target + EOS, fed = full minus last
  std::vector<TokenSequence> fulls(samples.size());
  TokenSequence all_fed;
  for (size_t i = 0; i < samples.size(); ++i) {
    auto& full = fulls[i];
    full.push_back(Vocabulary::kBos);
    full.insert(full.end(), samples[i].input_text.begin(), samples[i].input_text.end());
    full.insert(full.end(), samples[i].target_text.begin(), samples[i].target_text.end());
    full.push_back(Vocabulary::kEos);
    all_fed.insert(all_fed.end(), full.begin(), full.end() - 1);
  }
  auto all_embeds = embed_tokens(model.lm, all_fed);

  std::vector<TensorT<Real>> rows;
  rows.reserve(2 * samples.size());
  PackedSpans spans;
  std::vector<int64_t> positions;
  int64_t embed_off = 0, row_off = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto fed_len = static_cast<int64_t>(fulls[i].size()) - 1;
    rows.push_back(slice(prefixes, 0, static_cast<int64_t>(i) * l, l));
    rows.push_back(slice(all_embeds, 0, embed_off, fed_len));
    embed_off += fed_len;
    spans.start.push_back(row_off);
    spans.len.push_back(l + fed_len);
    for (int64_t p = 0; p < l + fed_len; ++p) positions.push_back(p);
    row_off += l + fed_len;
  }
  auto logits = forward_logits_packed(model.lm, concat(rows, 0), positions, spans);

  // weights fold the per-sample position mean and the over-sample mean into
  // one masked negative log likelihood
  const int64_t V = logits.dim(1);
  std::vector<Real> w(static_cast<size_t>(logits.dim(0) * V), Real(0));
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& full = fulls[i];
    const int64_t first_scored = 1 + static_cast<int64_t>(samples[i].input_text.size());
    const int64_t scored = static_cast<int64_t>(full.size()) - first_scored;
    if (scored <= 0) throw ContractError("task_loss: sample with no scored positions");
    const Real weight = Real(1) / (static_cast<Real>(scored) * static_cast<Real>(count));
    for (int64_t p = 0; p < spans.len[i]; ++p) {
      const int64_t next = p - l + 1;
      if (next < first_scored || next >= static_cast<int64_t>(full.size())) continue;
      const int64_t target = full[static_cast<size_t>(next)];
      if (target < 0 || target >= V)
        throw IndexError("task_loss: target token " + std::to_string(target) +
                         " outside vocabulary of size " + std::to_string(V));
      w[static_cast<size_t>((spans.start[i] + p) * V + target)] = weight;
    }
  }
  auto weights = TensorT<Real>::from_data(logits.shape(), std::move(w));
  return neg(sum_all(mul(log_softmax(logits, 1), weights)));
}

}  // namespace detail

// Mean task loss over the given samples (order-free). Large sample lists are
// processed in fixed-size packed chunks (attention inside a chunk is
// quadratic in its total rows) and combined as a sample-count weighted mean,
// which equals the overall mean.
template <class Real>
TensorT<Real> task_loss(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                        const std::vector<TaskSample>& samples) {
  if (samples.empty()) throw ContractError("task_loss: empty sample list");
  constexpr size_t kChunk = 8;
  if (samples.size() <= kChunk + 2) return detail::packed_chunk_loss(model, params, samples);
  TensorT<Real> total;
  for (size_t off = 0; off < samples.size(); off += kChunk) {
    const size_t n = std::min(kChunk, samples.size() - off);
    std::vector<TaskSample> chunk(samples.begin() + static_cast<int64_t>(off),
                                  samples.begin() + static_cast<int64_t>(off + n));
    auto part = scale(detail::packed_chunk_loss(model, params, chunk),
                      static_cast<Real>(n) / static_cast<Real>(samples.size()));
    total = total.defined() ? add(total, part) : part;
  }
  return total;
}

template <class Real>
using LossFn = std::function<TensorT<Real>(const ParameterSetT<Real>&)>;

// Inner-loop adaptation: `inner_steps` full-batch gradient steps
// theta <- theta - alpha * grad(loss). With track_for_meta the update chain is
// recorded (create_graph), so the result is differentiable w.r.t. the
// original theta; otherwise the result is a detached set of fresh leaves.
// Returns a functional copy; the original set is never mutated.
template <class Real>
ParameterSetT<Real> inner_adapt(const ParameterSetT<Real>& params, const LossFn<Real>& loss_fn,
                                const MetaConfig& cfg, bool track_for_meta) {
  cfg.validate();
  ParameterSetT<Real> cur = track_for_meta ? params : params.clone();
  for (int64_t step = 0; step < cfg.inner_steps; ++step) {
    auto loss = loss_fn(cur);
    if (!std::isfinite(static_cast<double>(loss.item()))) throw DivergenceError(step);
    auto gs = grad(loss, cur.trainable_tensors(), /*create_graph=*/track_for_meta);
    std::vector<TensorT<Real>> updated;
    updated.reserve(gs.size());
    if (track_for_meta) {
      for (size_t i = 0; i < gs.size(); ++i)
        updated.push_back(sub(cur.trainable[i].second, scale(gs[i], Real(cfg.inner_lr))));
    } else {
      NoGradGuard ng;
      for (size_t i = 0; i < gs.size(); ++i)
        updated.push_back(
            sub(cur.trainable[i].second, scale(gs[i], Real(cfg.inner_lr))).detach(true));
    }
    cur = cur.with_trainable(std::move(updated));
  }
  return cur;
}

// Support-set convenience overload.
template <class Real>
ParameterSetT<Real> inner_adapt(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                                const std::vector<TaskSample>& support, const MetaConfig& cfg,
                                bool track_for_meta) {
  if (support.empty()) throw ContractError("inner_adapt: empty support set");
  LossFn<Real> fn = [&](const ParameterSetT<Real>& p) { return task_loss(model, p, support); };
  return inner_adapt(params, fn, cfg, track_for_meta);
}

struct MetaMetrics {
  double support_loss_pre = 0;   // mean over tasks, before adaptation
  double support_loss_post = 0;  // mean over tasks, after adaptation
  double query_loss = 0;         // mean over tasks
};

// Summed meta-gradient over the task batch, plus the per-batch metrics.
// Second order differentiates through the inner updates; first order takes
// the query gradient at theta'_i and applies it to theta.
//
// Tasks are independent given theta, so they run on worker threads (clones
// only; theta is read-only here). The cross-task gradient sum is reduced in
// task-index order afterwards, so results do not depend on scheduling.
template <class Real>
std::pair<std::vector<TensorT<Real>>, MetaMetrics> meta_gradients(
    const ModelT<Real>& model, const ParameterSetT<Real>& params,
    const std::vector<Episode>& task_batch, const MetaConfig& cfg) {
  if (task_batch.empty()) throw ContractError("meta_gradients: empty task batch");
  cfg.validate();

  struct TaskResult {
    std::vector<TensorT<Real>> grads;
    double pre = 0, post = 0, query = 0;
    std::optional<DivergenceError> error;
  };
  std::vector<TaskResult> results(task_batch.size());

  auto run_task = [&](size_t ti) {
    TaskResult& r = results[ti];
    try {
      const auto& ep = task_batch[ti];
      const auto support = support_samples(ep);
      const auto query = query_samples(ep);
      if (support.empty() || query.empty())
        throw ContractError("meta_gradients: episode " + std::to_string(ti) +
                            " has an empty support or query set");
      {
        NoGradGuard ng;
        r.pre = static_cast<double>(task_loss(model, params, support).item());
      }
      ParameterSetT<Real> adapted;
      try {
        adapted = inner_adapt(model, params, support, cfg, /*track_for_meta=*/cfg.second_order);
      } catch (const DivergenceError& e) {
        throw DivergenceError(e.step, static_cast<int64_t>(ti));
      }
      {
        NoGradGuard ng;
        r.post = static_cast<double>(task_loss(model, adapted, support).item());
      }
      auto ql = task_loss(model, adapted, query);
      r.query = static_cast<double>(ql.item());
      if (!std::isfinite(r.query))
        throw DivergenceError(cfg.inner_steps, static_cast<int64_t>(ti));
      r.grads = cfg.second_order ? grad(ql, params.trainable_tensors(), false)
                                 : grad(ql, adapted.trainable_tensors(), false);
    } catch (const DivergenceError& e) {
      r.error = e;
    }
  };

  const size_t workers =
      std::min<size_t>(task_batch.size(),
                       std::max<size_t>(1, std::thread::hardware_concurrency()));
  if (workers <= 1 || task_batch.size() == 1) {
    for (size_t ti = 0; ti < task_batch.size(); ++ti) run_task(ti);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (size_t ti = next.fetch_add(1); ti < task_batch.size(); ti = next.fetch_add(1))
          run_task(ti);
      });
    for (auto& t : pool) t.join();
  }

  MetaMetrics metrics;
  for (const auto& r : results)  // first failing task index wins, deterministically
    if (r.error) throw *r.error;

  std::vector<TensorT<Real>> grads;
  for (size_t ti = 0; ti < results.size(); ++ti) {
    metrics.support_loss_pre += results[ti].pre;
    metrics.support_loss_post += results[ti].post;
    metrics.query_loss += results[ti].query;
    if (grads.empty()) {
      grads = std::move(results[ti].grads);
    } else {
      NoGradGuard ng;
      for (size_t i = 0; i < grads.size(); ++i)
        grads[i] = add(grads[i], results[ti].grads[i]);
    }
  }
  const double nt = static_cast<double>(task_batch.size());
  metrics.support_loss_pre /= nt;
  metrics.support_loss_post /= nt;
  metrics.query_loss /= nt;
  return {std::move(grads), metrics};
}

// Decoupled-weight-decay Adam over the trainable partition. Moments are kept
// in double regardless of Real.
template <class Real>
class AdamWT {
 public:
  explicit AdamWT(const MetaConfig& cfg) : cfg_(cfg) {}

  void step(ParameterSetT<Real>& params, const std::vector<TensorT<Real>>& grads) {
    if (grads.size() != params.trainable.size())
      throw ContractError("optimizer: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(t_));
    for (size_t i = 0; i < grads.size(); ++i) {
      const auto& name = params.trainable[i].first;
      auto& data = params.trainable[i].second.mutable_values();
      const auto& g = grads[i].values();
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(data.size(), 0.0);
        v.assign(data.size(), 0.0);
      }
      for (size_t j = 0; j < data.size(); ++j) {
        const double gj = static_cast<double>(g[j]);
        m[j] = cfg_.adam_beta1 * m[j] + (1.0 - cfg_.adam_beta1) * gj;
        v[j] = cfg_.adam_beta2 * v[j] + (1.0 - cfg_.adam_beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        double p = static_cast<double>(data[j]);
        p -= cfg_.meta_lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * p);
        data[j] = static_cast<Real>(p);
      }
    }
  }

  int64_t steps_taken() const { return t_; }
  const std::map<std::string, std::vector<double>>& moment1() const { return m_; }
  const std::map<std::string, std::vector<double>>& moment2() const { return v_; }
  void restore(int64_t t, std::map<std::string, std::vector<double>> m,
               std::map<std::string, std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  MetaConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// One optimizer step on theta from a batch of episodes. Only the trainable
// partition changes; frozen checksums are the caller's assertion.
template <class Real>
MetaMetrics meta_update(const ModelT<Real>& model, ParameterSetT<Real>& params,
                        AdamWT<Real>& opt, const std::vector<Episode>& task_batch,
                        const MetaConfig& cfg) {
  auto [grads, metrics] = meta_gradients(model, params, task_batch, cfg);
  opt.step(params, grads);
  return metrics;
}

struct TrainRecord {
  int64_t meta_step = 0;
  double support_loss_pre = 0;
  double support_loss_post = 0;
  double query_loss = 0;
  double wall_time_s = 0;
};

// Episodic meta-training to a fixed meta-update budget (no plateau stop; a
// fixed budget keeps runs reproducible). `on_step` fires after every update
// for checkpointing.
template <class Real>
std::vector<TrainRecord> meta_train(
    const ModelT<Real>& model, ParameterSetT<Real>& params, AdamWT<Real>& opt,
    const EpisodeStream& stream, const MetaConfig& cfg, int64_t max_meta_updates,
    int64_t start_step = 0,
    const std::function<void(int64_t)>& on_step = nullptr) {
  cfg.validate();
  std::vector<TrainRecord> log;
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = start_step; step < max_meta_updates; ++step) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<size_t>(cfg.meta_batch_tasks));
    for (int64_t i = 0; i < cfg.meta_batch_tasks; ++i)
      batch.push_back(stream.at(step * cfg.meta_batch_tasks + i));
    const auto metrics = meta_update(model, params, opt, batch, cfg);
    TrainRecord rec;
    rec.meta_step = step + 1;
    rec.support_loss_pre = metrics.support_loss_pre;
    rec.support_loss_post = metrics.support_loss_post;
    rec.query_loss = metrics.query_loss;
    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
    if (on_step) on_step(step + 1);
  }
  return log;
}

// Standard mini-batched training on the flat sample pool: no inner loop, same
// optimizer. Batch composition at step s depends only on (seed, s), so runs
// are resumable mid-stream.
template <class Real>
std::vector<TrainRecord> nonepisodic_train(
    const ModelT<Real>& model, ParameterSetT<Real>& params, AdamWT<Real>& opt,
    const std::vector<TaskSample>& pool, const MetaConfig& cfg, int64_t steps,
    int64_t batch_size, uint64_t seed, int64_t start_step = 0,
    const std::function<void(int64_t)>& on_step = nullptr) {
  if (pool.empty()) throw ContractError("nonepisodic_train: empty sample pool");
  if (batch_size < 1) throw ConfigError("nonepisodic_train: batch size must be >= 1");
  batch_size = std::min<int64_t>(batch_size, static_cast<int64_t>(pool.size()));
  std::vector<TrainRecord> log;
  const auto t0 = std::chrono::steady_clock::now();
  for (int64_t step = start_step; step < steps; ++step) {
    auto rng = make_engine(derive_seed(seed, static_cast<uint64_t>(step)));
    std::vector<int64_t> idx(pool.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<TaskSample> batch;
    batch.reserve(static_cast<size_t>(batch_size));
    for (int64_t i = 0; i < batch_size; ++i)
      batch.push_back(pool[static_cast<size_t>(idx[static_cast<size_t>(i)])]);

    auto loss = task_loss(model, params, batch);
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw DivergenceError(step);
    auto gs = grad(loss, params.trainable_tensors(), false);
    opt.step(params, gs);

    TrainRecord rec;
    rec.meta_step = step + 1;
    rec.support_loss_pre = lv;
    rec.support_loss_post = lv;
    rec.query_loss = lv;
    rec.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
    if (on_step) on_step(step + 1);
  }
  return log;
}

}  // namespace metamap
