#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <thread>
#include <string>
#include <vector>

#include "episodes.hpp"
#include "meta.hpp"

namespace metamap {

enum class Strategy { kGreedy, kTopK, kTopP };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kTopK: return "top_k";
    default: return "top_p";
  }
}
inline Strategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "top_k") return Strategy::kTopK;
  if (s == "top_p") return Strategy::kTopP;
  throw ConfigError("generation: unknown strategy '" + s + "'");
}

struct GenerationConfig {
  Strategy strategy = Strategy::kGreedy;
  int64_t top_k = 5;
  double top_p = 0.9;
  double temperature = 1.0;
  int64_t max_new_tokens = 6;

  void validate() const {
    if (top_k < 1) throw ConfigError("generation: top_k must be >= 1");
    if (top_p <= 0 || top_p > 1) throw ConfigError("generation: top_p must lie in (0, 1]");
    if (temperature <= 0) throw ConfigError("generation: temperature must be positive");
    if (max_new_tokens < 0) throw ConfigError("generation: max_new_tokens must be >= 0");
  }
};

namespace detail {

// Smallest prefix of probability-sorted tokens whose mass reaches p,
// renormalized. Ties broken by token id for determinism. The epsilon absorbs
// accumulation rounding when the cumulative mass lands exactly on p.
inline std::vector<std::pair<int64_t, double>> nucleus_filter(const std::vector<double>& probs,
                                                              double p) {
  std::vector<int64_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t a, int64_t b) { return probs[a] > probs[b]; });
  std::vector<std::pair<int64_t, double>> kept;
  double mass = 0;
  for (int64_t id : order) {
    kept.emplace_back(id, probs[static_cast<size_t>(id)]);
    mass += probs[static_cast<size_t>(id)];
    if (mass >= p - 1e-12) break;
  }
  for (auto& [id, pr] : kept) pr /= mass;
  return kept;
}

inline int64_t argmax_first(const std::vector<double>& v) {
  int64_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

inline std::vector<double> softmax_vec(const std::vector<double>& logits, double temperature) {
  std::vector<double> p(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double total = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((logits[i] - mx) / temperature);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

inline int64_t sample_from(const std::vector<std::pair<int64_t, double>>& dist,
                           std::mt19937_64& rng) {
  const double u = uniform_real(rng, 0.0, 1.0);
  double cum = 0;
  for (const auto& [id, pr] : dist) {
    cum += pr;
    if (u < cum) return id;
  }
  return dist.back().first;
}

// One sampling decision from raw logits.
inline int64_t pick_token(const std::vector<double>& logits, const GenerationConfig& gen,
                          std::mt19937_64& rng) {
  if (gen.strategy == Strategy::kGreedy) return argmax_first(logits);
  if (gen.strategy == Strategy::kTopK) {
    std::vector<int64_t> order(logits.size());
    std::iota(order.begin(), order.end(), 0);
    const auto k = std::min<int64_t>(gen.top_k, static_cast<int64_t>(logits.size()));
    std::stable_sort(order.begin(), order.end(),
                     [&](int64_t a, int64_t b) { return logits[a] > logits[b]; });
    order.resize(static_cast<size_t>(k));
    std::vector<double> kept_logits;
    for (int64_t id : order) kept_logits.push_back(logits[static_cast<size_t>(id)]);
    const auto probs = softmax_vec(kept_logits, gen.temperature);
    std::vector<std::pair<int64_t, double>> dist;
    for (size_t i = 0; i < order.size(); ++i) dist.emplace_back(order[i], probs[i]);
    return sample_from(dist, rng);
  }
  const auto probs = softmax_vec(logits, gen.temperature);
  return sample_from(nucleus_filter(probs, gen.top_p), rng);
}

}  // namespace detail

// Open-ended autoregressive generation conditioned on the visual prefix:
// sample from the filtered, temperature-scaled next-token distribution until
// EOS or max_new_tokens. Runs gradient-free.
template <class Real>
TokenSequence generate(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                       const ImageT<double>& image, const TokenSequence& input_text,
                       const GenerationConfig& gen, std::mt19937_64& rng) {
  gen.validate();
  NoGradGuard ng;
  auto features = encode_image(model.encoder, to_image<Real>(image));
  auto prefix = map_to_prefix(model.mapper, params, features);
  TokenSequence tokens;
  tokens.push_back(Vocabulary::kBos);
  tokens.insert(tokens.end(), input_text.begin(), input_text.end());

  TokenSequence out;
  for (int64_t step = 0; step < gen.max_new_tokens; ++step) {
    auto logits = forward_logits(model.lm, prefix, embed_tokens(model.lm, tokens));
    const int64_t last = logits.dim(0) - 1;
    std::vector<double> row(static_cast<size_t>(logits.dim(1)));
    for (int64_t v = 0; v < logits.dim(1); ++v) row[static_cast<size_t>(v)] = logits.at2(last, v);
    const int64_t next = detail::pick_token(row, gen, rng);
    if (next == Vocabulary::kEos) break;
    out.push_back(next);
    tokens.push_back(next);
    if (static_cast<int64_t>(tokens.size()) + prefix.dim(0) >= model.lm.cfg.context) break;
  }
  return out;
}

struct GenerationRecord {
  int64_t episode = 0;
  int64_t query_index = 0;
  TokenSequence generated;
  int64_t answer_token = 0;
  bool correct = false;
};

// Per-episode exact-match accuracies plus raw generations for audit. The
// aggregate is always recomputed from the per-episode values.
struct EvalReport {
  std::string label = "standard";
  int64_t ways = 0, shots = 0, queries_per_way = 0, repeats = 0;
  int64_t adaptation_steps = 0, episodes = 0;
  std::string task_kind, scenario, strategy;
  double inner_lr = 0;
  uint64_t eval_seed = 0;
  double chance_closed_set = 0;  // 1/N reference line
  double chance_open_ended = 0;  // 1/vocab reference line
  std::vector<double> per_episode_accuracy;
  std::vector<GenerationRecord> generations;

  double mean_accuracy() const {
    if (per_episode_accuracy.empty()) return 0;
    double total = 0;
    for (double a : per_episode_accuracy) total += a;
    return total / static_cast<double>(per_episode_accuracy.size());
  }
  double stderr_accuracy() const {
    const size_t n = per_episode_accuracy.size();
    if (n < 2) return 0;
    const double mean = mean_accuracy();
    double var = 0;
    for (double a : per_episode_accuracy) var += (a - mean) * (a - mean);
    var /= static_cast<double>(n - 1);
    return std::sqrt(var / static_cast<double>(n));
  }
};

template <class Real>
struct MetaTestOptions {
  int64_t adaptation_steps = 5;
  int64_t episodes = 200;
  uint64_t eval_seed = 3;
  bool fixed_induction = false;  // prepend "answer with <a> or <b>" to queries
  std::function<void(const std::vector<int64_t>&)> adapt_probe;  // support ids per episode
  std::function<TokenSequence(const ParameterSetT<Real>&, const QueryItem&)> generate_override;
};

inline TokenSequence induction_tokens(const DatasetD& ds, const std::vector<int64_t>& cats) {
  TokenSequence out = ds.vocab.encode(grammar::induction_template());
  for (size_t i = 0; i < cats.size(); ++i) {
    if (i) out.push_back(ds.vocab.id("or"));
    out.push_back(ds.categories[static_cast<size_t>(cats[i])].name_token);
  }
  return out;
}

// Meta-test protocol: for each episode, clone theta, adapt on the support set
// only, generate open-ended answers for every query and score exact token
// match of the single ground-truth answer word.
template <class Real>
EvalReport meta_test(const ModelT<Real>& model, const ParameterSetT<Real>& params,
                     const DatasetD& ds, Partition part, const EpisodeConfig& ec,
                     const MetaConfig& mc, const GenerationConfig& gen,
                     const MetaTestOptions<Real>& opt) {
  gen.validate();
  EvalReport report;
  report.ways = ec.ways;
  report.shots = ec.shots;
  report.queries_per_way = ec.queries_per_way;
  report.repeats = ec.repeats;
  report.adaptation_steps = opt.adaptation_steps;
  report.episodes = opt.episodes;
  report.task_kind = to_string(ec.task_kind);
  report.scenario = to_string(ds.cfg.scenario);
  report.strategy = to_string(gen.strategy);
  report.inner_lr = mc.inner_lr;
  report.eval_seed = opt.eval_seed;
  report.chance_closed_set = 1.0 / static_cast<double>(ec.ways);
  report.chance_open_ended = 1.0 / static_cast<double>(ds.vocab.size());
  if (opt.episodes == 0) return report;

  EpisodeStream stream{&ds, part, ec, opt.eval_seed};
  MetaConfig adapt_cfg = mc;
  adapt_cfg.inner_steps = opt.adaptation_steps;

  struct EpisodeResult {
    double accuracy = 0;
    std::vector<GenerationRecord> generations;
  };
  std::vector<EpisodeResult> results(static_cast<size_t>(opt.episodes));

  auto run_episode = [&](int64_t e) {
    Episode ep = stream.at(e);
    auto support = support_samples(ep);
    if (opt.adapt_probe) {
      std::vector<int64_t> ids;
      for (const auto& s : support) ids.push_back(s.sample_id);
      opt.adapt_probe(ids);
    }
    ParameterSetT<Real> adapted =
        opt.adaptation_steps > 0
            ? inner_adapt(model, params, support, adapt_cfg, /*track_for_meta=*/false)
            : params.clone();

    auto gen_rng =
        make_engine(derive_seed(opt.eval_seed, 0x9e0000000ULL + static_cast<uint64_t>(e)));
    EpisodeResult& res = results[static_cast<size_t>(e)];
    int64_t correct = 0;
    for (size_t qi = 0; qi < ep.query.size(); ++qi) {
      QueryItem q = ep.query[qi];
      if (opt.fixed_induction) {
        TokenSequence with_ind = induction_tokens(ds, ep.category_ids);
        with_ind.insert(with_ind.end(), q.input_text.begin(), q.input_text.end());
        q.input_text = std::move(with_ind);
      }
      TokenSequence generated =
          opt.generate_override
              ? opt.generate_override(adapted, q)
              : generate(model, adapted, q.image, q.input_text, gen, gen_rng);
      const bool ok =
          std::find(generated.begin(), generated.end(), q.answer_token) != generated.end();
      correct += ok;
      GenerationRecord rec;
      rec.episode = e;
      rec.query_index = static_cast<int64_t>(qi);
      rec.generated = generated;
      rec.answer_token = q.answer_token;
      rec.correct = ok;
      res.generations.push_back(std::move(rec));
    }
    res.accuracy = static_cast<double>(correct) / static_cast<double>(ep.query.size());
  };

  // Episodes are independent and run on cloned parameters, so they spread
  // over worker threads; aggregation below is in fixed episode order. Test
  // hooks run everything sequentially instead.
  const bool has_hooks = static_cast<bool>(opt.adapt_probe) ||
                         static_cast<bool>(opt.generate_override);
  const size_t workers =
      has_hooks ? 1
                : std::min<size_t>(static_cast<size_t>(opt.episodes),
                                   std::max<size_t>(1, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (int64_t e = 0; e < opt.episodes; ++e) run_episode(e);
  } else {
    std::atomic<int64_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (int64_t e = next.fetch_add(1); e < opt.episodes; e = next.fetch_add(1))
          run_episode(e);
      });
    for (auto& t : pool) t.join();
  }

  for (auto& res : results) {
    report.per_episode_accuracy.push_back(res.accuracy);
    for (auto& g : res.generations) report.generations.push_back(std::move(g));
  }
  return report;
}

enum class AblationKind {
  kEraseMetaKnowledge,
  kMlpMapper,
  kFixedTaskInduction,
  kStepSweep,
  kRepeatsVsShots,
  kEpisodicVsNonEpisodic,
  kDomainShift,
};

inline AblationKind ablation_from_string(const std::string& s) {
  if (s == "erase_meta_knowledge") return AblationKind::kEraseMetaKnowledge;
  if (s == "mlp_mapper") return AblationKind::kMlpMapper;
  if (s == "fixed_task_induction") return AblationKind::kFixedTaskInduction;
  if (s == "step_sweep") return AblationKind::kStepSweep;
  if (s == "repeats_vs_shots") return AblationKind::kRepeatsVsShots;
  if (s == "episodic_vs_nonepisodic") return AblationKind::kEpisodicVsNonEpisodic;
  if (s == "domain_shift") return AblationKind::kDomainShift;
  throw ConfigError("ablation: unknown suite '" + s + "'");
}

inline std::string to_string(AblationKind k) {
  switch (k) {
    case AblationKind::kEraseMetaKnowledge: return "erase_meta_knowledge";
    case AblationKind::kMlpMapper: return "mlp_mapper";
    case AblationKind::kFixedTaskInduction: return "fixed_task_induction";
    case AblationKind::kStepSweep: return "step_sweep";
    case AblationKind::kRepeatsVsShots: return "repeats_vs_shots";
    case AblationKind::kEpisodicVsNonEpisodic: return "episodic_vs_nonepisodic";
    default: return "domain_shift";
  }
}

// Everything an ablation needs to retrain and evaluate under shared seeds.
template <class Real>
struct AblationContext {
  const DatasetD* dataset = nullptr;
  BackboneConfig backbone;
  MapperConfig mapper;
  MetaConfig meta;
  EpisodeConfig episode;
  GenerationConfig gen;
  int64_t train_budget = 600;  // meta-updates for suites that retrain
  int64_t eval_episodes = 200;
  int64_t adaptation_steps = 5;
  int64_t nonepisodic_batch = 32;
  uint64_t backbone_seed = 1, theta_seed = 2, train_seed = 2, eval_seed = 3;
  const ParameterSetT<Real>* trained = nullptr;  // standard trained theta, when available
};

template <class Real>
std::vector<TaskSample> flat_caption_pool(const DatasetD& ds, Partition part) {
  std::vector<TaskSample> pool;
  for (int64_t c : ds.partition(part))
    for (const auto& s : ds.samples[static_cast<size_t>(c)])
      pool.push_back({s.image, {}, s.caption, s.id});
  return pool;
}

namespace detail {

template <class Real>
ParameterSetT<Real> train_fresh(const AblationContext<Real>& ctx, const DatasetD& ds,
                                const MapperConfig& mapper_cfg, bool episodic) {
  auto model = build_model<Real>(ctx.backbone, mapper_cfg, ds.cfg.image_h, ds.cfg.image_w,
                                 ds.cfg.image_c, ds.vocab.size(), ctx.backbone_seed);
  auto params = init_params(model, ctx.theta_seed);
  AdamWT<Real> opt(ctx.meta);
  if (episodic) {
    EpisodeStream stream{&ds, Partition::kMetaTrain, ctx.episode, ctx.train_seed};
    meta_train(model, params, opt, stream, ctx.meta, ctx.train_budget);
  } else {
    const int64_t per_episode =
        ctx.episode.ways * (ctx.episode.shots * ctx.episode.repeats + ctx.episode.queries_per_way);
    const int64_t visits = ctx.train_budget * ctx.meta.meta_batch_tasks * per_episode;
    const int64_t steps = std::max<int64_t>(1, visits / ctx.nonepisodic_batch);
    auto pool = flat_caption_pool<Real>(ds, Partition::kMetaTrain);
    nonepisodic_train(model, params, opt, pool, ctx.meta, steps, ctx.nonepisodic_batch,
                      ctx.train_seed);
  }
  return params;
}

template <class Real>
EvalReport eval_cell(const AblationContext<Real>& ctx, const DatasetD& ds,
                     const MapperConfig& mapper_cfg, const ParameterSetT<Real>& params,
                     const EpisodeConfig& ec, int64_t steps, bool fixed_induction,
                     const std::string& label) {
  auto model = build_model<Real>(ctx.backbone, mapper_cfg, ds.cfg.image_h, ds.cfg.image_w,
                                 ds.cfg.image_c, ds.vocab.size(), ctx.backbone_seed);
  MetaTestOptions<Real> opt;
  opt.adaptation_steps = steps;
  opt.episodes = ctx.eval_episodes;
  opt.eval_seed = ctx.eval_seed;
  opt.fixed_induction = fixed_induction;
  auto report = meta_test(model, params, ds, Partition::kMetaTest, ec, ctx.meta, ctx.gen, opt);
  report.label = label;
  return report;
}

}  // namespace detail

// Matched pair/sweep runner for the ablation studies. Every cell shares the
// data, backbone and evaluation seeds; only the ablated ingredient changes.
template <class Real>
std::vector<EvalReport> run_ablation(AblationKind kind, const AblationContext<Real>& ctx) {
  if (!ctx.dataset) throw ContractError("run_ablation: no dataset");
  const DatasetD& ds = *ctx.dataset;
  std::vector<EvalReport> cells;

  auto trained_or_fresh = [&]() -> ParameterSetT<Real> {
    if (ctx.trained) return ctx.trained->clone();
    return detail::train_fresh(ctx, ds, ctx.mapper, /*episodic=*/true);
  };

  switch (kind) {
    case AblationKind::kEraseMetaKnowledge: {
      auto params = trained_or_fresh();
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, params, ctx.episode,
                                        ctx.adaptation_steps, false, "with_meta_knowledge"));
      auto erased = params.clone();
      reinitialize(erased, ctx.mapper, ctx.backbone.d_v, ctx.backbone.d_e,
                   derive_seed(ctx.theta_seed, 0xabadULL));
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, erased, ctx.episode,
                                        ctx.adaptation_steps, false, "erased_meta_knowledge"));
      break;
    }
    case AblationKind::kMlpMapper: {
      auto attn_params = trained_or_fresh();
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, attn_params, ctx.episode,
                                        ctx.adaptation_steps, false, "self_attention_mapper"));
      MapperConfig mlp_cfg = ctx.mapper;
      mlp_cfg.variant = MapperVariant::kMlp;
      auto mlp_params = detail::train_fresh(ctx, ds, mlp_cfg, true);
      cells.push_back(detail::eval_cell(ctx, ds, mlp_cfg, mlp_params, ctx.episode,
                                        ctx.adaptation_steps, false, "mlp_mapper"));
      break;
    }
    case AblationKind::kFixedTaskInduction: {
      auto params = trained_or_fresh();
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, params, ctx.episode,
                                        ctx.adaptation_steps, false, "without_fixed_induction"));
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, params, ctx.episode,
                                        ctx.adaptation_steps, true, "with_fixed_induction"));
      break;
    }
    case AblationKind::kStepSweep: {
      auto params = trained_or_fresh();
      for (int64_t steps : {0, 1, 3, 5})
        cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, params, ctx.episode, steps, false,
                                          "steps_" + std::to_string(steps)));
      break;
    }
    case AblationKind::kRepeatsVsShots: {
      auto params = trained_or_fresh();
      for (int64_t k : {1, 5})
        for (int64_t r : {1, 5}) {
          EpisodeConfig ec = ctx.episode;
          ec.shots = k;
          ec.repeats = r;
          ec.queries_per_way = std::max(ec.queries_per_way, k + 1);
          cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, params, ec,
                                            ctx.adaptation_steps, false,
                                            "k" + std::to_string(k) + "_r" + std::to_string(r)));
        }
      break;
    }
    case AblationKind::kEpisodicVsNonEpisodic: {
      auto episodic = detail::train_fresh(ctx, ds, ctx.mapper, true);
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, episodic, ctx.episode,
                                        ctx.adaptation_steps, false, "episodic"));
      auto flat = detail::train_fresh(ctx, ds, ctx.mapper, false);
      cells.push_back(detail::eval_cell(ctx, ds, ctx.mapper, flat, ctx.episode,
                                        ctx.adaptation_steps, false, "nonepisodic"));
      break;
    }
    case AblationKind::kDomainShift: {
      for (Scenario sc : {Scenario::kInDomain, Scenario::kCrossDomain}) {
        DataConfig dc = ds.cfg;
        dc.scenario = sc;
        auto shifted = generate_dataset(dc, ds.seed);
        AblationContext<Real> sub = ctx;
        sub.dataset = &shifted;
        sub.trained = nullptr;
        auto params = detail::train_fresh(sub, shifted, ctx.mapper, true);
        cells.push_back(detail::eval_cell(sub, shifted, ctx.mapper, params, ctx.episode,
                                          ctx.adaptation_steps, false, to_string(sc)));
      }
      break;
    }
  }
  return cells;
}

}  // namespace metamap
