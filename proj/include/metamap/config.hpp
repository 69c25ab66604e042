#pragma once

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "episodes.hpp"
#include "eval.hpp"
#include "mapper.hpp"
#include "meta.hpp"

namespace metamap {

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};
struct CompatibilityError : std::runtime_error {
  explicit CompatibilityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Budgets {
  int64_t meta_updates = 4000;
  int64_t eval_episodes = 200;
  int64_t checkpoint_every = 500;
  int64_t nonepisodic_batch = 32;
  int64_t adaptation_steps = 5;
  int64_t ablation_train_budget = 600;
};

// Three independent seed streams: the data seed fixes the dataset and the
// frozen backbones (the "world"), the train seed fixes theta init and batch
// order, the eval seed fixes evaluation episodes and sampling.
struct Seeds {
  uint64_t data = 1;
  uint64_t train = 2;
  uint64_t eval = 3;
};

// The whole experiment: fully determines a run given the code version. A
// serialized copy travels with every container this program writes.
struct ExperimentConfig {
  std::string precision = "f64";
  BackboneConfig backbone;
  MapperConfig mapper;
  MetaConfig meta;
  DataConfig data;
  EpisodeConfig episodes;
  GenerationConfig generation;
  Budgets budgets;
  Seeds seeds;

  void validate() const {
    if (precision != "f32" && precision != "f64")
      throw ValidationError("config: precision must be 'f32' or 'f64'");
    try {
      backbone.validate();
      mapper.validate(backbone.d_e);
      meta.validate();
      data.validate();
      episodes.validate();
      generation.validate();
    } catch (const ConfigError& e) {
      throw ValidationError(std::string("config: ") + e.what());
    }
    if (budgets.meta_updates < 0 || budgets.eval_episodes < 0 || budgets.checkpoint_every < 1 ||
        budgets.nonepisodic_batch < 1 || budgets.adaptation_steps < 0 ||
        budgets.ablation_train_budget < 0)
      throw ValidationError("config: budgets must be non-negative (checkpoint_every/batch >= 1)");
    if (episodes.shots + episodes.queries_per_way > data.samples_per_category)
      throw ValidationError("config: shots + queries_per_way exceeds samples_per_category");
    if (data.image_w % backbone.n_visual != 0)
      throw ValidationError("config: image width must divide into n_visual patches");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["precision"] = precision;
    j["backbone"] = {{"d_v", backbone.d_v},       {"d_e", backbone.d_e},
                     {"n_visual", backbone.n_visual}, {"layers", backbone.layers},
                     {"heads", backbone.heads},   {"ff_mult", backbone.ff_mult},
                     {"context", backbone.context}};
    j["mapper"] = {{"prefix_len", mapper.prefix_len},
                   {"heads", mapper.heads},
                   {"variant", to_string(mapper.variant)},
                   {"mlp_hidden", mapper.mlp_hidden},
                   {"literal_eq1", mapper.literal_eq1}};
    j["meta"] = {{"inner_steps", meta.inner_steps},
                 {"inner_lr", meta.inner_lr},
                 {"meta_lr", meta.meta_lr},
                 {"meta_batch_tasks", meta.meta_batch_tasks},
                 {"second_order", meta.second_order},
                 {"weight_decay", meta.weight_decay}};
    j["data"] = {{"categories", data.categories},
                 {"samples_per_category", data.samples_per_category},
                 {"image_h", data.image_h},
                 {"image_w", data.image_w},
                 {"image_c", data.image_c},
                 {"render_noise", data.render_noise},
                 {"caption_words", data.caption_words},
                 {"scenario", to_string(data.scenario)},
                 {"meta_test_fraction", data.meta_test_fraction},
                 {"min_vocab", data.min_vocab}};
    j["episodes"] = {{"ways", episodes.ways},
                     {"shots", episodes.shots},
                     {"queries_per_way", episodes.queries_per_way},
                     {"repeats", episodes.repeats},
                     {"task_kind", to_string(episodes.task_kind)}};
    j["generation"] = {{"strategy", to_string(generation.strategy)},
                       {"top_k", generation.top_k},
                       {"top_p", generation.top_p},
                       {"temperature", generation.temperature},
                       {"max_new_tokens", generation.max_new_tokens}};
    j["budgets"] = {{"meta_updates", budgets.meta_updates},
                    {"eval_episodes", budgets.eval_episodes},
                    {"checkpoint_every", budgets.checkpoint_every},
                    {"nonepisodic_batch", budgets.nonepisodic_batch},
                    {"adaptation_steps", budgets.adaptation_steps},
                    {"ablation_train_budget", budgets.ablation_train_budget}};
    j["seeds"] = {{"data", seeds.data}, {"train", seeds.train}, {"eval", seeds.eval}};
    return j;
  }

  // nlohmann objects iterate in sorted key order, so dump() is canonical
  uint64_t config_hash() const { return fnv1a_str(to_json().dump()); }

  // Identity of the trainable-parameter layout and the frozen world:
  // checkpoints from one model hash load only into the same one.
  uint64_t model_hash() const {
    nlohmann::json j;
    const auto full = to_json();
    j["backbone"] = full["backbone"];
    j["mapper"] = full["mapper"];
    j["data"] = full["data"];
    j["data_seed"] = seeds.data;
    return fnv1a_str(j.dump());
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValidationError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config: parse error in '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  // "data=5,train=7,eval=9"
  void apply_seed_overrides(const std::string& spec) {
    if (spec.empty()) return;
    std::istringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos)
        throw ValidationError("seed override '" + item + "' is not of the form name=value");
      const std::string name = item.substr(0, eq);
      uint64_t value = 0;
      try {
        value = std::stoull(item.substr(eq + 1));
      } catch (...) {
        throw ValidationError("seed override '" + item + "' has a non-numeric value");
      }
      if (name == "data")
        seeds.data = value;
      else if (name == "train")
        seeds.train = value;
      else if (name == "eval")
        seeds.eval = value;
      else
        throw ValidationError("seed override names one of data/train/eval, got '" + name + "'");
    }
  }
};

namespace detail {

class StrictReader {
 public:
  // takes the section by value: callers pass freshly materialized defaults
  StrictReader(nlohmann::json j, std::string section, std::vector<std::string>& errors)
      : j_(std::move(j)), section_(std::move(section)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(section_ + ": expected an object");
  }

  ~StrictReader() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) errors_.push_back(section_ + "." + it.key() + ": unknown key");
  }

  template <class T>
  void get(const char* key, T& out) {
    known_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(section_ + "." + key + ": wrong type");
    }
  }

  void get_enum(const char* key, std::string& out) { get<std::string>(key, out); }

 private:
  nlohmann::json j_;
  std::string section_;
  std::vector<std::string>& errors_;
  std::set<std::string> known_;
};

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  static const std::set<std::string> sections{"precision", "backbone", "mapper",     "meta",
                                              "data",      "episodes", "generation", "budgets",
                                              "seeds"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!sections.count(it.key())) errors.push_back(it.key() + ": unknown key");
  if (!j.contains("seeds")) errors.push_back("seeds: missing required section");

  if (j.contains("precision")) {
    try {
      cfg.precision = j.at("precision").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      errors.push_back("precision: wrong type");
    }
  }
  std::string variant = to_string(cfg.mapper.variant);
  std::string scenario = to_string(cfg.data.scenario);
  std::string task_kind = to_string(cfg.episodes.task_kind);
  std::string strategy = to_string(cfg.generation.strategy);
  {
    detail::StrictReader r(j.value("backbone", nlohmann::json::object()), "backbone", errors);
    r.get("d_v", cfg.backbone.d_v);
    r.get("d_e", cfg.backbone.d_e);
    r.get("n_visual", cfg.backbone.n_visual);
    r.get("layers", cfg.backbone.layers);
    r.get("heads", cfg.backbone.heads);
    r.get("ff_mult", cfg.backbone.ff_mult);
    r.get("context", cfg.backbone.context);
  }
  {
    detail::StrictReader r(j.value("mapper", nlohmann::json::object()), "mapper", errors);
    r.get("prefix_len", cfg.mapper.prefix_len);
    r.get("heads", cfg.mapper.heads);
    r.get_enum("variant", variant);
    r.get("mlp_hidden", cfg.mapper.mlp_hidden);
    r.get("literal_eq1", cfg.mapper.literal_eq1);
  }
  {
    detail::StrictReader r(j.value("meta", nlohmann::json::object()), "meta", errors);
    r.get("inner_steps", cfg.meta.inner_steps);
    r.get("inner_lr", cfg.meta.inner_lr);
    r.get("meta_lr", cfg.meta.meta_lr);
    r.get("meta_batch_tasks", cfg.meta.meta_batch_tasks);
    r.get("second_order", cfg.meta.second_order);
    r.get("weight_decay", cfg.meta.weight_decay);
  }
  {
    detail::StrictReader r(j.value("data", nlohmann::json::object()), "data", errors);
    r.get("categories", cfg.data.categories);
    r.get("samples_per_category", cfg.data.samples_per_category);
    r.get("image_h", cfg.data.image_h);
    r.get("image_w", cfg.data.image_w);
    r.get("image_c", cfg.data.image_c);
    r.get("render_noise", cfg.data.render_noise);
    r.get("caption_words", cfg.data.caption_words);
    r.get_enum("scenario", scenario);
    r.get("meta_test_fraction", cfg.data.meta_test_fraction);
    r.get("min_vocab", cfg.data.min_vocab);
  }
  {
    detail::StrictReader r(j.value("episodes", nlohmann::json::object()), "episodes", errors);
    r.get("ways", cfg.episodes.ways);
    r.get("shots", cfg.episodes.shots);
    r.get("queries_per_way", cfg.episodes.queries_per_way);
    r.get("repeats", cfg.episodes.repeats);
    r.get_enum("task_kind", task_kind);
  }
  {
    detail::StrictReader r(j.value("generation", nlohmann::json::object()), "generation", errors);
    r.get_enum("strategy", strategy);
    r.get("top_k", cfg.generation.top_k);
    r.get("top_p", cfg.generation.top_p);
    r.get("temperature", cfg.generation.temperature);
    r.get("max_new_tokens", cfg.generation.max_new_tokens);
  }
  {
    detail::StrictReader r(j.value("budgets", nlohmann::json::object()), "budgets", errors);
    r.get("meta_updates", cfg.budgets.meta_updates);
    r.get("eval_episodes", cfg.budgets.eval_episodes);
    r.get("checkpoint_every", cfg.budgets.checkpoint_every);
    r.get("nonepisodic_batch", cfg.budgets.nonepisodic_batch);
    r.get("adaptation_steps", cfg.budgets.adaptation_steps);
    r.get("ablation_train_budget", cfg.budgets.ablation_train_budget);
  }
  {
    detail::StrictReader r(j.value("seeds", nlohmann::json::object()), "seeds", errors);
    r.get("data", cfg.seeds.data);
    r.get("train", cfg.seeds.train);
    r.get("eval", cfg.seeds.eval);
  }
  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ValidationError(msg);
  }
  try {
    cfg.mapper.variant = mapper_variant_from_string(variant);
    cfg.data.scenario = scenario_from_string(scenario);
    cfg.episodes.task_kind = task_kind_from_string(task_kind);
    cfg.generation.strategy = strategy_from_string(strategy);
  } catch (const ConfigError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// Matched sample budget for the non-episodic baseline: same number of sample
// presentations as the episodic run.
inline int64_t nonepisodic_budget_steps(const ExperimentConfig& cfg) {
  const int64_t per_episode =
      cfg.episodes.ways * (cfg.episodes.shots * cfg.episodes.repeats + cfg.episodes.queries_per_way);
  const int64_t visits = cfg.budgets.meta_updates * cfg.meta.meta_batch_tasks * per_episode;
  return std::max<int64_t>(1, visits / cfg.budgets.nonepisodic_batch);
}

}  // namespace metamap
