#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eval.hpp"
#include "vocab.hpp"

namespace metamap {

// Structured eval records: one JSON line per episode, then a summary line.
// A companion flat CSV carries one row per report for plotting.

inline nlohmann::json report_summary_json(const EvalReport& r) {
  nlohmann::json j;
  j["summary"] = true;
  j["label"] = r.label;
  j["ways"] = r.ways;
  j["shots"] = r.shots;
  j["queries_per_way"] = r.queries_per_way;
  j["repeats"] = r.repeats;
  j["adaptation_steps"] = r.adaptation_steps;
  j["episodes"] = r.episodes;
  j["task_kind"] = r.task_kind;
  j["scenario"] = r.scenario;
  j["strategy"] = r.strategy;
  j["inner_lr"] = r.inner_lr;
  j["eval_seed"] = r.eval_seed;
  j["chance_closed_set"] = r.chance_closed_set;
  j["chance_open_ended"] = r.chance_open_ended;
  j["mean_accuracy"] = r.mean_accuracy();
  j["stderr_accuracy"] = r.stderr_accuracy();
  return j;
}

inline void write_report_jsonl(const EvalReport& r, const Vocabulary& vocab,
                               const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  size_t gi = 0;
  for (size_t e = 0; e < r.per_episode_accuracy.size(); ++e) {
    nlohmann::json j;
    j["episode"] = e;
    j["accuracy"] = r.per_episode_accuracy[e];
    nlohmann::json gens = nlohmann::json::array();
    for (; gi < r.generations.size() &&
           r.generations[gi].episode == static_cast<int64_t>(e);
         ++gi) {
      const auto& g = r.generations[gi];
      nlohmann::json gj;
      gj["query"] = g.query_index;
      gj["generated"] = vocab.decode(g.generated);
      gj["answer"] = vocab.word(g.answer_token);
      gj["correct"] = g.correct;
      gens.push_back(gj);
    }
    j["generations"] = gens;
    os << j.dump() << "\n";
  }
  os << report_summary_json(r).dump() << "\n";
}

inline std::string flat_table_header() {
  return "label,ways,shots,queries_per_way,repeats,adaptation_steps,episodes,task_kind,"
         "scenario,strategy,accuracy,stderr";
}

inline std::string flat_table_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.label << ',' << r.ways << ',' << r.shots << ',' << r.queries_per_way << ','
     << r.repeats << ',' << r.adaptation_steps << ',' << r.episodes << ',' << r.task_kind << ','
     << r.scenario << ',' << r.strategy << ',' << r.mean_accuracy() << ','
     << r.stderr_accuracy();
  return os.str();
}

inline void write_flat_table(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << flat_table_header() << "\n";
  for (const auto& r : reports) os << flat_table_row(r) << "\n";
}

inline void write_train_log_jsonl(const std::vector<TrainRecord>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const auto& rec : log) {
    nlohmann::json j;
    j["meta_step"] = rec.meta_step;
    j["mean_support_loss_pre"] = rec.support_loss_pre;
    j["mean_support_loss_post"] = rec.support_loss_post;
    j["mean_query_loss"] = rec.query_loss;
    j["wall_time"] = rec.wall_time_s;
    os << j.dump() << "\n";
  }
}

}  // namespace metamap
