// Command-line harness: reproducible dataset generation, training, evaluation
// and ablations. One command per process; machine-readable artifacts go to
// files, human-readable summaries to stderr.
//
// Exit codes: 0 success, 1 validation/compatibility, 2 runtime or divergence.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "metamap/checkpoint.hpp"
#include "metamap/config.hpp"
#include "metamap/eval.hpp"
#include "metamap/report_io.hpp"

namespace fs = std::filesystem;
using namespace metamap;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::string dataset_path;
  std::string checkpoint_path;
  std::string mode = "episodic";
  std::string suite = "standard";
  std::string seed_overrides;
  std::string precision_override;
  bool resume = false;
};

ExperimentConfig load_config(const CommonArgs& args) {
  auto cfg = ExperimentConfig::load(args.config_path);
  cfg.apply_seed_overrides(args.seed_overrides);
  if (!args.precision_override.empty()) cfg.precision = args.precision_override;
  cfg.validate();
  return cfg;
}

DatasetD load_and_check_dataset(const ExperimentConfig& cfg, const std::string& path) {
  auto ds = load_dataset(path);
  const uint64_t expected = hash_data_config(cfg.data, cfg.seeds.data);
  if (ds.data_hash != expected)
    throw CompatibilityError("dataset '" + path +
                             "' was generated from a different data config/seed "
                             "(hash mismatch); regenerate or fix the config");
  return ds;
}

void write_config_echo(const ExperimentConfig& cfg, const std::string& out_dir) {
  std::ofstream os(fs::path(out_dir) / "config_used.json");
  os << cfg.to_json().dump(2) << "\n";
}

int cmd_generate_data(const CommonArgs& args) {
  auto cfg = load_config(args);
  fs::create_directories(args.out_dir);
  auto ds = generate_dataset(cfg.data, cfg.seeds.data);
  const auto container = (fs::path(args.out_dir) / "dataset.bin").string();
  const auto manifest = (fs::path(args.out_dir) / "dataset.manifest.txt").string();
  save_dataset(ds, container);
  save_manifest(ds, manifest);
  write_config_echo(cfg, args.out_dir);
  std::cerr << "dataset: " << container << "\n"
            << "categories: " << ds.cfg.categories << " (" << ds.split.meta_train.size()
            << " meta-train, " << ds.split.meta_test.size() << " meta-test)\n"
            << "samples per category: " << ds.cfg.samples_per_category << "\n"
            << "vocabulary: " << ds.vocab.size() << " words\n"
            << "scenario: " << to_string(ds.cfg.scenario) << "\n"
            << "data hash: " << ds.data_hash << "\n";
  return 0;
}

template <class Real>
int run_train(const ExperimentConfig& cfg, const CommonArgs& args) {
  auto ds = load_and_check_dataset(cfg, args.dataset_path);
  auto model = build_model<Real>(cfg.backbone, cfg.mapper, ds.cfg.image_h, ds.cfg.image_w,
                                 ds.cfg.image_c, ds.vocab.size(), cfg.seeds.data);
  auto params = init_params(model, cfg.seeds.train);
  AdamWT<Real> opt(cfg.meta);
  const TrainMode mode = train_mode_from_string(args.mode);

  int64_t start_step = 0;
  if (args.resume) {
    auto ck = load_checkpoint(args.checkpoint_path);
    if (ck.model_hash != cfg.model_hash())
      throw CompatibilityError("checkpoint '" + args.checkpoint_path +
                               "' does not match this config's model (hash mismatch)");
    if (ck.mode != mode)
      throw CompatibilityError("checkpoint was trained in mode '" + to_string(ck.mode) +
                               "', requested '" + to_string(mode) + "'");
    restore_checkpoint(ck, params, opt);
    start_step = ck.step;
    std::cerr << "resumed from step " << start_step << "\n";
  }

  const uint64_t frozen_before = frozen_checksum(model.encoder, model.lm);
  fs::create_directories(args.out_dir);
  write_config_echo(cfg, args.out_dir);

  auto checkpoint_to = [&](int64_t step, const std::string& name) {
    save_checkpoint(make_checkpoint(params, opt, step, mode, cfg),
                    (fs::path(args.out_dir) / name).string());
  };
  auto on_step = [&](int64_t step) {
    if (step % cfg.budgets.checkpoint_every == 0)
      checkpoint_to(step, "checkpoint_step" + std::to_string(step) + ".bin");
  };

  std::vector<TrainRecord> log;
  if (mode == TrainMode::kEpisodic) {
    EpisodeStream stream{&ds, Partition::kMetaTrain, cfg.episodes, cfg.seeds.train};
    log = meta_train(model, params, opt, stream, cfg.meta, cfg.budgets.meta_updates, start_step,
                     on_step);
  } else {
    auto pool = flat_caption_pool<Real>(ds, Partition::kMetaTrain);
    log = nonepisodic_train(model, params, opt, pool, cfg.meta, nonepisodic_budget_steps(cfg),
                            cfg.budgets.nonepisodic_batch, cfg.seeds.train, start_step, on_step);
  }

  if (frozen_checksum(model.encoder, model.lm) != frozen_before)
    throw std::runtime_error("frozen contract violated: backbone checksum changed");
  const int64_t final_step =
      mode == TrainMode::kEpisodic ? cfg.budgets.meta_updates : nonepisodic_budget_steps(cfg);
  checkpoint_to(final_step, "checkpoint_final.bin");

  const auto log_path = fs::path(args.out_dir) / "train_log.jsonl";
  // on resume, append only the new records
  if (start_step > 0 && fs::exists(log_path)) {
    std::ofstream os(log_path, std::ios::app);
    for (const auto& rec : log) {
      nlohmann::json j{{"meta_step", rec.meta_step},
                       {"mean_support_loss_pre", rec.support_loss_pre},
                       {"mean_support_loss_post", rec.support_loss_post},
                       {"mean_query_loss", rec.query_loss},
                       {"wall_time", rec.wall_time_s}};
      os << j.dump() << "\n";
    }
  } else {
    write_train_log_jsonl(log, log_path.string());
  }

  std::cerr << "trained " << log.size() << " steps (" << to_string(mode) << "), final query loss "
            << (log.empty() ? 0.0 : log.back().query_loss) << "\n"
            << "checkpoint: " << (fs::path(args.out_dir) / "checkpoint_final.bin").string() << "\n"
            << "frozen checksum: " << frozen_before << " (unchanged)\n";
  return 0;
}

template <class Real>
int run_eval(const ExperimentConfig& cfg, const CommonArgs& args) {
  auto ds = load_and_check_dataset(cfg, args.dataset_path);
  auto model = build_model<Real>(cfg.backbone, cfg.mapper, ds.cfg.image_h, ds.cfg.image_w,
                                 ds.cfg.image_c, ds.vocab.size(), cfg.seeds.data);
  auto params = init_params(model, cfg.seeds.train);
  AdamWT<Real> opt(cfg.meta);

  if (!args.checkpoint_path.empty()) {
    auto ck = load_checkpoint(args.checkpoint_path);
    if (ck.model_hash != cfg.model_hash())
      throw CompatibilityError("checkpoint '" + args.checkpoint_path +
                               "' does not match this config's model (hash mismatch)");
    restore_checkpoint(ck, params, opt);
  }
  const uint64_t frozen_before = frozen_checksum(model.encoder, model.lm);
  fs::create_directories(args.out_dir);
  write_config_echo(cfg, args.out_dir);

  std::vector<EvalReport> reports;
  if (args.suite == "standard") {
    MetaTestOptions<Real> opts;
    opts.adaptation_steps = cfg.budgets.adaptation_steps;
    opts.episodes = cfg.budgets.eval_episodes;
    opts.eval_seed = cfg.seeds.eval;
    auto report = meta_test(model, params, ds, Partition::kMetaTest, cfg.episodes, cfg.meta,
                            cfg.generation, opts);
    reports.push_back(std::move(report));
  } else {
    AblationContext<Real> ctx;
    ctx.dataset = &ds;
    ctx.backbone = cfg.backbone;
    ctx.mapper = cfg.mapper;
    ctx.meta = cfg.meta;
    ctx.episode = cfg.episodes;
    ctx.gen = cfg.generation;
    ctx.train_budget = cfg.budgets.ablation_train_budget;
    ctx.eval_episodes = cfg.budgets.eval_episodes;
    ctx.adaptation_steps = cfg.budgets.adaptation_steps;
    ctx.nonepisodic_batch = cfg.budgets.nonepisodic_batch;
    ctx.backbone_seed = cfg.seeds.data;
    ctx.theta_seed = cfg.seeds.train;
    ctx.train_seed = cfg.seeds.train;
    ctx.eval_seed = cfg.seeds.eval;
    ctx.trained = args.checkpoint_path.empty() ? nullptr : &params;
    reports = run_ablation(ablation_from_string(args.suite), ctx);
  }

  if (frozen_checksum(model.encoder, model.lm) != frozen_before)
    throw std::runtime_error("frozen contract violated: backbone checksum changed");

  for (const auto& r : reports) {
    const auto path = fs::path(args.out_dir) / ("report_" + r.label + ".jsonl");
    write_report_jsonl(r, ds.vocab, path.string());
    std::cerr << r.label << ": accuracy " << r.mean_accuracy() << " +- " << r.stderr_accuracy()
              << " over " << r.per_episode_accuracy.size() << " episodes\n";
  }
  write_flat_table(reports, (fs::path(args.out_dir) / "results.csv").string());
  std::cerr << "frozen checksum: " << frozen_before << " (unchanged)\n";
  return 0;
}

template <class F>
int dispatch_precision(const ExperimentConfig& cfg, F&& f) {
  if (cfg.precision == "f32") return f.template operator()<float>();
  return f.template operator()<double>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metamap: multimodal meta-learning sandbox"};
  app.require_subcommand(1);
  CommonArgs args;

  auto add_common = [&](CLI::App* cmd, bool needs_dataset) {
    cmd->add_option("--config", args.config_path, "experiment config (json)")->required();
    cmd->add_option("--out-dir", args.out_dir, "output directory");
    cmd->add_option("--seed-overrides", args.seed_overrides, "e.g. data=1,train=2,eval=3");
    cmd->add_option("--precision", args.precision_override, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    if (needs_dataset)
      cmd->add_option("--dataset", args.dataset_path, "dataset container")->required();
  };

  auto* gen = app.add_subcommand("generate-data", "synthesize the dataset container + manifest");
  add_common(gen, false);

  auto* train = app.add_subcommand("train", "episodic meta-training or the non-episodic baseline");
  add_common(train, true);
  train->add_option("--mode", args.mode, "episodic | nonepisodic")
      ->check(CLI::IsMember({"episodic", "nonepisodic"}));
  train->add_option("--checkpoint", args.checkpoint_path, "checkpoint to resume from");
  train->add_flag("--resume", args.resume, "continue from --checkpoint");

  auto* eval = app.add_subcommand("eval", "meta-test evaluation or an ablation suite");
  add_common(eval, true);
  eval->add_option("--checkpoint", args.checkpoint_path, "trained checkpoint");
  eval->add_option("--suite", args.suite,
                   "standard | erase_meta_knowledge | mlp_mapper | fixed_task_induction | "
                   "step_sweep | repeats_vs_shots | episodic_vs_nonepisodic | domain_shift");

  auto* ablate = app.add_subcommand("ablate", "run an ablation suite (alias of eval --suite)");
  add_common(ablate, true);
  ablate->add_option("--checkpoint", args.checkpoint_path, "trained checkpoint (optional)");
  ablate->add_option("--suite", args.suite, "ablation suite name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_generate_data(args);
    const auto cfg = load_config(args);
    if (train->parsed()) {
      if (args.resume && args.checkpoint_path.empty())
        throw ValidationError("--resume requires --checkpoint");
      return dispatch_precision(cfg, [&]<class Real>() { return run_train<Real>(cfg, args); });
    }
    if (eval->parsed() || ablate->parsed()) {
      if (ablate->parsed() && args.suite == "standard")
        throw ValidationError("ablate: --suite must name an ablation");
      return dispatch_precision(cfg, [&]<class Real>() { return run_eval<Real>(cfg, args); });
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
