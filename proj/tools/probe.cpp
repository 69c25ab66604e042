// scratch measurement harness; not part of the deliverable surface
#include <chrono>
#include <cstdio>

#include "metamap/eval.hpp"
#include "metamap/meta.hpp"

using namespace metamap;
using Clock = std::chrono::steady_clock;

int main(int argc, char** argv) {
  const int64_t train_budget = argc > 1 ? std::atoll(argv[1]) : 300;
  const int64_t eval_episodes = argc > 2 ? std::atoll(argv[2]) : 50;

  DataConfig dc;
  auto ds = generate_dataset(dc, 1);
  BackboneConfig bb;
  MapperConfig mc;
  auto model = build_model<double>(bb, mc, dc.image_h, dc.image_w, dc.image_c, ds.vocab.size(), 1);
  auto params = init_params(model, 2);
  MetaConfig meta;

  std::printf("vocab=%lld theta_params=%lld\n", (long long)ds.vocab.size(),
              (long long)params.trainable_count());

  GenerationConfig gen;
  gen.max_new_tokens = 6;
  MetaTestOptions<double> opt;
  opt.episodes = eval_episodes;
  opt.eval_seed = 3;

  auto t0 = Clock::now();
  opt.adaptation_steps = 0;
  auto rep0 = meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt);
  auto t1 = Clock::now();
  std::printf("untrained steps=0: acc=%.4f (%.2fs for %lld episodes)\n", rep0.mean_accuracy(),
              std::chrono::duration<double>(t1 - t0).count(), (long long)eval_episodes);

  opt.adaptation_steps = 5;
  auto rep5 = meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt);
  auto t2 = Clock::now();
  std::printf("untrained steps=5: acc=%.4f (%.2fs)\n", rep5.mean_accuracy(),
              std::chrono::duration<double>(t2 - t1).count());

  // a peek at what an untrained model emits
  {
    auto rng = make_engine(9);
    EpisodeStream s{&ds, Partition::kMetaTest, {}, 3};
    auto ep = s.at(0);
    auto out = generate(model, params, ep.query[0].image, ep.query[0].input_text, gen, rng);
    std::printf("untrained sample generation: '%s' (answer '%s')\n",
                ds.vocab.decode(out).c_str(), ds.vocab.word(ep.query[0].answer_token).c_str());
  }

  AdamWT<double> optm(meta);
  EpisodeStream stream{&ds, Partition::kMetaTrain, {}, 2};
  auto t3 = Clock::now();
  auto log = meta_train(model, params, optm, stream, meta, train_budget);
  auto t4 = Clock::now();
  const double train_s = std::chrono::duration<double>(t4 - t3).count();
  std::printf("meta_train %lld updates in %.1fs (%.1f ms/update)\n", (long long)train_budget,
              train_s, 1000.0 * train_s / static_cast<double>(train_budget));
  for (size_t i = 0; i < log.size(); i += std::max<size_t>(1, log.size() / 10))
    std::printf("  step %lld: support %.3f -> %.3f, query %.3f\n", (long long)log[i].meta_step,
                log[i].support_loss_pre, log[i].support_loss_post, log[i].query_loss);
  std::printf("  final: support %.3f -> %.3f, query %.3f\n", log.back().support_loss_pre,
              log.back().support_loss_post, log.back().query_loss);

  auto t5 = Clock::now();
  auto rep_trained = meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt);
  auto t6 = Clock::now();
  std::printf("trained steps=5: acc=%.4f +- %.4f (%.2fs eval)\n", rep_trained.mean_accuracy(),
              rep_trained.stderr_accuracy(), std::chrono::duration<double>(t6 - t5).count());
  {
    auto rng = make_engine(9);
    EpisodeStream s{&ds, Partition::kMetaTest, {}, 3};
    auto ep = s.at(0);
    auto adapted = inner_adapt(model, params, support_samples(ep), meta, false);
    for (int q = 0; q < 3; ++q) {
      auto out = generate(model, adapted, ep.query[q].image, ep.query[q].input_text, gen, rng);
      std::printf("trained generation: '%s' (answer '%s')\n", ds.vocab.decode(out).c_str(),
                  ds.vocab.word(ep.query[q].answer_token).c_str());
    }
  }
  return 0;
}
