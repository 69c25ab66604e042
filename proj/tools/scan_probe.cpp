// scratch design-point scanner; not part of the deliverable surface
#include <cstdio>
#include <cstdlib>

#include "metamap/eval.hpp"
#include "metamap/meta.hpp"

using namespace metamap;

int main(int argc, char** argv) {
  const int64_t caption_words = argc > 1 ? std::atoll(argv[1]) : 1;
  const int64_t min_vocab = argc > 2 ? std::atoll(argv[2]) : 64;
  const int64_t layers = argc > 3 ? std::atoll(argv[3]) : 2;
  const int64_t budget = argc > 4 ? std::atoll(argv[4]) : 800;
  const int64_t eval_eps = argc > 5 ? std::atoll(argv[5]) : 100;
  const double noise = argc > 6 ? std::atof(argv[6]) : 0.1;

  DataConfig dc;
  dc.caption_words = caption_words;
  dc.min_vocab = min_vocab;
  dc.render_noise = noise;
  auto ds = generate_dataset(dc, 1);
  BackboneConfig bb;
  bb.layers = layers;
  MapperConfig mc;
  auto model = build_model<double>(bb, mc, dc.image_h, dc.image_w, dc.image_c, ds.vocab.size(), 1);
  auto params = init_params(model, 2);
  MetaConfig meta;

  GenerationConfig gen;
  gen.max_new_tokens = 6;
  MetaTestOptions<double> opt;
  opt.episodes = eval_eps;
  opt.eval_seed = 3;
  opt.adaptation_steps = 5;

  auto rand_adapted =
      meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt).mean_accuracy();

  AdamWT<double> optm(meta);
  EpisodeStream stream{&ds, Partition::kMetaTrain, {}, 2};
  auto log = meta_train(model, params, optm, stream, meta, budget);
  auto trained = meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt);

  // erased cell: fresh random draw, same protocol
  auto erased = params.clone();
  reinitialize(erased, mc, bb.d_v, bb.d_e, derive_seed(2, 0xabadULL));
  auto erased_acc =
      meta_test(model, erased, ds, Partition::kMetaTest, {}, meta, gen, opt).mean_accuracy();

  std::printf(
      "cw=%lld vocab=%lld layers=%lld noise=%.2f budget=%lld | rand5=%.3f erased5=%.3f "
      "trained=%.3f+-%.3f qloss=%.3f->%0.3f\n",
      (long long)caption_words, (long long)ds.vocab.size(), (long long)layers, noise,
      (long long)budget, rand_adapted, erased_acc, trained.mean_accuracy(),
      trained.stderr_accuracy(), log.front().query_loss, log.back().query_loss);
  return 0;
}
