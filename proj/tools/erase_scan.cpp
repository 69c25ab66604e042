// scratch scanner: adapted-from-random accuracy across reinit draws
#include <cstdio>
#include <cstdlib>

#include "metamap/eval.hpp"

using namespace metamap;

int main(int argc, char** argv) {
  const int64_t caption_words = argc > 1 ? std::atoll(argv[1]) : 1;
  const int64_t min_vocab = argc > 2 ? std::atoll(argv[2]) : 64;
  const int64_t episodes = argc > 3 ? std::atoll(argv[3]) : 60;
  const int64_t adapt_steps = argc > 4 ? std::atoll(argv[4]) : 5;

  DataConfig dc;
  dc.caption_words = caption_words;
  dc.min_vocab = min_vocab;
  auto ds = generate_dataset(dc, 1);
  BackboneConfig bb;
  MapperConfig mc;
  auto model = build_model<double>(bb, mc, dc.image_h, dc.image_w, dc.image_c, ds.vocab.size(), 1);
  MetaConfig meta;
  GenerationConfig gen;
  gen.max_new_tokens = 6;
  MetaTestOptions<double> opt;
  opt.episodes = episodes;
  opt.eval_seed = 3;
  opt.adaptation_steps = adapt_steps;

  std::printf("cw=%lld vocab=%lld steps=%lld:", (long long)caption_words,
              (long long)ds.vocab.size(), (long long)adapt_steps);
  for (uint64_t s = 1; s <= 10; ++s) {
    auto params = init_params(model, derive_seed(777, s));
    const double acc =
        meta_test(model, params, ds, Partition::kMetaTest, {}, meta, gen, opt).mean_accuracy();
    std::printf(" %.3f", acc);
    std::fflush(stdout);
  }
  std::printf("\n");
  return 0;
}
