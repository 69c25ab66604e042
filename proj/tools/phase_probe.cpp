// scratch phase timing; not part of the deliverable surface
#include <chrono>
#include <cstdio>
#include "metamap/eval.hpp"
using namespace metamap;
using Clock = std::chrono::steady_clock;
static double secs(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}
int main() {
  DataConfig dc;
  auto ds = generate_dataset(dc, 1);
  BackboneConfig bb;
  MapperConfig mc;
  auto model = build_model<double>(bb, mc, dc.image_h, dc.image_w, dc.image_c, ds.vocab.size(), 1);
  auto params = init_params(model, 2);
  MetaConfig meta;
  EpisodeStream stream{&ds, Partition::kMetaTrain, {}, 2};
  double t_pre = 0, t_adapt = 0, t_post = 0, t_query = 0, t_outer = 0;
  const int updates = 20;
  for (int u = 0; u < updates; ++u) {
    TensorT<double> total;
    std::vector<Episode> batch;
    for (int i = 0; i < meta.meta_batch_tasks; ++i) batch.push_back(stream.at(u * 4 + i));
    for (auto& ep : batch) {
      auto support = support_samples(ep);
      auto query = query_samples(ep);
      auto t0 = Clock::now();
      { NoGradGuard ng; task_loss(model, params, support).item(); }
      auto t1 = Clock::now();
      auto adapted = inner_adapt(model, params, support, meta, true);
      auto t2 = Clock::now();
      { NoGradGuard ng; task_loss(model, adapted, support).item(); }
      auto t3 = Clock::now();
      auto ql = task_loss(model, adapted, query);
      auto t4 = Clock::now();
      total = total.defined() ? add(total, ql) : ql;
      t_pre += secs(t0, t1); t_adapt += secs(t1, t2); t_post += secs(t2, t3); t_query += secs(t3, t4);
    }
    auto t5 = Clock::now();
    auto gs = grad(total, params.trainable_tensors(), false);
    auto t6 = Clock::now();
    t_outer += secs(t5, t6);
  }
  std::printf("per update: pre=%.1fms adapt=%.1fms post=%.1fms query_fwd=%.1fms outer_grad=%.1fms\n",
              1e3 * t_pre / updates, 1e3 * t_adapt / updates, 1e3 * t_post / updates,
              1e3 * t_query / updates, 1e3 * t_outer / updates);
  return 0;
}
