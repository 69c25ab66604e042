#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "backbones.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace metamap {

struct SamplingError : std::runtime_error {
  explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Scenario { kInDomain, kCrossDomain };
enum class TaskKind { kCaptioning, kVqa };
enum class Partition { kMetaTrain, kMetaTest };

inline std::string to_string(Scenario s) {
  return s == Scenario::kInDomain ? "in_domain" : "cross_domain";
}
inline Scenario scenario_from_string(const std::string& s) {
  if (s == "in_domain") return Scenario::kInDomain;
  if (s == "cross_domain") return Scenario::kCrossDomain;
  throw ConfigError("episodes: unknown scenario '" + s + "'");
}
inline std::string to_string(TaskKind k) { return k == TaskKind::kCaptioning ? "captioning" : "vqa"; }
inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "captioning") return TaskKind::kCaptioning;
  if (s == "vqa") return TaskKind::kVqa;
  throw ConfigError("episodes: unknown task kind '" + s + "'");
}

// Synthetic data generation knobs. Images are noisy prototype grids: each
// category owns a fixed random prototype in [-0.5, 0.5]^(h*w*c) and samples
// perturb it with Gaussian render noise, so raw images are linearly separable
// by category. The cross-domain scenario renders the meta-test partition with
// different caption template words and rendering statistics.
struct DataConfig {
  int64_t categories = 24;
  int64_t samples_per_category = 24;
  int64_t image_h = 8;
  int64_t image_w = 8;
  int64_t image_c = 3;
  double render_noise = 0.1;
  int64_t caption_words = 1;  // template words before the name
  Scenario scenario = Scenario::kInDomain;
  double meta_test_fraction = 0.25;
  int64_t min_vocab = 96;

  void validate() const {
    if (categories < 2) throw ConfigError("data config: need at least 2 categories");
    if (samples_per_category < 2) throw ConfigError("data config: need >= 2 samples per category");
    if (image_h <= 0 || image_w <= 0 || image_c <= 0)
      throw ConfigError("data config: image dims must be positive");
    if (image_w % 2 != 0) throw ConfigError("data config: image width must be even (vqa composites)");
    if (render_noise < 0) throw ConfigError("data config: render noise must be >= 0");
    if (caption_words < 1 || caption_words > 3)
      throw ConfigError("data config: caption_words must lie in [1, 3]");
    if (meta_test_fraction <= 0 || meta_test_fraction >= 1)
      throw ConfigError("data config: meta_test_fraction must lie in (0, 1)");
    const auto test_cats = static_cast<int64_t>(categories * meta_test_fraction);
    if (test_cats < 2 || categories - test_cats < 2)
      throw ConfigError("data config: category count too small for the requested split");
  }
};

struct SyntheticCategory {
  int64_t id = 0;
  int64_t name_token = 0;
  std::string name;
  std::vector<double> prototype;  // h*w*c
  double render_noise = 0.0;
  int domain = 0;  // 0 = base grammar/rendering, 1 = shifted (cross-domain meta-test)
};

struct SyntheticSample {
  int64_t id = 0;
  ImageT<double> image;
  TokenSequence caption;
  std::vector<int64_t> categories_present;
};

struct MetaSplit {
  std::vector<int64_t> meta_train;  // category ids
  std::vector<int64_t> meta_test;
  Scenario scenario = Scenario::kInDomain;
};

namespace grammar {

// Per-domain caption template pools; a caption uses the last `words` entries
// followed by the category name. The domains never share a template of the
// same length, but the name tokens are common vocabulary.
inline std::vector<std::string> caption_template(int domain, int64_t words) {
  static const std::vector<std::string> pool_a{"this", "is", "a"};
  static const std::vector<std::string> pool_b{"of", "a", "photo"};
  const auto& pool = domain == 0 ? pool_a : pool_b;
  words = std::min<int64_t>(words, static_cast<int64_t>(pool.size()));
  return {pool.end() - words, pool.end()};
}
inline std::vector<std::string> question_template(bool left) {
  return {"what", "is", "on", "the", left ? "left" : "right"};
}
inline std::vector<std::string> induction_template() { return {"answer", "with"}; }
inline std::string category_name(int64_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "obj%02d", static_cast<int>(id));
  return buf;
}

}  // namespace grammar

// Deterministic function of the data config alone (not the seed), so the
// language model built from (config, seed) always matches the dataset.
inline Vocabulary build_vocabulary(const DataConfig& cfg) {
  Vocabulary v;
  for (int domain : {0, 1})
    for (const auto& w : grammar::caption_template(domain, 3)) v.add(w);
  for (bool left : {true, false})
    for (const auto& w : grammar::question_template(left)) v.add(w);
  for (const auto& w : grammar::induction_template()) v.add(w);
  v.add("or");
  for (int64_t c = 0; c < cfg.categories; ++c) v.add(grammar::category_name(c));
  int64_t filler = 0;
  while (v.size() < cfg.min_vocab) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "fill%02d", static_cast<int>(filler++));
    v.add(buf);
  }
  return v;
}

struct DatasetD {
  DataConfig cfg;
  uint64_t seed = 0;
  uint64_t data_hash = 0;
  Vocabulary vocab;
  std::vector<SyntheticCategory> categories;
  std::vector<std::vector<SyntheticSample>> samples;  // [category][sample]
  MetaSplit split;

  const std::vector<int64_t>& partition(Partition p) const {
    return p == Partition::kMetaTrain ? split.meta_train : split.meta_test;
  }
};

inline uint64_t hash_data_config(const DataConfig& cfg, uint64_t seed) {
  uint64_t h = 0xcbf29ce484222325ULL;
  const int64_t ints[] = {cfg.categories, cfg.samples_per_category, cfg.image_h,
                          cfg.image_w,    cfg.image_c,              cfg.min_vocab,
                          cfg.caption_words, static_cast<int64_t>(cfg.scenario)};
  h = fnv1a(ints, sizeof(ints), h);
  const double reals[] = {cfg.render_noise, cfg.meta_test_fraction};
  h = fnv1a(reals, sizeof(reals), h);
  h = fnv1a(&seed, sizeof(seed), h);
  return h;
}

inline void validate_split(const DatasetD& ds) {
  for (int64_t a : ds.split.meta_train)
    for (int64_t b : ds.split.meta_test)
      if (a == b)
        throw ContractError("meta split: category " + std::to_string(a) +
                            " appears in both partitions");
}

inline ImageT<double> render_sample(const SyntheticCategory& cat, const DataConfig& cfg,
                                    std::mt19937_64& rng) {
  ImageT<double> img;
  img.h = cfg.image_h;
  img.w = cfg.image_w;
  img.c = cfg.image_c;
  img.pix.resize(cat.prototype.size());
  const double shift = cat.domain == 1 ? 0.1 : 0.0;
  for (size_t i = 0; i < img.pix.size(); ++i)
    img.pix[i] = cat.prototype[i] + shift + normal_real(rng, 0.0, cat.render_noise);
  return img;
}

inline DatasetD generate_dataset(const DataConfig& cfg, uint64_t seed) {
  cfg.validate();
  DatasetD ds;
  ds.cfg = cfg;
  ds.seed = seed;
  ds.data_hash = hash_data_config(cfg, seed);
  ds.vocab = build_vocabulary(cfg);

  // category split, then domain assignment (meta-test categories shift domain
  // under the cross-domain scenario)
  std::vector<int64_t> perm(static_cast<size_t>(cfg.categories));
  std::iota(perm.begin(), perm.end(), 0);
  auto split_rng = make_engine(derive_seed(seed, 7));
  std::shuffle(perm.begin(), perm.end(), split_rng);
  const auto test_count = static_cast<int64_t>(cfg.categories * cfg.meta_test_fraction);
  ds.split.scenario = cfg.scenario;
  ds.split.meta_test.assign(perm.begin(), perm.begin() + test_count);
  ds.split.meta_train.assign(perm.begin() + test_count, perm.end());
  std::sort(ds.split.meta_test.begin(), ds.split.meta_test.end());
  std::sort(ds.split.meta_train.begin(), ds.split.meta_train.end());
  std::vector<bool> in_test(static_cast<size_t>(cfg.categories), false);
  for (int64_t c : ds.split.meta_test) in_test[static_cast<size_t>(c)] = true;

  const int64_t pix = cfg.image_h * cfg.image_w * cfg.image_c;
  for (int64_t c = 0; c < cfg.categories; ++c) {
    SyntheticCategory cat;
    cat.id = c;
    cat.name = grammar::category_name(c);
    cat.name_token = ds.vocab.id(cat.name);
    cat.domain = (cfg.scenario == Scenario::kCrossDomain && in_test[static_cast<size_t>(c)]) ? 1 : 0;
    cat.render_noise = cfg.render_noise * (cat.domain == 1 ? 1.5 : 1.0);
    auto proto_rng = make_engine(derive_seed(seed, 1000 + static_cast<uint64_t>(c)));
    cat.prototype.resize(static_cast<size_t>(pix));
    for (auto& p : cat.prototype) p = uniform_real(proto_rng, -0.5, 0.5);
    ds.categories.push_back(std::move(cat));
  }

  for (int64_t c = 0; c < cfg.categories; ++c) {
    const auto& cat = ds.categories[static_cast<size_t>(c)];
    std::vector<SyntheticSample> per_cat;
    auto caption_words = grammar::caption_template(cat.domain, cfg.caption_words);
    caption_words.push_back(cat.name);
    const TokenSequence caption = ds.vocab.encode(caption_words);
    for (int64_t i = 0; i < cfg.samples_per_category; ++i) {
      auto rng = make_engine(
          derive_seed(seed, 100000 + static_cast<uint64_t>(c * cfg.samples_per_category + i)));
      SyntheticSample s;
      s.id = c * cfg.samples_per_category + i;
      s.image = render_sample(cat, cfg, rng);
      s.caption = caption;
      s.categories_present = {c};
      per_cat.push_back(std::move(s));
    }
    ds.samples.push_back(std::move(per_cat));
  }
  validate_split(ds);
  return ds;
}

struct SupportItem {
  int64_t sample_id = 0;
  int64_t category = 0;
  ImageT<double> image;
  TokenSequence caption;
};

struct QueryItem {
  int64_t sample_id = 0;
  int64_t answer_category = 0;
  ImageT<double> image;
  TokenSequence input_text;   // empty for captioning; the question for vqa
  TokenSequence target_text;  // teacher-forced target
  int64_t answer_token = 0;   // single word scored by exact match
};

struct EpisodeConfig {
  int64_t ways = 2;
  int64_t shots = 1;
  int64_t queries_per_way = 4;
  int64_t repeats = 1;
  TaskKind task_kind = TaskKind::kCaptioning;

  void validate() const {
    if (ways < 2) throw ConfigError("episode config: ways must be >= 2");
    if (shots < 1 || queries_per_way < 1 || repeats < 1)
      throw ConfigError("episode config: shots, queries and repeats must be >= 1");
    if (queries_per_way <= shots)
      throw ConfigError("episode config: queries_per_way must exceed shots");
  }
};

// One N-way k-shot task: k*N*r captioned support pairs and m*N query triples.
struct Episode {
  int64_t ways = 0, shots = 0, queries_per_way = 0, repeats = 0;
  TaskKind kind = TaskKind::kCaptioning;
  std::vector<int64_t> category_ids;
  std::vector<SupportItem> support;
  std::vector<QueryItem> query;
};

inline ImageT<double> compose_left_right(const ImageT<double>& left, const ImageT<double>& right) {
  ImageT<double> out;
  out.h = left.h;
  out.w = left.w;
  out.c = left.c;
  out.pix.resize(left.pix.size());
  const int64_t half = left.w / 2;
  for (int64_t y = 0; y < out.h; ++y)
    for (int64_t x = 0; x < out.w; ++x)
      for (int64_t ch = 0; ch < out.c; ++ch) {
        const auto& src = x < half ? left : right;
        out.pix[(y * out.w + x) * out.c + ch] = src.pix[(y * out.w + x) * out.c + ch];
      }
  return out;
}

inline Episode sample_episode(const DatasetD& ds, Partition part, const EpisodeConfig& cfg,
                              std::mt19937_64& rng) {
  cfg.validate();
  const auto& pool = ds.partition(part);
  if (static_cast<int64_t>(pool.size()) < cfg.ways)
    throw SamplingError("sample_episode: partition has " + std::to_string(pool.size()) +
                        " categories, need " + std::to_string(cfg.ways));
  const int64_t need = cfg.shots + cfg.queries_per_way;
  if (ds.cfg.samples_per_category < need)
    throw SamplingError("sample_episode: need " + std::to_string(need) +
                        " samples per category, dataset has " +
                        std::to_string(ds.cfg.samples_per_category));

  // uniform category choice without replacement
  std::vector<int64_t> cats = pool;
  std::shuffle(cats.begin(), cats.end(), rng);
  cats.resize(static_cast<size_t>(cfg.ways));

  Episode ep;
  ep.ways = cfg.ways;
  ep.shots = cfg.shots;
  ep.queries_per_way = cfg.queries_per_way;
  ep.repeats = cfg.repeats;
  ep.kind = cfg.task_kind;
  ep.category_ids = cats;

  // per-category disjoint support/query samples
  std::vector<std::vector<int64_t>> support_idx(cats.size()), query_idx(cats.size());
  for (size_t ci = 0; ci < cats.size(); ++ci) {
    std::vector<int64_t> idx(static_cast<size_t>(ds.cfg.samples_per_category));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    support_idx[ci].assign(idx.begin(), idx.begin() + cfg.shots);
    query_idx[ci].assign(idx.begin() + cfg.shots, idx.begin() + need);
  }

  for (size_t ci = 0; ci < cats.size(); ++ci) {
    const auto& per_cat = ds.samples[static_cast<size_t>(cats[ci])];
    for (int64_t s = 0; s < cfg.shots; ++s) {
      const auto& sample = per_cat[static_cast<size_t>(support_idx[ci][static_cast<size_t>(s)])];
      SupportItem item{sample.id, cats[ci], sample.image, sample.caption};
      for (int64_t r = 0; r < cfg.repeats; ++r) ep.support.push_back(item);
    }
  }

  for (size_t ci = 0; ci < cats.size(); ++ci) {
    const auto& cat = ds.categories[static_cast<size_t>(cats[ci])];
    const auto& per_cat = ds.samples[static_cast<size_t>(cats[ci])];
    for (int64_t qi = 0; qi < cfg.queries_per_way; ++qi) {
      const auto& sample = per_cat[static_cast<size_t>(query_idx[ci][static_cast<size_t>(qi)])];
      QueryItem q;
      q.sample_id = sample.id;
      q.answer_category = cats[ci];
      q.answer_token = cat.name_token;
      if (cfg.task_kind == TaskKind::kCaptioning) {
        q.image = sample.image;
        q.target_text = sample.caption;
      } else {
        // two-object composite: the answered category paired with another
        // support category; the question addresses the answered side
        size_t other_ci = static_cast<size_t>(uniform_int(rng, 0, cfg.ways - 2));
        if (other_ci >= ci) ++other_ci;
        const auto& other_samples = ds.samples[static_cast<size_t>(cats[other_ci])];
        const auto& partner = other_samples[static_cast<size_t>(
            query_idx[other_ci][static_cast<size_t>(uniform_int(rng, 0, cfg.queries_per_way - 1))])];
        const bool answered_left = uniform_int(rng, 0, 1) == 0;
        q.image = answered_left ? compose_left_right(sample.image, partner.image)
                                : compose_left_right(partner.image, sample.image);
        q.input_text = ds.vocab.encode(grammar::question_template(answered_left));
        q.target_text = {cat.name_token};
      }
      ep.query.push_back(std::move(q));
    }
  }
  std::shuffle(ep.query.begin(), ep.query.end(), rng);
  return ep;
}

// Unbounded deterministic episode sequence; element i depends only on
// (seed, i), so training can resume from any step without replaying.
struct EpisodeStream {
  const DatasetD* dataset = nullptr;
  Partition part = Partition::kMetaTrain;
  EpisodeConfig cfg;
  uint64_t seed = 0;

  Episode at(int64_t index) const {
    auto rng = make_engine(derive_seed(seed, static_cast<uint64_t>(index)));
    return sample_episode(*dataset, part, cfg, rng);
  }
};

// --- binary container -------------------------------------------------------

namespace io {

inline void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
inline void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline void put_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<char*>(&v), 8); }
inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline void put_f64v(std::ostream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
inline void put_i64v(std::ostream& os, const std::vector<int64_t>& v) {
  put_u64(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

struct Reader {
  std::istream& is;
  void fail(const std::string& what) const { throw std::runtime_error("container: " + what); }
  uint32_t u32() {
    uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) fail("truncated u32");
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) fail("truncated u64");
    return v;
  }
  int64_t i64() {
    int64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) fail("truncated i64");
    return v;
  }
  double f64() {
    double v;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) fail("truncated f64");
    return v;
  }
  std::string str() {
    std::string s(u32(), '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(s.size()))) fail("truncated string");
    return s;
  }
  std::vector<double> f64v() {
    std::vector<double> v(u64());
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8)))
      fail("truncated f64 array");
    return v;
  }
  std::vector<int64_t> i64v() {
    std::vector<int64_t> v(u64());
    if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8)))
      fail("truncated i64 array");
    return v;
  }
};

}  // namespace io

constexpr uint32_t kDatasetMagic = 0x53444D4DU;  // "MMDS"
constexpr uint32_t kDatasetVersion = 1;

inline void save_dataset(const DatasetD& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  io::put_u32(os, kDatasetMagic);
  io::put_u32(os, kDatasetVersion);
  io::put_u64(os, ds.data_hash);
  io::put_u64(os, ds.seed);
  io::put_i64(os, ds.cfg.categories);
  io::put_i64(os, ds.cfg.samples_per_category);
  io::put_i64(os, ds.cfg.image_h);
  io::put_i64(os, ds.cfg.image_w);
  io::put_i64(os, ds.cfg.image_c);
  io::put_f64(os, ds.cfg.render_noise);
  io::put_i64(os, ds.cfg.caption_words);
  io::put_u32(os, static_cast<uint32_t>(ds.cfg.scenario));
  io::put_f64(os, ds.cfg.meta_test_fraction);
  io::put_i64(os, ds.cfg.min_vocab);
  io::put_u32(os, static_cast<uint32_t>(ds.vocab.size()));
  for (const auto& w : ds.vocab.words()) io::put_str(os, w);
  for (const auto& c : ds.categories) {
    io::put_i64(os, c.id);
    io::put_i64(os, c.name_token);
    io::put_u32(os, static_cast<uint32_t>(c.domain));
    io::put_f64(os, c.render_noise);
    io::put_f64v(os, c.prototype);
  }
  io::put_i64v(os, ds.split.meta_train);
  io::put_i64v(os, ds.split.meta_test);
  for (const auto& per_cat : ds.samples)
    for (const auto& s : per_cat) {
      io::put_i64(os, s.id);
      io::put_i64v(os, s.caption);
      io::put_i64v(os, s.categories_present);
      io::put_f64v(os, s.image.pix);
    }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline DatasetD load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset '" + path + "'");
  io::Reader r{is};
  if (r.u32() != kDatasetMagic) r.fail("bad magic (not a dataset container)");
  if (r.u32() != kDatasetVersion) r.fail("unsupported dataset version");
  DatasetD ds;
  ds.data_hash = r.u64();
  ds.seed = r.u64();
  ds.cfg.categories = r.i64();
  ds.cfg.samples_per_category = r.i64();
  ds.cfg.image_h = r.i64();
  ds.cfg.image_w = r.i64();
  ds.cfg.image_c = r.i64();
  ds.cfg.render_noise = r.f64();
  ds.cfg.caption_words = r.i64();
  ds.cfg.scenario = static_cast<Scenario>(r.u32());
  ds.cfg.meta_test_fraction = r.f64();
  ds.cfg.min_vocab = r.i64();
  const uint32_t vocab_count = r.u32();
  Vocabulary vocab;
  for (uint32_t i = 0; i < vocab_count; ++i) {
    const std::string w = r.str();
    if (i > 2) vocab.add(w);  // specials are implicit
  }
  ds.vocab = vocab;
  for (int64_t c = 0; c < ds.cfg.categories; ++c) {
    SyntheticCategory cat;
    cat.id = r.i64();
    cat.name_token = r.i64();
    cat.domain = static_cast<int>(r.u32());
    cat.render_noise = r.f64();
    cat.prototype = r.f64v();
    cat.name = ds.vocab.word(cat.name_token);
    ds.categories.push_back(std::move(cat));
  }
  ds.split.meta_train = r.i64v();
  ds.split.meta_test = r.i64v();
  ds.split.scenario = ds.cfg.scenario;
  for (int64_t c = 0; c < ds.cfg.categories; ++c) {
    std::vector<SyntheticSample> per_cat;
    for (int64_t i = 0; i < ds.cfg.samples_per_category; ++i) {
      SyntheticSample s;
      s.id = r.i64();
      s.caption = r.i64v();
      s.categories_present = r.i64v();
      s.image.h = ds.cfg.image_h;
      s.image.w = ds.cfg.image_w;
      s.image.c = ds.cfg.image_c;
      s.image.pix = r.f64v();
      per_cat.push_back(std::move(s));
    }
    ds.samples.push_back(std::move(per_cat));
  }
  validate_split(ds);
  return ds;
}

inline void save_manifest(const DatasetD& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << "dataset_hash " << ds.data_hash << "\n";
  os << "seed " << ds.seed << "\n";
  os << "scenario " << to_string(ds.cfg.scenario) << "\n";
  os << "vocab_size " << ds.vocab.size() << "\n";
  os << "categories " << ds.cfg.categories << "\n";
  os << "samples_per_category " << ds.cfg.samples_per_category << "\n";
  for (const auto& c : ds.categories) {
    const bool test =
        std::find(ds.split.meta_test.begin(), ds.split.meta_test.end(), c.id) !=
        ds.split.meta_test.end();
    os << "category " << c.id << " " << c.name << " domain=" << c.domain
       << " split=" << (test ? "meta_test" : "meta_train") << "\n";
  }
}

}  // namespace metamap
