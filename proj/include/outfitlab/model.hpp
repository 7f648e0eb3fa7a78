#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "outfitlab/error.hpp"
#include "outfitlab/rng.hpp"
#include "outfitlab/tape.hpp"

namespace outfitlab::model {

using diff::Tape;
using diff::Tensor;
using diff::Var;

// Capacity tiers: the width of the item encoder's hidden layer. One wide
// teacher, three progressively narrower students.
enum class Tier { teacher, xs, s, m };

inline int tier_width(Tier t) {
  switch (t) {
    case Tier::teacher: return 512;
    case Tier::xs: return 32;
    case Tier::s: return 64;
    case Tier::m: return 128;
  }
  throw ConfigError("unknown tier");
}

inline const char* tier_name(Tier t) {
  switch (t) {
    case Tier::teacher: return "teacher";
    case Tier::xs: return "xs";
    case Tier::s: return "s";
    case Tier::m: return "m";
  }
  throw ConfigError("unknown tier");
}

inline Tier parse_tier(const std::string& s) {
  if (s == "teacher") return Tier::teacher;
  if (s == "xs") return Tier::xs;
  if (s == "s") return Tier::s;
  if (s == "m") return Tier::m;
  throw ConfigError("unknown tier '" + s + "' (expected teacher, xs, s, or m)");
}

struct ModelConfig {
  int d_in = 32;      // raw item feature width
  int d = 128;        // representation width
  int heads = 8;
  int sab_count = 2;  // stacked self-attention blocks
  int ff_mult = 2;    // hidden width of the residual feed-forward, as a multiple of d
  int user_count = 0;
  Tier tier = Tier::teacher;

  int item_hidden() const { return tier_width(tier); }
  int ff_hidden() const { return ff_mult * d; }

  void validate() const {
    if (d_in < 1 || d < 1 || user_count < 1) throw ConfigError("model: dimensions must be positive");
    if (heads < 1 || d % heads != 0)
      throw ConfigError("model: head count must divide the representation width");
    if (sab_count < 1) throw ConfigError("model: at least one self-attention block");
    if (ff_mult < 1) throw ConfigError("model: feed-forward multiplier must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Attention projections are square [d x d] with the heads living in column
// blocks, so one matmul projects every head at once. No biases.
template <class Real>
struct AttentionParams {
  Tensor<Real> wq, wk, wv, wo;
};

template <class Real>
struct FeedForwardParams {
  Tensor<Real> w1, b1, w2, b2;
};

template <class Real>
struct LayerNormParams {
  Tensor<Real> gain, bias;
};

// One residual attention block: LN(x + MHA) followed by LN(h + FF(h)).
// Used both for the stacked self-attention layers and for seed pooling.
template <class Real>
struct BlockParams {
  AttentionParams<Real> attn;
  LayerNormParams<Real> ln_attn;
  FeedForwardParams<Real> ff;
  LayerNormParams<Real> ln_ff;
};

template <class Real>
struct ModelParams {
  ModelConfig config;
  FeedForwardParams<Real> item_ff;  // d_in -> tier width -> d
  std::vector<BlockParams<Real>> sabs;
  Tensor<Real> pool_seed;  // [1 x d] learned query that pools a set into one row
  BlockParams<Real> pool;
  FeedForwardParams<Real> view_proj;  // d -> d -> d head for contrastive projections
  Tensor<Real> users;                 // [user_count x d]
};

// Visits every trainable tensor in a fixed order; the order defines the
// checkpoint layout and the optimizer slot alignment.
template <class Real, class Fn>
void for_each_param(ModelParams<Real>& p, Fn&& fn) {
  auto ff = [&fn](const std::string& prefix, FeedForwardParams<Real>& f) {
    fn(prefix + ".w1", f.w1);
    fn(prefix + ".b1", f.b1);
    fn(prefix + ".w2", f.w2);
    fn(prefix + ".b2", f.b2);
  };
  auto block = [&fn, &ff](const std::string& prefix, BlockParams<Real>& b) {
    fn(prefix + ".attn.wq", b.attn.wq);
    fn(prefix + ".attn.wk", b.attn.wk);
    fn(prefix + ".attn.wv", b.attn.wv);
    fn(prefix + ".attn.wo", b.attn.wo);
    fn(prefix + ".ln_attn.gain", b.ln_attn.gain);
    fn(prefix + ".ln_attn.bias", b.ln_attn.bias);
    ff(prefix + ".ff", b.ff);
    fn(prefix + ".ln_ff.gain", b.ln_ff.gain);
    fn(prefix + ".ln_ff.bias", b.ln_ff.bias);
  };
  ff("item_ff", p.item_ff);
  for (std::size_t i = 0; i < p.sabs.size(); ++i) block("sab" + std::to_string(i), p.sabs[i]);
  fn("pool.seed", p.pool_seed);
  block("pool", p.pool);
  ff("view_proj", p.view_proj);
  fn("users", p.users);
}

template <class Real, class Fn>
void for_each_param(const ModelParams<Real>& p, Fn&& fn) {
  for_each_param(const_cast<ModelParams<Real>&>(p),
                 [&fn](const std::string& name, Tensor<Real>& t) {
                   fn(name, static_cast<const Tensor<Real>&>(t));
                 });
}

namespace detail {

// rng == nullptr allocates zero-filled tensors of the right shapes, which
// is what checkpoint loading starts from.
template <class Real>
ModelParams<Real> build_model(const ModelConfig& cfg, RngStream* rng) {
  cfg.validate();
  ModelParams<Real> p;
  p.config = cfg;
  const int d = cfg.d;

  auto linear = [rng](int a, int b) {
    if (!rng) return diff::zeros<Real>(a, b);
    return diff::gaussian<Real>(a, b, *rng, std::sqrt(2.0 / (a + b)));
  };
  auto make_ff = [&](FeedForwardParams<Real>& f, int in, int hidden, int out) {
    f.w1 = linear(in, hidden);
    f.b1 = diff::zeros<Real>(1, hidden);
    f.w2 = linear(hidden, out);
    f.b2 = diff::zeros<Real>(1, out);
  };
  auto make_block = [&](BlockParams<Real>& b) {
    b.attn.wq = linear(d, d);
    b.attn.wk = linear(d, d);
    b.attn.wv = linear(d, d);
    b.attn.wo = linear(d, d);
    b.ln_attn.gain = diff::full<Real>(1, d, Real(1));
    b.ln_attn.bias = diff::zeros<Real>(1, d);
    make_ff(b.ff, d, cfg.ff_hidden(), d);
    b.ln_ff.gain = diff::full<Real>(1, d, Real(1));
    b.ln_ff.bias = diff::zeros<Real>(1, d);
  };

  make_ff(p.item_ff, cfg.d_in, cfg.item_hidden(), d);
  p.sabs.resize(static_cast<std::size_t>(cfg.sab_count));
  for (auto& b : p.sabs) make_block(b);
  p.pool_seed = rng ? diff::gaussian<Real>(1, d, *rng, 1.0 / std::sqrt(double(d)))
                    : diff::zeros<Real>(1, d);
  make_block(p.pool);
  make_ff(p.view_proj, d, d, d);
  p.users = rng ? diff::gaussian<Real>(cfg.user_count, d, *rng, 1.0 / std::sqrt(double(d)))
                : diff::zeros<Real>(cfg.user_count, d);
  return p;
}

}  // namespace detail

template <class Real>
ModelParams<Real> init_model(const ModelConfig& cfg, RngStream& rng) {
  return detail::build_model<Real>(cfg, &rng);
}

template <class Real>
ModelParams<Real> zeros_model(const ModelConfig& cfg) {
  return detail::build_model<Real>(cfg, nullptr);
}

// Tape handles for every parameter of one model, so a training step binds
// the parameters once and reuses the handles across the whole graph.
template <class Real>
struct BoundModel {
  ModelConfig config;
  std::vector<std::pair<std::string, Var<Real>>> named;
  std::vector<Var<Real>> ordered;

  Var<Real> operator[](const std::string& name) const {
    for (const auto& [n, v] : named)
      if (n == name) return v;
    throw ConfigError("model parameter '" + name + "' not found");
  }
};

template <class Real>
BoundModel<Real> bind(Tape<Real>& t, const ModelParams<Real>& params, bool trainable) {
  BoundModel<Real> bm;
  bm.config = params.config;
  for_each_param(params, [&](const std::string& name, const Tensor<Real>& tensor) {
    auto v = t.input(tensor, trainable);
    bm.named.emplace_back(name, v);
    bm.ordered.push_back(v);
  });
  return bm;
}

namespace detail {

template <class Real>
Var<Real> feed_forward(Tape<Real>& t, const BoundModel<Real>& bm, const std::string& prefix,
                       Var<Real> x) {
  auto h = diff::relu(t, diff::add_row_bias(t, diff::matmul(t, x, bm[prefix + ".w1"]),
                                            bm[prefix + ".b1"]));
  return diff::add_row_bias(t, diff::matmul(t, h, bm[prefix + ".w2"]), bm[prefix + ".b2"]);
}

// LN(q_in + MHA(q_in, kv_in)) then LN(h + FF(h)). q_in and kv_in coincide
// for self-attention; for pooling q_in is the repeated seed row.
template <class Real>
Var<Real> residual_block(Tape<Real>& t, const BoundModel<Real>& bm, const std::string& prefix,
                         Var<Real> q_in, Var<Real> kv_in,
                         const std::vector<diff::AttentionGroup>& groups) {
  auto q = diff::matmul(t, q_in, bm[prefix + ".attn.wq"]);
  auto k = diff::matmul(t, kv_in, bm[prefix + ".attn.wk"]);
  auto v = diff::matmul(t, kv_in, bm[prefix + ".attn.wv"]);
  auto mixed = diff::multihead_grouped_attention(t, q, k, v, groups, bm.config.heads);
  auto mha = diff::matmul(t, mixed, bm[prefix + ".attn.wo"]);
  auto h = diff::layer_norm(t, diff::add(t, q_in, mha), bm[prefix + ".ln_attn.gain"],
                            bm[prefix + ".ln_attn.bias"]);
  auto f = feed_forward(t, bm, prefix + ".ff", h);
  return diff::layer_norm(t, diff::add(t, h, f), bm[prefix + ".ln_ff.gain"],
                          bm[prefix + ".ln_ff.bias"]);
}

}  // namespace detail

// Encodes a batch of outfits in one pass. item_features holds the raw
// features of every item of every outfit stacked row-wise; group_sizes
// gives each outfit's item count in order. Returns one representation row
// per outfit, [G x d]. Order of items within an outfit does not affect its
// row (the blocks are permutation-equivariant and pooling is a seed query
// over the set).
template <class Real>
Var<Real> encode_outfits(Tape<Real>& t, const BoundModel<Real>& bm, Var<Real> item_features,
                         const std::vector<int>& group_sizes) {
  const auto& feats = t.value(item_features);
  if (feats.cols != bm.config.d_in)
    throw DimensionError("encode_outfits: item features are " + feats.shape_str() +
                         " but the model expects width " + std::to_string(bm.config.d_in));
  long total = 0;
  std::vector<diff::AttentionGroup> self_groups, pool_groups;
  self_groups.reserve(group_sizes.size());
  pool_groups.reserve(group_sizes.size());
  for (int n : group_sizes) {
    if (n < 1) throw DimensionError("encode_outfits: empty outfit");
    total += n;
    self_groups.push_back({n, n});
    pool_groups.push_back({1, n});
  }
  if (total != feats.rows)
    throw DimensionError("encode_outfits: group sizes cover " + std::to_string(total) +
                         " rows, features have " + std::to_string(feats.rows));

  auto x = detail::feed_forward(t, bm, "item_ff", item_features);
  for (int i = 0; i < bm.config.sab_count; ++i)
    x = detail::residual_block(t, bm, "sab" + std::to_string(i), x, x, self_groups);

  auto seeds = diff::repeat_rows(t, bm["pool.seed"], static_cast<int>(group_sizes.size()));
  return detail::residual_block(t, bm, "pool", seeds, x, pool_groups);
}

// Projection head applied to outfit representations before the contrastive
// similarity step.
template <class Real>
Var<Real> project_views(Tape<Real>& t, const BoundModel<Real>& bm, Var<Real> reps) {
  return detail::feed_forward(t, bm, "view_proj", reps);
}

// Cosine preference of user_ids[i] for outfit representation row i.
template <class Real>
Var<Real> score_outfit_rows(Tape<Real>& t, const BoundModel<Real>& bm, Var<Real> reps,
                            const std::vector<int>& user_ids) {
  const auto& r = t.value(reps);
  if (static_cast<int>(user_ids.size()) != r.rows)
    throw DimensionError("score_outfit_rows: one user id per representation row");
  for (int u : user_ids)
    if (u < 0 || u >= bm.config.user_count)
      throw DataError("score_outfit_rows: unknown user id " + std::to_string(u));
  auto user_rows = diff::gather_rows(t, bm["users"], user_ids);
  return diff::rows_cosine(t, reps, user_rows);
}

// --- convenience entry points that run the graph without gradients ---

template <class Real>
Tensor<Real> encode_outfits_value(const ModelParams<Real>& params,
                                  const Tensor<Real>& item_features,
                                  const std::vector<int>& group_sizes) {
  Tape<Real> t;
  auto bm = bind(t, params, false);
  auto out = encode_outfits(t, bm, t.input(item_features), group_sizes);
  return t.value(out);
}

template <class Real>
std::vector<Real> score_outfits(const ModelParams<Real>& params, const Tensor<Real>& item_features,
                                const std::vector<int>& group_sizes,
                                const std::vector<int>& user_ids) {
  Tape<Real> t;
  auto bm = bind(t, params, false);
  auto reps = encode_outfits(t, bm, t.input(item_features), group_sizes);
  auto scores = score_outfit_rows(t, bm, reps, user_ids);
  const auto& v = t.value(scores);
  return std::vector<Real>(v.data.begin(), v.data.end());
}

// Preference of one user for one outfit given as stacked item feature rows.
template <class Real>
Real preference_score(const ModelParams<Real>& params, int user_id,
                      const Tensor<Real>& outfit_items) {
  return score_outfits(params, outfit_items, {outfit_items.rows}, {user_id})[0];
}

}  // namespace outfitlab::model
