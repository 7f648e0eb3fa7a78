#include "outfitlab/augment.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>

#include "outfitlab/error.hpp"
#include "outfitlab/optim.hpp"
#include "outfitlab/tape.hpp"

namespace outfitlab::augment {

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::identity: return "identity";
    case Kind::erase: return "erase";
    case Kind::replace: return "replace";
  }
  throw ConfigError("unknown augmentation kind");
}

Kind parse_kind(const std::string& s) {
  if (s == "identity") return Kind::identity;
  if (s == "erase") return Kind::erase;
  if (s == "replace") return Kind::replace;
  throw ConfigError("unknown augmentation '" + s + "' (expected identity, erase, or replace)");
}

void AutoencoderConfig::validate() const {
  if (d_lat < 1) throw ConfigError("autoencoder: latent width must be positive");
  if (epochs < 0) throw ConfigError("autoencoder: epochs cannot be negative");
  if (lr <= 0) throw ConfigError("autoencoder: learning rate must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("autoencoder: momentum must lie in [0, 1)");
  if (batch < 1) throw ConfigError("autoencoder: batch size must be positive");
  if (holdout_frac < 0 || holdout_frac >= 1)
    throw ConfigError("autoencoder: holdout fraction must lie in [0, 1)");
}

AutoencoderParams init_autoencoder(int d_in, const AutoencoderConfig& cfg, RngStream& rng) {
  cfg.validate();
  if (d_in < 1) throw ConfigError("autoencoder: input width must be positive");
  AutoencoderParams p;
  p.config = cfg;
  p.d_in = d_in;
  p.enc_w = diff::gaussian<float>(d_in, cfg.d_lat, rng, 1.0 / std::sqrt(double(d_in)));
  p.enc_b = diff::zeros<float>(1, cfg.d_lat);
  p.dec_w = diff::gaussian<float>(cfg.d_lat, d_in, rng, 1.0 / std::sqrt(double(cfg.d_lat)));
  p.dec_b = diff::zeros<float>(1, d_in);
  return p;
}

namespace {

struct BoundAutoencoder {
  diff::Var<float> enc_w, enc_b, dec_w, dec_b;
};

diff::Var<float> reconstruct(diff::Tape<float>& t, const BoundAutoencoder& b, bool relu_encoder,
                             diff::Var<float> x) {
  auto h = diff::add_row_bias(t, diff::matmul(t, x, b.enc_w), b.enc_b);
  if (relu_encoder) h = diff::relu(t, h);
  return diff::add_row_bias(t, diff::matmul(t, h, b.dec_w), b.dec_b);
}

double mse_of(const AutoencoderParams& p, const diff::Tensor<float>& rows) {
  diff::Tape<float> t;
  BoundAutoencoder b{t.input(p.enc_w), t.input(p.enc_b), t.input(p.dec_w), t.input(p.dec_b)};
  auto x = t.input(rows);
  auto err = diff::sub(t, reconstruct(t, b, p.config.relu_encoder, x), x);
  auto loss = diff::mean_all(t, diff::mul(t, err, err));
  return double(t.value(loss).at(0, 0));
}

diff::Tensor<float> gather(const diff::Tensor<float>& src, const std::vector<int>& rows,
                           std::size_t first, std::size_t count) {
  diff::Tensor<float> out(int(count), src.cols);
  for (std::size_t r = 0; r < count; ++r)
    for (int c = 0; c < src.cols; ++c)
      out.at(int(r), c) = src.at(rows[first + r], c);
  return out;
}

}  // namespace

AutoencoderReport train_autoencoder(AutoencoderParams& params, const diff::Tensor<float>& features,
                                    RngStream& rng) {
  params.config.validate();
  if (features.rows < 1) throw DataError("autoencoder: no items to train on");
  if (features.cols != params.d_in)
    throw DimensionError("autoencoder: features are " + features.shape_str() +
                         " but the model expects width " + std::to_string(params.d_in));

  std::vector<int> order(std::size_t(features.rows));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t holdout = features.rows >= 2
                            ? std::max<std::size_t>(
                                  1, std::size_t(std::floor(features.rows *
                                                            params.config.holdout_frac)))
                            : 0;
  std::size_t train_count = order.size() - holdout;
  if (train_count == 0) {
    train_count = order.size();
    holdout = 0;
  }
  auto holdout_rows = holdout ? gather(features, order, train_count, holdout)
                              : gather(features, order, 0, train_count);

  AutoencoderReport report;
  report.init_holdout_mse = mse_of(params, holdout_rows);

  diff::Tensor<float> v_enc_w, v_enc_b, v_dec_w, v_dec_b;
  const float lr = float(params.config.lr);
  const float momentum = float(params.config.momentum);

  for (int epoch = 0; epoch < params.config.epochs; ++epoch) {
    std::vector<int> epoch_order(order.begin(), order.begin() + long(train_count));
    rng.shuffle(epoch_order);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_count; start += std::size_t(params.config.batch)) {
      std::size_t count = std::min<std::size_t>(std::size_t(params.config.batch),
                                                train_count - start);
      auto rows = gather(features, epoch_order, start, count);

      diff::Tape<float> t;
      BoundAutoencoder b{t.input(params.enc_w, true), t.input(params.enc_b, true),
                         t.input(params.dec_w, true), t.input(params.dec_b, true)};
      auto x = t.input(rows);
      auto err = diff::sub(t, reconstruct(t, b, params.config.relu_encoder, x), x);
      auto loss = diff::mean_all(t, diff::mul(t, err, err));
      double value = double(t.value(loss).at(0, 0));
      if (!std::isfinite(value)) throw DivergenceError("autoencoder: reconstruction loss diverged");
      epoch_loss += value;
      ++batches;
      t.backward(loss);
      diff::sgd_momentum_step(params.enc_w, v_enc_w, t.grad(b.enc_w), lr, momentum);
      diff::sgd_momentum_step(params.enc_b, v_enc_b, t.grad(b.enc_b), lr, momentum);
      diff::sgd_momentum_step(params.dec_w, v_dec_w, t.grad(b.dec_w), lr, momentum);
      diff::sgd_momentum_step(params.dec_b, v_dec_b, t.grad(b.dec_b), lr, momentum);
    }
    report.train_mse_per_epoch.push_back(batches ? epoch_loss / double(batches) : 0.0);
  }

  report.final_holdout_mse = mse_of(params, holdout_rows);
  return report;
}

diff::Tensor<float> encode_latent(const AutoencoderParams& params,
                                  const diff::Tensor<float>& features) {
  if (features.cols != params.d_in)
    throw DimensionError("autoencoder: features are " + features.shape_str() +
                         " but the model expects width " + std::to_string(params.d_in));
  diff::Tape<float> t;
  auto h = diff::add_row_bias(t, diff::matmul(t, t.input(features), t.input(params.enc_w)),
                              t.input(params.enc_b));
  if (params.config.relu_encoder) h = diff::relu(t, h);
  return t.value(h);
}

SimilarityIndex build_similarity_index(const data::Dataset& ds, const AutoencoderParams& params) {
  SimilarityIndex index;
  index.d_lat = params.config.d_lat;
  index.by_category.resize(ds.categories.size());
  diff::Tensor<float> all(int(ds.items.size()), ds.config.d_in);
  for (const auto& it : ds.items)
    for (int c = 0; c < ds.config.d_in; ++c) all.at(it.id, c) = it.features[std::size_t(c)];
  auto lat = encode_latent(params, all);
  for (const auto& it : ds.items) {
    index.category_of.push_back(it.category);
    index.by_category[std::size_t(it.category)].push_back(it.id);
    std::vector<float> row(std::size_t(lat.cols));
    for (int c = 0; c < lat.cols; ++c) row[std::size_t(c)] = lat.at(it.id, c);
    index.latents.push_back(std::move(row));
  }
  return index;
}

std::vector<int> SimilarityIndex::top_neighbors(int item_id, int k) const {
  if (item_id < 0 || item_id >= int(latents.size()))
    throw DataError("similarity index: unknown item " + std::to_string(item_id));
  if (k < 1) throw ConfigError("similarity index: k must be positive");

  const auto& q = latents[std::size_t(item_id)];
  double qn = 0;
  for (float v : q) qn += double(v) * v;
  qn = std::sqrt(qn);

  // Degenerate latents (all-zero after relu) cannot be ranked by angle;
  // they sort below every genuine similarity instead of failing the query.
  auto sim_to = [this, &q, qn](int other) {
    const auto& o = latents[std::size_t(other)];
    double dot = 0, on = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
      dot += double(q[i]) * o[i];
      on += double(o[i]) * o[i];
    }
    on = std::sqrt(on);
    if (qn < 1e-12 || on < 1e-12) return -2.0;
    return dot / (qn * on);
  };

  std::vector<std::pair<double, int>> ranked;
  for (int other : by_category[std::size_t(category_of[std::size_t(item_id)])]) {
    if (other == item_id) continue;
    ranked.emplace_back(sim_to(other), other);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (int(ranked.size()) > k) ranked.resize(std::size_t(k));
  std::vector<int> out;
  for (const auto& [s, id] : ranked) out.push_back(id);
  return out;
}

void dump_index(const std::string& path, const SimilarityIndex& index) {
  static_assert(std::endian::native == std::endian::little,
                "index dump assumes a little-endian host");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open index dump for writing: " + path);
  os.write("OLAIDX01", 8);
  auto put_u32 = [&os](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
  put_u32(std::uint32_t(index.latents.size()));
  put_u32(std::uint32_t(index.d_lat));
  for (std::size_t id = 0; id < index.latents.size(); ++id) {
    put_u32(std::uint32_t(id));
    put_u32(std::uint32_t(index.category_of[id]));
    os.write(reinterpret_cast<const char*>(index.latents[id].data()),
             std::streamsize(index.latents[id].size() * sizeof(float)));
  }
  os.flush();
  if (!os) throw DataError("failed while writing index dump: " + path);
}

std::vector<int> erase_item(const std::vector<int>& items, RngStream& rng, int* altered) {
  if (items.size() < 2)
    throw AugmentationInapplicable("erase needs at least two items to keep the outfit nonempty");
  int pos = int(rng.uniform_int(0, std::int64_t(items.size()) - 1));
  std::vector<int> out;
  out.reserve(items.size() - 1);
  for (int i = 0; i < int(items.size()); ++i)
    if (i != pos) out.push_back(items[std::size_t(i)]);
  if (altered) *altered = pos;
  return out;
}

std::vector<int> replace_item(const std::vector<int>& items, const SimilarityIndex& index, int k,
                              RngStream& rng, int* altered) {
  if (items.empty()) throw AugmentationInapplicable("replace needs a nonempty outfit");
  int pos = int(rng.uniform_int(0, std::int64_t(items.size()) - 1));
  auto neighbors = index.top_neighbors(items[std::size_t(pos)], k);
  // Never duplicate an item the outfit already wears.
  neighbors.erase(std::remove_if(neighbors.begin(), neighbors.end(),
                                 [&items](int id) {
                                   return std::find(items.begin(), items.end(), id) != items.end();
                                 }),
                  neighbors.end());
  if (neighbors.empty())
    throw AugmentationInapplicable("replace found no usable neighbor for item " +
                                   std::to_string(items[std::size_t(pos)]));
  auto out = items;
  out[std::size_t(pos)] =
      neighbors[std::size_t(rng.uniform_int(0, std::int64_t(neighbors.size()) - 1))];
  if (altered) *altered = pos;
  return out;
}

namespace {

std::vector<int> apply_kind(const std::vector<int>& items, Kind kind, const SimilarityIndex& index,
                            int k, RngStream& rng, int* altered, bool* fell_back) {
  try {
    switch (kind) {
      case Kind::identity: *altered = -1; return items;
      case Kind::erase: return erase_item(items, rng, altered);
      case Kind::replace: return replace_item(items, index, k, rng, altered);
    }
    throw ConfigError("unknown augmentation kind");
  } catch (const AugmentationInapplicable&) {
    *fell_back = true;
    *altered = -1;
    return items;
  }
}

}  // namespace

Views make_views(const std::vector<int>& items, Kind first, Kind second,
                 const SimilarityIndex& index, int k, RngStream& rng) {
  if (first == Kind::identity && second == Kind::identity)
    throw ConfigError("the augmentation pair (identity, identity) is not allowed");
  if (items.empty()) throw DataError("cannot augment an empty outfit");

  Views v;
  int altered_a = -1, altered_b = -1;
  v.a = apply_kind(items, first, index, k, rng, &altered_a, &v.fallback);

  // Same-kind pairs must touch different positions; resample the second
  // leg until it does. Outfits with a single item cannot satisfy that and
  // degrade to an identity second leg.
  if (first == second && items.size() < 2) {
    v.fallback = true;
    v.b = items;
    return v;
  }
  for (int attempt = 0; attempt < 64; ++attempt) {
    bool fb = false;
    v.b = apply_kind(items, second, index, k, rng, &altered_b, &fb);
    if (fb) {
      v.fallback = true;
      return v;
    }
    if (first != second || altered_b != altered_a) return v;
  }
  throw DataError("could not draw distinct augmentation positions");
}

}  // namespace outfitlab::augment
