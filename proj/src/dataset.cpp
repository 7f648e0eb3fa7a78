#include "outfitlab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "outfitlab/error.hpp"

namespace outfitlab::data {

namespace {

struct SplitCounts {
  int train = 0, val_teacher = 0, val_student = 0, test = 0;
};

// 9 : 2 : 2 over train : validation : test, validation halved between the
// teacher and student phases (teacher gets the odd one).
SplitCounts split_counts(int positives) {
  SplitCounts s;
  int n_train = static_cast<int>(std::lround(positives * 9.0 / 13.0));
  int n_val = static_cast<int>(std::lround(positives * 2.0 / 13.0));
  int n_test = positives - n_train - n_val;
  s.train = n_train;
  s.val_teacher = (n_val + 1) / 2;
  s.val_student = n_val / 2;
  s.test = n_test;
  return s;
}

std::vector<int> canonical_key(std::vector<int> items) {
  std::sort(items.begin(), items.end());
  return items;
}

std::string format_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void WorldConfig::validate() const {
  if (users < 1) throw ConfigError("world: at least one user");
  if (categories.empty()) throw ConfigError("world: at least one category");
  {
    std::set<std::string> names(categories.begin(), categories.end());
    if (names.size() != categories.size()) throw ConfigError("world: duplicate category names");
    for (const auto& c : categories)
      if (c.empty() || c.find_first_of(" \t,") != std::string::npos)
        throw ConfigError("world: category names must be non-empty without spaces or commas");
  }
  if (d_in < 2) throw ConfigError("world: feature width must be at least 2");
  if (style_dim < 1 || style_dim > d_in)
    throw ConfigError("world: style dimension must lie in [1, d_in]");
  if (items_per_category < 4) throw ConfigError("world: at least four items per category");
  if (positives_per_user < 13)
    throw ConfigError("world: at least 13 positives per user so every split is non-empty");
  if (prototype_scale <= 0 || style_scale <= 0)
    throw ConfigError("world: scales must be positive");
  if (noise_scale < 0) throw ConfigError("world: noise scale cannot be negative");
  if (preference_temp <= 0) throw ConfigError("world: preference temperature must be positive");
  if (train_pool_frac <= 0.0 || train_pool_frac >= 1.0)
    throw ConfigError("world: train pool fraction must lie strictly between 0 and 1");
  if (extra_item_prob < 0.0 || extra_item_prob > 1.0)
    throw ConfigError("world: extra item probability must lie in [0, 1]");
  if (cold_users < 0) throw ConfigError("world: cold user count cannot be negative");
  if (cold_users > 0 && cold_positives < 2)
    throw ConfigError("world: cold users need at least two positives");

  int train_pool = static_cast<int>(std::ceil(items_per_category * train_pool_frac));
  int test_pool = items_per_category - train_pool;
  int per_cat_need = variable_size ? 2 : 1;
  if (train_pool < 2 * per_cat_need || test_pool < 2 * per_cat_need)
    throw ConfigError("world: item pools too small for the requested outfit sizes");

  // Distinct-outfit feasibility, loosely: the train-side pool must offer
  // several times more combinations than outfits requested.
  SplitCounts sc = split_counts(positives_per_user);
  double combos = 1.0;
  for (std::size_t c = 0; c < categories.size() && combos < 1e9; ++c) combos *= train_pool;
  if (combos < 4.0 * (sc.train + sc.val_teacher + sc.val_student))
    throw ConfigError("world: too few distinct outfits available per user");
}

void Dataset::finalize() {
  items_by_category.assign(categories.size(), {});
  for (const auto& it : items) {
    if (it.category < 0 || it.category >= static_cast<int>(categories.size()))
      throw DataError("dataset: item " + std::to_string(it.id) + " names an unknown category");
    items_by_category[static_cast<std::size_t>(it.category)].push_back(it.id);
  }

  positive_keys.assign(static_cast<std::size_t>(user_count) + cold.size(), {});
  train_size_profiles.clear();
  auto add_key = [this](int user, const Outfit& o) {
    positive_keys[static_cast<std::size_t>(user)].push_back(canonical_key(o.items));
  };
  for (int u = 0; u < user_count; ++u) {
    const auto& sp = splits[static_cast<std::size_t>(u)];
    for (int id : sp.train) {
      add_key(u, outfit(id));
      std::vector<int> profile(categories.size(), 0);
      for (int item_id : outfit(id).items)
        ++profile[static_cast<std::size_t>(item(item_id).category)];
      train_size_profiles.push_back(std::move(profile));
    }
    for (int id : sp.val_teacher) add_key(u, outfit(id));
    for (int id : sp.val_student) add_key(u, outfit(id));
    for (int id : sp.test) add_key(u, outfit(id));
  }
  for (std::size_t c = 0; c < cold.size(); ++c)
    for (int id : cold[c].outfits) add_key(user_count + static_cast<int>(c), outfit(id));
  for (auto& keys : positive_keys) std::sort(keys.begin(), keys.end());
}

bool Dataset::is_user_positive(int user, const std::vector<int>& outfit_items) const {
  if (user < 0 || user >= static_cast<int>(positive_keys.size()))
    throw DataError("dataset: unknown user " + std::to_string(user));
  const auto& keys = positive_keys[static_cast<std::size_t>(user)];
  return std::binary_search(keys.begin(), keys.end(), canonical_key(outfit_items));
}

const Outfit& Dataset::outfit(int id) const {
  if (id < 0 || id >= static_cast<int>(outfits.size()))
    throw DataError("dataset: unknown outfit id " + std::to_string(id));
  return outfits[static_cast<std::size_t>(id)];
}

const Item& Dataset::item(int id) const {
  if (id < 0 || id >= static_cast<int>(items.size()))
    throw DataError("dataset: unknown item id " + std::to_string(id));
  return items[static_cast<std::size_t>(id)];
}

diff::Tensor<float> Dataset::item_features(const std::vector<int>& item_ids) const {
  diff::Tensor<float> out(static_cast<int>(item_ids.size()), config.d_in);
  for (std::size_t r = 0; r < item_ids.size(); ++r) {
    const auto& f = item(item_ids[r]).features;
    for (int c = 0; c < config.d_in; ++c) out.at(static_cast<int>(r), c) = f[static_cast<std::size_t>(c)];
  }
  return out;
}

double Dataset::oracle_score(int user, const std::vector<int>& outfit_items) const {
  if (user < 0 || user >= static_cast<int>(oracle.size()))
    throw DataError("dataset: no oracle row for user " + std::to_string(user));
  if (outfit_items.empty()) throw DataError("dataset: empty outfit");
  std::vector<double> mean(static_cast<std::size_t>(config.d_in), 0.0);
  for (int id : outfit_items) {
    const auto& f = item(id).features;
    for (int c = 0; c < config.d_in; ++c) mean[static_cast<std::size_t>(c)] += f[static_cast<std::size_t>(c)];
  }
  double dot = 0, nm = 0, nz = 0;
  const auto& z = oracle[static_cast<std::size_t>(user)];
  for (int c = 0; c < config.d_in; ++c) {
    double m = mean[static_cast<std::size_t>(c)] / outfit_items.size();
    dot += m * z[static_cast<std::size_t>(c)];
    nm += m * m;
    nz += z[static_cast<std::size_t>(c)] * z[static_cast<std::size_t>(c)];
  }
  if (nm <= 0 || nz <= 0) throw NumericError("dataset: degenerate oracle vectors");
  return dot / std::sqrt(nm * nz);
}

namespace {

// Orthonormal columns via modified Gram-Schmidt on gaussian draws.
std::vector<std::vector<double>> style_basis(int d_in, int style_dim, RngStream& rng) {
  std::vector<std::vector<double>> cols(static_cast<std::size_t>(style_dim),
                                        std::vector<double>(static_cast<std::size_t>(d_in)));
  for (auto& col : cols) {
    for (auto& v : col) v = rng.normal();
  }
  for (std::size_t c = 0; c < cols.size(); ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0;
      for (int r = 0; r < d_in; ++r) dot += cols[c][static_cast<std::size_t>(r)] * cols[p][static_cast<std::size_t>(r)];
      for (int r = 0; r < d_in; ++r) cols[c][static_cast<std::size_t>(r)] -= dot * cols[p][static_cast<std::size_t>(r)];
    }
    double n = 0;
    for (double v : cols[c]) n += v * v;
    n = std::sqrt(n);
    if (n < 1e-8) throw NumericError("world: style basis degenerated");
    for (double& v : cols[c]) v /= n;
  }
  return cols;
}

std::vector<double> unit_gaussian(int n, RngStream& rng) {
  std::vector<double> v(static_cast<std::size_t>(n));
  double nrm = 0;
  for (auto& x : v) {
    x = rng.normal();
    nrm += x * x;
  }
  nrm = std::sqrt(nrm);
  if (nrm < 1e-12) throw NumericError("world: degenerate unit draw");
  for (auto& x : v) x /= nrm;
  return v;
}

// Weighted sample of `count` distinct indices, removing each pick.
std::vector<int> sample_distinct_weighted(const std::vector<int>& ids,
                                          const std::vector<double>& weights, int count,
                                          RngStream& rng) {
  std::vector<int> pool_ids = ids;
  std::vector<double> w = weights;
  std::vector<int> picked;
  for (int i = 0; i < count; ++i) {
    int j = rng.weighted_index(w);
    picked.push_back(pool_ids[static_cast<std::size_t>(j)]);
    pool_ids.erase(pool_ids.begin() + j);
    w.erase(w.begin() + j);
  }
  return picked;
}

}  // namespace

Dataset generate_world(const WorldConfig& cfg) {
  cfg.validate();
  const int C = static_cast<int>(cfg.categories.size());

  RngStream basis_rng(cfg.seed, "world.basis");
  RngStream proto_rng(cfg.seed, "world.prototypes");
  RngStream item_rng(cfg.seed, "world.items");
  RngStream user_rng(cfg.seed, "world.users");
  RngStream pool_rng(cfg.seed, "world.pools");
  RngStream pos_rng(cfg.seed, "world.positives");
  RngStream cold_rng(cfg.seed, "world.cold");

  auto basis = style_basis(cfg.d_in, cfg.style_dim, basis_rng);
  auto style_to_features = [&](const std::vector<double>& w) {
    std::vector<double> f(static_cast<std::size_t>(cfg.d_in), 0.0);
    for (int s = 0; s < cfg.style_dim; ++s)
      for (int r = 0; r < cfg.d_in; ++r)
        f[static_cast<std::size_t>(r)] += basis[static_cast<std::size_t>(s)][static_cast<std::size_t>(r)] * w[static_cast<std::size_t>(s)];
    return f;
  };

  // Category prototypes live in the complement of the style subspace so
  // category identity and style preference cannot leak into each other.
  std::vector<std::vector<double>> prototypes;
  for (int c = 0; c < C; ++c) {
    std::vector<double> p(static_cast<std::size_t>(cfg.d_in));
    for (auto& v : p) v = proto_rng.normal();
    for (const auto& col : basis) {
      double dot = 0;
      for (int r = 0; r < cfg.d_in; ++r) dot += p[static_cast<std::size_t>(r)] * col[static_cast<std::size_t>(r)];
      for (int r = 0; r < cfg.d_in; ++r) p[static_cast<std::size_t>(r)] -= dot * col[static_cast<std::size_t>(r)];
    }
    double n = 0;
    for (double v : p) n += v * v;
    n = std::sqrt(n);
    if (n < 1e-8) throw NumericError("world: prototype collapsed into the style subspace");
    for (double& v : p) v = v / n * cfg.prototype_scale;
    prototypes.push_back(std::move(p));
  }

  Dataset ds;
  ds.config = cfg;
  ds.categories = cfg.categories;
  ds.user_count = cfg.users;

  // Items carry a hidden unit style coordinate; keep it aside for the
  // preference sampling below.
  std::vector<std::vector<double>> item_style;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < cfg.items_per_category; ++i) {
      auto w = unit_gaussian(cfg.style_dim, item_rng);
      auto f = style_to_features(w);
      Item it;
      it.id = static_cast<int>(ds.items.size());
      it.category = c;
      it.features.resize(static_cast<std::size_t>(cfg.d_in));
      for (int r = 0; r < cfg.d_in; ++r)
        it.features[static_cast<std::size_t>(r)] = static_cast<float>(
            prototypes[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)] +
            cfg.style_scale * f[static_cast<std::size_t>(r)] + cfg.noise_scale * item_rng.normal());
      ds.items.push_back(std::move(it));
      item_style.push_back(std::move(w));
    }
  }

  std::vector<std::vector<int>> by_cat(static_cast<std::size_t>(C));
  for (const auto& it : ds.items) by_cat[static_cast<std::size_t>(it.category)].push_back(it.id);

  auto affinity = [&](const std::vector<double>& z, int item_id) {
    double a = 0;
    const auto& w = item_style[static_cast<std::size_t>(item_id)];
    for (int s = 0; s < cfg.style_dim; ++s) a += z[static_cast<std::size_t>(s)] * w[static_cast<std::size_t>(s)];
    return a;
  };

  auto preference_weights = [&](const std::vector<double>& z, const std::vector<int>& pool) {
    std::vector<double> wgt(pool.size());
    double mx = -1e30;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      wgt[i] = affinity(z, pool[i]);
      mx = std::max(mx, wgt[i]);
    }
    for (auto& w : wgt) w = std::exp((w - mx) / cfg.preference_temp);
    return wgt;
  };

  // One positive outfit: per category, one item (sometimes two in a
  // variable-size world), preference-weighted without replacement.
  auto sample_positive = [&](const std::vector<double>& z,
                             const std::vector<std::vector<int>>& pools, RngStream& rng) {
    std::vector<int> items;
    for (int c = 0; c < C; ++c) {
      const auto& pool = pools[static_cast<std::size_t>(c)];
      int count = 1;
      if (cfg.variable_size && static_cast<int>(pool.size()) >= 2 &&
          rng.uniform() < cfg.extra_item_prob)
        count = 2;
      auto wgt = preference_weights(z, pool);
      auto picked = sample_distinct_weighted(pool, wgt, count, rng);
      items.insert(items.end(), picked.begin(), picked.end());
    }
    return items;
  };

  auto sample_distinct_positives = [&](const std::vector<double>& z,
                                       const std::vector<std::vector<int>>& pools, int count,
                                       std::set<std::vector<int>>& seen, RngStream& rng) {
    std::vector<std::vector<int>> result;
    for (int i = 0; i < count; ++i) {
      bool ok = false;
      for (int attempt = 0; attempt < 200; ++attempt) {
        auto items = sample_positive(z, pools, rng);
        auto key = canonical_key(items);
        if (seen.insert(key).second) {
          result.push_back(std::move(items));
          ok = true;
          break;
        }
      }
      if (!ok)
        throw ConfigError("world: could not sample distinct positive outfits; "
                          "the item pools are too small for the requested count");
    }
    return result;
  };

  auto append_outfit = [&ds](std::vector<int> items) {
    Outfit o;
    o.id = static_cast<int>(ds.outfits.size());
    o.items = std::move(items);
    ds.outfits.push_back(o);
    return o.id;
  };

  SplitCounts sc = split_counts(cfg.positives_per_user);
  ds.splits.resize(static_cast<std::size_t>(cfg.users));
  for (int u = 0; u < cfg.users; ++u) {
    auto z = unit_gaussian(cfg.style_dim, user_rng);
    {
      auto dir = style_to_features(z);
      std::vector<float> row(static_cast<std::size_t>(cfg.d_in));
      for (int r = 0; r < cfg.d_in; ++r) row[static_cast<std::size_t>(r)] = static_cast<float>(dir[static_cast<std::size_t>(r)]);
      ds.oracle.push_back(std::move(row));
    }

    // Per-user item pools: train-side outfits and test outfits draw from
    // disjoint item sets, so memorizing train items cannot score test.
    std::vector<std::vector<int>> train_pools(static_cast<std::size_t>(C)),
        test_pools(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      auto ids = by_cat[static_cast<std::size_t>(c)];
      pool_rng.shuffle(ids);
      int cut = static_cast<int>(std::ceil(ids.size() * cfg.train_pool_frac));
      train_pools[static_cast<std::size_t>(c)].assign(ids.begin(), ids.begin() + cut);
      test_pools[static_cast<std::size_t>(c)].assign(ids.begin() + cut, ids.end());
    }

    std::set<std::vector<int>> seen;
    auto train_side = sample_distinct_positives(
        z, train_pools, sc.train + sc.val_teacher + sc.val_student, seen, pos_rng);
    auto test_side = sample_distinct_positives(z, test_pools, sc.test, seen, pos_rng);

    auto& sp = ds.splits[static_cast<std::size_t>(u)];
    int idx = 0;
    for (int i = 0; i < sc.train; ++i) sp.train.push_back(append_outfit(std::move(train_side[static_cast<std::size_t>(idx++)])));
    for (int i = 0; i < sc.val_teacher; ++i)
      sp.val_teacher.push_back(append_outfit(std::move(train_side[static_cast<std::size_t>(idx++)])));
    for (int i = 0; i < sc.val_student; ++i)
      sp.val_student.push_back(append_outfit(std::move(train_side[static_cast<std::size_t>(idx++)])));
    for (auto& items : test_side) sp.test.push_back(append_outfit(std::move(items)));
  }

  // Cold users: hidden styles of their own, positives from the full item
  // lists, no training splits.
  std::vector<std::vector<int>> full_pools(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) full_pools[static_cast<std::size_t>(c)] = by_cat[static_cast<std::size_t>(c)];
  for (int cu = 0; cu < cfg.cold_users; ++cu) {
    auto z = unit_gaussian(cfg.style_dim, cold_rng);
    {
      auto dir = style_to_features(z);
      std::vector<float> row(static_cast<std::size_t>(cfg.d_in));
      for (int r = 0; r < cfg.d_in; ++r) row[static_cast<std::size_t>(r)] = static_cast<float>(dir[static_cast<std::size_t>(r)]);
      ds.oracle.push_back(std::move(row));
    }
    std::set<std::vector<int>> seen;
    auto positives = sample_distinct_positives(z, full_pools, cfg.cold_positives, seen, cold_rng);
    ColdProfile profile;
    profile.user_id = cfg.users + cu;
    for (auto& items : positives) profile.outfits.push_back(append_outfit(std::move(items)));
    ds.cold.push_back(std::move(profile));
  }

  ds.finalize();
  return ds;
}

// ---------------------------------------------------------------------------
// Negative sampling and evaluation sets
// ---------------------------------------------------------------------------

std::vector<int> sample_negative_items(const Dataset& ds, int user, RngStream& rng) {
  const int C = static_cast<int>(ds.categories.size());
  for (int attempt = 0; attempt < 500; ++attempt) {
    std::vector<int> profile(static_cast<std::size_t>(C), 1);
    if (ds.config.variable_size) {
      if (ds.train_size_profiles.empty())
        throw DataError("dataset: no train outfits to copy size profiles from");
      auto pick = rng.uniform_int(0, static_cast<std::int64_t>(ds.train_size_profiles.size()) - 1);
      profile = ds.train_size_profiles[static_cast<std::size_t>(pick)];
    }
    std::vector<int> items;
    for (int c = 0; c < C; ++c) {
      const auto& pool = ds.items_by_category[static_cast<std::size_t>(c)];
      int want = profile[static_cast<std::size_t>(c)];
      if (want > static_cast<int>(pool.size()))
        throw DataError("dataset: category too small for the requested outfit size");
      std::set<int> chosen;
      while (static_cast<int>(chosen.size()) < want)
        chosen.insert(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]);
      items.insert(items.end(), chosen.begin(), chosen.end());
    }
    if (!ds.is_user_positive(user, items)) return items;
  }
  throw DataError("dataset: negative sampling kept colliding with known positives");
}

std::vector<int> sample_hard_negative_items(const Dataset& ds, int user, RngStream& rng) {
  if (ds.user_count < 2)
    throw DataError("dataset: hard negatives need at least two users");
  for (int attempt = 0; attempt < 500; ++attempt) {
    int other = static_cast<int>(rng.uniform_int(0, ds.user_count - 1));
    if (other == user) continue;
    const auto& train = ds.splits[static_cast<std::size_t>(other)].train;
    if (train.empty()) continue;
    int id = train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1))];
    const auto& items = ds.outfit(id).items;
    if (!ds.is_user_positive(user, items)) return items;
  }
  throw DataError("dataset: hard negative sampling found no usable outfit");
}

const char* split_name(SplitKind k) {
  switch (k) {
    case SplitKind::train: return "train";
    case SplitKind::val_teacher: return "val_teacher";
    case SplitKind::val_student: return "val_student";
    case SplitKind::test: return "test";
  }
  throw ConfigError("unknown split");
}

EvalSet build_eval_set(const Dataset& ds, int user, SplitKind split, int neg_ratio, bool hard,
                       RngStream& rng) {
  if (user < 0 || user >= ds.user_count)
    throw DataError("eval set: unknown user " + std::to_string(user));
  if (neg_ratio < 1) throw ConfigError("eval set: negative ratio must be at least 1");
  const auto& sp = ds.splits[static_cast<std::size_t>(user)];
  const std::vector<int>* ids = nullptr;
  switch (split) {
    case SplitKind::train: ids = &sp.train; break;
    case SplitKind::val_teacher: ids = &sp.val_teacher; break;
    case SplitKind::val_student: ids = &sp.val_student; break;
    case SplitKind::test: ids = &sp.test; break;
  }
  EvalSet es;
  es.user_id = user;
  for (int id : *ids) {
    Candidate pos;
    pos.items = ds.outfit(id).items;
    pos.label = 1;
    es.candidates.push_back(std::move(pos));
    for (int k = 0; k < neg_ratio; ++k) {
      Candidate neg;
      neg.items = hard ? sample_hard_negative_items(ds, user, rng)
                       : sample_negative_items(ds, user, rng);
      neg.label = 0;
      es.candidates.push_back(std::move(neg));
    }
  }
  return es;
}

// ---------------------------------------------------------------------------
// Audits
// ---------------------------------------------------------------------------

std::vector<std::string> audit_dataset(const Dataset& ds) {
  std::vector<std::string> problems;
  auto fail = [&problems](std::string msg) { problems.push_back(std::move(msg)); };

  try {
    ds.config.validate();
  } catch (const Error& e) {
    fail(std::string("config: ") + e.what());
  }
  if (ds.categories != ds.config.categories) fail("category list differs from the config");
  if (ds.user_count != ds.config.users) fail("user count differs from the config");

  const int C = static_cast<int>(ds.categories.size());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const auto& it = ds.items[i];
    if (it.id != static_cast<int>(i)) fail("item ids are not consecutive");
    if (it.category < 0 || it.category >= C)
      fail("item " + std::to_string(it.id) + " has an unknown category");
    if (static_cast<int>(it.features.size()) != ds.config.d_in)
      fail("item " + std::to_string(it.id) + " has the wrong feature width");
    for (float v : it.features)
      if (!std::isfinite(v)) {
        fail("item " + std::to_string(it.id) + " has non-finite features");
        break;
      }
  }

  int max_per_cat = ds.config.variable_size ? 2 : 1;
  for (std::size_t i = 0; i < ds.outfits.size(); ++i) {
    const auto& o = ds.outfits[i];
    if (o.id != static_cast<int>(i)) fail("outfit ids are not consecutive");
    std::vector<int> per_cat(static_cast<std::size_t>(C), 0);
    std::set<int> distinct(o.items.begin(), o.items.end());
    if (distinct.size() != o.items.size())
      fail("outfit " + std::to_string(o.id) + " repeats an item");
    for (int id : o.items) {
      if (id < 0 || id >= static_cast<int>(ds.items.size())) {
        fail("outfit " + std::to_string(o.id) + " references a missing item");
        continue;
      }
      ++per_cat[static_cast<std::size_t>(ds.items[static_cast<std::size_t>(id)].category)];
    }
    for (int c = 0; c < C; ++c) {
      int n = per_cat[static_cast<std::size_t>(c)];
      if (n < 1 || n > max_per_cat)
        fail("outfit " + std::to_string(o.id) + " has " + std::to_string(n) + " items of " +
             ds.categories[static_cast<std::size_t>(c)]);
    }
  }

  if (static_cast<int>(ds.splits.size()) != ds.user_count) {
    fail("split table size differs from the user count");
    return problems;
  }

  SplitCounts sc = split_counts(ds.config.positives_per_user);
  std::vector<int> usage(ds.outfits.size(), 0);
  for (int u = 0; u < ds.user_count; ++u) {
    const auto& sp = ds.splits[static_cast<std::size_t>(u)];
    auto tag = [u](const char* part) {
      return "user " + std::to_string(u) + " " + part;
    };
    if (static_cast<int>(sp.train.size()) != sc.train)
      fail(tag("train split has the wrong size"));
    if (static_cast<int>(sp.val_teacher.size()) != sc.val_teacher)
      fail(tag("teacher validation split has the wrong size"));
    if (static_cast<int>(sp.val_student.size()) != sc.val_student)
      fail(tag("student validation split has the wrong size"));
    if (static_cast<int>(sp.test.size()) != sc.test) fail(tag("test split has the wrong size"));
    if (std::abs(static_cast<int>(sp.val_teacher.size()) -
                 static_cast<int>(sp.val_student.size())) > 1)
      fail(tag("validation halves differ by more than one"));

    std::set<int> train_items, test_items;
    for (const auto* part : {&sp.train, &sp.val_teacher, &sp.val_student, &sp.test}) {
      for (int id : *part) {
        if (id < 0 || id >= static_cast<int>(ds.outfits.size())) {
          fail(tag("references a missing outfit"));
          continue;
        }
        ++usage[static_cast<std::size_t>(id)];
        const auto& items = ds.outfits[static_cast<std::size_t>(id)].items;
        if (part == &sp.train)
          train_items.insert(items.begin(), items.end());
        if (part == &sp.test) test_items.insert(items.begin(), items.end());
      }
    }
    for (int id : test_items)
      if (train_items.count(id)) {
        fail(tag("shares items between train and test outfits"));
        break;
      }
  }

  for (std::size_t c = 0; c < ds.cold.size(); ++c) {
    const auto& profile = ds.cold[c];
    if (profile.user_id != ds.user_count + static_cast<int>(c))
      fail("cold profile " + std::to_string(c) + " has an unexpected user id");
    if (profile.outfits.empty()) fail("cold profile " + std::to_string(c) + " is empty");
    for (int id : profile.outfits) {
      if (id < 0 || id >= static_cast<int>(ds.outfits.size()))
        fail("cold profile " + std::to_string(c) + " references a missing outfit");
      else
        ++usage[static_cast<std::size_t>(id)];
    }
  }

  for (std::size_t i = 0; i < usage.size(); ++i) {
    if (usage[i] == 0) fail("outfit " + std::to_string(i) + " belongs to no split or profile");
    if (usage[i] > 1) fail("outfit " + std::to_string(i) + " is referenced more than once");
  }

  if (ds.oracle.size() != static_cast<std::size_t>(ds.user_count) + ds.cold.size())
    fail("oracle table size differs from the user count");
  for (std::size_t u = 0; u < ds.oracle.size(); ++u) {
    if (static_cast<int>(ds.oracle[u].size()) != ds.config.d_in) {
      fail("oracle row " + std::to_string(u) + " has the wrong width");
      continue;
    }
    double n = 0;
    for (float v : ds.oracle[u]) n += double(v) * v;
    n = std::sqrt(n);
    if (n < 0.9 || n > 1.1)
      fail("oracle row " + std::to_string(u) + " is far from unit length");
  }

  return problems;
}

// ---------------------------------------------------------------------------
// File io
// ---------------------------------------------------------------------------

namespace {

void write_config(std::ostream& os, const WorldConfig& c) {
  os << "[config]\n";
  os << "users=" << c.users << "\n";
  os << "items_per_category=" << c.items_per_category << "\n";
  os << "d_in=" << c.d_in << "\n";
  os << "style_dim=" << c.style_dim << "\n";
  os << "positives_per_user=" << c.positives_per_user << "\n";
  os << "prototype_scale=" << format_double(c.prototype_scale) << "\n";
  os << "style_scale=" << format_double(c.style_scale) << "\n";
  os << "noise_scale=" << format_double(c.noise_scale) << "\n";
  os << "preference_temp=" << format_double(c.preference_temp) << "\n";
  os << "train_pool_frac=" << format_double(c.train_pool_frac) << "\n";
  os << "variable_size=" << (c.variable_size ? 1 : 0) << "\n";
  os << "extra_item_prob=" << format_double(c.extra_item_prob) << "\n";
  os << "cold_users=" << c.cold_users << "\n";
  os << "cold_positives=" << c.cold_positives << "\n";
  os << "seed=" << c.seed << "\n";
  os << "categories=";
  for (std::size_t i = 0; i < c.categories.size(); ++i)
    os << (i ? "," : "") << c.categories[i];
  os << "\n";
}

WorldConfig parse_config(const std::map<std::string, std::string>& kv) {
  WorldConfig c;
  auto need = [&kv](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(std::string("dataset config is missing ") + key);
    return it->second;
  };
  auto to_int = [](const std::string& s, const char* key) {
    try {
      return std::stoi(s);
    } catch (...) {
      throw ParseError(std::string("dataset config: bad integer for ") + key);
    }
  };
  auto to_double = [](const std::string& s, const char* key) {
    try {
      return std::stod(s);
    } catch (...) {
      throw ParseError(std::string("dataset config: bad number for ") + key);
    }
  };
  c.users = to_int(need("users"), "users");
  c.items_per_category = to_int(need("items_per_category"), "items_per_category");
  c.d_in = to_int(need("d_in"), "d_in");
  c.style_dim = to_int(need("style_dim"), "style_dim");
  c.positives_per_user = to_int(need("positives_per_user"), "positives_per_user");
  c.prototype_scale = to_double(need("prototype_scale"), "prototype_scale");
  c.style_scale = to_double(need("style_scale"), "style_scale");
  c.noise_scale = to_double(need("noise_scale"), "noise_scale");
  c.preference_temp = to_double(need("preference_temp"), "preference_temp");
  c.train_pool_frac = to_double(need("train_pool_frac"), "train_pool_frac");
  c.variable_size = to_int(need("variable_size"), "variable_size") != 0;
  c.extra_item_prob = to_double(need("extra_item_prob"), "extra_item_prob");
  c.cold_users = to_int(need("cold_users"), "cold_users");
  c.cold_positives = to_int(need("cold_positives"), "cold_positives");
  try {
    c.seed = std::stoull(need("seed"));
  } catch (const ParseError&) {
    throw;
  } catch (...) {
    throw ParseError("dataset config: bad integer for seed");
  }
  c.categories.clear();
  std::istringstream cats(need("categories"));
  std::string tok;
  while (std::getline(cats, tok, ',')) c.categories.push_back(tok);
  return c;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open dataset file for writing: " + path);
  os << "outfitlab dataset v1\n";
  write_config(os, ds.config);

  os << "[items]\n";
  for (const auto& it : ds.items) {
    os << it.id << " " << ds.categories[static_cast<std::size_t>(it.category)];
    for (float v : it.features) os << " " << format_float(v);
    os << "\n";
  }

  os << "[outfits]\n";
  for (const auto& o : ds.outfits) {
    os << o.id;
    for (int id : o.items) os << " " << id;
    os << "\n";
  }

  os << "[splits]\n";
  for (int u = 0; u < ds.user_count; ++u) {
    const auto& sp = ds.splits[static_cast<std::size_t>(u)];
    auto line = [&os, u](const char* part, const std::vector<int>& ids) {
      os << u << " " << part;
      for (int id : ids) os << " " << id;
      os << "\n";
    };
    line("train", sp.train);
    line("val_teacher", sp.val_teacher);
    line("val_student", sp.val_student);
    line("test", sp.test);
  }

  os << "[oracle]\n";
  for (std::size_t u = 0; u < ds.oracle.size(); ++u) {
    os << u;
    for (float v : ds.oracle[u]) os << " " << format_float(v);
    os << "\n";
  }

  os << "[cold]\n";
  for (const auto& profile : ds.cold) {
    os << profile.user_id;
    for (int id : profile.outfits) os << " " << id;
    os << "\n";
  }

  os << "[end]\n";
  os.flush();
  if (!os) throw DataError("failed while writing dataset file: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "outfitlab dataset v1")
    throw ParseError("dataset file has an unknown header: " + path);

  Dataset ds;
  std::map<std::string, std::string> config_kv;
  std::string section;
  bool saw_end = false;

  auto category_index = [&ds](const std::string& name) {
    for (std::size_t i = 0; i < ds.categories.size(); ++i)
      if (ds.categories[i] == name) return static_cast<int>(i);
    throw ParseError("dataset names an unknown category '" + name + "'");
  };

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (section == "config" && !config_kv.empty()) {
        ds.config = parse_config(config_kv);
        ds.categories = ds.config.categories;
        ds.user_count = ds.config.users;
        ds.splits.resize(static_cast<std::size_t>(ds.user_count));
      }
      if (line.back() != ']')
        throw ParseError("dataset file has a malformed section header: " + line);
      section = line.substr(1, line.size() - 2);
      if (section == "end") {
        saw_end = true;
        break;
      }
      if (section != "config" && section != "items" && section != "outfits" &&
          section != "splits" && section != "oracle" && section != "cold")
        throw ParseError("dataset file has an unknown section [" + section + "]");
      continue;
    }
    if (section == "config") {
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError("dataset config line without '=': " + line);
      config_kv[line.substr(0, eq)] = line.substr(eq + 1);
    } else if (section == "items") {
      std::istringstream ls(line);
      Item it;
      std::string cat;
      if (!(ls >> it.id >> cat)) throw ParseError("dataset items section: bad line: " + line);
      it.category = category_index(cat);
      double v;
      while (ls >> v) it.features.push_back(static_cast<float>(v));
      if (static_cast<int>(it.features.size()) != ds.config.d_in)
        throw ParseError("dataset items section: wrong feature width for item " +
                         std::to_string(it.id));
      if (it.id != static_cast<int>(ds.items.size()))
        throw ParseError("dataset items section: ids out of order");
      ds.items.push_back(std::move(it));
    } else if (section == "outfits") {
      std::istringstream ls(line);
      Outfit o;
      if (!(ls >> o.id)) throw ParseError("dataset outfits section: bad line: " + line);
      int id;
      while (ls >> id) o.items.push_back(id);
      if (o.items.empty()) throw ParseError("dataset outfits section: empty outfit");
      if (o.id != static_cast<int>(ds.outfits.size()))
        throw ParseError("dataset outfits section: ids out of order");
      ds.outfits.push_back(std::move(o));
    } else if (section == "splits") {
      std::istringstream ls(line);
      int u;
      std::string part;
      if (!(ls >> u >> part)) throw ParseError("dataset splits section: bad line: " + line);
      if (u < 0 || u >= ds.user_count)
        throw ParseError("dataset splits section: unknown user " + std::to_string(u));
      std::vector<int>* target = nullptr;
      auto& sp = ds.splits[static_cast<std::size_t>(u)];
      if (part == "train") target = &sp.train;
      else if (part == "val_teacher") target = &sp.val_teacher;
      else if (part == "val_student") target = &sp.val_student;
      else if (part == "test") target = &sp.test;
      else throw ParseError("dataset splits section: unknown split '" + part + "'");
      int id;
      while (ls >> id) target->push_back(id);
    } else if (section == "oracle") {
      std::istringstream ls(line);
      std::size_t u;
      if (!(ls >> u)) throw ParseError("dataset oracle section: bad line: " + line);
      if (u != ds.oracle.size()) throw ParseError("dataset oracle section: ids out of order");
      std::vector<float> row;
      double v;
      while (ls >> v) row.push_back(static_cast<float>(v));
      if (static_cast<int>(row.size()) != ds.config.d_in)
        throw ParseError("dataset oracle section: wrong width for user " + std::to_string(u));
      ds.oracle.push_back(std::move(row));
    } else if (section == "cold") {
      std::istringstream ls(line);
      ColdProfile profile;
      if (!(ls >> profile.user_id)) throw ParseError("dataset cold section: bad line: " + line);
      int id;
      while (ls >> id) profile.outfits.push_back(id);
      ds.cold.push_back(std::move(profile));
    } else {
      throw ParseError("dataset file: content outside any known section: " + line);
    }
  }
  if (!saw_end)
    throw ParseError("dataset file is truncated (no [end] marker): " + path);
  if (ds.items.empty()) throw ParseError("dataset file has no items section: " + path);
  ds.finalize();
  return ds;
}

void save_cold_profiles(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open cold profile file for writing: " + path);
  os << "outfitlab cold profiles v1\n";
  for (const auto& profile : ds.cold) {
    os << profile.user_id;
    for (int id : profile.outfits) os << " " << id;
    os << "\n";
  }
  os << "[end]\n";
  os.flush();
  if (!os) throw DataError("failed while writing cold profile file: " + path);
}

void load_cold_profiles(const std::string& path, Dataset& ds) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open cold profile file: " + path);
  std::string line;
  if (!std::getline(is, line) || line != "outfitlab cold profiles v1")
    throw ParseError("cold profile file has an unknown header: " + path);
  std::vector<ColdProfile> profiles;
  bool saw_end = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line == "[end]") {
      saw_end = true;
      break;
    }
    std::istringstream ls(line);
    ColdProfile p;
    if (!(ls >> p.user_id)) throw ParseError("cold profile file: bad line: " + line);
    int id;
    while (ls >> id) {
      if (id < 0 || id >= static_cast<int>(ds.outfits.size()))
        throw ParseError("cold profile references a missing outfit " + std::to_string(id));
      p.outfits.push_back(id);
    }
    if (p.outfits.empty()) throw ParseError("cold profile file: profile without outfits");
    profiles.push_back(std::move(p));
  }
  if (!saw_end) throw ParseError("cold profile file is truncated: " + path);
  ds.cold = std::move(profiles);
  ds.finalize();
}

}  // namespace outfitlab::data
