#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "outfitlab/augment.hpp"
#include "outfitlab/dataset.hpp"
#include "outfitlab/error.hpp"
#include "outfitlab/rng.hpp"

using namespace outfitlab;
using namespace outfitlab::augment;
using diff::Tensor;

namespace {

data::Dataset tiny_world(std::uint64_t seed = 7) {
  data::WorldConfig cfg;
  cfg.users = 4;
  cfg.items_per_category = 20;
  cfg.d_in = 12;
  cfg.style_dim = 3;
  cfg.positives_per_user = 13;
  cfg.seed = seed;
  return data::generate_world(cfg);
}

Tensor<float> random_features(RngStream& rng, int n, int d) {
  Tensor<float> t(n, d);
  for (auto& v : t.data) v = float(rng.normal());
  return t;
}

SimilarityIndex index_for(const data::Dataset& ds, std::uint64_t seed = 3,
                          bool train = true) {
  RngStream rng(seed, "test.autoencoder");
  AutoencoderConfig cfg;
  cfg.d_lat = 8;
  cfg.epochs = train ? 60 : 0;
  auto ae = init_autoencoder(ds.config.d_in, cfg, rng);
  if (train) {
    Tensor<float> all(int(ds.items.size()), ds.config.d_in);
    for (const auto& it : ds.items)
      for (int c = 0; c < ds.config.d_in; ++c) all.at(it.id, c) = it.features[std::size_t(c)];
    train_autoencoder(ae, all, rng);
  }
  return build_similarity_index(ds, ae);
}

}  // namespace

TEST_CASE("augmentation kinds parse and print") {
  CHECK(parse_kind("identity") == Kind::identity);
  CHECK(parse_kind("erase") == Kind::erase);
  CHECK(parse_kind("replace") == Kind::replace);
  CHECK(std::string(kind_name(Kind::replace)) == "replace");
  CHECK_THROWS_AS(parse_kind("rotate"), ConfigError);
}

TEST_CASE("autoencoder with linear maps can memorize a small catalog") {
  RngStream rng(11, "test.ae.linear");
  auto feats = random_features(rng, 50, 16);
  AutoencoderConfig cfg;
  cfg.d_lat = 16;
  cfg.relu_encoder = false;
  cfg.epochs = 400;
  cfg.lr = 0.05;
  cfg.holdout_frac = 0.0;
  auto ae = init_autoencoder(16, cfg, rng);
  auto report = train_autoencoder(ae, feats, rng);
  REQUIRE(!report.train_mse_per_epoch.empty());
  MESSAGE("final train mse ", report.train_mse_per_epoch.back());
  CHECK(report.train_mse_per_epoch.back() < 1e-3);
}

TEST_CASE("autoencoder training lowers held-out reconstruction error") {
  auto ds = tiny_world(5);
  Tensor<float> all(int(ds.items.size()), ds.config.d_in);
  for (const auto& it : ds.items)
    for (int c = 0; c < ds.config.d_in; ++c) all.at(it.id, c) = it.features[std::size_t(c)];

  RngStream rng(2, "test.ae.holdout");
  AutoencoderConfig cfg;
  cfg.d_lat = 8;
  cfg.epochs = 80;
  auto ae = init_autoencoder(ds.config.d_in, cfg, rng);
  auto report = train_autoencoder(ae, all, rng);
  MESSAGE("holdout mse ", report.init_holdout_mse, " -> ", report.final_holdout_mse);
  CHECK(report.final_holdout_mse < report.init_holdout_mse);

  SUBCASE("zero epochs leave parameters untouched") {
    RngStream r2(2, "test.ae.zero");
    auto before = init_autoencoder(ds.config.d_in, cfg, r2);
    auto frozen = before;
    frozen.config.epochs = 0;
    auto rep = train_autoencoder(frozen, all, r2);
    CHECK(frozen.enc_w.data == before.enc_w.data);
    CHECK(frozen.dec_w.data == before.dec_w.data);
    CHECK(rep.train_mse_per_epoch.empty());
    CHECK(rep.init_holdout_mse == rep.final_holdout_mse);
  }
  SUBCASE("training is deterministic in the stream seed") {
    RngStream ra(9, "test.ae.det");
    RngStream rb(9, "test.ae.det");
    auto a = init_autoencoder(ds.config.d_in, cfg, ra);
    auto b = init_autoencoder(ds.config.d_in, cfg, rb);
    train_autoencoder(a, all, ra);
    train_autoencoder(b, all, rb);
    CHECK(a.enc_w.data == b.enc_w.data);
    CHECK(a.dec_b.data == b.dec_b.data);
  }
}

TEST_CASE("similarity index agrees with a brute-force cosine scan") {
  auto ds = tiny_world(13);
  auto index = index_for(ds, 13);

  auto brute = [&index](int id, int k) {
    const auto& q = index.latents[std::size_t(id)];
    std::vector<std::pair<double, int>> ranked;
    for (int other : index.by_category[std::size_t(index.category_of[std::size_t(id)])]) {
      if (other == id) continue;
      const auto& o = index.latents[std::size_t(other)];
      double dot = 0, qn = 0, on = 0;
      for (std::size_t i = 0; i < q.size(); ++i) {
        dot += double(q[i]) * o[i];
        qn += double(q[i]) * q[i];
        on += double(o[i]) * o[i];
      }
      double s = (qn < 1e-24 || on < 1e-24) ? -2.0 : dot / std::sqrt(qn * on);
      ranked.emplace_back(s, other);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int> out;
    for (int i = 0; i < k && i < int(ranked.size()); ++i) out.push_back(ranked[std::size_t(i)].second);
    return out;
  };

  for (const auto& it : ds.items) {
    CHECK(index.top_neighbors(it.id, 5) == brute(it.id, 5));
    auto all = index.top_neighbors(it.id, 1000);
    CHECK(int(all.size()) == ds.config.items_per_category - 1);
    for (int n : all) {
      CHECK(n != it.id);
      CHECK(index.category_of[std::size_t(n)] == it.category);
    }
  }
  CHECK_THROWS_AS(index.top_neighbors(-1, 5), DataError);
  CHECK_THROWS_AS(index.top_neighbors(int(ds.items.size()), 5), DataError);
  CHECK_THROWS_AS(index.top_neighbors(0, 0), ConfigError);
}

TEST_CASE("a duplicated item is its own nearest neighbor") {
  auto ds = tiny_world(17);
  // Clone item 0's features onto another item of the same category.
  int clone = ds.items_by_category[0][1];
  ds.items[std::size_t(clone)].features = ds.items[0].features;
  auto index = index_for(ds, 17, false);  // untrained encoder keeps the copy exact
  auto top = index.top_neighbors(0, 1);
  REQUIRE(top.size() == 1);
  CHECK(top[0] == clone);
  CHECK(index.top_neighbors(clone, 1)[0] == 0);
}

TEST_CASE("erase removes one uniform position") {
  RngStream rng(23, "test.erase");
  std::vector<int> outfit = {10, 20, 30};
  std::map<int, int> removed;
  for (int i = 0; i < 3000; ++i) {
    int altered = -1;
    auto out = erase_item(outfit, rng, &altered);
    REQUIRE(out.size() == 2);
    std::set<int> left(out.begin(), out.end());
    for (int id : out) CHECK(std::find(outfit.begin(), outfit.end(), id) != outfit.end());
    CHECK(left.count(outfit[std::size_t(altered)]) == 0);
    ++removed[altered];
  }
  for (int pos = 0; pos < 3; ++pos)
    CHECK(std::abs(removed[pos] / 3000.0 - 1.0 / 3.0) < 0.05);

  CHECK_THROWS_AS(erase_item({42}, rng), AugmentationInapplicable);
}

TEST_CASE("replace swaps exactly one position within the category") {
  auto ds = tiny_world(29);
  auto index = index_for(ds, 29);
  RngStream rng(5, "test.replace");

  const auto& outfit = ds.outfits[0].items;
  for (int trial = 0; trial < 1000; ++trial) {
    int altered = -1;
    auto out = replace_item(outfit, index, 5, rng, &altered);
    REQUIRE(out.size() == outfit.size());
    int diffs = 0;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out[i] != outfit[i]) {
        ++diffs;
        CHECK(int(i) == altered);
        CHECK(ds.item(out[i]).category == ds.item(outfit[i]).category);
        auto neighbors = index.top_neighbors(outfit[i], 5);
        CHECK(std::find(neighbors.begin(), neighbors.end(), out[i]) != neighbors.end());
      }
    CHECK(diffs == 1);
    std::set<int> distinct(out.begin(), out.end());
    CHECK(distinct.size() == out.size());
  }
}

TEST_CASE("replace with k=1 against a cloned item is forced") {
  auto ds = tiny_world(31);
  int original = ds.items_by_category[1][0];
  int clone = ds.items_by_category[1][1];
  ds.items[std::size_t(clone)].features = ds.items[std::size_t(original)].features;
  auto index = index_for(ds, 31, false);

  RngStream rng(6, "test.replace.k1");
  std::vector<int> outfit = {original};
  for (int i = 0; i < 20; ++i) {
    auto out = replace_item(outfit, index, 1, rng);
    REQUIRE(out.size() == 1);
    CHECK(out[0] == clone);
  }
}

TEST_CASE("make_views honors the pair contract") {
  auto ds = tiny_world(37);
  auto index = index_for(ds, 37);
  RngStream rng(8, "test.views");
  const auto& outfit = ds.outfits[2].items;
  REQUIRE(outfit.size() == 3);

  SUBCASE("identity plus erase keeps the first view untouched") {
    for (int i = 0; i < 50; ++i) {
      auto v = make_views(outfit, Kind::identity, Kind::erase, index, 5, rng);
      CHECK(v.a == outfit);
      CHECK(v.b.size() == 2);
      CHECK(!v.fallback);
    }
  }
  SUBCASE("erase plus erase removes two different positions") {
    for (int i = 0; i < 200; ++i) {
      auto v = make_views(outfit, Kind::erase, Kind::erase, index, 5, rng);
      REQUIRE(v.a.size() == 2);
      REQUIRE(v.b.size() == 2);
      std::set<int> sa(v.a.begin(), v.a.end()), sb(v.b.begin(), v.b.end());
      CHECK(sa != sb);
    }
  }
  SUBCASE("replace plus replace alters two different positions") {
    for (int i = 0; i < 200; ++i) {
      auto v = make_views(outfit, Kind::replace, Kind::replace, index, 5, rng);
      int pos_a = -1, pos_b = -1;
      for (int p = 0; p < 3; ++p) {
        if (v.a[std::size_t(p)] != outfit[std::size_t(p)]) pos_a = p;
        if (v.b[std::size_t(p)] != outfit[std::size_t(p)]) pos_b = p;
      }
      REQUIRE(pos_a >= 0);
      REQUIRE(pos_b >= 0);
      CHECK(pos_a != pos_b);
    }
  }
  SUBCASE("erase plus replace composes both contracts") {
    auto v = make_views(outfit, Kind::erase, Kind::replace, index, 5, rng);
    CHECK(v.a.size() == 2);
    CHECK(v.b.size() == 3);
  }
  SUBCASE("identity against identity is rejected") {
    CHECK_THROWS_AS(make_views(outfit, Kind::identity, Kind::identity, index, 5, rng),
                    ConfigError);
  }
  SUBCASE("singleton outfits degrade gracefully") {
    std::vector<int> solo = {outfit[0]};
    auto v = make_views(solo, Kind::erase, Kind::erase, index, 5, rng);
    CHECK(v.fallback);
    CHECK(v.a == solo);
    CHECK(v.b == solo);

    auto vr = make_views(solo, Kind::replace, Kind::erase, index, 5, rng);
    CHECK(vr.fallback);
    CHECK(vr.a != solo);   // replace still works on singletons
    CHECK(vr.b == solo);   // erase cannot, so it stays identity
  }
  SUBCASE("views are valid outfits") {
    for (int i = 0; i < 200; ++i) {
      auto v = make_views(outfit, Kind::erase, Kind::replace, index, 5, rng);
      for (const auto* view : {&v.a, &v.b}) {
        CHECK(!view->empty());
        std::set<int> distinct(view->begin(), view->end());
        CHECK(distinct.size() == view->size());
        for (int id : *view) CHECK(id < int(ds.items.size()));
      }
    }
  }
  SUBCASE("view streams replay deterministically") {
    RngStream r1(55, "test.views.det");
    RngStream r2(55, "test.views.det");
    for (int i = 0; i < 50; ++i) {
      auto v1 = make_views(outfit, Kind::erase, Kind::replace, index, 5, r1);
      auto v2 = make_views(outfit, Kind::erase, Kind::replace, index, 5, r2);
      CHECK(v1.a == v2.a);
      CHECK(v1.b == v2.b);
    }
  }
}

TEST_CASE("index dump writes every latent row") {
  auto ds = tiny_world(41);
  auto index = index_for(ds, 41);
  auto path = std::filesystem::temp_directory_path() / "augment_index.bin";
  dump_index(path.string(), index);

  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  char magic[8];
  is.read(magic, 8);
  CHECK(std::string(magic, 8) == "OLAIDX01");
  std::uint32_t count = 0, d_lat = 0;
  is.read(reinterpret_cast<char*>(&count), 4);
  is.read(reinterpret_cast<char*>(&d_lat), 4);
  CHECK(count == ds.items.size());
  CHECK(d_lat == std::uint32_t(index.d_lat));
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t id = 0, cat = 0;
    is.read(reinterpret_cast<char*>(&id), 4);
    is.read(reinterpret_cast<char*>(&cat), 4);
    CHECK(id == i);
    CHECK(cat == std::uint32_t(index.category_of[i]));
    std::vector<float> row(d_lat);
    is.read(reinterpret_cast<char*>(row.data()), std::streamsize(d_lat * sizeof(float)));
    CHECK(row == index.latents[i]);
  }
  is.peek();
  CHECK(is.eof());
}

TEST_CASE("autoencoder configs are validated") {
  RngStream rng(1, "test.ae.cfg");
  AutoencoderConfig cfg;
  cfg.d_lat = 0;
  CHECK_THROWS_AS(init_autoencoder(8, cfg, rng), ConfigError);
  cfg = {};
  cfg.lr = 0;
  CHECK_THROWS_AS(init_autoencoder(8, cfg, rng), ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(init_autoencoder(8, cfg, rng), ConfigError);
  cfg = {};
  CHECK_THROWS_AS(init_autoencoder(0, cfg, rng), ConfigError);

  auto ae = init_autoencoder(8, cfg, rng);
  RngStream r2(1, "test.ae.cfg2");
  auto feats = random_features(r2, 10, 7);
  CHECK_THROWS_AS(train_autoencoder(ae, feats, r2), DimensionError);
}
