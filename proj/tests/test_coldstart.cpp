#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <vector>

#include "outfitlab/coldstart.hpp"
#include "outfitlab/error.hpp"
#include "outfitlab/model.hpp"
#include "outfitlab/rng.hpp"

using namespace outfitlab;
using cold::ScoreFn;

namespace {

data::Dataset cold_world(std::uint64_t seed = 7) {
  data::WorldConfig cfg;
  cfg.users = 6;
  cfg.items_per_category = 30;
  cfg.d_in = 16;
  cfg.style_dim = 4;
  cfg.positives_per_user = 13;
  cfg.cold_users = 2;
  cfg.cold_positives = 5;
  cfg.seed = seed;
  return data::generate_world(cfg);
}

// Score table keyed by user id only; the outfit argument is ignored.
ScoreFn table_scorer(std::vector<double> by_user) {
  return [by_user](int user, const std::vector<int>&) {
    return by_user.at(static_cast<std::size_t>(user));
  };
}

}  // namespace

TEST_CASE("strategy names round trip") {
  CHECK(cold::parse_strategy("avg") == cold::Strategy::avg);
  CHECK(cold::parse_strategy("w-avg") == cold::Strategy::wavg);
  CHECK(cold::parse_strategy("wavg") == cold::Strategy::wavg);
  CHECK(std::string(cold::strategy_name(cold::Strategy::avg)) == "avg");
  CHECK(std::string(cold::strategy_name(cold::Strategy::wavg)) == "w-avg");
  CHECK_THROWS_AS(cold::parse_strategy("mean"), ConfigError);
}

TEST_CASE("config validation") {
  cold::ColdStartConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.tau_wavg = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.tau_wavg = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.tau_wavg = 0.2;
  cfg.delta = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("user similarity is the mean preference over the profile") {
  auto ds = cold_world();
  const auto& profile = ds.cold.front();
  REQUIRE(profile.outfits.size() == 5);

  SUBCASE("two-outfit mean") {
    data::ColdProfile two{profile.user_id, {profile.outfits[0], profile.outfits[1]}};
    auto score = [&](int, const std::vector<int>& items) {
      return items == ds.outfit(two.outfits[0]).items ? 0.4 : 0.8;
    };
    CHECK(cold::user_similarity(two, 3, ds, score) == (0.4 + 0.8) / 2.0);
  }

  SUBCASE("identical per-outfit scores pass through") {
    CHECK(cold::user_similarity(profile, 0, ds, table_scorer({0.37, 0, 0, 0, 0, 0})) == 0.37);
  }

  SUBCASE("empty profile is rejected") {
    data::ColdProfile empty{profile.user_id, {}};
    CHECK_THROWS_AS(cold::user_similarity(empty, 0, ds, table_scorer({0, 0, 0, 0, 0, 0})),
                    DataError);
  }

  SUBCASE("per-user sweep") {
    auto sims = cold::all_user_similarities(profile, ds, 6,
                                            table_scorer({0.1, -0.2, 0.3, 0.0, 0.9, -0.5}));
    REQUIRE(sims.size() == 6);
    CHECK(sims[1] == doctest::Approx(-0.2).epsilon(1e-12));
    CHECK(sims[4] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK_THROWS_AS(cold::all_user_similarities(profile, ds, 0, table_scorer({})), ConfigError);
  }
}

TEST_CASE("neighborhood keeps users above the threshold plus the best match") {
  SUBCASE("threshold is exclusive") {
    CHECK(cold::neighborhood({0.1, -0.3, 0.5, 0.2}, 0.0) == std::vector<int>{0, 2, 3});
    CHECK(cold::neighborhood({0.3, 0.2}, 0.3) == std::vector<int>{0});
  }
  SUBCASE("all below the threshold leaves the single best match") {
    CHECK(cold::neighborhood({0.1, -0.3, 0.5, 0.2}, 0.9) == std::vector<int>{2});
  }
  SUBCASE("all above the threshold keeps everyone") {
    CHECK(cold::neighborhood({0.1, 0.3, 0.5}, -1.0) == std::vector<int>{0, 1, 2});
  }
  SUBCASE("best-match ties go to the lowest user id") {
    CHECK(cold::neighborhood({0.7, 0.7, 0.1}, 2.0) == std::vector<int>{0});
    CHECK(cold::neighborhood({0.1, 0.7, 0.7}, 2.0) == std::vector<int>{1});
  }
  SUBCASE("no users to compare against") {
    CHECK_THROWS_AS(cold::neighborhood({}, 0.0), DataError);
  }
  SUBCASE("never empty, sorted, and threshold-consistent") {
    RngStream rng(11, "cold.hood.sweep");
    for (int trial = 0; trial < 300; ++trial) {
      int n = static_cast<int>(rng.uniform_int(1, 12));
      std::vector<double> sims(static_cast<std::size_t>(n));
      for (auto& s : sims) s = rng.uniform() * 2.0 - 1.0;
      double delta = rng.uniform() * 2.4 - 1.2;
      auto hood = cold::neighborhood(sims, delta);

      REQUIRE(!hood.empty());
      CHECK(std::is_sorted(hood.begin(), hood.end()));
      std::size_t best = 0;
      for (std::size_t i = 1; i < sims.size(); ++i)
        if (sims[i] > sims[best]) best = i;
      CHECK(std::find(hood.begin(), hood.end(), static_cast<int>(best)) != hood.end());
      for (std::size_t i = 0; i < sims.size(); ++i) {
        bool in = std::find(hood.begin(), hood.end(), static_cast<int>(i)) != hood.end();
        if (sims[i] > delta) CHECK(in);
        if (in && i != best) CHECK(sims[i] > delta);
      }
    }
  }
}

TEST_CASE("plain averaging over the neighborhood") {
  auto score = table_scorer({0.2, 0.6, -0.4});
  CHECK(cold::cold_score_avg({0, 1}, {}, score) == (0.2 + 0.6) / 2.0);
  CHECK(cold::cold_score_avg({1}, {}, score) == 0.6);
  CHECK_THROWS_AS(cold::cold_score_avg({}, {}, score), ConfigError);
}

TEST_CASE("weighted averaging") {
  SUBCASE("single neighbor matches the plain mean exactly") {
    auto score = table_scorer({0.0, 0.55});
    CHECK(cold::cold_score_wavg({1}, {0.2, 0.8}, {}, score, 0.2) ==
          cold::cold_score_avg({1}, {}, score));
  }

  SUBCASE("equal similarities match the plain mean exactly") {
    auto score = table_scorer({0.1, 0.2, 0.7});
    std::vector<int> hood{0, 1, 2};
    CHECK(cold::cold_score_wavg(hood, {0.4, 0.4, 0.4}, {}, score, 0.2) ==
          cold::cold_score_avg(hood, {}, score));
  }

  SUBCASE("weights match a hand-rolled softmax") {
    std::vector<double> sims{0.9, 0.1, 0.5};
    std::vector<double> scores{0.3, -0.8, 0.6};
    double tau = 0.25;
    double z = 0.0;
    std::vector<double> w(3);
    for (int i = 0; i < 3; ++i) {
      w[static_cast<std::size_t>(i)] = std::exp((sims[static_cast<std::size_t>(i)] - 0.9) / tau);
      z += w[static_cast<std::size_t>(i)];
    }
    double want = 0.0, wsum = 0.0;
    for (int i = 0; i < 3; ++i) {
      want += w[static_cast<std::size_t>(i)] / z * scores[static_cast<std::size_t>(i)];
      wsum += w[static_cast<std::size_t>(i)] / z;
    }
    CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cold::cold_score_wavg({0, 1, 2}, sims, {}, table_scorer(scores), tau) ==
          doctest::Approx(want).epsilon(1e-12));
  }

  SUBCASE("large temperature flattens to the plain mean") {
    auto score = table_scorer({0.3, -0.8, 0.6, 0.1});
    std::vector<int> hood{0, 1, 2, 3};
    std::vector<double> sims{0.9, -0.2, 0.5, 0.05};
    double flat = cold::cold_score_wavg(hood, sims, {}, score, 1e4);
    CHECK(flat == doctest::Approx(cold::cold_score_avg(hood, {}, score)).epsilon(1e-3));
  }

  SUBCASE("small temperature locks onto the closest neighbor") {
    auto score = table_scorer({0.3, -0.8});
    double locked = cold::cold_score_wavg({0, 1}, {0.9, 0.1}, {}, score, 0.01);
    CHECK(locked == doctest::Approx(0.3).epsilon(1e-9));
  }

  SUBCASE("bad inputs") {
    auto score = table_scorer({0.3, -0.8});
    CHECK_THROWS_AS(cold::cold_score_wavg({0}, {0.5, 0.1}, {}, score, 0.0), ConfigError);
    CHECK_THROWS_AS(cold::cold_score_wavg({0}, {0.5, 0.1}, {}, score, -1.0), ConfigError);
    CHECK_THROWS_AS(cold::cold_score_wavg({}, {0.5}, {}, score, 0.2), ConfigError);
    CHECK_THROWS_AS(cold::cold_score_wavg({3}, {0.5, 0.1}, {}, score, 0.2), DataError);
  }
}

TEST_CASE("a distant extra neighbor barely moves the weighted score") {
  // Two close neighbors and one whose similarity sits below both; at a
  // small temperature its weight must stay under the uniform share 1/3 and
  // the score must move toward (but nowhere near) its outfit score. The
  // gap is kept moderate so the shift stays resolvable in double.
  std::vector<double> sims{0.9, 0.8, 0.7};
  auto score = table_scorer({0.2, 0.4, 100.0});
  double tau = 0.01;

  double without = cold::cold_score_wavg({0, 1}, sims, {}, score, tau);
  double with = cold::cold_score_wavg({0, 1, 2}, sims, {}, score, tau);

  CHECK(with > without);
  CHECK(with < 100.0);
  CHECK(std::abs(with - without) < std::abs(100.0 - without) / 3.0);
}

TEST_CASE("raising one neighbor's outfit score raises both aggregates") {
  std::vector<double> base{0.3, -0.1, 0.5};
  std::vector<double> sims{0.6, 0.2, 0.4};
  std::vector<int> hood{0, 1, 2};
  for (std::size_t bump = 0; bump < base.size(); ++bump) {
    auto raised = base;
    raised[bump] += 0.2;
    CHECK(cold::cold_score_avg(hood, {}, table_scorer(raised)) >
          cold::cold_score_avg(hood, {}, table_scorer(base)));
    CHECK(cold::cold_score_wavg(hood, sims, {}, table_scorer(raised), 0.2) >
          cold::cold_score_wavg(hood, sims, {}, table_scorer(base), 0.2));
  }
}

TEST_CASE("strategy dispatch") {
  auto score = table_scorer({0.2, 0.6});
  std::vector<int> hood{0, 1};
  std::vector<double> sims{0.7, 0.1};

  cold::ColdStartConfig cfg;
  cfg.strategy = cold::Strategy::avg;
  CHECK(cold::cold_score(cfg, hood, sims, {}, score) == cold::cold_score_avg(hood, {}, score));
  cfg.strategy = cold::Strategy::wavg;
  CHECK(cold::cold_score(cfg, hood, sims, {}, score) ==
        cold::cold_score_wavg(hood, sims, {}, score, cfg.tau_wavg));
  cfg.tau_wavg = 0.0;
  CHECK_THROWS_AS(cold::cold_score(cfg, hood, sims, {}, score), ConfigError);
}

TEST_CASE("cold scoring against a real encoder") {
  auto ds = cold_world(21);
  model::ModelConfig mc;
  mc.d_in = ds.config.d_in;
  mc.d = 16;
  mc.heads = 2;
  mc.user_count = ds.config.users;
  mc.tier = model::Tier::xs;
  RngStream init(5, "cold.model.init");
  auto params = model::init_model<float>(mc, init);

  ScoreFn score = [&](int user, const std::vector<int>& items) {
    return static_cast<double>(model::preference_score(params, user, ds.item_features(items)));
  };

  const auto& profile = ds.cold.front();
  auto sims = cold::all_user_similarities(profile, ds, ds.config.users, score);
  REQUIRE(sims.size() == static_cast<std::size_t>(ds.config.users));
  for (double s : sims) CHECK(std::abs(s) <= 1.0 + 1e-6);

  SUBCASE("similarity agrees with direct scoring") {
    double sum = 0.0;
    for (int oid : profile.outfits) sum += score(2, ds.outfit(oid).items);
    CHECK(cold::user_similarity(profile, 2, ds, score) ==
          sum / static_cast<double>(profile.outfits.size()));
  }

  SUBCASE("both strategies stay in the cosine range") {
    auto hood = cold::neighborhood(sims, 0.0);
    REQUIRE(!hood.empty());
    auto query = ds.outfit(profile.outfits[0]).items;
    double a = cold::cold_score_avg(hood, query, score);
    double w = cold::cold_score_wavg(hood, sims, query, score, 0.2);
    CHECK(std::abs(a) <= 1.0 + 1e-6);
    CHECK(std::abs(w) <= 1.0 + 1e-6);
  }
}
