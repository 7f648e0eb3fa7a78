#include "outfitlab/coldstart.hpp"

#include <algorithm>
#include <cmath>

#include "outfitlab/error.hpp"

namespace outfitlab::cold {

const char* strategy_name(Strategy s) { return s == Strategy::avg ? "avg" : "w-avg"; }

Strategy parse_strategy(const std::string& name) {
  if (name == "avg") return Strategy::avg;
  if (name == "w-avg" || name == "wavg") return Strategy::wavg;
  throw ConfigError("unknown cold-start strategy '" + name + "' (expected avg or w-avg)");
}

void ColdStartConfig::validate() const {
  if (!(tau_wavg > 0.0)) throw ConfigError("cold start: tau_wavg must be positive");
  if (!std::isfinite(delta)) throw ConfigError("cold start: delta must be finite");
}

double user_similarity(const data::ColdProfile& profile, int user_id, const data::Dataset& ds,
                       const ScoreFn& score) {
  if (profile.outfits.empty())
    throw DataError("user_similarity: cold user " + std::to_string(profile.user_id) +
                    " has an empty profile");
  double sum = 0.0;
  for (int oid : profile.outfits) sum += score(user_id, ds.outfit(oid).items);
  return sum / static_cast<double>(profile.outfits.size());
}

std::vector<double> all_user_similarities(const data::ColdProfile& profile,
                                          const data::Dataset& ds, int warm_user_count,
                                          const ScoreFn& score) {
  if (warm_user_count < 1) throw ConfigError("all_user_similarities: no warm users");
  std::vector<double> sims(static_cast<std::size_t>(warm_user_count));
  for (int u = 0; u < warm_user_count; ++u) sims[static_cast<std::size_t>(u)] =
      user_similarity(profile, u, ds, score);
  return sims;
}

std::vector<int> neighborhood(const std::vector<double>& similarities, double delta) {
  if (similarities.empty()) throw DataError("neighborhood: no users to compare against");
  std::size_t best = 0;
  for (std::size_t i = 1; i < similarities.size(); ++i)
    if (similarities[i] > similarities[best]) best = i;
  std::vector<int> out;
  for (std::size_t i = 0; i < similarities.size(); ++i)
    if (similarities[i] > delta || i == best) out.push_back(static_cast<int>(i));
  return out;
}

namespace {

void check_neighbors(const std::vector<int>& neighbors, std::size_t population,
                     const char* where) {
  if (neighbors.empty()) throw ConfigError(std::string(where) + ": empty neighborhood");
  for (int n : neighbors)
    if (n < 0 || (population > 0 && static_cast<std::size_t>(n) >= population))
      throw DataError(std::string(where) + ": neighbor id " + std::to_string(n) +
                      " out of range");
}

}  // namespace

double cold_score_avg(const std::vector<int>& neighbors, const std::vector<int>& outfit_items,
                      const ScoreFn& score) {
  check_neighbors(neighbors, 0, "cold_score_avg");
  double sum = 0.0;
  for (int n : neighbors) sum += score(n, outfit_items);
  return sum / static_cast<double>(neighbors.size());
}

double cold_score_wavg(const std::vector<int>& neighbors,
                       const std::vector<double>& similarities,
                       const std::vector<int>& outfit_items, const ScoreFn& score, double tau) {
  if (!(tau > 0.0)) throw ConfigError("cold_score_wavg: tau must be positive");
  check_neighbors(neighbors, similarities.size(), "cold_score_wavg");

  // Max-shifted softmax over the neighbors' similarities. Normalization
  // happens once at the end so that equal similarities (all weights 1)
  // reduce to the plain mean bit for bit.
  double top = similarities[static_cast<std::size_t>(neighbors[0])];
  for (int n : neighbors) top = std::max(top, similarities[static_cast<std::size_t>(n)]);
  double z = 0.0;
  double num = 0.0;
  for (int n : neighbors) {
    double w = std::exp((similarities[static_cast<std::size_t>(n)] - top) / tau);
    z += w;
    num += w * score(n, outfit_items);
  }
  return num / z;
}

double cold_score(const ColdStartConfig& cfg, const std::vector<int>& neighbors,
                  const std::vector<double>& similarities,
                  const std::vector<int>& outfit_items, const ScoreFn& score) {
  cfg.validate();
  if (cfg.strategy == Strategy::avg) return cold_score_avg(neighbors, outfit_items, score);
  return cold_score_wavg(neighbors, similarities, outfit_items, score, cfg.tau_wavg);
}

}  // namespace outfitlab::cold
