#pragma once

#include <functional>
#include <string>
#include <vector>

#include "outfitlab/dataset.hpp"

namespace outfitlab::cold {

// Scoring for users the model never trained on. A cold user brings a small
// profile of interacted outfits; their preference for a query outfit is
// aggregated from warm users whose tastes look similar, with no training
// and no new embedding. Similarity from cold user c to warm user i is the
// mean of i's preference scores over c's profile outfits (asymmetric: it
// asks how much i likes what c wears).

// Preference of a warm user for an outfit given as item ids. The harness
// wraps a frozen model; tests inject score tables directly.
using ScoreFn = std::function<double(int user_id, const std::vector<int>& items)>;

enum class Strategy { avg, wavg };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& name);

struct ColdStartConfig {
  double delta = 0.0;    // neighborhood threshold, exclusive; 0 is the
                         // midpoint of the cosine similarity range
  double tau_wavg = 0.2; // softmax temperature for weighted aggregation
  Strategy strategy = Strategy::wavg;

  void validate() const;
};

// Mean preference of warm user_id over the profile's outfits.
double user_similarity(const data::ColdProfile& profile, int user_id, const data::Dataset& ds,
                       const ScoreFn& score);

// Similarity of the cold profile to every warm user, indexed by user id.
std::vector<double> all_user_similarities(const data::ColdProfile& profile,
                                          const data::Dataset& ds, int warm_user_count,
                                          const ScoreFn& score);

// Warm users with similarity strictly above delta, plus the best-matching
// user unconditionally, so the result is never empty. Ties for the best
// match go to the lowest user id. Returned ids are sorted.
std::vector<int> neighborhood(const std::vector<double>& similarities, double delta);

// Plain mean of the neighbors' preference scores for the outfit.
double cold_score_avg(const std::vector<int>& neighbors, const std::vector<int>& outfit_items,
                      const ScoreFn& score);

// Mean weighted by softmax(similarity / tau) over the neighborhood, so
// closer neighbors dominate as tau shrinks and the result approaches the
// plain mean as tau grows.
double cold_score_wavg(const std::vector<int>& neighbors,
                       const std::vector<double>& similarities,
                       const std::vector<int>& outfit_items, const ScoreFn& score, double tau);

// Dispatch on the configured strategy.
double cold_score(const ColdStartConfig& cfg, const std::vector<int>& neighbors,
                  const std::vector<double>& similarities,
                  const std::vector<int>& outfit_items, const ScoreFn& score);

}  // namespace outfitlab::cold
