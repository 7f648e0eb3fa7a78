#pragma once

#include <functional>
#include <string>
#include <vector>

#include "outfitlab/dataset.hpp"

namespace outfitlab::metrics {

struct Scored {
  double score = 0;
  int label = 0;
};

// Fraction of (positive, negative) pairs ranked correctly, ties worth 1/2.
// Needs at least one candidate of each class.
double auc(const std::vector<Scored>& candidates);

// Binary-gain NDCG over the full list, ties kept in input order.
// Needs at least one positive.
double ndcg(const std::vector<Scored>& candidates);

struct UserReport {
  int user_id = -1;
  int positives = 0;
  int negatives = 0;
  double auc = 0;
  double ndcg = 0;
};

struct Summary {
  std::vector<UserReport> per_user;
  std::vector<std::string> warnings;  // users skipped for degenerate eval sets
  double mean_auc = 0;
  double mean_ndcg = 0;
  int users_evaluated = 0;
};

// score(set) returns one score per candidate, aligned with set.candidates.
using ScoreFn = std::function<std::vector<double>(const data::EvalSet&)>;

// Unweighted per-user means; users whose sets cannot support a metric are
// skipped with a warning instead of poisoning the averages.
Summary evaluate(const std::vector<data::EvalSet>& sets, const ScoreFn& score);

// Tab-separated per-user table plus a trailing mean row.
std::string summary_table(const Summary& s);

}  // namespace outfitlab::metrics
