#include "outfitlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "outfitlab/error.hpp"

namespace outfitlab::metrics {

namespace {

void require_finite(const std::vector<Scored>& candidates) {
  for (const auto& c : candidates)
    if (!std::isfinite(c.score)) throw MetricError("candidate score is not finite");
}

}  // namespace

double auc(const std::vector<Scored>& candidates) {
  require_finite(candidates);
  std::size_t n_pos = 0;
  for (const auto& c : candidates) n_pos += c.label ? 1 : 0;
  std::size_t n_neg = candidates.size() - n_pos;
  if (n_pos == 0) throw MetricError("auc needs at least one positive candidate");
  if (n_neg == 0) throw MetricError("auc needs at least one negative candidate");

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&candidates](std::size_t a, std::size_t b) {
    return candidates[a].score < candidates[b].score;
  });

  // Tie runs share the average of their 1-based ranks; ranks and their
  // halves are exact in doubles, so this matches pair counting bit for bit.
  double pos_rank_sum = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           candidates[order[j + 1]].score == candidates[order[i]].score)
      ++j;
    double avg_rank = (double(i + 1) + double(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (candidates[order[k]].label) pos_rank_sum += avg_rank;
    i = j + 1;
  }
  double u = pos_rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
  return u / (double(n_pos) * double(n_neg));
}

double ndcg(const std::vector<Scored>& candidates) {
  require_finite(candidates);
  std::size_t n_pos = 0;
  for (const auto& c : candidates) n_pos += c.label ? 1 : 0;
  if (n_pos == 0) throw MetricError("ndcg needs at least one positive candidate");

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&candidates](std::size_t a, std::size_t b) {
    return candidates[a].score > candidates[b].score;
  });

  double dcg = 0;
  for (std::size_t rank = 1; rank <= order.size(); ++rank)
    if (candidates[order[rank - 1]].label) dcg += 1.0 / std::log2(double(rank) + 1.0);
  double ideal = 0;
  for (std::size_t rank = 1; rank <= n_pos; ++rank) ideal += 1.0 / std::log2(double(rank) + 1.0);
  return dcg / ideal;
}

Summary evaluate(const std::vector<data::EvalSet>& sets, const ScoreFn& score) {
  Summary out;
  double auc_sum = 0, ndcg_sum = 0;
  for (const auto& set : sets) {
    auto scores = score(set);
    if (scores.size() != set.candidates.size())
      throw MetricError("scorer returned " + std::to_string(scores.size()) + " scores for " +
                        std::to_string(set.candidates.size()) + " candidates");
    std::vector<Scored> list(set.candidates.size());
    for (std::size_t i = 0; i < list.size(); ++i)
      list[i] = {scores[i], set.candidates[i].label};
    UserReport row;
    row.user_id = set.user_id;
    for (const auto& c : list) (c.label ? row.positives : row.negatives) += 1;
    try {
      row.auc = auc(list);
      row.ndcg = ndcg(list);
    } catch (const MetricError& e) {
      out.warnings.push_back("user " + std::to_string(set.user_id) + " skipped: " + e.what());
      continue;
    }
    auc_sum += row.auc;
    ndcg_sum += row.ndcg;
    out.per_user.push_back(row);
  }
  out.users_evaluated = static_cast<int>(out.per_user.size());
  if (out.users_evaluated == 0)
    throw MetricError("no user produced a defined metric");
  out.mean_auc = auc_sum / out.users_evaluated;
  out.mean_ndcg = ndcg_sum / out.users_evaluated;
  return out;
}

std::string summary_table(const Summary& s) {
  std::ostringstream os;
  os << "user\tpositives\tnegatives\tauc\tndcg\n";
  char buf[128];
  for (const auto& row : s.per_user) {
    std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%.6f\t%.6f\n", row.user_id, row.positives,
                  row.negatives, row.auc, row.ndcg);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean\t%d\t-\t%.6f\t%.6f\n", s.users_evaluated, s.mean_auc,
                s.mean_ndcg);
  os << buf;
  for (const auto& w : s.warnings) os << "# " << w << "\n";
  return os.str();
}

}  // namespace outfitlab::metrics
