#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "outfitlab/augment.hpp"
#include "outfitlab/coldstart.hpp"
#include "outfitlab/dataset.hpp"
#include "outfitlab/metrics.hpp"
#include "outfitlab/model.hpp"

namespace outfitlab::run {

enum class Mode { teacher, student };
enum class LossKind { bpr, npair, fnd, fnd_cl };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& s);
const char* loss_name(LossKind k);
LossKind parse_loss(const std::string& s);

struct LossConfig {
  float tau = 0.1f;      // ranking softmax temperature (N-pair, FND, BPR)
  float tau_cl = 0.1f;   // contrastive temperature
  float alpha = 1.25f;   // false-negativeness scale
  float lambda = 0.2f;   // contrastive weight in the combined objective
};

// Everything one training run needs. The same struct round-trips through
// the flat key-value config files the CLI reads and the reports embed.
struct RunConfig {
  std::string dataset_path;
  Mode mode = Mode::teacher;
  LossKind loss = LossKind::npair;
  LossConfig loss_cfg;
  model::Tier tier = model::Tier::teacher;
  augment::Kind view_a = augment::Kind::erase;
  augment::Kind view_b = augment::Kind::replace;
  int batch = 32;  // pairs per step; also the negative count per pair
  int epochs = 30;
  float lr = 0.05f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  bool hard_negatives = false;
  // One negative pool per step instead of per pair; a throughput switch,
  // off by default.
  bool shared_negatives = false;
  std::string teacher_checkpoint;  // fnd / fnd_cl
  std::string cache_path;          // fnd / fnd_cl
  int neighbor_k = 5;              // replacement candidates per item
  // Replaces every distillation signal with exactly 1, turning an fnd run
  // into an n-pair run without touching the teacher. Exists so the
  // reduction identity can be exercised end to end.
  bool force_unit_signals = false;

  int d = 128;  // representation width shared by every tier
  int heads = 8;
  int sab_count = 2;
  int ff_mult = 2;
  augment::AutoencoderConfig autoencoder;

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  static RunConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Per-user positive boundary under a frozen teacher: the mean teacher
// score over the user's train positives.
struct TeacherCache {
  std::uint64_t teacher_hash = 0;
  std::vector<double> rhat;        // indexed by warm user id; NaN when excluded
  std::vector<int> excluded;       // users with no train positives
  std::vector<std::string> warnings;
};

TeacherCache build_teacher_cache(const model::ModelParams<float>& teacher,
                                 const data::Dataset& ds);
void save_cache(const std::string& path, const TeacherCache& cache);
TeacherCache load_cache(const std::string& path);

// Frozen-teacher scoring with an in-process memo keyed by user and outfit
// content, so resampled negatives are never re-encoded twice.
class TeacherScorer {
 public:
  TeacherScorer(const model::ModelParams<float>& teacher, const data::Dataset& ds);

  double score(int user, const std::vector<int>& items);
  // Batched variant; encodes only the outfits the memo has not seen.
  std::vector<double> scores(const std::vector<int>& users,
                             const std::vector<std::vector<int>>& outfits);
  std::size_t memo_size() const { return memo_.size(); }

 private:
  // Fresh negatives rarely repeat, so the memo is dropped wholesale once it
  // reaches this size rather than evicted entry by entry. The clear point
  // depends only on the sequence of score requests, which keeps reruns of
  // the same configuration on the same arithmetic path.
  static constexpr std::size_t kMemoCap = 200000;

  const model::ModelParams<float>& teacher_;
  const data::Dataset& ds_;
  std::unordered_map<std::string, double> memo_;
};

// Scores every candidate of an eval set in one encoder pass.
std::vector<double> score_eval_set(const model::ModelParams<float>& params,
                                   const data::Dataset& ds, const data::EvalSet& set);

// Candidate scores for one outfit against every warm user at once.
std::vector<double> score_for_all_users(const model::ModelParams<float>& params,
                                        const data::Dataset& ds,
                                        const std::vector<int>& items);

struct EpochStats {
  double train_loss = 0.0;
  double val_auc = 0.0;
  std::uint64_t param_hash = 0;  // after the epoch's last step
};

struct TrainResult {
  model::ModelParams<float> best;  // highest validation AUC (first on ties)
  int best_epoch = -1;             // -1 when epochs == 0
  double best_val_auc = 0.0;
  std::vector<EpochStats> epochs;
  bool diverged = false;
  std::string divergence_message;
  std::vector<std::string> warnings;
};

// Runs one training job on an already loaded dataset. The teacher pair is
// required iff cfg.loss is fnd or fnd_cl and signals are not forced.
TrainResult train(const RunConfig& cfg, const data::Dataset& ds,
                  const model::ModelParams<float>* teacher, const TeacherCache* cache);

struct ExperimentReport {
  std::map<std::string, std::string> config;  // flat echo of the run config
  std::vector<EpochStats> epochs;
  double test_auc = 0.0;
  double test_ndcg = 0.0;
  int best_epoch = -1;
  double best_val_auc = 0.0;
  double wall_seconds = 0.0;
  bool diverged = false;
  std::vector<std::string> warnings;
};

void save_report(const std::string& prefix, const ExperimentReport& rep);
std::map<std::string, std::string> load_kv(const std::string& path);

// Loads the dataset (and teacher pair when the loss needs it), trains,
// evaluates the selected checkpoint on the test split, and writes
// checkpoint.bin, report.kv, and report.txt under out_dir.
ExperimentReport run_training_job(const RunConfig& cfg, const std::string& out_dir);

// Fixed evaluation protocol: one positive to ten sampled negatives.
inline constexpr int kEvalNegRatio = 10;

// Builds one eval set per user with a nonempty slice of the given split.
// The seed pins the candidate draw so repeated evaluations agree.
std::vector<data::EvalSet> build_eval_sets(const data::Dataset& ds, data::SplitKind split,
                                           bool hard, std::uint64_t seed);

metrics::Summary evaluate_checkpoint(const model::ModelParams<float>& params,
                                     const data::Dataset& ds, data::SplitKind split, bool hard,
                                     std::uint64_t seed);

struct ColdStartOptions {
  int k = 5;                  // interacted outfits revealed per cold user
  int repetitions = 10;
  cold::ColdStartConfig scoring;
  std::uint64_t eval_seed = 1;
};

struct ColdStartReport {
  std::vector<double> rep_auc;  // mean AUC per repetition
  double mean_auc = 0.0;
  std::vector<std::string> warnings;
};

ColdStartReport run_cold_start(const model::ModelParams<float>& params, const data::Dataset& ds,
                               const ColdStartOptions& opt);

// Writes user embeddings and the representations of every split outfit with
// ownership labels. Re-export of a frozen model is byte-identical.
void export_embeddings(const model::ModelParams<float>& params, const data::Dataset& ds,
                       const std::string& path);

}  // namespace outfitlab::run
