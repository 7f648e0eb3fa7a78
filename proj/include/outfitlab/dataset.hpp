#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "outfitlab/rng.hpp"
#include "outfitlab/tensor.hpp"

namespace outfitlab::data {

// Parameters of the synthetic world. Items are category prototypes plus a
// hidden low-dimensional style component plus noise; each user has a hidden
// unit style vector, and their positives are sampled per category with
// probability softmax(affinity / preference_temp). The hidden style of
// every user is kept as a feature-space oracle direction so experiments
// can measure how much planted preference a model recovered.
struct WorldConfig {
  int users = 50;
  int items_per_category = 200;
  int d_in = 32;
  int style_dim = 8;
  int positives_per_user = 60;
  double prototype_scale = 2.0;
  double style_scale = 1.0;
  double noise_scale = 0.15;
  double preference_temp = 0.1;
  double train_pool_frac = 0.7;  // per-user share of items reserved for train-side outfits
  bool variable_size = false;
  double extra_item_prob = 0.3;  // chance a category contributes two items to an outfit
  int cold_users = 0;
  int cold_positives = 12;
  std::uint64_t seed = 1;
  std::vector<std::string> categories = {"top", "bottom", "shoes"};

  void validate() const;
};

struct Item {
  int id = -1;
  int category = -1;
  std::vector<float> features;
};

struct Outfit {
  int id = -1;
  std::vector<int> items;
};

struct UserSplits {
  std::vector<int> train, val_teacher, val_student, test;
};

// A cold user's interaction profile: outfit ids in the shared outfit
// table. Cold users take part in no training split.
struct ColdProfile {
  int user_id = -1;
  std::vector<int> outfits;
};

struct Dataset {
  WorldConfig config;
  std::vector<std::string> categories;
  std::vector<Item> items;      // id == index
  std::vector<Outfit> outfits;  // id == index
  int user_count = 0;
  std::vector<UserSplits> splits;           // one per warm user
  std::vector<std::vector<float>> oracle;   // per user (warm, then cold): hidden style direction
  std::vector<ColdProfile> cold;

  // Derived indexes, rebuilt by finalize() after generation or loading.
  std::vector<std::vector<int>> items_by_category;
  // Per user (warm, then cold): sorted canonical item-id keys of their
  // positives, for collision checks during negative sampling.
  std::vector<std::vector<std::vector<int>>> positive_keys;
  // Category-count profiles of warm train positives; negative sampling in
  // variable-size worlds draws its outfit shape from these.
  std::vector<std::vector<int>> train_size_profiles;

  void finalize();
  bool is_user_positive(int user, const std::vector<int>& outfit_items) const;

  const Outfit& outfit(int id) const;
  const Item& item(int id) const;

  // Stacks the raw features of the given items row-wise.
  diff::Tensor<float> item_features(const std::vector<int>& item_ids) const;

  // Feature-space oracle preference: cosine of the user's hidden style
  // direction with the mean item feature of the outfit.
  double oracle_score(int user, const std::vector<int>& outfit_items) const;
};

Dataset generate_world(const WorldConfig& cfg);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

void save_cold_profiles(const std::string& path, const Dataset& ds);
// Loads profiles into ds.cold (and checks the referenced outfits exist).
void load_cold_profiles(const std::string& path, Dataset& ds);

// Uniform random negative outfit: one item per category (or a size profile
// copied from a random train positive when the world uses variable sizes),
// resampled while it collides with one of the user's own positives.
std::vector<int> sample_negative_items(const Dataset& ds, int user, RngStream& rng);

// A train positive of a different, uniformly drawn user.
std::vector<int> sample_hard_negative_items(const Dataset& ds, int user, RngStream& rng);

enum class SplitKind { train, val_teacher, val_student, test };
const char* split_name(SplitKind k);

struct Candidate {
  std::vector<int> items;
  int label = 0;  // 1 for a held-out positive
};

struct EvalSet {
  int user_id = -1;
  std::vector<Candidate> candidates;
};

// Positives of the chosen split plus neg_ratio sampled negatives per
// positive (hard negatives when hard is set).
EvalSet build_eval_set(const Dataset& ds, int user, SplitKind split, int neg_ratio, bool hard,
                       RngStream& rng);

// Structural integrity report; an empty result means the dataset holds
// every invariant the generator promises.
std::vector<std::string> audit_dataset(const Dataset& ds);

}  // namespace outfitlab::data
