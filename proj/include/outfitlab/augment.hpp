#pragma once

#include <string>
#include <vector>

#include "outfitlab/dataset.hpp"
#include "outfitlab/rng.hpp"
#include "outfitlab/tensor.hpp"

namespace outfitlab::augment {

enum class Kind { identity, erase, replace };

const char* kind_name(Kind k);
Kind parse_kind(const std::string& s);

// Small item autoencoder whose latent space drives the similar-item
// lookups behind the replace augmentation.
struct AutoencoderConfig {
  int d_lat = 32;
  int epochs = 150;
  double lr = 0.01;
  double momentum = 0.9;
  int batch = 32;
  bool relu_encoder = true;  // off: purely linear maps
  double holdout_frac = 0.1;

  void validate() const;
};

struct AutoencoderParams {
  AutoencoderConfig config;
  int d_in = 0;
  diff::Tensor<float> enc_w, enc_b, dec_w, dec_b;
};

struct AutoencoderReport {
  double init_holdout_mse = 0;
  double final_holdout_mse = 0;
  std::vector<double> train_mse_per_epoch;
};

AutoencoderParams init_autoencoder(int d_in, const AutoencoderConfig& cfg, RngStream& rng);

// Minibatch SGD on mean squared reconstruction error. The last tenth of a
// shuffled row order is held out to report generalization, never trained.
AutoencoderReport train_autoencoder(AutoencoderParams& params,
                                    const diff::Tensor<float>& features, RngStream& rng);

diff::Tensor<float> encode_latent(const AutoencoderParams& params,
                                  const diff::Tensor<float>& features);

// Per-item latent vectors plus category bookkeeping for neighbor queries.
struct SimilarityIndex {
  int d_lat = 0;
  std::vector<int> category_of;             // by item id
  std::vector<std::vector<float>> latents;  // by item id
  std::vector<std::vector<int>> by_category;

  // Up to k same-category items by descending latent cosine, the query
  // itself excluded; ties and degenerate latents fall back to lower ids.
  std::vector<int> top_neighbors(int item_id, int k) const;
};

SimilarityIndex build_similarity_index(const data::Dataset& ds, const AutoencoderParams& params);

// Binary inspection dump: per item, id, category, and the latent floats.
void dump_index(const std::string& path, const SimilarityIndex& index);

// One item removed at a uniform position. The removed position is written
// to *altered when given.
std::vector<int> erase_item(const std::vector<int>& items, RngStream& rng, int* altered = nullptr);

// One uniform position swapped for a uniform draw among that item's top-k
// index neighbors not already in the outfit.
std::vector<int> replace_item(const std::vector<int>& items, const SimilarityIndex& index, int k,
                              RngStream& rng, int* altered = nullptr);

struct Views {
  std::vector<int> a, b;
  bool fallback = false;  // some leg degraded to identity on a tiny outfit
};

// Two augmented views of one outfit. Identical kinds alter different
// positions; outfits too small for a kind degrade that leg to identity.
Views make_views(const std::vector<int>& items, Kind first, Kind second,
                 const SimilarityIndex& index, int k, RngStream& rng);

}  // namespace outfitlab::augment
