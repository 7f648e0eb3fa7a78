#pragma once

#include <cstdint>
#include <string>

#include "outfitlab/model.hpp"

namespace outfitlab::model {

// Binary model snapshot. Parameters are float32 little-endian in the
// for_each_param order, each blob prefixed by its name and shape, so a
// save/load round trip reproduces the model bit for bit.
void save_checkpoint(const std::string& path, const ModelParams<float>& params);
ModelParams<float> load_checkpoint(const std::string& path);

// FNV-1a over the raw parameter bytes in canonical order. Two models hash
// equal exactly when every parameter is bitwise identical.
std::uint64_t param_hash(const ModelParams<float>& params);

}  // namespace outfitlab::model
