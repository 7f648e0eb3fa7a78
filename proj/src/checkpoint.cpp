#include "outfitlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "outfitlab/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");
static_assert(sizeof(float) == 4);

namespace outfitlab::model {

namespace {

constexpr char kMagic[8] = {'O', 'L', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw ParseError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

std::uint32_t tier_code(Tier t) { return static_cast<std::uint32_t>(t); }

Tier tier_from_code(std::uint32_t c) {
  switch (c) {
    case 0: return Tier::teacher;
    case 1: return Tier::xs;
    case 2: return Tier::s;
    case 3: return Tier::m;
  }
  throw ParseError("checkpoint names an unknown tier code " + std::to_string(c));
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, sizeof kMagic);
  const ModelConfig& c = params.config;
  write_u32(os, static_cast<std::uint32_t>(c.d_in));
  write_u32(os, static_cast<std::uint32_t>(c.d));
  write_u32(os, static_cast<std::uint32_t>(c.heads));
  write_u32(os, static_cast<std::uint32_t>(c.sab_count));
  write_u32(os, static_cast<std::uint32_t>(c.ff_mult));
  write_u32(os, static_cast<std::uint32_t>(c.user_count));
  write_u32(os, tier_code(c.tier));

  std::uint32_t count = 0;
  for_each_param(params, [&](const std::string&, const diff::Tensor<float>&) { ++count; });
  write_u32(os, count);

  for_each_param(params, [&](const std::string& name, const diff::Tensor<float>& t) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rows));
    write_u32(os, static_cast<std::uint32_t>(t.cols));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  });
  os.flush();
  if (!os) throw DataError("failed while writing checkpoint: " + path);
}

ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw ParseError("not a checkpoint file: " + path);

  ModelConfig c;
  c.d_in = static_cast<int>(read_u32(is, "d_in"));
  c.d = static_cast<int>(read_u32(is, "d"));
  c.heads = static_cast<int>(read_u32(is, "heads"));
  c.sab_count = static_cast<int>(read_u32(is, "sab_count"));
  c.ff_mult = static_cast<int>(read_u32(is, "ff_mult"));
  c.user_count = static_cast<int>(read_u32(is, "user_count"));
  c.tier = tier_from_code(read_u32(is, "tier"));

  ModelParams<float> params = zeros_model<float>(c);
  std::uint32_t count = read_u32(is, "parameter count");
  std::uint32_t expected = 0;
  for_each_param(params, [&](const std::string&, const diff::Tensor<float>&) { ++expected; });
  if (count != expected)
    throw ParseError("checkpoint holds " + std::to_string(count) + " parameters, model needs " +
                     std::to_string(expected));

  for_each_param(params, [&](const std::string& name, diff::Tensor<float>& t) {
    std::uint32_t len = read_u32(is, "parameter name length");
    std::string stored(len, '\0');
    if (!is.read(stored.data(), len)) throw ParseError("checkpoint truncated in parameter names");
    if (stored != name)
      throw ParseError("checkpoint parameter '" + stored + "' where '" + name + "' was expected");
    auto rows = static_cast<int>(read_u32(is, "rows"));
    auto cols = static_cast<int>(read_u32(is, "cols"));
    if (rows != t.rows || cols != t.cols)
      throw ParseError("checkpoint parameter '" + name + "' has shape [" + std::to_string(rows) +
                       "x" + std::to_string(cols) + "], expected " + t.shape_str());
    if (!is.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(float))))
      throw ParseError("checkpoint truncated in parameter '" + name + "'");
  });
  return params;
}

std::uint64_t param_hash(const ModelParams<float>& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for_each_param(params, [&](const std::string& name, const diff::Tensor<float>& t) {
    mix(name.data(), name.size());
    mix(t.data.data(), t.data.size() * sizeof(float));
  });
  return h;
}

}  // namespace outfitlab::model
