#include "outfitlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "outfitlab/checkpoint.hpp"
#include "outfitlab/error.hpp"
#include "outfitlab/losses.hpp"
#include "outfitlab/optim.hpp"
#include "outfitlab/tape.hpp"

namespace outfitlab::run {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    std::uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

// Memoization key for a frozen-teacher score: user plus canonical content.
std::string outfit_key(int user, const std::vector<int>& items) {
  std::vector<int> sorted(items);
  std::sort(sorted.begin(), sorted.end());
  std::string key = std::to_string(user);
  for (int id : sorted) {
    key.push_back('|');
    key += std::to_string(id);
  }
  return key;
}

// Stacks the raw features of a list of outfits and returns per-outfit
// group sizes for the encoder.
diff::Tensor<float> stack_features(const data::Dataset& ds,
                                   const std::vector<const std::vector<int>*>& outfits,
                                   std::vector<int>& groups) {
  std::vector<int> all_items;
  groups.clear();
  groups.reserve(outfits.size());
  for (const auto* o : outfits) {
    groups.push_back(static_cast<int>(o->size()));
    all_items.insert(all_items.end(), o->begin(), o->end());
  }
  return ds.item_features(all_items);
}

// Cosine of a representation row against a user row, matching the tape's
// rows_cosine arithmetic: sequential float sums, result clamped to [-1, 1].
float rep_user_cosine(const float* rep, const float* user, std::size_t d) {
  float nr = diff::detail::seq_norm(rep, d);
  float nu = diff::detail::seq_norm(user, d);
  if (!(nr >= diff::kMinDirectionNorm<float>) || !(nu >= diff::kMinDirectionNorm<float>))
    throw NumericError("preference scoring: near-zero representation or user norm");
  float c = diff::detail::seq_dot(rep, user, d) / (nr * nu);
  return std::min(1.0f, std::max(-1.0f, c));
}

}  // namespace

const char* mode_name(Mode m) { return m == Mode::teacher ? "teacher" : "student"; }

Mode parse_mode(const std::string& s) {
  if (s == "teacher") return Mode::teacher;
  if (s == "student") return Mode::student;
  throw ConfigError("unknown mode '" + s + "' (expected teacher or student)");
}

const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::bpr: return "bpr";
    case LossKind::npair: return "npair";
    case LossKind::fnd: return "fnd";
    case LossKind::fnd_cl: return "fnd_cl";
  }
  throw ConfigError("unknown loss kind");
}

LossKind parse_loss(const std::string& s) {
  if (s == "bpr") return LossKind::bpr;
  if (s == "npair") return LossKind::npair;
  if (s == "fnd") return LossKind::fnd;
  if (s == "fnd_cl") return LossKind::fnd_cl;
  throw ConfigError("unknown loss '" + s + "' (expected bpr, npair, fnd, or fnd_cl)");
}

void RunConfig::validate() const {
  if (dataset_path.empty()) throw ConfigError("run: dataset path is required");
  if (batch < 1) throw ConfigError("run: batch size must be positive");
  if (epochs < 0) throw ConfigError("run: epochs must be nonnegative");
  if (!(lr > 0.0f)) throw ConfigError("run: learning rate must be positive");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw ConfigError("run: momentum must be in [0, 1)");
  if (!(loss_cfg.tau > 0.0f)) throw ConfigError("run: tau must be positive");
  if (!(loss_cfg.tau_cl > 0.0f)) throw ConfigError("run: tau_cl must be positive");
  if (!(loss_cfg.alpha > 0.0f)) throw ConfigError("run: alpha must be positive");
  if (!(loss_cfg.lambda >= 0.0f)) throw ConfigError("run: lambda must be nonnegative");
  if (neighbor_k < 1) throw ConfigError("run: neighbor_k must be positive");
  if (view_a == augment::Kind::identity && view_b == augment::Kind::identity)
    throw ConfigError("run: at least one view must actually transform the outfit");
  if (mode == Mode::teacher) {
    if (loss != LossKind::npair) throw ConfigError("run: the teacher trains with the npair loss");
    if (tier != model::Tier::teacher) throw ConfigError("run: teacher mode uses the teacher tier");
  } else {
    if (tier == model::Tier::teacher)
      throw ConfigError("run: student mode uses a compact tier (xs, s, or m)");
  }
  if (d < 1 || heads < 1 || d % heads != 0)
    throw ConfigError("run: head count must divide the representation width");
  if (sab_count < 1 || ff_mult < 1) throw ConfigError("run: encoder depth fields must be positive");
  autoencoder.validate();
}

std::map<std::string, std::string> RunConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["dataset"] = dataset_path;
  kv["mode"] = mode_name(mode);
  kv["loss"] = loss_name(loss);
  kv["tau"] = fmt_float(loss_cfg.tau);
  kv["tau_cl"] = fmt_float(loss_cfg.tau_cl);
  kv["alpha"] = fmt_float(loss_cfg.alpha);
  kv["lambda"] = fmt_float(loss_cfg.lambda);
  kv["tier"] = model::tier_name(tier);
  kv["view_a"] = augment::kind_name(view_a);
  kv["view_b"] = augment::kind_name(view_b);
  kv["batch"] = std::to_string(batch);
  kv["epochs"] = std::to_string(epochs);
  kv["lr"] = fmt_float(lr);
  kv["momentum"] = fmt_float(momentum);
  kv["seed"] = std::to_string(seed);
  kv["hard_negatives"] = hard_negatives ? "1" : "0";
  kv["shared_negatives"] = shared_negatives ? "1" : "0";
  kv["teacher_checkpoint"] = teacher_checkpoint;
  kv["cache"] = cache_path;
  kv["neighbor_k"] = std::to_string(neighbor_k);
  kv["force_unit_signals"] = force_unit_signals ? "1" : "0";
  kv["d"] = std::to_string(d);
  kv["heads"] = std::to_string(heads);
  kv["sab_count"] = std::to_string(sab_count);
  kv["ff_mult"] = std::to_string(ff_mult);
  kv["autoencoder.d_lat"] = std::to_string(autoencoder.d_lat);
  kv["autoencoder.epochs"] = std::to_string(autoencoder.epochs);
  kv["autoencoder.lr"] = fmt_double(autoencoder.lr);
  kv["autoencoder.momentum"] = fmt_double(autoencoder.momentum);
  kv["autoencoder.batch"] = std::to_string(autoencoder.batch);
  kv["autoencoder.relu"] = autoencoder.relu_encoder ? "1" : "0";
  kv["autoencoder.holdout_frac"] = fmt_double(autoencoder.holdout_frac);
  return kv;
}

RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "dataset") cfg.dataset_path = value;
    else if (key == "mode") cfg.mode = parse_mode(value);
    else if (key == "loss") cfg.loss = parse_loss(value);
    else if (key == "tau") cfg.loss_cfg.tau = static_cast<float>(parse_real(key, value));
    else if (key == "tau_cl") cfg.loss_cfg.tau_cl = static_cast<float>(parse_real(key, value));
    else if (key == "alpha") cfg.loss_cfg.alpha = static_cast<float>(parse_real(key, value));
    else if (key == "lambda") cfg.loss_cfg.lambda = static_cast<float>(parse_real(key, value));
    else if (key == "tier") cfg.tier = model::parse_tier(value);
    else if (key == "view_a") cfg.view_a = augment::parse_kind(value);
    else if (key == "view_b") cfg.view_b = augment::parse_kind(value);
    else if (key == "batch") cfg.batch = parse_int(key, value);
    else if (key == "epochs") cfg.epochs = parse_int(key, value);
    else if (key == "lr") cfg.lr = static_cast<float>(parse_real(key, value));
    else if (key == "momentum") cfg.momentum = static_cast<float>(parse_real(key, value));
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "hard_negatives") cfg.hard_negatives = parse_bool(key, value);
    else if (key == "shared_negatives") cfg.shared_negatives = parse_bool(key, value);
    else if (key == "teacher_checkpoint") cfg.teacher_checkpoint = value;
    else if (key == "cache") cfg.cache_path = value;
    else if (key == "neighbor_k") cfg.neighbor_k = parse_int(key, value);
    else if (key == "force_unit_signals") cfg.force_unit_signals = parse_bool(key, value);
    else if (key == "d") cfg.d = parse_int(key, value);
    else if (key == "heads") cfg.heads = parse_int(key, value);
    else if (key == "sab_count") cfg.sab_count = parse_int(key, value);
    else if (key == "ff_mult") cfg.ff_mult = parse_int(key, value);
    else if (key == "autoencoder.d_lat") cfg.autoencoder.d_lat = parse_int(key, value);
    else if (key == "autoencoder.epochs") cfg.autoencoder.epochs = parse_int(key, value);
    else if (key == "autoencoder.lr") cfg.autoencoder.lr = parse_real(key, value);
    else if (key == "autoencoder.momentum") cfg.autoencoder.momentum = parse_real(key, value);
    else if (key == "autoencoder.batch") cfg.autoencoder.batch = parse_int(key, value);
    else if (key == "autoencoder.relu") cfg.autoencoder.relu_encoder = parse_bool(key, value);
    else if (key == "autoencoder.holdout_frac") cfg.autoencoder.holdout_frac = parse_real(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Frozen-teacher scoring
// ---------------------------------------------------------------------------

TeacherScorer::TeacherScorer(const model::ModelParams<float>& teacher, const data::Dataset& ds)
    : teacher_(teacher), ds_(ds) {
  if (teacher.config.d_in != ds.config.d_in)
    throw ConfigError("teacher scorer: checkpoint expects feature width " +
                      std::to_string(teacher.config.d_in) + ", dataset has " +
                      std::to_string(ds.config.d_in));
}

double TeacherScorer::score(int user, const std::vector<int>& items) {
  return scores({user}, {items})[0];
}

std::vector<double> TeacherScorer::scores(const std::vector<int>& users,
                                          const std::vector<std::vector<int>>& outfits) {
  if (users.size() != outfits.size())
    throw DimensionError("teacher scorer: one user per outfit");
  std::vector<std::string> keys(users.size());
  std::vector<std::size_t> miss;
  std::set<std::string> queued;
  for (std::size_t i = 0; i < users.size(); ++i) {
    keys[i] = outfit_key(users[i], outfits[i]);
    if (!memo_.count(keys[i]) && queued.insert(keys[i]).second) miss.push_back(i);
  }
  if (!miss.empty()) {
    std::vector<const std::vector<int>*> stack;
    std::vector<int> miss_users;
    stack.reserve(miss.size());
    for (std::size_t i : miss) {
      stack.push_back(&outfits[i]);
      miss_users.push_back(users[i]);
    }
    std::vector<int> groups;
    auto feats = stack_features(ds_, stack, groups);
    auto reps = model::encode_outfits_value(teacher_, feats, groups);
    const auto d = static_cast<std::size_t>(reps.cols);
    for (std::size_t j = 0; j < miss.size(); ++j) {
      const float* rep = reps.data.data() + j * d;
      const float* user_row =
          teacher_.users.data.data() + static_cast<std::size_t>(miss_users[j]) * d;
      memo_[keys[miss[j]]] = static_cast<double>(rep_user_cosine(rep, user_row, d));
    }
  }
  std::vector<double> out(users.size());
  for (std::size_t i = 0; i < users.size(); ++i) out[i] = memo_.at(keys[i]);
  if (memo_.size() > kMemoCap) memo_.clear();
  return out;
}

TeacherCache build_teacher_cache(const model::ModelParams<float>& teacher,
                                 const data::Dataset& ds) {
  TeacherCache cache;
  cache.teacher_hash = model::param_hash(teacher);
  cache.rhat.assign(static_cast<std::size_t>(ds.config.users),
                    std::numeric_limits<double>::quiet_NaN());
  TeacherScorer scorer(teacher, ds);
  for (int u = 0; u < ds.config.users; ++u) {
    const auto& train = ds.splits[static_cast<std::size_t>(u)].train;
    if (train.empty()) {
      cache.excluded.push_back(u);
      cache.warnings.push_back("user " + std::to_string(u) +
                               " has no train positives and was excluded from the cache");
      continue;
    }
    std::vector<int> users(train.size(), u);
    std::vector<std::vector<int>> outfits;
    outfits.reserve(train.size());
    for (int oid : train) outfits.push_back(ds.outfit(oid).items);
    auto s = scorer.scores(users, outfits);
    double sum = 0.0;
    for (double v : s) sum += v;
    cache.rhat[static_cast<std::size_t>(u)] = sum / static_cast<double>(s.size());
  }
  return cache;
}

void save_cache(const std::string& path, const TeacherCache& cache) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write teacher cache '" + path + "'");
  out << "outfitlab teacher cache v1\n";
  out << "hash " << cache.teacher_hash << "\n";
  out << "users " << cache.rhat.size() << "\n";
  for (std::size_t u = 0; u < cache.rhat.size(); ++u) {
    out << "rhat " << u << ' ';
    if (std::isnan(cache.rhat[u])) out << "excluded\n";
    else out << fmt_double(cache.rhat[u]) << '\n';
  }
  out << "end\n";
  if (!out) throw DataError("failed writing teacher cache '" + path + "'");
}

TeacherCache load_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read teacher cache '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "outfitlab teacher cache v1")
    throw ParseError("teacher cache '" + path + "': bad header");
  TeacherCache cache;
  std::size_t users = 0;
  {
    std::string word;
    if (!(in >> word >> cache.teacher_hash) || word != "hash")
      throw ParseError("teacher cache '" + path + "': missing hash");
    if (!(in >> word >> users) || word != "users")
      throw ParseError("teacher cache '" + path + "': missing user count");
  }
  cache.rhat.assign(users, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < users; ++i) {
    std::string word, value;
    std::size_t u = 0;
    if (!(in >> word >> u >> value) || word != "rhat" || u >= users)
      throw ParseError("teacher cache '" + path + "': malformed rhat entry");
    if (value == "excluded") cache.excluded.push_back(static_cast<int>(u));
    else cache.rhat[u] = parse_real("rhat", value);
  }
  std::string word;
  if (!(in >> word) || word != "end")
    throw ParseError("teacher cache '" + path + "': truncated");
  return cache;
}

// ---------------------------------------------------------------------------
// Frozen-model evaluation
// ---------------------------------------------------------------------------

std::vector<double> score_eval_set(const model::ModelParams<float>& params,
                                   const data::Dataset& ds, const data::EvalSet& set) {
  if (set.candidates.empty()) return {};
  std::vector<const std::vector<int>*> stack;
  stack.reserve(set.candidates.size());
  for (const auto& c : set.candidates) stack.push_back(&c.items);
  std::vector<int> groups;
  auto feats = stack_features(ds, stack, groups);
  auto reps = model::encode_outfits_value(params, feats, groups);
  const auto d = static_cast<std::size_t>(reps.cols);
  const float* user_row = params.users.data.data() + static_cast<std::size_t>(set.user_id) * d;
  if (set.user_id < 0 || set.user_id >= params.config.user_count)
    throw DataError("eval scoring: unknown user " + std::to_string(set.user_id));
  std::vector<double> out(set.candidates.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(rep_user_cosine(reps.data.data() + i * d, user_row, d));
  return out;
}

std::vector<double> score_for_all_users(const model::ModelParams<float>& params,
                                        const data::Dataset& ds,
                                        const std::vector<int>& items) {
  auto feats = ds.item_features(items);
  auto reps = model::encode_outfits_value(params, feats, {static_cast<int>(items.size())});
  const auto d = static_cast<std::size_t>(reps.cols);
  std::vector<double> out(static_cast<std::size_t>(params.config.user_count));
  for (int u = 0; u < params.config.user_count; ++u) {
    const float* user_row = params.users.data.data() + static_cast<std::size_t>(u) * d;
    out[static_cast<std::size_t>(u)] =
        static_cast<double>(rep_user_cosine(reps.data.data(), user_row, d));
  }
  return out;
}

std::vector<data::EvalSet> build_eval_sets(const data::Dataset& ds, data::SplitKind split,
                                           bool hard, std::uint64_t seed) {
  RngStream rng(seed, std::string("eval.") + data::split_name(split) + (hard ? ".hard" : ".std"));
  std::vector<data::EvalSet> sets;
  for (int u = 0; u < ds.config.users; ++u) {
    auto set = data::build_eval_set(ds, u, split, kEvalNegRatio, hard, rng);
    if (!set.candidates.empty()) sets.push_back(std::move(set));
  }
  if (sets.empty())
    throw DataError(std::string("no user has outfits in the ") + data::split_name(split) +
                    " split");
  return sets;
}

metrics::Summary evaluate_checkpoint(const model::ModelParams<float>& params,
                                     const data::Dataset& ds, data::SplitKind split, bool hard,
                                     std::uint64_t seed) {
  auto sets = build_eval_sets(ds, split, hard, seed);
  return metrics::evaluate(sets, [&](const data::EvalSet& s) {
    return score_eval_set(params, ds, s);
  });
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct TrainPair {
  int user = -1;
  int outfit = -1;
};

struct StepContext {
  const RunConfig& cfg;
  const data::Dataset& ds;
  model::ModelParams<float>& params;
  std::vector<diff::Tensor<float>*>& weights;
  std::vector<diff::Tensor<float>>& velocity;
  RngStream& neg_rng;
  RngStream& view_rng;
  TeacherScorer* scorer;
  const TeacherCache* cache;
  const augment::SimilarityIndex& index;
  bool use_cl;
};

double train_step(StepContext& ctx, const TrainPair* pairs, int P) {
  const RunConfig& cfg = ctx.cfg;
  const data::Dataset& ds = ctx.ds;
  const int N = cfg.batch;
  const int hard_count = cfg.hard_negatives ? N / 2 : 0;

  // Sample this step's negatives: per pair by default, or one pool for the
  // whole step in shared mode.
  auto draw = [&](int user) {
    std::vector<std::vector<int>> negs;
    negs.reserve(static_cast<std::size_t>(N));
    for (int k = 0; k < hard_count; ++k)
      negs.push_back(data::sample_hard_negative_items(ds, user, ctx.neg_rng));
    for (int k = hard_count; k < N; ++k)
      negs.push_back(data::sample_negative_items(ds, user, ctx.neg_rng));
    return negs;
  };
  std::vector<std::vector<std::vector<int>>> negatives;
  if (cfg.shared_negatives) {
    negatives.push_back(draw(pairs[0].user));
  } else {
    negatives.reserve(static_cast<std::size_t>(P));
    for (int i = 0; i < P; ++i) negatives.push_back(draw(pairs[i].user));
  }

  // Two augmented views per positive when the contrastive term is active.
  std::vector<std::vector<int>> views;
  if (ctx.use_cl) {
    views.reserve(static_cast<std::size_t>(2 * P));
    for (int i = 0; i < P; ++i) {
      auto v = augment::make_views(ds.outfit(pairs[i].outfit).items, cfg.view_a, cfg.view_b,
                                   ctx.index, cfg.neighbor_k, ctx.view_rng);
      views.push_back(std::move(v.a));
      views.push_back(std::move(v.b));
    }
  }

  // One stacked encoder pass: positives, then negatives, then views.
  std::vector<const std::vector<int>*> stack;
  for (int i = 0; i < P; ++i) stack.push_back(&ds.outfit(pairs[i].outfit).items);
  for (const auto& pool : negatives)
    for (const auto& neg : pool) stack.push_back(&neg);
  for (const auto& v : views) stack.push_back(&v);
  std::vector<int> groups;
  auto feats_value = stack_features(ds, stack, groups);

  diff::Tape<float> t;
  auto bm = model::bind(t, ctx.params, true);
  auto feats = t.input(std::move(feats_value));
  auto reps = model::encode_outfits(t, bm, feats, groups);

  auto pos_reps = diff::slice_rows(t, reps, 0, P);
  diff::Tape<float>::Var neg_reps;
  if (cfg.shared_negatives) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(P) * N);
    for (int i = 0; i < P; ++i)
      for (int k = 0; k < N; ++k) idx.push_back(P + k);
    neg_reps = diff::gather_rows(t, reps, std::move(idx));
  } else {
    neg_reps = diff::slice_rows(t, reps, P, P * N);
  }

  std::vector<int> pair_users(static_cast<std::size_t>(P));
  std::vector<int> neg_users;
  neg_users.reserve(static_cast<std::size_t>(P) * N);
  for (int i = 0; i < P; ++i) {
    pair_users[static_cast<std::size_t>(i)] = pairs[i].user;
    for (int k = 0; k < N; ++k) neg_users.push_back(pairs[i].user);
  }

  auto pos_scores = model::score_outfit_rows(t, bm, pos_reps, pair_users);
  auto neg_flat = model::score_outfit_rows(t, bm, neg_reps, neg_users);
  auto neg_scores = diff::reshape(t, neg_flat, P, N);

  diff::Tape<float>::Var total;
  switch (cfg.loss) {
    case LossKind::bpr: {
      std::vector<int> rep_idx;
      rep_idx.reserve(static_cast<std::size_t>(P) * N);
      for (int i = 0; i < P; ++i)
        for (int k = 0; k < N; ++k) rep_idx.push_back(i);
      auto pos_rep = diff::gather_rows(t, pos_scores, std::move(rep_idx));
      total = loss::bpr(t, pos_rep, neg_flat, cfg.loss_cfg.tau);
      break;
    }
    case LossKind::npair:
      total = loss::npair(t, pos_scores, neg_scores, cfg.loss_cfg.tau);
      break;
    case LossKind::fnd:
    case LossKind::fnd_cl: {
      diff::Tensor<float> signals(P, N);
      if (cfg.force_unit_signals) {
        std::fill(signals.data.begin(), signals.data.end(), 1.0f);
      } else {
        std::vector<int> users;
        std::vector<std::vector<int>> outfits;
        users.reserve(static_cast<std::size_t>(P) * N);
        outfits.reserve(static_cast<std::size_t>(P) * N);
        for (int i = 0; i < P; ++i) {
          const auto& pool = negatives[cfg.shared_negatives ? 0 : static_cast<std::size_t>(i)];
          for (int k = 0; k < N; ++k) {
            users.push_back(pairs[i].user);
            outfits.push_back(pool[static_cast<std::size_t>(k)]);
          }
        }
        auto teacher_scores = ctx.scorer->scores(users, outfits);
        for (int i = 0; i < P; ++i) {
          double rhat = ctx.cache->rhat[static_cast<std::size_t>(pairs[i].user)];
          if (std::isnan(rhat))
            throw DataError("user " + std::to_string(pairs[i].user) +
                            " has no positive boundary in the teacher cache");
          for (int k = 0; k < N; ++k)
            signals.at(i, k) = static_cast<float>(loss::false_negativeness(
                rhat, teacher_scores[static_cast<std::size_t>(i) * N + k],
                static_cast<double>(cfg.loss_cfg.alpha)));
        }
      }
      auto ranking = loss::fnd(t, pos_scores, neg_scores, signals, cfg.loss_cfg.tau);
      if (ctx.use_cl) {
        int off = P + (cfg.shared_negatives ? N : P * N);
        auto view_reps = diff::slice_rows(t, reps, off, 2 * P);
        auto projected = model::project_views(t, bm, view_reps);
        auto contrast = loss::cl(t, projected, cfg.loss_cfg.tau_cl);
        total = loss::fnd_cl(t, ranking, contrast, cfg.loss_cfg.lambda);
      } else {
        total = ranking;
      }
      break;
    }
  }

  double loss_value = static_cast<double>(t.value(total).data[0]);
  if (!std::isfinite(loss_value)) throw DivergenceError("training loss is not finite");
  t.backward(total);
  for (std::size_t j = 0; j < ctx.weights.size(); ++j)
    diff::sgd_momentum_step(*ctx.weights[j], ctx.velocity[j], t.grad(bm.ordered[j]), cfg.lr,
                            cfg.momentum);
  return loss_value;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const data::Dataset& ds,
                  const model::ModelParams<float>* teacher, const TeacherCache* cache) {
  cfg.validate();
  const bool need_signals =
      (cfg.loss == LossKind::fnd || cfg.loss == LossKind::fnd_cl) && !cfg.force_unit_signals;
  if (need_signals && (!teacher || !cache))
    throw ConfigError("distillation losses need a teacher checkpoint and its cache");
  if (need_signals && cache->teacher_hash != model::param_hash(*teacher))
    throw ConfigError("teacher cache was built from a different checkpoint");
  const bool use_cl = cfg.loss == LossKind::fnd_cl && cfg.loss_cfg.lambda > 0.0f;

  model::ModelConfig mc;
  mc.d_in = ds.config.d_in;
  mc.d = cfg.d;
  mc.heads = cfg.heads;
  mc.sab_count = cfg.sab_count;
  mc.ff_mult = cfg.ff_mult;
  mc.user_count = ds.config.users;
  mc.tier = cfg.tier;

  RngStream init_rng(cfg.seed, "run.init");
  auto params = model::init_model<float>(mc, init_rng);

  std::vector<diff::Tensor<float>*> weights;
  model::for_each_param(params, [&](const std::string&, diff::Tensor<float>& w) {
    weights.push_back(&w);
  });
  std::vector<diff::Tensor<float>> velocity(weights.size());

  // The similar-item index exists only when a replace view can occur.
  augment::SimilarityIndex index;
  if (use_cl && (cfg.view_a == augment::Kind::replace || cfg.view_b == augment::Kind::replace)) {
    RngStream ae_rng(cfg.seed, "run.autoencoder");
    auto ae = augment::init_autoencoder(ds.config.d_in, cfg.autoencoder, ae_rng);
    std::vector<int> all_items(ds.items.size());
    for (std::size_t i = 0; i < all_items.size(); ++i) all_items[i] = static_cast<int>(i);
    auto item_feats = ds.item_features(all_items);
    augment::train_autoencoder(ae, item_feats, ae_rng);
    index = augment::build_similarity_index(ds, ae);
  }

  std::vector<TrainPair> pairs;
  for (int u = 0; u < ds.config.users; ++u)
    for (int oid : ds.splits[static_cast<std::size_t>(u)].train)
      pairs.push_back({u, oid});
  if (pairs.empty()) throw DataError("dataset has no train positives");

  auto val_split =
      cfg.mode == Mode::teacher ? data::SplitKind::val_teacher : data::SplitKind::val_student;
  auto val_sets = build_eval_sets(ds, val_split, cfg.hard_negatives, cfg.seed);

  TeacherScorer scorer_storage =
      need_signals ? TeacherScorer(*teacher, ds) : TeacherScorer(params, ds);

  RngStream batch_rng(cfg.seed, "run.batch");
  RngStream neg_rng(cfg.seed, "run.neg");
  RngStream view_rng(cfg.seed, "run.views");

  StepContext ctx{cfg,     ds,       params, weights,
                  velocity, neg_rng, view_rng, need_signals ? &scorer_storage : nullptr,
                  cache,   index,    use_cl};

  TrainResult res;
  res.best = params;
  res.best_val_auc = -1.0;
  std::set<std::string> warned;

  const int P = cfg.batch;
  if (static_cast<int>(pairs.size()) < P)
    res.warnings.push_back("fewer train pairs than one batch; no step will run");

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    batch_rng.shuffle(pairs);
    // A blown-up run surfaces either as a non-finite loss or as a numeric
    // guard tripping on degenerate activations, in the steps or in the
    // validation pass right after them; all of it is divergence, reported
    // rather than thrown so the caller can still save the best state.
    try {
      double loss_sum = 0.0;
      int steps = 0;
      for (std::size_t at = 0; at + static_cast<std::size_t>(P) <= pairs.size();
           at += static_cast<std::size_t>(P)) {
        loss_sum += train_step(ctx, pairs.data() + at, P);
        ++steps;
      }

      EpochStats st;
      st.train_loss = steps > 0 ? loss_sum / steps : 0.0;
      st.param_hash = model::param_hash(params);
      auto summary = metrics::evaluate(val_sets, [&](const data::EvalSet& s) {
        return score_eval_set(params, ds, s);
      });
      for (const auto& w : summary.warnings)
        if (warned.insert(w).second) res.warnings.push_back("validation: " + w);
      st.val_auc = summary.mean_auc;
      res.epochs.push_back(st);

      if (st.val_auc > res.best_val_auc) {
        res.best_val_auc = st.val_auc;
        res.best = params;
        res.best_epoch = epoch;
      }
    } catch (const NumericError& e) {
      res.diverged = true;
      res.divergence_message = e.what();
      bool finite = true;
      for (const auto* w : weights)
        if (!w->all_finite()) finite = false;
      if (finite && res.best_epoch < 0) res.best = params;
      return res;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

void save_report(const std::string& prefix, const ExperimentReport& rep) {
  {
    std::ofstream kv(prefix + ".kv", std::ios::binary);
    if (!kv) throw DataError("cannot write report '" + prefix + ".kv'");
    for (const auto& [key, value] : rep.config) kv << "config." << key << " = " << value << "\n";
    kv << "best.epoch = " << rep.best_epoch << "\n";
    kv << "best.val_auc = " << fmt_double(rep.best_val_auc) << "\n";
    for (std::size_t e = 0; e < rep.epochs.size(); ++e) {
      kv << "epoch." << e << ".loss = " << fmt_double(rep.epochs[e].train_loss) << "\n";
      kv << "epoch." << e << ".val_auc = " << fmt_double(rep.epochs[e].val_auc) << "\n";
      kv << "epoch." << e << ".param_hash = " << rep.epochs[e].param_hash << "\n";
    }
    kv << "test.auc = " << fmt_double(rep.test_auc) << "\n";
    kv << "test.ndcg = " << fmt_double(rep.test_ndcg) << "\n";
    kv << "diverged = " << (rep.diverged ? 1 : 0) << "\n";
    kv << "wall_seconds = " << fmt_double(rep.wall_seconds) << "\n";
    for (std::size_t i = 0; i < rep.warnings.size(); ++i)
      kv << "warning." << i << " = " << rep.warnings[i] << "\n";
    if (!kv) throw DataError("failed writing report '" + prefix + ".kv'");
  }
  {
    std::ofstream txt(prefix + ".txt", std::ios::binary);
    if (!txt) throw DataError("cannot write report '" + prefix + ".txt'");
    txt << "run report\n";
    auto get = [&](const char* key) {
      auto it = rep.config.find(key);
      return it == rep.config.end() ? std::string("-") : it->second;
    };
    txt << "mode " << get("mode") << "  loss " << get("loss") << "  tier " << get("tier")
        << "  seed " << get("seed") << "\n";
    txt << "dataset " << get("dataset") << "\n";
    txt << "epochs " << get("epochs") << "  batch " << get("batch") << "  lr " << get("lr")
        << "  momentum " << get("momentum") << "  hard " << get("hard_negatives") << "\n\n";
    txt << "epoch\ttrain_loss\tval_auc\n";
    char buf[96];
    for (std::size_t e = 0; e < rep.epochs.size(); ++e) {
      std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\n", e, rep.epochs[e].train_loss,
                    rep.epochs[e].val_auc);
      txt << buf;
    }
    std::snprintf(buf, sizeof buf, "\nbest epoch %d (val auc %.6f)\n", rep.best_epoch,
                  rep.best_val_auc);
    txt << buf;
    std::snprintf(buf, sizeof buf, "test auc %.6f  test ndcg %.6f\n", rep.test_auc,
                  rep.test_ndcg);
    txt << buf;
    if (rep.diverged) txt << "run diverged; checkpoint holds the best state reached\n";
    std::snprintf(buf, sizeof buf, "wall %.1fs\n", rep.wall_seconds);
    txt << buf;
    for (const auto& w : rep.warnings) txt << "warning: " << w << "\n";
    if (!txt) throw DataError("failed writing report '" + prefix + ".txt'");
  }
}

ExperimentReport run_training_job(const RunConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  auto ds = data::load_dataset(cfg.dataset_path);

  const bool need_signals =
      (cfg.loss == LossKind::fnd || cfg.loss == LossKind::fnd_cl) && !cfg.force_unit_signals;
  model::ModelParams<float> teacher;
  TeacherCache cache;
  if (need_signals) {
    if (cfg.teacher_checkpoint.empty() || cfg.cache_path.empty())
      throw ConfigError("distillation losses need --teacher and --cache paths");
    teacher = model::load_checkpoint(cfg.teacher_checkpoint);
    cache = load_cache(cfg.cache_path);
  }

  auto start = std::chrono::steady_clock::now();
  auto res = train(cfg, ds, need_signals ? &teacher : nullptr, need_signals ? &cache : nullptr);

  ExperimentReport rep;
  rep.config = cfg.to_kv();
  rep.epochs = res.epochs;
  rep.best_epoch = res.best_epoch;
  rep.best_val_auc = res.best_val_auc;
  rep.diverged = res.diverged;
  rep.warnings = res.warnings;
  if (res.diverged) rep.warnings.push_back("divergence: " + res.divergence_message);

  if (!res.diverged) {
    auto test = evaluate_checkpoint(res.best, ds, data::SplitKind::test, cfg.hard_negatives,
                                    cfg.seed);
    rep.test_auc = test.mean_auc;
    rep.test_ndcg = test.mean_ndcg;
    for (const auto& w : test.warnings) rep.warnings.push_back("test: " + w);
  }
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::filesystem::create_directories(out_dir);
  model::save_checkpoint(out_dir + "/checkpoint.bin", res.best);
  save_report(out_dir + "/report", rep);
  return rep;
}

std::map<std::string, std::string> load_kv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    auto a = s.find_first_not_of(" \t\r");
    auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    auto key = trim(t.substr(0, eq));
    auto value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ParseError(path + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

// ---------------------------------------------------------------------------
// Cold-start evaluation
// ---------------------------------------------------------------------------

ColdStartReport run_cold_start(const model::ModelParams<float>& params, const data::Dataset& ds,
                               const ColdStartOptions& opt) {
  opt.scoring.validate();
  if (opt.k < 1) throw ConfigError("cold start: k must be positive");
  if (opt.repetitions < 1) throw ConfigError("cold start: repetitions must be positive");
  if (ds.cold.empty()) throw DataError("dataset has no cold users");

  // Every preference the protocol needs is a (warm user, outfit) cosine;
  // one encoder pass per distinct outfit covers all warm users at once.
  std::unordered_map<std::string, std::vector<double>> rows;
  auto all_scores = [&](const std::vector<int>& items) -> const std::vector<double>& {
    auto key = outfit_key(-1, items);
    auto it = rows.find(key);
    if (it == rows.end()) it = rows.emplace(key, score_for_all_users(params, ds, items)).first;
    return it->second;
  };
  cold::ScoreFn score = [&](int user, const std::vector<int>& items) {
    return all_scores(items)[static_cast<std::size_t>(user)];
  };

  // Candidates are fixed before the repetition loop: per cold user, every
  // profile outfit may appear as an eval positive (when a repetition does
  // not reveal it), ranked against one fixed pool of sampled negatives.
  RngStream neg_rng(opt.eval_seed, "cold.negatives");
  struct ColdEval {
    const data::ColdProfile* profile;
    std::vector<std::vector<int>> negatives;
  };
  std::vector<ColdEval> evals;
  ColdStartReport rep;
  for (const auto& profile : ds.cold) {
    ColdEval ce;
    ce.profile = &profile;
    int reveal = std::min<int>(opt.k, static_cast<int>(profile.outfits.size()));
    if (reveal < opt.k)
      rep.warnings.push_back("cold user " + std::to_string(profile.user_id) + " has only " +
                             std::to_string(profile.outfits.size()) +
                             " outfits; the whole profile is revealed");
    int held_out = static_cast<int>(profile.outfits.size()) - reveal;
    for (int i = 0; i < held_out * kEvalNegRatio; ++i)
      ce.negatives.push_back(data::sample_negative_items(ds, profile.user_id, neg_rng));
    if (held_out == 0)
      rep.warnings.push_back("cold user " + std::to_string(profile.user_id) +
                             " has no held-out positives and cannot be evaluated");
    evals.push_back(std::move(ce));
  }

  RngStream sub_rng(opt.eval_seed, "cold.subsample");
  for (int r = 0; r < opt.repetitions; ++r) {
    double auc_sum = 0.0;
    int evaluated = 0;
    for (const auto& ce : evals) {
      const auto& profile = *ce.profile;
      int reveal = std::min<int>(opt.k, static_cast<int>(profile.outfits.size()));
      std::vector<int> order(profile.outfits.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
      if (reveal < static_cast<int>(order.size())) sub_rng.shuffle(order);

      data::ColdProfile revealed{profile.user_id, {}};
      for (int i = 0; i < reveal; ++i)
        revealed.outfits.push_back(profile.outfits[static_cast<std::size_t>(order[i])]);
      if (reveal == static_cast<int>(profile.outfits.size())) continue;

      auto sims = cold::all_user_similarities(revealed, ds, ds.config.users, score);
      auto hood = cold::neighborhood(sims, opt.scoring.delta);
      if (hood.empty()) throw NumericError("cold start: empty neighborhood");

      std::vector<metrics::Scored> list;
      for (std::size_t i = static_cast<std::size_t>(reveal); i < order.size(); ++i) {
        const auto& items = ds.outfit(profile.outfits[static_cast<std::size_t>(order[i])]).items;
        list.push_back({cold::cold_score(opt.scoring, hood, sims, items, score), 1});
      }
      for (const auto& neg : ce.negatives)
        list.push_back({cold::cold_score(opt.scoring, hood, sims, neg, score), 0});
      auc_sum += metrics::auc(list);
      ++evaluated;
    }
    if (evaluated == 0)
      throw DataError("cold start: no cold user has held-out positives at k = " +
                      std::to_string(opt.k));
    rep.rep_auc.push_back(auc_sum / evaluated);
  }
  double total = 0.0;
  for (double v : rep.rep_auc) total += v;
  rep.mean_auc = total / static_cast<double>(rep.rep_auc.size());
  return rep;
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

void export_embeddings(const model::ModelParams<float>& params, const data::Dataset& ds,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embeddings '" + path + "'");

  // Outfit id -> ids of users that recorded it as a positive.
  std::vector<std::vector<int>> owners(ds.outfits.size());
  for (int u = 0; u < ds.config.users; ++u) {
    const auto& sp = ds.splits[static_cast<std::size_t>(u)];
    for (const auto* part : {&sp.train, &sp.val_teacher, &sp.val_student, &sp.test})
      for (int oid : *part) owners[static_cast<std::size_t>(oid)].push_back(u);
  }
  for (const auto& profile : ds.cold)
    for (int oid : profile.outfits)
      owners[static_cast<std::size_t>(oid)].push_back(profile.user_id);

  const int d = params.config.d;
  out << "outfitlab embeddings v1\n";
  out << "d " << d << "\n";
  out << "users " << params.config.user_count << "\n";
  for (int u = 0; u < params.config.user_count; ++u) {
    out << "user " << u;
    const float* row = params.users.data.data() + static_cast<std::size_t>(u) * d;
    for (int c = 0; c < d; ++c) out << ' ' << fmt_float(row[c]);
    out << '\n';
  }
  out << "outfits " << ds.outfits.size() << "\n";
  constexpr int kChunk = 256;
  for (std::size_t at = 0; at < ds.outfits.size(); at += kChunk) {
    std::size_t stop = std::min(ds.outfits.size(), at + kChunk);
    std::vector<const std::vector<int>*> stack;
    for (std::size_t i = at; i < stop; ++i) stack.push_back(&ds.outfits[i].items);
    std::vector<int> groups;
    auto feats = stack_features(ds, stack, groups);
    auto reps = model::encode_outfits_value(params, feats, groups);
    for (std::size_t i = at; i < stop; ++i) {
      out << "outfit " << ds.outfits[i].id << " positive_of=";
      const auto& who = owners[i];
      if (who.empty()) out << '-';
      for (std::size_t j = 0; j < who.size(); ++j) out << (j ? "," : "") << who[j];
      const float* row = reps.data.data() + (i - at) * static_cast<std::size_t>(d);
      for (int c = 0; c < d; ++c) out << ' ' << fmt_float(row[c]);
      out << '\n';
    }
  }
  out << "end\n";
  if (!out) throw DataError("failed writing embeddings '" + path + "'");
}

}  // namespace outfitlab::run
