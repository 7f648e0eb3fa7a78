#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "outfitlab/checkpoint.hpp"
#include "outfitlab/coldstart.hpp"
#include "outfitlab/dataset.hpp"
#include "outfitlab/error.hpp"
#include "outfitlab/harness.hpp"
#include "outfitlab/metrics.hpp"

using namespace outfitlab;

namespace {

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("option '" + key + "': expected an integer, got '" + v + "'");
  }
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("option '" + key + "': expected a number, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    std::uint64_t out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("option '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw ConfigError("option '" + key + "': expected a boolean, got '" + v + "'");
}

// Options write their string values into a key-value map, so every flag has
// the same spelling in a --config file and the resolution order is uniform:
// built-in defaults, then the file, then explicit flags.
struct KvArgs {
  std::map<std::string, std::string> flags;
  std::string config_path;

  std::map<std::string, std::string> resolve(
      std::map<std::string, std::string> base = {}) const {
    if (!config_path.empty())
      for (const auto& [k, v] : run::load_kv(config_path)) base[k] = v;
    for (const auto& [k, v] : flags) base[k] = v;
    return base;
  }
};

void add_kv_option(CLI::App* cmd, const std::shared_ptr<KvArgs>& a, const std::string& flag,
                   const std::string& key, const std::string& desc) {
  cmd->add_option_function<std::string>(
      flag, [a, key](const std::string& v) { a->flags[key] = v; }, desc);
}

void add_kv_flag(CLI::App* cmd, const std::shared_ptr<KvArgs>& a, const std::string& flag,
                 const std::string& key, const std::string& desc) {
  cmd->add_flag_function(
      flag, [a, key](std::int64_t n) { if (n > 0) a->flags[key] = "1"; }, desc);
}

void add_config_option(CLI::App* cmd, const std::shared_ptr<KvArgs>& a) {
  cmd->add_option("--config", a->config_path,
                  "flat 'key = value' file supplying any option; flags win");
}

void require_known(const std::map<std::string, std::string>& kv,
                   const std::set<std::string>& allowed) {
  for (const auto& [k, v] : kv)
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "'");
}

std::string need(const std::map<std::string, std::string>& kv, const std::string& key,
                 const std::string& flag) {
  auto it = kv.find(key);
  if (it == kv.end() || it->second.empty())
    throw ConfigError("missing required option " + flag);
  return it->second;
}

data::SplitKind parse_split(const std::string& s) {
  for (auto k : {data::SplitKind::train, data::SplitKind::val_teacher,
                 data::SplitKind::val_student, data::SplitKind::test})
    if (s == data::split_name(k)) return k;
  throw ConfigError("unknown split '" + s +
                    "' (expected train, val_teacher, val_student, or test)");
}

data::WorldConfig world_from_kv(const std::map<std::string, std::string>& kv) {
  data::WorldConfig wc;
  for (const auto& [key, value] : kv) {
    if (key == "users") wc.users = to_int(key, value);
    else if (key == "items_per_category") wc.items_per_category = to_int(key, value);
    else if (key == "d_in") wc.d_in = to_int(key, value);
    else if (key == "style_dim") wc.style_dim = to_int(key, value);
    else if (key == "positives_per_user") wc.positives_per_user = to_int(key, value);
    else if (key == "prototype_scale") wc.prototype_scale = to_real(key, value);
    else if (key == "style_scale") wc.style_scale = to_real(key, value);
    else if (key == "noise_scale") wc.noise_scale = to_real(key, value);
    else if (key == "preference_temp") wc.preference_temp = to_real(key, value);
    else if (key == "train_pool_frac") wc.train_pool_frac = to_real(key, value);
    else if (key == "variable_size") wc.variable_size = to_bool(key, value);
    else if (key == "extra_item_prob") wc.extra_item_prob = to_real(key, value);
    else if (key == "cold_users") wc.cold_users = to_int(key, value);
    else if (key == "cold_positives") wc.cold_positives = to_int(key, value);
    else if (key == "seed") wc.seed = to_u64(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return wc;
}

// Flags shared by every command that drives a training run.
void add_run_flags(CLI::App* cmd, const std::shared_ptr<KvArgs>& a, bool student) {
  add_config_option(cmd, a);
  add_kv_option(cmd, a, "--dataset", "dataset", "world file from gen");
  add_kv_option(cmd, a, "--batch", "batch", "pairs per step and negatives per pair");
  add_kv_option(cmd, a, "--epochs", "epochs", "training epochs");
  add_kv_option(cmd, a, "--lr", "lr", "learning rate");
  add_kv_option(cmd, a, "--momentum", "momentum", "SGD momentum");
  add_kv_option(cmd, a, "--seed", "seed", "run seed");
  add_kv_option(cmd, a, "--tau", "tau", "ranking softmax temperature");
  add_kv_flag(cmd, a, "--hard-negatives", "hard_negatives",
              "draw half of the training negatives from other users' positives");
  add_kv_flag(cmd, a, "--shared-negatives", "shared_negatives",
              "one negative pool per step instead of per pair");
  add_kv_option(cmd, a, "--d", "d", "representation width");
  add_kv_option(cmd, a, "--heads", "heads", "attention heads");
  add_kv_option(cmd, a, "--sab-count", "sab_count", "self-attention blocks");
  add_kv_option(cmd, a, "--ff-mult", "ff_mult", "feed-forward width multiplier");
  if (!student) return;
  add_kv_option(cmd, a, "--loss", "loss", "bpr, npair, fnd, or fnd_cl");
  add_kv_option(cmd, a, "--tier", "tier", "student encoder tier: xs, s, or m");
  add_kv_option(cmd, a, "--alpha", "alpha", "false-negativeness scale");
  add_kv_option(cmd, a, "--lambda", "lambda", "contrastive weight in fnd_cl");
  add_kv_option(cmd, a, "--tau-cl", "tau_cl", "contrastive temperature");
  add_kv_option(cmd, a, "--teacher", "teacher_checkpoint", "teacher checkpoint (fnd modes)");
  add_kv_option(cmd, a, "--cache", "cache", "teacher cache file (fnd modes)");
  add_kv_option(cmd, a, "--view-a", "view_a", "first augmentation: identity, erase, replace");
  add_kv_option(cmd, a, "--view-b", "view_b", "second augmentation");
  add_kv_option(cmd, a, "--neighbor-k", "neighbor_k", "replacement candidates per item");
  add_kv_flag(cmd, a, "--force-unit-signals", "force_unit_signals",
              "set every distillation signal to 1 (reduction check)");
  add_kv_option(cmd, a, "--ae-lat", "autoencoder.d_lat", "autoencoder latent width");
  add_kv_option(cmd, a, "--ae-epochs", "autoencoder.epochs", "autoencoder epochs");
  add_kv_option(cmd, a, "--ae-lr", "autoencoder.lr", "autoencoder learning rate");
  add_kv_option(cmd, a, "--ae-momentum", "autoencoder.momentum", "autoencoder momentum");
  add_kv_option(cmd, a, "--ae-batch", "autoencoder.batch", "autoencoder batch size");
  add_kv_option(cmd, a, "--ae-relu", "autoencoder.relu", "relu encoder layer (0/1)");
  add_kv_option(cmd, a, "--ae-holdout", "autoencoder.holdout_frac",
                "autoencoder holdout fraction");
}

void print_run(const run::ExperimentReport& rep, const std::string& out_dir) {
  for (const auto& w : rep.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  if (rep.diverged) {
    std::printf("run diverged; artifacts saved under %s\n", out_dir.c_str());
    return;
  }
  std::printf("best epoch %d  val auc %.4f  test auc %.4f  test ndcg %.4f  (%.1fs)\n",
              rep.best_epoch, rep.best_val_auc, rep.test_auc, rep.test_ndcg,
              rep.wall_seconds);
  std::printf("artifacts: %s/checkpoint.bin, report.kv, report.txt\n", out_dir.c_str());
}

struct SweepRow {
  std::string name;
  run::ExperimentReport rep;
};

void write_sweep_summary(const std::string& out_dir, const std::string& kind,
                         const std::vector<SweepRow>& rows) {
  std::ofstream kv(out_dir + "/summary.kv", std::ios::binary);
  std::ofstream txt(out_dir + "/summary.txt", std::ios::binary);
  if (!kv || !txt) throw DataError("cannot write sweep summary under '" + out_dir + "'");
  kv << "sweep = " << kind << "\n";
  kv << "points = " << rows.size() << "\n";
  txt << "sweep over " << kind << "\n\n";
  txt << "point\tbest_val_auc\ttest_auc\ttest_ndcg\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", r.rep.test_auc);
    kv << "point." << i << ".name = " << r.name << "\n";
    kv << "point." << i << ".test_auc = " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", r.rep.test_ndcg);
    kv << "point." << i << ".test_ndcg = " << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", r.rep.best_val_auc);
    kv << "point." << i << ".best_val_auc = " << buf << "\n";
    kv << "point." << i << ".diverged = " << (r.rep.diverged ? 1 : 0) << "\n";
    if (r.rep.diverged) {
      txt << r.name << "\tdiverged\n";
    } else {
      std::snprintf(buf, sizeof buf, "%.4f\t%.4f\t%.4f", r.rep.best_val_auc, r.rep.test_auc,
                    r.rep.test_ndcg);
      txt << r.name << "\t" << buf << "\n";
    }
  }
}

std::string trim_zeros(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"personalized outfit ranking: synthetic worlds, distillation, evaluation"};
  app.require_subcommand(1);
  int exit_code = 0;

  // gen ----------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto cold_out = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand("gen", "generate a synthetic world with planted preferences");
    add_config_option(cmd, a);
    cmd->add_option("--out", *out, "world file to write")->required();
    cmd->add_option("--cold-out", *cold_out, "also write cold profiles to this file");
    add_kv_option(cmd, a, "--users", "users", "warm users");
    add_kv_option(cmd, a, "--items-per-category", "items_per_category", "items per category");
    add_kv_option(cmd, a, "--d-in", "d_in", "item feature width");
    add_kv_option(cmd, a, "--style-dim", "style_dim", "hidden style dimensions");
    add_kv_option(cmd, a, "--positives-per-user", "positives_per_user", "positives per user");
    add_kv_option(cmd, a, "--prototype-scale", "prototype_scale", "category prototype scale");
    add_kv_option(cmd, a, "--style-scale", "style_scale", "style component scale");
    add_kv_option(cmd, a, "--noise-scale", "noise_scale", "item noise scale");
    add_kv_option(cmd, a, "--preference-temp", "preference_temp", "positive sampling temperature");
    add_kv_option(cmd, a, "--train-pool-frac", "train_pool_frac",
                  "share of items reserved for train-side outfits");
    add_kv_flag(cmd, a, "--variable-size", "variable_size", "outfits may repeat a category");
    add_kv_option(cmd, a, "--extra-item-prob", "extra_item_prob",
                  "chance of a second item per category");
    add_kv_option(cmd, a, "--cold-users", "cold_users", "cold users");
    add_kv_option(cmd, a, "--cold-positives", "cold_positives", "profile size per cold user");
    add_kv_option(cmd, a, "--seed", "seed", "world seed");
    cmd->callback([a, out, cold_out]() {
      auto wc = world_from_kv(a->resolve());
      auto ds = data::generate_world(wc);
      for (const auto& w : data::audit_dataset(ds))
        std::fprintf(stderr, "audit: %s\n", w.c_str());
      data::save_dataset(*out, ds);
      std::printf("wrote %s: %d users, %zu items, %zu outfits, %zu cold users\n", out->c_str(),
                  ds.config.users, ds.items.size(), ds.outfits.size(), ds.cold.size());
      if (!cold_out->empty()) {
        data::save_cold_profiles(*cold_out, ds);
        std::printf("wrote %s\n", cold_out->c_str());
      }
    });
  }

  // train-teacher --------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand("train-teacher", "train the wide teacher on the train split");
    cmd->add_option("--out", *out, "run directory")->required();
    add_run_flags(cmd, a, false);
    cmd->callback([a, out, &exit_code]() {
      auto kv = a->resolve();
      kv["mode"] = "teacher";
      kv["loss"] = "npair";
      kv["tier"] = "teacher";
      auto rep = run::run_training_job(run::RunConfig::from_kv(kv), *out);
      print_run(rep, *out);
      if (rep.diverged) exit_code = 4;
    });
  }

  // cache ----------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto* cmd = app.add_subcommand("cache", "store per-user teacher score boundaries");
    add_config_option(cmd, a);
    add_kv_option(cmd, a, "--teacher", "teacher_checkpoint", "teacher checkpoint");
    add_kv_option(cmd, a, "--dataset", "dataset", "world file");
    add_kv_option(cmd, a, "--out", "out", "cache file to write");
    cmd->callback([a]() {
      auto kv = a->resolve();
      require_known(kv, {"teacher_checkpoint", "dataset", "out"});
      auto teacher = model::load_checkpoint(need(kv, "teacher_checkpoint", "--teacher"));
      auto ds = data::load_dataset(need(kv, "dataset", "--dataset"));
      auto cache = run::build_teacher_cache(teacher, ds);
      for (const auto& w : cache.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      auto out = need(kv, "out", "--out");
      run::save_cache(out, cache);
      std::printf("wrote %s: %zu users, %zu excluded\n", out.c_str(), cache.rhat.size(),
                  cache.excluded.size());
    });
  }

  // train-student ----------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand(
        "train-student", "train a compact student (bpr, npair, fnd, or fnd_cl)");
    cmd->add_option("--out", *out, "run directory")->required();
    add_run_flags(cmd, a, true);
    cmd->callback([a, out, &exit_code]() {
      auto kv = a->resolve({{"tier", "s"}});
      kv["mode"] = "student";
      auto rep = run::run_training_job(run::RunConfig::from_kv(kv), *out);
      print_run(rep, *out);
      if (rep.diverged) exit_code = 4;
    });
  }

  // eval -------------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand("eval", "rank 1:10 candidate sets from a split");
    add_config_option(cmd, a);
    cmd->add_option("--out", *out, "also write <out>.kv and <out>.txt");
    add_kv_option(cmd, a, "--checkpoint", "checkpoint", "model checkpoint");
    add_kv_option(cmd, a, "--dataset", "dataset", "world file");
    add_kv_option(cmd, a, "--split", "split", "train, val_teacher, val_student, or test");
    add_kv_flag(cmd, a, "--hard", "hard", "negatives drawn from other users' positives");
    add_kv_option(cmd, a, "--seed", "seed", "candidate draw seed");
    cmd->callback([a, out]() {
      auto kv = a->resolve({{"split", "test"}, {"seed", "1"}, {"hard", "0"}});
      require_known(kv, {"checkpoint", "dataset", "split", "seed", "hard"});
      auto split = parse_split(kv.at("split"));
      bool hard = to_bool("hard", kv.at("hard"));
      auto seed = to_u64("seed", kv.at("seed"));
      auto params = model::load_checkpoint(need(kv, "checkpoint", "--checkpoint"));
      auto ds = data::load_dataset(need(kv, "dataset", "--dataset"));
      auto summary = run::evaluate_checkpoint(params, ds, split, hard, seed);
      std::fputs(metrics::summary_table(summary).c_str(), stdout);
      if (!out->empty()) {
        std::ofstream f(*out + ".kv", std::ios::binary);
        if (!f) throw DataError("cannot write '" + *out + ".kv'");
        for (const auto& [k, v] : kv) f << "config." << k << " = " << v << "\n";
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", summary.mean_auc);
        f << "mean.auc = " << buf << "\n";
        std::snprintf(buf, sizeof buf, "%.17g", summary.mean_ndcg);
        f << "mean.ndcg = " << buf << "\n";
        f << "users_evaluated = " << summary.users_evaluated << "\n";
        for (std::size_t i = 0; i < summary.warnings.size(); ++i)
          f << "warning." << i << " = " << summary.warnings[i] << "\n";
        std::ofstream t(*out + ".txt", std::ios::binary);
        if (!t) throw DataError("cannot write '" + *out + ".txt'");
        t << metrics::summary_table(summary);
        std::printf("wrote %s.kv and %s.txt\n", out->c_str(), out->c_str());
      }
    });
  }

  // coldstart ----------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand(
        "coldstart", "score unseen users through their warm neighborhood");
    add_config_option(cmd, a);
    cmd->add_option("--out", *out, "also write <out>.kv and <out>.txt");
    add_kv_option(cmd, a, "--checkpoint", "checkpoint", "model checkpoint");
    add_kv_option(cmd, a, "--dataset", "dataset", "world file");
    add_kv_option(cmd, a, "--profiles", "profiles",
                  "cold profile file overriding the world's own cold users");
    add_kv_option(cmd, a, "--k", "k", "interacted outfits revealed per cold user");
    add_kv_option(cmd, a, "--repetitions", "repetitions", "subsample repetitions");
    add_kv_option(cmd, a, "--strategy", "strategy", "avg or w-avg");
    add_kv_option(cmd, a, "--delta", "delta", "neighborhood similarity threshold");
    add_kv_option(cmd, a, "--tau-wavg", "tau_wavg", "weighted-average temperature");
    add_kv_option(cmd, a, "--seed", "seed", "evaluation seed");
    cmd->callback([a, out]() {
      auto kv = a->resolve({{"k", "5"},
                            {"repetitions", "10"},
                            {"strategy", "w-avg"},
                            {"delta", "0"},
                            {"tau_wavg", "0.2"},
                            {"seed", "1"},
                            {"profiles", ""}});
      require_known(kv, {"checkpoint", "dataset", "profiles", "k", "repetitions", "strategy",
                         "delta", "tau_wavg", "seed"});
      run::ColdStartOptions opt;
      opt.k = to_int("k", kv.at("k"));
      opt.repetitions = to_int("repetitions", kv.at("repetitions"));
      opt.eval_seed = to_u64("seed", kv.at("seed"));
      opt.scoring.strategy = cold::parse_strategy(kv.at("strategy"));
      opt.scoring.delta = to_real("delta", kv.at("delta"));
      opt.scoring.tau_wavg = to_real("tau_wavg", kv.at("tau_wavg"));

      auto params = model::load_checkpoint(need(kv, "checkpoint", "--checkpoint"));
      auto ds = data::load_dataset(need(kv, "dataset", "--dataset"));
      if (!kv.at("profiles").empty()) data::load_cold_profiles(kv.at("profiles"), ds);
      auto rep = run::run_cold_start(params, ds, opt);

      for (const auto& w : rep.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
      for (std::size_t r = 0; r < rep.rep_auc.size(); ++r)
        std::printf("repetition %zu  auc %.4f\n", r, rep.rep_auc[r]);
      std::printf("mean auc %.4f over %zu repetitions (k=%d, %s)\n", rep.mean_auc,
                  rep.rep_auc.size(), opt.k, cold::strategy_name(opt.scoring.strategy));
      if (!out->empty()) {
        std::ofstream f(*out + ".kv", std::ios::binary);
        if (!f) throw DataError("cannot write '" + *out + ".kv'");
        for (const auto& [k, v] : kv) f << "config." << k << " = " << v << "\n";
        char buf[40];
        for (std::size_t r = 0; r < rep.rep_auc.size(); ++r) {
          std::snprintf(buf, sizeof buf, "%.17g", rep.rep_auc[r]);
          f << "rep." << r << ".auc = " << buf << "\n";
        }
        std::snprintf(buf, sizeof buf, "%.17g", rep.mean_auc);
        f << "mean.auc = " << buf << "\n";
        for (std::size_t i = 0; i < rep.warnings.size(); ++i)
          f << "warning." << i << " = " << rep.warnings[i] << "\n";
        std::ofstream t(*out + ".txt", std::ios::binary);
        if (!t) throw DataError("cannot write '" + *out + ".txt'");
        t << "cold-start evaluation (k=" << opt.k << ", "
          << cold::strategy_name(opt.scoring.strategy) << ")\n";
        for (std::size_t r = 0; r < rep.rep_auc.size(); ++r) {
          std::snprintf(buf, sizeof buf, "%.6f", rep.rep_auc[r]);
          t << "repetition " << r << "\t" << buf << "\n";
        }
        std::snprintf(buf, sizeof buf, "%.6f", rep.mean_auc);
        t << "mean\t" << buf << "\n";
        std::printf("wrote %s.kv and %s.txt\n", out->c_str(), out->c_str());
      }
    });
  }

  // export -------------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto* cmd = app.add_subcommand("export", "write user and outfit embeddings as text");
    add_config_option(cmd, a);
    add_kv_option(cmd, a, "--checkpoint", "checkpoint", "model checkpoint");
    add_kv_option(cmd, a, "--dataset", "dataset", "world file");
    add_kv_option(cmd, a, "--out", "out", "embedding file to write");
    cmd->callback([a]() {
      auto kv = a->resolve();
      require_known(kv, {"checkpoint", "dataset", "out"});
      auto params = model::load_checkpoint(need(kv, "checkpoint", "--checkpoint"));
      auto ds = data::load_dataset(need(kv, "dataset", "--dataset"));
      auto out = need(kv, "out", "--out");
      run::export_embeddings(params, ds, out);
      std::printf("wrote %s\n", out.c_str());
    });
  }

  // sweep ----------------------------------------------------------------------
  {
    auto a = std::make_shared<KvArgs>();
    auto out = std::make_shared<std::string>();
    auto kind = std::make_shared<std::string>();
    auto* cmd = app.add_subcommand("sweep", "grid of student runs sharing one base config");
    cmd->add_option("--kind", *kind, "alpha, augment, tier, or batch")->required();
    cmd->add_option("--out", *out, "sweep directory")->required();
    add_run_flags(cmd, a, true);
    cmd->callback([a, out, kind, &exit_code]() {
      auto base = a->resolve({{"tier", "s"}});
      base["mode"] = "student";
      auto base_cfg = run::RunConfig::from_kv(base);  // surface option typos up front

      struct Point {
        std::string name;
        std::map<std::string, std::string> overrides;
      };
      std::vector<Point> points;
      if (*kind == "alpha") {
        if (base_cfg.loss != run::LossKind::fnd && base_cfg.loss != run::LossKind::fnd_cl)
          throw ConfigError("the alpha sweep needs --loss fnd or fnd_cl");
        for (double v : {0.5, 1.0, 1.25, 1.5, 2.0})
          points.push_back({"alpha_" + trim_zeros(v), {{"alpha", trim_zeros(v)}}});
      } else if (*kind == "augment") {
        for (auto [va, vb] : {std::pair<const char*, const char*>{"erase", "erase"},
                              {"erase", "replace"},
                              {"replace", "replace"},
                              {"identity", "erase"},
                              {"identity", "replace"}})
          points.push_back({std::string("views_") + va + "_" + vb,
                            {{"loss", "fnd_cl"}, {"view_a", va}, {"view_b", vb}}});
      } else if (*kind == "tier") {
        for (const char* t : {"xs", "s", "m"})
          points.push_back({std::string("tier_") + t, {{"tier", t}}});
      } else if (*kind == "batch") {
        for (int n : {8, 16, 32, 64}) {
          char lr[32];
          std::snprintf(lr, sizeof lr, "%.9g",
                        static_cast<double>(base_cfg.lr) * n / 32.0);
          points.push_back({"batch_" + std::to_string(n),
                            {{"batch", std::to_string(n)}, {"lr", lr}}});
        }
      } else {
        throw ConfigError("unknown sweep kind '" + *kind +
                          "' (expected alpha, augment, tier, or batch)");
      }

      std::filesystem::create_directories(*out);
      std::vector<SweepRow> rows;
      for (const auto& p : points) {
        auto kv = base;
        for (const auto& [k, v] : p.overrides) kv[k] = v;
        std::printf("[%s]\n", p.name.c_str());
        auto rep = run::run_training_job(run::RunConfig::from_kv(kv), *out + "/" + p.name);
        print_run(rep, *out + "/" + p.name);
        rows.push_back({p.name, std::move(rep)});
      }
      write_sweep_summary(*out, *kind, rows);
      std::printf("wrote %s/summary.kv and summary.txt\n", out->c_str());
      (void)exit_code;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return exit_code;
}
