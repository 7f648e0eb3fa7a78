#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#ifndef OUTFITLAB_CLI_PATH
#error "build sets OUTFITLAB_CLI_PATH to the outfitlab binary"
#endif

namespace fs = std::filesystem;

namespace {

// Exit status of the CLI run with the given arguments, stdout and stderr
// discarded. std::system's raw status needs unwrapping on POSIX.
int cli(const std::string& args) {
  std::string cmd = std::string(OUTFITLAB_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
}

// One fresh directory per test-binary run, shared by the cases so the world
// and trained checkpoints are built once.
fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "outfitlab_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Report text minus the wall_seconds line, the one field real time may vary.
std::string stable_report(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("wall_seconds", 0) != 0) out << line << "\n";
  return out.str();
}

}  // namespace

TEST_CASE("help and argument errors map to the documented exit codes") {
  CHECK(cli("--help") == 0);
  CHECK(cli("gen --help") == 0);
  CHECK(cli("no-such-command") == 2);
  CHECK(cli("train-student") == 2);  // --out is required
  CHECK(cli("eval --checkpoint x --dataset y --split weekend") == 2);
}

TEST_CASE("the full pipeline runs end to end on a small world") {
  auto dir = work_dir();
  auto world = dir / "world.txt";
  auto coldfile = dir / "cold.txt";

  REQUIRE(cli("gen --out " + q(world) + " --cold-out " + q(coldfile) +
              " --users 6 --items-per-category 30 --d-in 16 --style-dim 4"
              " --positives-per-user 13 --cold-users 2 --cold-positives 6 --seed 7") == 0);
  REQUIRE(fs::exists(world));
  REQUIRE(fs::exists(coldfile));

  std::string small = " --batch 4 --epochs 1 --d 16 --heads 2 --sab-count 1";
  auto teacher = dir / "teacher";
  REQUIRE(cli("train-teacher --out " + q(teacher) + " --dataset " + q(world) + small +
              " --seed 11") == 0);
  REQUIRE(fs::exists(teacher / "checkpoint.bin"));
  REQUIRE(fs::exists(teacher / "report.kv"));
  REQUIRE(fs::exists(teacher / "report.txt"));

  auto cache = dir / "teacher.cache";
  REQUIRE(cli("cache --teacher " + q(teacher / "checkpoint.bin") + " --dataset " + q(world) +
              " --out " + q(cache)) == 0);
  REQUIRE(fs::exists(cache));

  auto student = dir / "student";
  REQUIRE(cli("train-student --out " + q(student) + " --dataset " + q(world) +
              " --loss fnd --teacher " + q(teacher / "checkpoint.bin") + " --cache " + q(cache) +
              " --tier xs" + small + " --seed 12") == 0);
  REQUIRE(fs::exists(student / "checkpoint.bin"));

  auto evalp = dir / "evalrep";
  CHECK(cli("eval --checkpoint " + q(student / "checkpoint.bin") + " --dataset " + q(world) +
            " --split test --out " + q(evalp)) == 0);
  CHECK(slurp(dir / "evalrep.kv").find("mean.auc = ") != std::string::npos);

  CHECK(cli("coldstart --checkpoint " + q(student / "checkpoint.bin") + " --dataset " +
            q(world) + " --profiles " + q(coldfile) + " --k 2 --repetitions 2") == 0);

  auto emb = dir / "emb.txt";
  CHECK(cli("export --checkpoint " + q(student / "checkpoint.bin") + " --dataset " + q(world) +
            " --out " + q(emb)) == 0);
  CHECK(slurp(emb).rfind("outfitlab embeddings v1", 0) == 0);
}

TEST_CASE("config files feed every option and explicit flags override them") {
  auto dir = work_dir();
  auto world = dir / "world.txt";
  if (!fs::exists(world))
    REQUIRE(cli("gen --out " + q(world) +
                " --users 6 --items-per-category 30 --d-in 16 --style-dim 4"
                " --positives-per-user 13 --seed 7") == 0);

  auto conf = dir / "run.conf";
  {
    std::ofstream f(conf, std::ios::binary);
    f << "dataset = " << world.string() << "\nbatch = 4\nepochs = 1\ntier = xs\n"
      << "d = 16\nheads = 2\nsab_count = 1\nseed = 40\nloss = npair\n";
  }
  auto run = dir / "cfg_run";
  REQUIRE(cli("train-student --out " + q(run) + " --config " + q(conf) + " --seed 41") == 0);
  auto kv = slurp(run / "report.kv");
  CHECK(kv.find("config.seed = 41") != std::string::npos);   // flag beat the file
  CHECK(kv.find("config.batch = 4") != std::string::npos);   // file filled the rest
}

TEST_CASE("identical invocations produce byte-identical checkpoints") {
  auto dir = work_dir();
  auto world = dir / "world.txt";
  if (!fs::exists(world))
    REQUIRE(cli("gen --out " + q(world) +
                " --users 6 --items-per-category 30 --d-in 16 --style-dim 4"
                " --positives-per-user 13 --seed 7") == 0);

  std::string args = " --dataset " + q(world) +
                     " --loss npair --tier xs --batch 4 --epochs 1"
                     " --d 16 --heads 2 --sab-count 1 --seed 33";
  auto ra = dir / "rep_a";
  auto rb = dir / "rep_b";
  REQUIRE(cli("train-student --out " + q(ra) + args) == 0);
  REQUIRE(cli("train-student --out " + q(rb) + args) == 0);
  CHECK(slurp(ra / "checkpoint.bin") == slurp(rb / "checkpoint.bin"));
  CHECK(stable_report(ra / "report.kv") == stable_report(rb / "report.kv"));
}

TEST_CASE("runtime failures keep their exit code classes") {
  auto dir = work_dir();
  auto world = dir / "world.txt";
  if (!fs::exists(world))
    REQUIRE(cli("gen --out " + q(world) +
                " --users 6 --items-per-category 30 --d-in 16 --style-dim 4"
                " --positives-per-user 13 --seed 7") == 0);

  auto ckpt = dir / "rep_a" / "checkpoint.bin";
  if (!fs::exists(ckpt))
    REQUIRE(cli("train-student --out " + q(dir / "rep_a") + " --dataset " + q(world) +
                " --loss npair --tier xs --batch 4 --epochs 1"
                " --d 16 --heads 2 --sab-count 1 --seed 33") == 0);

  CHECK(cli("train-student --out " + q(dir / "x") + " --dataset " + q(dir / "missing.txt") +
            " --epochs 1") == 3);
  CHECK(cli("train-student --out " + q(dir / "x") + " --dataset " + q(world) +
            " --loss fnd --epochs 1") == 2);  // fnd without teacher and cache
  CHECK(cli("coldstart --checkpoint " + q(ckpt) + " --dataset " + q(world) + " --k 0") == 2);

  auto div = dir / "div_run";
  CHECK(cli("train-student --out " + q(div) + " --dataset " + q(world) +
            " --loss npair --tier xs --batch 4 --epochs 2 --d 16 --heads 2 --sab-count 1"
            " --lr 1e30 --seed 12") == 4);
  CHECK(fs::exists(div / "checkpoint.bin"));  // artifacts land before the exit code
}
