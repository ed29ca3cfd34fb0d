#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <functional>
#include <cstdio>
#include <set>
#include <string>
#include <sys/wait.h>

#include "dynfuse/config.hpp"
#include "dynfuse/data.hpp"
#include "support/temp_dir.hpp"

using namespace dynfuse;
using testutil::TempDir;

namespace {

struct Run {
  int code;
  std::string out;  // stdout and stderr
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(DYNFUSE_CLI) + " " + args + " 2>&1";
  Run r{-1, {}};
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// 8 per class at 8x16x16, two epochs.
fs::path small_config(const TempDir& dir, const std::string& model = R"({"variant": "post_fusion_a"})") {
  const auto path = dir / "config.json";
  detail::write_bytes(path, R"({"seed": 5, "data": {"count_per_class": 8, "dims": [8, 16, 16]},
    "model": )" + model + R"(, "train": {"epochs": 2, "batch_size": 4, "lr": 0.001}})");
  return path;
}

fs::path write_volume(const TempDir& dir, const std::string& name, Dims3 dims,
                      const std::function<float(std::size_t, std::size_t, std::size_t)>& f) {
  VolumeRecord v;
  v.dims = dims;
  v.subject_id = name;
  for (std::size_t z = 0; z < dims[0]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[2]; ++x) v.data.push_back(f(z, y, x));
  const auto path = dir / (name + ".vol");
  save_volume(path, v);
  return path;
}

}  // namespace

TEST(Cli, HelpListsEverySubcommand) {
  const auto r = cli("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"gen-data", "fuse", "train", "eval", "bench", "gradcheck", "ablate", "--threads"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
}

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir("cli");
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("gen-data").code, 2);
  detail::write_bytes(dir / "bad.json", R"({"train": {"epochz": 1}})");
  const auto r = cli("--config " + q(dir / "bad.json") + " gen-data --out-dir " + q(dir / "d"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("epochz"), std::string::npos);
}

TEST(Cli, GenDataUnwritableDirExitsOneNamingPath) {
  TempDir dir("cli");
  detail::write_bytes(dir / "file", "x");
  const auto target = dir / "file" / "sub";
  const auto r = cli("--config " + q(small_config(dir)) + " gen-data --out-dir " + q(target));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find(target.string()), std::string::npos);
}

TEST(Cli, GenDataIsDeterministic) {
  TempDir dir("cli");
  const auto cfg = small_config(dir);
  const auto a = cli("--config " + q(cfg) + " gen-data --out-dir " + q(dir / "a"));
  const auto b = cli("--config " + q(cfg) + " gen-data --out-dir " + q(dir / "b"));
  ASSERT_EQ(a.code, 0) << a.out;
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_NE(a.out.find("manifest.json"), std::string::npos);
  std::size_t files = 0;
  for (const auto& f : fs::directory_iterator(dir / "a")) {
    ++files;
    EXPECT_EQ(testutil::slurp(f.path()), testutil::slurp(dir / "b" / f.path().filename()));
  }
  EXPECT_EQ(files, 16u * 2 + 1);
}

TEST(Cli, FuseWritesPgmAndRejectsUnknownMethod) {
  TempDir dir("cli");
  const auto flat = write_volume(dir, "flat", {5, 32, 32}, [](auto, auto, auto) { return 0.7f; });
  auto r = cli("fuse --input " + q(flat) + " --method approx --out " + q(dir / "flat.pgm"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto pgm = testutil::slurp(dir / "flat.pgm");
  const std::string header = "P5\n32 32\n255\n";
  ASSERT_EQ(pgm.size(), header.size() + 32 * 32);
  EXPECT_EQ(pgm.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < pgm.size(); ++i) EXPECT_EQ(static_cast<unsigned char>(pgm[i]), 128);

  const auto ramp = write_volume(dir, "ramp", {6, 8, 8}, [](auto z, auto y, auto x) {
    return static_cast<float>(z) * static_cast<float>(1 + (x + y) % 3);
  });
  r = cli("fuse --input " + q(ramp) + " --method exact --out " + q(dir / "e.pgm"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("objective "), std::string::npos);
  for (const char* m : {"max", "chunked:4"})
    EXPECT_EQ(cli("fuse --input " + q(ramp) + " --method " + m + " --out " + q(dir / "m.pgm")).code, 0);
  EXPECT_EQ(testutil::slurp(dir / "m.pgm").substr(0, 11), "P5\n8 16\n255");
  for (const char* m : {"median", "chunked:0", "chunked:x"})
    EXPECT_EQ(cli("fuse --input " + q(ramp) + " --method " + m + " --out " + q(dir / "x.pgm")).code, 2);
  EXPECT_EQ(cli("fuse --input " + q(dir / "missing.vol") + " --method max --out " + q(dir / "x.pgm")).code, 1);
}

TEST(Cli, TrainEvalContract) {
  TempDir dir("cli");
  const auto cfg = small_config(dir);
  ASSERT_EQ(cli("--config " + q(cfg) + " gen-data --out-dir " + q(dir / "data")).code, 0);
  const auto man = dir / "data" / "manifest.json";
  auto r = cli("--config " + q(cfg) + " train --epochs 3 --manifest " + q(man) + " --out-dir " +
               q(dir / "run"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = testutil::slurp(dir / "run" / "curve.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  for (const char* f : {"final.json", "final.bin", "best.json", "best.bin"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;

  r = cli("eval --checkpoint " + q(dir / "run" / "final.json") + " --manifest " + q(man) +
          " --out " + q(dir / "m.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = nlohmann::json::parse(testutil::slurp(dir / "m.json"));
  std::set<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"acc", "auc", "f1", "precision", "recall", "ap",
                                         "threshold", "counts"}));
  EXPECT_EQ(cli("eval --checkpoint " + q(dir / "nope.json") + " --manifest " + q(man)).code, 1);
  EXPECT_EQ(cli("eval --checkpoint " + q(dir / "run" / "final.json") + " --manifest " + q(man) +
                " --split validation").code, 2);
}

TEST(Cli, BenchRowsAndUnknownVariant) {
  TempDir dir("cli");
  const auto cfg = small_config(dir);
  ASSERT_EQ(cli("--config " + q(cfg) + " gen-data --out-dir " + q(dir / "data")).code, 0);
  const auto man = q(dir / "data" / "manifest.json");
  auto r = cli("--config " + q(cfg) + " bench --manifest " + man +
               " --variants post_fusion_b,pre_fusion --epochs 3 --out " + q(dir / "b.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto csv = testutil::slurp(dir / "b.csv");
  EXPECT_EQ(csv.rfind("variant,median_s_per_epoch\npost_fusion_b,", 0), 0u);
  EXPECT_NE(csv.find("\npre_fusion,"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(cli("--config " + q(cfg) + " bench --manifest " + man + " --variants warp_drive").code, 2);
  EXPECT_EQ(cli("--config " + q(cfg) + " bench --manifest " + man + " --epochs 2").code, 2);
}

TEST(Cli, GradcheckListsVariantsAndCatchesInjectedFault) {
  auto r = cli("gradcheck --only pipelines --seeds 1");
  EXPECT_EQ(r.code, 0) << r.out;
  for (const char* v : {"conv3d_baseline", "pre_fusion", "post_fusion_a", "post_fusion_b",
                        "post_fusion_svm_head", "post_fusion_no_cbam", "post_fusion_maxpool"})
    EXPECT_NE(r.out.find(v), std::string::npos) << v;
  EXPECT_NE(r.out.find("worst offender"), std::string::npos);

  r = cli("gradcheck --only ops --seeds 1 --inject-fault dense");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL op       dense"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("fault injected into op: dense"), std::string::npos);
  EXPECT_EQ(cli("gradcheck --inject-fault warp").code, 2);
}
