#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <algorithm>
#include <cstdlib>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "bilevel/cli.hpp"
#include "bilevel/position_encoding.hpp"
#include "bilevel/tensor_io.hpp"
#include "oracles.hpp"

using namespace bilevel;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "bilevel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("bilevel_cli_" + std::string(
        ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::vector<std::string> warp_args(const std::string& cond, const std::string& ex,
                                     const std::string& tag) const {
    return {"warp", "--cond", cond, "--exemplar", ex, "--warped", path(tag + "_w.ftn"),
            "--cmap", path(tag + "_c.ftn"), "--correspondence", path(tag + ".csv")};
  }

  fs::path dir_;
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Distinct random features; every block is its own best match.
FeatureGrid features(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t d) {
  std::mt19937_64 rng(seed);
  return oracle::random_grid(rng, h, w, d);
}

// Circular shift of whole columns by `dx`.
FeatureGrid shift_columns(const FeatureGrid& g, std::size_t dx) {
  std::vector<float> v(g.data().size());
  const std::size_t d = g.channels();
  for (std::size_t y = 0; y < g.height(); ++y)
    for (std::size_t x = 0; x < g.width(); ++x)
      for (std::size_t c = 0; c < d; ++c)
        v[(y * g.width() + (x + dx) % g.width()) * d + c] = g.at(y, x, c);
  return FeatureGrid(g.height(), g.width(), d, v);
}

}  // namespace

TEST_F(CliTest, TopkSeparatedScores) {
  const auto r = cli({"topk", "--scores", "0.9,0.1,-0.5", "--k", "1", "--lambda", "100", "--iters", "2000"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_NE(r.out.find("hard: 1,0,0"), std::string::npos);
  const auto line = r.out.substr(r.out.find("gamma: ") + 7);
  std::stringstream ss(line.substr(0, line.find('\n')));
  std::vector<double> g;
  for (std::string item; std::getline(ss, item, ',');) g.push_back(std::stod(item));
  ASSERT_EQ(g.size(), 3u);
  EXPECT_NEAR(g[0], 1.0, 1e-3);
  EXPECT_NEAR(g[1], 0.0, 1e-3);
  EXPECT_NEAR(g[2], 0.0, 1e-3);
}

TEST_F(CliTest, TopkRejectsBadInput) {
  EXPECT_EQ(cli({"topk", "--scores", "0.1,abc", "--k", "1"}).code, kExitArgument);
  EXPECT_EQ(cli({"topk", "--scores", "0.1,0.2", "--k", "3"}).code, kExitArgument);
  EXPECT_EQ(cli({"topk", "--scores", "0.1", "--lambda", "0", "--k", "1"}).code, kExitArgument);
  EXPECT_EQ(cli({"topk"}).code, kExitArgument);
  EXPECT_EQ(cli({"nonsense"}).code, kExitArgument);
}

TEST_F(CliTest, GradcheckPassesAndValidates) {
  const auto r = cli({"gradcheck", "--n", "8", "--k", "3", "--lambda", "20", "--trials", "10"});
  EXPECT_EQ(r.code, kExitOk) << r.out;
  EXPECT_NE(r.out.find("result: PASS"), std::string::npos);

  const auto one = cli({"gradcheck", "--n", "1", "--k", "1", "--trials", "3"});
  EXPECT_EQ(one.code, kExitOk);
  EXPECT_NE(one.out.find("max |gradient|: 0\n"), std::string::npos) << one.out;

  EXPECT_EQ(cli({"gradcheck", "--lambda", "0"}).code, kExitArgument);
  EXPECT_EQ(cli({"gradcheck", "--n", "2", "--k", "3"}).code, kExitArgument);
  EXPECT_EQ(cli({"gradcheck", "--stencil", "3"}).code, kExitArgument);
}

TEST_F(CliTest, GradcheckReportsFailure) {
  // A coarse two-point stencil at a sharp kernel cannot meet the bound.
  const auto r = cli({"gradcheck", "--lambda", "200", "--step", "0.05", "--stencil", "2", "--trials", "5"});
  EXPECT_EQ(r.code, kExitCheckFailed) << r.out;
  EXPECT_NE(r.out.find("result: FAIL"), std::string::npos);
}

TEST_F(CliTest, SpeSingleLabelIsVanilla) {
  write_tensor(LabelMask(5, 7, std::vector<std::uint32_t>(35, 3)), path("m.ftn"));
  ASSERT_EQ(cli({"spe", "--mask", path("m.ftn"), "--out", path("pe.ftn")}).code, kExitOk);
  EXPECT_EQ(read_feature_grid(path("pe.ftn")), vanilla_pe(5, 7));
  ASSERT_EQ(cli({"spe", "--mask", path("m.ftn"), "--out", path("v.ftn"), "--vanilla"}).code, kExitOk);
  EXPECT_EQ(slurp(path("pe.ftn")), slurp(path("v.ftn")));
}

TEST_F(CliTest, FuseBoundaries) {
  const auto x = features(1, 4, 4, 3), w = features(2, 4, 4, 3);
  write_tensor(x, path("x.ftn"));
  write_tensor(w, path("w.ftn"));
  write_tensor(FeatureGrid(2, 2, 1, std::vector<float>(4, 1.0f)), path("one.ftn"));
  write_tensor(FeatureGrid(2, 2, 3, std::vector<float>(12, 0.0f)), path("zero3.ftn"));
  ASSERT_EQ(cli({"fuse", "--cond", path("x.ftn"), "--warped", path("w.ftn"), "--cmap", path("one.ftn"),
                 "--out", path("f1.ftn")}).code, kExitOk);
  EXPECT_EQ(read_feature_grid(path("f1.ftn")), w);
  ASSERT_EQ(cli({"fuse", "--cond", path("x.ftn"), "--warped", path("w.ftn"), "--cmap", path("zero3.ftn"),
                 "--out", path("f0.ftn")}).code, kExitOk);
  EXPECT_EQ(read_feature_grid(path("f0.ftn")), x);
  write_tensor(FeatureGrid(3, 3, 1, std::vector<float>(9, 1.0f)), path("bad.ftn"));
  EXPECT_EQ(cli({"fuse", "--cond", path("x.ftn"), "--warped", path("w.ftn"), "--cmap", path("bad.ftn"),
                 "--out", path("f2.ftn")}).code, kExitValidation);
  EXPECT_FALSE(fs::exists(path("f2.ftn")));
}

TEST_F(CliTest, WarpSelfAlignment) {
  const auto g = features(3, 16, 16, 16);
  write_tensor(g, path("g.ftn"));
  auto args = warp_args(path("g.ftn"), path("g.ftn"), "self");
  for (const char* a : {"--k", "1", "--tau", "0.005"}) args.push_back(a);
  const auto r = cli(args);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const auto warped = read_feature_grid(path("self_w.ftn"));
  std::vector<oracle::real> ref(g.data().begin(), g.data().end());
  EXPECT_LT(oracle::max_abs_diff(warped, ref), 1e-5);
  const auto cmap = read_feature_grid(path("self_c.ftn"));
  EXPECT_EQ(cmap.height(), 8u);
  for (float c : cmap.data()) EXPECT_NEAR(c, 1.0f, 1e-6);
  const auto csv = slurp(path("self.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "query_index,exemplar_index,weight");
}

TEST_F(CliTest, WarpShiftRecovery) {
  const auto cond = features(4, 16, 16, 8);
  write_tensor(cond, path("cond.ftn"));
  write_tensor(shift_columns(cond, 2), path("ex.ftn"));
  auto args = warp_args(path("cond.ftn"), path("ex.ftn"), "shift");
  for (const char* a : {"--k", "1", "--tau", "0.01"}) args.push_back(a);
  ASSERT_EQ(cli(args).code, kExitOk);
  const auto warped = read_feature_grid(path("shift_w.ftn"));
  double l1 = 0.0;
  for (std::size_t i = 0; i < cond.data().size(); ++i) l1 += std::abs(warped.data()[i] - cond.data()[i]);
  EXPECT_LT(l1 / cond.data().size(), 1e-3);
}

TEST_F(CliTest, WarpWithMaskAndRawPixels) {
  const auto g = features(5, 8, 8, 3);
  write_tensor(g, path("g.ftn"));
  std::vector<std::uint32_t> labels(64);
  for (std::size_t i = 0; i < 64; ++i) labels[i] = (i % 8) < 4 ? 1 : 2;
  write_tensor(LabelMask(8, 8, labels), path("m.ftn"));
  auto args = warp_args(path("g.ftn"), path("g.ftn"), "masked");
  args.insert(args.end(), {std::string("--mask"), path("m.ftn"), "--raw-pixels"});
  const auto r = cli(args);
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(read_feature_grid(path("masked_w.ftn")).channels(), 3u);

  write_tensor(LabelMask(4, 4, std::vector<std::uint32_t>(16, 0)), path("small.ftn"));
  auto bad = warp_args(path("g.ftn"), path("g.ftn"), "badmask");
  bad.insert(bad.end(), {std::string("--mask"), path("small.ftn")});
  EXPECT_EQ(cli(bad).code, kExitValidation);
  auto orphan = warp_args(path("g.ftn"), path("g.ftn"), "orphan");
  orphan.insert(orphan.end(), {std::string("--exemplar-mask"), path("m.ftn")});
  EXPECT_EQ(cli(orphan).code, kExitArgument);
}

TEST_F(CliTest, WarpErrorsLeaveNoOutputs) {
  write_tensor(features(6, 8, 8, 3), path("g.ftn"));
  const auto missing = cli(warp_args(path("g.ftn"), path("nope.ftn"), "missing"));
  EXPECT_EQ(missing.code, kExitIo);
  EXPECT_FALSE(missing.err.empty());
  for (const char* f : {"missing_w.ftn", "missing_c.ftn", "missing.csv"}) EXPECT_FALSE(fs::exists(path(f)));

  write_tensor(features(7, 8, 8, 4), path("d4.ftn"));
  EXPECT_EQ(cli(warp_args(path("g.ftn"), path("d4.ftn"), "dim")).code, kExitValidation);
  write_tensor(features(8, 7, 8, 3), path("odd.ftn"));
  EXPECT_EQ(cli(warp_args(path("odd.ftn"), path("g.ftn"), "odd")).code, kExitValidation);

  std::ofstream(path("junk.ftn")) << "not a tensor";
  EXPECT_EQ(cli(warp_args(path("junk.ftn"), path("g.ftn"), "junk")).code, kExitValidation);

  auto zero_k = warp_args(path("g.ftn"), path("g.ftn"), "k0");
  for (const char* a : {"--k", "0"}) zero_k.push_back(a);
  EXPECT_EQ(cli(zero_k).code, kExitArgument);
  auto too_many = warp_args(path("g.ftn"), path("g.ftn"), "k99");
  for (const char* a : {"--k", "99"}) too_many.push_back(a);
  EXPECT_EQ(cli(too_many).code, kExitArgument);
  for (const char* f : {"dim_w.ftn", "odd_w.ftn", "junk_w.ftn", "k0_w.ftn", "k99_w.ftn"})
    EXPECT_FALSE(fs::exists(path(f))) << f;
}

TEST_F(CliTest, WarpIsByteIdenticalAcrossRunsAndModes) {
  write_tensor(features(9, 16, 16, 4), path("a.ftn"));
  write_tensor(features(10, 16, 16, 4), path("b.ftn"));
  std::vector<std::string> outputs[3];
  const char* tags[] = {"r1", "r2", "par"};
  for (int i = 0; i < 3; ++i) {
    auto args = warp_args(path("a.ftn"), path("b.ftn"), tags[i]);
    if (i == 2) args.push_back("--parallel");
    ASSERT_EQ(cli(args).code, kExitOk);
    for (const char* ext : {"_w.ftn", "_c.ftn", ".csv"}) outputs[i].push_back(slurp(path(tags[i] + std::string(ext))));
  }
  EXPECT_EQ(outputs[0], outputs[1]);
  EXPECT_EQ(outputs[0], outputs[2]);
}

TEST_F(CliTest, BenchCsvRowsAndDeterminism) {
  const std::vector<std::string> base{"bench", "--sizes", "16x16x4,32x32x4", "--no-timing"};
  const auto a = cli(base);
  ASSERT_EQ(a.code, kExitOk) << a.err;
  EXPECT_EQ(std::count(a.out.begin(), a.out.end(), '\n'), 5);
  EXPECT_EQ(a.out, cli(base).out);

  auto par = base;
  par.push_back("--parallel");
  EXPECT_EQ(cli(par).out, cli(par).out);

  auto to_file = base;
  to_file.insert(to_file.end(), {std::string("--out"), path("b.csv")});
  ASSERT_EQ(cli(to_file).code, kExitOk);
  EXPECT_EQ(slurp(path("b.csv")), a.out);

  EXPECT_EQ(cli({"bench", "--sizes", "15x16x4"}).code, kExitValidation);
  EXPECT_EQ(cli({"bench", "--sizes", "16by16"}).code, kExitArgument);
  EXPECT_EQ(cli({"bench", "--reps", "0"}).code, kExitArgument);
}

TEST_F(CliTest, BenchDefaultSizesGiveSixRows) {
  const auto r = cli({"bench", "--no-timing"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 7);
  EXPECT_NE(r.out.find("\nras,16384,4,3,196608,16777216,"), std::string::npos);
  EXPECT_NE(r.out.find("\ndense,4096,4,3,16777216,0,"), std::string::npos);
}

TEST_F(CliTest, HelpExitsCleanly) {
  const auto r = cli({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("warp"), std::string::npos);
}

TEST(CliBinary, RunsAsProcess) {
  const std::string cmd = std::string(BILEVEL_CLI_PATH) + " topk --scores 0,0,0,0 --k 2 > /dev/null";
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  const std::string bad = std::string(BILEVEL_CLI_PATH) + " topk --k 2 > /dev/null 2>&1";
  const int status = std::system(bad.c_str());
  EXPECT_EQ(WEXITSTATUS(status), kExitArgument);
}
