/**
 * @file cli_test.cpp
 * @brief Subcommands run in-process and compared with direct library calls.
 */

#include "poly/cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "poly/error.hpp"
#include "poly/generate.hpp"
#include "poly/metrics.hpp"
#include "poly/midi_io.hpp"
#include "poly/synthetic.hpp"
#include "poly/training.hpp"

namespace poly {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "poly_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write_corpus_file(dir_ / "synthetic.bin", synthetic_corpus({.n_sequences = 12}));
    std::ofstream(dir_ / "tiny.json") << R"({"model": {"d": 16, "gnn_layers": 2, "sigma": 4},
                                             "training": {"batch_size": 4, "lr0": 0.001}})";
    const auto r = cli({"train", "--in", (dir_ / "synthetic.bin").string(), "--out", ckpt().string(), "--config",
                        (dir_ / "tiny.json").string(), "--updates", "5", "--seed", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }
  static fs::path ckpt() { return dir_ / "model.ckpt"; }

  static fs::path dir_;
};

fs::path CliTest::dir_;

TEST_F(CliTest, HelpListsFlagsWithDefaults) {
  const std::map<std::string, std::vector<std::string>> flags{
      {"preprocess", {"--in", "--out", "--bars"}},
      {"train", {"--in", "--out", "--bars", "--config", "--seed", "--updates"}},
      {"generate", {"--ckpt", "--n", "--seed", "--out", "--threshold", "--config"}},
      {"interpolate", {"--ckpt", "--steps", "--seed", "--seed-b", "--out"}},
      {"condition", {"--ckpt", "--structure", "--seed", "--out"}},
      {"metrics", {"--in", "--corpus", "--out"}},
      {"pca", {"--ckpt", "--embedding", "--k", "--out"}},
      {"serve", {"--ckpt", "--port", "--static", "--snapshot", "--threshold"}}};
  for (const auto& [cmd, names] : flags) {
    const auto r = cli({cmd, "--help"});
    EXPECT_EQ(r.code, 0);
    for (const auto& f : names) EXPECT_NE(r.out.find(f), std::string::npos) << cmd << " " << f;
  }
  EXPECT_NE(cli({"generate", "--help"}).out.find("[1]"), std::string::npos);
  EXPECT_NE(cli({"serve", "--help"}).out.find("[8080]"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitOne) {
  const auto none = cli({});
  EXPECT_EQ(none.code, 1);
  EXPECT_EQ(none.err.rfind("ERROR:Usage:", 0), 0u);
  EXPECT_EQ(cli({"generate", "--out", "x"}).code, 1);
  EXPECT_EQ(cli({"preprocess", "--in", "a", "--out", "b", "--bars", "3"}).code, 1);
  EXPECT_EQ(cli({"metrics", "--in", "a", "--bogus"}).code, 1);
  EXPECT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--out", (dir_ / "t").string(), "--threshold", "2"}).code, 1);
}

TEST_F(CliTest, DataErrorsExitTwo) {
  const auto r = cli({"metrics", "--in", (dir_ / "missing.bin").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("ERROR:IoError:", 0), 0u);
  std::ofstream(dir_ / "bad_structure.json") << "[[1, 0]]";
  const auto bad = cli({"condition", "--ckpt", ckpt().string(), "--structure", (dir_ / "bad_structure.json").string(),
                        "--out", (dir_ / "cond_bad").string()});
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(bad.err.rfind("ERROR:InvalidStructure:", 0), 0u);
}

TEST_F(CliTest, PreprocessMatchesLibrary) {
  const fs::path songs = fs::path(POLY_FIXTURE_DIR) / "midi";
  const auto out = dir_ / "corpus.bin";
  const auto r = cli({"preprocess", "--in", songs.string(), "--bars", "2", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<Pianoroll> expected;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(songs))
    if (e.path().extension() == ".mid") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      auto rolls = midi::to_pianoroll(midi::parse_smf(read_file_bytes(f)));
      expected.insert(expected.end(), rolls.begin(), rolls.end());
    } catch (const Error&) {
    }
  }
  const auto loaded = load_corpus(out);
  EXPECT_EQ(loaded, expected);
  EXPECT_NE(r.out.find(std::to_string(expected.size()) + " sequences"), std::string::npos);
}

TEST_F(CliTest, TrainWritesCheckpointAndHistory) {
  const auto model = load_model(ckpt());
  EXPECT_EQ(model.config().d, 16);
  EXPECT_EQ(model.config().sigma, 4);
  const auto history = read_history_csv(ckpt().string() + ".history.csv");
  EXPECT_EQ(history.size(), 5u);
  EXPECT_EQ(history[0].lr, 0.001);
}

TEST_F(CliTest, GenerateIsReproducibleAndMatchesLibrary) {
  const auto a = dir_ / "gen_a";
  const auto b = dir_ / "gen_b";
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--n", "3", "--seed", "7", "--out", a.string()}).code, 0);
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--n", "3", "--seed", "7", "--out", b.string()}).code, 0);
  const auto model = load_model(ckpt());
  const auto gens = sample(model, 3, 7);
  for (int i = 0; i < 3; ++i) {
    const std::string stem = "sample_00" + std::to_string(i);
    EXPECT_EQ(slurp(a / (stem + ".mid")), slurp(b / (stem + ".mid")));
    EXPECT_EQ(nlohmann::json::parse(slurp(a / (stem + ".json"))), to_json(gens[i].roll));
  }
  EXPECT_FALSE(fs::exists(a / "sample_003.mid"));
}

TEST_F(CliTest, FlagsOverrideConfig) {
  std::ofstream(dir_ / "seeded.json") << R"({"seed": 5})";
  const auto x = dir_ / "seed_cfg";
  const auto y = dir_ / "seed_flag";
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--config", (dir_ / "seeded.json").string(), "--seed", "9",
                 "--out", x.string()})
                .code,
            0);
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--seed", "9", "--out", y.string()}).code, 0);
  EXPECT_EQ(slurp(x / "sample_000.json"), slurp(y / "sample_000.json"));
  const auto z = dir_ / "seed_only_cfg";
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--config", (dir_ / "seeded.json").string(), "--out",
                 z.string()})
                .code,
            0);
  const auto model = load_model(ckpt());
  EXPECT_EQ(nlohmann::json::parse(slurp(z / "sample_000.json")), to_json(sample(model, 1, 5)[0].roll));
}

TEST_F(CliTest, MetricsReportEqualsLibrary) {
  const auto gen = dir_ / "gen_metrics";
  ASSERT_EQ(cli({"generate", "--ckpt", ckpt().string(), "--n", "4", "--seed", "1", "--out", gen.string()}).code, 0);
  const auto r = cli({"metrics", "--corpus", gen.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out), to_json(report(load_corpus(gen))));
}

TEST_F(CliTest, InterpolateWritesEveryStep) {
  const auto out = dir_ / "interp";
  ASSERT_EQ(cli({"interpolate", "--ckpt", ckpt().string(), "--seed", "2", "--seed-b", "8", "--steps", "4", "--out",
                 out.string()})
                .code,
            0);
  const auto model = load_model(ckpt());
  const auto path = interpolate(model, random_latent(16, 2), random_latent(16, 8), 4);
  for (int i = 0; i < 4; ++i) {
    const auto file = out / ("interp_00" + std::to_string(i) + ".json");
    EXPECT_EQ(nlohmann::json::parse(slurp(file)), to_json(path[i].roll));
  }
}

TEST_F(CliTest, ConditionUsesGivenStructure) {
  StructureTensor s(2);
  s.set(0, 0, 0);
  s.set(0, 2, 8);
  s.set(1, 1, 16);
  std::ofstream(dir_ / "grid.json") << to_json(s).dump();
  const auto out = dir_ / "cond";
  ASSERT_EQ(cli({"condition", "--ckpt", ckpt().string(), "--structure", (dir_ / "grid.json").string(), "--seed", "4",
                 "--out", out.string()})
                .code,
            0);
  const auto model = load_model(ckpt());
  const auto g = conditioned_generate(model, random_latent(16, 4), s);
  EXPECT_EQ(nlohmann::json::parse(slurp(out / "conditioned.json")), to_json(g.roll));
  EXPECT_TRUE(fs::exists(out / "conditioned.mid"));
}

TEST_F(CliTest, PcaWritesCsv) {
  const auto out = dir_ / "pitch.csv";
  const auto r = cli({"pca", "--ckpt", ckpt().string(), "--embedding", "pitch", "--k", "2", "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(out);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 129);
}

}  // namespace
}  // namespace poly
