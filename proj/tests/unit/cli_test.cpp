#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "dinocell/binary_io.hpp"
#include "dinocell/embedding.hpp"
#include "temp_dir.hpp"

namespace dinocell {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* kTinyConfig = R"({
  "synth": {"n_images": 30, "height": 24, "width": 24, "classes": 3, "seed": 2},
  "dino": {"backbone": {"image_size": 16, "patch_size": 4, "in_channels": 4, "embed_dim": 16,
                        "depth": 1, "num_heads": 2},
           "out_dim": 16, "head_hidden": 16, "head_bottleneck": 8, "global_crop_px": 16,
           "local_crop_px": 8, "n_local_views": 2, "epochs": 2, "batch_size": 8},
  "pretrain": {"input_map": ["protein:0", "nucleus:2"]},
  "embed": {"map": ["protein:0", "nucleus:2"]},
  "head": {"hidden": [16, 8], "epochs": 5, "batch_size": 16},
  "crossval": {"folds": 3}
})";

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

bool same_bytes(const fs::path& a, const fs::path& b) { return io::read_file(a) == io::read_file(b); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    io::write_text(dir() / "tiny.json", kTinyConfig);
    ASSERT_EQ(run({"gen-data", "--config", s("tiny.json"), "--out", s("data")}), 0);
  }
  int run(std::vector<std::string> args) { return cli::run(args); }
  fs::path dir() const { return tmp_.path(); }
  std::string s(const std::string& rel) const { return (dir() / rel).string(); }
  std::vector<std::string> with_config(std::vector<std::string> args) const {
    args.insert(args.end(), {"--config", s("tiny.json"), "--manifest", s("data/manifest.json")});
    return args;
  }
  testing::TempDir tmp_;
};

TEST_F(Cli, GenDataWritesManifestImagesAndProvenance) {
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(dir() / "data" / "images")) images += e.path().extension() == ".mci";
  EXPECT_EQ(images, 30u);
  auto rc = json::parse(io::read_text(dir() / "data" / "run_config.json"));
  EXPECT_EQ(rc["version"], cli::tool_version());
  EXPECT_EQ(rc["config"]["synth"]["n_images"], 30);
}

TEST_F(Cli, GenDataRefusesExistingDirAndBadSpecs) {
  EXPECT_EQ(run({"gen-data", "--config", s("tiny.json"), "--out", s("data")}), 1);
  EXPECT_EQ(run({"gen-data", "--config", s("tiny.json"), "--out", s("data"), "--force"}), 0);
  EXPECT_EQ(run({"gen-data", "--classes", "1", "--out", s("bad")}), 1);
  EXPECT_FALSE(fs::exists(dir() / "bad"));
  EXPECT_FALSE(fs::exists(dir() / "bad.partial"));
}

TEST_F(Cli, ArgumentAndConfigErrorsExitWithOne) {
  EXPECT_EQ(run({"no-such-command"}), 1);
  EXPECT_EQ(run({"pretrain", "--out", s("p")}), 1);  // no manifest
  io::write_text(dir() / "typo.json", R"({"dino": {"epochs": 1}, "heads": {}})");
  EXPECT_EQ(run({"pretrain", "--config", s("typo.json"), "--manifest", s("data/manifest.json"), "--out", s("p")}), 1);
  io::write_text(dir() / "typo2.json", R"({"dino": {"backbone": {"depht": 2}}})");
  EXPECT_EQ(run({"pretrain", "--config", s("typo2.json"), "--manifest", s("data/manifest.json"), "--out", s("p")}), 1);
  io::write_text(dir() / "typo3.json", R"({"head": {"learning_rate": 0.1}})");
  EXPECT_EQ(run({"crossval", "--config", s("typo3.json"), "--manifest", s("data/manifest.json"), "--out", s("p")}), 1);
  EXPECT_EQ(run({"pretrain", "--config", s("tiny.json"), "--manifest", s("missing/manifest.json"), "--out", s("p")}), 1);
  EXPECT_FALSE(fs::exists(dir() / "p"));
}

TEST_F(Cli, PretrainWritesCheckpointAndOneLogLinePerEpoch) {
  ASSERT_EQ(run(with_config({"pretrain", "--out", s("pre")})), 0);
  EXPECT_TRUE(fs::exists(dir() / "pre" / "dino.ckpt"));
  EXPECT_TRUE(fs::exists(dir() / "pre" / "teacher.vitw"));
  EXPECT_EQ(line_count(dir() / "pre" / "log.jsonl"), 2u);
  EXPECT_EQ(run(with_config({"pretrain", "--out", s("pre")})), 1);  // not empty
}

TEST_F(Cli, PretrainIsDeterministicAndResumable) {
  ASSERT_EQ(run(with_config({"pretrain", "--out", s("a")})), 0);
  ASSERT_EQ(run(with_config({"pretrain", "--out", s("b")})), 0);
  EXPECT_TRUE(same_bytes(dir() / "a" / "dino.ckpt", dir() / "b" / "dino.ckpt"));
  EXPECT_TRUE(same_bytes(dir() / "a" / "log.jsonl", dir() / "b" / "log.jsonl"));

  ASSERT_EQ(run(with_config({"pretrain", "--out", s("r"), "--stop-after", "1"})), 0);
  EXPECT_EQ(line_count(dir() / "r" / "log.jsonl"), 1u);
  ASSERT_EQ(run(with_config({"pretrain", "--out", s("r"), "--resume", s("r/dino.ckpt")})), 0);
  EXPECT_TRUE(same_bytes(dir() / "a" / "dino.ckpt", dir() / "r" / "dino.ckpt"));
  EXPECT_TRUE(same_bytes(dir() / "a" / "log.jsonl", dir() / "r" / "log.jsonl"));
}

TEST_F(Cli, EmbedDimensionsAndChannelErrors) {
  ASSERT_EQ(run(with_config({"embed", "--backbone", "random", "--out", s("m")})), 0);
  ASSERT_EQ(run(with_config({"embed", "--backbone", "random", "--adapter", "replication", "--out", s("r")})), 0);
  auto m = load_embeddings(dir() / "m" / "embeddings.emb1");
  auto r = load_embeddings(dir() / "r" / "embeddings.emb1");
  EXPECT_EQ(m.cols, 16u);
  EXPECT_EQ(r.cols, 32u);
  EXPECT_EQ(m.provenance["weights"], "scratch");
  EXPECT_EQ(m.provenance["dino_epochs"], 0);
  // 2-channel data straight into a 4-channel backbone with no map
  io::write_text(dir() / "nomap.json", R"({"dino": {"backbone": {"image_size": 16, "patch_size": 4,
      "in_channels": 4, "embed_dim": 16, "depth": 1, "num_heads": 2}, "global_crop_px": 16, "local_crop_px": 8}})");
  EXPECT_EQ(run({"embed", "--config", s("nomap.json"), "--manifest", s("data/manifest.json"), "--out", s("x")}), 1);
  EXPECT_EQ(run(with_config({"embed", "--map", "protein:0", "nucleus:7", "--out", s("y")})), 1);
  EXPECT_EQ(run(with_config({"embed", "--backbone", s("tiny.json"), "--out", s("z")})), 1);
}

TEST_F(Cli, EmbedFromCheckpointRecordsEpochs) {
  ASSERT_EQ(run(with_config({"pretrain", "--out", s("pre")})), 0);
  ASSERT_EQ(run(with_config({"embed", "--backbone", s("pre/dino.ckpt"), "--out", s("e1")})), 0);
  ASSERT_EQ(run(with_config({"embed", "--backbone", s("pre/dino.ckpt"), "--out", s("e2")})), 0);
  EXPECT_TRUE(same_bytes(dir() / "e1" / "embeddings.emb1", dir() / "e2" / "embeddings.emb1"));
  auto m = load_embeddings(dir() / "e1" / "embeddings.emb1");
  EXPECT_EQ(m.provenance["weights"], "pretrained");
  EXPECT_EQ(m.provenance["dino_epochs"], 2);
}

TEST_F(Cli, TrainHeadCrossvalAndReport) {
  ASSERT_EQ(run(with_config({"embed", "--out", s("m")})), 0);
  ASSERT_EQ(run(with_config({"embed", "--adapter", "replication", "--out", s("r")})), 0);
  ASSERT_EQ(run(with_config({"train-head", "--embeddings", s("m/embeddings.emb1"), "--out", s("h")})), 0);
  EXPECT_TRUE(fs::exists(dir() / "h" / "head.ckpt"));
  EXPECT_EQ(line_count(dir() / "h" / "log.jsonl"), 5u);

  auto cv = [&](const std::string& out) {
    return run(with_config({"crossval", "--embeddings", s("m/embeddings.emb1"), s("r/embeddings.emb1"), "--out", s(out)}));
  };
  ASSERT_EQ(cv("cv1"), 0);
  ASSERT_EQ(cv("cv2"), 0);
  EXPECT_TRUE(same_bytes(dir() / "cv1" / "reports.json", dir() / "cv2" / "reports.json"));
  EXPECT_TRUE(same_bytes(dir() / "cv1" / "log.jsonl", dir() / "cv2" / "log.jsonl"));
  EXPECT_EQ(line_count(dir() / "cv1" / "folds_1.txt"), 3u + 2u);
  EXPECT_EQ(line_count(dir() / "cv1" / "table.txt"), 3u);

  ASSERT_EQ(run({"report", "--inputs", s("cv1/report_1.json"), s("cv1/report_2.json"), s("cv2/reports.json"),
                 "--out", s("rep")}),
            0);
  EXPECT_EQ(line_count(dir() / "rep" / "table.txt"), 5u);
  EXPECT_NE(io::read_text(dir() / "rep" / "figure.svg").find("<svg"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir() / "rep" / "run_config.json"));
}

TEST_F(Cli, CrossvalRejectsEmbeddingsFromAnotherDataset) {
  ASSERT_EQ(run(with_config({"embed", "--out", s("m")})), 0);
  ASSERT_EQ(run({"gen-data", "--config", s("tiny.json"), "--n", "20", "--out", s("other")}), 0);
  EXPECT_EQ(run({"crossval", "--config", s("tiny.json"), "--manifest", s("other/manifest.json"), "--embeddings",
                 s("m/embeddings.emb1"), "--out", s("cv")}),
            1);
}

}  // namespace
}  // namespace dinocell
