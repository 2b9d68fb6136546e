#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mv2mae/augment.hpp"
#include "mv2mae/cli.hpp"
#include "mv2mae/errors.hpp"

using namespace mv2mae;
using namespace mv2mae::cli;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / "mv2mae_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, '\t');) cols.push_back(c);
    rows.push_back(cols);
  }
  return rows;
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(MV2MAE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Six-class dataset (includes still samples) plus a one-epoch tiny checkpoint.
struct Fixture {
  fs::path data, checkpoint;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.data = work_dir() / "d.mv2d";
    std::ostringstream log;
    auto gen = resolve("gen-data", {{"samples", "12"}, {"views", "2"}, {"frames", "8"}, {"size", "32"},
                                    {"classes", "6"}, {"seed", "4"}, {"out", out.data.string()}});
    cmd_gen_data(gen, log);
    auto pt = resolve("pretrain", {{"preset", "tiny"}, {"data", out.data.string()}, {"epochs", "1"},
                                   {"warmup_epochs", "0"}, {"batch_size", "4"}, {"clip_frames", "4"},
                                   {"out_dir", (work_dir() / "pt").string()}});
    cmd_pretrain(pt, log);
    out.checkpoint = work_dir() / "pt" / "checkpoint.mv2c";
    return out;
  }();
  return f;
}

}  // namespace

TEST(Config, ParsesCommentsAndBlankLines) {
  const auto e = parse_config_text("# header\n\nepochs = 3\n  rho=0.5  # inline\n");
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[0], (std::pair<std::string, std::string>{"epochs", "3"}));
  EXPECT_EQ(e[1].first, "rho");
  EXPECT_EQ(e[1].second, "0.5");
}

TEST(Config, LaterEntriesWinAndPresetGoesFirst) {
  const auto c = resolve("pretrain", {{"d_enc", "96"}, {"preset", "tiny"}, {"epochs", "3"}, {"epochs", "4"}});
  EXPECT_EQ(c.train.model.d_enc, 96u);
  EXPECT_EQ(c.train.model.enc_depth, 4u);
  EXPECT_EQ(c.train.epochs, 4u);
}

TEST(Config, DumpRoundTrips) {
  auto c = resolve("pretrain", {{"preset", "tiny"}, {"rho", "0.85"}, {"temperatures", "1,60"}, {"crop", "false"}});
  const auto text = dump_config(c);
  const auto again = resolve("pretrain", parse_config_text(text));
  EXPECT_EQ(dump_config(again), text);
  EXPECT_EQ(again.train.rho, 0.85);
  EXPECT_FALSE(again.train.crop);
}

TEST(Config, UnknownKeyAndBadValuesNameTheKey) {
  try {
    resolve("pretrain", {{"epoch", "3"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "epoch");
  }
  try {
    resolve("pretrain", {{"rho", "lots"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "rho");
  }
  EXPECT_THROW(resolve("pretrain", {{"crop", "maybe"}}), ConfigError);
  EXPECT_THROW(resolve("pretrain", {{"preset", "huge"}}), ConfigError);
}

TEST(Config, ThreadsVariableIsValidated) {
  ::unsetenv("MV2MAE_THREADS");
  EXPECT_EQ(thread_count_from_env(), 1u);
  ::setenv("MV2MAE_THREADS", "4", 1);
  EXPECT_EQ(thread_count_from_env(), 4u);
  ::setenv("MV2MAE_THREADS", "zero", 1);
  EXPECT_THROW(thread_count_from_env(), ConfigError);
  ::unsetenv("MV2MAE_THREADS");
}

TEST(Commands, GenDataRejectsSingleView) {
  std::ostringstream log;
  auto c = resolve("gen-data", {{"views", "1"}, {"out", (work_dir() / "x.mv2d").string()}});
  try {
    cmd_gen_data(c, log);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "views");
  }
  EXPECT_FALSE(fs::exists(work_dir() / "x.mv2d"));
}

TEST(Commands, StillSampleHasUniformMotionWeights) {
  const auto& f = fixture();
  const auto data = synth::read_dataset(f.data);
  std::size_t still = data.samples.size();
  for (std::size_t i = 0; i < data.samples.size(); ++i)
    if (data.samples[i].label == static_cast<std::uint32_t>(synth::MotionKind::still)) still = i;
  ASSERT_LT(still, data.samples.size());

  const auto dir = work_dir() / "mw";
  std::ostringstream log;
  auto c = resolve("viz", {{"preset", "tiny"}, {"kind", "motion-weights"}, {"data", f.data.string()},
                           {"sample", std::to_string(still)}, {"clip_frames", "4"}, {"temperatures", "1,60"},
                           {"out_dir", dir.string()}});
  EXPECT_EQ(cmd_viz(c, log), 0);
  for (const char* t : {"1", "60"}) {
    const auto rows = read_tsv(dir / ("motion_weights_s" + std::to_string(still) + "_v0_t" + t + ".tsv"));
    ASSERT_EQ(rows.size(), 1 + 2 * 4 * 4u);
    EXPECT_EQ(rows[0], (std::vector<std::string>{"token", "weight"}));
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_NEAR(std::stod(rows[i][1]), 1.0 / 32, 1e-6);
  }
  EXPECT_TRUE(fs::exists(dir / ("motion_weights_s" + std::to_string(still) + "_v0_t60.ppm")));
}

TEST(Commands, CrossAttentionTableMatchesRecorder) {
  const auto& f = fixture();
  const auto dir = work_dir() / "xa";
  std::ostringstream log;
  auto c = resolve("viz", {{"preset", "tiny"}, {"kind", "xattn"}, {"data", f.data.string()},
                           {"checkpoint", f.checkpoint.string()}, {"sample", "3"}, {"view", "1"}, {"layer", "1"},
                           {"head", "1"}, {"query", "7"}, {"clip_frames", "4"}, {"out_dir", dir.string()}});
  ASSERT_EQ(cmd_viz(c, log), 0);
  const auto rows = read_tsv(dir / "xattn_s3_v1_l1_h1_q7.tsv");

  // Recompute the same row directly.
  const auto data = synth::read_dataset(f.data);
  auto mc = model_for(c, data.header);
  mc.n_classes = 0;
  ModelParams<float> params;
  for (auto& [name, t] : load_checkpoint<float>(f.checkpoint))
    if (name.rfind("opt.", 0) != 0) params.set(name, t);
  Model<float> model(mc, &params);
  NoGradGuard ng;
  const auto& pc = mc.patch;
  const auto& s = data.samples[3];
  const auto start = temporal_starts(8, 4, 1)[0];
  const auto src = crop_clip(s.clips[0], full_crop(32, 32), start, 4, 32, 32);
  const auto tgt = crop_clip(s.clips[1], full_crop(32, 32), start, 4, 32, 32);
  const auto& t = c.train;
  const auto sv = make_view_batch<float>({&src}, pc, {make_mask(t.mask, pc, t.rho, {t.seed, s.sample_id, 0, 0})}, false, 60);
  const auto tv = make_view_batch<float>({&tgt}, pc, {make_mask(t.mask, pc, t.rho, {t.seed, s.sample_id, 0, 1})}, false, 60);
  const auto enc_sv = model.encoder_forward(split_tokens(model.tokenize(sv.inputs), sv.plans).visible);
  const auto enc_tv = model.encoder_forward(split_tokens(model.tokenize(tv.inputs), tv.plans).visible);
  AttentionRecorder<float> rec;
  model.cross_view_decoder(model.assemble_decoder_input(enc_tv, tv.plans), {enc_sv}, &rec);
  const auto row = attention_map_extract(&rec, 1, 1, 7);

  ASSERT_EQ(rows.size(), row.size() + 1);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"key", "source_token", "weight"}));
  double total = 0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    EXPECT_EQ(std::stoul(rows[k + 1][1]), sv.plans[0].visible[k]);
    EXPECT_EQ(std::stod(rows[k + 1][2]), static_cast<double>(row[k]));
    total += std::stod(rows[k + 1][2]);
  }
  EXPECT_NEAR(total, 1.0, 1e-5);
}

TEST(Commands, VizRejectsOutOfRangeSelections) {
  const auto& f = fixture();
  std::ostringstream log;
  for (const auto& [key, value] : std::vector<std::pair<std::string, std::string>>{
           {"layer", "2"}, {"head", "2"}, {"query", "32"}, {"sample", "12"}, {"view", "2"}, {"kind", "saliency"}}) {
    auto c = resolve("viz", {{"preset", "tiny"}, {"kind", "xattn"}, {"data", f.data.string()},
                             {"checkpoint", f.checkpoint.string()}, {"clip_frames", "4"},
                             {"out_dir", (work_dir() / "bad").string()}, {key, value}});
    try {
      cmd_viz(c, log);
      ADD_FAILURE() << key;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key(), key);
    }
  }
}

TEST(Commands, GradcheckReportsInjectedFault) {
  std::ostringstream ok, bad;
  EXPECT_EQ(cmd_gradcheck(resolve("gradcheck", {}), ok), 0);
  EXPECT_NE(ok.str().find("gradcheck f64: PASS"), std::string::npos);
  EXPECT_EQ(cmd_gradcheck(resolve("gradcheck", {{"inject_fault", "layer_norm"}}), bad), 1);
  EXPECT_NE(bad.str().find("primitive\tlayer_norm\t"), std::string::npos);
  EXPECT_NE(bad.str().find("gradcheck f64: FAIL"), std::string::npos);
  EXPECT_TRUE(backward_fault().empty());
  EXPECT_THROW(cmd_gradcheck(resolve("gradcheck", {{"inject_fault", "nope"}}), bad), ConfigError);
}

TEST(Binary, ExitCodes) {
  const auto d = work_dir() / "bin.mv2d";
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("pretrain --help"), 0);
  EXPECT_EQ(run_binary("frobnicate"), 2);
  EXPECT_EQ(run_binary("pretrain --no-such-flag 1"), 2);
  EXPECT_EQ(run_binary("gen-data --views 1 --out " + d.string()), 2);
  EXPECT_EQ(run_binary("pretrain --data " + (work_dir() / "missing.mv2d").string()), 2);
  EXPECT_EQ(run_binary("gen-data --samples 4 --frames 4 --size 16 --out " + d.string()), 0);
  EXPECT_TRUE(fs::exists(d));
  EXPECT_EQ(run_binary("pretrain --dump-config --preset tiny --rho 0.8"), 0);
}
