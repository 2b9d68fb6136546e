#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "mv2mae/augment.hpp"
#include "mv2mae/errors.hpp"
#include "mv2mae/training.hpp"

using namespace mv2mae;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("mv2mae_test_" + name);
  fs::remove_all(d);
  return d;
}

const synth::Dataset& tiny_data() {
  static const synth::Dataset ds = [] {
    synth::GenerateOptions g;
    g.seed = 3;
    g.n_samples = 8;
    g.n_views = 3;
    g.frames = 6;
    g.height = g.width = 16;
    return synth::generate_dataset(g);
  }();
  return ds;
}

TrainConfig tiny_train(bool finetune = false) {
  TrainConfig c = finetune ? TrainConfig::finetune_defaults() : TrainConfig::pretrain_defaults();
  auto& m = c.model;
  m.d_enc = 16, m.enc_depth = 2, m.enc_heads = 2, m.enc_mlp = 32;
  m.d_dec = 8, m.dec_depth = 1, m.dec_heads = 2, m.dec_mlp = 16;
  m.patch = PatchConfig{2, 8, 8, 4, 16, 16, 3};
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.batch_size = 4;
  c.seed = 5;
  return c;
}

ModelParams<float> one_param(const std::string& name, float value, float grad) {
  ModelParams<float> p;
  auto t = Tensor<float>({1}, {value}, true);
  backward(sum(mul(t, Tensor<float>({1}, {grad}))));
  p.set(name, t);
  return p;
}

}  // namespace

TEST(AdamW, FirstStepHandExample) {
  auto p = one_param("w", 1.0f, 0.5f);
  OptimState<float> st;
  adamw_step(p, st, AdamWConfig{0.9, 0.999, 1e-8, 0.0}, 0.1);
  EXPECT_NEAR(p.at("w").data()[0], 0.9, 1e-6);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, ZeroGradientWithoutDecayIsNoOp) {
  auto p = one_param("w", 1.5f, 0.0f);
  OptimState<float> st;
  adamw_step(p, st, AdamWConfig{0.9, 0.999, 1e-8, 0.0}, 0.1);
  EXPECT_EQ(p.at("w").data()[0], 1.5f);
}

TEST(AdamW, DecoupledDecayShrinks) {
  auto p = one_param("w", 2.0f, 0.0f);
  OptimState<float> st;
  adamw_step(p, st, AdamWConfig{0.9, 0.999, 1e-8, 0.05}, 0.1);
  EXPECT_NEAR(p.at("w").data()[0], 2.0 * (1 - 0.1 * 0.05), 1e-6);
}

TEST(AdamW, DecaySkipsBiasesGainsAndMaskToken) {
  EXPECT_TRUE(applies_weight_decay("enc.0.attn.q.weight"));
  EXPECT_FALSE(applies_weight_decay("enc.0.attn.q.bias"));
  EXPECT_FALSE(applies_weight_decay("enc.0.norm1.gain"));
  EXPECT_FALSE(applies_weight_decay("mask_token"));
  auto p = one_param("head.bias", 2.0f, 0.0f);
  OptimState<float> st;
  adamw_step(p, st, AdamWConfig{0.9, 0.999, 1e-8, 0.05}, 0.1);
  EXPECT_EQ(p.at("head.bias").data()[0], 2.0f);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto p = one_param("enc.3.mlp.fc2.weight", 1.0f, std::numeric_limits<float>::quiet_NaN());
  OptimState<float> st;
  try {
    adamw_step(p, st, AdamWConfig{}, 0.1);
    FAIL() << "expected an exception";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("enc.3.mlp.fc2.weight"), std::string::npos);
  }
  EXPECT_EQ(p.at("enc.3.mlp.fc2.weight").data()[0], 1.0f);
}

TEST(Schedule, WarmupEndMidpointAndEnd) {
  Schedule s{1e-3, 1e-6, 5, 25, 10};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, 25), 0.5e-3, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 1e-3);
  EXPECT_NEAR(lr_at(s, 150), (1e-3 + 1e-6) / 2, 1e-15);
  EXPECT_NEAR(lr_at(s, 250), 1e-6, 1e-15);
  EXPECT_EQ(lr_at(s, 400), 1e-6);
  for (std::size_t k = 51; k < 250; ++k) EXPECT_LE(lr_at(s, k), lr_at(s, k - 1));
}

TEST(LayerDecay, Examples) {
  EXPECT_DOUBLE_EQ(layerwise_lr(1.0, 12, 12, 0.9), 1.0);
  EXPECT_NEAR(layerwise_lr(1.0, 0, 12, 0.9), 0.2824, 1e-4);
  EXPECT_NEAR(layerwise_lr(1.0, 0, 12, 0.9), std::pow(0.9, 12), 1e-15);
  for (std::size_t l = 0; l <= 12; ++l) EXPECT_EQ(layerwise_lr(3e-4, l, 12, 1.0), 3e-4);
  EXPECT_THROW(layerwise_lr(1.0, 13, 12, 0.9), std::out_of_range);
}

TEST(LayerDecay, LayerIds) {
  EXPECT_EQ(layer_id("embed.weight", 12), 0u);
  EXPECT_EQ(layer_id("enc.0.attn.q.weight", 12), 1u);
  EXPECT_EQ(layer_id("enc.11.mlp.fc1.bias", 12), 12u);
  EXPECT_EQ(layer_id("cls.weight", 12), 13u);
  EXPECT_EQ(layer_id("cls.norm.gain", 12), 13u);
}

TEST(TrainConfig, ValidationNamesKey) {
  auto c = tiny_train();
  c.rho = 1.2;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "rho");
  }
  c = tiny_train();
  c.base_lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(tiny_train().steps_per_epoch(9), 3u);
}

TEST(Augment, TestCropLayouts) {
  EXPECT_EQ(test_crops(64, 64, 1).size(), 1u);
  const auto two = test_crops(64, 64, 2);
  EXPECT_FALSE(two[0].flip);
  EXPECT_TRUE(two[1].flip);
  const auto ten = test_crops(64, 64, 10);
  ASSERT_EQ(ten.size(), 10u);
  EXPECT_EQ(ten[0].x0, 4);
  EXPECT_EQ(ten[0].w, 56);
  EXPECT_EQ(ten[4].x0, 8);
  EXPECT_EQ(ten[4].y0, 8);
  EXPECT_THROW(test_crops(64, 64, 3), ConfigError);
}

TEST(Augment, TemporalStartsAreEven) {
  EXPECT_EQ(temporal_starts(16, 8, 1), (std::vector<std::size_t>{4}));
  EXPECT_EQ(temporal_starts(16, 8, 3), (std::vector<std::size_t>{0, 4, 8}));
  EXPECT_EQ(temporal_starts(8, 8, 5), (std::vector<std::size_t>{0, 0, 0, 0, 0}));
  EXPECT_ANY_THROW(temporal_starts(4, 8, 1));
}

TEST(Augment, FullCropIsIdentityAndFlipMirrors) {
  const auto& clip = tiny_data().samples[0].clips[0];
  const auto same = crop_clip(clip, full_crop(16, 16), 0, clip.frames, 16, 16);
  EXPECT_EQ(same.pixels, clip.pixels);
  auto flip = full_crop(16, 16);
  flip.flip = true;
  const auto mirrored = crop_clip(clip, flip, 1, 4, 16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) EXPECT_FLOAT_EQ(mirrored.at(2, 3, y, x), clip.at(2, 4, y, 15 - x));
}

TEST(Augment, RandomCropStaysInside) {
  KeyedRng rng{1};
  for (int i = 0; i < 500; ++i) {
    const auto c = random_resized_crop(rng, 32, 48, 0.3);
    EXPECT_GE(c.x0, 0);
    EXPECT_GE(c.y0, 0);
    EXPECT_LE(c.x0 + c.w, 48);
    EXPECT_LE(c.y0 + c.h, 32);
    EXPECT_GE(c.w * c.h, 0.3 * 32 * 48 * 0.9);
  }
}

TEST(Fusion, MeanOfViews) {
  const auto f = late_fuse({{{1, 3}, {3, -1}}, {{0.5, 0.25}, {0.5, 1.0}}});
  EXPECT_EQ(f.logits[0], (std::vector<double>{2, 1}));
  EXPECT_EQ(f.logits[1], (std::vector<double>{0.5, 0.625}));
  EXPECT_EQ(f.predictions, (std::vector<std::uint32_t>{0, 1}));
}

TEST(Fusion, SingleViewIdentityAndTies) {
  const auto one = late_fuse({{{0.1, 0.7, -2}}});
  EXPECT_EQ(one.logits[0], (std::vector<double>{0.1, 0.7, -2}));
  EXPECT_EQ(late_fuse({{{2, 0}, {0, 2}}}).predictions[0], 0u);
  const std::vector<double> tie{1, 5, 5};
  EXPECT_EQ(argmax(tie), 1u);
  EXPECT_ANY_THROW(late_fuse({{{1, 2}, {3, 4}}, {{1, 2}}}));
}

TEST(Pretrain, DeterministicAndResumable) {
  auto cfg = tiny_train();
  cfg.epochs = 3;
  cfg.checkpoint_every = 1;
  cfg.n_source_views = 2;
  const auto a = fresh_dir("pt_a"), b = fresh_dir("pt_b"), c = fresh_dir("pt_c");
  const auto ra = pretrain(tiny_data(), cfg, {a, {}});
  pretrain(tiny_data(), cfg, {b, {}});
  EXPECT_EQ(slurp(a / "checkpoint.mv2c"), slurp(b / "checkpoint.mv2c"));
  EXPECT_EQ(slurp(a / "metrics.tsv"), slurp(b / "metrics.tsv"));
  ASSERT_TRUE(fs::exists(a / "checkpoint_epoch1.mv2c"));

  const auto rc = pretrain(tiny_data(), cfg, {c, a / "checkpoint_epoch1.mv2c"});
  EXPECT_EQ(slurp(c / "checkpoint.mv2c"), slurp(a / "checkpoint.mv2c"));
  const auto full = slurp(a / "metrics.tsv"), resumed = slurp(c / "metrics.tsv");
  const auto header_end = resumed.find('\n') + 1;
  ASSERT_GT(resumed.size(), header_end);
  EXPECT_EQ(full.substr(full.size() - (resumed.size() - header_end)), resumed.substr(header_end));
  ASSERT_EQ(rc.rows.back().step, ra.rows.back().step);
  EXPECT_EQ(rc.rows.back().total, ra.rows.back().total);

  std::istringstream metrics(slurp(a / "metrics.tsv"));
  std::string header;
  std::getline(metrics, header);
  EXPECT_EQ(header, "step\tlr\ttotal\tself_sv\tself_tv\tcross_tv");
  std::size_t lines = 0;
  for (std::string l; std::getline(metrics, l);) ++lines;
  EXPECT_EQ(lines, 3 * cfg.steps_per_epoch(8));
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Pretrain, ZeroLambdaLeavesCrossDecoderUntouched) {
  auto cfg = tiny_train();
  cfg.objective.lambda_cross = 0;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  const auto r = pretrain(tiny_data(), cfg);
  const auto init = init_params<float>(cfg.model, cfg.seed, ParamSet::pretrain);
  for (const auto& [name, t] : r.params.tensors()) {
    const auto& t0 = init.at(name);
    const bool same = std::equal(t.data().begin(), t.data().end(), t0.data().begin());
    if (name.rfind("cross_dec", 0) == 0) EXPECT_TRUE(same) << name;
    if (name == "mask_token" || name == "embed.weight") EXPECT_FALSE(same) << name;
  }
}

TEST(Pretrain, RejectsTooFewViews) {
  auto cfg = tiny_train();
  cfg.n_source_views = 3;
  EXPECT_THROW(pretrain(tiny_data(), cfg), ConfigError);
}

TEST(Finetune, LinearProbeFreezesEncoder) {
  auto cfg = tiny_train(true);
  cfg.model.n_classes = 8;
  cfg.linear_probe = true;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  const auto pre = init_params<float>(cfg.model, 77, ParamSet::pretrain);
  const auto r = finetune(tiny_data(), &pre.tensors(), cfg);
  for (const auto& [name, t] : r.params.tensors()) {
    const bool is_cls = name.rfind("cls", 0) == 0;
    if (is_cls) continue;
    const auto& t0 = pre.at(name);
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), t0.data().begin())) << name;
  }
  const auto fresh = init_params<float>(cfg.model, cfg.seed, ParamSet::finetune);
  EXPECT_FALSE(std::equal(r.params.at("cls.weight").data().begin(), r.params.at("cls.weight").data().end(),
                          fresh.at("cls.weight").data().begin()));
}

TEST(Finetune, MismatchedCheckpointNamesTensor) {
  auto cfg = tiny_train(true);
  cfg.model.n_classes = 8;
  auto other = cfg.model;
  other.d_enc = 32;
  other.enc_mlp = 64;
  const auto pre = init_params<float>(other, 0, ParamSet::pretrain);
  try {
    finetune(tiny_data(), &pre.tensors(), cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "checkpoint");
    EXPECT_NE(std::string(e.what()).find("embed"), std::string::npos);
  }
}

TEST(Evaluate, SinglePassAndFusionAreConsistent) {
  auto cfg = tiny_train(true);
  cfg.model.n_classes = 8;
  auto params = init_params<float>(cfg.model, 4, ParamSet::finetune);
  const auto& data = tiny_data();
  const auto r = evaluate(data, params, cfg.model, EvalConfig{1, 1, {}});
  ASSERT_EQ(r.logits.size(), data.samples.size());

  // Single forward pass per view by hand.
  Model<float> model(cfg.model, &params);
  NoGradGuard ng;
  const auto& pc = cfg.model.patch;
  const std::size_t start = temporal_starts(6, 4, 1)[0];
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    for (std::size_t v = 0; v < 3; ++v) {
      const auto clip = crop_clip(data.samples[i].clips[v], full_crop(16, 16), start, 4, 16, 16);
      const auto out = model.classifier_forward(model.encoder_forward(model.tokenize(standardize_pixels(patchify_batch<float>({&clip}, pc)))));
      for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(r.view_logits[i][v][k], out.data()[k], 1e-5);
    }
    for (std::size_t k = 0; k < 8; ++k) {
      double mean = 0;
      for (std::size_t v = 0; v < 3; ++v) mean += r.view_logits[i][v][k];
      EXPECT_NEAR(r.logits[i][k], mean / 3, 1e-12);
    }
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < r.labels.size(); ++i) correct += argmax(r.logits[i]) == r.labels[i];
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / static_cast<double>(r.labels.size()));

  const auto multi = evaluate(data, params, cfg.model, EvalConfig{2, 10, {0, 2}});
  EXPECT_EQ(multi.view_logits[0].size(), 2u);
}
