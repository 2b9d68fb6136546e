#include <gtest/gtest.h>

#include <filesystem>

#include "mv2mae/checkpoint.hpp"
#include "mv2mae/errors.hpp"
#include "mv2mae/model.hpp"
#include "mv2mae/rng.hpp"

using namespace mv2mae;

namespace {

ModelConfig small_config(PatchConfig pc = {2, 8, 8, 4, 16, 16, 3}) {
  ModelConfig c;
  c.d_enc = 16, c.enc_depth = 2, c.enc_heads = 2, c.enc_mlp = 32;
  c.d_dec = 8, c.dec_depth = 1, c.dec_heads = 2, c.dec_mlp = 16;
  c.patch = pc;
  c.n_classes = 8;
  return c;
}

Tensor<double> random_patches(std::size_t b, const PatchConfig& pc, std::uint64_t seed) {
  KeyedRng rng{seed};
  std::vector<double> v(b * pc.num_tokens() * pc.patch_dim());
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor<double>({b, pc.num_tokens(), pc.patch_dim()}, std::move(v));
}

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ModelConfig, ViTSmallEncoderHas22MParameters) {
  const auto n = static_cast<double>(encoder_param_count(ModelConfig::vit_small()));
  EXPECT_NEAR(n, 22e6, 2.2e6);
}

TEST(ModelConfig, HeadsMustDivideWidth) {
  auto c = small_config();
  c.enc_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelParams, NamesAreDisjointPerSet) {
  const auto c = small_config();
  const auto pre = init_params<double>(c, 0, ParamSet::pretrain);
  const auto fin = init_params<double>(c, 0, ParamSet::finetune);
  EXPECT_TRUE(pre.contains("mask_token"));
  EXPECT_TRUE(pre.contains("cross_dec.0.xattn.q.weight"));
  EXPECT_FALSE(pre.contains("cls.weight"));
  EXPECT_TRUE(fin.contains("cls.weight"));
  EXPECT_FALSE(fin.contains("head.weight"));
  EXPECT_EQ(pre.at("enc.1.mlp.fc1.weight").data()[3], fin.at("enc.1.mlp.fc1.weight").data()[3]);
}

TEST(Encoder, PaperVisibleTokenShape) {
  auto c = ModelConfig::vit_small();
  auto params = init_params<float>(c, 1, ParamSet::pretrain);
  Model<float> model(c, &params);
  NoGradGuard no_grad;
  TokenBatch<float> vis;
  vis.tokens = Tensor<float>::zeros({1, 154, 384});
  std::vector<std::size_t> idx(154);
  for (std::size_t i = 0; i < 154; ++i) idx[i] = 3 * i;
  vis.token_index = {idx};
  vis.view_id = {0};
  const auto enc = model.encoder_forward(vis);
  EXPECT_EQ(enc.tokens.shape(), (Shape{1, 154, 384}));
  std::vector<MaskPlan> plans(1);
  plans[0].num_tokens = 512;
  plans[0].visible = idx;
  for (std::size_t i = 0; i < 512; ++i)
    if (i % 3 != 0 || i / 3 >= 154) plans[0].masked.push_back(i);
  const auto full = model.assemble_decoder_input(enc, plans);
  EXPECT_EQ(full.tokens.shape(), (Shape{1, 512, 192}));
  EXPECT_EQ(model.self_view_decoder(full).shape(), (Shape{1, 512, 1536}));
}

TEST(Encoder, ZeroDepthIsIdentity) {
  auto c = small_config();
  c.enc_depth = 0;
  auto params = init_params<double>(c, 0, ParamSet::pretrain);
  Model<double> model(c, &params);
  const auto tokens = model.tokenize(random_patches(2, c.patch, 1));
  EXPECT_EQ(values(model.encoder_forward(tokens).tokens), values(tokens.tokens));
}

TEST(Encoder, PermutationEquivariant) {
  const auto c = small_config();
  auto params = init_params<double>(c, 3, ParamSet::pretrain);
  Model<double> model(c, &params);
  const auto tokens = model.tokenize(random_patches(1, c.patch, 2));
  const std::size_t n = tokens.count();
  KeyedRng rng{5};
  const auto perm = rng.permutation(n);
  TokenBatch<double> shuffled = tokens;
  shuffled.tokens = gather_rows(tokens.tokens, {perm});
  for (std::size_t j = 0; j < n; ++j) shuffled.token_index[0][j] = tokens.token_index[0][perm[j]];
  const auto a = model.encoder_forward(tokens).tokens;
  const auto b = model.encoder_forward(shuffled).tokens;
  const std::size_t d = c.d_enc;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(b.at({0, j, k}), a.at({0, perm[j], k}), 1e-12);
}

TEST(Encoder, DropPathOnlyInTraining) {
  auto c = small_config();
  c.drop_path_rate = 0.5;
  auto params = init_params<double>(c, 3, ParamSet::finetune);
  Model<double> model(c, &params);
  const auto tokens = model.tokenize(random_patches(4, c.patch, 9));
  const auto eval1 = values(model.encoder_forward(tokens).tokens);
  const auto eval2 = values(model.encoder_forward(tokens, {false, 7}).tokens);
  EXPECT_EQ(eval1, eval2);
  bool differs = false;
  for (std::uint64_t s = 0; s < 8 && !differs; ++s) differs = values(model.encoder_forward(tokens, {true, s}).tokens) != eval1;
  EXPECT_TRUE(differs);
}

TEST(Decoder, AssemblyPlacesMaskTokenAndProjection) {
  const auto c = small_config();
  auto params = init_params<double>(c, 4, ParamSet::pretrain);
  Model<double> model(c, &params);
  const auto N = c.patch.num_tokens();
  const auto plan = random_mask(N, 0.5, {1, 2, 3, 4});
  const auto all = model.tokenize(random_patches(1, c.patch, 4));
  const auto enc = model.encoder_forward(split_tokens(all, {plan}).visible);
  const auto full = model.assemble_decoder_input(enc, {plan});
  const auto pe = sinusoidal_pos_embed<double>(N, c.d_dec);
  const auto& mt = params.at("mask_token");
  for (auto i : plan.masked)
    for (std::size_t k = 0; k < c.d_dec; ++k) EXPECT_NEAR(full.tokens.at({0, i, k}) - pe.at({i, k}), mt.data()[k], 1e-14);
  const auto& w = params.at("proj.weight");
  const auto& b = params.at("proj.bias");
  for (std::size_t j = 0; j < plan.visible.size(); ++j) {
    const auto i = plan.visible[j];
    for (std::size_t k = 0; k < c.d_dec; ++k) {
      double expect = b.data()[k] + pe.at({i, k});
      for (std::size_t e = 0; e < c.d_enc; ++e) expect += enc.tokens.at({0, j, e}) * w.at({e, k});
      EXPECT_NEAR(full.tokens.at({0, i, k}), expect, 1e-12);
    }
  }
}

TEST(Decoder, ZeroDepthZeroHeadGivesZeros) {
  auto c = small_config();
  c.dec_depth = 0;
  auto params = init_params<double>(c, 0, ParamSet::pretrain);
  for (auto name : {"head.weight", "head.bias"})
    for (auto& v : params[name].mutable_data()) v = 0;
  Model<double> model(c, &params);
  TokenBatch<double> full;
  full.tokens = Tensor<double>::full({1, c.patch.num_tokens(), c.d_dec}, 0.7);
  const auto out = model.self_view_decoder(full);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(CrossDecoder, ConcatenatesSourceViewsAndRecordsMaps) {
  auto c = small_config({2, 16, 16, 16, 128, 128, 3});
  c.dec_depth = 2;
  auto params = init_params<double>(c, 6, ParamSet::pretrain);
  Model<double> model(c, &params);
  NoGradGuard no_grad;
  auto encode = [&](std::uint64_t stream) {
    const auto plan = random_mask(512, 0.7, {0, 0, 0, stream});
    return std::make_pair(model.encoder_forward(split_tokens(model.tokenize(random_patches(1, c.patch, stream)), {plan}).visible), plan);
  };
  const auto [tv, tplan] = encode(0);
  const auto [s1, p1] = encode(1);
  const auto [s2, p2] = encode(2);
  EXPECT_EQ(s1.count(), 154u);
  const auto full = model.assemble_decoder_input(tv, {tplan});
  AttentionRecorder<double> rec;
  const auto out = model.cross_view_decoder(full, {s1, s2}, &rec);
  EXPECT_EQ(out.shape(), model.self_view_decoder(full).shape());
  ASSERT_EQ(rec.layers.size(), 2u);
  EXPECT_EQ(rec.layers[0].keys, 308u);
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (std::size_t h = 0; h < c.dec_heads; ++h)
      for (std::size_t q : {0u, 17u, 511u}) {
        const auto row = attention_map_extract(&rec, layer, h, q);
        ASSERT_EQ(row.size(), 308u);
        double s = 0;
        for (double v : row) {
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
  EXPECT_THROW(attention_map_extract<double>(nullptr, 0, 0, 0), std::logic_error);
  EXPECT_THROW(model.cross_view_decoder(full, {}), std::exception);
}

TEST(Classifier, ShapeAndPermutationInvariance) {
  const auto c = small_config();
  auto params = init_params<double>(c, 8, ParamSet::finetune);
  Model<double> model(c, &params);
  const auto enc = model.encoder_forward(model.tokenize(random_patches(3, c.patch, 8)));
  const auto logits = model.classifier_forward(enc);
  EXPECT_EQ(logits.shape(), (Shape{3, 8}));
  KeyedRng rng{1};
  const auto perm = rng.permutation(enc.count());
  TokenBatch<double> shuffled = enc;
  shuffled.tokens = gather_rows(enc.tokens, {perm, perm, perm});
  const auto again = model.classifier_forward(shuffled);
  for (std::size_t i = 0; i < logits.numel(); ++i) EXPECT_NEAR(again.data()[i], logits.data()[i], 1e-13);
}

TEST(Classifier, IdenticalTokensPoolToThatToken) {
  const auto c = small_config();
  auto params = init_params<double>(c, 8, ParamSet::finetune);
  Model<double> model(c, &params);
  KeyedRng rng{2};
  std::vector<double> tok(c.d_enc);
  for (auto& v : tok) v = rng.normal();
  std::vector<double> many, one = tok;
  for (std::size_t i = 0; i < 5; ++i) many.insert(many.end(), tok.begin(), tok.end());
  TokenBatch<double> a, b;
  a.tokens = Tensor<double>({1, 5, c.d_enc}, many);
  b.tokens = Tensor<double>({1, 1, c.d_enc}, one);
  const auto la = model.classifier_forward(a), lb = model.classifier_forward(b);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(la.data()[k], lb.data()[k], 1e-12);
}

TEST(Classifier, MissingClassCountRejected) {
  auto c = small_config();
  c.n_classes = 0;
  EXPECT_THROW(init_params<double>(c, 0, ParamSet::finetune), ConfigError);
}

TEST(Checkpoint, RoundTripGivesBitwiseIdenticalForward) {
  const auto c = small_config();
  auto params = init_params<float>(c, 12, ParamSet::all);
  const auto path = std::filesystem::temp_directory_path() / "mv2mae_test_ckpt.mv2c";
  save_checkpoint(path, params.tensors());
  const auto loaded = load_checkpoint<float>(path);
  ModelParams<float> restored;
  for (const auto& [k, t] : loaded) restored.set(k, t);
  EXPECT_EQ(checkpoint_bytes(restored.tensors()), checkpoint_bytes(params.tensors()));
  Model<float> m1(c, &params), m2(c, &restored);
  KeyedRng rng{3};
  std::vector<float> v(2 * c.patch.num_tokens() * c.patch.patch_dim());
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const Tensor<float> patches({2, c.patch.num_tokens(), c.patch.patch_dim()}, v);
  const auto a = m1.classifier_forward(m1.encoder_forward(m1.tokenize(patches)));
  const auto b = m2.classifier_forward(m2.encoder_forward(m2.tokenize(patches)));
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, MixedPrecisionAndCorruption) {
  TensorMap<double> m;
  m["a"] = Tensor<double>({2, 2}, {1, 2, 3, 0.25});
  m["b"] = Tensor<double>::scalar(7);
  auto bytes = checkpoint_bytes(m);
  const auto f = parse_checkpoint<float>(bytes);
  EXPECT_EQ(f.at("a").shape(), (Shape{2, 2}));
  EXPECT_EQ(f.at("a").data()[3], 0.25f);
  bytes.resize(bytes.size() - 3);
  EXPECT_ANY_THROW(parse_checkpoint<double>(bytes));
  std::vector<unsigned char> junk{'N', 'O', 'P', 'E', 0, 0, 0, 0};
  EXPECT_ANY_THROW(parse_checkpoint<double>(junk));
}
