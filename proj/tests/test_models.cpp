#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "caplab/models.hpp"
#include "caplab/training.hpp"
#include "oracles.hpp"

using namespace caplab;

namespace {

ModelConfig small_config(Architecture arch) {
  ModelConfig c = ModelConfig::make(arch, 7, 3);
  c.embed_dim = 4;
  c.decoder_units = 5;
  c.attn_dim = 4;
  c.encoder_units = 3;
  c.grid_h = 2;
  c.grid_w = 2;
  return c;
}

FeatureGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, scale);
  FeatureGrid g{h, w, c, std::vector<float>(h * w * c)};
  for (float& v : g.data) v = dist(rng);
  return g;
}

std::vector<std::vector<double>> stepwise_logits(const CaptionModel& model, const Features& f,
                                                 const std::vector<int>& caption) {
  std::vector<std::vector<double>> out;
  DecodeState s = init_state(model, f);
  for (std::size_t t = 0; t + 1 < caption.size(); ++t) {
    StepOutput o = decode_step(model, s, caption[t]);
    out.push_back(oracle::values(o.logits));
    s = std::move(o.state);
  }
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

class PerArchitecture : public ::testing::TestWithParam<Architecture> {};

std::string arch_label(const ::testing::TestParamInfo<Architecture>& info) { return architecture_name(info.param); }

}  // namespace

TEST(Architectures, NamesRoundTripAndUnknownListsChoices) {
  for (Architecture a : all_architectures()) EXPECT_EQ(parse_architecture(architecture_name(a)), a);
  try {
    parse_architecture("nexus");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (Architecture a : all_architectures()) EXPECT_NE(msg.find(architecture_name(a)), std::string::npos) << msg;
  }
}

TEST(ModelConfigTest, FusionRulesAndErrors) {
  EXPECT_EQ(ModelConfig::make(Architecture::Genesis, 10, 4).fusion, Fusion::Add);
  EXPECT_EQ(ModelConfig::make(Architecture::Contexta, 10, 4).fusion, Fusion::Concat);
  EXPECT_EQ(ModelConfig::make(Architecture::Clarity, 10, 4).fusion, Fusion::Concat);
  ModelConfig g = ModelConfig::make(Architecture::Genesis, 10, 4);
  g.fusion = Fusion::Concat;
  EXPECT_THROW(g.validate(), ConfigError);
  ModelConfig f = ModelConfig::make(Architecture::Focalis, 10, 4);
  EXPECT_THROW(build(f, 0), ConfigError);
  ModelConfig tiny = ModelConfig::make(Architecture::Genesis, 2, 4);
  EXPECT_THROW(tiny.validate(), ConfigError);
  ModelConfig zero = ModelConfig::make(Architecture::Clarity, 10, 0);
  EXPECT_THROW(zero.validate(), ConfigError);
}

TEST(Build, GenesisParameterCountMatchesHandFormula) {
  const ModelConfig c = ModelConfig::make(Architecture::Genesis, 30, 64);
  const CaptionModel m = build(c, 0);
  // embedding 30x32, LSTM 4*256*(32+256+1), image projection 64x256+256,
  // output 256x30+30.
  const std::size_t hand = 30 * 32 + 4 * 256 * (32 + 256 + 1) + (64 * 256 + 256) + (256 * 30 + 30);
  EXPECT_EQ(hand, 321246u);
  EXPECT_EQ(m.params().scalar_count(), hand);
  EXPECT_EQ(expected_parameter_count(c), hand);
}

TEST(Build, ParameterCountIsPureFunctionOfConfig) {
  for (Architecture a : all_architectures()) {
    const ModelConfig c = small_config(a);
    EXPECT_EQ(build(c, 1).params().scalar_count(), expected_parameter_count(c)) << architecture_name(a);
    EXPECT_EQ(build(c, 2).params().scalar_count(), expected_parameter_count(c)) << architecture_name(a);
  }
  // Clarity differs from contexta only through the feature width.
  ModelConfig ctx = ModelConfig::make(Architecture::Contexta, 30, 64);
  ModelConfig cla = ModelConfig::make(Architecture::Clarity, 30, 64);
  EXPECT_EQ(expected_parameter_count(ctx), expected_parameter_count(cla));
  cla.feature_dim = 128;
  EXPECT_EQ(expected_parameter_count(cla) - expected_parameter_count(ctx), 64u * 256u);
}

TEST(Build, SameSeedSameParameters) {
  for (Architecture a : all_architectures()) {
    const CaptionModel x = build(small_config(a), 5);
    const CaptionModel y = build(small_config(a), 5);
    const CaptionModel z = build(small_config(a), 6);
    EXPECT_EQ(snapshot_params(x.params()), snapshot_params(y.params()));
    EXPECT_NE(snapshot_params(x.params()), snapshot_params(z.params()));
  }
}

TEST(Build, ParameterNamesUniqueAndStable) {
  for (Architecture a : all_architectures()) {
    const CaptionModel m = build(small_config(a), 0);
    std::set<std::string> names;
    for (const auto& [name, t] : m.params().entries()) EXPECT_TRUE(names.insert(name).second) << name;
    const CaptionModel other = build(small_config(a), 9);
    ASSERT_EQ(other.params().entries().size(), m.params().entries().size());
    for (std::size_t i = 0; i < m.params().entries().size(); ++i) {
      EXPECT_EQ(other.params().entries()[i].first, m.params().entries()[i].first);
    }
    EXPECT_TRUE(names.count("embedding"));
    EXPECT_TRUE(names.count("output.weight"));
    EXPECT_TRUE(names.count("decoder.W"));
    EXPECT_EQ(names.count("attention.v"), uses_attention(a) ? 1u : 0u);
    EXPECT_EQ(names.count("decoder_bwd.U"), bidirectional_decoder(a) ? 1u : 0u);
  }
}

TEST(Build, FocalisAttendsOverOneHundredPatches) {
  ModelConfig c = ModelConfig::make(Architecture::Focalis, 20, 6);
  c.grid_h = 10;
  c.grid_w = 10;
  c.decoder_units = 16;
  c.attn_dim = 8;
  c.encoder_units = 8;
  c.embed_dim = 8;
  const CaptionModel m = build(c, 0);
  const Features f = features_for(c, random_grid(10, 10, 6, 1));
  const EncodedImage enc = encode_image(m, f);
  EXPECT_EQ(enc.values.shape(), (Shape{100, 16}));
  const StepOutput o = decode_step(m, init_state(m, f), kStartId);
  EXPECT_EQ(o.attention.shape(), Shape{100});
  EXPECT_EQ(o.logits.shape(), Shape{20});
}

TEST(FeatureKinds, MismatchIsRejected) {
  const CaptionModel g = build(small_config(Architecture::Genesis), 0);
  const CaptionModel f = build(small_config(Architecture::Focalis), 0);
  const FeatureGrid grid = random_grid(2, 2, 3, 1);
  EXPECT_THROW(forward_train(g, grid, {1, 4, 2}), FeatureKindError);
  EXPECT_THROW(forward_train(f, to_vector(grid), {1, 4, 2}), FeatureKindError);
  EXPECT_THROW(forward_train(g, to_vector(random_grid(2, 2, 5, 1)), {1, 4, 2}), FeatureKindError);
  EXPECT_THROW(forward_train(f, random_grid(3, 2, 3, 1), {1, 4, 2}), FeatureKindError);
  EXPECT_NO_THROW(forward_train(f, grid, {1, 4, 2}));
}

TEST(ForwardTrain, CaptionContract) {
  const CaptionModel g = build(small_config(Architecture::Genesis), 0);
  const Features f = to_vector(random_grid(2, 2, 3, 1));
  EXPECT_THROW(forward_train(g, f, {1}), ContractError);
  EXPECT_THROW(forward_train(g, f, {4, 2}), ContractError);
  EXPECT_THROW(forward_train(g, f, {1, 99, 2}), IndexError);
}

TEST(DecodeStep, RejectsInvalidStateAndToken) {
  const CaptionModel g = build(small_config(Architecture::Genesis), 0);
  const CaptionModel f = build(small_config(Architecture::Focalis), 0);
  EXPECT_THROW(decode_step(g, DecodeState{}, kStartId), ContractError);
  const DecodeState fs = init_state(f, random_grid(2, 2, 3, 1));
  EXPECT_THROW(decode_step(g, fs, kStartId), ContractError);
  EXPECT_THROW(decode_step(f, fs, 7), IndexError);
  EXPECT_THROW(decode_step(f, fs, -1), IndexError);
}

TEST_P(PerArchitecture, UntrainedLossNearLogV) {
  ModelConfig c = ModelConfig::make(GetParam(), 30, 16);
  c.decoder_units = 32;
  c.attn_dim = 16;
  c.grid_h = 3;
  c.grid_w = 3;
  const CaptionModel m = build(c, 3);
  const Features f = features_for(c, random_grid(3, 3, 16, 4));
  const double loss = forward_train(m, f, {1, 7, 9, 12, 2}).item();
  EXPECT_NEAR(loss, std::log(30.0), 0.15 * std::log(30.0));
}

TEST_P(PerArchitecture, OverfitsOneExample) {
  ModelConfig c = small_config(GetParam());
  c.decoder_units = 12;
  CaptionModel m = build(c, 1);
  const Features f = features_for(c, random_grid(2, 2, 3, 2));
  const std::vector<int> caption = {1, 4, 5, 6, 2};
  AdamState adam = AdamState::for_params(m.params());
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 50; ++step) {
    m.params().zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = forward_train(m, f, caption);
    if (step == 0) first = loss.item();
    last = loss.item();
    tape.backward(loss);
    adam_update(m.params(), adam, 0.05);
  }
  EXPECT_LT(last, 0.5 * first) << first << " -> " << last;
}

TEST_P(PerArchitecture, FullGraphGradCheck) {
  const ModelConfig c = small_config(GetParam());
  const CaptionModel m = build(c, 11);
  const Features f = features_for(c, random_grid(2, 2, 3, 12));
  const auto report = grad_check([&] { return forward_train(m, f, {1, 5, 2}); }, m.params().entries());
  EXPECT_TRUE(report.passed) << report.summary();
}

TEST_P(PerArchitecture, StepwiseMatchesTeacherForced) {
  const ModelConfig c = small_config(GetParam());
  const CaptionModel m = build(c, 21);
  const Features f = features_for(c, random_grid(2, 2, 3, 22));
  const std::vector<int> caption = {1, 4, 6, 5, 2};
  const auto tf = teacher_forced_logits(m, encode_image(m, f), caption);
  const auto sw = stepwise_logits(m, f, caption);
  ASSERT_EQ(tf.size(), 4u);
  ASSERT_EQ(sw.size(), 4u);
  for (std::size_t t = 0; t < tf.size(); ++t) {
    ASSERT_EQ(tf[t].shape(), Shape{7});
    EXPECT_LE(max_abs_diff(oracle::values(tf[t]), sw[t]), 1e-9) << "position " << t;
  }
}

TEST_P(PerArchitecture, ForwardTrainIsMeanOfPositionLosses) {
  const ModelConfig c = small_config(GetParam());
  const CaptionModel m = build(c, 31);
  const Features f = features_for(c, random_grid(2, 2, 3, 32));
  const std::vector<int> caption = {1, 3, 6, 2};
  const auto tf = teacher_forced_logits(m, encode_image(m, f), caption);
  double total = 0.0;
  for (std::size_t t = 0; t < tf.size(); ++t) {
    // Smoothed cross-entropy from plain log-sum-exp.
    const auto z = oracle::values(tf[t]);
    const double mx = *std::max_element(z.begin(), z.end());
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - mx);
    lse = mx + std::log(lse);
    double ce = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double target = (k == static_cast<std::size_t>(caption[t + 1]) ? 0.9 : 0.0) + 0.1 / 7.0;
      ce -= target * (z[k] - lse);
    }
    total += ce;
  }
  EXPECT_NEAR(forward_train(m, f, caption, 0.1).item(), total / 3.0, 1e-12);
}

TEST_P(PerArchitecture, FirstStepYieldsVLogits) {
  const ModelConfig c = small_config(GetParam());
  const CaptionModel m = build(c, 0);
  const StepOutput o = decode_step(m, init_state(m, features_for(c, random_grid(2, 2, 3, 1))), kStartId);
  EXPECT_EQ(o.logits.shape(), Shape{7});
  if (uses_attention(GetParam())) {
    double s = 0.0;
    for (double a : o.attention.data()) s += a;
    EXPECT_NEAR(s, 1.0, 1e-12);
  } else {
    EXPECT_FALSE(o.attention.defined());
  }
}

TEST_P(PerArchitecture, SpatialPermutationSensitivity) {
  ModelConfig c = small_config(GetParam());
  c.grid_h = 3;
  c.grid_w = 3;
  c.decoder_units = 8;
  const CaptionModel m = build(c, 41);
  const FeatureGrid grid = random_grid(3, 3, 3, 42, 4.0f);
  const std::vector<int> caption = {1, 4, 5, 2};
  std::mt19937_64 rng(43);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    FeatureGrid p = grid;
    for (std::size_t cell = 0; cell < 9; ++cell) {
      for (std::size_t ch = 0; ch < 3; ++ch) p.data[cell * 3 + ch] = grid.data[perm[cell] * 3 + ch];
    }
    const auto a = teacher_forced_logits(m, encode_image(m, features_for(c, grid)), caption);
    const auto b = teacher_forced_logits(m, encode_image(m, features_for(c, p)), caption);
    for (std::size_t t = 0; t < a.size(); ++t) worst = std::max(worst, max_abs_diff(oracle::values(a[t]), oracle::values(b[t])));
    const double la = forward_train(m, features_for(c, grid), caption).item();
    const double lb = forward_train(m, features_for(c, p), caption).item();
    if (!uses_attention(GetParam())) EXPECT_NEAR(la, lb, 1e-9);
  }
  if (uses_attention(GetParam())) {
    EXPECT_GT(worst, 1e-3);
  } else {
    EXPECT_LE(worst, 1e-9);
  }
}

TEST_P(PerArchitecture, ConcurrentDecodeSessionsAgree) {
  const ModelConfig c = small_config(GetParam());
  const CaptionModel m = build(c, 51);
  const Features f = features_for(c, random_grid(2, 2, 3, 52));
  const std::vector<int> caption = {1, 4, 6, 5, 4, 2};
  const auto reference = stepwise_logits(m, f, caption);
  std::vector<std::vector<std::vector<double>>> results(4);
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < results.size(); ++k) {
    threads.emplace_back([&, k] { results[k] = stepwise_logits(m, f, caption); });
  }
  for (auto& t : threads) t.join();
  for (const auto& r : results) EXPECT_EQ(r, reference);
}

INSTANTIATE_TEST_SUITE_P(All, PerArchitecture,
                         ::testing::Values(Architecture::Genesis, Architecture::Contexta, Architecture::Clarity,
                                           Architecture::Focalis),
                         arch_label);

TEST(BatchLoss, AllPadRowDoesNotChangeTheLoss) {
  const ModelConfig c = small_config(Architecture::Clarity);
  const CaptionModel m = build(c, 61);
  const std::vector<EncodedImage> images = {encode_image(m, features_for(c, random_grid(2, 2, 3, 62))),
                                            encode_image(m, features_for(c, random_grid(2, 2, 3, 63)))};
  const Batch plain = batch({{1, 4, 5, 2}, {1, 6, 2}}, 4);
  Batch padded = batch({{1, 4, 5, 2}, {1, 6, 2}, {}}, 4);
  const double a = batch_loss(m, images, {0, 1}, plain, 0.1).item();
  const double b = batch_loss(m, images, {0, 1, 0}, padded, 0.1).item();
  EXPECT_EQ(a, b);
  // Token mean: 3 predictions from row 0 and 2 from row 1.
  const auto l0 = forward_train(m, features_for(c, random_grid(2, 2, 3, 62)), {1, 4, 5, 2}).item();
  const auto l1 = forward_train(m, features_for(c, random_grid(2, 2, 3, 63)), {1, 6, 2}).item();
  EXPECT_NEAR(a, (3.0 * l0 + 2.0 * l1) / 5.0, 1e-12);
}
