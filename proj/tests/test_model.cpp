#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "diffwave/model.hpp"

using namespace diffwave;

namespace {

DiffWaveConfig small(Conditioning c = Conditioning::None) {
  DiffWaveConfig cfg;
  cfg.n_layers = 4;
  cfg.residual_channels = 8;
  cfg.dilation_cycle_length = 2;
  cfg.T = 20;
  cfg.conditioning = c;
  cfg.mel_bands = 5;
  cfg.label_count = 3;
  cfg.d_label = 16;
  return cfg;
}

Tensor<double> randn(Shape s, std::uint64_t seed) {
  Tensor<double> t(std::move(s));
  Rng rng(seed);
  rng.fill_normal(t.span());
  return t;
}

// Replaces the zero output head so the network output depends on its input.
void randomize_head(DiffWave<double>& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& e : m.params().entries())
    if (e.name.rfind("head.out", 0) == 0)
      for (auto& v : e.value.vec()) v = rng.normal();
}

}  // namespace

TEST(StepEmbedding, Values) {
  const auto e0 = step_embedding(0.0);
  for (std::size_t j = 0; j < 64; ++j) {
    EXPECT_EQ(e0[j], 0.0);
    EXPECT_EQ(e0[64 + j], 1.0);
  }
  const auto e1 = step_embedding(1.0);
  EXPECT_NEAR(e1[0], 0.84147098480789651, 1e-15);
  EXPECT_NEAR(e1[63], std::sin(1e4), 1e-12);
  for (double v : step_embedding(2.533)) EXPECT_TRUE(std::isfinite(v));
}

TEST(ReceptiveField, Values) {
  DiffWaveConfig cfg;
  EXPECT_EQ(receptive_field(cfg), 6139u);
  cfg.n_layers = 1;
  cfg.dilation_cycle_length = 1;
  EXPECT_EQ(receptive_field(cfg), 3u);
  cfg.n_layers = 36;
  cfg.dilation_cycle_length = 12;
  EXPECT_EQ(receptive_field(cfg), 24571u);
}

TEST(Config, Validation) {
  auto cfg = small();
  cfg.kernel_size = 2;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = small();
  cfg.n_layers = 5;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_EQ(small().dilation(3), 2u);
  EXPECT_THROW(conditioning_from_string("text"), Error);
  EXPECT_EQ(conditioning_from_string(to_string(Conditioning::Mel)), Conditioning::Mel);
}

TEST(ParameterCount, MatchesPublishedBaseModel) {
  DiffWaveConfig cfg;
  cfg.conditioning = Conditioning::Mel;
  const DiffWave<float> m(cfg, 0);
  EXPECT_EQ(m.num_params(), 2619971u);
  EXPECT_NEAR(static_cast<double>(m.num_params()), 2.64e6, 0.05 * 2.64e6);
  EXPECT_EQ(DiffWave<float>(cfg, 1).num_params(), m.num_params());
}

TEST(ParameterCount, SharedStepMlpIndependentOfDepth) {
  auto a = small(), b = small();
  b.n_layers = 8;
  DiffWave<double> ma(a), mb(b);
  const auto shared = [](DiffWave<double>& m) {
    std::size_t n = 0;
    for (const auto& e : m.params().entries())
      if (e.name.rfind("step.", 0) == 0) n += e.value.size();
    return n;
  };
  EXPECT_EQ(shared(ma), shared(mb));
  EXPECT_EQ(shared(ma), 128u * 512 + 512 + 512u * 512 + 512);
  const std::size_t per_layer = ma.num_params() - shared(ma);
  EXPECT_GT(mb.num_params() - shared(mb), per_layer);
}

TEST(Forward, ZeroHeadGivesZeroOutput) {
  DiffWave<double> m(small(), 1);
  const auto y = m.predict(randn({2, 1, 40}, 2), 7.0);
  ASSERT_EQ(y.shape(), (Shape{2, 1, 40}));
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, ShapesAndFractionalSteps) {
  for (auto c : {Conditioning::None, Conditioning::Mel, Conditioning::Label}) {
    DiffWave<double> m(small(c), 1);
    randomize_head(m, 3);
    const auto x = randn({2, 1, 256}, 4);
    const auto mel = randn({2, 5, 1}, 5);
    Conditioner<double> cond;
    if (c == Conditioning::Mel) cond.mel = &mel;
    if (c == Conditioning::Label) cond.labels = {0, 2};
    const auto y = m.predict(x, 2.533, cond);
    EXPECT_EQ(y.shape(), x.shape());
    for (double v : y.vec()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Forward, ConditionerMismatchesAreErrors) {
  DiffWave<double> none(small()), mel(small(Conditioning::Mel)), label(small(Conditioning::Label));
  const auto x = randn({1, 1, 300}, 1);
  const auto m1 = randn({1, 5, 1}, 2);
  Conditioner<double> with_mel;
  with_mel.mel = &m1;
  EXPECT_THROW(none.predict(x, 1.0, with_mel), Error);
  EXPECT_THROW(mel.predict(x, 1.0), Error);
  EXPECT_THROW(mel.predict(x, 1.0, with_mel), Error);  // 256 < 300 samples
  const auto wrong_bands = randn({1, 4, 2}, 3);
  with_mel.mel = &wrong_bands;
  EXPECT_THROW(mel.predict(x, 1.0, with_mel), Error);
  Conditioner<double> lab;
  lab.labels = {3};
  EXPECT_THROW(label.predict(x, 1.0, lab), Error);
  EXPECT_THROW(label.predict(x, 1.0), Error);
  EXPECT_THROW(none.predict(randn({1, 2, 8}, 1), 1.0), Error);
}

TEST(StepFeatures, ZeroWeightsGiveZeroBias) {
  DiffWave<double> m(small(), 2);
  for (std::size_t i = 0; i < 4; ++i) m.params().value(DiffWave<double>::layer_name(i, "step.weight")).fill(0.0);
  Tape<double> tape(false);
  for (const auto& f : m.step_features(tape, {3.0, 11.5}))
    for (double v : f.value().vec()) EXPECT_EQ(v, 0.0);
}

TEST(StepFeatures, DistinctStepsGiveDistinctFeatures) {
  DiffWave<double> m(small(), 2);
  Rng rng(9);
  for (int k = 0; k < 100; ++k) {
    const double t1 = rng.uniform() * 50.0, t2 = rng.uniform() * 50.0;
    Tape<double> tape(false);
    const auto f = m.step_features(tape, {t1, t2});
    const auto& v = f[0].value();
    double diff = 0.0;
    for (std::size_t c = 0; c < 8; ++c) diff = std::max(diff, std::abs(v.at(0, c) - v.at(1, c)));
    EXPECT_GT(diff, 0.0) << t1 << " " << t2;
  }
}

TEST(Upsampler, LengthZeroAndSlope) {
  DiffWave<double> m(small(Conditioning::Mel), 3);
  Tape<double> tape(false);
  const auto up = m.upsample_mel(tape.constant(randn({2, 5, 3}, 1)));
  EXPECT_EQ(up.shape(), (Shape{2, 5, 768}));
  for (double v : m.upsample_mel(tape.constant(Tensor<double>({1, 5, 2}))).value().vec()) EXPECT_EQ(v, 0.0);

  // A single negative bias on the last layer exposes the slope.
  m.params().value("mel.up1.bias")[0] = 0.0;
  m.params().value("mel.up2.weight").fill(0.0);
  m.params().value("mel.up2.bias")[0] = -2.5;
  for (double v : m.upsample_mel(tape.constant(randn({1, 5, 1}, 2))).value().vec()) EXPECT_DOUBLE_EQ(v, 0.4 * -2.5);
}

TEST(LabelEmbedding, LookupProperties) {
  DiffWave<double> m(small(Conditioning::Label), 4);
  EXPECT_EQ(m.params().value("label.embedding").shape(), (Shape{3, 16}));
  Tape<double> tape(false);
  const auto e = m.embed_label(tape, {1, 1, 2}).value();
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(e.at(0, j), e.at(1, j));
  bool differs = false;
  for (std::size_t j = 0; j < 16; ++j) differs |= e.at(0, j) != e.at(2, j);
  EXPECT_TRUE(differs);
  EXPECT_THROW(m.embed_label(tape, {-1}), Error);
  EXPECT_THROW(m.embed_label(tape, {3}), Error);
}

TEST(Forward, ZeroedConditionerProjectionMatchesUnconditional) {
  for (auto c : {Conditioning::Mel, Conditioning::Label}) {
    DiffWave<double> cond_model(small(c), 5), plain(small(), 0);
    randomize_head(cond_model, 6);
    for (auto& e : plain.params().entries()) e.value = cond_model.params().value(e.name);
    for (std::size_t i = 0; i < 4; ++i) {
      cond_model.params().value(DiffWave<double>::layer_name(i, "cond.weight")).fill(0.0);
      cond_model.params().value(DiffWave<double>::layer_name(i, "cond.bias")).fill(0.0);
    }
    const auto x = randn({2, 1, 64}, 7);
    const auto mel = randn({2, 5, 1}, 8);
    Conditioner<double> cond;
    if (c == Conditioning::Mel) cond.mel = &mel;
    else cond.labels = {0, 1};
    EXPECT_EQ(cond_model.predict(x, 4.0, cond), plain.predict(x, 4.0));
  }
}

TEST(Forward, BidirectionalReceptiveField) {
  auto cfg = small();
  DiffWave<double> m(cfg, 7);
  randomize_head(m, 8);
  const std::size_t L = 64, p = 30;
  const std::size_t half = (receptive_field(cfg) - 1) / 2;  // 6
  auto x = randn({1, 1, L}, 9);
  const auto y0 = m.predict(x, 5.0);
  x[p] += 0.5;
  const auto y1 = m.predict(x, 5.0);
  std::set<std::size_t> changed;
  for (std::size_t i = 0; i < L; ++i)
    if (y0[i] != y1[i]) changed.insert(i);
  ASSERT_FALSE(changed.empty());
  EXPECT_EQ(*changed.begin(), p - half);
  EXPECT_EQ(*changed.rbegin(), p + half);
}

TEST(Forward, BatchElementsAreIndependent) {
  DiffWave<double> m(small(), 1);
  randomize_head(m, 2);
  const auto x = randn({2, 1, 32}, 3);
  const auto both = m.predict(x, 3.0);
  Tensor<double> first({1, 1, 32}, std::vector<double>(x.vec().begin(), x.vec().begin() + 32));
  const auto one = m.predict(first, 3.0);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_NEAR(both[i], one[i], 1e-13);
}
