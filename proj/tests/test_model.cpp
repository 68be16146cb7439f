// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "utal/data.hpp"
#include "utal/model.hpp"

namespace fs = std::filesystem;
using utal::LossMode;
using utal::Model;
using utal::TrainConfig;

namespace {

TrainConfig small_config(LossMode mode) {
  TrainConfig c;
  c.loss_mode = mode;
  c.hidden = 12;
  c.k = 2;
  c.seed = 3;
  return c;
}

// Owns the features that the samples view.
struct Toy {
  std::vector<std::vector<float>> xs;
  std::vector<utal::Sample> samples;
};

Toy random_toy(std::size_t n, int width, int classes, std::uint64_t seed) {
  utal::Rng rng(seed);
  Toy t;
  t.xs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.xs[i].resize(static_cast<std::size_t>(width));
    for (float& v : t.xs[i]) v = static_cast<float>(rng.normal());
  }
  for (std::size_t i = 0; i < n; ++i) {
    utal::Sample s;
    s.x = t.xs[i];
    s.positive = i % 2 == 0;
    if (s.positive) {
      s.class_id = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      s.target = {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    }
    t.samples.push_back(s);
  }
  return t;
}

}  // namespace

TEST(Model, ParameterCount) {
  TrainConfig c;  // kl_l1, k = 4, hidden = 1000
  const Model<float> m(c, 64, 5);
  EXPECT_EQ(m.parameter_count(), 256u * 1000 + 1000 + 1000 * 1 + 1 + 1000 * 25 + 25);
  EXPECT_EQ(m.parameter_count(), 283026u);
  c.loss_mode = LossMode::l1;
  const Model<float> base(c, 64, 5);
  EXPECT_EQ(base.branch2_width(), 15);
  EXPECT_EQ(m.parameter_count() - base.parameter_count(), 1000u * 10 + 10);
  c.loss_mode = LossMode::kl_l1;
  c.pad_column = true;
  EXPECT_EQ(Model<float>(c, 64, 5).branch2_width(), 30);
}

TEST(Model, SameSeedSameParameters) {
  const TrainConfig c = small_config(LossMode::kl_l1);
  const Model<float> a(c, 8, 3), b(c, 8, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.layers()[i].weights, b.layers()[i].weights);
    EXPECT_EQ(a.layers()[i].biases, b.layers()[i].biases);
  }
}

TEST(Model, ZeroWeightsGiveNeutralOutputs) {
  Model<double> m(small_config(LossMode::kl_l1), 8, 4);
  for (auto& l : m.layers()) {
    l.weights.setZero();
    l.biases.setZero();
  }
  const std::vector<float> x(16, 0.7f);
  const auto o = m.forward(x);
  EXPECT_EQ(o.actioness, 0.5);
  for (double z : o.logits) EXPECT_EQ(z, 0.0);
  for (double v : o.offsets) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(o.per_class, 4);
  EXPECT_EQ(o.offsets.size(), 16u);
}

TEST(Model, DeterministicForwardAndShapeCheck) {
  const Model<float> m(small_config(LossMode::l1), 8, 3);
  utal::Rng rng(1);
  std::vector<float> x(16);
  for (float& v : x) v = static_cast<float>(rng.normal());
  const auto a = m.forward(x), b = m.forward(x);
  EXPECT_EQ(a.actioness, b.actioness);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.offsets, b.offsets);
  EXPECT_EQ(a.offsets.size(), 6u);
  const std::vector<float> wrong(15, 0.0f);
  EXPECT_THROW(m.forward(wrong), std::logic_error);
}

TEST(Model, AlphaIsClampedInOutputs) {
  Model<double> m(small_config(LossMode::kl_l1), 4, 2);
  m.layers()[2].biases.setConstant(50.0);
  const auto o = m.forward(std::vector<float>(8, 1.0f));
  EXPECT_EQ(o.start(0).alpha, utal::kAlphaMax);
  EXPECT_EQ(o.end(1).alpha, utal::kAlphaMax);
  EXPECT_EQ(o.start(0).mu, 50.0 + (m.layers()[2].weights.row(2) *
                                    utal::relu<double>(m.layers()[0].infer(utal::l2_normalize<double>(
                                        utal::Matrix<double>::Ones(1, 8)))).transpose())(0, 0));
}

// Total loss against central differences through the whole network, for
// every first-layer weight and a sample of the others.
TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  for (LossMode mode : {LossMode::l1, LossMode::kl_l1, LossMode::sampled_l1, LossMode::expected_l1}) {
    TrainConfig c = small_config(mode);
    c.offset_scale = 1.0;
    Model<double> m(c, 3, 3);
    for (auto& l : m.layers())
      for (Eigen::Index i = 0; i < l.biases.size(); ++i) l.biases(i) = 0.05 * static_cast<double>(i % 5);
    const Toy toy = random_toy(4, m.input_size(), 3, 17);
    const utal::Rng stream(99);
    auto grads = m.zero_grads();
    m.batch_loss(toy.samples, stream, &grads);

    const double h = 1e-6;
    int checked = 0;
    for (std::size_t li = 0; li < 3; ++li) {
      auto& W = m.layers()[li].weights;
      for (Eigen::Index idx = 0; idx < W.size(); ++idx) {
        if (li > 0 && idx % 7 != 0) continue;
        const double w0 = W(idx);
        W(idx) = w0 + h;
        const double fp = m.batch_loss(toy.samples, stream, nullptr).total;
        W(idx) = w0 - h;
        const double fm = m.batch_loss(toy.samples, stream, nullptr).total;
        W(idx) = w0;
        const double fd = (fp - fm) / (2 * h);
        const double an = grads[li].weights(idx);
        EXPECT_LE(std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-5}), 1e-3)
            << utal::to_string(mode) << " layer " << li << " index " << idx;
        ++checked;
      }
    }
    EXPECT_GT(checked, 30);
  }
}

TEST(Model, L1BaselineIgnoresAlphaColumns) {
  // In l1 mode branch 2 has only mean columns, so there is nothing to read.
  const Model<double> m(small_config(LossMode::l1), 3, 2);
  EXPECT_EQ(m.per_class(), 2);
  EXPECT_EQ(m.branch2_width(), 2 + 2 * 2);
  const auto o = m.forward(std::vector<float>(6, 0.3f));
  EXPECT_FALSE(o.uncertain());
  EXPECT_EQ(o.start(1).alpha, 0.0);
  EXPECT_EQ(o.end(1).alpha, 0.0);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  TrainConfig c = small_config(LossMode::kl_l1);
  c.lr = 0.0;
  c.epochs = 3;
  c.batch_size = 8;
  Model<float> m(c, 4, 3);
  const auto before = m.layers();
  const Toy toy = random_toy(30, m.input_size(), 3, 5);
  const auto curve = utal::train<float>(m, toy.samples);
  EXPECT_EQ(curve.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m.layers()[i].weights, before[i].weights);
    EXPECT_EQ(m.layers()[i].biases, before[i].biases);
  }
}

TEST(Train, ToySetLossHalvesByEpochThirty) {
  utal::SyntheticConfig dc;
  dc.num_videos = 4;
  dc.d_feat = 16;
  const auto ds = utal::generate_synthetic_dataset(dc, 21);
  const auto set = utal::build_training_set(ds, utal::LabelConfig{});
  auto all = utal::to_samples(set);
  // 50 proposals: up to 15 positives, the rest negatives.
  std::vector<utal::Sample> toy;
  std::size_t npos = 0;
  for (const auto& s : all)
    if (s.positive && npos < 15) {
      toy.push_back(s);
      ++npos;
    }
  for (const auto& s : all)
    if (!s.positive && toy.size() < 50) toy.push_back(s);
  ASSERT_EQ(toy.size(), 50u);
  ASSERT_GT(npos, 5u);

  TrainConfig c;
  c.loss_mode = LossMode::l1;
  c.epochs = 30;
  c.batch_size = 16;
  c.lr_drop_epoch = 0;
  Model<float> m(c, dc.d_feat, dc.num_classes);
  const auto curve = utal::train<float>(m, toy);
  ASSERT_EQ(curve.size(), 30u);
  EXPECT_LT(curve.back().total(), 0.5 * curve.front().total())
      << "epoch 1 " << curve.front().total() << " epoch 30 " << curve.back().total();
  EXPECT_TRUE(std::isnan(curve.back().mean_sigma_pos));
}

TEST(Train, BitDeterministic) {
  TrainConfig c = small_config(LossMode::sampled_l1);
  c.epochs = 4;
  c.batch_size = 7;
  const Toy toy = random_toy(40, 8, 3, 8);
  Model<float> a(c, 4, 3), b(c, 4, 3);
  const auto ca = utal::train<float>(a, toy.samples);
  const auto cb = utal::train<float>(b, toy.samples);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.layers()[i].weights, b.layers()[i].weights);
  for (std::size_t e = 0; e < ca.size(); ++e) {
    EXPECT_EQ(ca[e].total(), cb[e].total());
    EXPECT_EQ(ca[e].mean_sigma_pos, cb[e].mean_sigma_pos);
  }
  EXPECT_FALSE(std::isnan(ca.back().mean_sigma_pos));
}

TEST(Train, NoPositivesIsAnError) {
  Toy toy = random_toy(10, 8, 3, 1);
  for (auto& s : toy.samples) s.positive = false;
  Model<float> m(small_config(LossMode::l1), 4, 3);
  EXPECT_THROW(utal::train<float>(m, toy.samples), std::invalid_argument);
}

TEST(Train, NonFiniteLossAborts) {
  Toy toy = random_toy(10, 8, 3, 2);
  toy.xs[0][0] = std::nanf("");
  TrainConfig c = small_config(LossMode::kl_l1);
  c.epochs = 1;
  Model<float> m(c, 4, 3);
  try {
    utal::train<float>(m, toy.samples);
    FAIL() << "expected NumericError";
  } catch (const utal::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}

TEST(Train, LearningRateDropTakesEffect) {
  // With the drop at epoch 1 and factor 0.5 the run equals one at half the lr.
  TrainConfig c = small_config(LossMode::l1);
  c.epochs = 2;
  c.batch_size = 5;
  c.lr = 0.02;
  c.lr_drop_epoch = 1;
  c.lr_drop_factor = 0.5;
  TrainConfig d = c;
  d.lr = 0.01;
  d.lr_drop_epoch = 0;
  const Toy toy = random_toy(20, 8, 3, 4);
  Model<double> a(c, 4, 3), b(d, 4, 3);
  utal::train<double>(a, toy.samples);
  utal::train<double>(b, toy.samples);
  EXPECT_EQ(a.layers()[0].weights, b.layers()[0].weights);
}

TEST(Checkpoint, SaveLoadReproducesOutputs) {
  TrainConfig c = small_config(LossMode::kl_l1);
  c.epochs = 2;
  const Toy toy = random_toy(30, 8, 3, 6);
  Model<float> m(c, 4, 3);
  utal::train<float>(m, toy.samples);
  const fs::path path = fs::temp_directory_path() / "utal_test_model.utal";
  m.save(path, {{"note", "x"}});
  const auto back = Model<float>::load(path);
  EXPECT_EQ(back.num_classes(), 3);
  EXPECT_EQ(back.d_feat(), 4);
  EXPECT_EQ(back.config().loss_mode, LossMode::kl_l1);
  for (const auto& s : toy.samples) {
    const auto a = m.forward(s.x), b = back.forward(s.x);
    EXPECT_EQ(a.actioness, b.actioness);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.offsets, b.offsets);
  }
  fs::remove(path);
  fs::remove(Model<float>::sidecar_path(path));
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c;
  c.loss_mode = LossMode::expected_l1;
  c.condition_mode = utal::ConditionMode::paper;
  c.lr = 0.003;
  c.pad_column = true;
  const auto back = utal::train_config_from_json(utal::to_json(c));
  EXPECT_EQ(utal::to_json(back), utal::to_json(c));

  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(utal::validate(bad), utal::ConfigError);
  bad = {};
  bad.momentum = 1.0;
  EXPECT_THROW(utal::validate(bad), utal::ConfigError);
  EXPECT_THROW(utal::parse_loss_mode("l2"), std::invalid_argument);
}

TEST(Residuals, SigmaOnlyInUncertainModes) {
  const Toy toy = random_toy(12, 8, 3, 9);
  const Model<float> l1(small_config(LossMode::l1), 4, 3);
  const Model<float> kl(small_config(LossMode::kl_l1), 4, 3);
  const auto r1 = utal::positive_residuals<float>(l1, toy.samples);
  const auto r2 = utal::positive_residuals<float>(kl, toy.samples);
  ASSERT_EQ(r1.size(), 6u);
  ASSERT_EQ(r2.size(), 6u);
  EXPECT_TRUE(std::isnan(r1[0].sigma_start));
  EXPECT_GT(r2[0].sigma_start, 0.0);
}
