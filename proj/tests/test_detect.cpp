// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "utal/detect.hpp"

using utal::Detection;
using utal::GroundTruth;
using utal::HeadOutput;
using utal::Proposal;

namespace {

Detection det(double s, double e, double score, const char* vid = "v", int cls = 0) {
  return {vid, s, e, cls, score};
}

std::vector<Detection> random_dets(utal::Rng& rng, std::size_t n, int classes, int videos) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = rng.uniform(0, 40);
    out.push_back({"v" + std::to_string(rng.below(static_cast<std::uint64_t>(videos))), s,
                   s + rng.uniform(1, 15), static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))),
                   // Coarse scores so ties occur.
                   std::round(rng.uniform(0, 1) * 20) / 20});
  }
  return out;
}

utal::HeadFn constant_head(int C, double actioness, double ys, double ye) {
  return [=](const utal::Video&, std::span<const Proposal> props) {
    std::vector<HeadOutput> outs(props.size());
    for (auto& o : outs) {
      o.actioness = actioness;
      o.logits.assign(static_cast<std::size_t>(C), 0.0);
      o.offsets.assign(static_cast<std::size_t>(2 * C), 0.0);
      for (int c = 0; c < C; ++c) {
        o.offsets[static_cast<std::size_t>(2 * c)] = ys;
        o.offsets[static_cast<std::size_t>(2 * c + 1)] = ye;
      }
    }
    return outs;
  };
}

utal::Video video_with(int T, std::vector<utal::ActionAnnotation> anns) {
  utal::Video v;
  v.sequence.video_id = "vid";
  v.sequence.features = utal::Matrix<float>::Zero(T, 8);
  v.annotations = std::move(anns);
  return v;
}

}  // namespace

// --- apply_offsets / cascade ------------------------------------------------------

TEST(ApplyOffsets, Examples) {
  const Proposal p{10, 20, 1};
  const auto same = utal::apply_offsets(p, 0.0, 0.0, 100.0);
  EXPECT_EQ(same.start, 10.0);
  EXPECT_EQ(same.end, 20.0);
  const auto moved = utal::apply_offsets(p, 0.2, 0.2, 100.0);
  EXPECT_NEAR(moved.start, 12.0, 1e-12);
  EXPECT_NEAR(moved.end, 22.0, 1e-12);
  EXPECT_EQ(moved.scale_id, 1);
}

TEST(ApplyOffsets, ClampsAndRepairsDegenerateResults) {
  const auto clamped = utal::apply_offsets({0, 10, 0}, -0.5, 0.5, 12.0);
  EXPECT_EQ(clamped.start, 0.0);
  EXPECT_EQ(clamped.end, 12.0);
  bool degenerate = false;
  const auto inverted = utal::apply_offsets({10, 20, 0}, 0.8, -0.8, 100.0, &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_NEAR(inverted.length(), 1.0, 1e-12);
  EXPECT_NEAR(0.5 * (inverted.start + inverted.end), 15.0, 1e-12);
}

TEST(Cascade, ZeroOffsetsAreAFixedPoint) {
  const auto v = video_with(50, {});
  const Proposal p{7, 23, 0};
  for (int steps : {1, 2, 5}) {
    const auto r = utal::refine_cascade(constant_head(3, 0.7, 0.0, 0.0), v, p, steps);
    EXPECT_EQ(r.proposal.start, 7.0);
    EXPECT_EQ(r.proposal.end, 23.0);
  }
}

TEST(Cascade, OracleReachesGroundTruthInOneStep) {
  const auto v = video_with(60, {{2, 12.5, 31.0}});
  const Proposal p{8, 24, 0};
  const auto r = utal::refine_cascade(utal::oracle_head(3), v, p, 1);
  EXPECT_NEAR(r.proposal.start, 12.5, 1e-12);
  EXPECT_NEAR(r.proposal.end, 31.0, 1e-12);
}

TEST(Cascade, TwoStepsEqualOneStepTwice) {
  // Offsets depend on pooled features, so re-pooling matters.
  utal::TrainConfig c;
  c.hidden = 16;
  c.k = 2;
  c.loss_mode = utal::LossMode::l1;
  c.offset_scale = 1.0;
  utal::Model<double> m(c, 8, 3);
  m.layers()[2].weights *= 5.0;
  utal::Video v = video_with(80, {});
  utal::Rng rng(3);
  for (Eigen::Index i = 0; i < v.sequence.features.size(); ++i)
    v.sequence.features(i) = static_cast<float>(rng.normal());
  const auto head = utal::model_head(m);
  const Proposal p{20, 52, 2};
  const auto two = utal::refine_cascade(head, v, p, 2);
  const auto one = utal::refine_cascade(head, v, p, 1);
  const auto again = utal::refine_cascade(head, v, one.proposal, 1);
  EXPECT_NE(one.proposal.start, p.start);
  EXPECT_EQ(two.proposal.start, again.proposal.start);
  EXPECT_EQ(two.proposal.end, again.proposal.end);
  EXPECT_EQ(two.output.logits, again.output.logits);
}

TEST(Cascade, RejectsZeroSteps) {
  const auto v = video_with(10, {});
  EXPECT_THROW(utal::refine_cascade(constant_head(2, 0.5, 0, 0), v, Proposal{0, 5, 0}, 0), utal::ConfigError);
}

// --- fusion -----------------------------------------------------------------------

TEST(FuseScores, Examples) {
  HeadOutput o;
  o.actioness = 0.0;
  o.logits = {1.0, -2.0, 0.5};
  for (double s : utal::fuse_scores(o)) EXPECT_EQ(s, 0.0);

  o.actioness = 1.0;
  o.logits.assign(5, 0.3);
  for (double s : utal::fuse_scores(o)) EXPECT_NEAR(s, 0.2, 1e-15);

  o.actioness = 0.37;
  o.logits = {2.0, -1.0, 0.4, 0.0};
  double sum = 0.0;
  for (double s : utal::fuse_scores(o)) sum += s;
  EXPECT_NEAR(sum, 0.37, 1e-9);
}

// --- NMS --------------------------------------------------------------------------

TEST(Nms, Examples) {
  // [0, 10] vs [2, 12]: tIoU 8/12 > 0.5.
  const auto kept = utal::nms({det(2, 12, 0.8), det(0, 10, 0.9)}, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].score, 0.9);

  const auto all = utal::nms({det(0, 5, 0.2), det(5, 9, 0.9), det(20, 30, 0.5)}, 0.5);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0].score, 0.9);
  EXPECT_EQ(all[1].score, 0.5);
  EXPECT_EQ(all[2].score, 0.2);
}

TEST(Nms, MatchesGreedyOracle) {
  utal::Rng rng(10);
  for (int trial = 0; trial < 300; ++trial) {
    const auto dets = random_dets(rng, 1 + rng.below(8), 1, 1);
    const double thr = rng.uniform(0.2, 0.8);
    const auto got = utal::nms(dets, thr);
    const auto want = oracle::nms(dets, thr);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].start, want[i].start);
      EXPECT_EQ(got[i].score, want[i].score);
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (i > 0) {
        EXPECT_GE(got[i - 1].score, got[i].score);
      }
      for (std::size_t j = 0; j < i; ++j) EXPECT_LT(utal::tiou(got[i].interval(), got[j].interval()), thr);
    }
  }
}

// --- AP ---------------------------------------------------------------------------

TEST(AveragePrecision, Examples) {
  const std::vector<GroundTruth> one = {{"v", {0, 10.0, 20.0}}};
  EXPECT_EQ(utal::average_precision({det(10, 20, 0.9)}, one, 0.5), 1.0);
  EXPECT_EQ(utal::average_precision({det(40, 50, 0.9), det(0, 5, 0.2)}, one, 0.5), 0.0);
  EXPECT_TRUE(std::isnan(utal::average_precision({det(0, 1, 0.5)}, {}, 0.5)));
}

TEST(AveragePrecision, FalsePositiveThenTwoHits) {
  const std::vector<GroundTruth> gts = {{"v", {0, 0.0, 10.0}}, {"v", {0, 20.0, 30.0}}};
  const std::vector<Detection> dets = {det(50, 60, 0.9), det(0, 10, 0.8), det(20, 30, 0.7)};
  // Precision 1/2 at recall 1/2 and 2/3 at recall 1; the envelope gives
  // 2/3 to both steps.
  EXPECT_NEAR(utal::average_precision(dets, gts, 0.5), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(oracle::average_precision(dets, gts, 0.5), 2.0 / 3.0, 1e-15);
}

TEST(AveragePrecision, DuplicateHitsCountOnce) {
  const std::vector<GroundTruth> gts = {{"v", {0, 0.0, 10.0}}};
  const std::vector<Detection> dets = {det(0, 10, 0.9), det(0, 10, 0.8)};
  EXPECT_EQ(utal::average_precision(dets, gts, 0.5), 1.0);
  const std::vector<Detection> flipped = {det(0, 10, 0.9, "w"), det(0, 10, 0.8)};
  EXPECT_EQ(utal::average_precision(flipped, gts, 0.5), 0.5);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  utal::Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<GroundTruth> gts;
    const std::size_t ng = 1 + rng.below(5);
    for (std::size_t g = 0; g < ng; ++g) {
      const double s = rng.uniform(0, 40);
      gts.push_back({"v" + std::to_string(rng.below(2)), {0, s, s + rng.uniform(2, 12)}});
    }
    auto dets = random_dets(rng, rng.below(11), 1, 2);
    // Half the detections jitter a ground truth so there are true positives.
    for (std::size_t i = 0; i < dets.size(); i += 2) {
      const auto& g = gts[rng.below(gts.size())];
      dets[i].video_id = g.video_id;
      dets[i].start = g.annotation.start + rng.uniform(-1.5, 1.5);
      dets[i].end = g.annotation.end + rng.uniform(-1.5, 1.5);
    }
    for (double thr : {0.3, 0.5, 0.7})
      EXPECT_NEAR(utal::average_precision(dets, gts, thr), oracle::average_precision(dets, gts, thr), 1e-12);
  }
}

TEST(AveragePrecision, RankingOnlyAndMonotoneInThreshold) {
  utal::Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<GroundTruth> gts;
    for (int g = 0; g < 3; ++g) {
      const double s = rng.uniform(0, 40);
      gts.push_back({"v0", {0, s, s + rng.uniform(2, 12)}});
    }
    auto dets = random_dets(rng, 8, 1, 1);
    for (std::size_t i = 0; i < dets.size(); ++i) dets[i].score += 1e-3 * static_cast<double>(i);  // no ties
    for (std::size_t i = 0; i < 4; ++i) {
      dets[i].start = gts[i % 3].annotation.start + rng.uniform(-2, 2);
      dets[i].end = gts[i % 3].annotation.end + rng.uniform(-2, 2);
    }
    auto squashed = dets;
    for (auto& d : squashed) d.score = std::tanh(3.0 * d.score) * 0.5 + 0.1;
    double prev = 1.0;
    for (double thr : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const double ap = utal::average_precision(dets, gts, thr);
      EXPECT_EQ(ap, utal::average_precision(squashed, gts, thr));
      EXPECT_LE(ap, prev + 1e-15);
      prev = ap;
    }
  }
}

// --- evaluate ---------------------------------------------------------------------

TEST(Evaluate, OracleScoresPerfectly) {
  utal::SyntheticConfig dc;
  dc.num_videos = 20;
  dc.d_feat = 8;
  const auto ds = utal::generate_synthetic_dataset(dc, 4);
  const auto rep = utal::evaluate(utal::oracle_head(ds.num_classes), ds, utal::DetectConfig{});
  ASSERT_EQ(rep.map.size(), 5u);
  for (double m : rep.map) EXPECT_EQ(m, 1.0);
  EXPECT_FALSE(rep.empty_detections);
}

TEST(Evaluate, UntrainedModelScoresLow) {
  utal::SyntheticConfig dc;
  dc.num_videos = 30;
  const auto ds = utal::generate_synthetic_dataset(dc, 5);
  utal::TrainConfig tc;
  tc.loss_mode = utal::LossMode::l1;
  utal::Model<float> m(tc, ds.d_feat, ds.num_classes);
  for (auto& l : m.layers()) {
    l.weights.setZero();
    l.biases.setZero();
  }
  const auto rep = utal::evaluate(utal::model_head(m), ds, utal::DetectConfig{});
  EXPECT_LT(rep.map_at(0.5), 0.2);
}

TEST(Evaluate, EmptyDetectionsFlagged) {
  utal::SyntheticConfig dc;
  dc.num_videos = 3;
  dc.d_feat = 8;
  const auto ds = utal::generate_synthetic_dataset(dc, 6);
  const auto rep = utal::evaluate(constant_head(ds.num_classes, 0.0, 0, 0), ds, utal::DetectConfig{});
  EXPECT_TRUE(rep.empty_detections);
  for (double m : rep.map) EXPECT_EQ(m, 0.0);
}

TEST(Evaluate, IndependentOfVideoOrder) {
  utal::SyntheticConfig dc;
  dc.num_videos = 12;
  dc.d_feat = 8;
  auto ds = utal::generate_synthetic_dataset(dc, 7);
  // A slightly wrong oracle so the APs are not all 1.
  const auto base = utal::oracle_head(ds.num_classes);
  utal::HeadFn head = [&](const utal::Video& v, std::span<const Proposal> props) {
    auto outs = base(v, props);
    for (std::size_t i = 0; i < outs.size(); ++i) {
      outs[i].actioness *= 0.5 + 0.5 * std::sin(props[i].start + props[i].end);
      for (double& o : outs[i].offsets) o *= 0.4;
    }
    return outs;
  };
  utal::DetectConfig cfg;
  cfg.cascade_steps = 1;
  std::vector<Detection> d1, d2;
  const auto r1 = utal::evaluate(head, ds, cfg, &d1);
  std::reverse(ds.videos.begin(), ds.videos.end());
  const auto r2 = utal::evaluate(head, ds, cfg, &d2);
  EXPECT_EQ(r1.map, r2.map);
  ASSERT_EQ(d1.size(), d2.size());
  for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d1[i].start, d2[i].start);
  EXPECT_LT(r1.map_at(0.7), 1.0);
}
