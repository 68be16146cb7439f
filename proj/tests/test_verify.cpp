// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "utal/verify.hpp"

namespace v = utal::verify;

TEST(VerifyExpectation, ClosedFormPassesEveryGridPoint) {
  const auto s = v::expectation_suite(v::expected_l1_value, 2024);
  EXPECT_EQ(s.checks.size(), 28u);
  for (const auto& c : s.checks) EXPECT_TRUE(c.pass) << c.name << " err " << c.error << " tol " << c.tolerance;
}

TEST(VerifyExpectation, PrintedFormFailsByTenTolerances) {
  const auto grid = v::expectation_grid(v::expected_l1_printed, 2024);
  double worst = 0.0;
  for (const auto& p : grid) worst = std::max(worst, p.error() / p.tolerance);
  EXPECT_GT(worst, 10.0);
  EXPECT_FALSE(v::expectation_suite(v::expected_l1_printed, 2024).passed());
}

TEST(VerifyExpectation, PrintedFormAtOneOne) {
  // erf(1/sqrt 2) + exp(-1)/sqrt(2 pi), evaluated independently of the library erf.
  const double printed = std::erf(1.0 / std::sqrt(2.0)) + std::exp(-1.0) / std::sqrt(2.0 * M_PI);
  EXPECT_NEAR(v::expected_l1_printed(1.0, 1.0), printed, 1e-9);
  // The true E|d + eps| at d = sigma = 1 is 2 phi(1) + 2 Phi(1) - 1.
  const double truth = 2.0 * std::exp(-0.5) / std::sqrt(2.0 * M_PI) + std::erf(1.0 / std::sqrt(2.0));
  EXPECT_NEAR(v::expected_l1_value(1.0, 1.0), truth, 1e-9);
  EXPECT_GT(std::fabs(printed - truth), 0.1);
}

TEST(VerifyGradients, SuitePasses) {
  const auto s = v::gradient_suite();
  EXPECT_GE(s.checks.size(), 8u);
  for (const auto& c : s.checks) EXPECT_TRUE(c.pass) << c.name << " err " << c.error << " tol " << c.tolerance;
}

TEST(VerifyKl, ArgminMatchesAbsoluteResidual) {
  for (double d : {0.3, 1.5, 2.0, 3.0, -2.5}) {
    // Independent dense scan of d^2/(2 s^2) + log s on a log grid.
    double best_s = 0.0, best_f = INFINITY;
    for (int i = 0; i <= 200000; ++i) {
      const double s = std::exp(std::log(1e-2) + (std::log(1e2) - std::log(1e-2)) * i / 200000.0);
      const double f = d * d / (2.0 * s * s) + std::log(s);
      if (f < best_f) {
        best_f = f;
        best_s = s;
      }
    }
    EXPECT_NEAR(v::kl_sigma_argmin(d), best_s, 1e-4 * std::fabs(d)) << d;
    EXPECT_NEAR(v::kl_sigma_argmin(d), std::fabs(d), 0.01 * std::fabs(d)) << d;
  }
  EXPECT_TRUE(v::kl_minimizer_suite().passed());
}

TEST(VerifyMonotonicity, SuitePasses) {
  const auto s = v::monotonicity_suite();
  EXPECT_EQ(s.checks.size(), 7u * 4u * 2u + 7u);
  for (const auto& c : s.checks) EXPECT_TRUE(c.pass) << c.name;
}

TEST(VerifySuite, FailuresCounted) {
  v::Suite s{"x", {}};
  s.add("ok", 0.5, 1.0);
  s.add("bad", 2.0, 1.0);
  s.add_flag("flag", false);
  EXPECT_EQ(s.failures(), 2u);
  EXPECT_FALSE(s.passed());
}

TEST(VerifySurfaces, GridShapeAndValues) {
  const auto dir = std::filesystem::temp_directory_path() / "utal_test_surfaces";
  const v::SurfaceGrid g;
  const auto files = v::write_loss_surfaces(dir, g);
  ASSERT_EQ(files.size(), 4u);
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "loss_name,d,sigma,value");
    int rows = 0;
    while (std::getline(is, line)) {
      ++rows;
      if (f.filename() != "surface_l1.csv") continue;
      std::istringstream ls(line);
      std::string name, d, sigma, value;
      std::getline(ls, name, ',');
      std::getline(ls, d, ',');
      std::getline(ls, sigma, ',');
      std::getline(ls, value, ',');
      EXPECT_EQ(name, "l1");
      EXPECT_NEAR(std::stod(value), std::fabs(std::stod(d)), 1e-6);
    }
    EXPECT_EQ(rows, g.n_d * g.n_sigma) << f;
  }
  EXPECT_DOUBLE_EQ(g.d(0), -3.0);
  EXPECT_DOUBLE_EQ(g.d(g.n_d - 1), 3.0);
  EXPECT_DOUBLE_EQ(g.sigma(0), 0.05);
  EXPECT_DOUBLE_EQ(g.sigma(g.n_sigma - 1), 3.0);
}
