// SPDX-License-Identifier: Apache-2.0
//
// Training objectives and their analytic gradients with respect to the
// network outputs: actioness cross-entropy with hard-negative mining,
// softmax classification, and four boundary regression losses (plain l1,
// KL-l1, sampled l1, expected l1).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "utal/numerics.hpp"

namespace utal {

inline constexpr double kAlphaMin = -10.0;
inline constexpr double kAlphaMax = 10.0;
inline constexpr double kProbFloor = 1e-7;

inline double clamp_alpha(double alpha) { return std::clamp(alpha, kAlphaMin, kAlphaMax); }

/// Gaussian boundary offset: mean and log-variance alpha = log sigma^2.
struct GaussianOffset {
  double mu = 0.0;
  double alpha = 0.0;

  double variance() const { return std::exp(clamp_alpha(alpha)); }
  double sigma() const { return std::exp(0.5 * clamp_alpha(alpha)); }
};

/// Which KL-l1 branch handles |d| <= 1. `he` puts the Gaussian NLL there
/// (smooth-l1 convention); `paper` puts the linear branch there.
enum class ConditionMode { he, paper };

inline std::string_view to_string(ConditionMode m) { return m == ConditionMode::he ? "he" : "paper"; }

inline ConditionMode parse_condition_mode(std::string_view s) {
  if (s == "he") return ConditionMode::he;
  if (s == "paper") return ConditionMode::paper;
  throw std::invalid_argument("unknown condition mode: " + std::string(s));
}

// --- actioness -------------------------------------------------------------

struct MiningResult {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;  // hardest first
};

/// Keeps every positive and the floor(|I_p| / lambda) highest-scoring
/// negatives; ties go to the lower sample index.
inline MiningResult select_hard_negatives(std::span<const double> scores,
                                          std::span<const std::uint8_t> labels, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("mining ratio lambda must be > 0");
  if (scores.size() != labels.size()) throw std::logic_error("dimension mismatch: mining labels");
  MiningResult m;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? m.positives : neg).push_back(i);
  if (m.positives.empty()) return m;

  // The epsilon absorbs representation error in e.g. 2 / (1/3).
  const auto want = static_cast<std::size_t>(
      std::floor(static_cast<double>(m.positives.size()) / lambda + 1e-9));
  const std::size_t keep = std::min(want, neg.size());
  std::partial_sort(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(keep), neg.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  neg.resize(keep);
  m.negatives = std::move(neg);
  return m;
}

struct BinaryLoss {
  double loss = 0.0;
  std::vector<double> d_scores;
};

/// Mean cross-entropy over mined samples; gradient only on mined indices.
inline BinaryLoss binary_loss(std::span<const double> scores, const MiningResult& mining) {
  BinaryLoss out;
  out.d_scores.assign(scores.size(), 0.0);
  const std::size_t n = mining.positives.size() + mining.negatives.size();
  if (mining.positives.empty() || n == 0) return out;
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i : mining.positives) {
    const double y = std::clamp(scores[i], kProbFloor, 1.0 - kProbFloor);
    out.loss -= std::log(y) * inv;
    out.d_scores[i] = -inv / y;
  }
  for (std::size_t i : mining.negatives) {
    const double y = std::clamp(scores[i], kProbFloor, 1.0 - kProbFloor);
    out.loss -= std::log(1.0 - y) * inv;
    out.d_scores[i] = inv / (1.0 - y);
  }
  return out;
}

// --- classification --------------------------------------------------------

struct MulticlassLoss {
  double loss = 0.0;
  std::vector<double> d_logits;  // row-major [batch x classes]
};

/// Softmax cross-entropy averaged over the positives only.
inline MulticlassLoss multiclass_loss(std::span<const double> logits, std::size_t num_classes,
                                      std::span<const int> labels,
                                      std::span<const std::size_t> positives) {
  if (num_classes == 0 || logits.size() % num_classes != 0)
    throw std::logic_error("dimension mismatch: logits");
  MulticlassLoss out;
  out.d_logits.assign(logits.size(), 0.0);
  if (positives.empty()) return out;
  const double inv = 1.0 / static_cast<double>(positives.size());
  for (std::size_t i : positives) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
      throw std::invalid_argument("class label out of range");
    const auto row = logits.subspan(i * num_classes, num_classes);
    const double zmax = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - zmax);
    const double log_sum = zmax + std::log(sum);
    out.loss += (log_sum - row[static_cast<std::size_t>(label)]) * inv;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double p = std::exp(row[c] - log_sum);
      out.d_logits[i * num_classes + c] = (p - (c == static_cast<std::size_t>(label))) * inv;
    }
  }
  return out;
}

// --- regression ------------------------------------------------------------

inline double sign(double x) { return (x > 0.0) - (x < 0.0); }

struct L1Loss {
  double loss = 0.0;
  std::vector<double> d_start;
  std::vector<double> d_end;
};

/// Mean over positives of |t_s - y_s| + |t_e - y_e|.
inline L1Loss l1_loss(std::span<const double> y_s, std::span<const double> y_e,
                      std::span<const double> t_s, std::span<const double> t_e,
                      std::span<const std::size_t> positives) {
  L1Loss out;
  out.d_start.assign(y_s.size(), 0.0);
  out.d_end.assign(y_e.size(), 0.0);
  if (positives.empty()) return out;
  const double inv = 1.0 / static_cast<double>(positives.size());
  for (std::size_t i : positives) {
    out.loss += (std::fabs(t_s[i] - y_s[i]) + std::fabs(t_e[i] - y_e[i])) * inv;
    out.d_start[i] = -sign(t_s[i] - y_s[i]) * inv;
    out.d_end[i] = -sign(t_e[i] - y_e[i]) * inv;
  }
  return out;
}

/// Loss value and gradients for one Gaussian boundary prediction.
struct OffsetLoss {
  double loss = 0.0;
  double d_mu = 0.0;
  double d_alpha = 0.0;
  double epsilon = 0.0;  // sampled_l1 only
};

/// Gaussian negative log-likelihood of t under N(mu, exp(alpha)).
inline OffsetLoss kl_quadratic(const GaussianOffset& pred, double t) {
  const double d = t - pred.mu;
  const double alpha = clamp_alpha(pred.alpha);
  const double inv_var = std::exp(-alpha);
  return {.loss = 0.5 * d * d * inv_var + 0.5 * alpha + 0.5 * std::log(2.0 * std::numbers::pi),
          .d_mu = -d * inv_var,
          .d_alpha = -0.5 * d * d * inv_var + 0.5};
}

/// (|d| - 1/2) / sigma^2 + log sigma.
inline OffsetLoss kl_linear(const GaussianOffset& pred, double t) {
  const double d = t - pred.mu;
  const double alpha = clamp_alpha(pred.alpha);
  const double inv_var = std::exp(-alpha);
  return {.loss = (std::fabs(d) - 0.5) * inv_var + 0.5 * alpha,
          .d_mu = -sign(d) * inv_var,
          .d_alpha = -(std::fabs(d) - 0.5) * inv_var + 0.5};
}

inline OffsetLoss kl_l1_loss(const GaussianOffset& pred, double t,
                             ConditionMode mode = ConditionMode::he) {
  const bool inside = std::fabs(t - pred.mu) <= 1.0;
  const bool quadratic = (mode == ConditionMode::he) ? inside : !inside;
  return quadratic ? kl_quadratic(pred, t) : kl_linear(pred, t);
}

/// |d - sigma eps| for a given eps, with reparameterized gradients.
inline OffsetLoss sampled_l1_loss(const GaussianOffset& pred, double t, double epsilon) {
  const double sigma = pred.sigma();
  const double r = t - pred.mu - sigma * epsilon;
  const double s = sign(r);
  return {.loss = std::fabs(r), .d_mu = -s, .d_alpha = -0.5 * sigma * epsilon * s,
          .epsilon = epsilon};
}

inline OffsetLoss sampled_l1_loss(const GaussianOffset& pred, double t, Rng& rng) {
  return sampled_l1_loss(pred, t, rng.normal());
}

struct Expectation {
  double value = 0.0;
  double d_d = 0.0;
  double d_sigma = 0.0;
};

/// E|d - sigma eps| for eps ~ N(0, 1): the folded-normal mean
/// d erf(d / (sigma sqrt 2)) + sigma sqrt(2/pi) exp(-d^2 / (2 sigma^2)).
inline Expectation expected_l1(double d, double sigma) {
  if (!(sigma > 0.0)) throw std::domain_error("expected_l1: sigma must be > 0");
  const double z = d / (sigma * std::numbers::sqrt2);
  const double e = erf(z);
  const double g = std::sqrt(2.0 / std::numbers::pi) * std::exp(-z * z);
  return {.value = d * e + sigma * g, .d_d = e, .d_sigma = g};
}

/// expected_l1 as a training loss on (mu, alpha).
inline OffsetLoss expected_l1_loss(const GaussianOffset& pred, double t) {
  const double sigma = pred.sigma();
  const Expectation ex = expected_l1(t - pred.mu, sigma);
  return {.loss = ex.value, .d_mu = -ex.d_d, .d_alpha = 0.5 * sigma * ex.d_sigma};
}

}  // namespace utal
