// SPDX-License-Identifier: Apache-2.0
//
// Self-check suites run by `utal verify`: Monte-Carlo check of the expected
// l1 closed form, finite-difference gradient checks for every loss and
// layer, the KL-l1 variance minimizer, and expected-l1 monotonicity. Also
// writes the loss-surface CSVs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "utal/losses.hpp"
#include "utal/model.hpp"
#include "utal/net.hpp"
#include "utal/numerics.hpp"

namespace utal::verify {

struct Check {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct Suite {
  std::string name;
  std::vector<Check> checks;

  void add(std::string check, double error, double tolerance) {
    checks.push_back({std::move(check), error, tolerance, error <= tolerance});
  }
  void add_flag(std::string check, bool ok) { checks.push_back({std::move(check), ok ? 0.0 : 1.0, 0.0, ok}); }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const Check& c) { return !c.pass; }));
  }
  bool passed() const { return failures() == 0; }
};

// --- expectation identity -------------------------------------------------

using ClosedForm = std::function<double(double d, double sigma)>;

inline double expected_l1_value(double d, double sigma) { return expected_l1(d, sigma).value; }

/// d erf(d / (sigma sqrt 2)) + sigma exp(-d^2 / sigma^2) / sqrt(2 pi).
/// Kept only so the checks can show it disagrees with sampling.
inline double expected_l1_printed(double d, double sigma) {
  return d * erf(d / (sigma * std::numbers::sqrt2)) +
         sigma * std::exp(-d * d / (sigma * sigma)) / std::sqrt(2.0 * std::numbers::pi);
}

inline const std::vector<double>& grid_d() {
  static const std::vector<double> g{-3.0, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0};
  return g;
}
inline const std::vector<double>& grid_sigma() {
  static const std::vector<double> g{0.1, 0.5, 1.0, 2.0};
  return g;
}

struct ExpectationPoint {
  double d = 0.0;
  double sigma = 0.0;
  double closed = 0.0;
  MonteCarloEstimate mc;
  double tolerance = 0.0;
  double error() const { return std::fabs(closed - mc.mean); }
};

/// Monte-Carlo means on the 7 x 4 grid; each point draws from its own stream.
inline std::vector<ExpectationPoint> expectation_grid(const ClosedForm& f, std::uint64_t seed,
                                                      std::size_t samples = 1'000'000) {
  std::vector<ExpectationPoint> out;
  const Rng root(seed);
  std::uint64_t idx = 0;
  for (double d : grid_d())
    for (double s : grid_sigma()) {
      Rng rng = root.derive(0x6d63ULL, idx++);
      ExpectationPoint p{d, s, f(d, s), mc_expected_l1(d, s, samples, rng), 0.0};
      p.tolerance = std::max(1e-3, 4.0 * p.mc.std_error);
      out.push_back(p);
    }
  return out;
}

inline Suite expectation_suite(const ClosedForm& f, std::uint64_t seed, std::size_t samples = 1'000'000) {
  Suite s{"expectation", {}};
  char buf[64];
  for (const auto& p : expectation_grid(f, seed, samples)) {
    std::snprintf(buf, sizeof buf, "d=%g sigma=%g", p.d, p.sigma);
    s.add(buf, p.error(), p.tolerance);
  }
  return s;
}

// --- finite differences ---------------------------------------------------

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

inline constexpr double kKinkMargin = 1e-2;
inline constexpr double kFdStep = 1e-5;

struct GradientOptions {
  std::uint64_t seed = 11;
  int points = 100;
  double tolerance = 1e-4;
  double network_tolerance = 1e-3;
};

namespace detail {

struct Worst {
  double err = 0.0;
  int points = 0;
  void update(double analytic, double numeric) {
    err = std::max(err, relative_error(analytic, numeric));
    ++points;
  }
};

inline void record(Suite& s, const std::string& name, const Worst& w, double tol) {
  s.add(name + " (" + std::to_string(w.points) + " pts)", w.err, tol);
  if (w.points < 100) s.add_flag(name + " has >= 100 points", false);
}

using Scalar1 = std::function<double(double)>;

inline double central(const Scalar1& f, double x, double h = kFdStep) { return finite_diff(f, x, h); }

// Offset losses with respect to (mu, alpha) at random (mu, alpha, t, eps).
inline void offset_loss_checks(Suite& s, Rng& rng, const GradientOptions& o) {
  auto run = [&](const std::string& name, auto&& loss, auto&& excluded) {
    Worst w;
    for (int found = 0, tries = 0; found < o.points && tries < 100 * o.points; ++tries) {
      const double mu = rng.uniform(-3.0, 3.0);
      const double alpha = rng.uniform(-3.0, 3.0);
      const double eps = rng.normal();
      const double t = rng.uniform(-3.0, 3.0);
      if (excluded(t - mu, alpha, eps)) continue;
      const OffsetLoss a = loss(GaussianOffset{mu, alpha}, t, eps);
      w.update(a.d_mu, central([&](double m) { return loss(GaussianOffset{m, alpha}, t, eps).loss; }, mu));
      w.update(a.d_alpha, central([&](double al) { return loss(GaussianOffset{mu, al}, t, eps).loss; }, alpha));
      ++found;
    }
    w.points /= 2;
    record(s, name, w, o.tolerance);
  };
  auto near = [](double x, double at) { return std::fabs(x - at) < kKinkMargin; };
  auto kl_kinks = [&](double d, double, double) { return near(std::fabs(d), 1.0) || near(d, 0.0); };
  run("kl_l1[he] d/dmu, d/dalpha",
      [](const GaussianOffset& g, double t, double) { return kl_l1_loss(g, t, ConditionMode::he); }, kl_kinks);
  run("kl_l1[paper] d/dmu, d/dalpha",
      [](const GaussianOffset& g, double t, double) { return kl_l1_loss(g, t, ConditionMode::paper); }, kl_kinks);
  run("sampled_l1 d/dmu, d/dalpha",
      [](const GaussianOffset& g, double t, double e) { return sampled_l1_loss(g, t, e); },
      [&](double d, double alpha, double eps) { return near(d - std::exp(0.5 * alpha) * eps, 0.0); });
  run("expected_l1 d/dmu, d/dalpha",
      [](const GaussianOffset& g, double t, double) { return expected_l1_loss(g, t); },
      [](double, double, double) { return false; });

  Worst w;
  for (int i = 0; i < o.points; ++i) {
    const double d = rng.uniform(-3.0, 3.0);
    const double sigma = rng.uniform(0.1, 3.0);
    const Expectation e = expected_l1(d, sigma);
    w.update(e.d_d, central([&](double x) { return expected_l1(x, sigma).value; }, d));
    w.update(e.d_sigma, central([&](double x) { return expected_l1(d, x).value; }, sigma));
  }
  w.points /= 2;
  record(s, "expected_l1 dE/dd, dE/dsigma", w, o.tolerance);
}

inline void classification_checks(Suite& s, Rng& rng, const GradientOptions& o) {
  Worst wb, wc, wl;
  for (int p = 0; p < o.points; ++p) {
    const std::size_t n = 8 + rng.below(9);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = rng.uniform(0.05, 0.95);
      labels[i] = rng.uniform() < 0.3;
    }
    labels[rng.below(n)] = 1;
    const MiningResult m = select_hard_negatives(scores, labels, 1.0 / 3.0);
    const BinaryLoss b = binary_loss(scores, m);
    const std::size_t i = rng.below(n);
    wb.update(b.d_scores[i], central([&](double v) {
                auto sc = scores;
                sc[i] = v;
                return binary_loss(sc, m).loss;
              }, scores[i]));

    const std::size_t C = 2 + rng.below(5);
    std::vector<double> logits(n * C);
    std::vector<int> cls(n);
    for (double& z : logits) z = rng.uniform(-4.0, 4.0);
    for (int& c : cls) c = static_cast<int>(rng.below(C));
    const MulticlassLoss mc = multiclass_loss(logits, C, cls, m.positives);
    const std::size_t j = m.positives[rng.below(m.positives.size())] * C + rng.below(C);
    wc.update(mc.d_logits[j], central([&](double v) {
                auto z = logits;
                z[j] = v;
                return multiclass_loss(z, C, cls, m.positives).loss;
              }, logits[j]));

    std::vector<double> ys(n), ye(n), ts(n), te(n);
    for (std::size_t k = 0; k < n; ++k) {
      ts[k] = rng.uniform(-2.0, 2.0);
      te[k] = rng.uniform(-2.0, 2.0);
      ys[k] = ts[k] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(kKinkMargin, 2.0);
      ye[k] = te[k] + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(kKinkMargin, 2.0);
    }
    const std::size_t q = m.positives.front();
    const L1Loss l = l1_loss(ys, ye, ts, te, m.positives);
    wl.update(l.d_start[q], central([&](double v) {
                auto y = ys;
                y[q] = v;
                return l1_loss(y, ye, ts, te, m.positives).loss;
              }, ys[q]));
  }
  record(s, "binary cross-entropy d/dscore", wb, o.tolerance);
  record(s, "softmax cross-entropy d/dlogit", wc, o.tolerance);
  record(s, "l1 d/dy", wl, o.tolerance);
}

inline Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Scalar objective sum(G .* layer(x)) for a fixed random G.
inline void layer_checks(Suite& s, Rng& rng, const GradientOptions& o) {
  Worst ww, wb, wx, wr, wn;
  for (int p = 0; p < o.points; ++p) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.below(4));
    const Eigen::Index in = 2 + static_cast<Eigen::Index>(rng.below(6));
    const Eigen::Index out = 1 + static_cast<Eigen::Index>(rng.below(6));
    DenseLayer<double> layer = DenseLayer<double>::glorot(in, out, rng);
    for (Eigen::Index j = 0; j < out; ++j) layer.biases(j) = rng.uniform(-1.0, 1.0);
    const Matrix<double> x = random_matrix(n, in, rng);
    const Matrix<double> g = random_matrix(n, out, rng);
    auto objective = [&](const DenseLayer<double>& l, const Matrix<double>& xx) {
      return (l.infer(xx).array() * g.array()).sum();
    };
    DenseGrads<double> grads(out, in);
    layer.forward(x);
    const Matrix<double> dx = layer.backward(g, grads);

    const auto r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(out)));
    const auto c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(in)));
    ww.update(grads.weights(r, c), central([&](double v) {
                auto l = layer;
                l.weights(r, c) = v;
                return objective(l, x);
              }, layer.weights(r, c)));
    wb.update(grads.biases(r), central([&](double v) {
                auto l = layer;
                l.biases(r) = v;
                return objective(l, x);
              }, layer.biases(r)));
    const auto xr = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    wx.update(dx(xr, c), central([&](double v) {
                auto xx = x;
                xx(xr, c) = v;
                return objective(layer, xx);
              }, x(xr, c)));

    // relu and l2 normalization on a [n x in] input against G' of that shape.
    const Matrix<double> g2 = random_matrix(n, in, rng);
    Matrix<double> xrelu = x;
    double& probe = xrelu(xr, c);
    if (std::fabs(probe) < kKinkMargin) probe = probe < 0 ? -kKinkMargin - 0.1 : kKinkMargin + 0.1;
    const Matrix<double> drelu = relu_backward<double>(xrelu, g2);
    wr.update(drelu(xr, c), central([&](double v) {
                auto xx = xrelu;
                xx(xr, c) = v;
                return (relu<double>(xx).array() * g2.array()).sum();
              }, xrelu(xr, c)));
    const Matrix<double> dn = l2_normalize_backward<double>(x, g2);
    wn.update(dn(xr, c), central([&](double v) {
                auto xx = x;
                xx(xr, c) = v;
                return (l2_normalize<double>(xx).array() * g2.array()).sum();
              }, x(xr, c)));
  }
  record(s, "dense d/dW", ww, o.tolerance);
  record(s, "dense d/db", wb, o.tolerance);
  record(s, "dense d/dx", wx, o.tolerance);
  record(s, "relu d/dx", wr, o.tolerance);
  record(s, "l2_normalize d/dx", wn, o.tolerance);
}

// Full batch loss of a small double-precision network against every layer's
// parameters, for each regression mode.
inline void network_checks(Suite& s, Rng& rng, const GradientOptions& o) {
  for (LossMode mode : {LossMode::l1, LossMode::kl_l1, LossMode::sampled_l1, LossMode::expected_l1}) {
    TrainConfig cfg;
    cfg.loss_mode = mode;
    cfg.hidden = 16;
    cfg.k = 2;
    cfg.offset_scale = 1.0;
    cfg.seed = rng.next_u64();
    const int d_feat = 4, C = 3, n = 12;
    Model<double> model(cfg, d_feat, C);
    for (auto& l : model.layers())
      for (Eigen::Index j = 0; j < l.biases.size(); ++j) l.biases(j) = rng.uniform(-0.1, 0.1);

    std::vector<std::vector<float>> feats(n);
    std::vector<Sample> batch(n);
    for (int i = 0; i < n; ++i) {
      feats[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(model.input_size()));
      for (float& f : feats[static_cast<std::size_t>(i)]) f = static_cast<float>(rng.uniform(-1.0, 1.0));
      Sample& smp = batch[static_cast<std::size_t>(i)];
      smp.x = feats[static_cast<std::size_t>(i)];
      smp.positive = i < 4;
      smp.class_id = smp.positive ? static_cast<int>(rng.below(C)) : -1;
      smp.target = {rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    }
    const Rng stream(rng.next_u64());
    auto grads = model.zero_grads();
    model.batch_loss(batch, stream, &grads);

    Worst w;
    const int per_layer = (o.points + 2) / 3;
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
      for (int p = 0; p < per_layer; ++p) {
        auto& layer = model.layers()[li];
        const bool bias = rng.uniform() < 0.2;
        const auto r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(layer.out_size())));
        const auto c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(layer.in_size())));
        double& param = bias ? layer.biases(r) : layer.weights(r, c);
        const double analytic = bias ? grads[li].biases(r) : grads[li].weights(r, c);
        const double saved = param;
        const double numeric = central([&](double v) {
          param = v;
          const double loss = model.batch_loss(batch, stream, nullptr).total;
          param = saved;
          return loss;
        }, saved);
        w.update(analytic, numeric);
      }
    }
    record(s, "network[" + std::string(to_string(mode)) + "] d/dparams", w, o.network_tolerance);
  }
}

}  // namespace detail

inline Suite gradient_suite(const GradientOptions& o = {}) {
  Suite s{"gradients", {}};
  Rng rng(o.seed);
  Rng r1 = rng.derive(1), r2 = rng.derive(2), r3 = rng.derive(3), r4 = rng.derive(4);
  detail::offset_loss_checks(s, r1, o);
  detail::classification_checks(s, r2, o);
  detail::layer_checks(s, r3, o);
  detail::network_checks(s, r4, o);
  return s;
}

// --- KL-l1 variance minimizer ----------------------------------------------

/// Golden-section minimum over sigma in [lo, hi] of d^2/(2 sigma^2) + log sigma,
/// the quadratic KL-l1 branch in sigma.
inline double kl_sigma_argmin(double d, double lo = 1e-3, double hi = 100.0) {
  auto f = [d](double log_sigma) {
    const GaussianOffset g{0.0, 2.0 * log_sigma};
    return kl_quadratic(g, d).loss;
  };
  double a = std::log(lo), b = std::log(hi);
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - r * (b - a), x2 = a + r * (b - a);
  double f1 = f(x1), f2 = f(x2);
  while (b - a > 1e-12) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - r * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + r * (b - a);
      f2 = f(x2);
    }
  }
  return std::exp(0.5 * (a + b));
}

inline Suite kl_minimizer_suite() {
  Suite s{"kl_sigma_minimizer", {}};
  for (double d : {1.5, 2.0, 3.0}) {
    const double sigma = kl_sigma_argmin(d);
    s.add("argmin sigma at d=" + std::to_string(d).substr(0, 3), std::fabs(sigma - d) / d, 0.01);
  }
  return s;
}

// --- expected-l1 monotonicity ---------------------------------------------

inline Suite monotonicity_suite() {
  Suite s{"expected_l1_monotonicity", {}};
  char buf[96];
  for (double d : grid_d()) {
    double prev = -1.0;
    for (double sigma : grid_sigma()) {
      const Expectation e = expected_l1(d, sigma);
      std::snprintf(buf, sizeof buf, "E(%g,%g) >= |d|", d, sigma);
      s.add_flag(buf, e.value >= std::fabs(d));
      std::snprintf(buf, sizeof buf, "E(%g,%g) > E at previous sigma", d, sigma);
      s.add_flag(buf, e.value > prev && e.d_sigma > 0.0);
      prev = e.value;
    }
    std::snprintf(buf, sizeof buf, "E(%g,1e-6) - |d|", d);
    s.add(buf, expected_l1(d, 1e-6).value - std::fabs(d), 1e-5);
  }
  return s;
}

// --- loss surfaces ---------------------------------------------------------

struct SurfaceGrid {
  int n_d = 61;
  int n_sigma = 60;
  double d_min = -3.0, d_max = 3.0;
  double sigma_min = 0.05, sigma_max = 3.0;

  double d(int i) const { return d_min + (d_max - d_min) * i / (n_d - 1); }
  double sigma(int j) const { return sigma_min + (sigma_max - sigma_min) * j / (n_sigma - 1); }
};

inline const std::vector<std::pair<std::string, ClosedForm>>& surface_losses() {
  static const std::vector<std::pair<std::string, ClosedForm>> losses{
      {"l1", [](double d, double) { return std::fabs(d); }},
      {"kl_l1_he", [](double d, double s) { return kl_l1_loss({0.0, 2.0 * std::log(s)}, d, ConditionMode::he).loss; }},
      {"kl_l1_paper",
       [](double d, double s) { return kl_l1_loss({0.0, 2.0 * std::log(s)}, d, ConditionMode::paper).loss; }},
      {"expected_l1", expected_l1_value},
  };
  return losses;
}

/// One `surface_<loss>.csv` per loss with n_d x n_sigma rows.
inline std::vector<std::filesystem::path> write_loss_surfaces(const std::filesystem::path& dir,
                                                              const SurfaceGrid& g = {}) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  char buf[128];
  for (const auto& [name, f] : surface_losses()) {
    const auto path = dir / ("surface_" + name + ".csv");
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "loss_name,d,sigma,value\n";
    for (int i = 0; i < g.n_d; ++i)
      for (int j = 0; j < g.n_sigma; ++j) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.9g\n", name.c_str(), g.d(i), g.sigma(j), f(g.d(i), g.sigma(j)));
        os << buf;
      }
    written.push_back(path);
  }
  return written;
}

}  // namespace utal::verify
