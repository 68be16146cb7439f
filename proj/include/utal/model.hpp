// SPDX-License-Identifier: Apache-2.0
//
// The single-stage localization network and its training loop.
//
//   pooled x -> l2-normalize -> FC(hidden) -> ReLU -+-> FC(1)        -> sigmoid  (actioness)
//                                                   +-> FC(C * (1+P)) -> logits, per-class offsets
//
// P = 4 (mu_s, alpha_s, mu_e, alpha_e) in the uncertainty modes and 2
// (y_s, y_e) in the l1 baseline.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "utal/data.hpp"
#include "utal/losses.hpp"
#include "utal/net.hpp"
#include "utal/numerics.hpp"

namespace utal {

enum class LossMode { l1, kl_l1, sampled_l1, expected_l1 };

inline std::string_view to_string(LossMode m) {
  switch (m) {
    case LossMode::l1: return "l1";
    case LossMode::kl_l1: return "kl_l1";
    case LossMode::sampled_l1: return "sampled_l1";
    case LossMode::expected_l1: return "expected_l1";
  }
  return "?";
}

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "l1") return LossMode::l1;
  if (s == "kl_l1") return LossMode::kl_l1;
  if (s == "sampled_l1") return LossMode::sampled_l1;
  if (s == "expected_l1") return LossMode::expected_l1;
  throw std::invalid_argument("unknown loss mode: " + std::string(s));
}

struct TrainConfig {
  LossMode loss_mode = LossMode::kl_l1;
  ConditionMode condition_mode = ConditionMode::he;
  double lambda = 1.0 / 3.0;
  int batch_size = 128;
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  /// From this epoch on the learning rate is lr * lr_drop_factor; 0 disables.
  int lr_drop_epoch = 36;
  double lr_drop_factor = 0.1;
  int epochs = 50;
  std::uint64_t seed = 7;
  int k = 4;
  int hidden = 1000;
  double w_bin = 1.0;
  double w_cls = 1.0;
  double w_reg = 1.0;
  /// Regression targets are the length-normalized offsets times this
  /// factor; every regression loss, d and sigma live in the scaled units.
  double offset_scale = 10.0;
  /// Adds an unused sixth column per class to branch 2.
  bool pad_column = false;

  bool uncertain() const { return loss_mode != LossMode::l1; }
};

inline void validate(const TrainConfig& c) {
  auto need = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("train.") + field + " " + rule);
  };
  need(c.batch_size >= 1, "batch_size", "must be >= 1");
  need(c.lambda > 0.0, "lambda", "must be > 0");
  need(c.lr >= 0.0, "lr", "must be >= 0");
  need(c.momentum >= 0.0 && c.momentum < 1.0, "momentum", "must lie in [0, 1)");
  need(c.weight_decay >= 0.0, "weight_decay", "must be >= 0");
  need(c.lr_drop_epoch >= 0, "lr_drop_epoch", "must be >= 0");
  need(c.lr_drop_factor > 0.0 && c.lr_drop_factor <= 1.0, "lr_drop_factor", "must lie in (0, 1]");
  need(c.epochs >= 0, "epochs", "must be >= 0");
  need(c.k >= 1, "k", "must be >= 1");
  need(c.hidden >= 1, "hidden", "must be >= 1");
  need(c.offset_scale > 0.0, "offset_scale", "must be > 0");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"loss", to_string(c.loss_mode)}, {"condition_mode", to_string(c.condition_mode)},
          {"lambda", c.lambda},           {"batch_size", c.batch_size},
          {"lr", c.lr},                   {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_drop_epoch", c.lr_drop_epoch}, {"lr_drop_factor", c.lr_drop_factor},
          {"epochs", c.epochs},           {"seed", c.seed},
          {"k", c.k},                     {"hidden", c.hidden},
          {"w_bin", c.w_bin},             {"w_cls", c.w_cls},
          {"w_reg", c.w_reg},             {"offset_scale", c.offset_scale},
          {"pad_column", c.pad_column}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.loss_mode = parse_loss_mode(j.at("loss").get<std::string>());
  c.condition_mode = parse_condition_mode(j.at("condition_mode").get<std::string>());
  c.lambda = j.at("lambda");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.momentum = j.at("momentum");
  c.weight_decay = j.at("weight_decay");
  c.lr_drop_epoch = j.at("lr_drop_epoch");
  c.lr_drop_factor = j.at("lr_drop_factor");
  c.epochs = j.at("epochs");
  c.seed = j.at("seed");
  c.k = j.at("k");
  c.hidden = j.at("hidden");
  c.w_bin = j.at("w_bin");
  c.w_cls = j.at("w_cls");
  c.w_reg = j.at("w_reg");
  c.offset_scale = j.at("offset_scale");
  c.pad_column = j.at("pad_column");
  return c;
}

/// One proposal's network outputs. Offsets are in the network's scaled
/// units; shift_start/shift_end convert the means to proposal lengths.
struct HeadOutput {
  double actioness = 0.0;
  std::vector<double> logits;   // [C]
  std::vector<double> offsets;  // [C x P], alpha already clamped
  int per_class = 2;            // P
  double offset_scale = 1.0;

  int num_classes() const { return static_cast<int>(logits.size()); }
  bool uncertain() const { return per_class == 4; }

  GaussianOffset start(int c) const {
    const auto base = static_cast<std::size_t>(c * per_class);
    return {offsets[base], uncertain() ? offsets[base + 1] : 0.0};
  }
  GaussianOffset end(int c) const {
    const auto base = static_cast<std::size_t>(c * per_class);
    return uncertain() ? GaussianOffset{offsets[base + 2], offsets[base + 3]}
                       : GaussianOffset{offsets[base + 1], 0.0};
  }
  double shift_start(int c) const { return start(c).mu / offset_scale; }
  double shift_end(int c) const { return end(c).mu / offset_scale; }

  int best_class() const {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
};

/// Per-batch loss terms (already weighted into `total`).
struct LossBreakdown {
  double bin = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double total = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  double sigma_pos_sum = 0.0;  // summed over positives (both boundaries averaged)
  double sigma_neg_sum = 0.0;  // summed over mined negatives
};

/// A training example in network-ready form.
struct Sample {
  std::span<const float> x;
  bool positive = false;
  int class_id = -1;
  Offsets target;
};

template <std::floating_point Real>
class Model {
 public:
  static constexpr const char* kLayerNames[3] = {"fc1", "actioness", "branch2"};

  Model() = default;

  Model(const TrainConfig& cfg, int d_feat, int num_classes)
      : cfg_(cfg), d_feat_(d_feat), num_classes_(num_classes) {
    validate(cfg);
    Rng rng = Rng(cfg.seed).derive(0x696e6974ULL);
    const Eigen::Index in = static_cast<Eigen::Index>(cfg.k) * d_feat;
    layers_.push_back(DenseLayer<Real>::glorot(in, cfg.hidden, rng));
    layers_.push_back(DenseLayer<Real>::glorot(cfg.hidden, 1, rng));
    layers_.push_back(DenseLayer<Real>::glorot(cfg.hidden, branch2_width(), rng));
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }
  int d_feat() const { return d_feat_; }
  int num_classes() const { return num_classes_; }
  int input_size() const { return cfg_.k * d_feat_; }
  int per_class() const { return cfg_.uncertain() ? 4 : 2; }
  Eigen::Index branch2_width() const {
    return static_cast<Eigen::Index>(num_classes_) * (1 + per_class() + (cfg_.pad_column ? 1 : 0));
  }

  std::vector<DenseLayer<Real>>& layers() { return layers_; }
  const std::vector<DenseLayer<Real>>& layers() const { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.biases.size());
    return n;
  }

  /// Batched inference; rows of x are pooled features.
  std::vector<HeadOutput> predict(const Matrix<Real>& x) const {
    require_shape(x.cols() == input_size(), "model input width");
    const Matrix<Real> h = relu<Real>(layers_[0].infer(l2_normalize<Real>(x)));
    return decode(layers_[1].infer(h), layers_[2].infer(h));
  }

  HeadOutput forward(std::span<const float> x) const {
    require_shape(static_cast<int>(x.size()) == input_size(), "model input width");
    Matrix<Real> m(1, input_size());
    for (int i = 0; i < input_size(); ++i) m(0, i) = static_cast<Real>(x[static_cast<std::size_t>(i)]);
    return predict(m).front();
  }

  /// Loss on one batch and, if `grads` is given, its gradient accumulated
  /// into grads. `stream` seeds the sampled-l1 draws for this batch.
  LossBreakdown batch_loss(std::span<const Sample> batch, const Rng& stream,
                           std::vector<DenseGrads<Real>>* grads) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    const int C = num_classes_;
    const int P = per_class();
    Matrix<Real> x(n, input_size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& xs = batch[static_cast<std::size_t>(i)].x;
      require_shape(static_cast<int>(xs.size()) == input_size(), "sample width");
      for (int j = 0; j < input_size(); ++j) x(i, j) = static_cast<Real>(xs[static_cast<std::size_t>(j)]);
    }
    const Matrix<Real> xn = l2_normalize<Real>(x);
    const Matrix<Real> pre = layers_[0].forward(xn);
    const Matrix<Real> h = relu<Real>(pre);
    const Matrix<Real> za = layers_[1].forward(h);
    const Matrix<Real> zb = layers_[2].forward(h);

    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(n));
    std::vector<int> classes(static_cast<std::size_t>(n), 0);
    std::vector<double> logits(static_cast<std::size_t>(n * C));
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& s = batch[static_cast<std::size_t>(i)];
      scores[static_cast<std::size_t>(i)] = sigmoid<double>(static_cast<double>(za(i, 0)));
      labels[static_cast<std::size_t>(i)] = s.positive;
      classes[static_cast<std::size_t>(i)] = s.positive ? s.class_id : 0;
      for (int c = 0; c < C; ++c) logits[static_cast<std::size_t>(i * C + c)] = static_cast<double>(zb(i, c));
    }

    LossBreakdown out;
    const MiningResult mining = select_hard_negatives(scores, labels, cfg_.lambda);
    out.positives = mining.positives.size();
    out.negatives = mining.negatives.size();
    const BinaryLoss bin = binary_loss(scores, mining);
    const MulticlassLoss cls = multiclass_loss(logits, static_cast<std::size_t>(C), classes, mining.positives);
    out.bin = bin.loss;
    out.cls = cls.loss;

    Matrix<Real> dza = Matrix<Real>::Zero(n, 1);
    Matrix<Real> dzb = Matrix<Real>::Zero(n, zb.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = scores[static_cast<std::size_t>(i)];
      dza(i, 0) = static_cast<Real>(cfg_.w_bin * bin.d_scores[static_cast<std::size_t>(i)] * y * (1.0 - y));
      for (int c = 0; c < C; ++c)
        dzb(i, c) = static_cast<Real>(cfg_.w_cls * cls.d_logits[static_cast<std::size_t>(i * C + c)]);
    }

    // Regression: gt-class row only, averaged over positives and the two
    // boundaries.
    const double reg_scale =
        mining.positives.empty() ? 0.0 : 0.5 / static_cast<double>(mining.positives.size());
    for (std::size_t i : mining.positives) {
      const auto& s = batch[i];
      const auto row = static_cast<Eigen::Index>(i);
      const Eigen::Index base = C + static_cast<Eigen::Index>(s.class_id) * P;
      if (!cfg_.uncertain()) {
        const double ts = cfg_.offset_scale * s.target.start, te = cfg_.offset_scale * s.target.end;
        const double ys = zb(row, base), ye = zb(row, base + 1);
        out.reg += reg_scale * (std::fabs(ts - ys) + std::fabs(te - ye));
        dzb(row, base) = static_cast<Real>(cfg_.w_reg * reg_scale * -sign(ts - ys));
        dzb(row, base + 1) = static_cast<Real>(cfg_.w_reg * reg_scale * -sign(te - ye));
        continue;
      }
      Rng eps_rng = stream.derive(static_cast<std::uint64_t>(i));
      const double targets[2] = {cfg_.offset_scale * s.target.start, cfg_.offset_scale * s.target.end};
      for (int b = 0; b < 2; ++b) {
        const Eigen::Index mu_col = base + 2 * b;
        const Eigen::Index alpha_col = mu_col + 1;
        const double raw_alpha = zb(row, alpha_col);
        const GaussianOffset g{static_cast<double>(zb(row, mu_col)), clamp_alpha(raw_alpha)};
        const OffsetLoss l = regression_term(g, targets[b], eps_rng);
        out.reg += reg_scale * l.loss;
        out.sigma_pos_sum += 0.5 * g.sigma();
        dzb(row, mu_col) = static_cast<Real>(cfg_.w_reg * reg_scale * l.d_mu);
        const bool clamped = raw_alpha < kAlphaMin || raw_alpha > kAlphaMax;
        dzb(row, alpha_col) = clamped ? Real(0) : static_cast<Real>(cfg_.w_reg * reg_scale * l.d_alpha);
      }
    }
    if (cfg_.uncertain()) {
      for (std::size_t i : mining.negatives) {
        const auto row = static_cast<Eigen::Index>(i);
        int best = 0;
        for (int c = 1; c < C; ++c)
          if (zb(row, c) > zb(row, best)) best = c;
        const Eigen::Index base = C + static_cast<Eigen::Index>(best) * P;
        out.sigma_neg_sum += 0.5 * (std::exp(0.5 * clamp_alpha(zb(row, base + 1))) +
                                    std::exp(0.5 * clamp_alpha(zb(row, base + 3))));
      }
    }
    out.total = cfg_.w_bin * out.bin + cfg_.w_cls * out.cls + cfg_.w_reg * out.reg;

    if (grads != nullptr) {
      auto& g = *grads;
      const Matrix<Real> dh = layers_[1].backward(dza, g[1]) + layers_[2].backward(dzb, g[2]);
      layers_[0].accumulate(relu_backward<Real>(pre, dh), g[0]);
    }
    return out;
  }

  std::vector<DenseGrads<Real>> zero_grads() const {
    std::vector<DenseGrads<Real>> g;
    for (const auto& l : layers_) g.emplace_back(l.out_size(), l.in_size());
    return g;
  }

  // --- persistence ---

  void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const {
    {
      std::ofstream os(path, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
      write_layers<Real>(os, layers_);
      if (!os) throw std::runtime_error("checkpoint write failed: " + path.string());
    }
    nlohmann::json side = extra;
    side["format"] = "UTAL1";
    side["train"] = to_json(cfg_);
    side["num_classes"] = num_classes_;
    side["d_feat"] = d_feat_;
    std::ofstream js(sidecar_path(path), std::ios::binary);
    js << side.dump(1) << '\n';
  }

  static Model load(const std::filesystem::path& path) {
    std::ifstream js(sidecar_path(path));
    if (!js) throw std::runtime_error("missing checkpoint sidecar " + sidecar_path(path).string());
    const auto side = nlohmann::json::parse(js);
    Model m;
    m.cfg_ = train_config_from_json(side.at("train"));
    m.num_classes_ = side.at("num_classes");
    m.d_feat_ = side.at("d_feat");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    m.layers_ = read_layers<Real>(is);
    if (m.layers_.size() != 3 || m.layers_[0].in_size() != m.input_size() ||
        m.layers_[2].out_size() != m.branch2_width() || m.layers_[1].out_size() != 1)
      throw std::runtime_error("checkpoint layer shapes disagree with its sidecar");
    return m;
  }

  static std::filesystem::path sidecar_path(const std::filesystem::path& p) {
    return std::filesystem::path(p.string() + ".json");
  }

 private:
  OffsetLoss regression_term(const GaussianOffset& g, double t, Rng& eps_rng) const {
    switch (cfg_.loss_mode) {
      case LossMode::kl_l1: return kl_l1_loss(g, t, cfg_.condition_mode);
      case LossMode::sampled_l1: return sampled_l1_loss(g, t, eps_rng);
      case LossMode::expected_l1: return expected_l1_loss(g, t);
      case LossMode::l1: break;
    }
    throw std::logic_error("regression_term called in l1 mode");
  }

  std::vector<HeadOutput> decode(const Matrix<Real>& za, const Matrix<Real>& zb) const {
    const int C = num_classes_;
    const int P = per_class();
    std::vector<HeadOutput> out(static_cast<std::size_t>(za.rows()));
    for (Eigen::Index i = 0; i < za.rows(); ++i) {
      HeadOutput& o = out[static_cast<std::size_t>(i)];
      o.per_class = P;
      o.offset_scale = cfg_.offset_scale;
      o.actioness = sigmoid<double>(static_cast<double>(za(i, 0)));
      o.logits.resize(static_cast<std::size_t>(C));
      o.offsets.resize(static_cast<std::size_t>(C * P));
      for (int c = 0; c < C; ++c) o.logits[static_cast<std::size_t>(c)] = zb(i, c);
      for (int j = 0; j < C * P; ++j) {
        double v = zb(i, C + j);
        if (P == 4 && j % 2 == 1) v = clamp_alpha(v);
        o.offsets[static_cast<std::size_t>(j)] = v;
      }
    }
    return out;
  }

  TrainConfig cfg_;
  int d_feat_ = 0;
  int num_classes_ = 0;
  std::vector<DenseLayer<Real>> layers_;
};

struct EpochStats {
  int epoch = 0;
  double bin = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double mean_sigma_pos = std::numeric_limits<double>::quiet_NaN();
  double mean_sigma_hardneg = std::numeric_limits<double>::quiet_NaN();

  double total() const { return bin + cls + reg; }
};

using LossCurve = std::vector<EpochStats>;

/// Samples view the features in `set`, which must outlive them.
inline std::vector<Sample> to_samples(const std::vector<LabeledProposal>& set) {
  std::vector<Sample> out;
  out.reserve(set.size());
  for (const auto& lp : set)
    out.push_back({lp.x, lp.label.positive, lp.label.class_id, lp.label.target});
  return out;
}
std::vector<Sample> to_samples(std::vector<LabeledProposal>&&) = delete;

/// Seeded shuffle, fixed-size batches, per-batch mining, one SGD step per
/// batch. Loss terms in the curve are batch means over the epoch.
template <std::floating_point Real>
LossCurve train(Model<Real>& model, std::span<const Sample> samples,
                const std::function<void(const EpochStats&)>& on_epoch = {}) {
  const TrainConfig& cfg = model.config();
  if (std::none_of(samples.begin(), samples.end(), [](const Sample& s) { return s.positive; }))
    throw std::invalid_argument("training set has no positive proposals");
  SgdMomentum<Real> opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  const std::vector<std::string> names(std::begin(Model<Real>::kLayerNames), std::end(Model<Real>::kLayerNames));
  const Rng root(cfg.seed);
  LossCurve curve;
  std::vector<std::size_t> order(samples.size());
  std::vector<Sample> batch;
  auto grads = model.zero_grads();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const bool dropped = cfg.lr_drop_epoch > 0 && epoch >= cfg.lr_drop_epoch;
    opt.set_lr(dropped ? cfg.lr * cfg.lr_drop_factor : cfg.lr);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = root.derive(0x73687566ULL, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    EpochStats st{.epoch = epoch};
    double sigma_pos = 0.0, sigma_neg = 0.0;
    std::size_t npos = 0, nneg = 0, nbatches = 0;
    for (std::size_t b0 = 0, bi = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size), ++bi) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t j = b0; j < b1; ++j) batch.push_back(samples[order[j]]);
      for (auto& g : grads) g.zero();
      const LossBreakdown lb =
          model.batch_loss(batch, root.derive(0x65707331ULL, static_cast<std::uint64_t>(epoch), bi), &grads);
      if (!std::isfinite(lb.total))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi));
      try {
        opt.step(model.layers(), grads, names);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(bi));
      }
      st.bin += lb.bin;
      st.cls += lb.cls;
      st.reg += lb.reg;
      sigma_pos += lb.sigma_pos_sum;
      sigma_neg += lb.sigma_neg_sum;
      npos += lb.positives;
      nneg += lb.negatives;
      ++nbatches;
    }
    if (nbatches > 0) {
      st.bin /= static_cast<double>(nbatches);
      st.cls /= static_cast<double>(nbatches);
      st.reg /= static_cast<double>(nbatches);
    }
    if (cfg.uncertain()) {
      if (npos > 0) st.mean_sigma_pos = sigma_pos / static_cast<double>(npos);
      if (nneg > 0) st.mean_sigma_hardneg = sigma_neg / static_cast<double>(nneg);
    }
    curve.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return curve;
}

/// Residual d = t - mu and sigma (scaled units) for both boundaries of every
/// positive, read from the ground-truth class row. sigma is NaN in the l1
/// baseline.
struct BoundaryResidual {
  double d_start = 0.0;
  double sigma_start = 0.0;
  double d_end = 0.0;
  double sigma_end = 0.0;
};

template <std::floating_point Real>
std::vector<BoundaryResidual> positive_residuals(const Model<Real>& model, std::span<const Sample> samples) {
  std::vector<BoundaryResidual> out;
  constexpr std::size_t kChunk = 256;
  std::vector<const Sample*> pos;
  for (const auto& s : samples)
    if (s.positive) pos.push_back(&s);
  for (std::size_t b0 = 0; b0 < pos.size(); b0 += kChunk) {
    const std::size_t b1 = std::min(pos.size(), b0 + kChunk);
    Matrix<Real> x(static_cast<Eigen::Index>(b1 - b0), model.input_size());
    for (std::size_t i = b0; i < b1; ++i)
      for (int j = 0; j < model.input_size(); ++j)
        x(static_cast<Eigen::Index>(i - b0), j) = static_cast<Real>(pos[i]->x[static_cast<std::size_t>(j)]);
    const auto outs = model.predict(x);
    for (std::size_t i = b0; i < b1; ++i) {
      const HeadOutput& o = outs[i - b0];
      const Sample& s = *pos[i];
      const double nan = std::numeric_limits<double>::quiet_NaN();
      const double scale = model.config().offset_scale;
      out.push_back({scale * s.target.start - o.start(s.class_id).mu,
                     o.uncertain() ? o.start(s.class_id).sigma() : nan,
                     scale * s.target.end - o.end(s.class_id).mu,
                     o.uncertain() ? o.end(s.class_id).sigma() : nan});
    }
  }
  return out;
}

}  // namespace utal
