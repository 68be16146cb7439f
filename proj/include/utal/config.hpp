// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: defaults, overridden by a flat `section.key = value`
// file, overridden by command-line flags.

#pragma once

#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "utal/data.hpp"
#include "utal/detect.hpp"
#include "utal/model.hpp"

namespace utal {

struct RunConfig {
  std::uint64_t seed = 7;
  int threads = 1;
  Split split = Split::train;
  SyntheticConfig data;
  LabelConfig label;
  TrainConfig train;
  DetectConfig detect;

  /// Pushes shared settings (seed, k, window layout) into the sub-configs.
  void sync() {
    train.seed = seed;
    label.k = train.k;
    detect.scales = label.scales;
    detect.overlap = label.overlap;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    out = static_cast<T>(std::strtod(v.c_str(), &end));
    if (v.empty() || end != v.c_str() + v.size()) throw ConfigError(key + ": not a number: '" + v + "'");
  } else {
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw ConfigError(key + ": not an integer: '" + v + "'");
  }
  return out;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<double>(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

}  // namespace detail

/// Applies one `key = value` setting; unknown keys are errors.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_number;
  const std::string& v = value;
  auto num = [&](auto& field) { field = parse_number<std::decay_t<decltype(field)>>(key, v); };
  try {
    if (key == "seed") num(c.seed);
    else if (key == "threads") num(c.threads);
    else if (key == "data.split") c.split = parse_split(v);
    else if (key == "data.num_videos") num(c.data.num_videos);
    else if (key == "data.t_min") num(c.data.t_min);
    else if (key == "data.t_max") num(c.data.t_max);
    else if (key == "data.num_classes") num(c.data.num_classes);
    else if (key == "data.d_feat") num(c.data.d_feat);
    else if (key == "data.instances_min") num(c.data.instances_min);
    else if (key == "data.instances_max") num(c.data.instances_max);
    else if (key == "data.length_min") num(c.data.length_min);
    else if (key == "data.length_max") num(c.data.length_max);
    else if (key == "data.noise_level") num(c.data.noise_level);
    else if (key == "data.boundary_jitter") num(c.data.boundary_jitter);
    else if (key == "label.scales") c.label.scales = detail::parse_list(key, v);
    else if (key == "label.overlap") num(c.label.overlap);
    else if (key == "label.pos_thr") num(c.label.pos_thr);
    else if (key == "label.neg_thr") num(c.label.neg_thr);
    else if (key == "train.loss") c.train.loss_mode = parse_loss_mode(v);
    else if (key == "train.condition_mode") c.train.condition_mode = parse_condition_mode(v);
    else if (key == "train.lambda") num(c.train.lambda);
    else if (key == "train.batch_size") num(c.train.batch_size);
    else if (key == "train.lr") num(c.train.lr);
    else if (key == "train.momentum") num(c.train.momentum);
    else if (key == "train.weight_decay") num(c.train.weight_decay);
    else if (key == "train.lr_drop_epoch") num(c.train.lr_drop_epoch);
    else if (key == "train.lr_drop_factor") num(c.train.lr_drop_factor);
    else if (key == "train.epochs") num(c.train.epochs);
    else if (key == "train.k") num(c.train.k);
    else if (key == "train.hidden") num(c.train.hidden);
    else if (key == "train.w_bin") num(c.train.w_bin);
    else if (key == "train.w_cls") num(c.train.w_cls);
    else if (key == "train.w_reg") num(c.train.w_reg);
    else if (key == "train.offset_scale") num(c.train.offset_scale);
    else if (key == "train.pad_column") c.train.pad_column = detail::parse_bool(key, v);
    else if (key == "detect.cascade_steps") num(c.detect.cascade_steps);
    else if (key == "detect.nms_thr") num(c.detect.nms_thr);
    else if (key == "detect.score_floor") num(c.detect.score_floor);
    else if (key == "detect.tiou_thresholds") c.detect.tiou_thresholds = detail::parse_list(key, v);
    else throw ConfigError("unknown config key: " + key);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline void apply_config_text(RunConfig& c, std::istream& in, const std::string& origin) {
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  apply_config_text(c, in, path);
}

inline void validate(const RunConfig& c) {
  validate(c.data);
  validate(c.train);
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.detect.cascade_steps < 1) throw ConfigError("detect.cascade_steps must be >= 1");
  if (!(c.detect.nms_thr > 0.0 && c.detect.nms_thr <= 1.0)) throw ConfigError("detect.nms_thr must lie in (0, 1]");
  if (!(c.label.overlap >= 0.0 && c.label.overlap < 1.0)) throw ConfigError("label.overlap must lie in [0, 1)");
  if (!(0.0 <= c.label.neg_thr && c.label.neg_thr <= c.label.pos_thr && c.label.pos_thr <= 1.0))
    throw ConfigError("label.neg_thr/label.pos_thr must satisfy 0 <= neg_thr <= pos_thr <= 1");
  for (double s : c.label.scales)
    if (!(s >= 1.0)) throw ConfigError("label.scales entries must be >= 1");
}

inline nlohmann::json to_json(const SyntheticConfig& d) {
  return {{"num_videos", d.num_videos},       {"t_min", d.t_min},
          {"t_max", d.t_max},                 {"num_classes", d.num_classes},
          {"d_feat", d.d_feat},               {"instances_min", d.instances_min},
          {"instances_max", d.instances_max}, {"length_min", d.length_min},
          {"length_max", d.length_max},       {"noise_level", d.noise_level},
          {"boundary_jitter", d.boundary_jitter}};
}

inline nlohmann::json to_json(const LabelConfig& l) {
  return {{"scales", l.scales}, {"overlap", l.overlap}, {"pos_thr", l.pos_thr}, {"neg_thr", l.neg_thr}};
}

/// Path-free echo of every setting, embedded in each artifact.
inline nlohmann::json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"split", std::string(to_string(c.split))},
          {"data", to_json(c.data)},
          {"label", to_json(c.label)},
          {"train", to_json(c.train)},
          {"detect", to_json(c.detect)}};
}

}  // namespace utal
