// SPDX-License-Identifier: Apache-2.0
//
// Unit-level feature sequences, the synthetic benchmark generator, dataset
// files, sliding-window proposals, tIoU labeling and k-part pooling.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "utal/net.hpp"
#include "utal/numerics.hpp"

namespace utal {

/// Raised for invalid user configuration; the message names the field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interval {
  double start = 0.0;
  double end = 0.0;

  double length() const { return end - start; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct UnitFeatureSequence {
  std::string video_id;
  Matrix<float> features;  // [T x d_feat]

  Eigen::Index num_units() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

struct ActionAnnotation {
  int class_id = 0;
  double start = 0.0;
  double end = 0.0;

  Interval interval() const { return {start, end}; }
};

struct Proposal {
  double start = 0.0;
  double end = 0.0;
  int scale_id = 0;

  double length() const { return end - start; }
  Interval interval() const { return {start, end}; }
};

struct Video {
  UnitFeatureSequence sequence;
  std::vector<ActionAnnotation> annotations;

  const std::string& id() const { return sequence.video_id; }
  Eigen::Index num_units() const { return sequence.num_units(); }
};

struct Dataset {
  int num_classes = 0;
  int d_feat = 0;
  std::vector<std::string> class_names;
  std::vector<Video> videos;
};

// --- geometry --------------------------------------------------------------

/// Temporal intersection over union of two intervals.
inline double tiou(const Interval& a, const Interval& b) {
  const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0.0) return 0.0;
  const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Boundary displacements normalized by the proposal length.
struct Offsets {
  double start = 0.0;
  double end = 0.0;
};

inline Offsets compute_offsets(const Proposal& prop, const Interval& gt) {
  const double len = prop.length();
  return {(gt.start - prop.start) / len, (gt.end - prop.end) / len};
}

/// Multi-scale sliding windows sorted by (start, scale). Each scale tiles
/// with stride L(1 - overlap) and gets a tail window ending at T if needed;
/// a scale of at least T yields the single window [0, T].
inline std::vector<Proposal> sliding_windows(int num_units, const std::vector<double>& scales,
                                             double overlap) {
  if (num_units < 1) throw ConfigError("sliding_windows: T must be >= 1");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("label.overlap must lie in [0, 1)");
  const double T = num_units;
  std::vector<Proposal> out;
  for (std::size_t si = 0; si < scales.size(); ++si) {
    const double L = scales[si];
    if (!(L >= 1.0)) throw ConfigError("label.scales entries must be >= 1");
    const int id = static_cast<int>(si);
    if (L >= T) {
      out.push_back({0.0, T, id});
      continue;
    }
    const double stride = L * (1.0 - overlap);
    double last_end = 0.0;
    for (long k = 0;; ++k) {
      const double s = static_cast<double>(k) * stride;
      if (s + L > T + 1e-9) break;
      out.push_back({s, s + L, id});
      last_end = s + L;
    }
    if (last_end < T - 1e-9) out.push_back({T - L, T, id});
  }
  std::stable_sort(out.begin(), out.end(), [](const Proposal& a, const Proposal& b) {
    return a.start != b.start ? a.start < b.start : a.scale_id < b.scale_id;
  });
  return out;
}

struct ProposalLabel {
  Proposal proposal;
  bool positive = false;
  int class_id = -1;  // positives only
  Offsets target;     // positives only
  int matched = -1;   // annotation index, positives only
  double max_tiou = 0.0;
};

/// Positive iff best tIoU >= pos_thr (ties to the earlier annotation),
/// negative iff best tIoU < neg_thr; proposals in between are dropped.
inline std::vector<ProposalLabel> label_proposals(const std::vector<Proposal>& proposals,
                                                  const std::vector<ActionAnnotation>& annotations,
                                                  double pos_thr, double neg_thr) {
  if (!(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0))
    throw ConfigError("label thresholds must satisfy 0 <= neg_thr <= pos_thr <= 1");
  std::vector<ProposalLabel> out;
  for (const Proposal& p : proposals) {
    ProposalLabel lab;
    lab.proposal = p;
    for (std::size_t a = 0; a < annotations.size(); ++a) {
      const double iou = tiou(p.interval(), annotations[a].interval());
      if (iou > lab.max_tiou) {
        lab.max_tiou = iou;
        lab.matched = static_cast<int>(a);
      }
    }
    if (lab.matched >= 0 && lab.max_tiou >= pos_thr) {
      const auto& gt = annotations[static_cast<std::size_t>(lab.matched)];
      lab.positive = true;
      lab.class_id = gt.class_id;
      lab.target = compute_offsets(p, gt.interval());
      out.push_back(lab);
    } else if (lab.max_tiou < neg_thr) {
      lab.matched = -1;
      out.push_back(lab);
    }
  }
  return out;
}

/// Splits the proposal into k equal parts and averages the units each part
/// overlaps, weighted by overlap length. A part shorter than one unit takes
/// the unit under its midpoint.
inline std::vector<float> pool_k_parts(const UnitFeatureSequence& video, const Proposal& prop,
                                       int k) {
  if (k < 1) throw ConfigError("k must be >= 1");
  const Eigen::Index T = video.num_units();
  const Eigen::Index dim = video.dim();
  std::vector<float> out(static_cast<std::size_t>(k * dim), 0.0f);
  const double part = prop.length() / k;
  std::vector<double> acc(static_cast<std::size_t>(dim));
  for (int j = 0; j < k; ++j) {
    const double a = prop.start + part * j;
    const double b = (j + 1 == k) ? prop.end : prop.start + part * (j + 1);
    std::fill(acc.begin(), acc.end(), 0.0);
    if (b - a < 1.0) {
      const auto u = std::clamp<Eigen::Index>(
          static_cast<Eigen::Index>(std::floor(0.5 * (a + b))), 0, T - 1);
      for (Eigen::Index c = 0; c < dim; ++c) acc[static_cast<std::size_t>(c)] = video.features(u, c);
    } else {
      const auto first = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(a)), 0, T - 1);
      const auto last = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::ceil(b)) - 1, 0, T - 1);
      double total = 0.0;
      for (Eigen::Index u = first; u <= last; ++u) {
        const double w = std::min<double>(b, u + 1) - std::max<double>(a, u);
        if (w <= 0.0) continue;
        total += w;
        for (Eigen::Index c = 0; c < dim; ++c) acc[static_cast<std::size_t>(c)] += w * video.features(u, c);
      }
      if (total > 0.0)
        for (double& v : acc) v /= total;
    }
    for (Eigen::Index c = 0; c < dim; ++c)
      out[static_cast<std::size_t>(j * dim + c)] = static_cast<float>(acc[static_cast<std::size_t>(c)]);
  }
  return out;
}

// --- training set ----------------------------------------------------------

struct LabelConfig {
  std::vector<double> scales{8.0, 16.0, 32.0, 64.0};
  double overlap = 0.75;
  double pos_thr = 0.5;
  double neg_thr = 0.3;
  int k = 4;
};

struct LabeledProposal {
  std::vector<float> x;
  ProposalLabel label;
  std::size_t video_index = 0;
};

/// Every labeled proposal of every video, in (video, start, scale) order.
inline std::vector<LabeledProposal> build_training_set(const Dataset& ds, const LabelConfig& cfg) {
  std::vector<LabeledProposal> out;
  for (std::size_t v = 0; v < ds.videos.size(); ++v) {
    const Video& video = ds.videos[v];
    const auto props = sliding_windows(static_cast<int>(video.num_units()), cfg.scales, cfg.overlap);
    for (auto& lab : label_proposals(props, video.annotations, cfg.pos_thr, cfg.neg_thr)) {
      LabeledProposal lp;
      lp.x = pool_k_parts(video.sequence, lab.proposal, cfg.k);
      lp.label = lab;
      lp.video_index = v;
      out.push_back(std::move(lp));
    }
  }
  return out;
}

// --- synthetic benchmark ---------------------------------------------------

struct SyntheticConfig {
  int num_videos = 200;
  int t_min = 48;
  int t_max = 128;
  int num_classes = 5;
  int d_feat = 64;
  int instances_min = 1;
  int instances_max = 3;
  int length_min = 6;
  int length_max = 40;
  double noise_level = 0.5;
  /// Annotation boundary jitter as a fraction of instance length.
  double boundary_jitter = 0.1;
};

inline void validate(const SyntheticConfig& c) {
  auto need = [](bool ok, const char* field, const char* rule) {
    if (!ok) throw ConfigError(std::string("data.") + field + " " + rule);
  };
  need(c.num_videos >= 1, "num_videos", "must be >= 1");
  need(c.num_classes >= 2, "num_classes", "must be >= 2");
  need(c.d_feat >= 8, "d_feat", "must be >= 8");
  need(c.t_min >= 1, "t_min", "must be >= 1");
  need(c.t_max >= c.t_min, "t_max", "must be >= data.t_min");
  need(c.instances_min >= 0, "instances_min", "must be >= 0");
  need(c.instances_max >= c.instances_min, "instances_max", "must be >= data.instances_min");
  need(c.length_min >= 1, "length_min", "must be >= 1");
  need(c.length_max >= c.length_min, "length_max", "must be >= data.length_min");
  need(c.length_max <= c.t_min, "length_max", "must be <= data.t_min");
  need(c.noise_level >= 0.0, "noise_level", "must be >= 0");
  need(c.boundary_jitter >= 0.0 && c.boundary_jitter < 0.5, "boundary_jitter", "must lie in [0, 0.5)");
}

/// Train and test splits share class prototypes but draw videos from
/// disjoint streams.
enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("data.split must be train or test, got '" + std::string(s) + "'");
}

inline std::string video_name(std::size_t i, Split split = Split::train) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%s_%04zu", split == Split::train ? "video" : "test", i);
  return buf;
}

/// One fixed prototype per class.
inline Matrix<float> class_prototypes(const SyntheticConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng(seed).derive(0x70726f746fULL);
  Matrix<float> protos(cfg.num_classes, cfg.d_feat);
  for (Eigen::Index c = 0; c < protos.rows(); ++c)
    for (Eigen::Index j = 0; j < protos.cols(); ++j) protos(c, j) = static_cast<float>(rng.normal());
  return protos;
}

/// Background units are pure noise; units inside a planted instance are the
/// class prototype plus noise. Annotations carry the boundary jitter, the
/// features do not. Each video draws from its own stream.
inline Dataset generate_synthetic_dataset(const SyntheticConfig& cfg, std::uint64_t seed,
                                          Split split = Split::train) {
  validate(cfg);
  Dataset ds;
  ds.num_classes = cfg.num_classes;
  ds.d_feat = cfg.d_feat;
  for (int c = 0; c < cfg.num_classes; ++c) ds.class_names.push_back("action_" + std::to_string(c));
  const Matrix<float> protos = class_prototypes(cfg, seed);

  const Rng root(seed);
  for (int v = 0; v < cfg.num_videos; ++v) {
    Rng rng = split == Split::train ? root.derive(0x766964ULL, static_cast<std::uint64_t>(v))
                                    : root.derive(0x74657374ULL, static_cast<std::uint64_t>(v));
    Video video;
    const int T = cfg.t_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.t_max - cfg.t_min + 1)));
    video.sequence.video_id = video_name(static_cast<std::size_t>(v), split);
    video.sequence.features.resize(T, cfg.d_feat);

    // Place instances left to right with a gap of at least two units.
    const int n = cfg.instances_min +
                  static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.instances_max - cfg.instances_min + 1)));
    struct Planted { int cls, start, end; };
    std::vector<Planted> planted;
    for (int i = 0, attempts = 0; i < n && attempts < 64; ++attempts) {
      const int len = cfg.length_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.length_max - cfg.length_min + 1)));
      if (len > T) continue;
      const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(T - len + 1)));
      const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
      const bool clash = std::any_of(planted.begin(), planted.end(), [&](const Planted& p) {
        return start < p.end + 2 && p.start < start + len + 2;
      });
      if (clash) continue;
      planted.push_back({cls, start, start + len});
      ++i;
    }
    std::sort(planted.begin(), planted.end(), [](const Planted& a, const Planted& b) { return a.start < b.start; });

    for (int u = 0; u < T; ++u)
      for (int j = 0; j < cfg.d_feat; ++j)
        video.sequence.features(u, j) = static_cast<float>(cfg.noise_level * rng.normal());
    for (const Planted& p : planted) {
      for (int u = p.start; u < p.end; ++u)
        for (int j = 0; j < cfg.d_feat; ++j) video.sequence.features(u, j) += protos(p.cls, j);
      const double len = p.end - p.start;
      double s = p.start + cfg.boundary_jitter * len * rng.uniform(-1.0, 1.0);
      double e = p.end + cfg.boundary_jitter * len * rng.uniform(-1.0, 1.0);
      s = std::clamp(s, 0.0, static_cast<double>(T));
      e = std::clamp(e, 0.0, static_cast<double>(T));
      video.annotations.push_back({p.cls, s, e});
    }
    ds.videos.push_back(std::move(video));
  }
  return ds;
}

// --- dataset files ---------------------------------------------------------
//
// <dir>/manifest.json, <dir>/classes.txt and one raw little-endian float32
// [T x d_feat] file per video under <dir>/features/.

inline constexpr const char* kManifestFormat = "utal-manifest/1";

inline void write_feature_file(const std::filesystem::path& path, const Matrix<float>& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (Eigen::Index r = 0; r < f.rows(); ++r)
    for (Eigen::Index c = 0; c < f.cols(); ++c) detail::put_f32(os, f(r, c));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Matrix<float> read_feature_file(const std::filesystem::path& path, Eigen::Index rows,
                                       Eigen::Index cols) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open feature file " + path.string());
  const auto expected = static_cast<std::uintmax_t>(rows * cols * 4);
  if (std::filesystem::file_size(path) != expected)
    throw std::runtime_error("feature file " + path.string() + " has size " +
                             std::to_string(std::filesystem::file_size(path)) + ", expected " +
                             std::to_string(expected));
  Matrix<float> f(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) f(r, c) = detail::get_f32(is);
  return f;
}

/// Writes the dataset files and returns the manifest path. `extra` is merged
/// into the manifest (used for the run configuration echo).
inline std::filesystem::path write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                                           const nlohmann::json& extra = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw std::runtime_error("cannot create " + (dir / "features").string() + ": " + ec.message());

  nlohmann::json videos = nlohmann::json::array();
  for (const Video& v : ds.videos) {
    const std::string rel = "features/" + v.id() + ".f32";
    write_feature_file(dir / rel, v.sequence.features);
    nlohmann::json anns = nlohmann::json::array();
    for (const auto& a : v.annotations)
      anns.push_back({{"class_id", a.class_id}, {"start", a.start}, {"end", a.end}});
    videos.push_back({{"video_id", v.id()},
                      {"T", v.num_units()},
                      {"d_feat", v.sequence.dim()},
                      {"feature_file", rel},
                      {"annotations", anns}});
  }
  {
    std::ofstream cls(dir / "classes.txt", std::ios::binary);
    for (const auto& name : ds.class_names) cls << name << '\n';
    if (!cls) throw std::runtime_error("cannot write " + (dir / "classes.txt").string());
  }
  nlohmann::json manifest = extra;
  manifest["format"] = kManifestFormat;
  manifest["num_classes"] = ds.num_classes;
  manifest["d_feat"] = ds.d_feat;
  manifest["class_table"] = "classes.txt";
  manifest["videos"] = videos;
  const fs::path path = dir / "manifest.json";
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << manifest.dump(1) << '\n';
  return path;
}

/// Structural problems in a loaded dataset; empty when valid.
inline std::vector<std::string> validation_errors(const Dataset& ds) {
  std::vector<std::string> errs;
  if (ds.num_classes < 1) errs.push_back("num_classes must be >= 1");
  for (const Video& v : ds.videos) {
    const auto T = static_cast<double>(v.num_units());
    if (v.num_units() < 1) errs.push_back(v.id() + ": T must be >= 1");
    if (v.sequence.dim() != ds.d_feat) errs.push_back(v.id() + ": d_feat mismatch");
    if (!v.sequence.features.allFinite()) errs.push_back(v.id() + ": non-finite features");
    for (const auto& a : v.annotations) {
      if (a.class_id < 0 || a.class_id >= ds.num_classes)
        errs.push_back(v.id() + ": class_id " + std::to_string(a.class_id) + " out of range");
      if (!(0.0 <= a.start && a.start < a.end && a.end <= T))
        errs.push_back(v.id() + ": annotation [" + std::to_string(a.start) + ", " +
                       std::to_string(a.end) + "] outside [0, T]");
    }
  }
  return errs;
}

inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  Dataset ds;
  try {
    ds.num_classes = m.at("num_classes").get<int>();
    ds.d_feat = m.at("d_feat").get<int>();
    if (m.contains("class_table")) {
      std::ifstream cls(dir / m["class_table"].get<std::string>());
      for (std::string line; std::getline(cls, line);) ds.class_names.push_back(line);
    }
    for (const auto& jv : m.at("videos")) {
      Video v;
      v.sequence.video_id = jv.at("video_id").get<std::string>();
      const auto T = jv.at("T").get<Eigen::Index>();
      const auto d = jv.at("d_feat").get<Eigen::Index>();
      v.sequence.features = read_feature_file(dir / jv.at("feature_file").get<std::string>(), T, d);
      for (const auto& ja : jv.at("annotations"))
        v.annotations.push_back(
            {ja.at("class_id").get<int>(), ja.at("start").get<double>(), ja.at("end").get<double>()});
      ds.videos.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto errs = validation_errors(ds);
  if (!errs.empty()) {
    std::ostringstream msg;
    msg << "manifest " << manifest_path.string() << " failed validation:";
    for (const auto& e : errs) msg << "\n  " << e;
    throw std::runtime_error(msg.str());
  }
  return ds;
}

}  // namespace utal
