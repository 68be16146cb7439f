// SPDX-License-Identifier: Apache-2.0
//
// Inference (cascaded refinement, score fusion, NMS) and the mAP@tIoU
// evaluator.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "utal/data.hpp"
#include "utal/model.hpp"
#include "utal/net.hpp"

namespace utal {

struct Detection {
  std::string video_id;
  double start = 0.0;
  double end = 0.0;
  int class_id = 0;
  double score = 0.0;

  Interval interval() const { return {start, end}; }
};

/// Ranking order shared by NMS and AP: score desc, then video id, then start.
inline bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.video_id != b.video_id) return a.video_id < b.video_id;
  if (a.start != b.start) return a.start < b.start;
  if (a.end != b.end) return a.end < b.end;
  return a.class_id < b.class_id;
}

inline void sort_detections(std::vector<Detection>& dets) {
  std::sort(dets.begin(), dets.end(), ranks_before);
}

/// Inverse of compute_offsets, clamped to [0, T]. An inverted or empty
/// result is replaced by a one-unit window at its midpoint; `degenerate`
/// reports when that happened.
inline Proposal apply_offsets(const Proposal& prop, double y_s, double y_e, double T,
                              bool* degenerate = nullptr) {
  const double len = prop.length();
  const double s = prop.start + y_s * len;
  const double e = prop.end + y_e * len;
  Proposal out{std::clamp(s, 0.0, T), std::clamp(e, 0.0, T), prop.scale_id};
  const bool bad = !(out.start < out.end);
  if (degenerate != nullptr) *degenerate = bad;
  if (bad) {
    const double half = std::min(0.5, 0.5 * T);
    const double mid = std::clamp(0.5 * (s + e), half, T - half);
    out.start = mid - half;
    out.end = mid + half;
  }
  return out;
}

/// Produces head outputs for a batch of proposals of one video.
using HeadFn = std::function<std::vector<HeadOutput>(const Video&, std::span<const Proposal>)>;

template <std::floating_point Real>
HeadFn model_head(const Model<Real>& model) {
  return [&model](const Video& video, std::span<const Proposal> props) {
    const int k = model.config().k;
    Matrix<Real> x(static_cast<Eigen::Index>(props.size()), model.input_size());
    for (std::size_t i = 0; i < props.size(); ++i) {
      const auto pooled = pool_k_parts(video.sequence, props[i], k);
      for (int j = 0; j < model.input_size(); ++j)
        x(static_cast<Eigen::Index>(i), j) = static_cast<Real>(pooled[static_cast<std::size_t>(j)]);
    }
    return model.predict(x);
  };
}

struct Refined {
  Proposal proposal;
  HeadOutput output;
};

/// Feeds each proposal through the head `steps` times, moving its
/// boundaries by the best class's mean offsets after every pass. A step
/// that would produce a degenerate window stops that proposal early. The
/// returned output is the last pass, i.e. the head evaluated on the window
/// before its final move.
inline std::vector<Refined> refine_cascade(const HeadFn& head, const Video& video,
                                           std::span<const Proposal> props, int steps) {
  if (steps < 1) throw ConfigError("detect.cascade_steps must be >= 1");
  const double T = static_cast<double>(video.num_units());
  std::vector<Refined> state(props.size());
  std::vector<Proposal> current(props.begin(), props.end());
  std::vector<std::size_t> active(props.size());
  for (std::size_t i = 0; i < props.size(); ++i) active[i] = i;

  for (int step = 0; step < steps && !active.empty(); ++step) {
    std::vector<Proposal> batch;
    for (std::size_t i : active) batch.push_back(current[i]);
    const auto outs = head(video, batch);
    std::vector<std::size_t> still;
    for (std::size_t j = 0; j < active.size(); ++j) {
      const std::size_t i = active[j];
      const HeadOutput& o = outs[j];
      const int c = o.best_class();
      bool degenerate = false;
      const Proposal next = apply_offsets(current[i], o.shift_start(c), o.shift_end(c), T, &degenerate);
      if (degenerate) {
        state[i] = {current[i], o};
        continue;
      }
      current[i] = next;
      state[i] = {next, o};
      still.push_back(i);
    }
    active = std::move(still);
  }
  return state;
}

inline Refined refine_cascade(const HeadFn& head, const Video& video, const Proposal& prop, int steps) {
  return refine_cascade(head, video, std::span<const Proposal>(&prop, 1), steps).front();
}

/// score_c = actioness * softmax(logits)_c.
inline std::vector<double> fuse_scores(const HeadOutput& out) {
  auto p = softmax<double>(out.logits);
  for (double& v : p) v *= out.actioness;
  return p;
}

/// Greedy NMS in ranking order; keeps a detection iff its tIoU with every
/// kept one is below the threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double tiou_thr) {
  sort_detections(dets);
  std::vector<Detection> kept;
  for (auto& d : dets) {
    const bool ok = std::all_of(kept.begin(), kept.end(),
                                [&](const Detection& k) { return tiou(k.interval(), d.interval()) < tiou_thr; });
    if (ok) kept.push_back(std::move(d));
  }
  return kept;
}

struct GroundTruth {
  std::string video_id;
  ActionAnnotation annotation;
};

/// All-point interpolated AP of one class. Each detection, in ranking
/// order, takes the highest-tIoU unmatched ground truth of its video if that
/// tIoU reaches the threshold. Returns NaN without ground truth.
inline double average_precision(std::vector<Detection> dets, const std::vector<GroundTruth>& gts,
                                double tiou_thr) {
  if (gts.empty()) return std::numeric_limits<double>::quiet_NaN();
  sort_detections(dets);
  std::map<std::string, std::vector<std::size_t>> by_video;
  for (std::size_t g = 0; g < gts.size(); ++g) by_video[gts[g].video_id].push_back(g);
  std::vector<bool> used(gts.size(), false);
  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (const auto& d : dets) {
    double best = -1.0;
    std::size_t best_g = 0;
    if (auto it = by_video.find(d.video_id); it != by_video.end()) {
      for (std::size_t g : it->second) {
        if (used[g] || gts[g].annotation.class_id != d.class_id) continue;
        const double iou = tiou(d.interval(), gts[g].annotation.interval());
        if (iou > best) {
          best = iou;
          best_g = g;
        }
      }
    }
    if (best >= tiou_thr) {
      used[best_g] = true;
      tp += 1.0;
    } else {
      fp += 1.0;
    }
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(gts.size()));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct DetectConfig {
  int cascade_steps = 2;
  double nms_thr = 0.5;
  double score_floor = 0.01;
  std::vector<double> tiou_thresholds{0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> scales{8.0, 16.0, 32.0, 64.0};
  double overlap = 0.75;
};

inline nlohmann::json to_json(const DetectConfig& c) {
  return {{"cascade_steps", c.cascade_steps}, {"nms_thr", c.nms_thr},
          {"score_floor", c.score_floor},     {"tiou_thresholds", c.tiou_thresholds},
          {"scales", c.scales},               {"overlap", c.overlap}};
}

struct EvalReport {
  std::vector<double> thresholds;
  std::vector<double> map;                        // per threshold
  std::vector<std::vector<double>> per_class_ap;  // [threshold][class], NaN = no gt
  std::size_t num_detections = 0;
  std::size_t num_ground_truth = 0;
  bool empty_detections = false;

  double map_at(double thr) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i)
      if (std::fabs(thresholds[i] - thr) < 1e-9) return map[i];
    throw std::out_of_range("threshold not in report");
  }
};

/// Detections of one video after cascade, fusion, score floor and per-class NMS.
inline std::vector<Detection> detect_video(const HeadFn& head, const Video& video, int num_classes,
                                           const DetectConfig& cfg) {
  const auto props = sliding_windows(static_cast<int>(video.num_units()), cfg.scales, cfg.overlap);
  const auto refined = refine_cascade(head, video, props, cfg.cascade_steps);
  std::vector<std::vector<Detection>> per_class(static_cast<std::size_t>(num_classes));
  for (const auto& r : refined) {
    const auto scores = fuse_scores(r.output);
    for (int c = 0; c < num_classes; ++c) {
      const double s = scores[static_cast<std::size_t>(c)];
      if (s < cfg.score_floor) continue;
      per_class[static_cast<std::size_t>(c)].push_back({video.id(), r.proposal.start, r.proposal.end, c, s});
    }
  }
  std::vector<Detection> out;
  for (auto& dets : per_class)
    for (auto& d : nms(std::move(dets), cfg.nms_thr)) out.push_back(std::move(d));
  return out;
}

/// Per-video detection followed by globally ranked AP per class and
/// threshold. mAP averages the classes that have ground truth.
inline EvalReport evaluate(const HeadFn& head, const Dataset& ds, const DetectConfig& cfg,
                           std::vector<Detection>* all_out = nullptr) {
  std::vector<Detection> all;
  std::vector<GroundTruth> gts;
  for (const Video& v : ds.videos) {
    for (auto& d : detect_video(head, v, ds.num_classes, cfg)) all.push_back(std::move(d));
    for (const auto& a : v.annotations) gts.push_back({v.id(), a});
  }
  sort_detections(all);

  EvalReport rep;
  rep.thresholds = cfg.tiou_thresholds;
  rep.num_detections = all.size();
  rep.num_ground_truth = gts.size();
  rep.empty_detections = all.empty();
  std::vector<std::vector<Detection>> dets_by_class(static_cast<std::size_t>(ds.num_classes));
  std::vector<std::vector<GroundTruth>> gts_by_class(static_cast<std::size_t>(ds.num_classes));
  for (const auto& d : all) dets_by_class[static_cast<std::size_t>(d.class_id)].push_back(d);
  for (const auto& g : gts) gts_by_class[static_cast<std::size_t>(g.annotation.class_id)].push_back(g);
  for (double thr : cfg.tiou_thresholds) {
    std::vector<double> aps;
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < ds.num_classes; ++c) {
      const double ap = average_precision(dets_by_class[static_cast<std::size_t>(c)],
                                          gts_by_class[static_cast<std::size_t>(c)], thr);
      aps.push_back(ap);
      if (!std::isnan(ap)) {
        sum += ap;
        ++present;
      }
    }
    rep.per_class_ap.push_back(aps);
    rep.map.push_back(present > 0 ? sum / present : 0.0);
  }
  if (all_out != nullptr) *all_out = std::move(all);
  return rep;
}

/// Head that knows the annotations: any proposal overlapping a ground truth
/// is snapped onto the best-overlapping one with certainty; others score 0.
inline HeadFn oracle_head(int num_classes) {
  return [num_classes](const Video& video, std::span<const Proposal> props) {
    std::vector<HeadOutput> outs;
    for (const Proposal& p : props) {
      HeadOutput o;
      o.per_class = 2;
      o.logits.assign(static_cast<std::size_t>(num_classes), 0.0);
      o.offsets.assign(static_cast<std::size_t>(num_classes * 2), 0.0);
      double best = 0.0;
      const ActionAnnotation* match = nullptr;
      for (const auto& a : video.annotations) {
        const double iou = tiou(p.interval(), a.interval());
        if (iou > best) {
          best = iou;
          match = &a;
        }
      }
      if (match != nullptr) {
        o.actioness = 1.0;
        o.logits[static_cast<std::size_t>(match->class_id)] = 50.0;
        const Offsets off = compute_offsets(p, match->interval());
        for (int c = 0; c < num_classes; ++c) {
          o.offsets[static_cast<std::size_t>(2 * c)] = off.start;
          o.offsets[static_cast<std::size_t>(2 * c + 1)] = off.end;
        }
      }
      outs.push_back(std::move(o));
    }
    return outs;
  };
}

}  // namespace utal
