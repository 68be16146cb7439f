// SPDX-License-Identifier: Apache-2.0
//
// Subcommand bodies for the `utal` tool. Each returns a process exit code;
// argument parsing lives in tools/utal.cpp.

#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "utal/config.hpp"
#include "utal/data.hpp"
#include "utal/detect.hpp"
#include "utal/model.hpp"
#include "utal/verify.hpp"

namespace utal::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kVerifyFailed = 2, kNumeric = 3 };

/// Maps exceptions to exit codes: numeric failures 3, everything else 1.
inline int guarded(const std::function<int()>& body, std::ostream& err = std::cerr) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

/// Applies UTAL_SEED (if set) to a default config; the config file and
/// flags are layered on top by the caller.
inline RunConfig base_config(const char* env_seed) {
  RunConfig rc;
  if (env_seed != nullptr && *env_seed != '\0') apply_setting(rc, "seed", env_seed);
  return rc;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline void write_run_config(const fs::path& out, const std::string& command, const RunConfig& rc) {
  const nlohmann::json j = {{"command", command}, {"config", to_json(rc)}};
  write_text(out / "run_config.json", j.dump(1) + '\n');
}

inline std::string format_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// mAP at each threshold as percentages with one decimal, space separated.
inline std::string table_row(const EvalReport& r) {
  std::string row;
  char buf[16];
  for (std::size_t i = 0; i < r.map.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * r.map[i]);
    row += (i ? " " : "") + std::string(buf);
  }
  return row;
}

// --- gen-data -------------------------------------------------------------

inline int gen_data(const RunConfig& rc, const fs::path& out, std::ostream& log = std::cout) {
  const Dataset ds = generate_synthetic_dataset(rc.data, rc.seed, rc.split);
  const nlohmann::json echo = {{"config", to_json(rc)}};
  const fs::path manifest = write_dataset(ds, out, echo);
  write_run_config(out, "gen-data", rc);

  std::vector<int> per_class(static_cast<std::size_t>(ds.num_classes), 0);
  std::size_t instances = 0;
  for (const Video& v : ds.videos)
    for (const auto& a : v.annotations) {
      ++per_class[static_cast<std::size_t>(a.class_id)];
      ++instances;
    }
  log << "wrote " << manifest.string() << "\n"
      << "videos " << ds.videos.size() << ", instances " << instances << ", split " << to_string(rc.split) << "\n";
  for (int c = 0; c < ds.num_classes; ++c)
    log << "  " << ds.class_names[static_cast<std::size_t>(c)] << ": " << per_class[static_cast<std::size_t>(c)] << "\n";
  return kOk;
}

// --- train ----------------------------------------------------------------

inline std::string loss_curve_csv(const LossCurve& curve) {
  std::string s = "epoch,L_bin,L_cls,L_reg,mean_sigma_pos,mean_sigma_hardneg\n";
  for (const auto& e : curve)
    s += std::to_string(e.epoch) + ',' + format_g(e.bin) + ',' + format_g(e.cls) + ',' + format_g(e.reg) + ',' +
         format_g(e.mean_sigma_pos) + ',' + format_g(e.mean_sigma_hardneg) + '\n';
  return s;
}

/// d and sigma per positive proposal and boundary; l1 models have no sigma.
inline std::string sigma_csv(const std::vector<BoundaryResidual>& res, bool uncertain) {
  std::string s = uncertain ? "d_start,sigma_start,d_end,sigma_end\n" : "d_start,d_end\n";
  for (const auto& r : res) {
    if (uncertain)
      s += format_g(r.d_start) + ',' + format_g(r.sigma_start) + ',' + format_g(r.d_end) + ',' + format_g(r.sigma_end) + '\n';
    else
      s += format_g(r.d_start) + ',' + format_g(r.d_end) + '\n';
  }
  return s;
}

inline void require_compatible(const Model<float>& m, const Dataset& ds, const std::string& what) {
  if (m.d_feat() != ds.d_feat || m.num_classes() != ds.num_classes)
    throw ConfigError(what + " expects d_feat=" + std::to_string(m.d_feat()) + ", C=" + std::to_string(m.num_classes()) +
                      " but the manifest has d_feat=" + std::to_string(ds.d_feat) +
                      ", C=" + std::to_string(ds.num_classes));
}

inline int train(const RunConfig& rc, const fs::path& manifest, const fs::path& out,
                 const std::optional<fs::path>& init = std::nullopt, std::ostream& log = std::cout) {
  const Dataset ds = load_dataset(manifest);
  const auto set = build_training_set(ds, rc.label);
  const auto samples = to_samples(set);
  const auto positives = std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.positive; });
  if (positives == 0)
    throw ConfigError("no positive proposals with label.pos_thr=" + format_g(rc.label.pos_thr) +
                      " and label.neg_thr=" + format_g(rc.label.neg_thr));

  Model<float> model(rc.train, ds.d_feat, ds.num_classes);
  if (init) {
    Model<float> loaded = Model<float>::load(*init);
    require_compatible(loaded, ds, "checkpoint " + init->string());
    if (loaded.config().k != rc.train.k || loaded.config().hidden != rc.train.hidden ||
        loaded.branch2_width() != model.branch2_width())
      throw ConfigError("checkpoint " + init->string() + " was trained with a different train.k, train.hidden, "
                        "train.loss or train.pad_column layout");
    model.layers() = loaded.layers();
  }
  log << "training " << to_string(rc.train.loss_mode) << " on " << samples.size() << " proposals (" << positives
      << " positive), " << rc.train.epochs << " epochs\n";
  const LossCurve curve = utal::train<float>(model, samples, [&](const EpochStats& e) {
    if (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == rc.train.epochs)
      log << "epoch " << e.epoch << "  bin " << format_g(e.bin) << "  cls " << format_g(e.cls) << "  reg "
          << format_g(e.reg) << "\n";
  });

  fs::create_directories(out);
  write_run_config(out, "train", rc);
  model.save(out / "model.utal", {{"config", to_json(rc)}});
  write_text(out / "loss_curve.csv", loss_curve_csv(curve));
  write_text(out / "sigma.csv", sigma_csv(positive_residuals<float>(model, samples), rc.train.uncertain()));
  log << "wrote " << (out / "model.utal").string() << "\n";
  return kOk;
}

// --- eval -----------------------------------------------------------------

inline nlohmann::json report_json(const EvalReport& r, const RunConfig& rc, const nlohmann::json& model_echo) {
  nlohmann::json tiou = nlohmann::json::object();
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    char key[16];
    std::snprintf(key, sizeof key, "%.2f", r.thresholds[i]);
    tiou[key] = r.map[i];
  }
  return {{"tiou", tiou},
          {"map", r.map},
          {"per_class", r.per_class_ap},
          {"num_detections", r.num_detections},
          {"num_ground_truth", r.num_ground_truth},
          {"table_row", table_row(r)},
          {"config", to_json(rc)},
          {"model", model_echo}};
}

inline std::string detections_csv(const std::vector<Detection>& dets) {
  std::string s = "video_id,start,end,class_id,score\n";
  for (const auto& d : dets)
    s += d.video_id + ',' + format_g(d.start) + ',' + format_g(d.end) + ',' + std::to_string(d.class_id) + ',' +
         format_g(d.score) + '\n';
  return s;
}

/// With `checkpoint` empty the annotation oracle stands in for a model.
inline int eval(const RunConfig& rc, const fs::path& manifest, const std::optional<fs::path>& checkpoint,
                const std::optional<fs::path>& out, std::ostream& log = std::cout) {
  const Dataset ds = load_dataset(manifest);
  std::optional<Model<float>> model;
  nlohmann::json model_echo = "oracle";
  HeadFn head;
  if (checkpoint) {
    model = Model<float>::load(*checkpoint);
    require_compatible(*model, ds, "checkpoint " + checkpoint->string());
    model_echo = to_json(model->config());
    head = model_head(*model);
  } else {
    head = oracle_head(ds.num_classes);
  }
  std::vector<Detection> dets;
  const EvalReport rep = evaluate(head, ds, rc.detect, &dets);
  if (rep.empty_detections) log << "warning: no detections above detect.score_floor\n";
  if (out) {
    fs::create_directories(*out);
    write_text(*out / "metrics.json", report_json(rep, rc, model_echo).dump(1) + '\n');
    write_text(*out / "detections.csv", detections_csv(dets));
  }
  std::string header;
  for (double t : rep.thresholds) header += (header.empty() ? "" : " ") + format_g(t);
  log << "mAP@tIoU " << header << "\n" << table_row(rep) << "\n";
  return kOk;
}

// --- verify / curves --------------------------------------------------------

inline int curves(const fs::path& out, std::ostream& log = std::cout) {
  for (const auto& p : verify::write_loss_surfaces(out)) log << "wrote " << p.string() << "\n";
  return kOk;
}

/// selector: all, expectation, gradients, kl, monotonicity. `inject_printed`
/// swaps in the misprinted expectation so the sampling check must fail.
inline int verify_cmd(const RunConfig& rc, const std::string& selector, bool inject_printed,
                      const std::optional<fs::path>& out, std::ostream& log = std::cout) {
  const bool all = selector == "all";
  if (!all && selector != "expectation" && selector != "gradients" && selector != "kl" && selector != "monotonicity")
    throw ConfigError("unknown verify suite '" + selector + "' (all, expectation, gradients, kl, monotonicity)");
  std::vector<verify::Suite> suites;
  if (all || selector == "expectation")
    suites.push_back(verify::expectation_suite(
        inject_printed ? verify::ClosedForm(verify::expected_l1_printed) : verify::ClosedForm(verify::expected_l1_value),
        rc.seed));
  if (all || selector == "gradients") {
    verify::GradientOptions o;
    o.seed = rc.seed;
    suites.push_back(verify::gradient_suite(o));
  }
  if (all || selector == "kl") suites.push_back(verify::kl_minimizer_suite());
  if (all || selector == "monotonicity") suites.push_back(verify::monotonicity_suite());

  std::size_t failures = 0;
  for (const auto& s : suites) {
    double worst = 0.0;
    for (const auto& c : s.checks)
      if (c.tolerance > 0.0) worst = std::max(worst, c.error / c.tolerance);
    log << (s.passed() ? "PASS " : "FAIL ") << s.name << "  checks " << s.checks.size() << "  failures "
        << s.failures() << "  max error/tolerance " << format_g(worst) << "\n";
    for (const auto& c : s.checks)
      if (!c.pass) log << "  failed: " << c.name << "  error " << format_g(c.error) << "  tolerance " << format_g(c.tolerance) << "\n";
    failures += s.failures();
  }
  if (out) {
    curves(*out, log);
    write_run_config(*out, "verify", rc);
  }
  return failures == 0 ? kOk : kVerifyFailed;
}

}  // namespace utal::cli
