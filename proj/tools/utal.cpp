// SPDX-License-Identifier: Apache-2.0
//
// utal: generate synthetic data, train, evaluate and verify.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "utal/cli.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string loss;
  std::string condition_mode;
  std::optional<int> threads;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonFlags& f, bool needs_out) {
  sub->add_option("--config", f.config, "key = value config file");
  sub->add_option("--seed", f.seed, "master seed (falls back to UTAL_SEED)");
  sub->add_option("--loss", f.loss, "regression loss")->check(CLI::IsMember({"l1", "kl_l1", "sampled_l1", "expected_l1"}));
  sub->add_option("--condition-mode", f.condition_mode, "KL-l1 branch convention")->check(CLI::IsMember({"he", "paper"}));
  sub->add_option("--threads", f.threads, "worker cap (1 keeps runs bit-reproducible)");
  auto* out = sub->add_option("--out", f.out, "output directory");
  if (needs_out) out->required();
  sub->add_option("--set", f.overrides, "override one setting, e.g. --set train.epochs=10");
}

utal::RunConfig resolve(const CommonFlags& f) {
  utal::RunConfig rc = utal::cli::base_config(std::getenv("UTAL_SEED"));
  if (!f.config.empty()) utal::apply_config_file(rc, f.config);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw utal::ConfigError("--set expects key=value, got '" + kv + "'");
    utal::apply_setting(rc, utal::detail::trim(kv.substr(0, eq)), utal::detail::trim(kv.substr(eq + 1)));
  }
  if (f.seed) rc.seed = *f.seed;
  if (!f.loss.empty()) utal::apply_setting(rc, "train.loss", f.loss);
  if (!f.condition_mode.empty()) utal::apply_setting(rc, "train.condition_mode", f.condition_mode);
  if (f.threads) rc.threads = *f.threads;
  rc.sync();
  utal::validate(rc);
  Eigen::setNbThreads(rc.threads);
  return rc;
}

std::optional<std::filesystem::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::filesystem::path(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-aware temporal action localization"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, eval_f, verify_f, curves_f;
  std::string split, manifest, checkpoint, init, suite = "all", inject;
  bool oracle = false;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_common(gen, gen_f, true);
  gen->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* tr = app.add_subcommand("train", "train a model on a manifest");
  add_common(tr, train_f, true);
  tr->add_option("--manifest", manifest, "dataset manifest.json")->required();
  tr->add_option("--init", init, "start from this checkpoint");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  add_common(ev, eval_f, false);
  ev->add_option("--manifest", manifest, "dataset manifest.json")->required();
  auto* ck = ev->add_option("--checkpoint", checkpoint, "model.utal");
  auto* orc = ev->add_flag("--oracle", oracle, "score the annotation oracle instead of a model");
  ck->excludes(orc);

  auto* ve = app.add_subcommand("verify", "run the numerical self-checks");
  add_common(ve, verify_f, false);
  ve->add_option("--suite", suite, "all, expectation, gradients, kl or monotonicity")
      ->check(CLI::IsMember({"all", "expectation", "gradients", "kl", "monotonicity"}));
  ve->add_option("--inject", inject, "deliberate fault for the expectation check")
      ->check(CLI::IsMember({"printed-expectation"}));

  auto* cu = app.add_subcommand("curves", "write loss-surface CSVs");
  add_common(cu, curves_f, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return utal::cli::kUsage;
  }

  namespace cli = utal::cli;
  return cli::guarded([&]() -> int {
    if (gen->parsed()) {
      if (!split.empty()) gen_f.overrides.push_back("data.split=" + split);
      return cli::gen_data(resolve(gen_f), gen_f.out);
    }
    if (tr->parsed()) return cli::train(resolve(train_f), manifest, train_f.out, optional_path(init));
    if (ev->parsed()) {
      if (checkpoint.empty() && !oracle) throw utal::ConfigError("eval needs --checkpoint or --oracle");
      return cli::eval(resolve(eval_f), manifest, optional_path(checkpoint), optional_path(eval_f.out));
    }
    if (ve->parsed()) return cli::verify_cmd(resolve(verify_f), suite, !inject.empty(), optional_path(verify_f.out));
    if (cu->parsed()) {
      resolve(curves_f);
      return cli::curves(curves_f.out);
    }
    return cli::kUsage;
  });
}
