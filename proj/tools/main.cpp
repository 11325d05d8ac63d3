// sae: batch CLI for the plug-in prediction library. Subcommands fit,
// predict, accuracy, and simulate read one JSON config; every output
// embeds the resolved config and master seed so runs are self-describing
// and reproducible bit-for-bit at any --threads value.
#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "sae/accuracy.hpp"
#include "sae/errors.hpp"
#include "sae/frame.hpp"
#include "sae/gbt.hpp"
#include "sae/lmm.hpp"
#include "sae/predictor.hpp"
#include "sae/rng.hpp"
#include "sae/simulation.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct Run {
  json config;
  std::uint64_t seed = 1;
  int threads = 1;
  fs::path out_dir = "out";
};

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sae::ConfigError("cannot open config '" + path + "'");
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw sae::ConfigError("config '" + path + "': " + e.what());
  }
  return cfg;
}

Run resolve(const std::string& config_path, const std::string& seed_flag,
            int threads_flag, const std::string& out_flag) {
  Run run;
  run.config = load_config(config_path);
  if (!seed_flag.empty()) run.config["seed"] = std::stoull(seed_flag);
  if (!out_flag.empty()) run.config["out"] = out_flag;
  run.seed = run.config.value("seed", 1ULL);
  run.config["seed"] = run.seed;
  run.out_dir = run.config.value("out", std::string("out"));
  // neither the worker count nor the output location affects results, so
  // they are not part of the embedded (reproducibility-relevant) config
  run.threads = threads_flag > 0 ? threads_flag
                                 : run.config.value("threads", 1);
  run.config.erase("threads");
  run.config.erase("out");
  fs::create_directories(run.out_dir);
  return run;
}

sae::Schema schema_from(const json& data) {
  sae::Schema schema;
  if (!data.contains("schema")) return schema;
  const json& s = data["schema"];
  schema.domain = s.value("domain", schema.domain);
  schema.unit = s.value("unit", schema.unit);
  schema.period = s.value("period", schema.period);
  schema.in_sample = s.value("in_sample", schema.in_sample);
  schema.y = s.value("y", schema.y);
  if (s.contains("aux")) {
    schema.aux = s["aux"].get<std::vector<std::string>>();
  }
  return schema;
}

sae::LongFrame load_data(const Run& run) {
  if (!run.config.contains("data") || !run.config["data"].contains("path")) {
    throw sae::ConfigError("config has no data.path");
  }
  const json& data = run.config["data"];
  sae::LongFrame frame =
      sae::load_frame(data["path"].get<std::string>(), schema_from(data));
  if (frame.n_sampled() == 0 && data.contains("sample_fraction")) {
    frame = sae::draw_panel_sample(
        frame, data["sample_fraction"].get<double>(),
        sae::rng::mix(run.seed ^ sae::rng::hash_tag("sample")));
  }
  return frame;
}

std::vector<std::string> lmm_aux(const Run& run) {
  if (run.config.contains("model") && run.config["model"].contains("lmm") &&
      run.config["model"]["lmm"].contains("aux")) {
    return run.config["model"]["lmm"]["aux"].get<std::vector<std::string>>();
  }
  return {"1"};
}

bool gb_enabled(const Run& run) {
  return run.config.contains("model") && run.config["model"].contains("gb") &&
         run.config["model"]["gb"].value("enabled", true);
}

sae::GbFeatureOptions gb_features_from(const json& gb) {
  sae::GbFeatureOptions opts;
  if (gb.contains("features")) {
    opts.include_domain_onehot =
        gb["features"].value("domain_onehot", false);
  }
  return opts;
}

sae::GbHyperparams gb_hp_from(const json& hp) {
  sae::GbHyperparams out;
  out.eta = hp.value("eta", out.eta);
  out.n_rounds = hp.value("n_rounds", out.n_rounds);
  out.row_fraction = hp.value("row_fraction", out.row_fraction);
  out.col_fraction = hp.value("col_fraction", out.col_fraction);
  out.max_depth = hp.value("max_depth", out.max_depth);
  out.min_leaf = hp.value("min_leaf", out.min_leaf);
  out.validate();
  return out;
}

json gb_hp_to_json(const sae::GbHyperparams& hp) {
  return json{{"eta", hp.eta},
              {"n_rounds", hp.n_rounds},
              {"row_fraction", hp.row_fraction},
              {"col_fraction", hp.col_fraction},
              {"max_depth", hp.max_depth},
              {"min_leaf", hp.min_leaf}};
}

/// GB hyperparameters: fixed from the config, or chosen by random search
/// plus unit-grouped cross-validation on the sampled rows.
sae::GbHyperparams resolve_gb_hp(const Run& run, const sae::LongFrame& frame,
                                 const sae::GbFeatureOptions& feat) {
  const json& gb = run.config["model"]["gb"];
  if (gb.contains("hyperparams")) return gb_hp_from(gb["hyperparams"]);

  sae::GbSearchSpace space;
  int n_candidates = 20;
  int n_folds = 5;
  if (gb.contains("search")) {
    const json& s = gb["search"];
    space.eta_min = s.value("eta_min", space.eta_min);
    space.eta_max = s.value("eta_max", space.eta_max);
    space.rounds_min = s.value("rounds_min", space.rounds_min);
    space.rounds_max = s.value("rounds_max", space.rounds_max);
    space.row_fraction_min = s.value("row_fraction_min", space.row_fraction_min);
    space.row_fraction_max = s.value("row_fraction_max", space.row_fraction_max);
    space.col_fraction_min = s.value("col_fraction_min", space.col_fraction_min);
    space.col_fraction_max = s.value("col_fraction_max", space.col_fraction_max);
    space.depth_min = s.value("depth_min", space.depth_min);
    space.depth_max = s.value("depth_max", space.depth_max);
    space.leaf_min = s.value("leaf_min", space.leaf_min);
    space.leaf_max = s.value("leaf_max", space.leaf_max);
    n_candidates = s.value("n_candidates", n_candidates);
    n_folds = s.value("n_folds", n_folds);
  }
  const auto candidates = sae::random_search(
      space, n_candidates, sae::rng::mix(run.seed ^ sae::rng::hash_tag("gb-search")));
  const std::vector<std::size_t> rows_s = frame.sampled_indices();
  const Eigen::MatrixXd x_s = sae::gb_features(frame, rows_s, feat);
  Eigen::VectorXd y_s(rows_s.size());
  std::vector<std::string> units;
  for (std::size_t i = 0; i < rows_s.size(); ++i) {
    y_s[static_cast<Eigen::Index>(i)] = *frame.row(rows_s[i]).y;
    units.push_back(frame.row(rows_s[i]).unit_id);
  }
  return sae::tune_cv(x_s, y_s, units, candidates, n_folds,
                      sae::rng::mix(run.seed ^ sae::rng::hash_tag("gb-cv")),
                      run.threads);
}

std::vector<sae::ThetaSpec> thetas_from_array(const json& arr) {
  std::vector<sae::ThetaSpec> out;
  for (const json& t : arr) {
    sae::ThetaSpec spec;
    spec.statistic =
        sae::statistic_from_string(t.value("statistic", std::string("mean")));
    spec.domain = t.value("domain", std::string(sae::kAllDomains));
    spec.period = t.value("period", 1);
    spec.p = t.value("p", 0.5);
    spec.validate();
    out.push_back(spec);
  }
  if (out.empty()) throw sae::ConfigError("theta block is empty");
  return out;
}

std::vector<sae::ThetaSpec> thetas_from(const Run& run) {
  if (!run.config.contains("theta")) {
    throw sae::ConfigError("config has no theta block");
  }
  return thetas_from_array(run.config["theta"]);
}

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw sae::ConfigError("cannot write '" + path.string() + "'");
  out << content;
}

void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::string csv_preamble(const Run& run) {
  return "# seed " + std::to_string(run.seed) + " config " +
         run.config.dump() + "\n";
}

json lmm_fit_to_json(const sae::LmmFit& fit) {
  json beta = json::array();
  for (Eigen::Index i = 0; i < fit.beta.size(); ++i) beta.push_back(fit.beta[i]);
  json v_hat = json::object();
  for (const auto& [d, v] : fit.v_hat) v_hat[d] = v;
  return json{{"beta", beta},
              {"beta_names", fit.beta_names},
              {"sigma2_u", fit.sigma2_u},
              {"sigma2_e", fit.sigma2_e},
              {"v_hat", v_hat},
              {"reml_loglik", fit.reml_loglik},
              {"converged", fit.converged}};
}

json gb_model_to_json(const sae::GbModel& model) {
  json trees = json::array();
  for (const sae::Tree& t : model.trees) {
    json nodes = json::array();
    for (const sae::TreeNode& n : t.nodes) {
      nodes.push_back(json{{"feature", n.feature},
                           {"threshold", n.threshold},
                           {"value", n.value},
                           {"left", n.left},
                           {"right", n.right}});
    }
    trees.push_back(json{{"nodes", nodes}});
  }
  return json{{"eta", model.eta},
              {"feature_names", model.feature_names},
              {"trees", trees}};
}

// ---- subcommands ----

int cmd_fit(const Run& run) {
  const sae::LongFrame frame = load_data(run);
  const std::vector<std::string> aux = lmm_aux(run);
  const sae::LmmFit fit = sae::fit_reml(frame, aux);

  json out{{"seed", run.seed}, {"config", run.config},
           {"lmm", lmm_fit_to_json(fit)}};
  write_json(run.out_dir / "lmm_fit.json", out);

  if (gb_enabled(run)) {
    const json& gb = run.config["model"]["gb"];
    const sae::GbFeatureOptions feat = gb_features_from(gb);
    const sae::GbHyperparams hp = resolve_gb_hp(run, frame, feat);
    const std::vector<std::size_t> rows_s = frame.sampled_indices();
    std::vector<std::string> names;
    const Eigen::MatrixXd x_s = sae::gb_features(frame, rows_s, feat, &names);
    Eigen::VectorXd y_s(rows_s.size());
    for (std::size_t i = 0; i < rows_s.size(); ++i) {
      y_s[static_cast<Eigen::Index>(i)] = *frame.row(rows_s[i]).y;
    }
    const sae::GbModel model =
        sae::fit_gb(x_s, y_s, hp,
                    sae::rng::mix(run.seed ^ sae::rng::hash_tag("gb-fit")), names);
    json gout{{"seed", run.seed}, {"config", run.config},
              {"hyperparams", gb_hp_to_json(hp)},
              {"model", gb_model_to_json(model)}};
    write_json(run.out_dir / "gb_model.json", gout);
  }
  return 0;
}

int cmd_predict(const Run& run) {
  const sae::LongFrame frame = load_data(run);
  const std::vector<sae::ThetaSpec> thetas = thetas_from(run);
  const std::vector<std::string> aux = lmm_aux(run);
  const sae::LmmFit fit = sae::fit_reml(frame, aux);

  bool use_gb = gb_enabled(run);
  sae::GbModel gb_model;
  sae::GbFeatureOptions feat;
  if (use_gb) {
    const json& gb = run.config["model"]["gb"];
    feat = gb_features_from(gb);
    const sae::GbHyperparams hp = resolve_gb_hp(run, frame, feat);
    const std::vector<std::size_t> rows_s = frame.sampled_indices();
    std::vector<std::string> names;
    const Eigen::MatrixXd x_s = sae::gb_features(frame, rows_s, feat, &names);
    Eigen::VectorXd y_s(rows_s.size());
    for (std::size_t i = 0; i < rows_s.size(); ++i) {
      y_s[static_cast<Eigen::Index>(i)] = *frame.row(rows_s[i]).y;
    }
    gb_model = sae::fit_gb(
        x_s, y_s, hp, sae::rng::mix(run.seed ^ sae::rng::hash_tag("gb-fit")),
        names);
  }

  std::string csv = csv_preamble(run);
  csv += "predictor,statistic,domain,period,p,value\n";
  for (const sae::ThetaSpec& spec : thetas) {
    auto emit = [&](const std::string& kind, double value) {
      csv += kind + "," + sae::to_string(spec.statistic) + "," + spec.domain +
             "," + std::to_string(spec.period) + "," +
             (spec.statistic == sae::Statistic::quantile ? fmt(spec.p) : "") +
             "," + fmt(value) + "\n";
    };
    emit("lmm", sae::plug_in_predict_lmm(frame, fit, aux, spec));
    if (use_gb) {
      emit("gb", sae::plug_in_predict_gb(frame, gb_model, feat, spec));
    }
  }
  write_text(run.out_dir / "predictions.csv", csv);
  return 0;
}

int cmd_accuracy(const Run& run) {
  const sae::LongFrame frame = load_data(run);
  const std::vector<sae::ThetaSpec> thetas = thetas_from(run);
  const std::vector<std::string> aux = lmm_aux(run);
  const sae::LmmFit fit = sae::fit_reml(frame, aux);

  if (!run.config.contains("accuracy")) {
    throw sae::ConfigError("config has no accuracy block");
  }
  const json& acc = run.config["accuracy"];
  const int B = acc.value("B", 200);
  const int C = acc.value("C", 1);
  std::vector<std::string> variants{"param", "rb", "rbCor"};
  if (acc.contains("variants")) {
    variants = acc["variants"].get<std::vector<std::string>>();
  }
  std::vector<double> qape_orders{0.5, 0.75, 0.99};
  if (acc.contains("qape_orders")) {
    qape_orders = acc["qape_orders"].get<std::vector<double>>();
  }

  std::vector<sae::PredictorSetup> predictors{{}};
  if (gb_enabled(run)) {
    const json& gb = run.config["model"]["gb"];
    sae::PredictorSetup setup;
    setup.kind = sae::PredictorKind::gb;
    setup.gb_feat = gb_features_from(gb);
    setup.gb_hp = resolve_gb_hp(run, frame, setup.gb_feat);
    predictors.push_back(setup);
  }

  json reports = json::array();
  std::string csv = csv_preamble(run);
  csv += "predictor,estimator,measure,p,value,B,C,seed\n";
  for (const sae::ThetaSpec& spec : thetas) {
    const sae::AccuracyReport report = sae::estimate_accuracy(
        fit, frame, aux, predictors, spec, variants, qape_orders, B, C,
        sae::rng::mix(run.seed ^ sae::rng::hash_tag(spec.label())),
        run.threads);
    json cells = json::array();
    for (const sae::AccuracyCell& c : report.cells) {
      cells.push_back(json{{"predictor", c.predictor},
                           {"estimator", c.estimator},
                           {"measure", c.measure},
                           {"p", c.p},
                           {"value", c.value}});
      csv += c.predictor + "," + c.estimator + "," + c.measure + "," +
             fmt(c.p) + "," + fmt(c.value) + "," + std::to_string(report.B) +
             "," + std::to_string(report.C) + "," + std::to_string(run.seed) +
             "\n";
    }
    reports.push_back(json{{"theta", spec.label()},
                           {"B", report.B},
                           {"C", report.C},
                           {"failed_redraws", report.failed_redraws},
                           {"correction_skipped", report.correction_skipped},
                           {"cells", cells}});
  }
  write_json(run.out_dir / "accuracy.json",
             json{{"seed", run.seed}, {"config", run.config},
                  {"reports", reports}});
  write_text(run.out_dir / "accuracy.csv", csv);
  return 0;
}

int cmd_simulate(const Run& run) {
  if (!run.config.contains("simulation")) {
    throw sae::ConfigError("config has no simulation block");
  }
  const json& sim = run.config["simulation"];

  sae::LongFrame frame = [&] {
    if (sim.contains("synthetic")) {
      const json& sy = sim["synthetic"];
      sae::SyntheticSpec sp;
      sp.n_domains = sy.value("n_domains", sp.n_domains);
      sp.units_per_domain = sy.value("units_per_domain", sp.units_per_domain);
      sp.n_periods = sy.value("n_periods", sp.n_periods);
      return sae::synthetic_frame(
          sp, sae::rng::mix(run.seed ^ sae::rng::hash_tag("synthetic")));
    }
    return load_data(run);
  }();

  sae::McConfig mc;
  if (sim.contains("mc")) {
    const json& m = sim["mc"];
    mc.K = m.value("K", mc.K);
    mc.B = m.value("B", mc.B);
    mc.C = m.value("C", mc.C);
    mc.fraction = m.value("fraction", mc.fraction);
  }
  mc.thetas =
      sim.contains("theta") ? thetas_from_array(sim["theta"]) : thetas_from(run);
  mc.lmm_aux = lmm_aux(run);
  mc.seed = run.seed;
  mc.n_threads = run.threads;
  if (run.config.contains("accuracy")) {
    const json& acc = run.config["accuracy"];
    if (acc.contains("variants")) {
      mc.estimator_variants = acc["variants"].get<std::vector<std::string>>();
    }
    if (acc.contains("qape_orders")) {
      mc.qape_orders = acc["qape_orders"].get<std::vector<double>>();
    }
  }
  mc.predictors = {{}};
  if (gb_enabled(run)) {
    const json& gb = run.config["model"]["gb"];
    sae::PredictorSetup setup;
    setup.kind = sae::PredictorKind::gb;
    setup.gb_feat = gb_features_from(gb);
    setup.gb_hp = gb.contains("hyperparams") ? gb_hp_from(gb["hyperparams"])
                                             : sae::GbHyperparams{};
    mc.predictors.push_back(setup);
  }
  mc.validate();

  std::vector<std::string> scenario_names{"LM"};
  if (sim.contains("scenarios")) {
    scenario_names = sim["scenarios"].get<std::vector<std::string>>();
  }
  const bool run_estimators = sim.value("estimators", false);

  auto spec_for = [&](sae::ScenarioKind kind) {
    if (sim.contains("spec")) {
      const json& s = sim["spec"];
      sae::ScenarioSpec spec;
      spec.kind = kind;
      const auto beta = s["beta"].get<std::vector<double>>();
      spec.beta_pop = Eigen::Map<const Eigen::VectorXd>(
          beta.data(), static_cast<Eigen::Index>(beta.size()));
      spec.sigma2_u_pop = s.value("sigma2_u", 0.0);
      spec.sigma2_e_pop = s.value("sigma2_e", 0.0);
      spec.a = sae::scenario_scale_divisor(kind);
      spec.validate();
      return spec;
    }
    // calibrate on the frame's full response
    return sae::calibrate_params(frame, kind);
  };

  std::string pred_csv = csv_preamble(run);
  pred_csv += "scenario,predictor,estimator,theta,measure,p,value\n";
  std::string est_csv = pred_csv;
  auto append_rows = [](std::string& csv, const sae::MeasureTable& table) {
    for (const sae::MeasureRow& r : table.rows) {
      csv += r.scenario + "," + r.predictor + "," + r.estimator + "," +
             r.theta + "," + r.measure + "," + fmt(r.p) + "," + fmt(r.value) +
             "\n";
    }
  };

  for (const std::string& name : scenario_names) {
    const sae::ScenarioKind kind = sae::scenario_kind_from_string(name);
    sae::ScenarioSpec spec = spec_for(kind);
    // NLM10/NLM20 reuse NLM1 mean-structure coefficients; only the random
    // components are rescaled via the divisor
    if (kind == sae::ScenarioKind::NLM10 || kind == sae::ScenarioKind::NLM20) {
      if (!sim.contains("spec")) {
        spec = spec_for(sae::ScenarioKind::NLM1);
        spec.kind = kind;
        spec.a = sae::scenario_scale_divisor(kind);
      }
    }
    append_rows(pred_csv, sae::mc_predictors(mc, spec, frame));
    if (run_estimators) {
      append_rows(est_csv, sae::mc_accuracy_estimators(mc, spec, frame));
    }
  }
  write_text(run.out_dir / "simulation_predictors.csv", pred_csv);
  if (run_estimators) {
    write_text(run.out_dir / "simulation_estimators.csv", est_csv);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plug-in prediction of subpopulation characteristics"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seed_flag;
  int threads_flag = 0;
  std::string out_flag;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file")->required();
    cmd->add_option("--seed", seed_flag, "master seed (overrides config)");
    cmd->add_option("--threads", threads_flag, "worker threads");
    cmd->add_option("--out", out_flag, "output directory (overrides config)");
  };
  CLI::App* fit = app.add_subcommand("fit", "fit models on the sample");
  CLI::App* predict = app.add_subcommand("predict", "plug-in predictions");
  CLI::App* accuracy = app.add_subcommand("accuracy", "bootstrap accuracy");
  CLI::App* simulate = app.add_subcommand("simulate", "Monte Carlo studies");
  for (CLI::App* cmd : {fit, predict, accuracy, simulate}) add_common(cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    const Run run = resolve(config_path, seed_flag, threads_flag, out_flag);
    if (app.got_subcommand(fit)) return cmd_fit(run);
    if (app.got_subcommand(predict)) return cmd_predict(run);
    if (app.got_subcommand(accuracy)) return cmd_accuracy(run);
    if (app.got_subcommand(simulate)) return cmd_simulate(run);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
