// slf: command-line driver for the transformer survival toolkit.
//
// Commands: simulate | train | evaluate | occlude | predict
// Exit codes: 0 success, 2 input error, 3 data insufficiency,
//             4 numerical failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slf/cox.hpp"
#include "slf/data.hpp"
#include "slf/interpret.hpp"
#include "slf/metrics.hpp"
#include "slf/model.hpp"
#include "slf/simgen.hpp"
#include "slf/trainers.hpp"

namespace fs = std::filesystem;
using namespace slf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

// One configurable key: a CLI option plus a from-string setter so the same
// key works in a key=value config file. Flags win over file entries.
struct KeyTable {
  CLI::App* cmd = nullptr;
  std::vector<std::pair<std::string, std::function<void(const std::string&)>>>
      setters;

  template <typename T>
  void add(const std::string& key, T& target, const std::string& help) {
    cmd->add_option("--" + key, target, help);
    setters.emplace_back(key, [&target](const std::string& text) {
      std::istringstream in(text);
      in >> target;
      if (in.fail() || !in.eof())
        throw InputError("config: bad value for key '" + std::string() +
                         "': " + text);
    });
  }

  void add_flag(const std::string& key, bool& target,
                const std::string& help) {
    cmd->add_flag("--" + key, target, help);
    setters.emplace_back(key, [&target](const std::string& text) {
      if (text == "1" || text == "true" || text == "yes")
        target = true;
      else if (text == "0" || text == "false" || text == "no")
        target = false;
      else
        throw InputError("config: boolean expected, got '" + text + "'");
    });
  }

  void add_string(const std::string& key, std::string& target,
                  const std::string& help) {
    cmd->add_option("--" + key, target, help);
    setters.emplace_back(key,
                         [&target](const std::string& text) { target = text; });
  }

  // Applies key=value lines; command-line occurrences take precedence.
  void apply_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw InputError("config: missing '=' at line " +
                         std::to_string(lineno));
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      auto it = std::find_if(setters.begin(), setters.end(),
                             [&](const auto& kv) { return kv.first == key; });
      if (it == setters.end())
        throw InputError("config: unknown key '" + key + "' at line " +
                         std::to_string(lineno));
      const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
      if (opt != nullptr && opt->count() > 0) continue;  // flag wins
      it->second(value);
    }
  }
};

std::vector<double> parse_number_list(const std::string& text,
                                      const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InputError("bad " + what + " entry: '" + item + "'");
    }
  }
  if (out.empty()) throw InputError(what + " list is empty");
  return out;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

void require_out_dir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw InputError("cannot create output directory: " + out);
  const fs::path probe = fs::path(out) / ".slf_write_probe";
  std::ofstream test(probe);
  if (!test) throw InputError("output directory is not writable: " + out);
  test.close();
  fs::remove(probe, ec);
}

struct Logger {
  bool quiet = false;
  template <typename... Args>
  void info(const char* format, Args... args) const {
    if (quiet) return;
    std::printf(format, args...);
    std::printf("\n");
  }
  void info(const char* message) const {
    if (quiet) return;
    std::printf("%s\n", message);
  }
};

// ---- simulate ------------------------------------------------------------

struct SimulateArgs {
  SimConfig sim;
  std::string out;
  std::string config_path;
  bool quiet = false;
};

int run_simulate(const SimulateArgs& args) {
  require_out_dir(args.out);
  args.sim.validate();
  Dataset ds = generate_cohort(args.sim);

  std::string canonical;
  for (const auto& [k, v] : ds.meta) canonical += k + "=" + v + "\n";
  ds.meta["config-hash"] = hex64(fnv1a_hash(canonical));
  write_dataset(args.out, ds);

  Logger log{args.quiet};
  log.info("simulate: wrote %zu patients to %s (seed %llu, hash %s)",
           ds.size(), args.out.c_str(),
           static_cast<unsigned long long>(args.sim.seed),
           ds.meta["config-hash"].c_str());
  return kExitOk;
}

// ---- shared model/train flag blocks ---------------------------------------

struct ModelFlags {
  ModelConfig mc;
  void wire(KeyTable& keys) {
    keys.add("patches", mc.patches, "patches per image (perfect square)");
    keys.add("embed-dim", mc.embed_dim, "embedding dimension d");
    keys.add("heads", mc.heads, "attention heads");
    keys.add("vision-layers", mc.vision_layers, "vision encoder layers");
    keys.add("seq-layers", mc.sequence_layers, "sequence encoder layers");
    keys.add("ffn-dim", mc.ffn_dim, "feed-forward width");
    keys.add("surv-hidden", mc.survival_hidden, "survival head width");
    keys.add("max-visits", mc.max_visits, "maximum sequence length");
    keys.add("dropout", mc.dropout, "FFN dropout rate");
    keys.add_flag("seq-pos-embedding", mc.sequence_pos_embedding,
                  "enable the learnable sequence positional embedding");
  }
};

struct TrainFlags {
  TrainConfig tc;
  double landmark_months = 12.0;
  void wire(KeyTable& keys) {
    keys.add("landmark-months", landmark_months, "landmark time t* in months");
    keys.add("lambda", tc.lambda, "elastic-net strength");
    keys.add("alpha", tc.alpha, "elastic-net mixing in [0,1]");
    keys.add("lr", tc.learning_rate, "Adam learning rate");
    keys.add("epochs", tc.epochs, "maximum epochs");
    keys.add("patience", tc.patience, "early-stop patience (0 disables)");
    keys.add("val-fraction", tc.val_fraction, "held-out validation share");
    keys.add("threads", tc.threads, "worker threads for per-patient passes");
  }
};

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config_path;
  std::uint64_t seed = 1;
  bool quiet = false;
  ModelFlags model;
  TrainFlags train;
};

int run_train(const TrainArgs& args) {
  require_out_dir(args.out);
  const Dataset ds = read_dataset(args.data);
  if (ds.patients.empty())
    throw InsufficientDataError("train: dataset is empty");

  ModelConfig mc = args.model.mc;
  mc.covariate_dim = ds.patients.front().seq.covariates.size();
  mc.seed = mix_seed(args.seed, 0x7EA1ULL);
  TrainConfig tc = args.train.tc;
  tc.seed = args.seed;
  tc.landmark = args.train.landmark_months / ds.horizon_months();

  const TrainResult result = train(ds.patients, mc, tc);

  save_checkpoint((fs::path(args.out) / "checkpoint.slf").string(), mc,
                  result.params);
  write_trace_csv((fs::path(args.out) / "trace.csv").string(), result.trace);
  write_breslow_csv((fs::path(args.out) / "breslow.csv").string(),
                    result.baseline);

  Logger log{args.quiet};
  log.info(
      "train: %zu patients at landmark %.4g months, %zu events; "
      "best epoch %d (val loss %.6g); %zu epochs recorded",
      result.cohort_size, args.train.landmark_months, result.event_count,
      result.best_epoch, result.best_val_loss, result.trace.size());
  log.info("train: wrote checkpoint.slf, trace.csv, breslow.csv to %s",
           args.out.c_str());
  return kExitOk;
}

// ---- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  std::string data;
  std::string out;
  std::string config_path;
  std::string methods = "surlonformer,fpca-cox";
  std::string t_star_list = "12,18,24";
  std::string dt_list = "12,24,48";
  std::string checkpoint;  // optional fixed model for the deep method
  int folds = 4;
  double pve = 0.95;
  std::uint64_t seed = 1;
  bool quiet = false;
  ModelFlags model;
  TrainFlags train;
};

int run_evaluate(const EvaluateArgs& args) {
  require_out_dir(args.out);
  const Dataset ds = read_dataset(args.data);
  if (ds.patients.empty())
    throw InsufficientDataError("evaluate: dataset is empty");

  std::vector<Scenario> scenarios;
  for (double t : parse_number_list(args.t_star_list, "t-star"))
    for (double dt : parse_number_list(args.dt_list, "dt")) {
      if (t + dt > ds.horizon_months())
        throw InputError("scenario beyond the horizon: t*+dt > horizon");
      scenarios.push_back({t, dt});
    }

  std::vector<std::string> methods;
  {
    std::stringstream ss(args.methods);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) methods.push_back(item);
  }
  if (methods.empty()) throw InputError("evaluate: no methods requested");

  Logger log{args.quiet};
  std::vector<EvaluationReport> reports;
  for (const std::string& method : methods) {
    Trainer trainer;
    if (method == "surlonformer") {
      ModelConfig mc = args.model.mc;
      mc.covariate_dim = ds.patients.front().seq.covariates.size();
      TrainConfig tc = args.train.tc;
      if (!args.checkpoint.empty()) {
        // Fixed pre-trained model: no per-fold retraining; the baseline
        // hazard still comes from the training folds' risks.
        const Checkpoint ck = load_checkpoint(args.checkpoint);
        auto params = std::make_shared<ParameterStore>(ck.store);
        const ModelConfig cfg = ck.config;
        trainer = [params, cfg](const std::vector<const Patient*>& train_set,
                                double t_star, std::uint64_t) {
          const LandmarkCohort cohort = landmark_filter(
              std::span<const Patient* const>(train_set), t_star);
          std::vector<double> risks;
          std::vector<SurvivalRecord> recs;
          for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
            risks.push_back(risk_score(cohort.patients[i]->seq,
                                       cohort.landmark_visits[i], *params,
                                       cfg));
            recs.push_back(cohort.patients[i]->rec);
          }
          LandmarkPredictor predictor;
          predictor.baseline = breslow_baseline(risks, recs);
          predictor.risk = [params, cfg](const Patient& p, std::size_t j) {
            return risk_score(p.seq, j, *params, cfg);
          };
          return predictor;
        };
      } else {
        trainer = make_surlonformer_trainer(mc, tc);
      }
    } else if (method == "fpca-cox") {
      trainer = make_fpca_cox_trainer(args.pve);
    } else if (method == "oracle") {
      for (const Patient& p : ds.patients)
        if (!p.has_true_risk())
          throw InputError(
              "evaluate: oracle method needs true risks (simulated data)");
      trainer = make_oracle_trainer();
    } else {
      throw InputError("evaluate: unknown method '" + method + "'");
    }
    log.info("evaluate: running %s over %d folds, %zu scenarios",
             method.c_str(), args.folds, scenarios.size());
    reports.push_back(cross_validate(ds, args.folds, scenarios, trainer,
                                     args.seed, method));
  }

  write_report_folds_csv((fs::path(args.out) / "report_folds.csv").string(),
                         reports);
  write_report_aggregate_csv(
      (fs::path(args.out) / "report_aggregate.csv").string(), reports);
  log.info("evaluate: wrote report_folds.csv and report_aggregate.csv to %s",
           args.out.c_str());
  return kExitOk;
}

// ---- occlude ---------------------------------------------------------------

struct OccludeArgs {
  std::string data;
  std::string checkpoint;
  std::string patient;
  std::string out;
  std::string config_path;
  double landmark_months = 12.0;
  std::size_t region_side = 8;
  double fill = 0.0;
  bool signed_maps = false;
  bool quiet = false;
};

const Patient& find_patient(const Dataset& ds, const std::string& id) {
  for (const Patient& p : ds.patients)
    if (p.seq.id == id) return p;
  throw InputError("unknown patient id: " + id);
}

int run_occlude(const OccludeArgs& args) {
  require_out_dir(args.out);
  const Dataset ds = read_dataset(args.data);
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  const Patient& patient = find_patient(ds, args.patient);

  const double t_std = args.landmark_months / ds.horizon_months();
  if (patient.rec.time_at_risk < t_std)
    throw InputError("patient is not event-free at the landmark");
  const std::size_t jstar = patient.seq.visits_at_or_before(t_std);
  if (jstar == 0)
    throw InputError("patient has no image at or before the landmark");

  const OcclusionResult result =
      occlusion_sensitivity(ck.store, ck.config, patient.seq, jstar,
                            args.region_side, args.fill, args.signed_maps);

  write_sensitivity_csv((fs::path(args.out) / "occlusion.csv").string(),
                        result.maps);

  // One overlay per visit, min-max normalized across all visits jointly so
  // panels share a scale.
  double lo = result.maps[0].values[0], hi = lo;
  for (const SensitivityMap& map : result.maps)
    for (std::size_t k = 0; k < map.values.size(); ++k) {
      lo = std::min(lo, map.values[k]);
      hi = std::max(hi, map.values[k]);
    }
  for (const SensitivityMap& map : result.maps) {
    char name[64];
    std::snprintf(name, sizeof name, "occlusion_v%02zu.svg", map.visit);
    std::ofstream svg(fs::path(args.out) / name);
    svg << render_heatmap(map, patient.seq.images[map.visit],
                          std::make_pair(lo, hi));
  }

  std::ofstream meta(fs::path(args.out) / "occlusion_meta.txt");
  meta << "patient=" << args.patient << "\n"
       << "landmark-months=" << args.landmark_months << "\n"
       << "landmark-visits=" << jstar << "\n"
       << "region-side=" << args.region_side << "\n"
       << "fill=" << args.fill << "\n"
       << "signed=" << (args.signed_maps ? 1 : 0) << "\n"
       << "probes=" << result.probe_count << "\n"
       << "baseline-risk=" << result.baseline_risk << "\n";

  Logger log{args.quiet};
  log.info("occlude: patient %s, %zu visits, probes=%zu, baseline risk %.6g",
           args.patient.c_str(), jstar, result.probe_count,
           result.baseline_risk);
  log.info("occlude: wrote occlusion.csv and %zu SVG maps to %s",
           result.maps.size(), args.out.c_str());
  return kExitOk;
}

// ---- predict ---------------------------------------------------------------

struct PredictArgs {
  std::string data;
  std::string checkpoint;
  std::string breslow;
  std::string patient;
  std::string out;
  std::string config_path;
  double t_star_months = 12.0;
  std::string dt_grid = "0,6,12,18,24,36,48";
  bool force_zero_risk = false;
  bool quiet = false;
};

int run_predict(const PredictArgs& args) {
  require_out_dir(args.out);
  const Dataset ds = read_dataset(args.data);
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  const std::string breslow_path =
      args.breslow.empty()
          ? (fs::path(args.checkpoint).parent_path() / "breslow.csv").string()
          : args.breslow;
  const BaselineHazardTable table = read_breslow_csv(breslow_path);
  const Patient& patient = find_patient(ds, args.patient);

  const double horizon = ds.horizon_months();
  const double t_std = args.t_star_months / horizon;
  if (patient.rec.time_at_risk < t_std)
    throw InputError("patient is not event-free at the landmark");
  const std::size_t jstar = patient.seq.visits_at_or_before(t_std);
  if (jstar == 0)
    throw InputError("patient has no image at or before the landmark");

  const std::vector<double> dt_months =
      parse_number_list(args.dt_grid, "dt-grid");
  for (std::size_t k = 1; k < dt_months.size(); ++k)
    if (dt_months[k] < dt_months[k - 1])
      throw InputError("dt-grid must be ascending");
  if (args.t_star_months + dt_months.back() > horizon)
    throw InputError("dt-grid extends beyond the horizon");

  const double risk = args.force_zero_risk
                          ? 0.0
                          : risk_score(patient.seq, jstar, ck.store, ck.config);

  std::vector<double> dt_std(dt_months.size());
  for (std::size_t k = 0; k < dt_months.size(); ++k)
    dt_std[k] = dt_months[k] / horizon;
  const std::vector<CurvePoint> curve =
      dynamic_survival_curve(risk, table, t_std, dt_std);

  std::ofstream csv(fs::path(args.out) / "curve.csv");
  csv << "dt_months,probability\n";
  std::vector<CurvePoint> plot;
  for (std::size_t k = 0; k < curve.size(); ++k) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", curve[k].probability);
    csv << dt_months[k] << ',' << buf << '\n';
    plot.push_back({dt_months[k], curve[k].probability});
  }
  std::ofstream svg(fs::path(args.out) / "curve.svg");
  svg << render_curve_svg(plot);

  Logger log{args.quiet};
  log.info("predict: patient %s at t*=%.4g months, risk %.6g, %zu points",
           args.patient.c_str(), args.t_star_months, risk, curve.size());
  log.info("predict: wrote curve.csv and curve.svg to %s", args.out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer-based dynamic survival prediction toolkit"};
  app.require_subcommand(1);

  SimulateArgs sim;
  TrainArgs tr;
  EvaluateArgs ev;
  OccludeArgs oc;
  PredictArgs pr;

  KeyTable sim_keys, train_keys, eval_keys, occ_keys, pred_keys;

  // simulate
  {
    CLI::App* cmd = app.add_subcommand("simulate", "generate a synthetic cohort");
    sim_keys.cmd = cmd;
    cmd->add_option("--out", sim.out, "output dataset directory")->required();
    cmd->add_option("--config", sim.config_path, "key=value config file");
    cmd->add_flag("--quiet", sim.quiet, "suppress progress output");
    sim_keys.add("cohort", sim.sim.cohort, "number of patients");
    sim_keys.add("image-side", sim.sim.image_side, "image side in pixels");
    sim_keys.add("visit-months", sim.sim.visit_months, "visit spacing");
    sim_keys.add("horizon-months", sim.sim.horizon_months, "study horizon");
    sim_keys.add("baseline-log-hazard", sim.sim.baseline_log_hazard,
                 "per-month baseline log hazard");
    sim_keys.add("noise-variance", sim.sim.noise_variance,
                 "pixel noise variance");
    sim_keys.add("censor-fraction", sim.sim.censor_fraction,
                 "extra censoring fraction");
    sim_keys.add("seed", sim.sim.seed, "master seed");
  }
  // train
  {
    CLI::App* cmd = app.add_subcommand("train", "fit the survival transformer");
    train_keys.cmd = cmd;
    cmd->add_option("--data", tr.data, "dataset directory")->required();
    cmd->add_option("--out", tr.out, "output directory")->required();
    cmd->add_option("--config", tr.config_path, "key=value config file");
    cmd->add_flag("--quiet", tr.quiet, "suppress progress output");
    train_keys.add("seed", tr.seed, "training seed");
    tr.model.wire(train_keys);
    tr.train.wire(train_keys);
  }
  // evaluate
  {
    CLI::App* cmd =
        app.add_subcommand("evaluate", "cross-validated scenario evaluation");
    eval_keys.cmd = cmd;
    cmd->add_option("--data", ev.data, "dataset directory")->required();
    cmd->add_option("--out", ev.out, "output directory")->required();
    cmd->add_option("--config", ev.config_path, "key=value config file");
    cmd->add_flag("--quiet", ev.quiet, "suppress progress output");
    eval_keys.add_string("methods", ev.methods,
                         "comma list: surlonformer,fpca-cox,oracle");
    eval_keys.add_string("t-star", ev.t_star_list, "landmark months list");
    eval_keys.add_string("dt", ev.dt_list, "increment months list");
    eval_keys.add("folds", ev.folds, "cross-validation folds");
    eval_keys.add("pve", ev.pve, "FPCA variance-explained target");
    eval_keys.add("seed", ev.seed, "evaluation seed");
    eval_keys.add_string("checkpoint", ev.checkpoint,
                         "fixed checkpoint for the deep method");
    ev.model.wire(eval_keys);
    ev.train.wire(eval_keys);
  }
  // occlude
  {
    CLI::App* cmd =
        app.add_subcommand("occlude", "occlusion sensitivity maps");
    occ_keys.cmd = cmd;
    cmd->add_option("--data", oc.data, "dataset directory")->required();
    cmd->add_option("--checkpoint", oc.checkpoint, "model checkpoint")
        ->required();
    cmd->add_option("--patient", oc.patient, "patient id")->required();
    cmd->add_option("--out", oc.out, "output directory")->required();
    cmd->add_option("--config", oc.config_path, "key=value config file");
    cmd->add_flag("--quiet", oc.quiet, "suppress progress output");
    occ_keys.add("landmark-months", oc.landmark_months, "landmark time");
    occ_keys.add("region-side", oc.region_side, "occlusion region side");
    occ_keys.add("fill", oc.fill, "baseline fill value");
    occ_keys.add_flag("signed", oc.signed_maps, "signed sensitivities");
  }
  // predict
  {
    CLI::App* cmd =
        app.add_subcommand("predict", "dynamic survival curve for a patient");
    pred_keys.cmd = cmd;
    cmd->add_option("--data", pr.data, "dataset directory")->required();
    cmd->add_option("--checkpoint", pr.checkpoint, "model checkpoint")
        ->required();
    cmd->add_option("--patient", pr.patient, "patient id")->required();
    cmd->add_option("--out", pr.out, "output directory")->required();
    cmd->add_option("--config", pr.config_path, "key=value config file");
    cmd->add_flag("--quiet", pr.quiet, "suppress progress output");
    pred_keys.add("t-star-months", pr.t_star_months, "landmark time");
    pred_keys.add_string("dt-grid", pr.dt_grid, "ascending months grid");
    pred_keys.add_string("breslow", pr.breslow,
                         "baseline hazard CSV (default: next to checkpoint)");
    pred_keys.add_flag("force-zero-risk", pr.force_zero_risk,
                       "use r = 0 instead of the model risk");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (app.got_subcommand("simulate")) {
      if (!sim.config_path.empty()) sim_keys.apply_config(sim.config_path);
      return run_simulate(sim);
    }
    if (app.got_subcommand("train")) {
      if (!tr.config_path.empty()) train_keys.apply_config(tr.config_path);
      return run_train(tr);
    }
    if (app.got_subcommand("evaluate")) {
      if (!ev.config_path.empty()) eval_keys.apply_config(ev.config_path);
      return run_evaluate(ev);
    }
    if (app.got_subcommand("occlude")) {
      if (!oc.config_path.empty()) occ_keys.apply_config(oc.config_path);
      return run_occlude(oc);
    }
    if (app.got_subcommand("predict")) {
      if (!pr.config_path.empty()) pred_keys.apply_config(pr.config_path);
      return run_predict(pr);
    }
  } catch (const InsufficientDataError& e) {
    std::fprintf(stderr, "error (data): %s\n", e.what());
    return kExitData;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error (numeric): %s\n", e.what());
    return kExitNumeric;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error (input): %s\n", e.what());
    return kExitInput;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error (input): %s\n", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitInput;
}
