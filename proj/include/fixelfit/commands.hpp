#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "io.hpp"
#include "pipeline.hpp"

namespace fixelfit {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitConfig = 2, kExitData = 3, kExitNumerical = 4 };

// Overrides collected from the command line; applied on top of the config file.
struct CliOverrides {
  std::string config_path;
  std::string out_dir;
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  // simulate / benchmark
  std::optional<double> snr, sigma_g;
  std::optional<std::size_t> voxels_per_angle;
  std::optional<std::vector<double>> angles;
  bool full = false, optimizers = false;
  // fit
  std::string data_dir, dwi, bval, bvec, mask;
  std::optional<std::string> mode, optimizer;
  bool no_calibration = false;
  std::optional<int> iterations, k;
  // eval
  std::string fit_dir, truth;
  std::optional<double> f_detect, angle_tol;
  // check-grad
  std::string grad_mode = "both";
  std::size_t probes = 40;
  double h = 1e-4;
};

inline RunConfig load_run_config(const CliOverrides& o) {
  RunConfig c;
  if (!o.config_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text(o.config_path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(o.config_path + ": " + e.what());
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    c = config_from_json(j);
  }
  if (o.threads) c.threads = *o.threads;
  c.fit.threads = c.threads;
  if (o.seed) c.phantom.seed = c.fit.seed = *o.seed;
  if (o.snr) c.phantom.snr = *o.snr;
  if (o.sigma_g) {
    c.phantom.sigma_g = *o.sigma_g;
    c.benchmark.sigma_g = {*o.sigma_g};
  }
  if (o.voxels_per_angle) c.phantom.voxels_per_angle = c.benchmark.voxels_per_angle = *o.voxels_per_angle;
  if (o.angles) c.phantom.angles = *o.angles;
  if (o.full) c.benchmark.full = true;
  if (o.optimizers) c.benchmark.optimizers = true;
  if (!o.data_dir.empty()) {
    const fs::path d(o.data_dir);
    c.paths.dwi = (d / "dwi.nii").string();
    c.paths.bval = (d / "dwi.bval").string();
    c.paths.bvec = (d / "dwi.bvec").string();
    c.paths.mask = fs::exists(d / "mask.nii") ? (d / "mask.nii").string() : "";
    c.paths.truth = (d / "truth.json").string();
  }
  if (!o.dwi.empty()) c.paths.dwi = o.dwi;
  if (!o.bval.empty()) c.paths.bval = o.bval;
  if (!o.bvec.empty()) c.paths.bvec = o.bvec;
  if (!o.mask.empty()) c.paths.mask = o.mask;
  if (!o.fit_dir.empty()) c.paths.fit_dir = o.fit_dir;
  if (!o.truth.empty()) c.paths.truth = o.truth;
  if (o.mode) c.fit.mode = parse_loss_mode(*o.mode);
  if (o.optimizer) {
    if (*o.optimizer == "rprop") c.fit.optimizer = OptimizerKind::kRprop;
    else if (*o.optimizer == "adam") c.fit.optimizer = OptimizerKind::kAdam;
    else throw ConfigError("--optimizer: expected rprop or adam");
  }
  if (o.no_calibration) c.fit.calibration_enabled = false;
  if (o.iterations) c.fit.iterations = *o.iterations;
  if (o.k) c.fit.k = *o.k;
  if (o.f_detect) c.metrics.f_detect = *o.f_detect;
  if (o.angle_tol) c.metrics.angle_tol = *o.angle_tol;
  c.validate();
  return c;
}

inline fs::path prepare_out_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir + ": " + ec.message());
  return fs::path(dir);
}

inline void write_resolved(const RunConfig& c, const fs::path& out) {
  write_json(out / "config.resolved.json", config_to_json(c));
}

// ---------------------------------------------------------------- simulate

inline int cmd_simulate(const RunConfig& c, const fs::path& out, std::ostream& log) {
  const auto scheme = synthetic_scheme(c.scheme.shells, c.scheme.dirs_per_shell, c.scheme.n_b0, c.scheme.seed);
  const auto bm = build_benchmark(c.phantom, scheme);
  write_nifti(to_volume(bm.volume), out / "dwi.nii");
  write_nifti(mask_volume(bm.volume), out / "mask.nii");
  write_scheme(scheme, out / "dwi.bval", out / "dwi.bvec");
  write_json(out / "truth.json", truth_json(bm.truth));
  write_resolved(c, out);
  log << "simulated " << bm.truth.voxels.size() << " voxels (" << bm.volume.dims.nx << "x" << bm.volume.dims.ny
      << "x" << bm.volume.dims.nz << "), " << scheme.size() << " measurements (" << scheme.b0_count()
      << " b0), snr " << c.phantom.snr << ", sigma_g " << c.phantom.sigma_g << ", " << bm.truth.angles.size()
      << " crossing angles -> " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- fit

inline void write_trace(const VolumeFit& fit, const fs::path& path) {
  std::ofstream t(path);
  if (!t) throw DataError("cannot write " + path.string());
  const auto emit = [&](const char* pass, std::size_t slab, const SlabRun& run) {
    for (std::size_t i = 0; i < run.trace.size(); ++i) {
      auto rec = breakdown_json(run.trace[i]);
      rec["pass"] = pass;
      rec["slab"] = slab;
      rec["iteration"] = i;
      t << rec.dump() << "\n";
    }
    nlohmann::json done = {{"pass", pass},
                           {"slab", slab},
                           {"event", "done"},
                           {"z_begin", run.slab.z_begin},
                           {"z_end", run.slab.z_end},
                           {"seconds", run.seconds},
                           {"final", breakdown_json(run.final)}};
    t << done.dump() << "\n";
  };
  if (fit.calibration_pass) emit("calibration", 0, *fit.calibration_pass);
  for (std::size_t s = 0; s < fit.slabs.size(); ++s) emit("slab", s, fit.slabs[s]);
  if (!t) throw DataError("write failed: " + path.string());
}

inline nlohmann::json fit_summary(const VolumeFit& fit, const AcquisitionScheme& scheme, const FitConfig& cfg) {
  double final_loss = 0;
  nlohmann::json slabs = nlohmann::json::array();
  for (const auto& s : fit.slabs) {
    final_loss += s.final.total();
    slabs.push_back({{"z_begin", s.slab.z_begin}, {"z_end", s.slab.z_end}, {"seconds", s.seconds},
                     {"final_loss", s.final.total()}});
  }
  nlohmann::json j = {{"final_loss", final_loss},
                      {"wall_seconds", fit.seconds},
                      {"iterations", fit.iterations},
                      {"voxels", fit.data.size()},
                      {"measurements", fit.data.n_meas},
                      {"mode", to_string(cfg.mode)},
                      {"calibration", cfg.calibration_enabled},
                      {"slabs", slabs},
                      {"reconstruction_mse", reconstruction_mse(fit.predicted(scheme, cfg.constants), fit.data.y)}};
  j["sigma"] = cfg.mode == LossMode::kRicianNll ? nlohmann::json(fit.cal.sigma()) : nlohmann::json(nullptr);
  return j;
}

inline int cmd_fit(const RunConfig& c, const fs::path& out, std::ostream& log) {
  if (c.paths.dwi.empty() || c.paths.bval.empty() || c.paths.bvec.empty())
    throw ConfigError("fit needs --data-dir or --dwi/--bval/--bvec");
  const auto scheme = read_scheme(c.paths.bval, c.paths.bvec);
  const Volume dwi = read_nifti(c.paths.dwi);
  std::optional<Volume> mask;
  if (!c.paths.mask.empty()) mask = read_nifti(c.paths.mask);
  if (static_cast<std::size_t>(dwi.dims[3]) != scheme.size())
    throw DataError("dwi has " + std::to_string(dwi.dims[3]) + " volumes but the scheme has " +
                    std::to_string(scheme.size()) + " measurements");
  const auto sv = from_volume(dwi, mask ? &*mask : nullptr);
  write_resolved(c, out);
  const auto fit = fit_volume(sv, scheme, c.fit);
  write_param_maps(make_param_maps(fit, c.fit.mode), out);
  write_trace(fit, out / "trace.jsonl");
  const auto summary = fit_summary(fit, scheme, c.fit);
  write_json(out / "summary.json", summary);
  log << "fit " << fit.data.size() << " voxels, " << fit.iterations << " iterations, " << fit.slabs.size()
      << " slab(s), mode " << to_string(c.fit.mode) << ": final loss " << summary["final_loss"].get<double>()
      << ", reconstruction mse " << summary["reconstruction_mse"].get<double>();
  if (c.fit.mode == LossMode::kRicianNll) log << ", sigma " << fit.cal.sigma();
  log << ", " << std::fixed << std::setprecision(1) << fit.seconds << " s\n" << std::defaultfloat << std::setprecision(6);
  return kExitOk;
}

// ---------------------------------------------------------------- eval

inline EvalReport evaluate_maps(const ParamMaps& maps, const GroundTruth& truth, const MetricOptions& opt) {
  if (!(maps.dims() == truth.dims)) throw DataError("parameter maps and ground truth grids differ");
  const auto t = maps.tissue();
  const auto peaks_at = [&](std::size_t gi) -> FiberPeakSet {
    if (maps.mask.data[gi] <= 0.5f) return {};
    return extract_peaks(t, gi, opt.f_detect);
  };
  auto rep = evaluate_peaks(truth, peaks_at, opt);
  if (maps.mode == LossMode::kRicianNll) {
    rep.sigma_fit = maps.cal.sigma();
    if (truth.sigma > 0) rep.sigma_rel_error = sigma_recovery(*rep.sigma_fit, truth.sigma);
  }
  return rep;
}

inline void print_report(const EvalReport& r, std::ostream& log) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "angle    voxels  error(deg)  recall  f1\n";
  for (const auto& row : r.rows)
    s << std::left << std::setw(9) << angle_label(row.angle) << std::right << std::setw(6) << row.voxels
      << std::setw(12) << row.mean_error << std::setw(8) << std::setprecision(3) << row.counts.recall()
      << std::setw(7) << row.counts.f1() << std::setprecision(2) << "\n";
  s << "overall " << r.overall_error << " deg, wide-angle " << r.wide_error << " deg, recall "
    << std::setprecision(3) << r.counts.recall() << ", f1 " << r.counts.f1() << " (f_detect " << r.options.f_detect
    << ", tolerance " << r.options.angle_tol << " deg)\n";
  if (r.sigma_fit) {
    s << std::setprecision(5) << "sigma fit " << *r.sigma_fit;
    if (r.sigma_true) s << ", true " << *r.sigma_true << ", relative error " << *r.sigma_rel_error;
    s << "\n";
  }
  if (r.reconstruction_mse) s << std::scientific << "reconstruction mse " << *r.reconstruction_mse << "\n";
  log << s.str();
}

inline int cmd_eval(const RunConfig& c, const fs::path& out, std::ostream& log) {
  if (c.paths.fit_dir.empty()) throw ConfigError("eval needs --fit-dir");
  if (c.paths.truth.empty()) throw ConfigError("eval needs --truth or --data-dir");
  const fs::path fit_dir(c.paths.fit_dir);
  const auto maps = read_param_maps(fit_dir);
  const auto truth = read_truth(c.paths.truth);
  auto rep = evaluate_maps(maps, truth, c.metrics);
  if (fs::exists(fit_dir / "summary.json")) {
    const auto s = read_json(fit_dir / "summary.json");
    if (s.contains("reconstruction_mse") && s["reconstruction_mse"].is_number())
      rep.reconstruction_mse = s["reconstruction_mse"].get<double>();
  }
  write_json(out / "metrics.json", report_json(rep));
  write_text(out / "metrics.csv", report_csv(rep));
  write_resolved(c, out);
  print_report(rep, log);
  return kExitOk;
}

// ---------------------------------------------------------------- benchmark

inline FitConfig crossing_config(const RunConfig& c, LossMode mode) {
  FitConfig f = c.fit;
  f.mode = mode;
  if (c.benchmark.repulsion_only) {
    const auto w = f.weights;
    f.weights = RegWeights::repulsion_only();
    f.weights.lambda_rep = w.lambda_rep;
    f.weights.lambda_alpha = w.lambda_alpha;
    f.weights.lambda_beta = w.lambda_beta;
    f.weights.lambda_bias_l2 = w.lambda_bias_l2;
    f.weights.lambda_bias_tv = w.lambda_bias_tv;
  }
  f.calibration_enabled = c.benchmark.crossing_calibration;
  return f;
}

inline int cmd_benchmark(const RunConfig& c, const fs::path& out, std::ostream& log) {
  using nlohmann::json;
  write_resolved(c, out);
  const auto scheme = synthetic_scheme(c.scheme.shells, c.scheme.dirs_per_shell, c.scheme.n_b0, c.scheme.seed);
  const std::size_t vpa = c.benchmark.effective_voxels();
  json report;

  // Crossing table, both data terms on the same noisy dataset.
  PhantomSpec ps = c.phantom;
  ps.voxels_per_angle = vpa;
  ps.sigma_g = 0;
  const auto bm = build_benchmark(ps, scheme);
  report["scale"] = {{"voxels_per_angle", vpa},
                     {"angles", ps.angles},
                     {"voxels", bm.truth.voxels.size()},
                     {"measurements", scheme.size()},
                     {"iterations", c.fit.iterations},
                     {"threads", c.threads},
                     {"full", c.benchmark.full}};
  log << "benchmark: " << bm.truth.voxels.size() << " voxels (" << vpa << " per angle), snr " << ps.snr << ", "
      << c.fit.iterations << " iterations\n";

  std::ostringstream table;
  table << "method";
  for (double a : ps.angles) table << "," << a;
  if (ps.include_single_fiber) table << ",single";
  table << ",overall,wide_angle,recall,f1,sigma,seconds\n";
  for (const auto& [name, mode] : {std::pair{"mse", LossMode::kMse}, std::pair{"nll", LossMode::kRicianNll}}) {
    const auto run = run_crossing(bm, scheme, crossing_config(c, mode), c.metrics);
    const auto& r = run.report;
    auto rj = report_json(r);
    rj["seconds"] = run.fit.seconds;
    report["crossing"][name] = rj;
    table << name;
    for (const auto& row : r.rows) table << "," << row.mean_error;
    table << "," << r.overall_error << "," << r.wide_error << "," << r.counts.recall() << "," << r.counts.f1() << ","
          << (r.sigma_fit ? std::to_string(*r.sigma_fit) : "") << "," << run.fit.seconds << "\n";
    log << "\n" << name << " (" << std::fixed << std::setprecision(1) << run.fit.seconds << " s)\n"
        << std::defaultfloat << std::setprecision(6);
    print_report(r, log);
  }
  write_text(out / "table.csv", table.str());

  // Gain-perturbation sweep, calibration off vs on.
  std::ostringstream sweep;
  sweep << "sigma_g,calibration,error_deg,reconstruction_mse\n";
  json sweep_json = json::array();
  for (double sg : c.benchmark.sigma_g) {
    PhantomSpec sp = c.phantom;
    sp.angles = c.benchmark.sweep_angles;
    sp.include_single_fiber = false;
    sp.voxels_per_angle = vpa;
    sp.sigma_g = sg;
    const auto sbm = build_benchmark(sp, scheme);
    json entry = {{"sigma_g", sg}};
    double err[2] = {0, 0}, mse[2] = {0, 0};
    for (int on = 0; on < 2; ++on) {
      auto f = crossing_config(c, LossMode::kMse);
      f.calibration_enabled = on == 1;
      const auto run = run_crossing(sbm, scheme, f, c.metrics);
      err[on] = run.report.overall_error;
      mse[on] = *run.report.reconstruction_mse;
      entry[on ? "calibration_on" : "calibration_off"] = {{"error_deg", err[on]}, {"reconstruction_mse", mse[on]}};
      sweep << sg << "," << (on ? "on" : "off") << "," << err[on] << "," << mse[on] << "\n";
    }
    entry["error_reduction"] = err[0] > 0 ? 1 - err[1] / err[0] : 0.0;
    entry["mse_reduction"] = mse[0] > 0 ? 1 - mse[1] / mse[0] : 0.0;
    sweep_json.push_back(entry);
    log << "\nsigma_g " << sg << ": error " << err[0] << " -> " << err[1] << " deg, mse " << mse[0] << " -> "
        << mse[1] << " (calibration off -> on)\n";
  }
  report["sweep"] = sweep_json;
  write_text(out / "sweep.csv", sweep.str());

  if (c.benchmark.optimizers) {
    PhantomSpec op = c.phantom;
    op.include_single_fiber = false;
    op.sigma_g = 0;
    op.voxels_per_angle = std::max<std::size_t>(1, c.benchmark.optimizer_voxels / std::max<std::size_t>(1, op.angles.size()));
    const auto obm = build_benchmark(op, scheme);
    const auto fd = make_fit_data(obm.volume, scheme);
    FitConfig f = crossing_config(c, LossMode::kMse);
    f.k = c.benchmark.optimizer_k;
    f.iterations = c.benchmark.optimizer_iterations;
    json oj = {{"voxels", fd.size()}, {"k", f.k}, {"iterations", f.iterations}};
    std::ostringstream ocsv;
    ocsv << "optimizer,final_mse,iterations_to_110pct,seconds\n";
    for (const auto& [name, kind] : {std::pair{"rprop", OptimizerKind::kRprop}, std::pair{"adam", OptimizerKind::kAdam}}) {
      const auto r = run_optimizer(fd, scheme, f, kind);
      oj[name] = {{"final_mse", r.final_mse}, {"iterations_to_110pct", r.iterations_to(1.1)},
                  {"seconds", r.seconds}, {"mse_trace", r.mse}};
      ocsv << name << "," << r.final_mse << "," << r.iterations_to(1.1) << "," << r.seconds << "\n";
      log << name << ": final mse " << r.final_mse << ", reaches 110% of it at iteration " << r.iterations_to(1.1)
          << "\n";
    }
    report["optimizers"] = oj;
    write_text(out / "optimizers.csv", ocsv.str());
  }
  write_json(out / "benchmark.json", report);
  return kExitOk;
}

// ---------------------------------------------------------------- check-grad

inline int cmd_check_grad(const RunConfig& c, const CliOverrides& o, const std::optional<fs::path>& out,
                          std::ostream& log) {
  std::vector<LossMode> modes;
  if (o.grad_mode == "both") modes = {LossMode::kMse, LossMode::kRicianNll};
  else modes = {parse_loss_mode(o.grad_mode)};
  constexpr double kTolerance = 1e-3;
  nlohmann::json report = nlohmann::json::array();
  bool ok = true;
  for (auto mode : modes) {
    GradCheckOptions g;
    g.mode = mode;
    g.weights = c.fit.weights;
    g.k = c.fit.k;
    g.h = o.h;
    g.probes_per_group = o.probes;
    g.seed = c.fit.seed;
    const auto r = random_gradient_check(g);
    log << "check-grad " << to_string(mode) << ": " << r.probes << " probes, max relative error " << r.max_error()
        << "\n";
    nlohmann::json groups = nlohmann::json::object();
    for (const auto& gr : r.groups) {
      log << "  " << std::left << std::setw(16) << gr.name << std::right << std::setw(4) << gr.probes << "  "
          << gr.max_error << "\n";
      groups[std::string(gr.name)] = {{"probes", gr.probes}, {"max_error", gr.max_error}};
    }
    report.push_back({{"mode", to_string(mode)}, {"probes", r.probes}, {"max_error", r.max_error()}, {"groups", groups}});
    ok = ok && r.max_error() < kTolerance;
  }
  if (out) {
    write_json(*out / "check_grad.json", report);
    write_resolved(c, *out);
  }
  if (!ok) throw NumericalError("analytic gradient disagrees with finite differences");
  return kExitOk;
}

// ---------------------------------------------------------------- entry point

inline int run_cli(int argc, char** argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"fixelfit: multi-compartment diffusion MRI fixel fitting"};
  app.require_subcommand(1, 1);
  CliOverrides o;

  const auto common = [&](CLI::App* s, bool needs_out) {
    s->add_option("-c,--config", o.config_path, "JSON configuration file");
    auto* out = s->add_option("-o,--out", o.out_dir, needs_out ? "output directory" : "output directory (optional)");
    if (needs_out) out->required();
    s->add_option("--threads", o.threads, "worker threads (default: $FIXELFIT_THREADS or 1)")->check(CLI::PositiveNumber);
    s->add_option("--seed", o.seed, "random seed (phantom and initialization)");
  };

  auto* sim = app.add_subcommand("simulate", "generate the synthetic crossing-fiber dataset");
  common(sim, true);
  sim->add_option("--snr", o.snr, "signal-to-noise ratio");
  sim->add_option("--sigma-g", o.sigma_g, "per-measurement log-gain spread");
  sim->add_option("--voxels-per-angle", o.voxels_per_angle);
  sim->add_option("--angles", o.angles, "crossing angles in degrees");

  auto* fit = app.add_subcommand("fit", "fit the model to a dataset");
  common(fit, true);
  fit->add_option("--data-dir", o.data_dir, "directory written by simulate (dwi.nii, dwi.bval, dwi.bvec, mask.nii)");
  fit->add_option("--dwi", o.dwi);
  fit->add_option("--bval", o.bval);
  fit->add_option("--bvec", o.bvec);
  fit->add_option("--mask", o.mask);
  fit->add_option("--mode", o.mode, "data term: mse or nll");
  fit->add_flag("--no-calibration", o.no_calibration, "freeze the calibration at identity");
  fit->add_option("--iterations", o.iterations);
  fit->add_option("-k,--fibers", o.k, "fiber populations per voxel");
  fit->add_option("--optimizer", o.optimizer, "rprop or adam");

  auto* ev = app.add_subcommand("eval", "score a fit against ground truth");
  common(ev, false);
  ev->add_option("--fit-dir", o.fit_dir)->required();
  ev->add_option("--truth", o.truth, "ground-truth JSON");
  ev->add_option("--data-dir", o.data_dir, "dataset directory (uses its truth.json)");
  ev->add_option("--f-detect", o.f_detect, "fraction threshold for a detected fiber");
  ev->add_option("--angle-tol", o.angle_tol, "matching tolerance in degrees");

  auto* bench = app.add_subcommand("benchmark", "simulate, fit in both modes, evaluate");
  common(bench, true);
  bench->add_flag("--full", o.full, "200 voxels per angle instead of 50");
  bench->add_option("--snr", o.snr);
  bench->add_option("--sigma-g", o.sigma_g, "gain perturbation for the calibration sweep");
  bench->add_option("--voxels-per-angle", o.voxels_per_angle);
  bench->add_option("--iterations", o.iterations);
  bench->add_flag("--optimizers", o.optimizers, "add the Rprop vs Adam comparison");
  bench->add_option("--f-detect", o.f_detect);
  bench->add_option("--angle-tol", o.angle_tol);

  auto* grad = app.add_subcommand("check-grad", "compare analytic gradients with finite differences");
  common(grad, false);
  grad->add_option("--mode", o.grad_mode, "mse, nll or both")->capture_default_str();
  grad->add_option("--probes", o.probes, "probed scalars per parameter group")->capture_default_str();
  grad->add_option("--step", o.h, "central-difference step")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, log, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, log, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, log, err);
    return kExitConfig;
  }

  try {
    if (!o.data_dir.empty() && o.truth.empty()) o.truth = (fs::path(o.data_dir) / "truth.json").string();
    const RunConfig c = load_run_config(o);
    if (*sim) return cmd_simulate(c, prepare_out_dir(o.out_dir), log);
    if (*fit) return cmd_fit(c, prepare_out_dir(o.out_dir), log);
    if (*ev) return cmd_eval(c, prepare_out_dir(o.out_dir.empty() ? (fs::path(c.paths.fit_dir) / "eval").string() : o.out_dir), log);
    if (*bench) return cmd_benchmark(c, prepare_out_dir(o.out_dir), log);
    std::optional<fs::path> out;
    if (!o.out_dir.empty()) out = prepare_out_dir(o.out_dir);
    return cmd_check_grad(c, o, out, log);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace fixelfit
