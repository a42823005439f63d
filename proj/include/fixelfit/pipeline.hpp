#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "acquisition.hpp"
#include "gradient.hpp"
#include "metrics.hpp"
#include "optimizer.hpp"
#include "phantom.hpp"

namespace fixelfit {

// Scores a fitted volume against benchmark ground truth.
inline EvalReport evaluate_fit(const VolumeFit& fit, const GroundTruth& truth,
                               const AcquisitionScheme& scheme, const FitConfig& config,
                               const MetricOptions& opt = {}) {
  require(fit.data.full_dims == truth.dims, "evaluate: fit and ground truth grids differ");
  const auto peaks_at = [&](std::size_t grid_index) -> FiberPeakSet {
    const int v = fit.data.grid_to_voxel[grid_index];
    if (v < 0) return {};
    return extract_peaks(fit.tissue, static_cast<std::size_t>(v), opt.f_detect);
  };
  auto rep = evaluate_peaks(truth, peaks_at, opt);
  rep.reconstruction_mse = reconstruction_mse(fit.predicted(scheme, config.constants), fit.data.y);
  if (config.mode == LossMode::kRicianNll) {
    rep.sigma_fit = fit.cal.sigma();
    if (truth.sigma > 0) rep.sigma_rel_error = sigma_recovery(*rep.sigma_fit, truth.sigma);
  }
  return rep;
}

struct CrossingRun {
  VolumeFit fit;
  EvalReport report;
};

inline CrossingRun run_crossing(const Benchmark& bm, const AcquisitionScheme& scheme, const FitConfig& config,
                                const MetricOptions& opt = {}) {
  CrossingRun r{fit_volume(bm.volume, scheme, config), {}};
  r.report = evaluate_fit(r.fit, bm.truth, scheme, config, opt);
  return r;
}

// Data-term MSE (mean over voxel-measurement pairs) along one optimizer run.
struct OptimizerRun {
  std::vector<double> mse;  // before each update
  double final_mse = 0;
  double seconds = 0;

  // First iteration whose MSE is within `factor` of the run's own final value.
  int iterations_to(double factor) const {
    for (std::size_t i = 0; i < mse.size(); ++i)
      if (mse[i] <= factor * final_mse) return static_cast<int>(i);
    return static_cast<int>(mse.size());
  }
};

inline OptimizerRun run_optimizer(const FitData& fd, const AcquisitionScheme& scheme, FitConfig config,
                                  OptimizerKind kind) {
  require(config.mode == LossMode::kMse, "optimizer comparison runs in MSE mode");
  config.optimizer = kind;
  const auto fit = fit_patch(fd, scheme, config);
  const auto n = static_cast<double>(fd.n_meas);
  OptimizerRun r;
  for (const auto& b : fit.trace) r.mse.push_back(b.data / n);
  r.final_mse = fit.final.data / n;
  r.seconds = fit.seconds;
  return r;
}

// Random parameter state on a small random problem, used to validate the
// analytic gradient against finite differences.
struct GradCheckOptions {
  LossMode mode = LossMode::kMse;
  RegWeights weights;  // defaults: every term enabled
  int k = 3;
  GridDims dims{4, 3, 3};
  double h = 1e-4;
  std::size_t probes_per_group = 40;
  std::uint64_t seed = 7;
  double abs_tol = 1e-7;
};

inline FdReport random_gradient_check(const GradCheckOptions& o) {
  const auto scheme = synthetic_scheme({1000, 2000}, 6, 1, o.seed);
  std::mt19937_64 rng(o.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SignalVolume vol(o.dims, scheme.size());
  for (std::size_t v = 0; v < vol.dims.voxels(); ++v) {
    vol.mask[v] = unif(rng) > 0.15;
    for (std::size_t n = 0; n < scheme.size(); ++n)
      vol.voxel(v)[n] = scheme.is_b0(n) ? 1.0 : 0.05 + 0.9 * unif(rng);
  }
  vol.mask[0] = true;
  const auto fd = make_fit_data(vol, scheme);
  const Problem problem(fd, scheme, ModelConstants{}, o.mode, o.weights);

  ParameterSet p;
  auto& t = p.tissue;
  t.k = o.k;
  t.voxels = fd.size();
  for (std::size_t v = 0; v < t.voxels; ++v) {
    // A third of the voxels sit inside the orphan-WM gate's transition.
    t.s0_raw.push_back(v % 3 == 0 ? softplus_inverse(0.08 + 0.04 * unif(rng)) : 0.5 + 0.5 * gauss(rng));
    t.f_intra_raw.push_back(gauss(rng));
    for (std::size_t c = 0; c < fraction_channels(o.k); ++c) t.fraction_logits.push_back(gauss(rng));
    for (int j = 0; j < 3 * o.k; ++j) t.dir_raw.push_back(gauss(rng));
  }
  p.cal = CalibrationParams(scheme.size(), std::log(0.1) + 0.2 * gauss(rng));
  for (auto& g : p.cal.bias_grid) g = 0.2 * gauss(rng);
  for (auto& a : p.cal.alpha) a = 0.1 * gauss(rng);
  for (auto& b : p.cal.beta) b = 0.02 * gauss(rng);
  return fd_check(problem, p, o.h, o.probes_per_group, o.seed + 1, o.abs_tol);
}

}  // namespace fixelfit
