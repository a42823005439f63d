#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "error.hpp"
#include "gradient.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "volume.hpp"

namespace fixelfit {

// ---------------------------------------------------------------------------
// Rprop

enum class RpropVariant {
  kRpropMinus,   // on a sign change: shrink the step, still move, forget the sign
  kIRpropMinus,  // on a sign change: shrink the step and skip the move
};

struct RpropParams {
  double eta_plus = 1.2;
  double eta_minus = 0.5;
  double step_init = 0.01;
  double step_min = 1e-8;
  double step_max = 1.0;
  RpropVariant variant = RpropVariant::kRpropMinus;

  void validate() const {
    require(eta_plus > 1 && eta_minus > 0 && eta_minus < 1, "rprop: need 0 < eta- < 1 < eta+");
    require(step_min > 0 && step_min <= step_init && step_init <= step_max,
            "rprop: need 0 < step_min <= step_init <= step_max");
  }
};

inline int sign_of(double x) { return (x > 0) - (x < 0); }

// Per-scalar step sizes and previous gradient signs for every parameter group.
struct RpropState {
  RpropParams params;
  std::array<std::vector<double>, kParamGroups> step;
  std::array<std::vector<std::int8_t>, kParamGroups> prev_sign;

  RpropState() = default;
  RpropState(const ParameterSet& shape, RpropParams p) : params(p) {
    params.validate();
    const auto groups = param_groups(shape);
    for (std::size_t g = 0; g < kParamGroups; ++g) {
      step[g].assign(groups[g].size(), params.step_init);
      prev_sign[g].assign(groups[g].size(), 0);
    }
  }
};

inline void rprop_update(std::span<double> x, std::span<const double> grad, std::span<double> step,
                         std::span<std::int8_t> prev_sign, const RpropParams& p) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericalError("rprop: non-finite gradient");
    const int s = sign_of(grad[i]);
    const int agreement = s * prev_sign[i];
    if (agreement > 0) {
      step[i] = std::min(step[i] * p.eta_plus, p.step_max);
    } else if (agreement < 0) {
      step[i] = std::max(step[i] * p.eta_minus, p.step_min);
      prev_sign[i] = 0;
      if (p.variant == RpropVariant::kRpropMinus) x[i] -= s * step[i];
      continue;
    }
    x[i] -= s * step[i];
    prev_sign[i] = static_cast<std::int8_t>(s);
  }
}

// trainable[g] == false leaves group g (and its state) untouched.
inline void rprop_step(ParameterSet& params, const GradientBundle& grads, RpropState& state,
                       const std::array<bool, kParamGroups>& trainable) {
  auto x = param_groups(params);
  const auto g = param_groups(grads);
  for (std::size_t i = 0; i < kParamGroups; ++i)
    if (trainable[i]) rprop_update(x[i], g[i], state.step[i], state.prev_sign[i], state.params);
}

inline void rprop_step(ParameterSet& params, const GradientBundle& grads, RpropState& state) {
  std::array<bool, kParamGroups> all;
  all.fill(true);
  rprop_step(params, grads, state, all);
}

// ---------------------------------------------------------------------------
// Adam, kept as a reference optimizer for comparisons.

struct AdamParams {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamParams params;
  long t = 0;
  std::array<std::vector<double>, kParamGroups> m, v;

  AdamState() = default;
  AdamState(const ParameterSet& shape, AdamParams p) : params(p) {
    const auto groups = param_groups(shape);
    for (std::size_t g = 0; g < kParamGroups; ++g) {
      m[g].assign(groups[g].size(), 0.0);
      v[g].assign(groups[g].size(), 0.0);
    }
  }
};

inline void adam_step(ParameterSet& params, const GradientBundle& grads, AdamState& state,
                      const std::array<bool, kParamGroups>& trainable) {
  ++state.t;
  const auto& p = state.params;
  const double c1 = 1 - std::pow(p.beta1, static_cast<double>(state.t));
  const double c2 = 1 - std::pow(p.beta2, static_cast<double>(state.t));
  auto x = param_groups(params);
  const auto g = param_groups(grads);
  for (std::size_t i = 0; i < kParamGroups; ++i) {
    if (!trainable[i]) continue;
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double gj = g[i][j];
      if (!std::isfinite(gj)) throw NumericalError("adam: non-finite gradient");
      state.m[i][j] = p.beta1 * state.m[i][j] + (1 - p.beta1) * gj;
      state.v[i][j] = p.beta2 * state.v[i][j] + (1 - p.beta2) * gj * gj;
      x[i][j] -= p.lr * (state.m[i][j] / c1) / (std::sqrt(state.v[i][j] / c2) + p.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Fitting

enum class OptimizerKind { kRprop, kAdam };

struct InitPolicy {
  double s0 = 1.0;       // b0-normalized data
  double sigma = 0.05;   // NLL starting noise level
};

struct FitConfig {
  int k = 2;
  LossMode mode = LossMode::kMse;
  RegWeights weights;
  ModelConstants constants;
  int iterations = 300;
  int slab_size = 30;
  int slab_overlap = 5;
  std::uint64_t seed = 0;
  bool calibration_enabled = true;
  InitPolicy init;
  OptimizerKind optimizer = OptimizerKind::kRprop;
  RpropParams rprop;
  AdamParams adam;
  int threads = 1;

  void validate() const {
    require(k >= 1, "K must be >= 1");
    require(iterations >= 1, "iterations must be >= 1");
    require(slab_overlap > 0 && slab_overlap < slab_size, "need 0 < slab_overlap < slab_size");
    require(init.s0 > 0 && init.sigma > 0, "init s0 and sigma must be positive");
    weights.validate();
    constants.validate();
    rprop.validate();
    require(adam.lr > 0, "adam lr must be positive");
  }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent, order-free random stream for (seed, stream, index).
inline std::mt19937_64 substream(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ splitmix64(stream)) + index));
}

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  Vec3 v;
  do {
    v = {gauss(rng), gauss(rng), gauss(rng)};
  } while (norm(v) < 1e-6);
  return normalized(v);
}

// Fresh parameters. Directions are drawn per voxel from a stream keyed by the
// voxel's position in the full volume, so the draw does not depend on slabbing.
inline ParameterSet init_params(const FitData& fd, const FitConfig& config, std::uint64_t seed) {
  if (fd.size() == 0) throw DataError("init_params: empty mask");
  ParameterSet p;
  p.tissue = TissueParams(config.k, fd.size());
  std::fill(p.tissue.s0_raw.begin(), p.tissue.s0_raw.end(), softplus_inverse(config.init.s0));
  for (std::size_t v = 0; v < fd.size(); ++v) {
    const auto& q = fd.voxels[v];
    auto rng = substream(seed, 0x1a17, fd.full_dims.linear(q[0], q[1], q[2] + fd.z_offset));
    for (int j = 0; j < config.k; ++j) {
      const Vec3 d = random_unit_vector(rng);
      const std::size_t i = v * static_cast<std::size_t>(config.k) + static_cast<std::size_t>(j);
      for (int c = 0; c < 3; ++c) p.tissue.dir_raw[3 * i + static_cast<std::size_t>(c)] = d[static_cast<std::size_t>(c)];
    }
  }
  p.cal = CalibrationParams(fd.n_meas, std::log(config.init.sigma));
  return p;
}

struct PatchFit {
  ParameterSet params;
  std::vector<ObjectiveBreakdown> trace;  // objective before each update
  ObjectiveBreakdown initial;
  ObjectiveBreakdown final;
  double seconds = 0;
};

// Which parameter groups move during a fit.
inline std::array<bool, kParamGroups> trainable_groups(const FitConfig& config, bool cal_frozen) {
  const bool cal = config.calibration_enabled && !cal_frozen;
  return {true, true, true, true, cal, cal, cal,
          config.mode == LossMode::kRicianNll && !cal_frozen};
}

// b0 measurements define the normalization scale (they are 1 after b0
// normalization), so their per-measurement affine terms stay at identity.
inline void pin_reference_measurements(GradientBundle& grad, const AcquisitionScheme& scheme) {
  for (std::size_t n = 0; n < scheme.size(); ++n)
    if (scheme.is_b0(n)) grad.cal.alpha[n] = grad.cal.beta[n] = 0.0;
}

// Runs the optimizer for a fixed iteration budget. When fixed_cal is given the
// calibration is held at that value.
inline PatchFit fit_patch(const FitData& fd, const AcquisitionScheme& scheme, const FitConfig& config,
                          const std::optional<CalibrationParams>& fixed_cal = std::nullopt) {
  config.validate();
  if (fd.size() == 0) throw DataError("fit_patch: no masked voxels");
  const auto start = std::chrono::steady_clock::now();
  const Problem problem(fd, scheme, config.constants, config.mode, config.weights);
  PatchFit out;
  out.params = init_params(fd, config, config.seed);
  if (fixed_cal) {
    require(fixed_cal->alpha.size() == fd.n_meas, "fixed calibration has the wrong length");
    out.params.cal = *fixed_cal;
  }
  const auto trainable = trainable_groups(config, fixed_cal.has_value());
  RpropState rprop;
  AdamState adam;
  if (config.optimizer == OptimizerKind::kRprop)
    rprop = RpropState(out.params, config.rprop);
  else
    adam = AdamState(out.params, config.adam);

  out.trace.reserve(static_cast<std::size_t>(config.iterations));
  for (int it = 0; it < config.iterations; ++it) {
    auto g = evaluate_gradient(problem, out.params, config.threads);
    out.trace.push_back(g.breakdown);
    pin_reference_measurements(g.grad, scheme);
    if (config.optimizer == OptimizerKind::kRprop)
      rprop_step(out.params, g.grad, rprop, trainable);
    else
      adam_step(out.params, g.grad, adam, trainable);
  }
  out.initial = out.trace.front();
  out.final = evaluate_gradient(problem, out.params, config.threads).breakdown;
  if (!std::isfinite(out.final.total())) throw NumericalError("fit diverged");
  if (out.final.total() > out.initial.total())
    throw NumericalError("fit made no progress: final objective " +
                         std::to_string(out.final.total()) + " > initial " +
                         std::to_string(out.initial.total()));
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------------------------------------------------------------------
// Slabs

struct Slab {
  int z_begin = 0, z_end = 0;
  friend bool operator==(const Slab&, const Slab&) = default;
};

inline std::vector<Slab> slab_partition(int nz, int slab_size, int overlap) {
  require(nz >= 1, "slab_partition: volume needs at least one slice");
  require(overlap > 0 && overlap < slab_size, "slab_partition: need 0 < overlap < slab_size");
  std::vector<Slab> slabs;
  int begin = 0;
  while (true) {
    const int end = std::min(begin + slab_size, nz);
    slabs.push_back({begin, end});
    if (end == nz) break;
    begin = end - overlap;
  }
  return slabs;
}

// Linear ramp over the slices a slab shares with its neighbors.
inline double slab_weight(const std::vector<Slab>& slabs, std::size_t s, int z) {
  const Slab& cur = slabs[s];
  const int lead = s > 0 ? std::max(0, slabs[s - 1].z_end - cur.z_begin) : 0;
  const int trail = s + 1 < slabs.size() ? std::max(0, cur.z_end - slabs[s + 1].z_begin) : 0;
  double w = 1.0;
  if (z < cur.z_begin + lead) w = std::min(w, static_cast<double>(z - cur.z_begin + 1) / (lead + 1));
  if (z >= cur.z_end - trail) w = std::min(w, static_cast<double>(cur.z_end - z) / (trail + 1));
  return w;
}

struct SlabRun {
  Slab slab;
  std::vector<ObjectiveBreakdown> trace;
  double seconds = 0;
  ObjectiveBreakdown final;
};

// Stitched constrained fields over the masked voxels of a whole volume.
struct VolumeFit {
  FitData data;
  ConstrainedTissue tissue;
  CalibrationParams cal;
  std::optional<SlabRun> calibration_pass;
  std::vector<SlabRun> slabs;
  int iterations = 0;
  double seconds = 0;

  std::vector<double> predicted(const AcquisitionScheme& scheme, const ModelConstants& mc) const {
    return predict_compact(tissue, cal, scheme, mc, data);
  }
};

inline VolumeFit fit_volume(const SignalVolume& vol, const AcquisitionScheme& scheme,
                            const FitConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  VolumeFit out;
  out.data = make_fit_data(vol, scheme);
  if (out.data.size() == 0) throw DataError("fit_volume: mask is empty");
  out.iterations = config.iterations;
  const auto slabs = slab_partition(vol.dims.nz, config.slab_size, config.slab_overlap);

  if (slabs.size() == 1) {
    auto fit = fit_patch(out.data, scheme, config);
    out.tissue = constrain(fit.params.tissue);
    out.cal = fit.params.cal;
    out.slabs.push_back({slabs[0], std::move(fit.trace), fit.seconds, fit.final});
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
  }

  // Volume-level parameters are fitted once on the whole volume, then held
  // fixed while slabs are fitted.
  CalibrationParams cal(scheme.size(), std::log(config.init.sigma));
  if (config.calibration_enabled || config.mode == LossMode::kRicianNll) {
    auto pre = fit_patch(out.data, scheme, config);
    cal = pre.params.cal;
    out.calibration_pass = SlabRun{{0, vol.dims.nz}, std::move(pre.trace), pre.seconds, pre.final};
  }
  out.cal = cal;

  const std::size_t nv = out.data.size();
  const std::size_t channels = fraction_channels(config.k);
  const auto uk = static_cast<std::size_t>(config.k);
  auto& t = out.tissue;
  t.k = config.k;
  t.voxels = nv;
  t.s0.assign(nv, 0.0);
  t.fractions.assign(nv * channels, 0.0);
  t.directions.assign(nv * uk, Vec3{0, 0, 0});
  t.dir_norm.assign(nv * uk, 1.0);
  t.f_intra.assign(nv, 0.0);
  std::vector<double> wsum(nv, 0.0), wbest(nv, -1.0);

  for (std::size_t s = 0; s < slabs.size(); ++s) {
    const auto sub = make_fit_data(vol, scheme, slabs[s].z_begin, slabs[s].z_end);
    if (sub.size() == 0) {
      out.slabs.push_back({slabs[s], {}, 0.0, {}});
      continue;
    }
    auto fit = fit_patch(sub, scheme, config, cal);
    const auto ct = constrain(fit.params.tissue);
    for (std::size_t i = 0; i < sub.size(); ++i) {
      const auto& q = sub.voxels[i];
      const int z = q[2] + slabs[s].z_begin;
      const int gi = out.data.grid_to_voxel[out.data.dims.linear(q[0], q[1], z)];
      if (gi < 0) continue;
      const auto v = static_cast<std::size_t>(gi);
      const double w = slab_weight(slabs, s, z);
      wsum[v] += w;
      t.s0[v] += w * ct.s0[i];
      t.f_intra[v] += w * ct.f_intra[i];
      for (std::size_t c = 0; c < channels; ++c)
        t.fractions[v * channels + c] += w * ct.fractions[i * channels + c];
      if (w > wbest[v]) {
        wbest[v] = w;
        for (std::size_t j = 0; j < uk; ++j) t.directions[v * uk + j] = ct.directions[i * uk + j];
      }
    }
    out.slabs.push_back({slabs[s], std::move(fit.trace), fit.seconds, fit.final});
  }
  for (std::size_t v = 0; v < nv; ++v) {
    t.s0[v] /= wsum[v];
    t.f_intra[v] /= wsum[v];
    for (std::size_t c = 0; c < channels; ++c) t.fractions[v * channels + c] /= wsum[v];
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace fixelfit
