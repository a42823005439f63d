#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "bessel.hpp"
#include "error.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "parallel.hpp"

namespace fixelfit {

// Gradients have exactly the shape of the parameters they differentiate.
using GradientBundle = ParameterSet;

inline constexpr std::size_t kParamGroups = 8;
inline constexpr std::array<std::string_view, kParamGroups> kParamGroupNames = {
    "s0_raw", "fraction_logits", "dir_raw", "f_intra_raw",
    "bias_grid", "alpha", "beta", "sigma_log"};

inline std::array<std::span<double>, kParamGroups> param_groups(ParameterSet& p) {
  return {std::span<double>(p.tissue.s0_raw), std::span<double>(p.tissue.fraction_logits),
          std::span<double>(p.tissue.dir_raw), std::span<double>(p.tissue.f_intra_raw),
          std::span<double>(p.cal.bias_grid), std::span<double>(p.cal.alpha),
          std::span<double>(p.cal.beta), std::span<double>(&p.cal.sigma_log, 1)};
}

inline std::array<std::span<const double>, kParamGroups> param_groups(const ParameterSet& p) {
  auto& m = const_cast<ParameterSet&>(p);
  const auto g = param_groups(m);
  std::array<std::span<const double>, kParamGroups> out;
  for (std::size_t i = 0; i < kParamGroups; ++i) out[i] = g[i];
  return out;
}

inline GradientBundle zeros_like(const ParameterSet& p) {
  GradientBundle g;
  g.tissue = TissueParams(p.tissue.k, p.tissue.voxels);
  g.tissue.s0_raw.assign(p.tissue.voxels, 0.0);
  g.cal.bias_grid.assign(p.cal.bias_grid.size(), 0.0);
  g.cal.alpha.assign(p.cal.alpha.size(), 0.0);
  g.cal.beta.assign(p.cal.beta.size(), 0.0);
  g.cal.sigma_log = 0.0;
  return g;
}

struct GradientResult {
  ObjectiveBreakdown breakdown;
  GradientBundle grad;

  double objective() const { return breakdown.total(); }
};

namespace detail {

struct ChunkPartial {
  double data = 0;
  double d_sigma_log = 0;
  std::vector<double> d_alpha, d_beta;
};

}  // namespace detail

// Objective and its exact gradient with respect to every raw parameter.
// Per-voxel work runs in fixed chunks; volume-level gradients are reduced in
// chunk order, so the result does not depend on the thread count.
inline GradientResult evaluate_gradient(const Problem& p, const ParameterSet& params,
                                        int threads = 1) {
  const FitData& fd = *p.data;
  const std::size_t nv = fd.size();
  const std::size_t nm = p.scheme.size();
  if (nv == 0) throw DataError("objective: empty mask");
  const int k = params.tissue.k;
  const std::size_t channels = fraction_channels(k);
  const std::size_t res_ch = restricted_channel(k);
  const ModelConstants& mc = p.constants;
  const bool nll = p.mode == LossMode::kRicianNll;

  const auto t = constrain(params.tissue);
  const CalibrationParams& cal = params.cal;
  if (!std::isfinite(cal.sigma_log)) throw NumericalError("non-finite sigma_log");
  const double sigma2 = std::exp(2 * cal.sigma_log);
  const double inv_s2 = 1.0 / sigma2;
  const double inv_pairs = 1.0 / static_cast<double>(nv);

  const IsotropicTable iso(p.scheme, mc);
  std::vector<double> bu(nm), exp_alpha(nm);
  for (std::size_t n = 0; n < nm; ++n) {
    bu[n] = p.scheme.b(n) * kDiffusivityUnit;
    exp_alpha[n] = std::exp(cal.alpha[n]);
  }
  const BiasInterpolator interp(fd.full_dims);
  std::vector<double> bias(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    const auto& q = fd.voxels[v];
    bias[v] = std::exp(interp.log_field(cal.bias_grid, q[0], q[1], q[2] + fd.z_offset));
  }

  ConstrainedGrad cg(t);
  std::vector<double> d_log_bias(nv, 0.0);
  std::vector<detail::ChunkPartial> partials(chunk_count(nv));

  for_each_chunk(nv, threads, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    auto& part = partials[chunk];
    part.d_alpha.assign(nm, 0.0);
    part.d_beta.assign(nm, 0.0);
    std::vector<double> stick(static_cast<std::size_t>(k)), zep(static_cast<std::size_t>(k)),
        cosines(static_cast<std::size_t>(k));
    for (std::size_t v = begin; v < end; ++v) {
      const double* y = fd.signal(v);
      const auto f = t.fractions_of(v);
      const double s0 = t.s0[v];
      const double fi = t.f_intra[v];
      const double bv = bias[v];
      double* df = cg.fractions.data() + v * channels;
      Vec3* dd = cg.directions.data() + v * static_cast<std::size_t>(k);
      double ds0 = 0, dfi = 0, dlb = 0;
      for (std::size_t n = 0; n < nm; ++n) {
        const bool b0 = p.scheme.is_b0(n);
        double mix = 1.0;
        if (!b0) {
          mix = f[kCsf] * iso.csf[n] + f[kGm] * iso.gm[n] + f[res_ch] * iso.res[n];
          const Vec3& g = p.scheme.direction(n);
          for (int j = 0; j < k; ++j) {
            const auto uj = static_cast<std::size_t>(j);
            const double c = dot(t.directions[v * static_cast<std::size_t>(k) + uj], g);
            const double c2 = c * c;
            cosines[uj] = c;
            stick[uj] = std::exp(-bu[n] * mc.d_par * c2);
            zep[uj] = stick[uj] * std::exp(-bu[n] * mc.d_perp * (1.0 - c2));
            mix += f[kFirstFiber + uj] * (fi * stick[uj] + (1 - fi) * zep[uj]);
          }
        }
        const double s = s0 * mix;
        const double gain = exp_alpha[n] * bv;
        const double y_hat = gain * s + cal.beta[n];

        double dy;  // dL/dy_hat
        if (!nll) {
          const double r = y_hat - y[n];
          part.data += r * r * inv_pairs;
          dy = 2 * r * inv_pairs;
        } else {
          const double yc = std::max(y_hat, 0.0);
          const double z = y[n] * yc * inv_s2;
          const double ratio = bessel_i1_over_i0(z);
          part.data += 2 * cal.sigma_log + (y[n] * y[n] + yc * yc) * 0.5 * inv_s2 - log_i0(z);
          dy = y_hat > 0 ? (yc - y[n] * ratio) * inv_s2 : 0.0;
          part.d_sigma_log += 2 - (y[n] * y[n] + yc * yc) * inv_s2 + 2 * z * ratio;
        }
        if (dy == 0) continue;

        const double scaled_signal = dy * gain * s;
        part.d_alpha[n] += scaled_signal;
        part.d_beta[n] += dy;
        dlb += scaled_signal;
        const double ds = dy * gain;
        ds0 += ds * mix;
        if (b0) continue;
        const double dmix = ds * s0;
        df[kCsf] += dmix * iso.csf[n];
        df[kGm] += dmix * iso.gm[n];
        df[res_ch] += dmix * iso.res[n];
        const Vec3& g = p.scheme.direction(n);
        for (int j = 0; j < k; ++j) {
          const auto uj = static_cast<std::size_t>(j);
          const double fk = f[kFirstFiber + uj];
          df[kFirstFiber + uj] += dmix * (fi * stick[uj] + (1 - fi) * zep[uj]);
          dfi += dmix * fk * (stick[uj] - zep[uj]);
          const double c = cosines[uj];
          const double de_dc = -2 * bu[n] * c *
                               (fi * stick[uj] * mc.d_par + (1 - fi) * zep[uj] * (mc.d_par - mc.d_perp));
          dd[uj] = dd[uj] + scaled(g, dmix * fk * de_dc);
        }
      }
      cg.s0[v] += ds0;
      cg.f_intra[v] += dfi;
      d_log_bias[v] = dlb;
    }
  });

  GradientResult out;
  out.grad = zeros_like(params);
  auto& gc = out.grad.cal;
  for (const auto& part : partials) {
    out.breakdown.data += part.data;
    gc.sigma_log += part.d_sigma_log;
    for (std::size_t n = 0; n < nm; ++n) {
      gc.alpha[n] += part.d_alpha[n];
      gc.beta[n] += part.d_beta[n];
    }
  }
  for (std::size_t v = 0; v < nv; ++v) {
    const auto& q = fd.voxels[v];
    interp.for_each_weight(q[0], q[1], q[2] + fd.z_offset, [&](std::size_t g, double w) {
      gc.bias_grid[g] += d_log_bias[v] * w;
    });
  }
  if (!std::isfinite(out.breakdown.data)) throw NumericalError("objective is not finite");

  tissue_regularizers(t, p, out.breakdown, &cg);

  CalibrationGrad cal_grad;
  cal_grad.alpha.assign(nm, 0.0);
  cal_grad.beta.assign(nm, 0.0);
  out.breakdown.calibration = calibration_penalty(cal, fd.full_dims, p.weights, &cal_grad);
  for (std::size_t n = 0; n < nm; ++n) {
    gc.alpha[n] += cal_grad.alpha[n];
    gc.beta[n] += cal_grad.beta[n];
  }
  for (std::size_t g = 0; g < kBiasGridPoints; ++g) gc.bias_grid[g] += cal_grad.bias_grid[g];

  // Pull constrained-space gradients back through the constraint maps.
  auto& gt = out.grad.tissue;
  const auto& raw = params.tissue;
  for (std::size_t v = 0; v < nv; ++v) {
    gt.s0_raw[v] = cg.s0[v] * sigmoid(raw.s0_raw[v]);
    gt.f_intra_raw[v] = cg.f_intra[v] * t.f_intra[v] * (1 - t.f_intra[v]);
    const auto f = t.fractions_of(v);
    const double* df = cg.fractions.data() + v * channels;
    double inner = 0;
    for (std::size_t c = 0; c < channels; ++c) inner += f[c] * df[c];
    for (std::size_t c = 0; c < channels; ++c)
      gt.fraction_logits[v * channels + c] = f[c] * (df[c] - inner);
    for (int j = 0; j < k; ++j) {
      const std::size_t i = v * static_cast<std::size_t>(k) + static_cast<std::size_t>(j);
      const Vec3& d = t.directions[i];
      const Vec3& gd = cg.directions[i];
      const double len = t.dir_norm[i];
      const Vec3 r{raw.dir_raw[3 * i], raw.dir_raw[3 * i + 1], raw.dir_raw[3 * i + 2]};
      // Below the floor the map is r / floor, a plain scaling.
      const Vec3 gr = norm(r) > kDirectionNormFloor ? scaled(gd - scaled(d, dot(d, gd)), 1.0 / len)
                                                    : scaled(gd, 1.0 / len);
      for (int c = 0; c < 3; ++c) gt.dir_raw[3 * i + static_cast<std::size_t>(c)] = gr[static_cast<std::size_t>(c)];
    }
  }

  for (const auto& group : param_groups(out.grad))
    for (double x : group)
      if (!std::isfinite(x)) throw NumericalError("gradient is not finite");
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct FdGroupReport {
  std::string_view name;
  std::size_t probes = 0;
  double max_error = 0;  // relative error, 0 where |analytic - fd| <= abs_tol
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct FdReport {
  std::array<FdGroupReport, kParamGroups> groups;
  std::size_t probes = 0;

  double max_error() const {
    double m = 0;
    for (const auto& g : groups) m = std::max(m, g.max_error);
    return m;
  }
};

// Compares the analytic gradient against central differences of the reference
// objective at n_probes randomly chosen scalars per parameter group.
inline FdReport fd_check(const Problem& p, const ParameterSet& params, double h,
                         std::size_t n_probes, std::uint64_t seed, double abs_tol = 1e-7) {
  if (!(h > 0)) throw ConfigError("fd_check: step h must be positive");
  const auto analytic = evaluate_gradient(p, params);
  const auto agroups = param_groups(analytic.grad);
  ParameterSet work = params;
  auto wgroups = param_groups(work);
  std::mt19937_64 rng(seed);
  FdReport report;
  for (std::size_t gi = 0; gi < kParamGroups; ++gi) {
    auto& gr = report.groups[gi];
    gr.name = kParamGroupNames[gi];
    const std::size_t size = wgroups[gi].size();
    if (size == 0) continue;
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(size, n_probes));
    for (std::size_t i : idx) {
      double& x = wgroups[gi][i];
      const double x0 = x;
      x = x0 + h;
      const double up = total_objective(p, work).total();
      x = x0 - h;
      const double down = total_objective(p, work).total();
      x = x0;
      const double numeric = (up - down) / (2 * h);
      const double a = agroups[gi][i];
      const double diff = std::fabs(a - numeric);
      const double err =
          diff <= abs_tol ? 0.0 : diff / std::max(std::fabs(a), std::fabs(numeric));
      ++gr.probes;
      ++report.probes;
      if (err > gr.max_error) {
        gr.max_error = err;
        gr.worst_analytic = a;
        gr.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace fixelfit
