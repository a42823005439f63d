#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acquisition.hpp"
#include "bessel.hpp"
#include "error.hpp"
#include "model.hpp"
#include "volume.hpp"

namespace fixelfit {

enum class LossMode { kMse, kRicianNll };

inline std::string to_string(LossMode m) { return m == LossMode::kMse ? "mse" : "nll"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "mse") return LossMode::kMse;
  if (s == "nll" || s == "rician" || s == "rician_nll") return LossMode::kRicianNll;
  throw ConfigError("unknown loss mode '" + s + "' (expected mse or nll)");
}

struct RegWeights {
  double lambda_sp = 0.01;
  double lambda_rep = 0.01;
  double lambda_sparse = 0.02;
  double tau = 0.15;
  double lambda_orphan = 0.01;
  double lambda_cont = 0.005;
  double lambda_order = 0.01;
  double huber_delta = 0.05;
  int neighborhood = 6;
  double lambda_alpha = 0.1;
  double lambda_beta = 0.1;
  double lambda_bias_l2 = 0.1;
  double lambda_bias_tv = 0.1;
  // Orphan-WM gate: sigmoid((s_low - S0) / width).
  double orphan_s_low = 0.1;
  double orphan_width = 0.01;

  void validate() const {
    for (double w : {lambda_sp, lambda_rep, lambda_sparse, tau, lambda_orphan, lambda_cont,
                     lambda_order, lambda_alpha, lambda_beta, lambda_bias_l2, lambda_bias_tv})
      require(w >= 0 && std::isfinite(w), "regularizer weights must be finite and >= 0");
    require(huber_delta > 0, "huber_delta must be positive");
    require(orphan_width > 0, "orphan_width must be positive");
    require(neighborhood == 6 || neighborhood == 26, "neighborhood must be 6 or 26");
  }

  // Direction repulsion only, as used on the synthetic benchmark.
  static RegWeights repulsion_only() {
    RegWeights w;
    w.lambda_sp = w.lambda_sparse = w.lambda_orphan = w.lambda_cont = w.lambda_order = 0;
    return w;
  }

  bool needs_neighborhood() const { return lambda_sp > 0 || lambda_cont > 0; }
};

// ---------------------------------------------------------------------------
// Data fidelity

inline double mse_loss(std::span<const double> y_hat, std::span<const double> y) {
  require(y_hat.size() == y.size(), "mse_loss: shape mismatch");
  if (y.empty()) throw DataError("mse_loss: empty mask");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y_hat[i] - y[i];
    s += r * r;
  }
  return s / static_cast<double>(y.size());
}

inline double mse_loss(const SignalVolume& y_hat, const SignalVolume& y,
                       const std::vector<bool>& mask) {
  require(y_hat.dims == y.dims && y_hat.n_meas == y.n_meas && mask.size() == y.dims.voxels(),
          "mse_loss: shape mismatch");
  double s = 0;
  std::size_t count = 0;
  for (std::size_t v = 0; v < mask.size(); ++v) {
    if (!mask[v]) continue;
    for (std::size_t n = 0; n < y.n_meas; ++n) {
      const double r = y_hat.voxel(v)[n] - y.voxel(v)[n];
      s += r * r;
    }
    count += y.n_meas;
  }
  if (count == 0) throw DataError("mse_loss: empty mask");
  return s / static_cast<double>(count);
}

// Data term of the MSE objective: squared residuals summed over measurements
// and averaged over voxels, i.e. n_meas * mse_loss.
inline double mse_data_term(std::span<const double> y_hat, std::span<const double> y,
                            std::size_t n_meas) {
  return mse_loss(y_hat, y) * static_cast<double>(n_meas);
}

// One Rician negative log-likelihood term; y_hat is clamped at zero.
inline double rician_nll_term(double y_hat, double y, double sigma) {
  const double s2 = sigma * sigma;
  const double yc = std::max(y_hat, 0.0);
  return std::log(s2) + (y * y + yc * yc) / (2 * s2) - log_i0(y * yc / s2);
}

inline double rician_nll(std::span<const double> y_hat, std::span<const double> y, double sigma) {
  if (!(sigma > 0)) throw ConfigError("rician_nll: sigma must be positive");
  require(y_hat.size() == y.size(), "rician_nll: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 0) throw DataError("rician_nll: negative magnitude sample");
    s += rician_nll_term(y_hat[i], y[i], sigma);
  }
  return s;
}

inline double rician_nll(const SignalVolume& y_hat, const SignalVolume& y, double sigma,
                         const std::vector<bool>& mask) {
  require(y_hat.dims == y.dims && y_hat.n_meas == y.n_meas && mask.size() == y.dims.voxels(),
          "rician_nll: shape mismatch");
  if (!(sigma > 0)) throw ConfigError("rician_nll: sigma must be positive");
  double s = 0;
  for (std::size_t v = 0; v < mask.size(); ++v)
    if (mask[v])
      s += rician_nll({y_hat.voxel(v), y.n_meas}, {y.voxel(v), y.n_meas}, sigma);
  return s;
}

// ---------------------------------------------------------------------------
// Regularizers on the constrained view. Each returns its weighted value and,
// when grad is non-null, accumulates derivatives into it.

struct ConstrainedGrad {
  std::vector<double> s0;
  std::vector<double> fractions;
  std::vector<Vec3> directions;
  std::vector<double> f_intra;

  explicit ConstrainedGrad(const ConstrainedTissue& t)
      : s0(t.voxels, 0.0),
        fractions(t.fractions.size(), 0.0),
        directions(t.directions.size(), Vec3{0, 0, 0}),
        f_intra(t.voxels, 0.0) {}

  double& fiber_fraction(int k, std::size_t v, int fiber) {
    return fractions[v * fraction_channels(k) + kFirstFiber + static_cast<std::size_t>(fiber)];
  }
};

inline double huber(double r, double delta) {
  const double a = std::fabs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double r, double delta) {
  if (std::fabs(r) <= delta) return r;
  return r > 0 ? delta : -delta;
}

inline double spatial_huber_laplacian(const ConstrainedTissue& t, const Neighborhood& nb,
                                      const RegWeights& w, ConstrainedGrad* grad = nullptr) {
  if (w.lambda_sp == 0 || t.voxels == 0) return 0.0;
  const std::size_t channels = fraction_channels(t.k);
  const double scale = w.lambda_sp / static_cast<double>(t.voxels);
  std::vector<double> mean(channels);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v) {
    const std::size_t cnt = nb.count(v);
    if (cnt == 0) continue;
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t e = nb.offsets[v]; e < nb.offsets[v + 1]; ++e) {
      const auto fn = t.fractions_of(nb.index[e]);
      for (std::size_t c = 0; c < channels; ++c) mean[c] += fn[c];
    }
    const auto f = t.fractions_of(v);
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] /= static_cast<double>(cnt);
      const double r = f[c] - mean[c];
      total += huber(r, w.huber_delta);
      if (!grad) continue;
      const double d = scale * huber_derivative(r, w.huber_delta);
      grad->fractions[v * channels + c] += d;
      for (std::size_t e = nb.offsets[v]; e < nb.offsets[v + 1]; ++e)
        grad->fractions[nb.index[e] * channels + c] -= d / static_cast<double>(cnt);
    }
  }
  return scale * total;
}

inline double repulsion(const ConstrainedTissue& t, const RegWeights& w,
                        ConstrainedGrad* grad = nullptr) {
  if (w.lambda_rep == 0 || t.voxels == 0) return 0.0;
  const double scale = w.lambda_rep / static_cast<double>(t.voxels);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v)
    for (int i = 0; i < t.k; ++i)
      for (int j = i + 1; j < t.k; ++j) {
        const double fi = t.fiber_fraction(v, i), fj = t.fiber_fraction(v, j);
        const Vec3& di = t.direction(v, i);
        const Vec3& dj = t.direction(v, j);
        const double c = dot(di, dj);
        total += fi * fj * std::fabs(c);
        if (!grad) continue;
        const double sgn = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
        grad->fiber_fraction(t.k, v, i) += scale * fj * std::fabs(c);
        grad->fiber_fraction(t.k, v, j) += scale * fi * std::fabs(c);
        const std::size_t base = v * static_cast<std::size_t>(t.k);
        auto& gi = grad->directions[base + static_cast<std::size_t>(i)];
        auto& gj = grad->directions[base + static_cast<std::size_t>(j)];
        gi = gi + scaled(dj, scale * fi * fj * sgn);
        gj = gj + scaled(di, scale * fi * fj * sgn);
      }
  return scale * total;
}

// L1 on fiber fractions below tau; fibers at or above tau are free.
inline double minor_fiber_sparsity(const ConstrainedTissue& t, const RegWeights& w,
                                   ConstrainedGrad* grad = nullptr) {
  if (w.lambda_sparse == 0 || t.voxels == 0) return 0.0;
  const double scale = w.lambda_sparse / static_cast<double>(t.voxels);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v)
    for (int k = 0; k < t.k; ++k) {
      const double f = t.fiber_fraction(v, k);
      if (f >= w.tau) continue;
      total += f;
      if (grad) grad->fiber_fraction(t.k, v, k) += scale;
    }
  return scale * total;
}

inline double orphan_gate(double s0, const RegWeights& w) {
  return sigmoid((w.orphan_s_low - s0) / w.orphan_width);
}

inline double orphan_wm(const ConstrainedTissue& t, const RegWeights& w,
                        ConstrainedGrad* grad = nullptr) {
  if (w.lambda_orphan == 0 || t.voxels == 0) return 0.0;
  const double scale = w.lambda_orphan / static_cast<double>(t.voxels);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v) {
    double wm = 0;
    for (int k = 0; k < t.k; ++k) wm += t.fiber_fraction(v, k);
    const double gate = orphan_gate(t.s0[v], w);
    total += gate * wm;
    if (!grad) continue;
    for (int k = 0; k < t.k; ++k) grad->fiber_fraction(t.k, v, k) += scale * gate;
    grad->s0[v] += scale * wm * (-gate * (1 - gate) / w.orphan_width);
  }
  return scale * total;
}

// Mean over unordered neighbor pairs; fibers are matched by index.
inline double directional_continuity(const ConstrainedTissue& t, const Neighborhood& nb,
                                     const RegWeights& w, ConstrainedGrad* grad = nullptr) {
  if (w.lambda_cont == 0 || t.voxels == 0) return 0.0;
  std::size_t pairs = 0;
  for (std::size_t v = 0; v < t.voxels; ++v)
    for (std::size_t e = nb.offsets[v]; e < nb.offsets[v + 1]; ++e) pairs += nb.index[e] > v;
  if (pairs == 0) return 0.0;
  const double scale = w.lambda_cont / static_cast<double>(pairs);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v)
    for (std::size_t e = nb.offsets[v]; e < nb.offsets[v + 1]; ++e) {
      const std::size_t u = nb.index[e];
      if (u <= v) continue;
      for (int k = 0; k < t.k; ++k) {
        const double fv = t.fiber_fraction(v, k), fu = t.fiber_fraction(u, k);
        const Vec3& dv = t.direction(v, k);
        const Vec3& du = t.direction(u, k);
        const double c = dot(dv, du);
        const double mis = 1.0 - std::fabs(c);
        total += fv * fu * mis;
        if (!grad) continue;
        const double sgn = c > 0 ? 1.0 : (c < 0 ? -1.0 : 0.0);
        grad->fiber_fraction(t.k, v, k) += scale * fu * mis;
        grad->fiber_fraction(t.k, u, k) += scale * fv * mis;
        auto& gv = grad->directions[v * static_cast<std::size_t>(t.k) + static_cast<std::size_t>(k)];
        auto& gu = grad->directions[u * static_cast<std::size_t>(t.k) + static_cast<std::size_t>(k)];
        gv = gv - scaled(du, scale * fv * fu * sgn);
        gu = gu - scaled(dv, scale * fv * fu * sgn);
      }
    }
  return scale * total;
}

// Hinge on adjacent fiber pairs that are out of descending order.
inline double fiber_ordering(const ConstrainedTissue& t, const RegWeights& w,
                             ConstrainedGrad* grad = nullptr) {
  if (w.lambda_order == 0 || t.voxels == 0) return 0.0;
  const double scale = w.lambda_order / static_cast<double>(t.voxels);
  double total = 0;
  for (std::size_t v = 0; v < t.voxels; ++v)
    for (int k = 0; k + 1 < t.k; ++k) {
      const double gap = t.fiber_fraction(v, k + 1) - t.fiber_fraction(v, k);
      if (gap <= 0) continue;
      total += gap;
      if (!grad) continue;
      grad->fiber_fraction(t.k, v, k + 1) += scale;
      grad->fiber_fraction(t.k, v, k) -= scale;
    }
  return scale * total;
}

struct CalibrationGrad {
  std::vector<double> bias_grid = std::vector<double>(kBiasGridPoints, 0.0);
  std::vector<double> alpha;
  std::vector<double> beta;
};

// Sum over axes of the mean squared forward difference of the log field.
// d_log_field, when given, receives the derivative per voxel.
inline double log_field_tv(std::span<const double> log_field, GridDims dims,
                           std::vector<double>* d_log_field = nullptr) {
  double total = 0;
  const int n[3] = {dims.nx, dims.ny, dims.nz};
  for (int axis = 0; axis < 3; ++axis) {
    if (n[axis] < 2) continue;
    const std::size_t count = dims.voxels() / static_cast<std::size_t>(n[axis]) *
                              static_cast<std::size_t>(n[axis] - 1);
    const double inv = 1.0 / static_cast<double>(count);
    double s = 0;
    for (int z = 0; z < dims.nz; ++z)
      for (int y = 0; y < dims.ny; ++y)
        for (int x = 0; x < dims.nx; ++x) {
          int q[3] = {x, y, z};
          if (q[axis] + 1 >= n[axis]) continue;
          const std::size_t a = dims.linear(x, y, z);
          ++q[axis];
          const std::size_t b = dims.linear(q[0], q[1], q[2]);
          const double d = log_field[b] - log_field[a];
          s += d * d;
          if (d_log_field) {
            (*d_log_field)[b] += 2 * d * inv;
            (*d_log_field)[a] -= 2 * d * inv;
          }
        }
    total += s * inv;
  }
  return total;
}

// Penalties pulling calibration toward identity. full_dims is the volume the
// bias field is laid out over.
inline double calibration_penalty(const CalibrationParams& cal, GridDims full_dims,
                                  const RegWeights& w, CalibrationGrad* grad = nullptr) {
  for (double v : cal.alpha) if (!std::isfinite(v)) throw NumericalError("non-finite alpha");
  for (double v : cal.beta) if (!std::isfinite(v)) throw NumericalError("non-finite beta");
  for (double v : cal.bias_grid) if (!std::isfinite(v)) throw NumericalError("non-finite bias grid");
  double total = 0;
  for (std::size_t n = 0; n < cal.alpha.size(); ++n) {
    total += w.lambda_alpha * cal.alpha[n] * cal.alpha[n] + w.lambda_beta * cal.beta[n] * cal.beta[n];
    if (grad) {
      grad->alpha[n] += 2 * w.lambda_alpha * cal.alpha[n];
      grad->beta[n] += 2 * w.lambda_beta * cal.beta[n];
    }
  }
  for (std::size_t g = 0; g < cal.bias_grid.size(); ++g) {
    total += w.lambda_bias_l2 * cal.bias_grid[g] * cal.bias_grid[g];
    if (grad) grad->bias_grid[g] += 2 * w.lambda_bias_l2 * cal.bias_grid[g];
  }
  if (w.lambda_bias_tv > 0) {
    const auto field = upsample_log_bias(cal.bias_grid, full_dims);
    std::vector<double> d_field;
    if (grad) d_field.assign(field.size(), 0.0);
    total += w.lambda_bias_tv * log_field_tv(field, full_dims, grad ? &d_field : nullptr);
    if (grad) {
      const BiasInterpolator interp(full_dims);
      for (int z = 0; z < full_dims.nz; ++z)
        for (int y = 0; y < full_dims.ny; ++y)
          for (int x = 0; x < full_dims.nx; ++x) {
            const double d = w.lambda_bias_tv * d_field[full_dims.linear(x, y, z)];
            if (d == 0) continue;
            interp.for_each_weight(x, y, z, [&](std::size_t g, double wt) {
              grad->bias_grid[g] += d * wt;
            });
          }
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Total objective

struct ParameterSet {
  TissueParams tissue;
  CalibrationParams cal;
};

// Everything fixed during a fit: data, acquisition, and objective settings.
struct Problem {
  const FitData* data = nullptr;
  AcquisitionScheme scheme;
  ModelConstants constants;
  LossMode mode = LossMode::kMse;
  RegWeights weights;
  Neighborhood neighborhood;

  Problem(const FitData& fd, AcquisitionScheme s, ModelConstants mc, LossMode m, RegWeights w)
      : data(&fd), scheme(std::move(s)), constants(mc), mode(m), weights(w) {
    constants.validate();
    weights.validate();
    require(fd.n_meas == scheme.size(), "fit data and gradient table disagree on N");
    neighborhood = build_neighborhood(fd, weights.neighborhood);
  }
};

struct ObjectiveBreakdown {
  double data = 0;
  double spatial = 0;
  double repulsion = 0;
  double sparsity = 0;
  double orphan = 0;
  double continuity = 0;
  double ordering = 0;
  double calibration = 0;

  double total() const {
    return data + spatial + repulsion + sparsity + orphan + continuity + ordering + calibration;
  }
};

inline double tissue_regularizers(const ConstrainedTissue& t, const Problem& p,
                                  ObjectiveBreakdown& out, ConstrainedGrad* grad = nullptr) {
  out.spatial = spatial_huber_laplacian(t, p.neighborhood, p.weights, grad);
  out.repulsion = repulsion(t, p.weights, grad);
  out.sparsity = minor_fiber_sparsity(t, p.weights, grad);
  out.orphan = orphan_wm(t, p.weights, grad);
  out.continuity = directional_continuity(t, p.neighborhood, p.weights, grad);
  out.ordering = fiber_ordering(t, p.weights, grad);
  return out.spatial + out.repulsion + out.sparsity + out.orphan + out.continuity + out.ordering;
}

// Reference evaluation: predict every signal, then score it. The gradient
// engine computes the same quantity in a fused pass.
inline ObjectiveBreakdown total_objective(const Problem& p, const ParameterSet& params) {
  const FitData& fd = *p.data;
  if (fd.size() == 0) throw DataError("objective: empty mask");
  const auto t = constrain(params.tissue);
  const auto y_hat = predict_compact(t, params.cal, p.scheme, p.constants, fd);
  ObjectiveBreakdown b;
  b.data = p.mode == LossMode::kMse ? mse_data_term(y_hat, fd.y, fd.n_meas)
                                    : rician_nll(y_hat, fd.y, params.cal.sigma());
  tissue_regularizers(t, p, b);
  b.calibration = calibration_penalty(params.cal, fd.full_dims, p.weights);
  return b;
}

}  // namespace fixelfit
