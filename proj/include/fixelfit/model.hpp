#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "acquisition.hpp"
#include "error.hpp"
#include "vec3.hpp"
#include "volume.hpp"

namespace fixelfit {

// Fixed diffusivities in units of 1e-3 mm^2/s.
struct ModelConstants {
  double d_csf = 3.0;
  double d_gm = 0.9;
  double d_res = 0.2;
  double d_par = 1.7;
  double d_perp = 0.4;

  void validate() const {
    require(d_csf > 0 && d_gm > 0 && d_res > 0 && d_par > 0 && d_perp > 0,
            "model constants must be positive");
    require(d_par > d_perp, "model constants: d_par must exceed d_perp");
  }
};

// b-values are carried in s/mm^2; diffusivities in 1e-3 mm^2/s.
inline constexpr double kDiffusivityUnit = 1e-3;

// Fraction channels are ordered [CSF, GM, WM_1..WM_K, restricted].
inline constexpr std::size_t kCsf = 0;
inline constexpr std::size_t kGm = 1;
inline constexpr std::size_t kFirstFiber = 2;
inline std::size_t restricted_channel(int k) { return kFirstFiber + static_cast<std::size_t>(k); }
inline std::size_t fraction_channels(int k) { return static_cast<std::size_t>(k) + 3; }

// Unconstrained per-voxel microstructure parameters, compact over masked voxels.
struct TissueParams {
  int k = 0;
  std::size_t voxels = 0;
  std::vector<double> s0_raw;           // [voxels]
  std::vector<double> fraction_logits;  // [voxels][k + 3]
  std::vector<double> dir_raw;          // [voxels][k][3]
  std::vector<double> f_intra_raw;      // [voxels]

  TissueParams() = default;
  TissueParams(int fibers, std::size_t n)
      : k(fibers),
        voxels(n),
        s0_raw(n, 0.0),
        fraction_logits(n * fraction_channels(fibers), 0.0),
        dir_raw(n * static_cast<std::size_t>(fibers) * 3, 0.0),
        f_intra_raw(n, 0.0) {}
};

inline constexpr int kBiasGridSize = 8;
inline constexpr std::size_t kBiasGridPoints = 512;

// Volume-level nuisance parameters; all-zero is the identity transform.
struct CalibrationParams {
  std::vector<double> bias_grid = std::vector<double>(kBiasGridPoints, 0.0);  // x fastest
  std::vector<double> alpha;
  std::vector<double> beta;
  double sigma_log = 0.0;

  CalibrationParams() = default;
  explicit CalibrationParams(std::size_t n_meas, double sigma_log0 = std::log(0.05))
      : alpha(n_meas, 0.0), beta(n_meas, 0.0), sigma_log(sigma_log0) {}

  double sigma() const { return std::exp(sigma_log); }

  bool is_identity() const {
    const auto zero = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
    };
    return zero(bias_grid) && zero(alpha) && zero(beta);
  }
};

inline double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
inline double softplus_inverse(double y) { return y > 30 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kDirectionNormFloor = 1e-8;

// Constrained view of TissueParams.
struct ConstrainedTissue {
  int k = 0;
  std::size_t voxels = 0;
  std::vector<double> s0;
  std::vector<double> fractions;   // [voxels][k + 3], softmax
  std::vector<Vec3> directions;    // [voxels][k], unit norm
  std::vector<double> dir_norm;    // [voxels][k], clamped raw norm
  std::vector<double> f_intra;

  std::span<const double> fractions_of(std::size_t v) const {
    const std::size_t c = fraction_channels(k);
    return {fractions.data() + v * c, c};
  }
  double fiber_fraction(std::size_t v, int fiber) const {
    return fractions[v * fraction_channels(k) + kFirstFiber + static_cast<std::size_t>(fiber)];
  }
  const Vec3& direction(std::size_t v, int fiber) const {
    return directions[v * static_cast<std::size_t>(k) + static_cast<std::size_t>(fiber)];
  }
};

inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (std::size_t c = 0; c < logits.size(); ++c) sum += out[c] = std::exp(logits[c] - mx);
  for (double& f : out) f /= sum;
}

inline ConstrainedTissue constrain(const TissueParams& raw) {
  const auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
  };
  if (!finite(raw.s0_raw) || !finite(raw.fraction_logits) || !finite(raw.dir_raw) ||
      !finite(raw.f_intra_raw))
    throw NumericalError("constrain: non-finite raw tissue parameter");

  const std::size_t channels = fraction_channels(raw.k);
  ConstrainedTissue c;
  c.k = raw.k;
  c.voxels = raw.voxels;
  c.s0.resize(raw.voxels);
  c.fractions.resize(raw.voxels * channels);
  c.directions.resize(raw.voxels * static_cast<std::size_t>(raw.k));
  c.dir_norm.resize(raw.voxels * static_cast<std::size_t>(raw.k));
  c.f_intra.resize(raw.voxels);
  for (std::size_t v = 0; v < raw.voxels; ++v) {
    c.s0[v] = softplus(raw.s0_raw[v]);
    c.f_intra[v] = sigmoid(raw.f_intra_raw[v]);
    softmax_into({raw.fraction_logits.data() + v * channels, channels},
                 {c.fractions.data() + v * channels, channels});
    for (int f = 0; f < raw.k; ++f) {
      const std::size_t i = v * static_cast<std::size_t>(raw.k) + static_cast<std::size_t>(f);
      const Vec3 r{raw.dir_raw[3 * i], raw.dir_raw[3 * i + 1], raw.dir_raw[3 * i + 2]};
      const double len = std::max(norm(r), kDirectionNormFloor);
      c.dir_norm[i] = len;
      c.directions[i] = scaled(r, 1.0 / len);
    }
  }
  return c;
}

// Stick-and-zeppelin attenuation of one fiber.
inline double wm_attenuation(const Vec3& d, double f_intra, double b, const Vec3& g,
                             const ModelConstants& mc) {
  const double c = dot(d, g);
  const double c2 = c * c;
  const double bu = b * kDiffusivityUnit;
  const double stick = std::exp(-bu * mc.d_par * c2);
  const double zeppelin = std::exp(-bu * (mc.d_par * c2 + mc.d_perp * (1.0 - c2)));
  return f_intra * stick + (1.0 - f_intra) * zeppelin;
}

// Per-measurement isotropic attenuations, which depend only on b.
struct IsotropicTable {
  std::vector<double> csf, gm, res;

  IsotropicTable(const AcquisitionScheme& scheme, const ModelConstants& mc) {
    for (std::size_t n = 0; n < scheme.size(); ++n) {
      const double bu = scheme.b(n) * kDiffusivityUnit;
      csf.push_back(std::exp(-bu * mc.d_csf));
      gm.push_back(std::exp(-bu * mc.d_gm));
      res.push_back(std::exp(-bu * mc.d_res));
    }
  }
};

// Noise-free tissue signal of one voxel for every measurement.
inline void tissue_signal(const ConstrainedTissue& t, std::size_t v,
                          const AcquisitionScheme& scheme, const ModelConstants& mc,
                          std::span<double> out) {
  const auto f = t.fractions_of(v);
  const std::size_t res = restricted_channel(t.k);
  for (std::size_t n = 0; n < scheme.size(); ++n) {
    if (scheme.is_b0(n)) {
      out[n] = t.s0[v];
      continue;
    }
    const double bu = scheme.b(n) * kDiffusivityUnit;
    double mix = f[kCsf] * std::exp(-bu * mc.d_csf) + f[kGm] * std::exp(-bu * mc.d_gm) +
                 f[res] * std::exp(-bu * mc.d_res);
    for (int k = 0; k < t.k; ++k)
      mix += t.fiber_fraction(v, k) *
             wm_attenuation(t.direction(v, k), t.f_intra[v], scheme.b(n), scheme.direction(n), mc);
    out[n] = t.s0[v] * mix;
  }
}

inline std::vector<double> tissue_signal(const ConstrainedTissue& t, std::size_t v,
                                         const AcquisitionScheme& scheme,
                                         const ModelConstants& mc) {
  std::vector<double> out(scheme.size());
  tissue_signal(t, v, scheme, mc, out);
  return out;
}

// Trilinear interpolation weights of the 8^3 control grid along one axis.
// Grid corners coincide with the first and last voxel centers.
struct AxisInterp {
  std::vector<int> lo;
  std::vector<double> t;

  explicit AxisInterp(int n) : lo(static_cast<std::size_t>(n)), t(static_cast<std::size_t>(n)) {
    for (int i = 0; i < n; ++i) {
      const double u = n > 1 ? static_cast<double>(i) * (kBiasGridSize - 1) / (n - 1) : 0.0;
      int l = std::min(static_cast<int>(std::floor(u)), kBiasGridSize - 2);
      lo[static_cast<std::size_t>(i)] = l;
      t[static_cast<std::size_t>(i)] = u - l;
    }
  }
};

// Maps the control grid onto a volume of the given dimensions.
class BiasInterpolator {
 public:
  explicit BiasInterpolator(GridDims dims) : dims_(dims), ax_(dims.nx), ay_(dims.ny), az_(dims.nz) {}

  const GridDims& dims() const { return dims_; }

  // Calls fn(grid_index, weight) for the 8 control points around (x, y, z).
  template <class Fn>
  void for_each_weight(int x, int y, int z, Fn&& fn) const {
    const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y),
               uz = static_cast<std::size_t>(z);
    const int lx = ax_.lo[ux], ly = ay_.lo[uy], lz = az_.lo[uz];
    const double tx = ax_.t[ux], ty = ay_.t[uy], tz = az_.t[uz];
    for (int c = 0; c < 8; ++c) {
      const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
      const double w = (bx ? tx : 1 - tx) * (by ? ty : 1 - ty) * (bz ? tz : 1 - tz);
      const std::size_t g = static_cast<std::size_t>(lx + bx) +
                            kBiasGridSize * (static_cast<std::size_t>(ly + by) +
                                             kBiasGridSize * static_cast<std::size_t>(lz + bz));
      fn(g, w);
    }
  }

  double log_field(std::span<const double> grid, int x, int y, int z) const {
    double s = 0;
    for_each_weight(x, y, z, [&](std::size_t g, double w) { s += w * grid[g]; });
    return s;
  }

 private:
  GridDims dims_;
  AxisInterp ax_, ay_, az_;
};

// Upsampled log bias field over a whole volume (x fastest).
inline std::vector<double> upsample_log_bias(std::span<const double> grid, GridDims dims) {
  require(dims.nx >= 1 && dims.ny >= 1 && dims.nz >= 1, "upsample_bias: empty volume");
  require(grid.size() == kBiasGridPoints, "upsample_bias: grid must have 8^3 points");
  const BiasInterpolator interp(dims);
  std::vector<double> out(dims.voxels());
  for (int z = 0; z < dims.nz; ++z)
    for (int y = 0; y < dims.ny; ++y)
      for (int x = 0; x < dims.nx; ++x) out[dims.linear(x, y, z)] = interp.log_field(grid, x, y, z);
  return out;
}

inline std::vector<double> upsample_bias(std::span<const double> grid, GridDims dims) {
  auto field = upsample_log_bias(grid, dims);
  for (double& b : field) b = std::exp(b);
  return field;
}

// y_hat_n = exp(alpha_n) * B * S_n + beta_n
inline void apply_calibration(std::span<const double> signal, const CalibrationParams& cal,
                              double bias, std::span<double> out) {
  for (std::size_t n = 0; n < signal.size(); ++n)
    out[n] = std::exp(cal.alpha[n]) * bias * signal[n] + cal.beta[n];
}

// Bias values at the masked voxels of a (slab of a) volume.
inline std::vector<double> bias_at_voxels(const CalibrationParams& cal, const FitData& fd) {
  const BiasInterpolator interp(fd.full_dims);
  std::vector<double> out(fd.size());
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const auto& p = fd.voxels[i];
    out[i] = std::exp(interp.log_field(cal.bias_grid, p[0], p[1], p[2] + fd.z_offset));
  }
  return out;
}

// Predicted (b0-normalized) signals for the masked voxels, compact voxel-major.
inline std::vector<double> predict_compact(const ConstrainedTissue& t, const CalibrationParams& cal,
                                           const AcquisitionScheme& scheme,
                                           const ModelConstants& mc, const FitData& fd) {
  require(t.voxels == fd.size(), "predict: tissue/voxel count mismatch");
  require(cal.alpha.size() == scheme.size() && cal.beta.size() == scheme.size(),
          "predict: calibration/measurement count mismatch");
  const std::size_t n = scheme.size();
  const auto bias = bias_at_voxels(cal, fd);
  std::vector<double> out(fd.size() * n), s(n);
  for (std::size_t v = 0; v < fd.size(); ++v) {
    tissue_signal(t, v, scheme, mc, s);
    apply_calibration(s, cal, bias[v], {out.data() + v * n, n});
  }
  return out;
}

// Full-grid prediction of the fit region; unmasked voxels are zero.
inline SignalVolume predict_volume(const ConstrainedTissue& t, const CalibrationParams& cal,
                                   const AcquisitionScheme& scheme, const ModelConstants& mc,
                                   const FitData& fd) {
  const auto compact = predict_compact(t, cal, scheme, mc, fd);
  SignalVolume out(fd.dims, scheme.size());
  std::fill(out.mask.begin(), out.mask.end(), false);
  for (std::size_t v = 0; v < fd.size(); ++v) {
    const auto& p = fd.voxels[v];
    const std::size_t g = fd.dims.linear(p[0], p[1], p[2]);
    out.mask[g] = true;
    std::copy_n(compact.data() + v * scheme.size(), scheme.size(), out.voxel(g));
  }
  return out;
}

inline SignalVolume predict_volume(const TissueParams& raw, const CalibrationParams& cal,
                                   const AcquisitionScheme& scheme, const ModelConstants& mc,
                                   const FitData& fd) {
  return predict_volume(constrain(raw), cal, scheme, mc, fd);
}

}  // namespace fixelfit
