#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "acquisition.hpp"
#include "error.hpp"
#include "optimizer.hpp"
#include "vec3.hpp"
#include "volume.hpp"

namespace fixelfit {

struct PhantomSpec {
  std::vector<double> angles;  // degrees
  std::size_t voxels_per_angle = 200;
  bool include_single_fiber = true;
  double snr = 30.0;           // S0 / sigma; infinity for noiseless data
  std::array<double, 3> eigenvalues{1.7, 0.3, 0.3};  // 1e-3 mm^2/s
  std::vector<double> fractions{0.5, 0.5};
  double sigma_g = 0.0;        // per-measurement log-gain spread
  std::uint64_t seed = 1;

  // 15..90 degrees in 5 degree steps.
  static std::vector<double> default_angles() {
    std::vector<double> a;
    for (int d = 15; d <= 90; d += 5) a.push_back(d);
    return a;
  }

  void validate() const {
    for (double a : angles) require(a > 0 && a <= 90, "phantom angles must lie in (0, 90]");
    require(!angles.empty() || include_single_fiber, "phantom has no voxels");
    require(voxels_per_angle >= 1, "voxels_per_angle must be >= 1");
    require(snr > 0, "snr must be positive");
    require(eigenvalues[2] > 0 && eigenvalues[0] >= eigenvalues[1] && eigenvalues[1] >= eigenvalues[2],
            "eigenvalues must be positive and descending");
    require(fractions.size() == 2 && fractions[0] > 0 && fractions[1] > 0 &&
                std::fabs(fractions[0] + fractions[1] - 1.0) < 1e-9,
            "crossing fractions must be two positive values summing to 1");
    require(sigma_g >= 0, "sigma_g must be >= 0");
  }

  double sigma() const { return std::isinf(snr) ? 0.0 : 1.0 / snr; }
};

struct TruthVoxel {
  std::size_t index = 0;             // linear grid index
  std::optional<double> angle;       // absent for single-fiber controls
  std::vector<Vec3> directions;
  std::vector<double> fractions;
};

struct GroundTruth {
  GridDims dims;
  double sigma = 0;
  double snr = 0;
  std::uint64_t seed = 0;
  std::vector<double> angles;
  std::vector<TruthVoxel> voxels;
  std::optional<std::vector<double>> gains;
};

// Sum of fraction-weighted Gaussian compartments, S0 = 1. Each tensor has its
// principal axis along the fiber direction.
inline std::vector<double> multi_tensor_signal(std::span<const Vec3> directions,
                                               std::span<const double> fractions,
                                               const std::array<double, 3>& eigenvalues,
                                               const AcquisitionScheme& scheme) {
  require(directions.size() == fractions.size(), "multi_tensor_signal: size mismatch");
  std::vector<double> out(scheme.size(), 0.0);
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const Vec3 e1 = normalized(directions[i]);
    const Vec3 e2 = any_perpendicular(e1);
    const Vec3 e3 = cross(e1, e2);
    for (std::size_t n = 0; n < scheme.size(); ++n) {
      const Vec3& g = scheme.direction(n);
      const double c1 = dot(g, e1), c2 = dot(g, e2), c3 = dot(g, e3);
      const double adc = eigenvalues[0] * c1 * c1 + eigenvalues[1] * c2 * c2 + eigenvalues[2] * c3 * c3;
      out[n] += fractions[i] * std::exp(-scheme.b(n) * kDiffusivityUnit * adc);
    }
  }
  return out;
}

// Magnitude of the signal plus complex Gaussian noise with sigma = 1 / snr.
inline void add_rician_noise(std::span<double> signal, double snr, std::mt19937_64& rng) {
  require(snr > 0, "add_rician_noise: snr must be positive");
  if (std::isinf(snr)) return;
  std::normal_distribution<double> gauss(0.0, 1.0 / snr);
  for (double& s : signal) {
    const double re = s + gauss(rng);
    const double im = gauss(rng);
    s = std::sqrt(re * re + im * im);
  }
}

// Multiplies measurement n of every voxel by exp(z_n), z_n ~ N(0, sigma_g^2).
inline std::vector<double> gain_perturb(SignalVolume& data, double sigma_g, std::mt19937_64& rng) {
  require(sigma_g >= 0, "gain_perturb: sigma_g must be >= 0");
  std::vector<double> gains(data.n_meas, 1.0);
  if (sigma_g == 0) return gains;
  std::normal_distribution<double> gauss(0.0, sigma_g);
  for (double& g : gains) g = std::exp(gauss(rng));
  for (std::size_t v = 0; v < data.dims.voxels(); ++v)
    for (std::size_t n = 0; n < data.n_meas; ++n) data.voxel(v)[n] *= gains[n];
  return gains;
}

// Nearly square single-slice grid holding exactly `count` voxels.
inline GridDims flat_grid(std::size_t count) {
  std::size_t ny = static_cast<std::size_t>(std::sqrt(static_cast<double>(count)));
  while (ny > 1 && count % ny != 0) --ny;
  ny = std::max<std::size_t>(ny, 1);
  return {static_cast<int>(count / ny), static_cast<int>(ny), 1};
}

// Second fiber at `angle_deg` from `first`, rotated about a random axis
// perpendicular to it.
inline Vec3 rotate_away(const Vec3& first, double angle_deg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 2 * M_PI);
  const Vec3 p = any_perpendicular(first);
  const Vec3 q = cross(first, p);
  const double phi = uni(rng);
  const Vec3 u = scaled(p, std::cos(phi)) + scaled(q, std::sin(phi));
  const double a = angle_deg * M_PI / 180.0;
  return normalized(scaled(first, std::cos(a)) + scaled(u, std::sin(a)));
}

struct Benchmark {
  SignalVolume volume;
  GroundTruth truth;
};

inline Benchmark build_benchmark(const PhantomSpec& spec, const AcquisitionScheme& scheme) {
  spec.validate();
  const std::size_t groups = spec.angles.size() + (spec.include_single_fiber ? 1 : 0);
  const std::size_t count = groups * spec.voxels_per_angle;
  Benchmark out;
  out.volume = SignalVolume(flat_grid(count), scheme.size());
  auto& truth = out.truth;
  truth.dims = out.volume.dims;
  truth.sigma = spec.sigma();
  truth.snr = spec.snr;
  truth.seed = spec.seed;
  truth.angles = spec.angles;
  truth.voxels.reserve(count);

  for (std::size_t v = 0; v < count; ++v) {
    const std::size_t group = v / spec.voxels_per_angle;
    auto geo = substream(spec.seed, 0xd1, v);
    TruthVoxel tv;
    tv.index = v;
    const Vec3 first = random_unit_vector(geo);
    if (group < spec.angles.size()) {
      tv.angle = spec.angles[group];
      tv.directions = {first, rotate_away(first, spec.angles[group], geo)};
      tv.fractions = spec.fractions;
    } else {
      tv.directions = {first};
      tv.fractions = {1.0};
    }
    const auto clean = multi_tensor_signal(tv.directions, tv.fractions, spec.eigenvalues, scheme);
    double* s = out.volume.voxel(v);
    std::copy(clean.begin(), clean.end(), s);
    auto noise = substream(spec.seed, 0x2015e, v);
    add_rician_noise({s, scheme.size()}, spec.snr, noise);
    truth.voxels.push_back(std::move(tv));
  }
  if (spec.sigma_g > 0) {
    auto rng = substream(spec.seed, 0x6a1, 0);
    truth.gains = gain_perturb(out.volume, spec.sigma_g, rng);
  }
  return out;
}

}  // namespace fixelfit
