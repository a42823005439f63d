#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "fixelfit/fixelfit.hpp"

namespace fixelfit::testing {

// Constrained tissue with explicit values; fractions are given per voxel as
// WM fiber fractions, the remainder goes to CSF.
inline ConstrainedTissue make_tissue(int k, const std::vector<std::vector<double>>& wm,
                                     const std::vector<std::vector<Vec3>>& dirs, double s0 = 1.0) {
  ConstrainedTissue t;
  t.k = k;
  t.voxels = wm.size();
  const std::size_t ch = fraction_channels(k);
  t.s0.assign(t.voxels, s0);
  t.f_intra.assign(t.voxels, 0.5);
  t.fractions.assign(t.voxels * ch, 0.0);
  t.directions.resize(t.voxels * static_cast<std::size_t>(k));
  t.dir_norm.assign(t.voxels * static_cast<std::size_t>(k), 1.0);
  for (std::size_t v = 0; v < t.voxels; ++v) {
    double rest = 1.0;
    for (int j = 0; j < k; ++j) {
      t.fractions[v * ch + kFirstFiber + static_cast<std::size_t>(j)] = wm[v][static_cast<std::size_t>(j)];
      rest -= wm[v][static_cast<std::size_t>(j)];
      t.directions[v * static_cast<std::size_t>(k) + static_cast<std::size_t>(j)] =
          normalized(dirs[v][static_cast<std::size_t>(j)]);
    }
    t.fractions[v * ch + kCsf] = rest;
  }
  return t;
}

// Small scheme with 1 b0 and 12 weighted measurements.
inline AcquisitionScheme small_scheme(std::uint64_t seed = 3) { return synthetic_scheme({1000, 2000}, 6, 1, seed); }

// FitData over a full grid with b0 = 1 and random weighted signals.
inline FitData grid_data(GridDims dims, const AcquisitionScheme& scheme, std::uint64_t seed = 1,
                         std::vector<bool> mask = {}) {
  SignalVolume vol(dims, scheme.size());
  if (!mask.empty()) vol.mask = mask;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  for (std::size_t v = 0; v < dims.voxels(); ++v)
    for (std::size_t n = 0; n < scheme.size(); ++n) vol.voxel(v)[n] = scheme.is_b0(n) ? 1.0 : u(rng);
  return make_fit_data(vol, scheme);
}

inline ParameterSet random_params(std::size_t voxels, int k, std::size_t n_meas, std::uint64_t seed,
                                  bool identity_cal = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  ParameterSet p;
  p.tissue = TissueParams(k, voxels);
  for (auto& x : p.tissue.s0_raw) x = 0.5 + 0.3 * g(rng);
  for (auto& x : p.tissue.fraction_logits) x = g(rng);
  for (auto& x : p.tissue.dir_raw) x = g(rng);
  for (auto& x : p.tissue.f_intra_raw) x = g(rng);
  p.cal = CalibrationParams(n_meas, std::log(0.1));
  if (!identity_cal) {
    for (auto& x : p.cal.bias_grid) x = 0.1 * g(rng);
    for (auto& x : p.cal.alpha) x = 0.05 * g(rng);
    for (auto& x : p.cal.beta) x = 0.01 * g(rng);
  }
  return p;
}

inline RegWeights no_regularizers() {
  RegWeights w;
  w.lambda_sp = w.lambda_rep = w.lambda_sparse = w.lambda_orphan = w.lambda_cont = w.lambda_order = 0;
  w.lambda_alpha = w.lambda_beta = w.lambda_bias_l2 = w.lambda_bias_tv = 0;
  return w;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto p = std::filesystem::path(::testing::TempDir()) / "fixelfit_tests" /
           (std::string(info->test_suite_name()) + "." + info->name()) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixelfit::testing
