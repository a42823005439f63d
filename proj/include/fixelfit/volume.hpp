#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "acquisition.hpp"
#include "error.hpp"

namespace fixelfit {

struct GridDims {
  int nx = 1, ny = 1, nz = 1;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  std::size_t linear(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  friend bool operator==(const GridDims&, const GridDims&) = default;
};

using Index3 = std::array<int, 3>;

// 3D grid of N-measurement signals, voxel-major (data[v * N + n]) with x
// fastest within the grid, plus a brain mask.
struct SignalVolume {
  GridDims dims;
  std::size_t n_meas = 0;
  std::vector<double> data;
  std::vector<bool> mask;

  SignalVolume() = default;
  SignalVolume(GridDims d, std::size_t n)
      : dims(d), n_meas(n), data(d.voxels() * n, 0.0), mask(d.voxels(), true) {}

  double* voxel(std::size_t v) { return data.data() + v * n_meas; }
  const double* voxel(std::size_t v) const { return data.data() + v * n_meas; }
  std::size_t masked_count() const {
    std::size_t c = 0;
    for (bool m : mask) c += m;
    return c;
  }
};

// Masked voxels of a (sub)volume in compact order, with b0-normalized signals.
// A slab is a z-range [z_offset, z_offset + dims.nz) of a larger volume whose
// extent is full_dims; the bias field is always laid out over full_dims.
struct FitData {
  GridDims full_dims;
  GridDims dims;
  int z_offset = 0;
  std::size_t n_meas = 0;
  std::vector<Index3> voxels;        // local coordinates
  std::vector<int> grid_to_voxel;    // local grid -> compact index, -1 if unmasked
  std::vector<double> y;             // compact, voxel-major
  std::vector<double> b0;            // measured b0 used for normalization

  std::size_t size() const { return voxels.size(); }
  const double* signal(std::size_t i) const { return y.data() + i * n_meas; }
};

// Divides every masked voxel by its mean measured b0. Voxels whose b0 is not
// positive are dropped from the mask. Without b0 entries the data is taken as
// already normalized.
inline FitData make_fit_data(const SignalVolume& vol, const AcquisitionScheme& scheme,
                             int z_begin = 0, int z_end = -1) {
  if (vol.n_meas != scheme.size())
    throw DataError("signal volume has " + std::to_string(vol.n_meas) +
                    " measurements but the gradient table has " + std::to_string(scheme.size()));
  if (scheme.size() < kMinMeasurements)
    throw DataError("at least 7 measurements are required for fitting");
  if (z_end < 0) z_end = vol.dims.nz;
  require(0 <= z_begin && z_begin < z_end && z_end <= vol.dims.nz, "make_fit_data: bad slab range");

  FitData fd;
  fd.full_dims = vol.dims;
  fd.dims = {vol.dims.nx, vol.dims.ny, z_end - z_begin};
  fd.z_offset = z_begin;
  fd.n_meas = vol.n_meas;
  fd.grid_to_voxel.assign(fd.dims.voxels(), -1);
  const std::size_t n_b0 = scheme.b0_count();
  for (int z = z_begin; z < z_end; ++z)
    for (int y = 0; y < vol.dims.ny; ++y)
      for (int x = 0; x < vol.dims.nx; ++x) {
        const std::size_t v = vol.dims.linear(x, y, z);
        if (!vol.mask[v]) continue;
        const double* s = vol.voxel(v);
        double b0 = 1.0;
        if (n_b0 > 0) {
          b0 = 0;
          for (std::size_t n = 0; n < scheme.size(); ++n)
            if (scheme.is_b0(n)) b0 += s[n];
          b0 /= static_cast<double>(n_b0);
        }
        if (!(b0 > 0) || !std::isfinite(b0)) continue;
        bool finite = true;
        for (std::size_t n = 0; n < vol.n_meas; ++n) finite &= std::isfinite(s[n]);
        if (!finite) continue;
        fd.grid_to_voxel[fd.dims.linear(x, y, z - z_begin)] = static_cast<int>(fd.voxels.size());
        fd.voxels.push_back({x, y, z - z_begin});
        fd.b0.push_back(b0);
        for (std::size_t n = 0; n < vol.n_meas; ++n) fd.y.push_back(s[n] / b0);
      }
  return fd;
}

// CSR neighbor lists restricted to masked voxels (6- or 26-connectivity).
struct Neighborhood {
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> index;

  std::size_t count(std::size_t i) const { return offsets[i + 1] - offsets[i]; }
};

inline Neighborhood build_neighborhood(const FitData& fd, int connectivity) {
  require(connectivity == 6 || connectivity == 26, "neighborhood must be 6 or 26");
  Neighborhood nb;
  nb.offsets.reserve(fd.size() + 1);
  nb.offsets.push_back(0);
  for (const auto& p : fd.voxels) {
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
          if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
          const int x = p[0] + dx, y = p[1] + dy, z = p[2] + dz;
          if (!fd.dims.contains(x, y, z)) continue;
          const int j = fd.grid_to_voxel[fd.dims.linear(x, y, z)];
          if (j >= 0) nb.index.push_back(static_cast<std::size_t>(j));
        }
    nb.offsets.push_back(nb.index.size());
  }
  return nb;
}

}  // namespace fixelfit
