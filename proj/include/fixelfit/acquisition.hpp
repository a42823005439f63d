#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "vec3.hpp"

namespace fixelfit {

inline constexpr double kDefaultB0Threshold = 50.0;  // s/mm^2
// Fewer measurements than this cannot constrain a fit; checked when fit data
// is assembled, not on the table itself.
inline constexpr std::size_t kMinMeasurements = 7;

// Multi-shell gradient table. Directions of b0 entries may be zero.
class AcquisitionScheme {
 public:
  AcquisitionScheme() = default;

  AcquisitionScheme(std::vector<double> b_values, std::vector<Vec3> directions,
                    double b0_threshold = kDefaultB0Threshold)
      : b_values_(std::move(b_values)), directions_(std::move(directions)) {
    if (b_values_.size() != directions_.size())
      throw DataError("gradient table: " + std::to_string(b_values_.size()) +
                      " b-values but " + std::to_string(directions_.size()) + " directions");
    b0_mask_.resize(b_values_.size());
    for (std::size_t n = 0; n < b_values_.size(); ++n) {
      if (!std::isfinite(b_values_[n]) || b_values_[n] < 0)
        throw DataError("gradient table: invalid b-value at index " + std::to_string(n));
      b0_mask_[n] = b_values_[n] < b0_threshold;
      const double len = norm(directions_[n]);
      if (b0_mask_[n]) {
        if (len > 0 && std::fabs(len - 1) > 1e-12) directions_[n] = scaled(directions_[n], 1.0 / len);
        continue;
      }
      if (!(len > 1e-12) || !std::isfinite(len))
        throw DataError("gradient table: zero-norm direction for non-b0 index " +
                        std::to_string(n));
      // already-unit vectors are kept bit-exact so tables round-trip through text
      if (std::fabs(len - 1) > 1e-12) directions_[n] = scaled(directions_[n], 1.0 / len);
    }
  }

  std::size_t size() const { return b_values_.size(); }
  const std::vector<double>& b_values() const { return b_values_; }
  const std::vector<Vec3>& directions() const { return directions_; }
  const std::vector<bool>& b0_mask() const { return b0_mask_; }

  double b(std::size_t n) const { return b_values_[n]; }
  const Vec3& direction(std::size_t n) const { return directions_[n]; }
  bool is_b0(std::size_t n) const { return b0_mask_[n]; }

  std::size_t b0_count() const {
    return static_cast<std::size_t>(std::count(b0_mask_.begin(), b0_mask_.end(), true));
  }

  friend bool operator==(const AcquisitionScheme&, const AcquisitionScheme&) = default;

 private:
  std::vector<double> b_values_;
  std::vector<Vec3> directions_;
  std::vector<bool> b0_mask_;
};

namespace detail {

inline std::vector<std::vector<double>> parse_rows(std::string_view text, const char* what) {
  std::vector<std::vector<double>> rows;
  std::istringstream lines{std::string(text)};
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream tokens(line);
    std::vector<double> row;
    std::string tok;
    while (tokens >> tok) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size())
        throw DataError(std::string(what) + ": non-numeric token '" + tok + "'");
      row.push_back(v);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// FSL convention: bval is one row of N values, bvec is three rows (x, y, z).
inline AcquisitionScheme load_scheme(std::string_view bval_text, std::string_view bvec_text,
                                     double b0_threshold = kDefaultB0Threshold) {
  auto bval_rows = detail::parse_rows(bval_text, "bval");
  auto bvec_rows = detail::parse_rows(bvec_text, "bvec");
  if (bval_rows.size() != 1)
    throw DataError("bval: expected a single row, got " + std::to_string(bval_rows.size()));
  const std::size_t n = bval_rows[0].size();
  // Also accept the transposed N x 3 layout some tools write.
  if (bvec_rows.size() == n && n != 3 &&
      std::all_of(bvec_rows.begin(), bvec_rows.end(), [](auto& r) { return r.size() == 3; })) {
    std::vector<std::vector<double>> t(3, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) t[c][i] = bvec_rows[i][c];
    bvec_rows = std::move(t);
  }
  if (bvec_rows.size() != 3)
    throw DataError("bvec: expected 3 rows, got " + std::to_string(bvec_rows.size()));
  for (const auto& row : bvec_rows)
    if (row.size() != n)
      throw DataError("bvec: row length " + std::to_string(row.size()) +
                      " does not match " + std::to_string(n) + " b-values");
  std::vector<Vec3> dirs(n);
  for (std::size_t i = 0; i < n; ++i) dirs[i] = {bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]};
  return AcquisitionScheme(std::move(bval_rows[0]), std::move(dirs), b0_threshold);
}

inline std::string format_bval(const AcquisitionScheme& scheme) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (std::size_t n = 0; n < scheme.size(); ++n) out << (n ? " " : "") << scheme.b(n);
  out << '\n';
  return out.str();
}

inline std::string format_bvec(const AcquisitionScheme& scheme) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t n = 0; n < scheme.size(); ++n)
      out << (n ? " " : "") << scheme.direction(n)[c];
    out << '\n';
  }
  return out.str();
}

// Approximately uniform axes on the hemisphere, by relaxing the electrostatic
// energy of the point set together with its antipodes.
inline std::vector<Vec3> electrostatic_directions(std::size_t count, std::uint64_t seed,
                                                  int steps = 1000) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<Vec3> p(count);
  for (auto& v : p) {
    do {
      v = {gauss(rng), gauss(rng), gauss(rng)};
    } while (norm(v) < 1e-9);
    v = normalized(v);
  }
  if (count < 2) return p;

  const auto energy = [&](const std::vector<Vec3>& pts) {
    double e = 0;
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (std::size_t j = i + 1; j < pts.size(); ++j)
        e += 1.0 / norm(pts[i] - pts[j]) + 1.0 / norm(pts[i] + pts[j]);
    return e;
  };

  double step = 0.1 / static_cast<double>(count);
  double e = energy(p);
  std::vector<Vec3> force(count), trial(count);
  for (int it = 0; it < steps; ++it) {
    for (std::size_t i = 0; i < count; ++i) {
      Vec3 f{0, 0, 0};
      for (std::size_t j = 0; j < count; ++j) {
        if (i == j) continue;
        const Vec3 dm = p[i] - p[j];
        const Vec3 dp = p[i] + p[j];
        const double rm = norm(dm), rp = norm(dp);
        f = f + scaled(dm, 1.0 / (rm * rm * rm)) + scaled(dp, 1.0 / (rp * rp * rp));
      }
      // tangential component only
      force[i] = f - scaled(p[i], dot(f, p[i]));
    }
    for (std::size_t i = 0; i < count; ++i) trial[i] = normalized(p[i] + scaled(force[i], step));
    const double e_trial = energy(trial);
    if (e_trial < e) {
      p.swap(trial);
      e = e_trial;
      step *= 1.1;
    } else {
      step *= 0.5;
    }
  }
  for (auto& v : p)
    if (v[2] < 0) v = scaled(v, -1.0);
  return p;
}

inline AcquisitionScheme synthetic_scheme(const std::vector<double>& shells,
                                          std::size_t dirs_per_shell, std::size_t n_b0,
                                          std::uint64_t seed) {
  require(!shells.empty(), "synthetic_scheme: at least one shell required");
  require(dirs_per_shell >= 6, "synthetic_scheme: dirs_per_shell must be >= 6");
  std::vector<double> b(n_b0, 0.0);
  std::vector<Vec3> dirs(n_b0, Vec3{0, 0, 0});
  for (std::size_t s = 0; s < shells.size(); ++s) {
    require(shells[s] >= kDefaultB0Threshold, "synthetic_scheme: shell b-value below b0 threshold");
    const auto pts = electrostatic_directions(dirs_per_shell, seed + 7919 * (s + 1));
    for (const auto& v : pts) {
      b.push_back(shells[s]);
      dirs.push_back(v);
    }
  }
  return AcquisitionScheme(std::move(b), std::move(dirs));
}

// Clusters non-b0 b-values into shells. Keys are rounded cluster means.
inline std::map<long, std::vector<std::size_t>> shell_partition(const AcquisitionScheme& scheme,
                                                                 double tol = 100.0) {
  require(tol > 0, "shell_partition: tol must be positive");
  std::vector<std::size_t> order;
  for (std::size_t n = 0; n < scheme.size(); ++n)
    if (!scheme.is_b0(n)) order.push_back(n);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t c) { return scheme.b(a) < scheme.b(c); });

  std::vector<std::vector<std::size_t>> clusters;
  for (std::size_t idx : order) {
    if (clusters.empty() || scheme.b(idx) - scheme.b(clusters.back().back()) > tol)
      clusters.emplace_back();
    clusters.back().push_back(idx);
  }

  std::map<long, std::vector<std::size_t>> shells;
  double prev_mean = -1e300;
  for (auto& c : clusters) {
    double mean = 0;
    for (std::size_t idx : c) mean += scheme.b(idx);
    mean /= static_cast<double>(c.size());
    if (mean - prev_mean < 2 * tol)
      throw DataError("shell_partition: shells at " + std::to_string(prev_mean) + " and " +
                      std::to_string(mean) + " are closer than 2*tol");
    prev_mean = mean;
    std::sort(c.begin(), c.end());
    shells.emplace(std::lround(mean), std::move(c));
  }
  return shells;
}

}  // namespace fixelfit
