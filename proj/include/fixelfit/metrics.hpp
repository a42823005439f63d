#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "error.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "phantom.hpp"
#include "vec3.hpp"

namespace fixelfit {

struct FiberPeak {
  Vec3 direction;
  double fraction = 0;
};

using FiberPeakSet = std::vector<FiberPeak>;  // one voxel, fractions descending

inline constexpr double kMergeAngleDeg = 5.0;

// Keeps fibers whose fraction reaches f_detect and merges kept pairs closer
// than 5 degrees into one fraction-weighted peak.
inline FiberPeakSet extract_peaks(const ConstrainedTissue& t, std::size_t v, double f_detect = 0.05) {
  require(f_detect > 0 && f_detect < 1, "extract_peaks: f_detect must be in (0, 1)");
  FiberPeakSet peaks;
  for (int k = 0; k < t.k; ++k) {
    const double f = t.fiber_fraction(v, k);
    if (f >= f_detect) peaks.push_back({t.direction(v, k), f});
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const FiberPeak& a, const FiberPeak& b) { return a.fraction > b.fraction; });
  bool merged = true;
  while (merged) {
    merged = false;
    for (std::size_t i = 0; i < peaks.size() && !merged; ++i)
      for (std::size_t j = i + 1; j < peaks.size() && !merged; ++j) {
        if (axis_angle_deg(peaks[i].direction, peaks[j].direction) >= kMergeAngleDeg) continue;
        // flip j onto i's hemisphere before averaging
        const Vec3 dj = dot(peaks[i].direction, peaks[j].direction) < 0
                            ? scaled(peaks[j].direction, -1.0)
                            : peaks[j].direction;
        const double f = peaks[i].fraction + peaks[j].fraction;
        peaks[i].direction = normalized(scaled(peaks[i].direction, peaks[i].fraction / f) +
                                        scaled(dj, peaks[j].fraction / f));
        peaks[i].fraction = f;
        peaks.erase(peaks.begin() + static_cast<std::ptrdiff_t>(j));
        merged = true;
      }
  }
  std::stable_sort(peaks.begin(), peaks.end(),
                   [](const FiberPeak& a, const FiberPeak& b) { return a.fraction > b.fraction; });
  return peaks;
}

// Mean over ground-truth fibers of the angle to the closest predicted peak;
// nullopt when nothing was predicted.
inline std::optional<double> best_match_error(std::span<const Vec3> truth, const FiberPeakSet& pred) {
  require(!truth.empty(), "best_match_error: ground truth is empty");
  if (pred.empty()) return std::nullopt;
  double sum = 0;
  for (const auto& g : truth) {
    double best = 180;
    for (const auto& p : pred) best = std::min(best, axis_angle_deg(g, p.direction));
    sum += best;
  }
  return sum / static_cast<double>(truth.size());
}

struct DetectionCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  DetectionCounts& operator+=(const DetectionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 1.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

// Greedy one-to-one matching in ascending angular distance.
inline DetectionCounts match_peaks(std::span<const Vec3> truth, const FiberPeakSet& pred,
                                   double angle_tol = 25.0) {
  require(angle_tol > 0, "detection: angle_tol must be positive");
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t j = 0; j < pred.size(); ++j)
      pairs.emplace_back(axis_angle_deg(truth[i], pred[j].direction), i, j);
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  std::vector<bool> used_t(truth.size(), false), used_p(pred.size(), false);
  DetectionCounts c;
  for (const auto& [angle, i, j] : pairs) {
    if (angle > angle_tol) break;
    if (used_t[i] || used_p[j]) continue;
    used_t[i] = used_p[j] = true;
    ++c.tp;
  }
  c.fn = truth.size() - c.tp;
  c.fp = pred.size() - c.tp;
  return c;
}

struct Prf {
  double precision = 0, recall = 0, f1 = 0;
};

inline Prf detection_prf(std::span<const std::vector<Vec3>> truth, std::span<const FiberPeakSet> pred,
                         double angle_tol = 25.0) {
  require(truth.size() == pred.size(), "detection_prf: voxel count mismatch");
  DetectionCounts total;
  for (std::size_t v = 0; v < truth.size(); ++v) total += match_peaks(truth[v], pred[v], angle_tol);
  return {total.precision(), total.recall(), total.f1()};
}

inline double sigma_recovery(double fitted, double truth) {
  require(truth > 0, "sigma_recovery: true sigma must be positive");
  return std::fabs(fitted - truth) / truth;
}

inline double reconstruction_mse(std::span<const double> y_hat, std::span<const double> y) {
  return mse_loss(y_hat, y);
}

// ---------------------------------------------------------------------------
// Benchmark evaluation

struct MetricOptions {
  double f_detect = 0.05;
  double angle_tol = 25.0;
};

struct AngleRow {
  std::optional<double> angle;  // nullopt: single-fiber controls
  std::size_t voxels = 0;
  std::size_t missed = 0;       // voxels with no detected peak
  double mean_error = 0;        // degrees, over voxels with at least one peak
  DetectionCounts counts;
};

struct EvalReport {
  MetricOptions options;
  std::vector<AngleRow> rows;
  double overall_error = 0;
  double wide_error = 0;  // crossings at 60 degrees and wider
  DetectionCounts counts;
  std::size_t missed = 0;
  std::optional<double> sigma_fit, sigma_true, sigma_rel_error;
  std::optional<double> reconstruction_mse;

  const AngleRow* row(std::optional<double> angle) const {
    for (const auto& r : rows)
      if (r.angle.has_value() == angle.has_value() && (!angle || std::fabs(*r.angle - *angle) < 1e-9))
        return &r;
    return nullptr;
  }
};

// peaks_at(grid_index) returns the peak set of a voxel (empty if unfitted).
template <class PeaksAt>
EvalReport evaluate_peaks(const GroundTruth& truth, PeaksAt&& peaks_at, const MetricOptions& opt) {
  EvalReport rep;
  rep.options = opt;
  std::map<double, std::size_t> angle_row;
  for (double a : truth.angles) {
    angle_row[a] = rep.rows.size();
    rep.rows.emplace_back().angle = a;
  }
  std::optional<std::size_t> single_row;
  std::vector<double> err_sum(rep.rows.size() + 1, 0.0);
  double all_sum = 0, wide_sum = 0;
  std::size_t all_n = 0, wide_n = 0;
  for (const auto& tv : truth.voxels) {
    std::size_t r;
    if (tv.angle) {
      r = angle_row.at(*tv.angle);
    } else {
      if (!single_row) {
        single_row = rep.rows.size();
        rep.rows.push_back(AngleRow{});
        err_sum.push_back(0.0);
      }
      r = *single_row;
    }
    auto& row = rep.rows[r];
    const FiberPeakSet peaks = peaks_at(tv.index);
    ++row.voxels;
    const auto c = match_peaks(tv.directions, peaks, opt.angle_tol);
    row.counts += c;
    rep.counts += c;
    const auto e = best_match_error(tv.directions, peaks);
    if (!e) {
      ++row.missed;
      ++rep.missed;
      continue;
    }
    err_sum[r] += *e;
    all_sum += *e;
    ++all_n;
    if (tv.angle && *tv.angle >= 60) {
      wide_sum += *e;
      ++wide_n;
    }
  }
  for (std::size_t r = 0; r < rep.rows.size(); ++r) {
    const std::size_t n = rep.rows[r].voxels - rep.rows[r].missed;
    rep.rows[r].mean_error = n ? err_sum[r] / static_cast<double>(n) : 0.0;
  }
  rep.overall_error = all_n ? all_sum / static_cast<double>(all_n) : 0.0;
  rep.wide_error = wide_n ? wide_sum / static_cast<double>(wide_n) : 0.0;
  if (truth.sigma > 0) rep.sigma_true = truth.sigma;
  return rep;
}

}  // namespace fixelfit
