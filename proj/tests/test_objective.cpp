#include <cmath>

#include "support.hpp"

using namespace fixelfit;
using fixelfit::testing::make_tissue;
using fixelfit::testing::small_scheme;

namespace {

RegWeights only(double RegWeights::*field, double value = 1.0) {
  auto w = fixelfit::testing::no_regularizers();
  w.*field = value;
  return w;
}

struct Pair {
  FitData fd;
  Neighborhood nb;
};

Pair line(int n) {
  Pair p{fixelfit::testing::grid_data({n, 1, 1}, small_scheme()), {}};
  p.nb = build_neighborhood(p.fd, 6);
  return p;
}

}  // namespace

TEST(MseLoss, ReferenceValues) {
  const std::vector<double> y{0.3, 0.5, 0.9, 0.1};
  EXPECT_EQ(mse_loss(y, y), 0.0);
  std::vector<double> shifted = y;
  for (auto& v : shifted) v += 0.1;
  EXPECT_NEAR(mse_loss(shifted, y), 0.01, 1e-15);
  EXPECT_NEAR(mse_loss(std::vector<double>{0.0, 0.2}, std::vector<double>{0.0, 0.0}), 0.02, 1e-15);
  EXPECT_THROW(mse_loss(std::vector<double>{}, std::vector<double>{}), DataError);
}

TEST(MseLoss, VolumeFormHonorsMaskAndPermutation) {
  SignalVolume a({3, 1, 1}, 2), b({3, 1, 1}, 2);
  a.data = {1, 1, 5, 5, 0.2, 0.4};
  b.data = {1, 1, 0, 0, 0.0, 0.0};
  std::vector<bool> mask{true, false, true};
  EXPECT_NEAR(mse_loss(a, b, mask), (0.04 + 0.16) / 4, 1e-15);
  SignalVolume pa({3, 1, 1}, 2), pb({3, 1, 1}, 2);
  pa.data = {0.2, 0.4, 5, 5, 1, 1};
  pb.data = {0.0, 0.0, 0, 0, 1, 1};
  EXPECT_EQ(mse_loss(pa, pb, {true, false, true}), mse_loss(a, b, mask));
  EXPECT_THROW(mse_loss(a, b, {false, false, false}), DataError);
}

TEST(RicianNll, ReferenceValues) {
  EXPECT_EQ(rician_nll_term(0.0, 0.0, 1.0), 0.0);
  EXPECT_NEAR(rician_nll_term(1.0, 1.0, 0.1), -1.3849028759306751, 1e-9);
  EXPECT_THROW(rician_nll(std::vector<double>{1.0}, std::vector<double>{1.0}, 0.0), ConfigError);
  EXPECT_THROW(rician_nll(std::vector<double>{1.0}, std::vector<double>{-1.0}, 0.1), DataError);
  // negative predictions are clamped at zero
  EXPECT_EQ(rician_nll_term(-0.3, 0.5, 0.2), rician_nll_term(0.0, 0.5, 0.2));
}

TEST(RicianNll, SummedOverPairs) {
  const std::vector<double> yh{0.5, 0.9, 0.2}, y{0.55, 0.8, 0.25};
  double sum = 0;
  for (std::size_t i = 0; i < 3; ++i) sum += rician_nll_term(yh[i], y[i], 0.07);
  EXPECT_NEAR(rician_nll(yh, y, 0.07), sum, 1e-12);
}

TEST(RicianNll, UniqueInteriorMinimumInSigma) {
  const std::vector<double> yh{0.5, 0.9, 0.2, 0.6}, y{0.55, 0.8, 0.25, 0.52};
  std::vector<double> vals;
  for (int i = 0; i <= 400; ++i) vals.push_back(rician_nll(yh, y, std::pow(10.0, -3.0 + 3.0 * i / 400.0)));
  int minima = 0;
  std::size_t arg = 0;
  for (std::size_t i = 1; i + 1 < vals.size(); ++i)
    if (vals[i] < vals[i - 1] && vals[i] < vals[i + 1]) {
      ++minima;
      arg = i;
    }
  EXPECT_EQ(minima, 1);
  EXPECT_GT(arg, 0u);
  EXPECT_LT(arg, vals.size() - 1);
}

TEST(RicianNll, GaussianLimitGradient) {
  const double sigma = 0.01;
  for (auto [yh, y] : {std::pair{1.0, 1.0}, std::pair{1.01, 0.99}, std::pair{0.995, 1.005}}) {
    const double h = 1e-7;
    const double d = (rician_nll_term(yh + h, y, sigma) - rician_nll_term(yh - h, y, sigma)) / (2 * h);
    EXPECT_LT(std::fabs(d - (yh - y) / (sigma * sigma)) * sigma, 0.02);
  }
}

TEST(Huber, Branches) {
  EXPECT_NEAR(huber(0.04, 0.05), 8e-4, 1e-18);
  EXPECT_NEAR(huber(-0.1, 0.05), 3.75e-3, 1e-18);
  EXPECT_EQ(huber_derivative(0.2, 0.05), 0.05);
}

TEST(SpatialHuber, ReferenceValues) {
  auto p = line(2);
  RegWeights w;
  auto t = make_tissue(1, {{0.0}, {0.0}}, {{Vec3{0, 0, 1}}, {Vec3{0, 0, 1}}});
  t.fractions = {0.25, 0.25, 0.0, 0.5, 0.25, 0.25, 0.04, 0.5};
  EXPECT_NEAR(spatial_huber_laplacian(t, p.nb, w), w.lambda_sp * (8e-4 + 8e-4) / 2, 1e-18);
  t.fractions[6] = 0.1;
  EXPECT_NEAR(spatial_huber_laplacian(t, p.nb, w), w.lambda_sp * (2 * 3.75e-3) / 2, 1e-18);
}

TEST(SpatialHuber, ConstantAndTranslatedFields) {
  auto p = line(4);
  RegWeights w;
  auto t = make_tissue(2, {{0.3, 0.2}, {0.3, 0.2}, {0.3, 0.2}, {0.3, 0.2}},
                       std::vector<std::vector<Vec3>>(4, {Vec3{1, 0, 0}, Vec3{0, 1, 0}}));
  EXPECT_EQ(spatial_huber_laplacian(t, p.nb, w), 0.0);
  t.fractions[7] = 0.45;
  const double base = spatial_huber_laplacian(t, p.nb, w);
  EXPECT_GT(base, 0.0);
  auto shifted = t;
  for (std::size_t i = 0; i < shifted.fractions.size(); ++i) shifted.fractions[i] += 0.01 * static_cast<double>(i % 5);
  EXPECT_NEAR(spatial_huber_laplacian(shifted, p.nb, w), base, 1e-15);
}

TEST(SpatialHuber, IsolatedVoxelsContributeNothing) {
  const auto scheme = small_scheme();
  const auto fd = fixelfit::testing::grid_data({3, 1, 1}, scheme, 1, {true, false, true});
  const auto nb = build_neighborhood(fd, 6);
  const auto t = make_tissue(1, {{0.1}, {0.9}}, {{Vec3{1, 0, 0}}, {Vec3{1, 0, 0}}});
  EXPECT_EQ(spatial_huber_laplacian(t, nb, RegWeights{}), 0.0);
}

TEST(Repulsion, ReferenceValues) {
  const auto w = only(&RegWeights::lambda_rep);
  EXPECT_EQ(repulsion(make_tissue(2, {{0.5, 0.5}}, {{Vec3{1, 0, 0}, Vec3{0, 1, 0}}}), w), 0.0);
  EXPECT_NEAR(repulsion(make_tissue(2, {{0.5, 0.5}}, {{Vec3{1, 0, 0}, Vec3{1, 0, 0}}}), w), 0.25, 1e-15);
  const double c = std::cos(M_PI / 3), s = std::sin(M_PI / 3);
  const auto t3 = make_tissue(3, {{1.0 / 3, 1.0 / 3, 1.0 / 3}}, {{Vec3{1, 0, 0}, Vec3{c, s, 0}, Vec3{-c, s, 0}}});
  EXPECT_NEAR(repulsion(t3, w), 1.0 / 6, 1e-12);
  EXPECT_NEAR(repulsion(t3, RegWeights{}), 0.01 / 6, 1e-14);
}

TEST(Repulsion, SignFlipInvariant) {
  auto t = make_tissue(2, {{0.4, 0.3}, {0.2, 0.6}}, {{Vec3{1, 2, 0}, Vec3{0, 1, 1}}, {Vec3{3, 0, 1}, Vec3{1, 1, 1}}});
  const double base = repulsion(t, RegWeights{});
  for (auto& d : t.directions) {
    d = scaled(d, -1);
    EXPECT_EQ(repulsion(t, RegWeights{}), base);
  }
}

TEST(Sparsity, ReferenceValues) {
  RegWeights w;
  const std::vector<std::vector<Vec3>> d{{Vec3{1, 0, 0}, Vec3{0, 1, 0}}};
  EXPECT_EQ(minor_fiber_sparsity(make_tissue(2, {{0.5, 0.2}}, d), w), 0.0);
  EXPECT_NEAR(minor_fiber_sparsity(make_tissue(2, {{0.5, 0.1}}, d), w), 0.1 * w.lambda_sparse, 1e-16);
  EXPECT_NEAR(minor_fiber_sparsity(make_tissue(2, {{0.14, 0.14}}, d), w), 0.28 * w.lambda_sparse, 1e-16);
}

TEST(Orphan, ReferenceValues) {
  RegWeights w;
  const std::vector<std::vector<Vec3>> d{{Vec3{1, 0, 0}, Vec3{0, 1, 0}}};
  EXPECT_LT(orphan_wm(make_tissue(2, {{0.4, 0.4}}, d, 1.0), w), 1e-30);
  EXPECT_NEAR(orphan_wm(make_tissue(2, {{0.4, 0.4}}, d, 0.0), w), 0.8 * w.lambda_orphan * 0.999954602131298, 1e-15);
  EXPECT_EQ(orphan_gate(w.orphan_s_low, w), 0.5);
}

TEST(Continuity, ReferenceValues) {
  auto p = line(2);
  const auto w = only(&RegWeights::lambda_cont);
  EXPECT_EQ(directional_continuity(make_tissue(1, {{1.0}, {1.0}}, {{Vec3{0, 0, 1}}, {Vec3{0, 0, 1}}}), p.nb, w), 0.0);
  EXPECT_NEAR(directional_continuity(make_tissue(1, {{1.0}, {1.0}}, {{Vec3{0, 0, 1}}, {Vec3{1, 0, 0}}}), p.nb, w), 1.0,
              1e-15);
  EXPECT_EQ(directional_continuity(make_tissue(1, {{1.0}, {1.0}}, {{Vec3{0, 0, 1}}, {Vec3{0, 0, -1}}}), p.nb, w), 0.0);
}

TEST(Ordering, ReferenceValues) {
  RegWeights w;
  const std::vector<std::vector<Vec3>> d{{Vec3{1, 0, 0}, Vec3{0, 1, 0}}};
  EXPECT_EQ(fiber_ordering(make_tissue(2, {{0.5, 0.2}}, d), w), 0.0);
  EXPECT_NEAR(fiber_ordering(make_tissue(2, {{0.2, 0.5}}, d), w), 0.3 * w.lambda_order, 1e-16);
  EXPECT_EQ(fiber_ordering(make_tissue(2, {{0.3, 0.3}}, d), w), 0.0);
}

TEST(CalibrationPenalty, ReferenceValues) {
  const GridDims dims{6, 5, 4};
  CalibrationParams cal(2);
  EXPECT_EQ(calibration_penalty(cal, dims, RegWeights{}), 0.0);
  cal.alpha = {0.1, 0.0};
  EXPECT_NEAR(calibration_penalty(cal, dims, only(&RegWeights::lambda_alpha)), 0.01, 1e-16);

  CalibrationParams flat(2);
  std::fill(flat.bias_grid.begin(), flat.bias_grid.end(), 0.3);
  EXPECT_NEAR(calibration_penalty(flat, dims, only(&RegWeights::lambda_bias_tv)), 0.0, 1e-25);
  EXPECT_NEAR(calibration_penalty(flat, dims, only(&RegWeights::lambda_bias_l2)), 512 * 0.09, 1e-12);
}

TEST(TotalObjective, ZeroAtExactFitWithoutRegularizers) {
  const auto scheme = small_scheme();
  auto fd = fixelfit::testing::grid_data({3, 2, 1}, scheme);
  const auto p = fixelfit::testing::random_params(fd.size(), 2, scheme.size(), 4);
  fd.y = predict_compact(constrain(p.tissue), p.cal, scheme, {}, fd);
  const Problem problem(fd, scheme, {}, LossMode::kMse, fixelfit::testing::no_regularizers());
  EXPECT_EQ(total_objective(problem, p).total(), 0.0);
}

TEST(TotalObjective, BreakdownSumsToTotal) {
  const auto scheme = small_scheme();
  const auto fd = fixelfit::testing::grid_data({3, 3, 2}, scheme);
  const auto p = fixelfit::testing::random_params(fd.size(), 3, scheme.size(), 12);
  for (auto mode : {LossMode::kMse, LossMode::kRicianNll}) {
    const Problem problem(fd, scheme, {}, mode, RegWeights{});
    const auto b = total_objective(problem, p);
    const double sum = b.data + b.spatial + b.repulsion + b.sparsity + b.orphan + b.continuity + b.ordering + b.calibration;
    EXPECT_NEAR(b.total(), sum, 1e-12 * std::fabs(sum));
  }
}

TEST(TotalObjective, DataTermIsMeasurementSumOverVoxels) {
  const auto scheme = small_scheme();
  const auto fd = fixelfit::testing::grid_data({2, 2, 1}, scheme);
  const auto p = fixelfit::testing::random_params(fd.size(), 2, scheme.size(), 12);
  const Problem problem(fd, scheme, {}, LossMode::kMse, fixelfit::testing::no_regularizers());
  const auto y_hat = predict_compact(constrain(p.tissue), p.cal, scheme, {}, fd);
  double sum = 0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) sum += (y_hat[i] - fd.y[i]) * (y_hat[i] - fd.y[i]);
  EXPECT_NEAR(total_objective(problem, p).data, sum / static_cast<double>(fd.size()), 1e-14);
}

TEST(TotalObjective, EnablingATermNeverDecreasesTheTotal) {
  const auto scheme = small_scheme();
  const auto fd = fixelfit::testing::grid_data({3, 3, 2}, scheme);
  auto p = fixelfit::testing::random_params(fd.size(), 3, scheme.size(), 21);
  for (std::size_t v = 0; v < fd.size(); v += 3) p.tissue.s0_raw[v] = softplus_inverse(0.1);
  const auto none = fixelfit::testing::no_regularizers();
  for (auto field : {&RegWeights::lambda_sp, &RegWeights::lambda_rep, &RegWeights::lambda_sparse,
                     &RegWeights::lambda_orphan, &RegWeights::lambda_cont, &RegWeights::lambda_order,
                     &RegWeights::lambda_alpha, &RegWeights::lambda_beta, &RegWeights::lambda_bias_l2,
                     &RegWeights::lambda_bias_tv}) {
    const Problem off(fd, scheme, {}, LossMode::kMse, none);
    const Problem on(fd, scheme, {}, LossMode::kMse, only(field, 0.05));
    const double a = total_objective(off, p).total(), b = total_objective(on, p).total();
    EXPECT_GT(b, a);
  }
}
