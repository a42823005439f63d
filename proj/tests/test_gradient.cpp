#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace fixelfit;
using fixelfit::testing::grid_data;
using fixelfit::testing::no_regularizers;
using fixelfit::testing::random_params;
using fixelfit::testing::small_scheme;

TEST(Gradient, ZeroAtExactFitWithoutRegularizers) {
  const auto scheme = small_scheme();
  auto fd = grid_data({3, 2, 1}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 4);
  fd.y = predict_compact(constrain(p.tissue), p.cal, scheme, {}, fd);
  const Problem problem(fd, scheme, {}, LossMode::kMse, no_regularizers());
  const auto g = evaluate_gradient(problem, p);
  for (auto group : param_groups(g.grad))
    for (double x : group) EXPECT_NEAR(x, 0.0, 1e-12);
}

TEST(Gradient, OffsetDerivativeHandValue) {
  // two voxels, one measurement, identity calibration
  const AcquisitionScheme scheme({1000}, {Vec3{1, 0, 0}});
  FitData fd;
  fd.full_dims = fd.dims = {2, 1, 1};
  fd.n_meas = 1;
  fd.voxels = {{0, 0, 0}, {1, 0, 0}};
  fd.grid_to_voxel = {0, 1};
  fd.y = {0.3, 0.6};
  fd.b0 = {1, 1};
  const Problem problem(fd, scheme, {}, LossMode::kMse, no_regularizers());
  const auto p = random_params(2, 1, 1, 5, true);
  const auto y_hat = predict_compact(constrain(p.tissue), p.cal, scheme, {}, fd);
  const auto g = evaluate_gradient(problem, p);
  EXPECT_NEAR(g.grad.cal.beta[0], 2 * ((y_hat[0] - 0.3) + (y_hat[1] - 0.6)) / 2, 1e-14);
}

TEST(Gradient, ObjectiveMatchesReferenceEvaluation) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({4, 3, 2}, scheme);
  const auto p = random_params(fd.size(), 3, scheme.size(), 8);
  for (auto mode : {LossMode::kMse, LossMode::kRicianNll}) {
    const Problem problem(fd, scheme, {}, mode, RegWeights{});
    const auto a = evaluate_gradient(problem, p).breakdown;
    const auto b = total_objective(problem, p);
    EXPECT_NEAR(a.total(), b.total(), 1e-12 * std::fabs(b.total()));
    EXPECT_NEAR(a.data, b.data, 1e-12 * std::fabs(b.data));
    EXPECT_NEAR(a.calibration, b.calibration, 1e-14);
  }
}

TEST(FdCheck, MseIdentityCalibration) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({3, 3, 2}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 2, true);
  const Problem problem(fd, scheme, {}, LossMode::kMse, RegWeights{});
  const auto r = fd_check(problem, p, 1e-4, 20, 1);
  EXPECT_LT(r.max_error(), 1e-3);
  EXPECT_GT(r.probes, 100u);
}

TEST(FdCheck, NllIncludingSigma) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({3, 3, 2}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 3);
  const Problem problem(fd, scheme, {}, LossMode::kRicianNll, RegWeights{});
  const auto r = fd_check(problem, p, 1e-4, 20, 1);
  EXPECT_LT(r.max_error(), 1e-3);
  EXPECT_EQ(r.groups[7].probes, 1u);
}

TEST(FdCheck, RejectsZeroStep) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({2, 1, 1}, scheme);
  const Problem problem(fd, scheme, {}, LossMode::kMse, RegWeights{});
  EXPECT_THROW(fd_check(problem, random_params(2, 1, scheme.size(), 1), 0.0, 5, 1), ConfigError);
}

TEST(FdCheck, RandomStatesAllTermsBothModes) {
  for (auto mode : {LossMode::kMse, LossMode::kRicianNll})
    for (std::uint64_t seed : {11u, 12u, 13u}) {
      GradCheckOptions o;
      o.mode = mode;
      o.seed = seed;
      const auto r = random_gradient_check(o);
      EXPECT_GE(r.probes, 200u);
      EXPECT_LT(r.max_error(), 1e-3) << to_string(mode) << " seed " << seed;
    }
}

TEST(FdCheck, TwentySixNeighborhood) {
  GradCheckOptions o;
  o.weights.neighborhood = 26;
  o.weights.lambda_sp = 0.5;
  o.weights.lambda_cont = 0.5;
  EXPECT_LT(random_gradient_check(o).max_error(), 1e-3);
}

TEST(Gradient, DirectionGradientIsOrthogonalToDirection) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({3, 3, 2}, scheme);
  const auto p = random_params(fd.size(), 3, scheme.size(), 14);
  const Problem problem(fd, scheme, {}, LossMode::kMse, RegWeights{});
  const auto g = evaluate_gradient(problem, p);
  const auto t = constrain(p.tissue);
  for (std::size_t i = 0; i < t.directions.size(); ++i) {
    const Vec3 gd{g.grad.tissue.dir_raw[3 * i], g.grad.tissue.dir_raw[3 * i + 1], g.grad.tissue.dir_raw[3 * i + 2]};
    EXPECT_LT(std::fabs(dot(gd, t.directions[i])), 1e-6 * std::max(1.0, norm(gd)));
  }
}

TEST(Gradient, FractionLogitGradientsSumToZero) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({3, 3, 2}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 15);
  const Problem problem(fd, scheme, {}, LossMode::kRicianNll, RegWeights{});
  const auto g = evaluate_gradient(problem, p);
  for (std::size_t v = 0; v < fd.size(); ++v) {
    const double* d = g.grad.tissue.fraction_logits.data() + v * 5;
    EXPECT_NEAR(std::accumulate(d, d + 5, 0.0), 0.0, 1e-8);
  }
}

TEST(Gradient, PermutationEquivariantWithoutSpatialTerms) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({4, 2, 1}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 16);
  auto w = RegWeights{};
  w.lambda_sp = w.lambda_cont = 0;

  // reverse the compact voxel order, keeping every voxel at its grid position
  const std::size_t nv = fd.size(), n = fd.n_meas;
  FitData rf = fd;
  ParameterSet rp = p;
  for (std::size_t i = 0; i < nv; ++i) {
    const std::size_t j = nv - 1 - i;
    rf.voxels[i] = fd.voxels[j];
    rf.b0[i] = fd.b0[j];
    for (std::size_t m = 0; m < n; ++m) rf.y[i * n + m] = fd.y[j * n + m];
    rp.tissue.s0_raw[i] = p.tissue.s0_raw[j];
    rp.tissue.f_intra_raw[i] = p.tissue.f_intra_raw[j];
    for (std::size_t c = 0; c < 5; ++c) rp.tissue.fraction_logits[i * 5 + c] = p.tissue.fraction_logits[j * 5 + c];
    for (std::size_t c = 0; c < 6; ++c) rp.tissue.dir_raw[i * 6 + c] = p.tissue.dir_raw[j * 6 + c];
  }
  for (std::size_t i = 0; i < nv; ++i) {
    const auto& q = rf.voxels[i];
    rf.grid_to_voxel[rf.dims.linear(q[0], q[1], q[2])] = static_cast<int>(i);
  }
  const Problem a(fd, scheme, {}, LossMode::kMse, w), b(rf, scheme, {}, LossMode::kMse, w);
  const auto ga = evaluate_gradient(a, p), gb = evaluate_gradient(b, rp);
  for (std::size_t i = 0; i < nv; ++i) {
    const std::size_t j = nv - 1 - i;
    EXPECT_NEAR(gb.grad.tissue.s0_raw[i], ga.grad.tissue.s0_raw[j], 1e-14);
    for (std::size_t c = 0; c < 6; ++c)
      EXPECT_NEAR(gb.grad.tissue.dir_raw[i * 6 + c], ga.grad.tissue.dir_raw[j * 6 + c], 1e-14);
  }
  for (std::size_t m = 0; m < n; ++m) EXPECT_NEAR(gb.grad.cal.alpha[m], ga.grad.cal.alpha[m], 1e-12);
  EXPECT_NEAR(gb.breakdown.total(), ga.breakdown.total(), 1e-12);
}

TEST(Gradient, BitwiseIdenticalForAnyThreadCount) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({9, 8, 3}, scheme);
  const auto p = random_params(fd.size(), 2, scheme.size(), 17);
  for (auto mode : {LossMode::kMse, LossMode::kRicianNll}) {
    const Problem problem(fd, scheme, {}, mode, RegWeights{});
    const auto one = evaluate_gradient(problem, p, 1);
    for (int threads : {2, 3, 8}) {
      const auto many = evaluate_gradient(problem, p, threads);
      EXPECT_EQ(many.breakdown.total(), one.breakdown.total());
      const auto ga = param_groups(one.grad), gb = param_groups(many.grad);
      for (std::size_t g = 0; g < kParamGroups; ++g)
        EXPECT_TRUE(std::equal(ga[g].begin(), ga[g].end(), gb[g].begin())) << kParamGroupNames[g];
    }
  }
}

TEST(Gradient, UnmaskedVoxelsCarryNoParameters) {
  const auto scheme = small_scheme();
  const auto fd = grid_data({3, 1, 1}, scheme, 1, {true, false, true});
  EXPECT_EQ(fd.size(), 2u);
  const auto p = random_params(fd.size(), 1, scheme.size(), 1);
  const Problem problem(fd, scheme, {}, LossMode::kMse, RegWeights{});
  const auto g = evaluate_gradient(problem, p);
  EXPECT_EQ(g.grad.tissue.s0_raw.size(), 2u);
}
