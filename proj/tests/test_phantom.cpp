#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace fixelfit;

namespace {

AcquisitionScheme one_measurement(double b, Vec3 g) { return AcquisitionScheme({b}, {g}); }

}  // namespace

TEST(MultiTensor, SingleFiberValues) {
  const std::array<double, 3> ev{1.7, 0.3, 0.3};
  const std::vector<Vec3> d{{1, 0, 0}};
  const std::vector<double> f{1.0};
  EXPECT_NEAR(multi_tensor_signal(d, f, ev, one_measurement(1000, {1, 0, 0}))[0], 0.182683524052735, 1e-13);
  EXPECT_NEAR(multi_tensor_signal(d, f, ev, one_measurement(1000, {0, 1, 0}))[0], 0.740818220681718, 1e-13);
  EXPECT_EQ(multi_tensor_signal(d, f, ev, one_measurement(0, {0, 0, 0}))[0], 1.0);
}

TEST(MultiTensor, CrossingIsFractionWeightedSum) {
  const std::array<double, 3> ev{1.7, 0.3, 0.3};
  const auto scheme = fixelfit::testing::small_scheme();
  const std::vector<Vec3> d{{1, 0, 0}, {0, 1, 0}};
  const std::vector<double> f{0.3, 0.7};
  const auto both = multi_tensor_signal(d, f, ev, scheme);
  const auto a = multi_tensor_signal(std::span(d).first(1), std::vector<double>{1.0}, ev, scheme);
  const auto b = multi_tensor_signal(std::span(d).last(1), std::vector<double>{1.0}, ev, scheme);
  for (std::size_t n = 0; n < scheme.size(); ++n) EXPECT_NEAR(both[n], 0.3 * a[n] + 0.7 * b[n], 1e-15);
}

TEST(RicianNoise, InfiniteSnrIsIdentity) {
  std::vector<double> s{0.1, 0.5, 1.0};
  const auto copy = s;
  std::mt19937_64 rng(1);
  add_rician_noise(s, std::numeric_limits<double>::infinity(), rng);
  EXPECT_EQ(s, copy);
}

TEST(RicianNoise, ZeroSignalIsRayleigh) {
  const double snr = 20, sigma = 1 / snr;
  std::vector<double> s(1000000, 0.0);
  std::mt19937_64 rng(2);
  add_rician_noise(s, snr, rng);
  const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  EXPECT_NEAR(mean, sigma * std::sqrt(M_PI / 2), 0.005 * sigma * std::sqrt(M_PI / 2));
  for (double x : s) ASSERT_GE(x, 0.0);
}

TEST(RicianNoise, SecondMomentMatchesSigma) {
  // E[M^2] = A^2 + 2 sigma^2
  const double snr = 30, a = 0.6;
  std::vector<double> s(400000, a);
  std::mt19937_64 rng(3);
  add_rician_noise(s, snr, rng);
  double m2 = 0;
  for (double x : s) m2 += x * x;
  m2 /= static_cast<double>(s.size());
  const double sigma_est = std::sqrt((m2 - a * a) / 2);
  EXPECT_NEAR(sigma_est, 1 / snr, 0.01 / snr);
}

TEST(GainPerturb, LogGainSpread) {
  SignalVolume v({1, 1, 1}, 10000);
  std::fill(v.data.begin(), v.data.end(), 1.0);
  std::mt19937_64 rng(4);
  const auto gains = gain_perturb(v, 0.2, rng);
  double m = 0, m2 = 0;
  for (double g : gains) {
    m += std::log(g);
    m2 += std::log(g) * std::log(g);
  }
  m /= 10000;
  const double sd = std::sqrt(m2 / 10000 - m * m);
  EXPECT_NEAR(sd, 0.2, 0.004);
  for (std::size_t n = 0; n < 10000; ++n) EXPECT_EQ(v.data[n], gains[n]);
}

TEST(GainPerturb, ZeroSpreadIsIdentity) {
  SignalVolume v({2, 1, 1}, 3);
  std::fill(v.data.begin(), v.data.end(), 0.5);
  std::mt19937_64 rng(4);
  const auto gains = gain_perturb(v, 0.0, rng);
  for (double g : gains) EXPECT_EQ(g, 1.0);
  for (double x : v.data) EXPECT_EQ(x, 0.5);
  EXPECT_THROW(gain_perturb(v, -0.1, rng), ConfigError);
}

TEST(Benchmark, VoxelCounts) {
  const auto scheme = synthetic_scheme({1000, 2000}, 10, 1, 1);
  PhantomSpec spec;
  spec.angles = PhantomSpec::default_angles();
  spec.voxels_per_angle = 200;
  auto bm = build_benchmark(spec, scheme);
  EXPECT_EQ(bm.truth.voxels.size(), 3400u);
  EXPECT_EQ(bm.volume.dims.voxels(), 3400u);
  spec.angles = {30, 45, 60, 90};
  spec.include_single_fiber = false;
  EXPECT_EQ(build_benchmark(spec, scheme).truth.voxels.size(), 800u);
}

TEST(Benchmark, CrossingAnglesAndFractionsAreExact) {
  const auto scheme = synthetic_scheme({1000, 2000}, 10, 1, 1);
  PhantomSpec spec;
  spec.angles = {15, 40, 90};
  spec.voxels_per_angle = 50;
  const auto bm = build_benchmark(spec, scheme);
  std::size_t singles = 0;
  for (const auto& tv : bm.truth.voxels) {
    if (!tv.angle) {
      ++singles;
      EXPECT_EQ(tv.directions.size(), 1u);
      continue;
    }
    ASSERT_EQ(tv.directions.size(), 2u);
    EXPECT_NEAR(axis_angle_deg(tv.directions[0], tv.directions[1]), *tv.angle, 1e-6);
    EXPECT_NEAR(norm(tv.directions[1]), 1.0, 1e-12);
    EXPECT_EQ(tv.fractions, (std::vector<double>{0.5, 0.5}));
  }
  EXPECT_EQ(singles, 50u);
  EXPECT_NEAR(bm.truth.sigma, 1.0 / 30, 1e-15);
}

TEST(Benchmark, DeterministicAndNonNegative) {
  const auto scheme = synthetic_scheme({1000, 2000}, 10, 1, 1);
  PhantomSpec spec;
  spec.angles = {45};
  spec.voxels_per_angle = 30;
  spec.sigma_g = 0.2;
  const auto a = build_benchmark(spec, scheme), b = build_benchmark(spec, scheme);
  EXPECT_EQ(a.volume.data, b.volume.data);
  ASSERT_TRUE(a.truth.gains.has_value());
  EXPECT_EQ(*a.truth.gains, *b.truth.gains);
  for (double x : a.volume.data) EXPECT_GE(x, 0.0);
  spec.seed = 2;
  EXPECT_NE(build_benchmark(spec, scheme).volume.data, a.volume.data);
}

TEST(Benchmark, GainsAreSharedAcrossVoxels) {
  const auto scheme = synthetic_scheme({1000}, 10, 1, 1);
  PhantomSpec spec;
  spec.angles = {60};
  spec.voxels_per_angle = 5;
  spec.snr = std::numeric_limits<double>::infinity();
  const auto clean = build_benchmark(spec, scheme);
  spec.sigma_g = 0.3;
  const auto gained = build_benchmark(spec, scheme);
  const auto& g = *gained.truth.gains;
  for (std::size_t v = 0; v < clean.volume.dims.voxels(); ++v)
    for (std::size_t n = 0; n < scheme.size(); ++n)
      EXPECT_NEAR(gained.volume.voxel(v)[n], g[n] * clean.volume.voxel(v)[n], 1e-15);
}

TEST(MultiTensor, RotationEquivariance) {
  // rotating both the fibers and the gradient table leaves the signal unchanged
  const auto scheme = synthetic_scheme({1000, 3000}, 12, 1, 9);
  const double c = std::cos(0.7), s = std::sin(0.7);
  const auto rot = [&](const Vec3& v) { return Vec3{c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]}; };
  std::vector<Vec3> dirs{normalized(Vec3{1, 0.2, 0.3}), normalized(Vec3{-0.1, 1, 0.4})};
  std::vector<Vec3> rdirs{rot(dirs[0]), rot(dirs[1])};
  std::vector<double> b;
  std::vector<Vec3> g;
  for (std::size_t n = 0; n < scheme.size(); ++n) {
    b.push_back(scheme.b(n));
    g.push_back(rot(scheme.direction(n)));
  }
  const AcquisitionScheme rotated(b, g);
  const std::vector<double> f{0.4, 0.6};
  const std::array<double, 3> ev{1.7, 0.3, 0.3};
  const auto x = multi_tensor_signal(dirs, f, ev, scheme), y = multi_tensor_signal(rdirs, f, ev, rotated);
  for (std::size_t n = 0; n < scheme.size(); ++n) EXPECT_NEAR(x[n], y[n], 1e-14);
}
