#pragma once

#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "metrics.hpp"
#include "optimizer.hpp"
#include "parallel.hpp"
#include "phantom.hpp"

namespace fixelfit {

// Acquisition used when a dataset is simulated.
struct SchemeSpec {
  std::vector<double> shells{1000, 2000, 3000};
  std::size_t dirs_per_shell = 64;
  std::size_t n_b0 = 1;
  std::uint64_t seed = 1;

  void validate() const {
    require(!shells.empty(), "scheme: need at least one shell");
    for (double b : shells) require(b > 0, "scheme: shell b-values must be positive");
    require(dirs_per_shell >= 6, "scheme: dirs_per_shell must be >= 6");
  }
};

struct BenchmarkSpec {
  std::size_t voxels_per_angle = 50;
  std::size_t full_voxels_per_angle = 200;
  bool full = false;
  // Crossing runs use direction repulsion only and no calibration.
  bool repulsion_only = true;
  bool crossing_calibration = false;
  std::vector<double> sigma_g{0.2};
  std::vector<double> sweep_angles{30, 45, 60, 90};
  bool optimizers = false;
  std::size_t optimizer_voxels = 2000;
  int optimizer_k = 3;
  int optimizer_iterations = 200;

  std::size_t effective_voxels() const { return full ? full_voxels_per_angle : voxels_per_angle; }

  void validate() const {
    require(voxels_per_angle >= 1 && full_voxels_per_angle >= 1, "benchmark: voxel counts must be >= 1");
    for (double s : sigma_g) require(s >= 0, "benchmark: sigma_g values must be >= 0");
    for (double a : sweep_angles) require(a > 0 && a <= 90, "benchmark: sweep angles must lie in (0, 90]");
    require(optimizer_voxels >= 1 && optimizer_k >= 1 && optimizer_iterations >= 1,
            "benchmark: optimizer comparison sizes must be >= 1");
  }
};

struct Paths {
  std::string dwi, bval, bvec, mask, truth, fit_dir;
};

struct RunConfig {
  FitConfig fit;
  PhantomSpec phantom{PhantomSpec::default_angles()};
  SchemeSpec scheme;
  MetricOptions metrics;
  BenchmarkSpec benchmark;
  Paths paths;
  int threads = default_threads();

  RunConfig() { fit.threads = threads; }

  void validate() const {
    require(threads >= 1, "threads must be >= 1");
    fit.validate();
    phantom.validate();
    scheme.validate();
    benchmark.validate();
    require(metrics.f_detect > 0 && metrics.f_detect < 1, "metrics: f_detect must lie in (0, 1)");
    require(metrics.angle_tol > 0 && metrics.angle_tol <= 90, "metrics: angle_tol must lie in (0, 90]");
  }
};

namespace detail {

using json = nlohmann::json;

// Reads known keys of one JSON object and rejects everything else.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      if constexpr (std::is_same_v<T, double>) {
        const auto& v = j_.at(key);
        // Infinity (noiseless data) is spelled as a string.
        if (v.is_string() && v.get<std::string>() == "inf")
          out = std::numeric_limits<double>::infinity();
        else if (!v.is_number())
          throw ConfigError(where_ + "." + key + ": expected a number");
        else
          out = v.get<double>();
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        const auto& v = j_.at(key);
        if (!v.is_number_integer()) throw ConfigError(where_ + "." + key + ": expected an integer");
        if (std::is_unsigned_v<T> && v.get<long long>() < 0)
          throw ConfigError(where_ + "." + key + ": expected a non-negative integer");
        out = v.get<T>();
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!j_.at(key).is_boolean()) throw ConfigError(where_ + "." + key + ": expected true or false");
        out = j_.at(key).get<bool>();
      } else {
        out = j_.at(key).get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class Fn>
  void section(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    StrictObject sub(j_.at(key), where_ + "." + key);
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline json number_or_inf(double v) { return std::isinf(v) ? json("inf") : json(v); }

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::StrictObject;
  RunConfig c;
  StrictObject root(j, "config");
  root.read("threads", c.threads);
  root.section("fit", [&](StrictObject& o) {
    auto& f = c.fit;
    std::string mode = to_string(f.mode), optimizer = f.optimizer == OptimizerKind::kAdam ? "adam" : "rprop";
    o.read("k", f.k);
    o.read("mode", mode);
    o.read("iterations", f.iterations);
    o.read("slab_size", f.slab_size);
    o.read("slab_overlap", f.slab_overlap);
    o.read("seed", f.seed);
    o.read("calibration", f.calibration_enabled);
    o.read("optimizer", optimizer);
    o.section("init", [&](StrictObject& i) {
      i.read("s0", f.init.s0);
      i.read("sigma", f.init.sigma);
    });
    o.section("rprop", [&](StrictObject& r) {
      std::string variant = f.rprop.variant == RpropVariant::kIRpropMinus ? "irprop-" : "rprop-";
      r.read("eta_plus", f.rprop.eta_plus);
      r.read("eta_minus", f.rprop.eta_minus);
      r.read("step_init", f.rprop.step_init);
      r.read("step_min", f.rprop.step_min);
      r.read("step_max", f.rprop.step_max);
      r.read("variant", variant);
      if (variant == "rprop-") f.rprop.variant = RpropVariant::kRpropMinus;
      else if (variant == "irprop-") f.rprop.variant = RpropVariant::kIRpropMinus;
      else throw ConfigError("config.fit.rprop.variant: expected 'rprop-' or 'irprop-'");
    });
    o.section("adam", [&](StrictObject& a) {
      a.read("lr", f.adam.lr);
      a.read("beta1", f.adam.beta1);
      a.read("beta2", f.adam.beta2);
      a.read("eps", f.adam.eps);
    });
    f.mode = parse_loss_mode(mode);
    if (optimizer == "rprop") f.optimizer = OptimizerKind::kRprop;
    else if (optimizer == "adam") f.optimizer = OptimizerKind::kAdam;
    else throw ConfigError("config.fit.optimizer: expected 'rprop' or 'adam'");
  });
  root.section("weights", [&](StrictObject& o) {
    auto& w = c.fit.weights;
    o.read("lambda_sp", w.lambda_sp);
    o.read("lambda_rep", w.lambda_rep);
    o.read("lambda_sparse", w.lambda_sparse);
    o.read("tau", w.tau);
    o.read("lambda_orphan", w.lambda_orphan);
    o.read("lambda_cont", w.lambda_cont);
    o.read("lambda_order", w.lambda_order);
    o.read("huber_delta", w.huber_delta);
    o.read("neighborhood", w.neighborhood);
    o.read("lambda_alpha", w.lambda_alpha);
    o.read("lambda_beta", w.lambda_beta);
    o.read("lambda_bias_l2", w.lambda_bias_l2);
    o.read("lambda_bias_tv", w.lambda_bias_tv);
    o.read("orphan_s_low", w.orphan_s_low);
    o.read("orphan_width", w.orphan_width);
  });
  root.section("constants", [&](StrictObject& o) {
    auto& m = c.fit.constants;
    o.read("d_csf", m.d_csf);
    o.read("d_gm", m.d_gm);
    o.read("d_res", m.d_res);
    o.read("d_par", m.d_par);
    o.read("d_perp", m.d_perp);
  });
  root.section("phantom", [&](StrictObject& o) {
    auto& p = c.phantom;
    std::vector<double> eig(p.eigenvalues.begin(), p.eigenvalues.end());
    o.read("angles", p.angles);
    o.read("voxels_per_angle", p.voxels_per_angle);
    o.read("include_single_fiber", p.include_single_fiber);
    o.read("snr", p.snr);
    o.read("eigenvalues", eig);
    o.read("fractions", p.fractions);
    o.read("sigma_g", p.sigma_g);
    o.read("seed", p.seed);
    if (eig.size() != 3) throw ConfigError("config.phantom.eigenvalues: expected 3 values");
    std::copy(eig.begin(), eig.end(), p.eigenvalues.begin());
  });
  root.section("scheme", [&](StrictObject& o) {
    o.read("shells", c.scheme.shells);
    o.read("dirs_per_shell", c.scheme.dirs_per_shell);
    o.read("n_b0", c.scheme.n_b0);
    o.read("seed", c.scheme.seed);
  });
  root.section("metrics", [&](StrictObject& o) {
    o.read("f_detect", c.metrics.f_detect);
    o.read("angle_tol", c.metrics.angle_tol);
  });
  root.section("benchmark", [&](StrictObject& o) {
    auto& b = c.benchmark;
    o.read("voxels_per_angle", b.voxels_per_angle);
    o.read("full_voxels_per_angle", b.full_voxels_per_angle);
    o.read("full", b.full);
    o.read("repulsion_only", b.repulsion_only);
    o.read("crossing_calibration", b.crossing_calibration);
    o.read("sigma_g", b.sigma_g);
    o.read("sweep_angles", b.sweep_angles);
    o.read("optimizers", b.optimizers);
    o.read("optimizer_voxels", b.optimizer_voxels);
    o.read("optimizer_k", b.optimizer_k);
    o.read("optimizer_iterations", b.optimizer_iterations);
  });
  root.section("paths", [&](StrictObject& o) {
    o.read("dwi", c.paths.dwi);
    o.read("bval", c.paths.bval);
    o.read("bvec", c.paths.bvec);
    o.read("mask", c.paths.mask);
    o.read("truth", c.paths.truth);
    o.read("fit_dir", c.paths.fit_dir);
  });
  root.finish();
  c.fit.threads = c.threads;
  return c;
}

// Every effective setting; config_from_json(config_to_json(c)) reproduces c.
inline nlohmann::json config_to_json(const RunConfig& c) {
  using nlohmann::json;
  using detail::number_or_inf;
  const auto& f = c.fit;
  const auto& w = f.weights;
  const auto& m = f.constants;
  const auto& p = c.phantom;
  const auto& b = c.benchmark;
  json j;
  j["threads"] = c.threads;
  j["fit"] = {{"k", f.k},
              {"mode", to_string(f.mode)},
              {"iterations", f.iterations},
              {"slab_size", f.slab_size},
              {"slab_overlap", f.slab_overlap},
              {"seed", f.seed},
              {"calibration", f.calibration_enabled},
              {"optimizer", f.optimizer == OptimizerKind::kAdam ? "adam" : "rprop"},
              {"init", {{"s0", f.init.s0}, {"sigma", f.init.sigma}}},
              {"rprop",
               {{"eta_plus", f.rprop.eta_plus},
                {"eta_minus", f.rprop.eta_minus},
                {"step_init", f.rprop.step_init},
                {"step_min", f.rprop.step_min},
                {"step_max", f.rprop.step_max},
                {"variant", f.rprop.variant == RpropVariant::kIRpropMinus ? "irprop-" : "rprop-"}}},
              {"adam", {{"lr", f.adam.lr}, {"beta1", f.adam.beta1}, {"beta2", f.adam.beta2}, {"eps", f.adam.eps}}}};
  j["weights"] = {{"lambda_sp", w.lambda_sp},         {"lambda_rep", w.lambda_rep},
                  {"lambda_sparse", w.lambda_sparse}, {"tau", w.tau},
                  {"lambda_orphan", w.lambda_orphan}, {"lambda_cont", w.lambda_cont},
                  {"lambda_order", w.lambda_order},   {"huber_delta", w.huber_delta},
                  {"neighborhood", w.neighborhood},   {"lambda_alpha", w.lambda_alpha},
                  {"lambda_beta", w.lambda_beta},     {"lambda_bias_l2", w.lambda_bias_l2},
                  {"lambda_bias_tv", w.lambda_bias_tv}, {"orphan_s_low", w.orphan_s_low},
                  {"orphan_width", w.orphan_width}};
  j["constants"] = {{"d_csf", m.d_csf}, {"d_gm", m.d_gm}, {"d_res", m.d_res}, {"d_par", m.d_par}, {"d_perp", m.d_perp}};
  j["phantom"] = {{"angles", p.angles},
                  {"voxels_per_angle", p.voxels_per_angle},
                  {"include_single_fiber", p.include_single_fiber},
                  {"snr", number_or_inf(p.snr)},
                  {"eigenvalues", p.eigenvalues},
                  {"fractions", p.fractions},
                  {"sigma_g", p.sigma_g},
                  {"seed", p.seed}};
  j["scheme"] = {{"shells", c.scheme.shells},
                 {"dirs_per_shell", c.scheme.dirs_per_shell},
                 {"n_b0", c.scheme.n_b0},
                 {"seed", c.scheme.seed}};
  j["metrics"] = {{"f_detect", c.metrics.f_detect}, {"angle_tol", c.metrics.angle_tol}};
  j["benchmark"] = {{"voxels_per_angle", b.voxels_per_angle},
                    {"full_voxels_per_angle", b.full_voxels_per_angle},
                    {"full", b.full},
                    {"repulsion_only", b.repulsion_only},
                    {"crossing_calibration", b.crossing_calibration},
                    {"sigma_g", b.sigma_g},
                    {"sweep_angles", b.sweep_angles},
                    {"optimizers", b.optimizers},
                    {"optimizer_voxels", b.optimizer_voxels},
                    {"optimizer_k", b.optimizer_k},
                    {"optimizer_iterations", b.optimizer_iterations}};
  j["paths"] = {{"dwi", c.paths.dwi},   {"bval", c.paths.bval},   {"bvec", c.paths.bvec},
                {"mask", c.paths.mask}, {"truth", c.paths.truth}, {"fit_dir", c.paths.fit_dir}};
  return j;
}

}  // namespace fixelfit
