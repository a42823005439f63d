#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "acquisition.hpp"
#include "error.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "nifti.hpp"
#include "optimizer.hpp"
#include "phantom.hpp"
#include "volume.hpp"

namespace fixelfit {

using json = nlohmann::json;

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline AcquisitionScheme read_scheme(const std::filesystem::path& bval, const std::filesystem::path& bvec) {
  return load_scheme(read_text(bval), read_text(bvec));
}

inline void write_scheme(const AcquisitionScheme& scheme, const std::filesystem::path& bval,
                         const std::filesystem::path& bvec) {
  write_text(bval, format_bval(scheme));
  write_text(bvec, format_bvec(scheme));
}

// 4D NIfTI layout: x fastest, one volume per measurement.
inline Volume to_volume(const SignalVolume& sv) {
  Volume vol({sv.dims.nx, sv.dims.ny, sv.dims.nz, static_cast<int>(sv.n_meas)});
  const std::size_t nvox = sv.dims.voxels();
  for (std::size_t v = 0; v < nvox; ++v)
    for (std::size_t n = 0; n < sv.n_meas; ++n)
      vol.at(v, static_cast<int>(n)) = static_cast<float>(sv.data[v * sv.n_meas + n]);
  return vol;
}

inline SignalVolume from_volume(const Volume& vol, const Volume* mask = nullptr) {
  vol.validate();
  SignalVolume sv({vol.dims[0], vol.dims[1], vol.dims[2]}, static_cast<std::size_t>(vol.dims[3]));
  const std::size_t nvox = sv.dims.voxels();
  if (mask) {
    if (mask->dims[0] != vol.dims[0] || mask->dims[1] != vol.dims[1] || mask->dims[2] != vol.dims[2])
      throw DataError("mask grid does not match the signal volume");
    for (std::size_t v = 0; v < nvox; ++v) sv.mask[v] = mask->data[v] > 0.5f;
  }
  for (std::size_t v = 0; v < nvox; ++v)
    for (std::size_t n = 0; n < sv.n_meas; ++n)
      sv.data[v * sv.n_meas + n] = vol.at(v, static_cast<int>(n));
  return sv;
}

inline Volume mask_volume(const SignalVolume& sv) {
  Volume vol({sv.dims.nx, sv.dims.ny, sv.dims.nz, 1});
  for (std::size_t v = 0; v < sv.mask.size(); ++v) vol.data[v] = sv.mask[v] ? 1.0f : 0.0f;
  return vol;
}

// ---------------------------------------------------------------- parameter maps

// Constrained fields on the full grid (unfitted voxels are zero, mask 0).
struct ParamMaps {
  int k = 0;
  Volume mask, s0, f_intra, fractions, bias;
  std::vector<Volume> directions;  // one 3-channel volume per fiber
  CalibrationParams cal;
  LossMode mode = LossMode::kMse;

  GridDims dims() const { return {s0.dims[0], s0.dims[1], s0.dims[2]}; }

  // Grid-indexed tissue; voxel v of the result is grid voxel v.
  ConstrainedTissue tissue() const {
    const std::size_t nvox = dims().voxels(), ch = fraction_channels(k), uk = static_cast<std::size_t>(k);
    ConstrainedTissue t;
    t.k = k;
    t.voxels = nvox;
    t.s0.assign(s0.data.begin(), s0.data.end());
    t.f_intra.assign(f_intra.data.begin(), f_intra.data.end());
    t.fractions.resize(nvox * ch);
    t.directions.resize(nvox * uk);
    t.dir_norm.assign(nvox * uk, 1.0);
    for (std::size_t v = 0; v < nvox; ++v) {
      for (std::size_t c = 0; c < ch; ++c) t.fractions[v * ch + c] = fractions.at(v, static_cast<int>(c));
      for (std::size_t j = 0; j < uk; ++j)
        for (int a = 0; a < 3; ++a)
          t.directions[v * uk + j][static_cast<std::size_t>(a)] = directions[j].at(v, a);
    }
    return t;
  }
};

inline ParamMaps make_param_maps(const VolumeFit& fit, LossMode mode) {
  const GridDims g = fit.data.full_dims;
  const auto& t = fit.tissue;
  const std::size_t ch = fraction_channels(t.k), uk = static_cast<std::size_t>(t.k);
  ParamMaps m;
  m.k = t.k;
  m.mode = mode;
  m.cal = fit.cal;
  m.mask = Volume({g.nx, g.ny, g.nz, 1});
  m.s0 = Volume({g.nx, g.ny, g.nz, 1});
  m.f_intra = Volume({g.nx, g.ny, g.nz, 1});
  m.fractions = Volume({g.nx, g.ny, g.nz, static_cast<int>(ch)});
  for (int j = 0; j < t.k; ++j) m.directions.emplace_back(std::array<int, 4>{g.nx, g.ny, g.nz, 3});
  for (std::size_t gi = 0; gi < g.voxels(); ++gi) {
    const int cv = fit.data.grid_to_voxel[gi];
    if (cv < 0) continue;
    const auto v = static_cast<std::size_t>(cv);
    m.mask.data[gi] = 1.0f;
    m.s0.data[gi] = static_cast<float>(t.s0[v]);
    m.f_intra.data[gi] = static_cast<float>(t.f_intra[v]);
    for (std::size_t c = 0; c < ch; ++c)
      m.fractions.at(gi, static_cast<int>(c)) = static_cast<float>(t.fractions[v * ch + c]);
    for (std::size_t j = 0; j < uk; ++j)
      for (int a = 0; a < 3; ++a)
        m.directions[j].at(gi, a) = static_cast<float>(t.directions[v * uk + j][static_cast<std::size_t>(a)]);
  }
  m.bias = Volume({g.nx, g.ny, g.nz, 1});
  const auto field = upsample_bias(fit.cal.bias_grid, g);
  for (std::size_t i = 0; i < field.size(); ++i) m.bias.data[i] = static_cast<float>(field[i]);
  return m;
}

inline json calibration_json(const CalibrationParams& cal, LossMode mode) {
  json j;
  j["alpha"] = cal.alpha;
  j["beta"] = cal.beta;
  j["bias_grid"] = cal.bias_grid;
  j["bias_grid_size"] = kBiasGridSize;
  j["sigma_log"] = cal.sigma_log;
  j["sigma"] = cal.sigma();
  j["mode"] = to_string(mode);
  return j;
}

inline std::string direction_file(int fiber) { return "fiber" + std::to_string(fiber + 1) + "_dir.nii"; }

inline void write_param_maps(const ParamMaps& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_nifti(m.mask, dir / "mask.nii");
  write_nifti(m.fractions, dir / "fractions.nii");
  write_nifti(m.s0, dir / "s0.nii");
  write_nifti(m.f_intra, dir / "f_intra.nii");
  for (int j = 0; j < m.k; ++j) write_nifti(m.directions[static_cast<std::size_t>(j)], dir / direction_file(j));
  write_nifti(m.bias, dir / "bias_field.nii");
  write_json(dir / "calibration.json", calibration_json(m.cal, m.mode));
}

inline ParamMaps read_param_maps(const std::filesystem::path& dir) {
  ParamMaps m;
  m.mask = read_nifti(dir / "mask.nii");
  m.fractions = read_nifti(dir / "fractions.nii");
  m.s0 = read_nifti(dir / "s0.nii");
  m.f_intra = read_nifti(dir / "f_intra.nii");
  m.bias = read_nifti(dir / "bias_field.nii");
  m.k = m.fractions.dims[3] - 3;
  if (m.k < 1) throw DataError(dir.string() + ": fractions volume needs at least 4 channels");
  for (int j = 0; j < m.k; ++j) {
    m.directions.push_back(read_nifti(dir / direction_file(j)));
    if (m.directions.back().dims[3] != 3) throw DataError(direction_file(j) + " must have 3 channels");
  }
  for (const Volume* v : {&m.fractions, &m.s0, &m.f_intra, &m.bias, &m.directions.front()})
    for (int a = 0; a < 3; ++a)
      if (v->dims[static_cast<std::size_t>(a)] != m.mask.dims[static_cast<std::size_t>(a)])
        throw DataError(dir.string() + ": parameter maps have inconsistent grids");
  const json c = read_json(dir / "calibration.json");
  try {
    m.cal.alpha = c.at("alpha").get<std::vector<double>>();
    m.cal.beta = c.at("beta").get<std::vector<double>>();
    m.cal.bias_grid = c.at("bias_grid").get<std::vector<double>>();
    m.cal.sigma_log = c.at("sigma_log").get<double>();
    m.mode = parse_loss_mode(c.at("mode").get<std::string>());
  } catch (const json::exception& e) {
    throw DataError("calibration.json: " + std::string(e.what()));
  }
  return m;
}

// ---------------------------------------------------------------- ground truth sidecar

inline json truth_json(const GroundTruth& gt) {
  json j;
  j["dims"] = {gt.dims.nx, gt.dims.ny, gt.dims.nz};
  j["sigma"] = gt.sigma;
  j["snr"] = std::isinf(gt.snr) ? json(nullptr) : json(gt.snr);
  j["seed"] = gt.seed;
  j["angles"] = gt.angles;
  j["gains"] = gt.gains ? json(*gt.gains) : json(nullptr);
  json voxels = json::array();
  for (const auto& tv : gt.voxels) {
    json dirs = json::array();
    for (const auto& d : tv.directions) dirs.push_back({d[0], d[1], d[2]});
    voxels.push_back({{"index", tv.index},
                      {"angle", tv.angle ? json(*tv.angle) : json(nullptr)},
                      {"directions", dirs},
                      {"fractions", tv.fractions}});
  }
  j["voxels"] = std::move(voxels);
  return j;
}

inline GroundTruth truth_from_json(const json& j) {
  GroundTruth gt;
  try {
    const auto d = j.at("dims").get<std::vector<int>>();
    if (d.size() != 3) throw DataError("ground truth: dims must have 3 entries");
    gt.dims = {d[0], d[1], d[2]};
    gt.sigma = j.at("sigma").get<double>();
    gt.snr = j.at("snr").is_null() ? std::numeric_limits<double>::infinity() : j.at("snr").get<double>();
    gt.seed = j.at("seed").get<std::uint64_t>();
    gt.angles = j.at("angles").get<std::vector<double>>();
    if (j.contains("gains") && !j.at("gains").is_null()) gt.gains = j.at("gains").get<std::vector<double>>();
    for (const auto& jv : j.at("voxels")) {
      TruthVoxel tv;
      tv.index = jv.at("index").get<std::size_t>();
      if (tv.index >= gt.dims.voxels()) throw DataError("ground truth: voxel index outside the grid");
      if (!jv.at("angle").is_null()) tv.angle = jv.at("angle").get<double>();
      for (const auto& dv : jv.at("directions")) {
        const auto a = dv.get<std::vector<double>>();
        if (a.size() != 3) throw DataError("ground truth: directions must have 3 components");
        tv.directions.push_back({a[0], a[1], a[2]});
      }
      tv.fractions = jv.at("fractions").get<std::vector<double>>();
      gt.voxels.push_back(std::move(tv));
    }
  } catch (const json::exception& e) {
    throw DataError("ground truth: " + std::string(e.what()));
  }
  return gt;
}

inline GroundTruth read_truth(const std::filesystem::path& path) { return truth_from_json(read_json(path)); }

// ---------------------------------------------------------------- reports

inline json breakdown_json(const ObjectiveBreakdown& b) {
  return {{"total", b.total()},         {"data", b.data},         {"spatial", b.spatial},
          {"repulsion", b.repulsion},   {"sparsity", b.sparsity}, {"orphan", b.orphan},
          {"continuity", b.continuity}, {"ordering", b.ordering}, {"calibration", b.calibration}};
}

inline std::string angle_label(const std::optional<double>& a) {
  if (!a) return "single";
  std::ostringstream s;
  s << *a;
  return s.str();
}

inline json report_json(const EvalReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"angle", row.angle ? json(*row.angle) : json("single")},
                    {"voxels", row.voxels},
                    {"missed", row.missed},
                    {"best_match_error_deg", row.mean_error},
                    {"precision", row.counts.precision()},
                    {"recall", row.counts.recall()},
                    {"f1", row.counts.f1()}});
  json j;
  j["f_detect"] = r.options.f_detect;
  j["angle_tol_deg"] = r.options.angle_tol;
  j["rows"] = std::move(rows);
  j["overall_error_deg"] = r.overall_error;
  j["wide_angle_error_deg"] = r.wide_error;
  j["precision"] = r.counts.precision();
  j["recall"] = r.counts.recall();
  j["f1"] = r.counts.f1();
  j["missed"] = r.missed;
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  j["sigma_fit"] = opt(r.sigma_fit);
  j["sigma_true"] = opt(r.sigma_true);
  j["sigma_rel_error"] = opt(r.sigma_rel_error);
  j["reconstruction_mse"] = opt(r.reconstruction_mse);
  return j;
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream s;
  s.precision(10);
  s << "angle,voxels,missed,best_match_error_deg,precision,recall,f1,f_detect,angle_tol_deg\n";
  const auto line = [&](const std::string& label, std::size_t n, std::size_t missed, double err,
                        const DetectionCounts& c) {
    s << label << ',' << n << ',' << missed << ',' << err << ',' << c.precision() << ',' << c.recall() << ','
      << c.f1() << ',' << r.options.f_detect << ',' << r.options.angle_tol << '\n';
  };
  std::size_t total = 0;
  for (const auto& row : r.rows) {
    line(angle_label(row.angle), row.voxels, row.missed, row.mean_error, row.counts);
    total += row.voxels;
  }
  line("overall", total, r.missed, r.overall_error, r.counts);
  return s.str();
}

}  // namespace fixelfit
