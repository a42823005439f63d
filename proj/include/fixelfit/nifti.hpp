#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"

namespace fixelfit {

// Scalar image of up to 4 dimensions, float32, x fastest.
struct Volume {
  std::array<int, 4> dims{1, 1, 1, 1};
  std::array<float, 4> voxel_size{1, 1, 1, 1};
  std::vector<float> data;
  std::optional<std::array<float, 12>> affine;  // sform rows, carried through only

  Volume() = default;
  Volume(std::array<int, 4> d) : dims(d), data(count(d), 0.0f) {}

  static std::size_t count(const std::array<int, 4>& d) {
    std::size_t n = 1;
    for (int v : d) n *= static_cast<std::size_t>(v);
    return n;
  }
  std::size_t spatial() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }
  float& at(std::size_t voxel, int t) { return data[voxel + spatial() * static_cast<std::size_t>(t)]; }
  float at(std::size_t voxel, int t) const { return data[voxel + spatial() * static_cast<std::size_t>(t)]; }

  void validate() const {
    for (int d : dims) require(d >= 1, "volume dimensions must be >= 1");
    require(data.size() == count(dims), "volume data length does not match its dimensions");
  }
};

namespace nifti {

inline constexpr int kHeaderSize = 348;
inline constexpr int kVoxOffset = 352;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;

// Header field offsets (NIfTI-1).
inline constexpr std::size_t kOffDim = 40;
inline constexpr std::size_t kOffDatatype = 70;
inline constexpr std::size_t kOffBitpix = 72;
inline constexpr std::size_t kOffPixdim = 76;
inline constexpr std::size_t kOffVoxOffset = 108;
inline constexpr std::size_t kOffSclSlope = 112;
inline constexpr std::size_t kOffSclInter = 116;
inline constexpr std::size_t kOffXyztUnits = 123;
inline constexpr std::size_t kOffQformCode = 252;
inline constexpr std::size_t kOffSformCode = 254;
inline constexpr std::size_t kOffSrow = 280;
inline constexpr std::size_t kOffMagic = 344;

template <class T>
T byteswap(T v) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
  std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<T>(bytes);
}

class HeaderView {
 public:
  HeaderView(const unsigned char* p, bool swap) : p_(p), swap_(swap) {}
  template <class T>
  T get(std::size_t off) const {
    T v;
    std::memcpy(&v, p_ + off, sizeof(T));
    return swap_ ? byteswap(v) : v;
  }

 private:
  const unsigned char* p_;
  bool swap_;
};

template <class T>
void put_le(std::vector<unsigned char>& buf, std::size_t off, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

}  // namespace nifti

inline Volume parse_nifti(const std::vector<unsigned char>& bytes, const std::string& origin = "nifti") {
  using namespace nifti;
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize))
    throw DataError(origin + ": file shorter than a NIfTI-1 header");

  // dim[0] must lie in [1, 7]; if it does not, the file is byte-swapped.
  std::int16_t dim0;
  std::memcpy(&dim0, bytes.data() + kOffDim, 2);
  bool swap = !(dim0 >= 1 && dim0 <= 7);
  if (swap) {
    dim0 = byteswap(dim0);
    if (!(dim0 >= 1 && dim0 <= 7)) throw DataError(origin + ": invalid dim[0]");
  }
  const HeaderView h(bytes.data(), swap);
  if (h.get<std::int32_t>(0) != kHeaderSize) throw DataError(origin + ": sizeof_hdr is not 348");
  const char* magic = reinterpret_cast<const char*>(bytes.data() + kOffMagic);
  if (std::memcmp(magic, "ni1\0", 4) == 0)
    throw DataError(origin + ": detached-header NIfTI (ni1) is not supported");
  if (std::memcmp(magic, "n+1\0", 4) != 0) throw DataError(origin + ": bad NIfTI-1 magic");

  Volume vol;
  for (int i = 0; i < 4; ++i) {
    const auto d = i < dim0 ? h.get<std::int16_t>(kOffDim + 2 * static_cast<std::size_t>(i + 1)) : std::int16_t{1};
    if (d < 1) throw DataError(origin + ": non-positive dimension");
    vol.dims[static_cast<std::size_t>(i)] = d;
    vol.voxel_size[static_cast<std::size_t>(i)] =
        h.get<float>(kOffPixdim + 4 * static_cast<std::size_t>(i + 1));
  }
  for (int i = 4; i < dim0; ++i)
    if (h.get<std::int16_t>(kOffDim + 2 * static_cast<std::size_t>(i + 1)) != 1)
      throw DataError(origin + ": more than 4 non-singleton dimensions");

  const auto datatype = h.get<std::int16_t>(kOffDatatype);
  std::size_t bytes_per = 0;
  switch (datatype) {
    case kInt16: bytes_per = 2; break;
    case kFloat32: bytes_per = 4; break;
    case kFloat64: bytes_per = 8; break;
    default: throw DataError(origin + ": unsupported datatype " + std::to_string(datatype));
  }
  const auto offset = static_cast<std::size_t>(h.get<float>(kOffVoxOffset));
  const std::size_t n = Volume::count(vol.dims);
  if (offset < static_cast<std::size_t>(kHeaderSize) || bytes.size() < offset + n * bytes_per)
    throw DataError(origin + ": truncated data section");

  float slope = h.get<float>(kOffSclSlope);
  float inter = h.get<float>(kOffSclInter);
  const bool scale = slope != 0 && std::isfinite(slope) && !(slope == 1 && inter == 0);
  if (!std::isfinite(inter)) inter = 0;

  vol.data.resize(n);
  const HeaderView d(bytes.data() + offset, swap);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0;
    switch (datatype) {
      case kInt16: v = d.get<std::int16_t>(2 * i); break;
      case kFloat32: v = d.get<float>(4 * i); break;
      case kFloat64: v = d.get<double>(8 * i); break;
    }
    if (scale) v = v * slope + inter;
    vol.data[i] = static_cast<float>(v);
  }

  if (h.get<std::int16_t>(kOffSformCode) > 0) {
    std::array<float, 12> a;
    for (std::size_t i = 0; i < 12; ++i) a[i] = h.get<float>(kOffSrow + 4 * i);
    vol.affine = a;
  }
  return vol;
}

inline Volume read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (path.extension() == ".gz") throw DataError(path.string() + ": gzip-compressed NIfTI is not supported");
  return parse_nifti(bytes, path.string());
}

// Single-file little-endian float32 NIfTI-1 with a 352-byte prefix.
inline std::vector<unsigned char> serialize_nifti(const Volume& vol) {
  using namespace nifti;
  vol.validate();
  for (int d : vol.dims)
    require(d <= 32767, "volume dimension exceeds the NIfTI-1 int16 limit");
  std::vector<unsigned char> buf(static_cast<std::size_t>(kVoxOffset) + 4 * vol.data.size(), 0);
  put_le<std::int32_t>(buf, 0, kHeaderSize);
  int ndim = 4;
  while (ndim > 1 && vol.dims[static_cast<std::size_t>(ndim - 1)] == 1) --ndim;
  put_le<std::int16_t>(buf, kOffDim, static_cast<std::int16_t>(ndim));
  for (std::size_t i = 0; i < 7; ++i)
    put_le<std::int16_t>(buf, kOffDim + 2 * (i + 1),
                         static_cast<std::int16_t>(i < 4 ? vol.dims[i] : 1));
  put_le<std::int16_t>(buf, kOffDatatype, kFloat32);
  put_le<std::int16_t>(buf, kOffBitpix, 32);
  put_le<float>(buf, kOffPixdim, 1.0f);  // qfac
  for (std::size_t i = 0; i < 4; ++i) put_le<float>(buf, kOffPixdim + 4 * (i + 1), vol.voxel_size[i]);
  put_le<float>(buf, kOffVoxOffset, static_cast<float>(kVoxOffset));
  put_le<float>(buf, kOffSclSlope, 1.0f);
  put_le<float>(buf, kOffSclInter, 0.0f);
  buf[kOffXyztUnits] = 2 | 8;  // mm, seconds
  if (vol.affine) {
    put_le<std::int16_t>(buf, kOffSformCode, 1);
    for (std::size_t i = 0; i < 12; ++i) put_le<float>(buf, kOffSrow + 4 * i, (*vol.affine)[i]);
  } else {
    put_le<std::int16_t>(buf, kOffQformCode, 0);
    put_le<std::int16_t>(buf, kOffSformCode, 0);
  }
  std::memcpy(buf.data() + kOffMagic, "n+1\0", 4);
  for (std::size_t i = 0; i < vol.data.size(); ++i)
    put_le<float>(buf, static_cast<std::size_t>(kVoxOffset) + 4 * i, vol.data[i]);
  return buf;
}

inline void write_nifti(const Volume& vol, const std::filesystem::path& path) {
  const auto buf = serialize_nifti(vol);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace fixelfit
