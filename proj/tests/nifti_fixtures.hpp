#pragma once

#include <cstring>
#include <random>
#include <vector>

#include "fixelfit/nifti.hpp"

namespace fixelfit::fixtures {

inline Volume random_volume(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(1, 6), t(1, 4);
  std::normal_distribution<float> g(0.0f, 100.0f);
  Volume v({d(rng), d(rng), d(rng), t(rng)});
  for (auto& x : v.data) x = g(rng);
  v.voxel_size = {1.25f, 2.0f, 0.5f, 1.0f};
  if (rng() % 2) {
    std::array<float, 12> a{};
    for (auto& x : a) x = g(rng);
    v.affine = a;
  }
  return v;
}

template <class T>
void put_be(std::vector<unsigned char>& b, std::size_t off, T v) {
  unsigned char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) b[off + i] = raw[sizeof(T) - 1 - i];
}

// Big-endian float32 image written field by field, independent of the writer.
inline std::vector<unsigned char> big_endian_nifti(const Volume& v) {
  std::vector<unsigned char> b(352 + 4 * v.data.size(), 0);
  put_be<std::int32_t>(b, 0, 348);
  put_be<std::int16_t>(b, 40, 4);
  for (std::size_t i = 0; i < 7; ++i) put_be<std::int16_t>(b, 42 + 2 * i, static_cast<std::int16_t>(i < 4 ? v.dims[i] : 1));
  put_be<std::int16_t>(b, 70, 16);
  put_be<std::int16_t>(b, 72, 32);
  put_be<float>(b, 76, 1.0f);
  for (std::size_t i = 0; i < 4; ++i) put_be<float>(b, 80 + 4 * i, v.voxel_size[i]);
  put_be<float>(b, 108, 352.0f);
  put_be<float>(b, 112, 1.0f);
  if (v.affine) {
    put_be<std::int16_t>(b, 254, 1);
    for (std::size_t i = 0; i < 12; ++i) put_be<float>(b, 280 + 4 * i, (*v.affine)[i]);
  }
  std::memcpy(b.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) put_be<float>(b, 352 + 4 * i, v.data[i]);
  return b;
}

inline bool identical(const Volume& a, const Volume& b) {
  return a.dims == b.dims && a.voxel_size == b.voxel_size && a.affine == b.affine &&
         a.data.size() == b.data.size() && std::memcmp(a.data.data(), b.data.data(), 4 * a.data.size()) == 0;
}

}  // namespace fixelfit::fixtures
