#pragma once

// Synthetic overhead scenes and portable raster I/O.
//
// Scene drawing procedure (deterministic per seed, RNG = mt19937_64(seed),
// all integer draws via uniform_int_distribution<int>, evaluated in exactly
// this order):
//   1. label raster starts as class 0 everywhere.
//   2. shape classes cycle 1..C-1 in draw order (class 0 if C < 2).
//   3. buildings: count ~ U[2,5]; each draws w ~ U[8, max(8, W/3)],
//      h ~ U[8, max(8, H/3)], x ~ U[0, W-w], y ~ U[0, H-h], then fills.
//   4. roads: count ~ U[1,2]; each draws thickness t ~ U[3,6],
//      y ~ U[0, H-t], and fills rows y..y+t-1 across the full width.
//   5. vehicles: count ~ U[3,8]; each draws h ~ U[2,3], w ~ U[3,5],
//      y ~ U[0, H-h], x ~ U[0, W-w], then fills.
//   Later shapes overwrite earlier labels.
//   6. image channel values: palette[label % 8][c] + 0.05 * z, z from one
//      normal_distribution<double>(0,1) instance consumed in row-major
//      (y, x, c) order, clamped to [0, 1].

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pbseg/tensor.hpp"

namespace pbseg {

struct IndexArray {
  std::size_t rows = 0, cols = 0;
  std::vector<std::int64_t> v;

  IndexArray() = default;
  IndexArray(std::size_t r, std::size_t c, std::int64_t fill = 0) : rows(r), cols(c), v(r * c, fill) {}
  std::int64_t& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  std::int64_t at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  std::size_t size() const { return v.size(); }
  bool operator==(const IndexArray& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
};

struct SceneSample {
  Tensor image;      // 3 x H x W, values in [0, 1]
  IndexArray labels; // H x W, values in [0, C)
  std::uint64_t seed = 0;
};

// test hook: a count >= 0 overrides the sampled count for that shape kind
// (the per-shape RNG draws are still consumed identically for drawn shapes)
struct SceneShapeCounts {
  int buildings = -1;
  int roads = -1;
  int vehicles = -1;
};

SceneSample generate_scene(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t classes,
                           const SceneShapeCounts& hook = {});

// fixed 8-color palette; class c uses palette[c % 8]
const std::array<std::array<double, 3>, 8>& class_palette();

// binary PGM (P5, maxval 255), one byte per pixel = class index
void write_pgm(const IndexArray& raster, const std::string& path);
IndexArray read_pgm(const std::string& path);

// binary PPM (P6) of an image in [0,1]
void write_ppm(const Tensor& image, const std::string& path);
// palette-colored PPM of a label raster
void write_label_ppm(const IndexArray& raster, const std::string& path);

}  // namespace pbseg
