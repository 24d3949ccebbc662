#include "pbseg/data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <stdexcept>

namespace pbseg {

const std::array<std::array<double, 3>, 8>& class_palette() {
  static const std::array<std::array<double, 3>, 8> palette = {{
      {0.15, 0.35, 0.15},  // 0: ground
      {0.70, 0.30, 0.25},  // 1
      {0.35, 0.35, 0.40},  // 2
      {0.90, 0.80, 0.20},  // 3
      {0.20, 0.40, 0.80},  // 4
      {0.80, 0.30, 0.80},  // 5
      {0.10, 0.80, 0.80},  // 6
      {0.95, 0.95, 0.95},  // 7
  }};
  return palette;
}

SceneSample generate_scene(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t classes,
                           const SceneShapeCounts& hook) {
  if (classes < 2) throw std::invalid_argument("generate_scene: need at least 2 classes");
  if (height < 8 || width < 8) throw std::invalid_argument("generate_scene: degenerate size, need at least 8 x 8");

  std::mt19937_64 rng(seed);
  auto draw_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  SceneSample sample;
  sample.seed = seed;
  sample.labels = IndexArray(height, width, 0);

  std::size_t class_cursor = 0;
  auto next_class = [&]() -> std::int64_t {
    if (classes < 2) return 0;
    return 1 + static_cast<std::int64_t>(class_cursor++ % (classes - 1));
  };
  auto fill_rect = [&](std::size_t y0, std::size_t x0, std::size_t h, std::size_t w, std::int64_t cls) {
    for (std::size_t y = y0; y < y0 + h; ++y)
      for (std::size_t x = x0; x < x0 + w; ++x) sample.labels.at(y, x) = cls;
  };

  const int n_buildings = hook.buildings >= 0 ? hook.buildings : draw_int(2, 5);
  for (int i = 0; i < n_buildings; ++i) {
    const int w = draw_int(8, std::max<int>(8, static_cast<int>(width) / 3));
    const int h = draw_int(8, std::max<int>(8, static_cast<int>(height) / 3));
    const int x = draw_int(0, static_cast<int>(width) - w);
    const int y = draw_int(0, static_cast<int>(height) - h);
    fill_rect(y, x, h, w, next_class());
  }
  const int n_roads = hook.roads >= 0 ? hook.roads : draw_int(1, 2);
  for (int i = 0; i < n_roads; ++i) {
    const int t = draw_int(3, 6);
    const int y = draw_int(0, static_cast<int>(height) - t);
    fill_rect(y, 0, t, width, next_class());
  }
  const int n_vehicles = hook.vehicles >= 0 ? hook.vehicles : draw_int(3, 8);
  for (int i = 0; i < n_vehicles; ++i) {
    const int h = draw_int(2, 3);
    const int w = draw_int(3, 5);
    const int y = draw_int(0, static_cast<int>(height) - h);
    const int x = draw_int(0, static_cast<int>(width) - w);
    fill_rect(y, x, h, w, next_class());
  }

  sample.image = Tensor(Shape{3, height, width});
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto& palette = class_palette();
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const auto& base = palette[static_cast<std::size_t>(sample.labels.at(y, x)) % 8];
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = base[c] + 0.05 * noise(rng);
        sample.image(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return sample;
}

namespace {

[[noreturn]] void parse_error(const std::string& path, std::size_t offset, const std::string& what) {
  throw std::runtime_error(path + ": " + what + " (byte offset " + std::to_string(offset) + ")");
}

// PGM/PPM token scanner: whitespace separated, '#' comments to end of line
class PnmReader {
 public:
  explicit PnmReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error(path + ": cannot open for reading");
  }

  std::size_t offset() { return static_cast<std::size_t>(in_.tellg()); }

  std::string token() {
    skip_space_and_comments();
    std::string tok;
    int c;
    while ((c = in_.peek()) != EOF && !std::isspace(c) && c != '#') {
      tok.push_back(static_cast<char>(in_.get()));
    }
    if (tok.empty()) parse_error(path_, offset(), "unexpected end of header");
    return tok;
  }

  std::size_t number() {
    const std::size_t at = offset();
    const std::string tok = token();
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      parse_error(path_, at, "expected integer, got '" + tok + "'");
    }
  }

  // exactly one whitespace byte separates the header from the payload
  void raster_separator() {
    const int c = in_.get();
    if (c == EOF || !std::isspace(c)) parse_error(path_, offset(), "missing whitespace before raster data");
  }

  void payload(std::vector<unsigned char>& out) {
    const std::size_t at = offset();
    in_.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (static_cast<std::size_t>(in_.gcount()) != out.size()) {
      parse_error(path_, at + static_cast<std::size_t>(std::max<std::streamsize>(in_.gcount(), 0)),
                  "truncated raster payload");
    }
  }

  const std::string& path() const { return path_; }

 private:
  void skip_space_and_comments() {
    int c;
    while ((c = in_.peek()) != EOF) {
      if (std::isspace(c)) {
        in_.get();
      } else if (c == '#') {
        while ((c = in_.get()) != EOF && c != '\n') {
        }
      } else {
        break;
      }
    }
  }

  std::string path_;
  std::ifstream in_;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  return out;
}

}  // namespace

void write_pgm(const IndexArray& raster, const std::string& path) {
  for (std::int64_t v : raster.v) {
    if (v < 0 || v > 255) throw std::invalid_argument(path + ": class value " + std::to_string(v) + " exceeds 8 bits");
  }
  std::ofstream out = open_out(path);
  out << "P5\n" << raster.cols << " " << raster.rows << "\n255\n";
  std::vector<unsigned char> bytes(raster.size());
  for (std::size_t i = 0; i < raster.size(); ++i) bytes[i] = static_cast<unsigned char>(raster.v[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

IndexArray read_pgm(const std::string& path) {
  PnmReader r(path);
  const std::size_t magic_at = r.offset();
  if (r.token() != "P5") parse_error(path, magic_at, "not a binary PGM (expected magic P5)");
  const std::size_t w = r.number();
  const std::size_t h = r.number();
  const std::size_t maxval_at = r.offset();
  const std::size_t maxval = r.number();
  if (maxval != 255) parse_error(path, maxval_at, "unsupported maxval " + std::to_string(maxval) + ", only 8-bit (255)");
  if (w == 0 || h == 0) parse_error(path, magic_at, "degenerate raster dimensions");
  r.raster_separator();
  std::vector<unsigned char> bytes(w * h);
  r.payload(bytes);
  IndexArray raster(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) raster.v[i] = bytes[i];
  return raster;
}

void write_ppm(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || image.extent(0) != 3) {
    throw std::invalid_argument(path + ": image must be 3 x H x W, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.extent(1), w = image.extent(2);
  std::ofstream out = open_out(path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(3 * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image(c, y, x), 0.0, 1.0);
        bytes[(y * w + x) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(path + ": write failed");
}

void write_label_ppm(const IndexArray& raster, const std::string& path) {
  Tensor img(Shape{3, raster.rows, raster.cols});
  const auto& palette = class_palette();
  for (std::size_t y = 0; y < raster.rows; ++y)
    for (std::size_t x = 0; x < raster.cols; ++x) {
      const auto& color = palette[static_cast<std::size_t>(raster.at(y, x)) % 8];
      for (std::size_t c = 0; c < 3; ++c) img(c, y, x) = color[c];
    }
  write_ppm(img, path);
}

}  // namespace pbseg
