#pragma once

// Vision front end: FER2013 CSV parsing, binary PGM loading, bilinear
// resizing, affine augmentation, label encoding, and (path,label) manifests.

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "percept/io.hpp"
#include "percept/tensor.hpp"

namespace percept {

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<float> pixels;  // row-major, each in [0, 1]

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h, fill) {
    require(w >= 1 && h >= 1, ErrorKind::Argument, "image dims must be >= 1");
  }

  float& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  float at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

// ---------------------------------------------------------------------------
// FER2013

inline constexpr std::array<std::string_view, 7> kFerEmotions = {"anger", "disgust", "fear", "happy",
                                                                  "sad",   "surprise", "neutral"};
inline constexpr std::size_t kFerSide = 48;

enum class FerUsage { Training, PublicTest, PrivateTest };

inline std::string_view usage_name(FerUsage u) {
  switch (u) {
    case FerUsage::Training: return "Training";
    case FerUsage::PublicTest: return "PublicTest";
    case FerUsage::PrivateTest: return "PrivateTest";
  }
  return "?";
}

struct FerRecord {
  std::size_t emotion = 0;
  GrayImage image;
  FerUsage usage = FerUsage::Training;
};

struct RowDiagnostic {
  std::size_t line = 0;  // 1-based line number in the file
  std::string message;
};

struct FerParseResult {
  std::vector<FerRecord> records;
  std::vector<RowDiagnostic> diagnostics;
};

inline bool is_fer_csv(std::string_view text) {
  auto nl = text.find('\n');
  std::string_view head = text.substr(0, nl);
  if (!head.empty() && head.back() == '\r') head.remove_suffix(1);
  return head == "emotion,pixels,Usage";
}

// Header "emotion,pixels,Usage"; pixels are 2304 space-separated integers
// 0..255 scaled by 1/255. Malformed rows are reported and skipped.
inline FerParseResult parse_fer_csv(std::string_view text) {
  const auto lines = split_lines(text);
  require(!lines.empty() && is_fer_csv(lines[0]), ErrorKind::Format,
          "FER CSV: expected header 'emotion,pixels,Usage'");
  FerParseResult out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    auto bad = [&](std::string msg) { out.diagnostics.push_back({i + 1, std::move(msg)}); };
    const auto fields = split_fields(line);
    if (fields.size() != 3) {
      bad("expected 3 fields, got " + std::to_string(fields.size()));
      continue;
    }
    std::size_t emotion = 0;
    auto [ep, eec] = std::from_chars(fields[0].data(), fields[0].data() + fields[0].size(), emotion);
    if (eec != std::errc() || ep != fields[0].data() + fields[0].size() || emotion >= kFerEmotions.size()) {
      bad("emotion '" + fields[0] + "' not in 0..6");
      continue;
    }
    FerUsage usage;
    if (fields[2] == "Training")
      usage = FerUsage::Training;
    else if (fields[2] == "PublicTest")
      usage = FerUsage::PublicTest;
    else if (fields[2] == "PrivateTest")
      usage = FerUsage::PrivateTest;
    else {
      bad("unknown Usage '" + fields[2] + "'");
      continue;
    }
    GrayImage img(kFerSide, kFerSide);
    std::size_t count = 0;
    std::string err;
    const char* p = fields[1].data();
    const char* end = p + fields[1].size();
    while (p < end && err.empty()) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      int v = 0;
      auto [q, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || (q < end && *q != ' ')) {
        err = "non-integer pixel token at position " + std::to_string(count + 1);
      } else if (v < 0 || v > 255) {
        err = "pixel value " + std::to_string(v) + " outside 0..255";
      } else if (count < img.pixels.size()) {
        img.pixels[count] = static_cast<float>(v) / 255.0f;
      }
      ++count;
      p = q;
    }
    if (!err.empty()) {
      bad(err);
      continue;
    }
    if (count != kFerSide * kFerSide) {
      bad("expected 2304 pixels, got " + std::to_string(count));
      continue;
    }
    out.records.push_back({emotion, std::move(img), usage});
  }
  return out;
}

inline std::string encode_fer_csv(std::span<const FerRecord> records) {
  std::string s = "emotion,pixels,Usage\n";
  for (const auto& r : records) {
    require(r.image.width == kFerSide && r.image.height == kFerSide, ErrorKind::Shape, "FER images are 48x48");
    s += std::to_string(r.emotion) + ",";
    for (std::size_t i = 0; i < r.image.pixels.size(); ++i) {
      if (i) s += ' ';
      s += std::to_string(std::lround(std::clamp(r.image.pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    s += ",";
    s += usage_name(r.usage);
    s += "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// PGM

namespace detail {

inline std::string pgm_token(ByteReader& r) {
  std::string tok;
  while (true) {
    const char c = static_cast<char>(r.u8());
    if (c == '#') {
      while (static_cast<char>(r.u8()) != '\n') {
      }
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += c;
  }
}

inline std::size_t pgm_number(ByteReader& r, const char* what) {
  const auto tok = pgm_token(r);
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  require(ec == std::errc() && p == tok.data() + tok.size(), ErrorKind::Format,
          std::string("PGM: bad ") + what + " '" + tok + "'");
  return v;
}

}  // namespace detail

// Binary PGM (P5) with maxval 255; pixels scaled by 1/255.
inline GrayImage load_pgm(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "PGM");
  require(bytes.size() >= 2, ErrorKind::Format, "PGM: file too short");
  const std::string magic = r.raw(2);
  require(magic == "P5", ErrorKind::Format, "PGM: unsupported format '" + magic + "' (only binary P5)");
  const std::size_t w = detail::pgm_number(r, "width");
  const std::size_t h = detail::pgm_number(r, "height");
  const std::size_t maxval = detail::pgm_number(r, "maxval");
  require(w >= 1 && h >= 1, ErrorKind::Format, "PGM: zero dimension");
  require(maxval == 255, ErrorKind::Format, "PGM: unsupported maxval " + std::to_string(maxval) + " (only 255)");
  require(r.remaining() >= w * h, ErrorKind::Format,
          "PGM: truncated payload (" + std::to_string(r.remaining()) + " of " + std::to_string(w * h) + " bytes)");
  GrayImage img(w, h);
  const auto px = r.take(w * h);
  for (std::size_t i = 0; i < px.size(); ++i) img.pixels[i] = static_cast<float>(px[i]) / 255.0f;
  return img;
}

inline Bytes encode_pgm(const GrayImage& img) {
  std::vector<std::uint8_t> px(img.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
  return encode_pgm(img.width, img.height, px);
}

// ---------------------------------------------------------------------------
// Geometry

// Bilinear with edge clamping. Align-corners mapping src = dst*(in-1)/(out-1)
// for out > 1; a single output sample reads the input center.
inline GrayImage resize_bilinear(const GrayImage& img, std::size_t out_w, std::size_t out_h) {
  require(out_w >= 1 && out_h >= 1, ErrorKind::Argument, "resize: output dims must be >= 1");
  if (out_w == img.width && out_h == img.height) return img;
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out) {
    if (out == 1) return (static_cast<double>(in) - 1.0) / 2.0;
    return static_cast<double>(dst) * (static_cast<double>(in) - 1.0) / (static_cast<double>(out) - 1.0);
  };
  GrayImage out(out_w, out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, img.height, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, img.width, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * img.at(x0, y0) + fx * img.at(x1, y0);
      const double bot = (1 - fx) * img.at(x0, y1) + fx * img.at(x1, y1);
      out.at(x, y) = static_cast<float>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

struct AugmentParams {
  double max_rotation_deg = 15.0;
  double shear = 0.1;
  double zoom_low = 0.9;
  double zoom_high = 1.1;

  void validate() const {
    require(max_rotation_deg >= 0 && shear >= 0, ErrorKind::Argument, "augment: rotation and shear must be >= 0");
    require(zoom_low > 0 && zoom_low <= zoom_high, ErrorKind::Argument, "augment: need 0 < zoom_low <= zoom_high");
  }
};

struct AffineDraw {
  double rotation_deg = 0.0;
  double shear = 0.0;
  double zoom = 1.0;
};

inline AffineDraw draw_affine(const AugmentParams& p, Prng& prng) {
  p.validate();
  auto sym = [&](double m) { return m > 0 ? prng.uniform(-m, m) : 0.0; };
  AffineDraw d;
  d.rotation_deg = sym(p.max_rotation_deg);
  d.shear = sym(p.shear);
  d.zoom = p.zoom_high > p.zoom_low ? prng.uniform(p.zoom_low, p.zoom_high) : p.zoom_low;
  return d;
}

// Applies zoom * rotation * shear about the image center by inverse mapping
// each output pixel and sampling bilinearly; taps outside the image read 0.
inline GrayImage affine_transform(const GrayImage& img, const AffineDraw& d) {
  require(d.zoom > 0, ErrorKind::Argument, "affine: zoom must be > 0");
  const double th = d.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  // Forward A = z * [[c,-s],[s,c]] * [[1,k],[0,1]]; inverse = Sh^-1 R^-1 / z.
  const double k = d.shear;
  const double i00 = (c + k * s) / d.zoom, i01 = (s - k * c) / d.zoom;
  const double i10 = -s / d.zoom, i11 = c / d.zoom;
  const double cx = (static_cast<double>(img.width) - 1) / 2, cy = (static_cast<double>(img.height) - 1) / 2;
  auto tap = [&](std::ptrdiff_t x, std::ptrdiff_t y) -> double {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(img.width) || y >= static_cast<std::ptrdiff_t>(img.height))
      return 0.0;
    return img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
  };
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double u = static_cast<double>(x) - cx, v = static_cast<double>(y) - cy;
      const double sx = i00 * u + i01 * v + cx;
      const double sy = i10 * u + i11 * v + cy;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const auto x0 = static_cast<std::ptrdiff_t>(fx0), y0 = static_cast<std::ptrdiff_t>(fy0);
      const double val = (1 - fy) * ((1 - fx) * tap(x0, y0) + fx * tap(x0 + 1, y0)) +
                         fy * ((1 - fx) * tap(x0, y0 + 1) + fx * tap(x0 + 1, y0 + 1));
      out.at(x, y) = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  return out;
}

inline GrayImage affine_augment(const GrayImage& img, const AugmentParams& p, Prng& prng) {
  return affine_transform(img, draw_affine(p, prng));
}

// ---------------------------------------------------------------------------
// Labels and batching

inline std::vector<float> one_hot(std::size_t label, std::size_t classes) {
  require(label < classes, ErrorKind::Argument,
          "one_hot: label " + std::to_string(label) + " out of range for K=" + std::to_string(classes));
  std::vector<float> v(classes, 0.0f);
  v[label] = 1.0f;
  return v;
}

// Stacks equally sized images into [N, 1, H, W].
inline Tensor images_to_tensor(std::span<const GrayImage> images) {
  require(!images.empty(), ErrorKind::Argument, "no images");
  const std::size_t w = images[0].width, h = images[0].height;
  Tensor t(Shape{images.size(), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i].width == w && images[i].height == h, ErrorKind::Shape, "images differ in size");
    std::copy(images[i].pixels.begin(), images[i].pixels.end(), t.data().begin() + i * w * h);
  }
  return t;
}

inline GrayImage tensor_image(const Tensor& batch, std::size_t n) {
  const std::size_t h = batch.dim(2), w = batch.dim(3);
  GrayImage img(w, h);
  std::copy_n(batch.data().begin() + n * w * h, w * h, img.pixels.begin());
  return img;
}

// ---------------------------------------------------------------------------
// Manifests: CSV with header "path,label"; relative paths resolve against the
// manifest's directory.

struct ManifestEntry {
  std::filesystem::path path;
  std::string label;
};

inline std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::filesystem::path& base_dir) {
  const auto lines = split_lines(text);
  require(!lines.empty() && lines[0] == "path,label", ErrorKind::Format, "manifest: expected header 'path,label'");
  std::vector<ManifestEntry> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_fields(lines[i]);
    require(f.size() == 2 && !f[0].empty() && !f[1].empty(), ErrorKind::Format,
            "manifest line " + std::to_string(i + 1) + ": expected 'path,label'");
    std::filesystem::path p(f[0]);
    if (p.is_relative()) p = base_dir / p;
    out.push_back({p, f[1]});
  }
  require(!out.empty(), ErrorKind::Format, "manifest has no entries");
  return out;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_file_text(path), path.parent_path());
}

}  // namespace percept
