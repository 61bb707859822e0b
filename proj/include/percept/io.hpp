#pragma once

// Byte-level helpers shared by the file formats: little-endian readers and
// writers, whole-file I/O, CSV matrices, binary PGM, and a small
// index-ordered parallel loop.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "percept/tensor.hpp"

namespace percept {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string read_file_text(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  return std::string(b.begin(), b.end());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for '" + path.string() + "'");
}

inline void write_file_text(const std::filesystem::path& path, std::string_view text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  // u32 length prefix followed by the UTF-8 bytes.
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }

  const Bytes& bytes() const noexcept { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }
  bool done() const noexcept { return pos_ == bytes_.size(); }

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto b = take(2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::string str() { return raw(u32()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > remaining())
      fail(ErrorKind::Format, context_ + ": truncated (needed " + std::to_string(n) + " bytes at offset " +
                                  std::to_string(pos_) + ", " + std::to_string(remaining()) + " left)");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) { take(n); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

// Rows of comma-separated values with six fixed decimals.
inline std::string matrix_to_csv(const Tensor64& m) {
  require(m.rank() == 2, ErrorKind::Shape, "CSV export expects a matrix");
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t c = 0; c < m.dim(1); ++c) {
      if (c) os << ',';
      const double v = m.at(r, c);
      os << (v == 0.0 ? 0.0 : v);
    }
    os << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string_view::npos) pos = text.size();
    std::string line(text.substr(start, pos - start));
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = pos + 1;
  }
  return lines;
}

inline Tensor64 matrix_from_csv(std::string_view text) {
  std::vector<double> data;
  std::size_t cols = 0, rows = 0;
  for (const auto& line : split_lines(text)) {
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (rows == 0) cols = fields.size();
    require(fields.size() == cols, ErrorKind::Format, "CSV row " + std::to_string(rows + 1) + " has a different width");
    for (const auto& f : fields) {
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      require(end != f.c_str() && *end == '\0', ErrorKind::Format, "CSV: bad number '" + f + "'");
      data.push_back(v);
    }
    ++rows;
  }
  require(rows > 0, ErrorKind::Format, "CSV: no rows");
  return Tensor64(Shape{rows, cols}, std::move(data));
}

// Binary PGM (P5, maxval 255).
inline Bytes encode_pgm(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
  require(pixels.size() == width * height, ErrorKind::Shape, "PGM pixel count mismatch");
  ByteWriter w;
  w.raw("P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n");
  Bytes out = w.take();
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

// Maps [min, max] of `values` onto 0..255; a constant input maps to 0.
inline std::vector<std::uint8_t> to_gray_levels(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (range <= 0) return out;
  for (std::size_t i = 0; i < values.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (values[i] - *lo) / range));
  return out;
}

// Worker cap from PERCEPT_THREADS (default: hardware concurrency).
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PERCEPT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

// Runs fn(i) for i in [0, n) across workers. Callers write results into
// per-index slots so output order never depends on scheduling.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace percept
