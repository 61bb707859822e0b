#pragma once

// Run configuration read from a TOML subset: [table] headers, key = value
// with strings, integers, floats, booleans and single-line arrays of those,
// and # comments. Unknown keys are rejected.

#include <cctype>
#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "percept/error.hpp"
#include "percept/io.hpp"
#include "percept/pipelines.hpp"

namespace percept {

namespace toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<std::string, std::int64_t, double, bool, Array> v;
  std::size_t line = 0;
};

// table name ("" for the root) -> key -> value
using Document = std::map<std::string, std::map<std::string, Value>>;

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  Document parse() {
    Document doc;
    doc[""];
    std::string table;
    while (pos_ < text_.size()) {
      skip_blank();
      if (pos_ >= text_.size()) break;
      const char c = text_[pos_];
      if (c == '\n') {
        ++pos_, ++line_;
        continue;
      }
      if (c == '#') {
        skip_comment();
        continue;
      }
      if (c == '[') {
        ++pos_;
        skip_blank();
        table = bare_key();
        skip_blank();
        expect(']');
        end_of_line();
        if (doc.count(table) && table != "") error("duplicate table [" + table + "]");
        doc[table];
        continue;
      }
      const std::string key = c == '"' ? basic_string() : bare_key();
      skip_blank();
      expect('=');
      skip_blank();
      Value val = value();
      end_of_line();
      auto& t = doc[table];
      if (t.count(key)) error("duplicate key '" + key + "'");
      t.emplace(key, std::move(val));
    }
    return doc;
  }

 private:
  [[noreturn]] void error(const std::string& msg) const {
    fail(ErrorKind::Config, "config line " + std::to_string(line_) + ": " + msg);
  }

  void skip_blank() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\r')) ++pos_;
  }
  void skip_comment() {
    while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
  }
  void expect(char c) {
    if (pos_ >= text_.size() || text_[pos_] != c) error(std::string("expected '") + c + "'");
    ++pos_;
  }
  void end_of_line() {
    skip_blank();
    if (pos_ < text_.size() && text_[pos_] == '#') skip_comment();
    if (pos_ < text_.size() && text_[pos_] != '\n') error("unexpected text after value");
  }

  std::string bare_key() {
    const std::size_t start = pos_;
    while (pos_ < text_.size()) {
      const char c = text_[pos_];
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) break;
      ++pos_;
    }
    if (pos_ == start) error("expected a key");
    return std::string(text_.substr(start, pos_ - start));
  }

  std::string basic_string() {
    expect('"');
    std::string out;
    while (true) {
      if (pos_ >= text_.size() || text_[pos_] == '\n') error("unterminated string");
      const char c = text_[pos_++];
      if (c == '"') break;
      if (c != '\\') {
        out += c;
        continue;
      }
      if (pos_ >= text_.size()) error("unterminated string");
      switch (text_[pos_++]) {
        case 'n': out += '\n'; break;
        case 't': out += '\t'; break;
        case '\\': out += '\\'; break;
        case '"': out += '"'; break;
        default: error("unsupported escape sequence");
      }
    }
    return out;
  }

  Value value() {
    Value v;
    v.line = line_;
    if (pos_ >= text_.size()) error("missing value");
    const char c = text_[pos_];
    if (c == '"') {
      v.v = basic_string();
    } else if (c == '[') {
      ++pos_;
      Array items;
      while (true) {
        skip_blank();
        if (pos_ < text_.size() && text_[pos_] == ']') {
          ++pos_;
          break;
        }
        items.push_back(value());
        skip_blank();
        if (pos_ < text_.size() && text_[pos_] == ',') {
          ++pos_;
          continue;
        }
        expect(']');
        break;
      }
      v.v = std::move(items);
    } else if (text_.substr(pos_, 4) == "true") {
      pos_ += 4;
      v.v = true;
    } else if (text_.substr(pos_, 5) == "false") {
      pos_ += 5;
      v.v = false;
    } else {
      v.v = number();
    }
    return v;
  }

  std::variant<std::string, std::int64_t, double, bool, Array> number() {
    const std::size_t start = pos_;
    while (pos_ < text_.size() && std::string_view("+-0123456789.eE_").find(text_[pos_]) != std::string_view::npos)
      ++pos_;
    std::string tok;
    for (char ch : text_.substr(start, pos_ - start))
      if (ch != '_') tok += ch;
    if (tok.empty()) error("expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos;
    const char* first = tok.data() + (tok[0] == '+' ? 1 : 0);
    const char* last = tok.data() + tok.size();
    if (is_float) {
      double d = 0;
      const auto r = std::from_chars(first, last, d);
      if (r.ec != std::errc{} || r.ptr != last) error("bad number '" + tok + "'");
      return d;
    }
    std::int64_t i = 0;
    const auto r = std::from_chars(first, last, i);
    if (r.ec != std::errc{} || r.ptr != last) error("bad integer '" + tok + "'");
    return i;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace detail

inline Document parse(std::string_view text) { return detail::Parser(text).parse(); }

}  // namespace toml

enum class Verbosity { Quiet, Info, Debug };

struct ReportFormats {
  bool json = true, csv = true, pgm = true;
};

struct RunConfig {
  PipelineConfig pipeline;
  std::filesystem::path output_dir = "out";
  ReportFormats formats;
  Verbosity verbosity = Verbosity::Info;
};

namespace detail {

class ConfigReader {
 public:
  explicit ConfigReader(toml::Document doc) : doc_(std::move(doc)) {}

  const toml::Value* find(const std::string& table, const std::string& key) {
    seen_[table].insert(key);
    const auto t = doc_.find(table);
    if (t == doc_.end()) return nullptr;
    const auto k = t->second.find(key);
    return k == t->second.end() ? nullptr : &k->second;
  }

  static std::string where(const std::string& table, const std::string& key) {
    return table.empty() ? key : table + "." + key;
  }

  std::optional<std::string> str(const std::string& table, const std::string& key) {
    const auto* v = find(table, key);
    if (!v) return std::nullopt;
    if (const auto* s = std::get_if<std::string>(&v->v)) return *s;
    fail(ErrorKind::Config, "'" + where(table, key) + "' must be a string");
  }

  std::optional<std::int64_t> integer(const std::string& table, const std::string& key) {
    const auto* v = find(table, key);
    if (!v) return std::nullopt;
    if (const auto* i = std::get_if<std::int64_t>(&v->v)) return *i;
    fail(ErrorKind::Config, "'" + where(table, key) + "' must be an integer");
  }

  std::optional<std::size_t> count(const std::string& table, const std::string& key, std::int64_t min = 0) {
    const auto v = integer(table, key);
    if (!v) return std::nullopt;
    require(*v >= min, ErrorKind::Config, "'" + where(table, key) + "' must be >= " + std::to_string(min));
    return static_cast<std::size_t>(*v);
  }

  std::optional<double> real(const std::string& table, const std::string& key) {
    const auto* v = find(table, key);
    if (!v) return std::nullopt;
    if (const auto* d = std::get_if<double>(&v->v)) return *d;
    if (const auto* i = std::get_if<std::int64_t>(&v->v)) return static_cast<double>(*i);
    fail(ErrorKind::Config, "'" + where(table, key) + "' must be a number");
  }

  std::optional<bool> boolean(const std::string& table, const std::string& key) {
    const auto* v = find(table, key);
    if (!v) return std::nullopt;
    if (const auto* b = std::get_if<bool>(&v->v)) return *b;
    fail(ErrorKind::Config, "'" + where(table, key) + "' must be true or false");
  }

  std::optional<toml::Array> array(const std::string& table, const std::string& key) {
    const auto* v = find(table, key);
    if (!v) return std::nullopt;
    if (const auto* a = std::get_if<toml::Array>(&v->v)) return *a;
    fail(ErrorKind::Config, "'" + where(table, key) + "' must be an array");
  }

  // Strict mode: any key or table that no reader asked for is a typo.
  void reject_unknown() const {
    for (const auto& [table, keys] : doc_) {
      const auto s = seen_.find(table);
      if (s == seen_.end()) {
        if (table.empty() && keys.empty()) continue;
        fail(ErrorKind::Config, "unknown table [" + table + "]");
      }
      for (const auto& [key, val] : keys)
        if (!s->second.count(key))
          fail(ErrorKind::Config,
               "unknown key '" + where(table, key) + "' (line " + std::to_string(val.line) + ")");
    }
  }

 private:
  toml::Document doc_;
  std::map<std::string, std::set<std::string>> seen_;
};

}  // namespace detail

// Parses a run configuration. Relative paths resolve against `base_dir`
// (the config file's directory). `seed_override` satisfies the mandatory seed.
inline RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir,
                                  std::optional<std::uint64_t> seed_override = std::nullopt) {
  detail::ConfigReader r(toml::parse(text));
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : (base_dir / path).lexically_normal();
  };

  const auto task_str = r.str("", "task");
  require(task_str.has_value(), ErrorKind::Config, "missing required key 'task'");
  RunConfig rc;
  auto& c = rc.pipeline;
  c = default_config(parse_task(*task_str));

  const auto seed = r.integer("", "seed");
  require(seed.has_value() || seed_override.has_value(), ErrorKind::Config,
          "missing required key 'seed' (seeds are mandatory; pass --seed to override)");
  if (seed) require(*seed >= 0, ErrorKind::Config, "'seed' must be non-negative");
  c.seed = seed_override ? *seed_override : static_cast<std::uint64_t>(*seed);
  c.split.seed = c.seed;
  if (const auto o = r.str("", "output_dir")) rc.output_dir = resolve(*o);

  const auto data = r.str("data", "path");
  require(data.has_value(), ErrorKind::Config, "missing required key 'data.path'");
  c.data_path = resolve(*data);
  if (const auto v = r.count("data", "image_size", 4)) c.image_size = *v;

  if (const auto v = r.real("split", "train")) c.split.train = *v;
  if (const auto v = r.real("split", "val")) c.split.val = *v;
  if (const auto v = r.real("split", "test")) c.split.test = *v;
  if (const auto v = r.integer("split", "seed")) c.split.seed = static_cast<std::uint64_t>(*v);
  try {
    c.split.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Config, std::string("split: ") + e.what());
  }

  if (const auto v = r.count("train", "epochs", 1)) c.epochs = *v;
  if (const auto v = r.count("train", "batch_size", 1)) c.batch_size = *v;
  if (const auto v = r.real("train", "learning_rate")) c.adam.learning_rate = *v;
  if (const auto v = r.real("train", "beta1")) c.adam.beta1 = *v;
  if (const auto v = r.real("train", "beta2")) c.adam.beta2 = *v;
  if (const auto v = r.real("train", "epsilon")) c.adam.epsilon = *v;
  if (const auto v = r.boolean("train", "early_stopping")) c.early_stopping = *v;
  if (const auto v = r.count("train", "patience")) c.early_stop.patience = *v;
  if (const auto v = r.real("train", "min_delta")) c.early_stop.min_delta = *v;
  require(c.adam.learning_rate > 0, ErrorKind::Config, "'train.learning_rate' must be positive");
  require(c.adam.beta1 > 0 && c.adam.beta1 < 1 && c.adam.beta2 > 0 && c.adam.beta2 < 1, ErrorKind::Config,
          "'train.beta1' and 'train.beta2' must lie in (0, 1)");
  require(c.adam.epsilon > 0, ErrorKind::Config, "'train.epsilon' must be positive");
  require(c.early_stop.min_delta >= 0, ErrorKind::Config, "'train.min_delta' must be >= 0");

  if (const auto v = r.boolean("augment", "enabled")) c.augment = *v;
  if (const auto v = r.real("augment", "max_rotation_deg")) c.augment_params.max_rotation_deg = *v;
  if (const auto v = r.real("augment", "shear")) c.augment_params.shear = *v;
  if (const auto v = r.real("augment", "zoom_low")) c.augment_params.zoom_low = *v;
  if (const auto v = r.real("augment", "zoom_high")) c.augment_params.zoom_high = *v;
  try {
    c.augment_params.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Config, std::string("augment: ") + e.what());
  }

  if (const auto v = r.real("mfcc", "frame_len_ms")) c.mfcc.frame_len_ms = *v;
  if (const auto v = r.real("mfcc", "hop_ms")) c.mfcc.hop_ms = *v;
  if (const auto v = r.count("mfcc", "n_mels", 1)) c.mfcc.n_mels = *v;
  if (const auto v = r.count("mfcc", "n_coeffs", 1)) c.mfcc.n_coeffs = *v;
  if (const auto v = r.count("mfcc", "fft_size")) c.mfcc.fft_size = *v;
  if (const auto v = r.real("mfcc", "fmin")) c.mfcc.fmin = *v;
  if (const auto v = r.real("mfcc", "fmax")) c.mfcc.fmax = *v;

  if (const auto a = r.array("model", "conv_filters")) {
    std::vector<std::size_t> filters;
    for (const auto& item : *a) {
      const auto* i = std::get_if<std::int64_t>(&item.v);
      require(i && *i >= 1, ErrorKind::Config, "'model.conv_filters' must hold positive integers");
      filters.push_back(static_cast<std::size_t>(*i));
    }
    require(!filters.empty(), ErrorKind::Config, "'model.conv_filters' must not be empty");
    c.arch.conv_filters = filters;
  }
  if (const auto v = r.count("model", "dense_units", 1)) c.arch.dense_units = *v;
  if (const auto v = r.real("model", "dropout")) {
    require(*v > 0 && *v < 1, ErrorKind::Config, "'model.dropout' must be in (0, 1)");
    c.arch.dropout = *v;
  }
  if (const auto v = r.count("model", "lstm_units", 1)) c.arch.lstm_units = *v;

  if (const auto a = r.array("report", "formats")) {
    rc.formats = {false, false, false};
    for (const auto& item : *a) {
      const auto* s = std::get_if<std::string>(&item.v);
      require(s != nullptr, ErrorKind::Config, "'report.formats' must hold strings");
      if (*s == "json")
        rc.formats.json = true;
      else if (*s == "csv")
        rc.formats.csv = true;
      else if (*s == "pgm")
        rc.formats.pgm = true;
      else
        fail(ErrorKind::Config, "unknown report format '" + *s + "' (expected json, csv or pgm)");
    }
  }

  if (const auto v = r.str("logging", "verbosity")) {
    if (*v == "quiet")
      rc.verbosity = Verbosity::Quiet;
    else if (*v == "info")
      rc.verbosity = Verbosity::Info;
    else if (*v == "debug")
      rc.verbosity = Verbosity::Debug;
    else
      fail(ErrorKind::Config, "unknown verbosity '" + *v + "' (expected quiet, info or debug)");
  }

  r.reject_unknown();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path,
                                 std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::string text;
  try {
    text = read_file_text(path);
  } catch (const Error& e) {
    fail(ErrorKind::Config, e.what());
  }
  return parse_run_config(text, path.parent_path(), seed_override);
}

}  // namespace percept
