#pragma once

// The three model recipes (eye state, facial expression, speaker), dataset
// loading and featurization, end-to-end training/evaluation, reports, and the
// PRCP model file.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "percept/audio.hpp"
#include "percept/imaging.hpp"
#include "percept/io.hpp"
#include "percept/layers.hpp"
#include "percept/training.hpp"

namespace percept {

enum class Task { Eye, Fer, Speaker };

inline std::string task_name(Task t) {
  switch (t) {
    case Task::Eye: return "eye";
    case Task::Fer: return "fer";
    case Task::Speaker: return "speaker";
  }
  return "?";
}

inline Task parse_task(const std::string& s) {
  if (s == "eye") return Task::Eye;
  if (s == "fer") return Task::Fer;
  if (s == "speaker") return Task::Speaker;
  fail(ErrorKind::Config, "unknown task '" + s + "' (expected eye, fer or speaker)");
}

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  Shape sample_shape;
};

struct ArchitectureOverrides {
  std::optional<std::vector<std::size_t>> conv_filters;
  std::optional<std::size_t> dense_units;
  std::optional<double> dropout;
  std::optional<std::size_t> lstm_units;
};

// Conv(16)->ReLU->Pool->Conv(32)->ReLU->Pool->Flatten->Dense(64)->ReLU->
// Dropout(0.5)->Dense(2)->Softmax on [1, H, W].
inline NetworkSpec build_eye_model(std::size_t height = 64, std::size_t width = 64,
                                   const ArchitectureOverrides& o = {}) {
  const auto filters = o.conv_filters.value_or(std::vector<std::size_t>{16, 32});
  NetworkSpec s{{}, Shape{1, height, width}};
  for (std::size_t f : filters) {
    s.layers.push_back(layer::Conv2D{f, 3, 3, 1, Padding::Same});
    s.layers.push_back(layer::ReLU{});
    s.layers.push_back(layer::MaxPool2D{2, 2});
  }
  s.layers.push_back(layer::Flatten{});
  s.layers.push_back(layer::Dense{o.dense_units.value_or(64)});
  s.layers.push_back(layer::ReLU{});
  s.layers.push_back(layer::Dropout{o.dropout.value_or(0.5)});
  s.layers.push_back(layer::Dense{2});
  s.layers.push_back(layer::Softmax{});
  return s;
}

// Conv(32)->BN->ReLU->Pool->Conv(64)->BN->ReLU->Pool->Flatten->Dense(128)->
// ReLU->Dropout(0.5)->Dense(7)->Softmax on [1, 48, 48].
inline NetworkSpec build_fer_model(std::size_t height = 48, std::size_t width = 48,
                                   const ArchitectureOverrides& o = {}) {
  const auto filters = o.conv_filters.value_or(std::vector<std::size_t>{32, 64});
  NetworkSpec s{{}, Shape{1, height, width}};
  for (std::size_t f : filters) {
    s.layers.push_back(layer::Conv2D{f, 3, 3, 1, Padding::Same});
    s.layers.push_back(layer::BatchNorm{});
    s.layers.push_back(layer::ReLU{});
    s.layers.push_back(layer::MaxPool2D{2, 2});
  }
  s.layers.push_back(layer::Flatten{});
  s.layers.push_back(layer::Dense{o.dense_units.value_or(128)});
  s.layers.push_back(layer::ReLU{});
  s.layers.push_back(layer::Dropout{o.dropout.value_or(0.5)});
  s.layers.push_back(layer::Dense{kFerEmotions.size()});
  s.layers.push_back(layer::Softmax{});
  return s;
}

// LSTM(128, last output)->Dense(64)->ReLU->Dense(n_speakers)->Softmax on [T, n_coeffs].
inline NetworkSpec build_speaker_model(std::size_t n_coeffs = 13, std::size_t n_speakers = 5,
                                       std::size_t seq_len = 98, const ArchitectureOverrides& o = {}) {
  require(n_speakers >= 2, ErrorKind::Argument, "speaker model needs >= 2 speakers");
  NetworkSpec s{{}, Shape{seq_len, n_coeffs}};
  s.layers.push_back(layer::LSTM{o.lstm_units.value_or(128), false});
  s.layers.push_back(layer::Dense{o.dense_units.value_or(64)});
  s.layers.push_back(layer::ReLU{});
  s.layers.push_back(layer::Dense{n_speakers});
  s.layers.push_back(layer::Softmax{});
  return s;
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  Task task = Task::Speaker;
  std::filesystem::path data_path;
  SplitSpec split;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AdamConfig adam;
  bool early_stopping = true;
  EarlyStopConfig early_stop;
  bool augment = false;
  AugmentParams augment_params;
  MfccConfig mfcc;
  std::size_t image_size = 64;  // eye task input side
  ArchitectureOverrides arch;
};

inline PipelineConfig default_config(Task task) {
  PipelineConfig c;
  c.task = task;
  switch (task) {
    case Task::Eye:
      c.epochs = 15;
      c.batch_size = 32;
      c.early_stopping = false;
      c.augment = true;
      break;
    case Task::Fer:
      c.epochs = 20;
      c.batch_size = 64;
      c.early_stopping = false;
      c.image_size = kFerSide;
      break;
    case Task::Speaker:
      c.epochs = 30;
      c.batch_size = 32;
      c.early_stopping = true;
      c.early_stop = {5, 0.0};
      break;
  }
  return c;
}

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["task"] = task_name(c.task);
  j["data_path"] = c.data_path.generic_string();
  j["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}, {"seed", c.split.seed}};
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["adam"] = {{"learning_rate", c.adam.learning_rate},
               {"beta1", c.adam.beta1},
               {"beta2", c.adam.beta2},
               {"epsilon", c.adam.epsilon}};
  j["early_stopping"] = c.early_stopping;
  j["patience"] = c.early_stop.patience;
  j["min_delta"] = c.early_stop.min_delta;
  j["augment"] = c.augment;
  j["augment_params"] = {{"max_rotation_deg", c.augment_params.max_rotation_deg},
                         {"shear", c.augment_params.shear},
                         {"zoom_low", c.augment_params.zoom_low},
                         {"zoom_high", c.augment_params.zoom_high}};
  j["mfcc"] = {{"frame_len_ms", c.mfcc.frame_len_ms}, {"hop_ms", c.mfcc.hop_ms},  {"n_mels", c.mfcc.n_mels},
               {"n_coeffs", c.mfcc.n_coeffs},         {"fft_size", c.mfcc.fft_size}, {"fmin", c.mfcc.fmin},
               {"fmax", c.mfcc.fmax}};
  j["image_size"] = c.image_size;
  nlohmann::json arch = nlohmann::json::object();
  if (c.arch.conv_filters) arch["conv_filters"] = *c.arch.conv_filters;
  if (c.arch.dense_units) arch["dense_units"] = *c.arch.dense_units;
  if (c.arch.dropout) arch["dropout"] = *c.arch.dropout;
  if (c.arch.lstm_units) arch["lstm_units"] = *c.arch.lstm_units;
  j["arch"] = arch;
  return j;
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  try {
    PipelineConfig c = default_config(parse_task(j.at("task").get<std::string>()));
    c.data_path = j.at("data_path").get<std::string>();
    const auto& s = j.at("split");
    c.split = {s.at("train").get<double>(), s.at("val").get<double>(), s.at("test").get<double>(),
               s.at("seed").get<std::uint64_t>()};
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& a = j.at("adam");
    c.adam = {a.at("learning_rate").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
              a.at("epsilon").get<double>()};
    c.early_stopping = j.at("early_stopping").get<bool>();
    c.early_stop = {j.at("patience").get<std::size_t>(), j.at("min_delta").get<double>()};
    c.augment = j.at("augment").get<bool>();
    const auto& ap = j.at("augment_params");
    c.augment_params = {ap.at("max_rotation_deg").get<double>(), ap.at("shear").get<double>(),
                        ap.at("zoom_low").get<double>(), ap.at("zoom_high").get<double>()};
    const auto& m = j.at("mfcc");
    c.mfcc = {m.at("frame_len_ms").get<double>(), m.at("hop_ms").get<double>(),  m.at("n_mels").get<std::size_t>(),
              m.at("n_coeffs").get<std::size_t>(),  m.at("fft_size").get<std::size_t>(), m.at("fmin").get<double>(),
              m.at("fmax").get<double>()};
    c.image_size = j.at("image_size").get<std::size_t>();
    const auto& arch = j.at("arch");
    if (arch.contains("conv_filters")) c.arch.conv_filters = arch["conv_filters"].get<std::vector<std::size_t>>();
    if (arch.contains("dense_units")) c.arch.dense_units = arch["dense_units"].get<std::size_t>();
    if (arch.contains("dropout")) c.arch.dropout = arch["dropout"].get<double>();
    if (arch.contains("lstm_units")) c.arch.lstm_units = arch["lstm_units"].get<std::size_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("config snapshot: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trained model

struct TrainedModel {
  Task task = Task::Speaker;
  NetworkSpec spec;
  std::vector<LayerParams<float>> params;
  std::vector<std::string> labels;
  std::optional<FeatureScaler> scaler;  // speaker only
  std::string config_snapshot;          // JSON of the PipelineConfig

  Network<float> network() const { return Network<float>(spec.layers, spec.sample_shape, params); }
  PipelineConfig config() const { return config_from_json(nlohmann::json::parse(config_snapshot)); }
};

inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

enum class LayerKind : std::uint32_t { Conv2D = 1, MaxPool2D, Dense, ReLU, Softmax, Dropout, BatchNorm, Flatten, LSTM };

inline void write_layer(ByteWriter& w, const LayerSpec& spec) {
  auto u = [&](std::size_t v) { w.u32(static_cast<std::uint32_t>(v)); };
  std::visit(overloaded{
                 [&](const layer::Conv2D& c) {
                   u(static_cast<std::uint32_t>(LayerKind::Conv2D));
                   u(c.filters), u(c.kernel_h), u(c.kernel_w), u(c.stride);
                   u(c.padding == Padding::Same ? 1 : 0);
                 },
                 [&](const layer::MaxPool2D& p) {
                   u(static_cast<std::uint32_t>(LayerKind::MaxPool2D));
                   u(p.pool_h), u(p.pool_w);
                 },
                 [&](const layer::Dense& d) {
                   u(static_cast<std::uint32_t>(LayerKind::Dense));
                   u(d.units);
                 },
                 [&](const layer::ReLU&) { u(static_cast<std::uint32_t>(LayerKind::ReLU)); },
                 [&](const layer::Softmax&) { u(static_cast<std::uint32_t>(LayerKind::Softmax)); },
                 [&](const layer::Dropout& d) {
                   u(static_cast<std::uint32_t>(LayerKind::Dropout));
                   w.f64(d.rate);
                 },
                 [&](const layer::BatchNorm& b) {
                   u(static_cast<std::uint32_t>(LayerKind::BatchNorm));
                   w.f64(b.momentum);
                   w.f64(b.epsilon);
                 },
                 [&](const layer::Flatten&) { u(static_cast<std::uint32_t>(LayerKind::Flatten)); },
                 [&](const layer::LSTM& l) {
                   u(static_cast<std::uint32_t>(LayerKind::LSTM));
                   u(l.units), u(l.return_sequence ? 1 : 0);
                 },
             },
             spec);
}

inline LayerSpec read_layer(ByteReader& r) {
  const std::uint32_t kind = r.u32();
  switch (static_cast<LayerKind>(kind)) {
    case LayerKind::Conv2D: {
      layer::Conv2D c;
      c.filters = r.u32(), c.kernel_h = r.u32(), c.kernel_w = r.u32(), c.stride = r.u32();
      c.padding = r.u32() ? Padding::Same : Padding::Valid;
      return c;
    }
    case LayerKind::MaxPool2D: {
      layer::MaxPool2D p;
      p.pool_h = r.u32(), p.pool_w = r.u32();
      return p;
    }
    case LayerKind::Dense: return layer::Dense{r.u32()};
    case LayerKind::ReLU: return layer::ReLU{};
    case LayerKind::Softmax: return layer::Softmax{};
    case LayerKind::Dropout: return layer::Dropout{r.f64()};
    case LayerKind::BatchNorm: {
      layer::BatchNorm b;
      b.momentum = r.f64();
      b.epsilon = r.f64();
      return b;
    }
    case LayerKind::Flatten: return layer::Flatten{};
    case LayerKind::LSTM: {
      layer::LSTM l;
      l.units = r.u32();
      l.return_sequence = r.u32() != 0;
      return l;
    }
  }
  fail(ErrorKind::Format, "model: unknown layer kind " + std::to_string(kind));
}

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape().dims()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

}  // namespace detail

// "PRCP", u32 version, task tag, layer-spec table, sample shape, label names,
// config snapshot, then named tensors (name, ndim, dims, f32 values).
inline Bytes encode_model(const TrainedModel& m) {
  ByteWriter w;
  w.raw("PRCP");
  w.u32(kModelVersion);
  w.str(task_name(m.task));
  w.u32(static_cast<std::uint32_t>(m.spec.layers.size()));
  for (const auto& l : m.spec.layers) detail::write_layer(w, l);
  w.u32(static_cast<std::uint32_t>(m.spec.sample_shape.rank()));
  for (std::size_t d : m.spec.sample_shape.dims()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(m.labels.size()));
  for (const auto& l : m.labels) w.str(l);
  w.str(m.config_snapshot);

  std::uint32_t count = 0;
  for (const auto& p : m.params) count += static_cast<std::uint32_t>(p.tensors.size());
  if (m.scaler) count += 2;
  w.u32(count);
  for (std::size_t l = 0; l < m.params.size(); ++l)
    for (const auto& t : m.params[l].tensors)
      detail::write_tensor(w, "layer" + std::to_string(l) + "." + t.name, t.value);
  if (m.scaler) {
    auto as_tensor = [](const std::vector<double>& v) {
      Tensor t(Shape{v.size()});
      for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<float>(v[i]);
      return t;
    };
    detail::write_tensor(w, "scaler.mean", as_tensor(m.scaler->mean));
    detail::write_tensor(w, "scaler.std", as_tensor(m.scaler->std));
  }
  return w.take();
}

inline TrainedModel decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "model");
  require(bytes.size() >= 4 && r.raw(4) == "PRCP", ErrorKind::Format, "model: bad magic (expected PRCP)");
  const std::uint32_t version = r.u32();
  require(version == kModelVersion, ErrorKind::Format,
          "model: unsupported version " + std::to_string(version) + " (expected " + std::to_string(kModelVersion) + ")");
  TrainedModel m;
  m.task = parse_task(r.str());
  const std::uint32_t n_layers = r.u32();
  require(n_layers <= 4096, ErrorKind::Format, "model: implausible layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) m.spec.layers.push_back(detail::read_layer(r));
  const std::uint32_t rank = r.u32();
  require(rank >= 1 && rank <= 4, ErrorKind::Format, "model: bad sample rank");
  std::vector<std::size_t> dims;
  for (std::uint32_t i = 0; i < rank; ++i) dims.push_back(r.u32());
  try {
    m.spec.sample_shape = Shape(dims);
  } catch (const Error& e) {
    fail(ErrorKind::Format, std::string("model: ") + e.what());
  }
  const std::uint32_t n_labels = r.u32();
  require(n_labels <= 1u << 16, ErrorKind::Format, "model: implausible label count");
  for (std::uint32_t i = 0; i < n_labels; ++i) m.labels.push_back(r.str());
  m.config_snapshot = r.str();

  std::map<std::string, Tensor> named;
  std::vector<std::string> order;
  const std::uint32_t n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.str();
    const std::uint32_t nd = r.u32();
    require(nd >= 1 && nd <= 4, ErrorKind::Format, "model: tensor '" + name + "' has bad rank");
    std::vector<std::size_t> td;
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < nd; ++k) {
      td.push_back(r.u32());
      require(td.back() >= 1, ErrorKind::Format, "model: tensor '" + name + "' has a zero extent");
      count *= td.back();
    }
    require(count * 4 <= r.remaining(), ErrorKind::Format, "model: truncated tensor '" + name + "'");
    std::vector<float> data(count);
    for (float& v : data) v = r.f32();
    order.push_back(name);
    named.emplace(name, Tensor(Shape(td), std::move(data)));
  }
  require(r.done(), ErrorKind::Format, "model: trailing bytes after tensor table");

  std::size_t used = 0;
  for (std::size_t l = 0; l < m.spec.layers.size(); ++l) {
    LayerParams<float> lp;
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (const auto& name : order)
      if (name.rfind(prefix, 0) == 0) {
        lp.tensors.push_back({name.substr(prefix.size()), named.at(name)});
        ++used;
      }
    m.params.push_back(std::move(lp));
  }
  if (named.count("scaler.mean") && named.count("scaler.std")) {
    FeatureScaler s;
    for (float v : named.at("scaler.mean").data()) s.mean.push_back(v);
    for (float v : named.at("scaler.std").data()) s.std.push_back(v);
    require(s.mean.size() == s.std.size(), ErrorKind::Format, "model: scaler mean/std widths differ");
    m.scaler = std::move(s);
    used += 2;
  }
  require(used == named.size(), ErrorKind::Format, "model: unrecognized tensors in file");
  try {
    const auto net = m.network();  // validates spec/params consistency
    require(net.output_sample_shape() == Shape{m.labels.size()}, ErrorKind::Format,
            "model: label count does not match the output width");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format) throw;
    fail(ErrorKind::Format, std::string("model: inconsistent parameters: ") + e.what());
  }
  return m;
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  write_file_bytes(path, encode_model(m));
}

inline TrainedModel load_model(const std::filesystem::path& path) { return decode_model(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Evaluation report

struct SampleResult {
  std::size_t truth = 0, predicted = 0;
  double confidence = 0;
};

struct EvalReport {
  std::vector<std::string> labels;
  ConfusionMatrix confusion{1};
  Metrics metrics;
  std::vector<SampleResult> samples;
};

inline EvalReport evaluate(const Network<float>& net, const Dataset<float>& data,
                           const std::vector<std::string>& labels) {
  require(data.size() > 0, ErrorKind::Argument, "evaluation set is empty");
  const auto probs = predict_batched(net, data.x);
  const auto pred = argmax_rows(probs);
  const std::size_t K = probs.dim(1);
  require(labels.size() == K, ErrorKind::Shape, "label names do not match the output width");
  EvalReport rep;
  rep.labels = labels;
  rep.confusion = confusion_matrix_build(data.y, pred, K);
  rep.metrics = metrics_from_confusion(rep.confusion);
  for (std::size_t i = 0; i < pred.size(); ++i) rep.samples.push_back({data.y[i], pred[i], probs[i * K + pred[i]]});
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["accuracy"] = r.metrics.accuracy;
  j["macro_f1"] = r.metrics.macro_f1;
  j["weighted_f1"] = r.metrics.weighted_f1;
  j["total"] = r.confusion.total();
  j["labels"] = r.labels;
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t k = 0; k < r.metrics.per_class.size(); ++k) {
    const auto& c = r.metrics.per_class[k];
    per.push_back({{"label", r.labels[k]},
                   {"precision", c.precision},
                   {"recall", c.recall},
                   {"f1", c.f1},
                   {"support", c.support}});
  }
  j["per_class"] = per;
  nlohmann::json cm = nlohmann::json::array();
  for (std::size_t t = 0; t < r.confusion.classes(); ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < r.confusion.classes(); ++p) row.push_back(r.confusion.at(t, p));
    cm.push_back(row);
  }
  j["confusion"] = cm;
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : r.samples) samples.push_back({{"true", s.truth}, {"pred", s.predicted}, {"confidence", s.confidence}});
  j["samples"] = samples;
  return j;
}

inline std::string confusion_to_csv(const ConfusionMatrix& cm) {
  std::string s;
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    for (std::size_t p = 0; p < cm.classes(); ++p) {
      if (p) s += ',';
      s += std::to_string(cm.at(t, p));
    }
    s += '\n';
  }
  return s;
}

inline constexpr std::size_t kConfusionCell = 32;

// Row-normalized heatmap, 32x32 pixels per cell; brighter = larger share.
inline Bytes confusion_to_pgm(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes(), side = K * kConfusionCell;
  std::vector<std::uint8_t> px(side * side);
  for (std::size_t t = 0; t < K; ++t) {
    const double support = static_cast<double>(cm.support(t));
    for (std::size_t p = 0; p < K; ++p) {
      const double frac = support > 0 ? static_cast<double>(cm.at(t, p)) / support : 0.0;
      const auto level = static_cast<std::uint8_t>(std::lround(255.0 * frac));
      for (std::size_t y = 0; y < kConfusionCell; ++y)
        std::fill_n(px.begin() + (t * kConfusionCell + y) * side + p * kConfusionCell, kConfusionCell, level);
    }
  }
  return encode_pgm(side, side, px);
}

inline std::string history_to_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_loss,val_acc\n" << std::fixed << std::setprecision(6);
  for (const auto& e : history)
    os << e.epoch << ',' << e.train_loss << ',' << e.train_acc << ',' << e.val_loss << ',' << e.val_acc << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Dataset loading

struct LabeledData {
  Dataset<float> data;
  std::vector<std::string> labels;
  std::vector<std::string> diagnostics;
};

inline std::vector<std::string> sorted_label_names(const std::vector<ManifestEntry>& entries) {
  std::set<std::string> names;
  for (const auto& e : entries) names.insert(e.label);
  return {names.begin(), names.end()};
}

inline std::size_t label_index(const std::vector<std::string>& names, const std::string& label) {
  const auto it = std::find(names.begin(), names.end(), label);
  require(it != names.end(), ErrorKind::Format, "label '" + label + "' is not one of the model's classes");
  return static_cast<std::size_t>(it - names.begin());
}

// Manifest of PGM images resized to size x size. Label names are the sorted
// distinct manifest labels unless `names` is given.
inline LabeledData load_eye_dataset(const std::filesystem::path& manifest, std::size_t size,
                                    std::optional<std::vector<std::string>> names = std::nullopt) {
  const auto entries = read_manifest(manifest);
  LabeledData out;
  out.labels = names ? *names : sorted_label_names(entries);
  std::vector<GrayImage> images(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    try {
      images[i] = resize_bilinear(load_pgm(read_file_bytes(entries[i].path)), size, size);
    } catch (const Error& e) {
      fail(e.kind(), entries[i].path.string() + ": " + e.what());
    }
  });
  for (const auto& e : entries) out.data.y.push_back(label_index(out.labels, e.label));
  out.data.x = images_to_tensor(images);
  return out;
}

inline LabeledData load_fer_dataset(const std::filesystem::path& csv) {
  const auto parsed = parse_fer_csv(read_file_text(csv));
  LabeledData out;
  out.labels.assign(kFerEmotions.begin(), kFerEmotions.end());
  for (const auto& d : parsed.diagnostics)
    out.diagnostics.push_back(csv.string() + ":" + std::to_string(d.line) + ": " + d.message);
  require(!parsed.records.empty(), ErrorKind::Format, "FER CSV '" + csv.string() + "' has no valid rows");
  std::vector<GrayImage> images;
  for (const auto& r : parsed.records) {
    images.push_back(r.image);
    out.data.y.push_back(r.emotion);
  }
  out.data.x = images_to_tensor(images);
  return out;
}

// Raw per-clip MFCC matrices (rounded to f32 precision, as stored in the cache).
struct SpeakerRecords {
  std::vector<FeatureRecord> records;
  std::vector<std::string> labels;
  std::vector<std::string> diagnostics;
};

inline std::filesystem::path labels_sidecar(const std::filesystem::path& cache) {
  auto p = cache;
  p += ".labels";
  return p;
}

inline SpeakerRecords load_speaker_records(const std::filesystem::path& path, const MfccConfig& config) {
  SpeakerRecords out;
  const auto head = read_file_bytes(path);
  if (is_feature_cache(head)) {
    out.records = decode_feature_cache(head);
    std::uint32_t max_label = 0;
    for (const auto& r : out.records) max_label = std::max(max_label, r.label);
    if (std::filesystem::exists(labels_sidecar(path))) {
      for (const auto& l : split_lines(read_file_text(labels_sidecar(path))))
        if (!l.empty()) out.labels.push_back(l);
    } else {
      for (std::uint32_t k = 0; k <= max_label; ++k) out.labels.push_back("class_" + std::to_string(k));
    }
    require(max_label < out.labels.size(), ErrorKind::Format, "feature cache label exceeds the label list");
    return out;
  }
  const auto entries = parse_manifest(std::string(head.begin(), head.end()), path.parent_path());
  out.labels = sorted_label_names(entries);
  std::vector<std::optional<FeatureRecord>> slots(entries.size());
  std::vector<std::string> errors(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    try {
      auto f = mfcc(parse_wav(read_file_bytes(entries[i].path)), config);
      for (double& v : f.data()) v = static_cast<float>(v);
      slots[i] = FeatureRecord{static_cast<std::uint32_t>(label_index(out.labels, entries[i].label)), std::move(f)};
    } catch (const Error& e) {
      errors[i] = entries[i].path.string() + ": " + e.what();
    }
  });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (slots[i])
      out.records.push_back(std::move(*slots[i]));
    else
      out.diagnostics.push_back("skipped " + errors[i]);
  }
  for (std::size_t k = 0; k < out.labels.size(); ++k) {
    const bool present = std::any_of(out.records.begin(), out.records.end(),
                                     [&](const FeatureRecord& r) { return r.label == k; });
    require(present, ErrorKind::Format, "speaker class '" + out.labels[k] + "' has no readable clips");
  }
  return out;
}

// Lower median of the clip lengths.
inline std::size_t median_length(const std::vector<FeatureRecord>& records) {
  require(!records.empty(), ErrorKind::Argument, "no feature records");
  std::vector<std::size_t> lens;
  for (const auto& r : records) lens.push_back(r.features.dim(0));
  std::sort(lens.begin(), lens.end());
  return lens[(lens.size() - 1) / 2];
}

// Fits on the real (unpadded, after truncation to seq_len) rows of the listed
// clips. Statistics are rounded to f32 so a saved model reproduces them exactly.
inline FeatureScaler fit_speaker_scaler(const std::vector<FeatureRecord>& records,
                                        std::span<const std::size_t> fit_idx, std::size_t seq_len) {
  require(!fit_idx.empty(), ErrorKind::Argument, "scaler needs at least one training clip");
  const std::size_t C = records[fit_idx[0]].features.dim(1);
  std::vector<double> rows;
  std::size_t count = 0;
  for (std::size_t i : fit_idx) {
    const auto& f = records[i].features;
    require(f.dim(1) == C, ErrorKind::Format, "feature widths differ between clips");
    const std::size_t T = std::min(seq_len, f.dim(0));
    rows.insert(rows.end(), f.data().begin(), f.data().begin() + T * C);
    count += T;
  }
  auto s = scaler_fit(Tensor64(Shape{count, C}, std::move(rows)));
  for (double& v : s.mean) v = static_cast<float>(v);
  for (double& v : s.std) v = static_cast<float>(v);
  return s;
}

// [N, seq_len, C]: each clip scaled, truncated, and zero-padded at the end.
inline Dataset<float> assemble_speaker_dataset(const std::vector<FeatureRecord>& records,
                                               const FeatureScaler& scaler, std::size_t seq_len) {
  require(!records.empty(), ErrorKind::Argument, "no feature records");
  const std::size_t C = scaler.width();
  Dataset<float> d;
  d.x = Tensor(Shape{records.size(), seq_len, C});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& f = records[i].features;
    require(f.dim(1) == C, ErrorKind::Shape, "clip feature width does not match the scaler");
    const std::size_t T = std::min(seq_len, f.dim(0));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        d.x[(i * seq_len + t) * C + c] =
            static_cast<float>((f.at(t, c) - scaler.mean[c]) / scaler_divisor(scaler.std[c]));
    d.y.push_back(records[i].label);
  }
  return d;
}

struct SpeakerFeatures {
  LabeledData data;
  FeatureScaler scaler;
  std::size_t seq_len = 0;
  DatasetSplit split;
  std::vector<FeatureRecord> records;
};

// MFCC per clip, truncate/pad to the dataset-median length, scaler fitted on
// the training split only and applied to every clip.
inline SpeakerFeatures featurize_speaker_dataset(const std::filesystem::path& path, const MfccConfig& config,
                                                 const SplitSpec& split) {
  auto raw = load_speaker_records(path, config);
  SpeakerFeatures out;
  out.seq_len = median_length(raw.records);
  std::vector<std::size_t> labels;
  for (const auto& r : raw.records) labels.push_back(r.label);
  out.split = split_dataset(labels, split);
  out.scaler = fit_speaker_scaler(raw.records, out.split.train, out.seq_len);
  out.data.data = assemble_speaker_dataset(raw.records, out.scaler, out.seq_len);
  out.data.labels = raw.labels;
  out.data.diagnostics = raw.diagnostics;
  out.records = std::move(raw.records);
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

struct RunResult {
  TrainedModel model;
  FitResult fit;
  EvalReport report;
  std::vector<std::string> diagnostics;
};

inline LossKind task_loss(Task t) {
  switch (t) {
    case Task::Eye: return LossKind::Binary;
    case Task::Fer: return LossKind::Categorical;
    case Task::Speaker: return LossKind::SparseCategorical;
  }
  return LossKind::Categorical;
}

inline NetworkSpec build_task_model(const PipelineConfig& c, std::size_t classes, const Shape& sample) {
  switch (c.task) {
    case Task::Eye: return build_eye_model(sample[1], sample[2], c.arch);
    case Task::Fer: return build_fer_model(sample[1], sample[2], c.arch);
    case Task::Speaker: return build_speaker_model(sample[1], classes, sample[0], c.arch);
  }
  fail(ErrorKind::Argument, "unknown task");
}

// Per-image affine augmentation of an [N,1,H,W] batch.
inline BatchTransform<float> image_augmenter(const AugmentParams& params) {
  params.validate();
  return [params](const Tensor& batch, Prng& prng) {
    Tensor out = batch;
    const std::size_t hw = batch.dim(2) * batch.dim(3);
    for (std::size_t n = 0; n < batch.dim(0); ++n) {
      const auto img = affine_augment(tensor_image(batch, n), params, prng);
      std::copy(img.pixels.begin(), img.pixels.end(), out.data().begin() + n * hw);
    }
    return out;
  };
}

struct PreparedData {
  LabeledData all;
  DatasetSplit split;
  std::optional<FeatureScaler> scaler;
};

inline PreparedData prepare_data(const PipelineConfig& c) {
  PreparedData p;
  switch (c.task) {
    case Task::Eye:
      p.all = load_eye_dataset(c.data_path, c.image_size);
      break;
    case Task::Fer:
      p.all = load_fer_dataset(c.data_path);
      break;
    case Task::Speaker: {
      auto f = featurize_speaker_dataset(c.data_path, c.mfcc, c.split);
      p.all = std::move(f.data);
      p.split = std::move(f.split);
      p.scaler = std::move(f.scaler);
      return p;
    }
  }
  p.split = split_dataset(p.all.data.y, c.split);
  return p;
}

// split -> (optional augmentation) -> fit with the task loss -> evaluate on
// the test split.
inline RunResult run_training(const PipelineConfig& c,
                              std::function<void(const EpochRecord&)> on_epoch = {}) {
  require(c.epochs >= 1 && c.batch_size >= 1, ErrorKind::Config, "epochs and batch_size must be >= 1");
  auto prepared = prepare_data(c);
  const auto& all = prepared.all;
  require(!prepared.split.train.empty(), ErrorKind::Argument, "training split is empty");
  require(!prepared.split.test.empty(), ErrorKind::Argument, "test split is empty");

  const auto spec = build_task_model(c, all.labels.size(), all.data.x.shape().tail());
  Prng master(c.seed);
  Prng init_prng = master.split();
  Prng train_prng = master.split();
  Network<float> net(spec.layers, spec.sample_shape, init_prng);

  FitOptions opt;
  opt.loss = task_loss(c.task);
  opt.epochs = c.epochs;
  opt.batch_size = c.batch_size;
  opt.adam = c.adam;
  if (c.early_stopping) opt.early_stop = c.early_stop;
  opt.on_epoch = std::move(on_epoch);
  BatchTransform<float> augment;
  if (c.augment && c.task != Task::Speaker) augment = image_augmenter(c.augment_params);

  const auto train = all.data.subset(prepared.split.train);
  const auto val = all.data.subset(prepared.split.val);
  const auto test = all.data.subset(prepared.split.test);

  RunResult out;
  out.diagnostics = all.diagnostics;
  out.fit = fit(net, train, val, opt, train_prng, augment);
  out.report = evaluate(net, test, all.labels);
  out.model.task = c.task;
  out.model.spec = spec;
  out.model.params = net.params();
  out.model.labels = all.labels;
  out.model.scaler = prepared.scaler;
  out.model.config_snapshot = config_to_json(c).dump();
  return out;
}

enum class EvalSubset { Test, All };

// Detects which task a dataset file belongs to from its contents.
inline Task detect_dataset_task(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (is_feature_cache(bytes)) return Task::Speaker;
  const std::string text(bytes.begin(), bytes.end());
  if (is_fer_csv(text)) return Task::Fer;
  const auto entries = parse_manifest(text, path.parent_path());
  const auto ext = entries.front().path.extension().string();
  if (ext == ".wav" || ext == ".WAV") return Task::Speaker;
  if (ext == ".pgm" || ext == ".PGM") return Task::Eye;
  fail(ErrorKind::Format, "cannot tell the task of dataset '" + path.string() + "'");
}

// Evaluates a trained model on a dataset. With EvalSubset::Test the split from
// the model's own config is recomputed, reproducing the training run's report
// on the same data.
inline EvalReport evaluate_on_dataset(const TrainedModel& model, const std::filesystem::path& path,
                                      EvalSubset subset = EvalSubset::Test) {
  const Task task = detect_dataset_task(path);
  require(task == model.task, ErrorKind::Argument,
          "task mismatch: model is '" + task_name(model.task) + "' but dataset is '" + task_name(task) + "'");
  const auto cfg = model.config();
  Dataset<float> data;
  switch (task) {
    case Task::Eye:
      data = load_eye_dataset(path, model.spec.sample_shape[1], model.labels).data;
      break;
    case Task::Fer:
      data = load_fer_dataset(path).data;
      break;
    case Task::Speaker: {
      require(model.scaler.has_value(), ErrorKind::Format, "speaker model carries no feature scaler");
      auto raw = load_speaker_records(path, cfg.mfcc);
      // Map the dataset's label names onto the model's class order.
      for (auto& r : raw.records) r.label = static_cast<std::uint32_t>(label_index(model.labels, raw.labels.at(r.label)));
      data = assemble_speaker_dataset(raw.records, *model.scaler, model.spec.sample_shape[0]);
      break;
    }
  }
  if (subset == EvalSubset::Test) {
    const auto split = split_dataset(data.y, cfg.split);
    require(!split.test.empty(), ErrorKind::Argument, "test split is empty");
    data = data.subset(split.test);
  }
  return evaluate(model.network(), data, model.labels);
}

}  // namespace percept
