#include <gtest/gtest.h>

#include <filesystem>

#include "gradcheck.hpp"
#include "percept/pipelines.hpp"
#include "synth.hpp"

using namespace percept;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("percept_pipelines_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void expect_simplex_rows(const Tensor& y) {
  const std::size_t K = y.dim(1);
  for (std::size_t n = 0; n < y.dim(0); ++n) {
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      EXPECT_GE(y.at(n, k), 0.0f);
      s += y.at(n, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-5);
  }
}

Network<float> build(const NetworkSpec& s, std::uint64_t seed = 1) {
  Prng prng(seed);
  return Network<float>(s.layers, s.sample_shape, prng);
}

std::size_t count_params_of(const Network<float>& net, std::size_t layer) {
  std::size_t n = 0;
  for (const auto& t : net.params()[layer].tensors)
    if (t.trainable) n += t.value.size();
  return n;
}

// Small speaker run: 3 tones x 10 clips, tiny LSTM.
PipelineConfig tiny_speaker_config(const fs::path& dir) {
  auto c = default_config(Task::Speaker);
  c.data_path = synth::write_speaker_set(dir, 10, 5, {150.0, 300.0, 600.0});
  c.epochs = 2;
  c.batch_size = 8;
  c.seed = 9;
  c.split.seed = 9;
  c.arch.lstm_units = 8;
  c.arch.dense_units = 8;
  return c;
}

}  // namespace

TEST(EyeModel, ShapeSimplexAndParameterCount) {
  auto net = build(build_eye_model());
  Prng prng(2);
  const auto y = net.predict(prng_uniform<float>(prng, Shape{4, 1, 64, 64}, 0, 1));
  EXPECT_EQ(y.shape(), (Shape{4, 2}));
  expect_simplex_rows(y);
  const std::size_t expected = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (16 * 16 * 32 * 64 + 64) + (64 * 2 + 2);
  EXPECT_EQ(expected, 529282u);
  EXPECT_EQ(net.parameter_count(), expected);
}

TEST(FerModel, ShapeLayersAndDeterministicInference) {
  const auto spec = build_fer_model();
  const auto has = [&](auto tag) {
    return std::any_of(spec.layers.begin(), spec.layers.end(),
                       [](const LayerSpec& l) { return std::holds_alternative<decltype(tag)>(l); });
  };
  EXPECT_TRUE(has(layer::BatchNorm{}));
  EXPECT_TRUE(has(layer::Dropout{}));
  auto net = build(spec);
  Prng prng(3);
  const auto x = prng_uniform<float>(prng, Shape{3, 1, 48, 48}, 0, 1);
  const auto y = net.predict(x);
  EXPECT_EQ(y.shape(), (Shape{3, 7}));
  expect_simplex_rows(y);
  EXPECT_EQ(net.predict(x), y);
}

TEST(SpeakerModel, ShapeAndParameterCount) {
  auto net = build(build_speaker_model());
  EXPECT_EQ(count_params_of(net, 0), 72704u);
  EXPECT_EQ(count_params_of(net, 0), 4u * (13 * 128 + 128 * 128 + 128));
  Prng prng(4);
  const auto y = net.predict(prng_uniform<float>(prng, Shape{2, 98, 13}, -2, 2));
  EXPECT_EQ(y.shape(), (Shape{2, 5}));
  expect_simplex_rows(y);
  auto one = build(build_speaker_model(13, 5, 1));
  expect_simplex_rows(one.predict(prng_uniform<float>(prng, Shape{2, 1, 13}, -2, 2)));
  EXPECT_THROW(build_speaker_model(13, 1), Error);
}

TEST(PipelineGradients, EyeNetwork) {
  const auto s = build_eye_model(8, 8);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = gradcheck::check(s.layers, s.sample_shape, 2, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    EXPECT_LT(r.skipped, r.checked);
  }
}

TEST(PipelineGradients, FerNetwork) {
  const auto s = build_fer_model(8, 8);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = gradcheck::check(s.layers, s.sample_shape, 2, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    EXPECT_LT(r.skipped, r.checked);
  }
}

TEST(PipelineGradients, SpeakerNetwork) {
  const auto s = build_speaker_model(13, 5, 3);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto r = gradcheck::check(s.layers, s.sample_shape, 2, seed);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

TEST(BinaryLoss, TwoWaySoftmaxMatchesBinaryCrossEntropy) {
  Prng prng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + prng.below(10);
    const auto p = softmax(prng_uniform<double>(prng, Shape{n, 2}, -4, 4));
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = prng.below(2);
    Tensor64 p1(Shape{n});
    for (std::size_t i = 0; i < n; ++i) p1[i] = p.at(i, 1);
    const auto two_way = softmax_loss(LossKind::Binary, p, y);
    EXPECT_NEAR(two_way.value, binary_cross_entropy(p1, y).value, 1e-12);
    EXPECT_EQ(two_way.value, softmax_loss(LossKind::Categorical, p, y).value);
    EXPECT_EQ(argmax_rows(p), argmax_rows(p));
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(argmax_rows(p)[i], p1[i] > 0.5 ? 1u : 0u);
  }
}

TEST(ModelFile, RoundTripForwardsIdentically) {
  TrainedModel m;
  m.task = Task::Eye;
  m.spec = build_eye_model(16, 16);
  auto net = build(m.spec, 7);
  m.params = net.params();
  m.labels = {"closed", "open"};
  m.config_snapshot = config_to_json(default_config(Task::Eye)).dump();
  const auto bytes = encode_model(m);
  const auto back = decode_model(bytes);
  EXPECT_EQ(back.labels, m.labels);
  EXPECT_EQ(back.spec.layers, m.spec.layers);
  EXPECT_EQ(encode_model(back), bytes);
  Prng prng(8);
  const auto x = prng_uniform<float>(prng, Shape{3, 1, 16, 16}, 0, 1);
  EXPECT_EQ(back.network().predict(x), net.predict(x));

  const auto dir = scratch("model");
  save_model(m, dir / "m.prcp");
  EXPECT_EQ(read_file_bytes(dir / "m.prcp"), bytes);
  EXPECT_EQ(encode_model(load_model(dir / "m.prcp")), bytes);
}

TEST(ModelFile, ScalerRoundTrip) {
  TrainedModel m;
  m.task = Task::Speaker;
  m.spec = build_speaker_model(4, 3, 5, {.conv_filters = {}, .dense_units = 4, .dropout = {}, .lstm_units = 4});
  m.params = build(m.spec).params();
  m.labels = {"a", "b", "c"};
  m.scaler = FeatureScaler{{0.5, -1.25, 2, 3}, {1, 2, 0.25, 4}};
  m.config_snapshot = "{}";
  const auto back = decode_model(encode_model(m));
  ASSERT_TRUE(back.scaler);
  EXPECT_EQ(back.scaler->mean, m.scaler->mean);
  EXPECT_EQ(back.scaler->std, m.scaler->std);
}

TEST(ModelFile, StructuredErrors) {
  TrainedModel m;
  m.task = Task::Eye;
  m.spec = build_eye_model(8, 8);
  m.params = build(m.spec).params();
  m.labels = {"closed", "open"};
  const auto bytes = encode_model(m);
  auto expect_format = [](const Bytes& b, const std::string& needle) {
    try {
      decode_model(b);
      ADD_FAILURE() << "decoded a corrupt model";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Format);
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
    expect_format(Bytes(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut)), "model");
  auto v999 = bytes;
  v999[4] = 0xE7;
  v999[5] = 0x03;
  expect_format(v999, "unsupported version 999");
  auto magic = bytes;
  magic[0] = 'X';
  expect_format(magic, "bad magic");
  auto labels = m;
  labels.labels.push_back("extra");
  expect_format(encode_model(labels), "label count");
  auto params = m;
  params.params[0].tensors[0].value = Tensor(Shape{16, 1, 3, 2});
  expect_format(encode_model(params), "inconsistent parameters");
  auto trailing = bytes;
  trailing.push_back(0);
  expect_format(trailing, "trailing");
}

TEST(Config, JsonRoundTrip) {
  auto c = default_config(Task::Fer);
  c.data_path = "/data/fer.csv";
  c.seed = 123456789012345ULL;
  c.arch.conv_filters = std::vector<std::size_t>{4, 8};
  c.arch.dropout = 0.25;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"task":"eye"})")), Error);
  EXPECT_THROW(parse_task("audio"), Error);
}

TEST(Config, Defaults) {
  const auto fer = default_config(Task::Fer);
  EXPECT_EQ(fer.epochs, 20u);
  EXPECT_EQ(fer.batch_size, 64u);
  const auto spk = default_config(Task::Speaker);
  EXPECT_TRUE(spk.early_stopping);
  EXPECT_EQ(spk.early_stop.patience, 5u);
  EXPECT_TRUE(default_config(Task::Eye).augment);
}

TEST(Reports, CsvPgmAndHistoryFormats) {
  const std::vector<std::size_t> t{0, 0, 1, 1, 2}, p{0, 1, 1, 1, 0};
  const auto cm = confusion_matrix_build(t, p, 3);
  EXPECT_EQ(confusion_to_csv(cm), "1,1,0\n0,2,0\n1,0,0\n");
  const auto img = load_pgm(confusion_to_pgm(cm));
  EXPECT_EQ(img.width, 96u);
  EXPECT_EQ(img.height, 96u);
  EXPECT_NEAR(img.at(0, 0), 128.0f / 255, 1e-6);
  EXPECT_EQ(img.at(32 + 5, 32 + 5), 1.0f);
  EXPECT_EQ(img.at(64 + 1, 64 + 1), 0.0f);
  const auto h = history_to_csv({{1, 0.5, 0.25, 0.75, 1.0 / 3}});
  EXPECT_EQ(h, "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.500000,0.250000,0.750000,0.333333\n");
}

TEST(Reports, JsonConsistentWithConfusion) {
  EvalReport r;
  r.labels = {"a", "b"};
  r.confusion = confusion_matrix_build(std::vector<std::size_t>{0, 0, 1, 1}, std::vector<std::size_t>{0, 1, 1, 1}, 2);
  r.metrics = metrics_from_confusion(r.confusion);
  const auto j = report_to_json(r);
  EXPECT_EQ(j["accuracy"].get<double>(), 0.75);
  EXPECT_EQ(j["total"].get<int>(), 4);
  EXPECT_EQ(j["confusion"][0][1].get<int>(), 1);
  EXPECT_EQ(j["per_class"][1]["label"], "b");
}

TEST(SpeakerFeatures, ShapesScalingAndLeakageGuard) {
  const auto dir = scratch("spk_features");
  const auto manifest = synth::write_speaker_set(dir, 8, 3, {150.0, 300.0, 600.0});
  const SplitSpec split{0.5, 0.25, 0.25, 4};
  const auto f = featurize_speaker_dataset(manifest, MfccConfig{}, split);
  EXPECT_EQ(f.data.data.x.shape(), (Shape{24, 98, 13}));
  EXPECT_EQ(f.seq_len, 98u);
  EXPECT_EQ(f.data.labels, (std::vector<std::string>{"spk0", "spk1", "spk2"}));
  // All clips are 98 frames, so no padding: every row is real data.
  for (std::size_t c = 0; c < 13; ++c) {
    double m = 0;
    for (std::size_t i : f.split.train)
      for (std::size_t t = 0; t < 98; ++t) m += f.data.data.x[(i * 98 + t) * 13 + c];
    m /= static_cast<double>(f.split.train.size() * 98);
    EXPECT_LT(std::abs(m), 1e-6) << "coefficient " << c;
  }
  // Dropping the test clips entirely leaves the fitted scaler unchanged.
  std::vector<FeatureRecord> kept;
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < f.records.size(); ++i) {
    if (std::find(f.split.test.begin(), f.split.test.end(), i) != f.split.test.end()) continue;
    if (std::find(f.split.train.begin(), f.split.train.end(), i) != f.split.train.end()) train_idx.push_back(kept.size());
    kept.push_back(f.records[i]);
  }
  const auto refit = fit_speaker_scaler(kept, train_idx, f.seq_len);
  EXPECT_EQ(refit.mean, f.scaler.mean);
  EXPECT_EQ(refit.std, f.scaler.std);
}

TEST(SpeakerFeatures, PaddingAndTruncation) {
  std::vector<FeatureRecord> recs{{0, Tensor64(Shape{2, 1}, {1.0, 3.0})}, {1, Tensor64(Shape{4, 1}, {5, 6, 7, 8})},
                                  {1, Tensor64(Shape{3, 1}, {1, 1, 1})}};
  EXPECT_EQ(median_length(recs), 3u);
  const FeatureScaler s{{1.0}, {2.0}};
  const auto d = assemble_speaker_dataset(recs, s, 3);
  EXPECT_EQ(d.x.vec(), (std::vector<float>{0, 1, 0, 2, 2.5f, 3, 0, 0, 0}));
  EXPECT_EQ(d.y, (std::vector<std::size_t>{0, 1, 1}));
}

TEST(SpeakerFeatures, UnreadableClipSkippedEmptyClassFails) {
  const auto dir = scratch("spk_bad");
  const auto manifest = synth::write_speaker_set(dir, 2, 3, {150.0, 300.0});
  write_file_text(manifest, read_file_text(manifest) + "wav/missing.wav,spk1\n");
  const auto r = load_speaker_records(manifest, MfccConfig{});
  EXPECT_EQ(r.records.size(), 4u);
  ASSERT_EQ(r.diagnostics.size(), 1u);
  EXPECT_NE(r.diagnostics[0].find("missing.wav"), std::string::npos);
  write_file_text(manifest, read_file_text(manifest) + "wav/gone.wav,spk9\n");
  EXPECT_THROW(load_speaker_records(manifest, MfccConfig{}), Error);
}

TEST(RunTraining, DeterministicAndEvalReproducesReport) {
  const auto dir = scratch("run");
  const auto c = tiny_speaker_config(dir);
  std::size_t epochs_seen = 0;
  const auto a = run_training(c, [&](const EpochRecord&) { ++epochs_seen; });
  const auto b = run_training(c);
  EXPECT_EQ(epochs_seen, a.fit.history.size());
  EXPECT_LE(a.fit.history.size(), c.epochs);
  EXPECT_EQ(encode_model(a.model), encode_model(b.model));
  EXPECT_EQ(report_to_json(a.report), report_to_json(b.report));

  const auto reloaded = decode_model(encode_model(a.model));
  const auto again = evaluate_on_dataset(reloaded, c.data_path, EvalSubset::Test);
  EXPECT_EQ(report_to_json(again), report_to_json(a.report));
  EXPECT_EQ(evaluate_on_dataset(reloaded, c.data_path, EvalSubset::All).confusion.total(), 30u);
}

TEST(RunTraining, TaskMismatchAndDetection) {
  const auto dir = scratch("mismatch");
  const auto fer = synth::write_fer_set(dir / "fer", 1, 2);
  const auto eye = synth::write_eye_set(dir / "eye", 4, 2, 16);
  const auto spk = synth::write_speaker_set(dir / "spk", 1, 2, {200.0, 400.0});
  EXPECT_EQ(detect_dataset_task(fer), Task::Fer);
  EXPECT_EQ(detect_dataset_task(eye), Task::Eye);
  EXPECT_EQ(detect_dataset_task(spk), Task::Speaker);

  TrainedModel m;
  m.task = Task::Fer;
  m.spec = build_fer_model(48, 48, {.conv_filters = std::vector<std::size_t>{2}, .dense_units = 4, .dropout = {}, .lstm_units = {}});
  m.params = build(m.spec).params();
  m.labels.assign(kFerEmotions.begin(), kFerEmotions.end());
  m.config_snapshot = config_to_json(default_config(Task::Fer)).dump();
  try {
    evaluate_on_dataset(m, spk);
    FAIL() << "expected a task mismatch";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Argument);
    EXPECT_NE(std::string(e.what()).find("task mismatch"), std::string::npos);
  }
}

TEST(RunTraining, EmptySplitsRejected) {
  const auto dir = scratch("empty_split");
  auto c = tiny_speaker_config(dir);
  c.split = {1.0, 0.0, 0.0, 1};
  EXPECT_THROW(run_training(c), Error);
}
