// percept: featurize | train | eval | plot
//
// Exit codes: 0 ok, 2 configuration/usage error, 3 data error (missing or
// malformed input, task mismatch), 4 numerical failure during training.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "percept/config.hpp"
#include "percept/pipelines.hpp"

namespace fs = std::filesystem;
using namespace percept;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Numerical: return kExitNumerical;
    default: return kExitData;
  }
}

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

class Log {
 public:
  explicit Log(Verbosity v) : v_(v) {}
  void info(const std::string& msg) const {
    if (v_ != Verbosity::Quiet) std::cerr << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (v_ == Verbosity::Debug) std::cerr << "debug: " << msg << '\n';
  }
  static void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

 private:
  Verbosity v_;
};

RunConfig load_config(const Common& c) {
  require(!c.config.empty(), ErrorKind::Config, "--config is required");
  auto rc = load_run_config(c.config, c.seed);
  if (!c.out.empty()) rc.output_dir = c.out;
  if (c.quiet) rc.verbosity = Verbosity::Quiet;
  return rc;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create output directory '" + dir.string() + "': " + ec.message());
}

void write_report(const EvalReport& report, const fs::path& dir, const ReportFormats& formats) {
  if (formats.json) write_file_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
  if (formats.csv) write_file_text(dir / "confusion.csv", confusion_to_csv(report.confusion));
  if (formats.pgm) write_file_bytes(dir / "confusion.pgm", confusion_to_pgm(report.confusion));
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

int cmd_featurize(const Common& common) {
  const auto rc = load_config(common);
  const Log log(rc.verbosity);
  log.debug("resolved config: " + config_to_json(rc.pipeline).dump());
  const auto& c = rc.pipeline;
  require(c.task == Task::Speaker, ErrorKind::Config,
          "featurize needs a speaker task config (got '" + task_name(c.task) + "')");

  auto raw = load_speaker_records(c.data_path, c.mfcc);
  if (!raw.diagnostics.empty()) {
    for (const auto& d : raw.diagnostics) std::cerr << "error: " << d << '\n';
    return kExitData;
  }
  const std::size_t seq_len = median_length(raw.records);
  std::vector<std::size_t> labels;
  for (const auto& r : raw.records) labels.push_back(r.label);
  const auto split = split_dataset(labels, c.split);
  const auto scaler = fit_speaker_scaler(raw.records, split.train, seq_len);

  ensure_dir(rc.output_dir);
  const auto cache = rc.output_dir / "features.mfcc";
  write_file_bytes(cache, encode_feature_cache(raw.records));
  std::string names;
  for (const auto& l : raw.labels) names += l + "\n";
  write_file_text(labels_sidecar(cache), names);
  Tensor64 stats(Shape{2, scaler.width()});
  for (std::size_t k = 0; k < scaler.width(); ++k) {
    stats.at(0, k) = scaler.mean[k];
    stats.at(1, k) = scaler.std[k];
  }
  write_file_text(rc.output_dir / "scaler.csv", matrix_to_csv(stats));

  std::vector<std::size_t> counts(raw.labels.size());
  for (std::size_t y : labels) ++counts[y];
  for (std::size_t k = 0; k < counts.size(); ++k) std::cout << raw.labels[k] << ": " << counts[k] << '\n';
  log.info("wrote " + cache.string() + " (" + std::to_string(raw.records.size()) + " clips, median T = " +
           std::to_string(seq_len) + ")");
  return 0;
}

int cmd_train(const Common& common) {
  const auto rc = load_config(common);
  const Log log(rc.verbosity);
  log.debug("resolved config: " + config_to_json(rc.pipeline).dump());
  ensure_dir(rc.output_dir);
  const std::size_t epochs = rc.pipeline.epochs;
  auto result = run_training(rc.pipeline, [&](const EpochRecord& e) {
    log.info("epoch " + std::to_string(e.epoch) + "/" + std::to_string(epochs) + "  train_loss " +
             fixed6(e.train_loss) + "  train_acc " + fixed6(e.train_acc) + "  val_loss " + fixed6(e.val_loss) +
             "  val_acc " + fixed6(e.val_acc));
  });
  for (const auto& d : result.diagnostics) Log::warn(d);

  save_model(result.model, rc.output_dir / "model.prcp");
  write_file_text(rc.output_dir / "history.csv", history_to_csv(result.fit.history));
  write_report(result.report, rc.output_dir, rc.formats);

  if (result.fit.outcome == FitOutcome::NonFinite) {
    std::cerr << "error: training diverged: " << result.fit.diagnostic << '\n';
    return kExitNumerical;
  }
  if (result.fit.outcome == FitOutcome::EarlyStopped)
    log.info("early stop; restored weights from epoch " + std::to_string(result.fit.best_epoch));
  std::cout << "test accuracy " << fixed6(result.report.metrics.accuracy) << "  weighted F1 "
            << fixed6(result.report.metrics.weighted_f1) << '\n';
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& out,
             const std::string& split, bool quiet) {
  const Log log(quiet ? Verbosity::Quiet : Verbosity::Info);
  const auto model = load_model(model_path);
  const auto subset = split == "all" ? EvalSubset::All : EvalSubset::Test;
  const auto report = evaluate_on_dataset(model, data_path, subset);
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  ensure_dir(dir);
  write_report(report, dir, ReportFormats{});
  std::cout << "accuracy " << fixed6(report.metrics.accuracy) << "  macro F1 " << fixed6(report.metrics.macro_f1)
            << "  weighted F1 " << fixed6(report.metrics.weighted_f1) << '\n';
  log.info("wrote report to " + dir.string());
  return 0;
}

int cmd_plot(const std::string& wav, const std::string& out, bool quiet) {
  const Log log(quiet ? Verbosity::Quiet : Verbosity::Info);
  const auto audio = parse_wav(read_file_bytes(wav));
  const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  ensure_dir(dir);
  render_audio_plots(audio, MfccConfig{}, dir);
  log.info("wrote waveform, spectrogram and MFCC plots to " + dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"percept: biometric perception models (eye state, facial expression, speaker)"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "TOML run configuration")->required();
    sub->add_option("--out", common.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", common.seed, "Seed (overrides the config)");
    sub->add_flag("--quiet", common.quiet, "Only print results and errors");
  };
  auto* featurize = app.add_subcommand("featurize", "Extract MFCC features for a speaker dataset");
  add_common(featurize);
  auto* train = app.add_subcommand("train", "Train a model and evaluate it on the test split");
  add_common(train);

  std::string model_path, data_path, eval_out, split = "test";
  bool eval_quiet = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a saved model on a dataset");
  eval->add_option("--model", model_path, "Model file (model.prcp)")->required();
  eval->add_option("--data", data_path, "Dataset: manifest, FER CSV, or MFCC cache")->required();
  eval->add_option("--out", eval_out, "Report directory (default: current directory)");
  eval->add_option("--split", split, "Which samples to evaluate")->check(CLI::IsMember({"test", "all"}));
  eval->add_flag("--quiet", eval_quiet, "Only print results and errors");

  std::string wav, plot_out;
  bool plot_quiet = false;
  auto* plot = app.add_subcommand("plot", "Waveform, spectrogram and MFCC plots for one WAV file");
  plot->add_option("--wav", wav, "Input WAV (PCM16)")->required();
  plot->add_option("--out", plot_out, "Output directory (default: current directory)");
  plot->add_flag("--quiet", plot_quiet, "Only print errors");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*featurize) return cmd_featurize(common);
    if (*train) return cmd_train(common);
    if (*eval) return cmd_eval(model_path, data_path, eval_out, split, eval_quiet);
    if (*plot) return cmd_plot(wav, plot_out, plot_quiet);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitConfig;
}
