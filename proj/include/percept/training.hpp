#pragma once

// Losses, the Adam optimizer, stratified splitting, early stopping,
// confusion matrices and classification metrics, and the mini-batch fit loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "percept/layers.hpp"

namespace percept {

inline constexpr double kProbClamp = 1e-7;

template <typename T>
struct LossResult {
  double value = 0.0;
  BasicTensor<T> grad;
};

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

// Mean of -[y ln p + (1-y) ln(1-p)] over the batch; grad is dL/dp.
template <typename T>
LossResult<T> binary_cross_entropy(const BasicTensor<T>& p, std::span<const std::size_t> y) {
  require(p.size() == y.size() && !y.empty(), ErrorKind::Shape, "binary CE: size mismatch");
  const double N = static_cast<double>(y.size());
  LossResult<T> r{0.0, BasicTensor<T>(p.shape())};
  accum_t sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    require(y[i] <= 1, ErrorKind::Argument, "binary CE labels must be 0 or 1");
    const double pi = clamp_prob(p[i]);
    const double yi = static_cast<double>(y[i]);
    sum += -(yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi));
    const bool clamped = p[i] < kProbClamp || p[i] > 1.0 - kProbClamp;
    r.grad[i] = clamped ? T(0) : static_cast<T>((pi - yi) / (pi * (1.0 - pi)) / N);
  }
  r.value = sum / N;
  return r;
}

namespace detail {

template <typename T>
void check_stochastic_rows(const BasicTensor<T>& p) {
  require(p.rank() == 2, ErrorKind::Shape, "cross-entropy expects [N,K] probabilities");
  const std::size_t K = p.dim(1);
  for (std::size_t n = 0; n < p.dim(0); ++n) {
    accum_t s = 0;
    for (std::size_t k = 0; k < K; ++k) s += p[n * K + k];
    if (!(std::abs(s - 1.0) <= 1e-5))
      fail(ErrorKind::Argument, "cross-entropy: row " + std::to_string(n) + " sums to " + std::to_string(s));
  }
}

}  // namespace detail

// Mean of -sum(y ln p). grad is the fused softmax + CE gradient with respect
// to the logits, (p - y) / N.
template <typename T>
LossResult<T> categorical_cross_entropy(const BasicTensor<T>& p, const BasicTensor<T>& y) {
  require(p.shape() == y.shape(), ErrorKind::Shape, "categorical CE: shape mismatch");
  detail::check_stochastic_rows(p);
  const std::size_t N = p.dim(0), K = p.dim(1);
  LossResult<T> r{0.0, BasicTensor<T>(p.shape())};
  accum_t total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    accum_t row = 0;
    for (std::size_t k = 0; k < K; ++k) row += -static_cast<accum_t>(y[n * K + k]) * std::log(clamp_prob(p[n * K + k]));
    total += row;
    for (std::size_t k = 0; k < K; ++k)
      r.grad[n * K + k] = static_cast<T>((static_cast<accum_t>(p[n * K + k]) - y[n * K + k]) / static_cast<accum_t>(N));
  }
  r.value = total / static_cast<double>(N);
  return r;
}

// Same value as categorical_cross_entropy with one-hot targets.
template <typename T>
LossResult<T> sparse_categorical_cross_entropy(const BasicTensor<T>& p, std::span<const std::size_t> y) {
  detail::check_stochastic_rows(p);
  const std::size_t N = p.dim(0), K = p.dim(1);
  require(y.size() == N, ErrorKind::Shape, "sparse CE: label count mismatch");
  LossResult<T> r{0.0, BasicTensor<T>(p.shape())};
  accum_t total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (y[n] >= K)
      fail(ErrorKind::Argument, "sparse CE: class index " + std::to_string(y[n]) + " out of range for K=" + std::to_string(K));
    accum_t row = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const accum_t yk = k == y[n] ? 1.0 : 0.0;
      row += -yk * std::log(clamp_prob(p[n * K + k]));
    }
    total += row;
    for (std::size_t k = 0; k < K; ++k)
      r.grad[n * K + k] = static_cast<T>((static_cast<accum_t>(p[n * K + k]) - (k == y[n] ? 1.0 : 0.0)) /
                                         static_cast<accum_t>(N));
  }
  r.value = total / static_cast<double>(N);
  return r;
}

template <typename T = float>
BasicTensor<T> one_hot_rows(std::span<const std::size_t> labels, std::size_t K) {
  BasicTensor<T> y(Shape{labels.size(), K});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    require(labels[n] < K, ErrorKind::Argument, "label out of range");
    y[n * K + labels[n]] = T(1);
  }
  return y;
}

enum class LossKind { Binary, Categorical, SparseCategorical };

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::Binary: return "binary_crossentropy";
    case LossKind::Categorical: return "categorical_crossentropy";
    case LossKind::SparseCategorical: return "sparse_categorical_crossentropy";
  }
  return "?";
}

// Loss on softmax outputs with the fused logit gradient. Binary runs as
// categorical CE over a two-way softmax.
template <typename T>
LossResult<T> softmax_loss(LossKind kind, const BasicTensor<T>& probs, std::span<const std::size_t> y) {
  switch (kind) {
    case LossKind::Binary:
      require(probs.dim(1) == 2, ErrorKind::Shape, "binary loss needs a 2-way softmax output");
      return categorical_cross_entropy(probs, one_hot_rows<T>(y, 2));
    case LossKind::Categorical:
      return categorical_cross_entropy(probs, one_hot_rows<T>(y, probs.dim(1)));
    case LossKind::SparseCategorical:
      return sparse_categorical_cross_entropy(probs, y);
  }
  fail(ErrorKind::Argument, "unknown loss kind");
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<BasicTensor<T>> m, v;

  explicit AdamState(AdamConfig c = {}) : config(c) {
    require(c.beta1 > 0 && c.beta1 < 1 && c.beta2 > 0 && c.beta2 < 1, ErrorKind::Argument,
            "Adam betas must lie in (0,1)");
    require(c.learning_rate > 0 && c.epsilon > 0, ErrorKind::Argument, "Adam lr and epsilon must be > 0");
  }
};

// One bias-corrected Adam update. params[i] and grads[i] pair up; the moment
// buffers are created on the first call and keyed by position afterwards.
template <typename T>
void adam_step(AdamState<T>& state, std::span<BasicTensor<T>* const> params,
               std::span<const BasicTensor<T>* const> grads) {
  require(params.size() == grads.size(), ErrorKind::Shape, "adam: params/grads count mismatch");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  require(state.m.size() == params.size(), ErrorKind::Shape, "adam: parameter list changed between steps");
  ++state.step;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    if (!(p.shape() == g.shape() && p.shape() == state.m[i].shape()))
      fail(ErrorKind::Shape, "adam: shape mismatch at tensor " + std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / bc1;
      const double vhat = vk / bc2;
      p[k] = static_cast<T>(p[k] - c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    require(train >= 0 && val >= 0 && test >= 0, ErrorKind::Argument, "split fractions must be >= 0");
    require(std::abs(train + val + test - 1.0) <= 1e-9, ErrorKind::Argument, "split fractions must sum to 1");
  }
};

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
};

// Stratified split: each class's indices are shuffled with the seeded PRNG
// (classes visited in ascending label order), then sliced into val = floor(f_val*n),
// test = floor(f_test*n), and the remainder to train.
inline DatasetSplit split_dataset(std::span<const std::size_t> labels, const SplitSpec& spec) {
  spec.validate();
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  require(labels.size() >= by_class.size() && !labels.empty(), ErrorKind::Argument,
          "split: dataset smaller than the number of classes");
  Prng prng(spec.seed);
  DatasetSplit out;
  for (auto& [label, idx] : by_class) {
    shuffle(idx.begin(), idx.end(), prng);
    const auto n = static_cast<double>(idx.size());
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val * n + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor(spec.test * n + 1e-9));
    const std::size_t n_train = idx.size() - n_val - n_test;
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + n_train);
    out.val.insert(out.val.end(), idx.begin() + n_train, idx.begin() + n_train + n_val);
    out.test.insert(out.test.end(), idx.begin() + n_train + n_val, idx.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Early stopping

enum class StopDecision { Continue, Stop };

struct EarlyStopConfig {
  std::size_t patience = 5;
  double min_delta = 0.0;
};

// Tracks the best validation loss and a snapshot of the parameters that
// produced it. Improvement means loss < best - min_delta; training stops once
// the number of non-improving epochs exceeds `patience`.
template <typename Snapshot>
class EarlyStopper {
 public:
  EarlyStopper(EarlyStopConfig config, Snapshot initial)
      : config_(config), best_params_(std::move(initial)) {}

  StopDecision update(double val_loss, const Snapshot& params) {
    ++epoch_;
    if (std::isnan(val_loss)) {
      diagnostic_ = "validation loss is NaN at epoch " + std::to_string(epoch_) +
                    "; restoring snapshot from epoch " + std::to_string(best_epoch_);
      return StopDecision::Stop;
    }
    if (val_loss < best_loss_ - config_.min_delta) {
      best_loss_ = val_loss;
      best_params_ = params;
      best_epoch_ = epoch_;
      strikes_ = 0;
      return StopDecision::Continue;
    }
    ++strikes_;
    return strikes_ > config_.patience ? StopDecision::Stop : StopDecision::Continue;
  }

  const Snapshot& best_params() const noexcept { return best_params_; }
  double best_loss() const noexcept { return best_loss_; }
  // 1-based epoch of the best snapshot; 0 means the initial parameters.
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t strikes() const noexcept { return strikes_; }
  const std::string& diagnostic() const noexcept { return diagnostic_; }

 private:
  EarlyStopConfig config_;
  Snapshot best_params_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t epoch_ = 0;
  std::size_t strikes_ = 0;
  std::string diagnostic_;
};

// ---------------------------------------------------------------------------
// Confusion matrix and metrics

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    require(classes >= 1, ErrorKind::Argument, "confusion matrix needs >= 1 class");
  }

  std::size_t classes() const noexcept { return k_; }
  // Rows are true classes, columns predicted classes.
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  void add(std::size_t truth, std::size_t pred) {
    if (truth >= k_ || pred >= k_)
      fail(ErrorKind::Argument, "label out of range for K=" + std::to_string(k_));
    ++counts_[truth * k_ + pred];
  }

  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }
  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t k = 0; k < k_; ++k) t += at(k, k);
    return t;
  }
  std::uint64_t support(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < k_; ++p) s += at(k, p);
    return s;
  }
  std::uint64_t predicted(std::size_t k) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < k_; ++t) s += at(t, k);
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix_build(std::span<const std::size_t> truth,
                                              std::span<const std::size_t> pred, std::size_t classes) {
  require(truth.size() == pred.size(), ErrorKind::Shape, "confusion: label vectors differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], pred[i]);
  return cm;
}

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::uint64_t support = 0;
};

struct Metrics {
  double accuracy = 0;
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0;
  double weighted_f1 = 0;
};

// Zero denominators yield 0. Weighted F1 weighs each class by its true support.
inline Metrics metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  require(total > 0, ErrorKind::Argument, "metrics of an empty confusion matrix");
  Metrics m;
  m.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  double f1_sum = 0, weighted = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    ClassMetrics c;
    const double tp = static_cast<double>(cm.at(k, k));
    const double pred = static_cast<double>(cm.predicted(k));
    c.support = cm.support(k);
    const double sup = static_cast<double>(c.support);
    c.precision = pred > 0 ? tp / pred : 0.0;
    c.recall = sup > 0 ? tp / sup : 0.0;
    c.f1 = c.precision + c.recall > 0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
    f1_sum += c.f1;
    weighted += c.f1 * sup;
    m.per_class.push_back(c);
  }
  m.macro_f1 = f1_sum / static_cast<double>(cm.classes());
  m.weighted_f1 = weighted / static_cast<double>(total);
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

template <typename T>
struct Dataset {
  BasicTensor<T> x;              // [N, ...sample shape]
  std::vector<std::size_t> y;    // class indices

  std::size_t size() const noexcept { return y.size(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d;
    if (idx.empty()) return d;
    d.x = x.gather(idx);
    for (std::size_t i : idx) d.y.push_back(y.at(i));
    return d;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

enum class FitOutcome { Completed, EarlyStopped, NonFinite };

struct FitOptions {
  LossKind loss = LossKind::SparseCategorical;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  AdamConfig adam;
  std::optional<EarlyStopConfig> early_stop;
  std::function<void(const EpochRecord&)> on_epoch;  // progress hook, called after each epoch
};

struct FitResult {
  std::vector<EpochRecord> history;
  FitOutcome outcome = FitOutcome::Completed;
  std::size_t optimizer_steps = 0;
  std::size_t best_epoch = 0;
  std::string diagnostic;
};

template <typename T>
using BatchTransform = std::function<BasicTensor<T>(const BasicTensor<T>&, Prng&)>;

template <typename T>
std::vector<BasicTensor<T>*> trainable_tensors(Network<T>& net) {
  std::vector<BasicTensor<T>*> out;
  for (auto& lp : net.params())
    for (auto& t : lp.tensors)
      if (t.trainable) out.push_back(&t.value);
  return out;
}

template <typename T>
std::vector<const BasicTensor<T>*> trainable_grads(const Network<T>& net, const Gradients<T>& g) {
  std::vector<const BasicTensor<T>*> out;
  for (std::size_t l = 0; l < g.params.size(); ++l)
    for (std::size_t k = 0; k < g.params[l].size(); ++k)
      if (net.params()[l].tensors[k].trainable) out.push_back(&g.params[l][k]);
  return out;
}

// Inference-mode class probabilities [N,K], evaluated in chunks.
template <typename T>
BasicTensor<T> predict_batched(const Network<T>& net, const BasicTensor<T>& x, std::size_t batch_size = 256) {
  const std::size_t N = x.dim(0);
  std::vector<T> out;
  Shape out_shape;
  for (std::size_t b = 0; b < N; b += batch_size) {
    const std::size_t n = std::min(batch_size, N - b);
    auto y = net.predict(x.rows(b, n));
    out.insert(out.end(), y.data().begin(), y.data().end());
    out_shape = y.shape();
  }
  return BasicTensor<T>(out_shape.with_batch(N), std::move(out));
}

template <typename T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& probs) {
  const std::size_t K = probs.dim(1);
  std::vector<std::size_t> pred(probs.dim(0));
  for (std::size_t n = 0; n < pred.size(); ++n)
    pred[n] = argmax(std::span<const T>(probs.data().data() + n * K, K));
  return pred;
}

template <typename T>
std::pair<double, double> evaluate_loss_accuracy(const Network<T>& net, const Dataset<T>& data, LossKind loss) {
  if (data.size() == 0) return {0.0, 0.0};
  const auto probs = predict_batched(net, data.x);
  const double l = softmax_loss(loss, probs, data.y).value;
  const auto pred = argmax_rows(probs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.y[i];
  return {l, static_cast<double>(hit) / static_cast<double>(pred.size())};
}

// Mini-batch training with Adam. Each epoch reshuffles the training set with
// `prng`, runs forward/backward/update per batch (a trailing batch of one
// sample is merged into the previous batch), then evaluates the validation
// set in inference mode. Early stopping, when configured, watches the
// validation loss (training loss if there is no validation data) and restores
// the best snapshot on stop. A non-finite training loss ends the run with
// FitOutcome::NonFinite rather than throwing.
template <typename T>
FitResult fit(Network<T>& net, const Dataset<T>& train, const Dataset<T>& val, const FitOptions& opt,
              Prng& prng, const BatchTransform<T>& augment = {}) {
  require(train.size() > 0, ErrorKind::Argument, "fit: empty training set");
  require(opt.batch_size >= 1 && opt.epochs >= 1, ErrorKind::Argument, "fit: batch_size and epochs must be >= 1");
  require(net.ends_with_softmax(), ErrorKind::Argument, "fit: network must end with Softmax");
  const std::size_t fused_end = net.specs().size() - 1;

  AdamState<T> adam(opt.adam);
  using Snapshot = std::vector<LayerParams<T>>;
  std::optional<EarlyStopper<Snapshot>> stopper;
  if (opt.early_stop) stopper.emplace(*opt.early_stop, net.params());

  FitResult result;
  const std::size_t N = train.size();
  std::vector<std::size_t> order(N);
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order.begin(), order.end(), prng);

    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t b = 0; b < N; b += opt.batch_size) batches.emplace_back(b, std::min(opt.batch_size, N - b));
    if (batches.size() > 1 && batches.back().second == 1) {
      batches[batches.size() - 2].second += 1;
      batches.pop_back();
    }

    accum_t loss_sum = 0;
    std::size_t hits = 0;
    bool finite = true;
    for (const auto& [begin, count] : batches) {
      std::span<const std::size_t> idx(order.data() + begin, count);
      auto batch = train.subset(idx);
      if (augment) batch.x = augment(batch.x, prng);
      ForwardCache<T> cache;
      const auto probs = net.forward(batch.x, Mode::Train, &prng, &cache);
      const bool probs_finite =
          std::all_of(probs.data().begin(), probs.data().end(), [](T v) { return std::isfinite(v); });
      if (!probs_finite) {
        finite = false;
        break;
      }
      const auto loss = softmax_loss(opt.loss, probs, batch.y);
      if (!std::isfinite(loss.value)) {
        finite = false;
        break;
      }
      loss_sum += loss.value * static_cast<double>(count);
      const auto pred = argmax_rows(probs);
      for (std::size_t i = 0; i < count; ++i) hits += pred[i] == batch.y[i];
      const auto grads = net.backward(cache, loss.grad, fused_end);
      auto params = trainable_tensors(net);
      auto gs = trainable_grads(net, grads);
      adam_step<T>(adam, params, gs);
      ++result.optimizer_steps;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = finite ? loss_sum / static_cast<double>(N) : std::numeric_limits<double>::quiet_NaN();
    rec.train_acc = static_cast<double>(hits) / static_cast<double>(N);
    if (finite && val.size() > 0) {
      std::tie(rec.val_loss, rec.val_acc) = evaluate_loss_accuracy(net, val, opt.loss);
    } else if (!finite) {
      rec.val_loss = std::numeric_limits<double>::quiet_NaN();
    } else {
      rec.val_loss = rec.train_loss;
      rec.val_acc = rec.train_acc;
    }
    result.history.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);

    if (!finite || !std::isfinite(rec.val_loss)) {
      result.outcome = FitOutcome::NonFinite;
      result.diagnostic = "non-finite loss at epoch " + std::to_string(epoch);
      if (stopper) {
        stopper->update(std::numeric_limits<double>::quiet_NaN(), net.params());
        net.params() = stopper->best_params();
        result.best_epoch = stopper->best_epoch();
        result.diagnostic = stopper->diagnostic();
      }
      return result;
    }
    if (stopper && stopper->update(rec.val_loss, net.params()) == StopDecision::Stop) {
      net.params() = stopper->best_params();
      result.outcome = FitOutcome::EarlyStopped;
      result.best_epoch = stopper->best_epoch();
      return result;
    }
  }
  result.best_epoch = stopper ? stopper->best_epoch() : opt.epochs;
  return result;
}

}  // namespace percept
