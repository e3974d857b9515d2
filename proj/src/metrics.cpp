#include "ufid/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <sstream>

#include "ufid/data.hpp"
#include "ufid/errors.hpp"
#include "ufid/model.hpp"

namespace ufid {

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::string ConfusionMatrix::to_csv(const std::vector<std::string>& class_names) const {
  auto name = [&](std::size_t c) {
    return c < class_names.size() ? class_names[c] : std::to_string(c);
  };
  std::ostringstream out;
  out << "true\\predicted";
  for (std::size_t p = 0; p < num_classes; ++p) out << ',' << name(p);
  out << '\n';
  for (std::size_t t = 0; t < num_classes; ++t) {
    out << name(t);
    for (std::size_t p = 0; p < num_classes; ++p) out << ',' << at(t, p);
    out << '\n';
  }
  return out.str();
}

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels,
                          std::size_t num_classes) {
  if (predictions.size() != labels.size()) {
    throw DimensionError("confusion: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predictions[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= num_classes ||
        static_cast<std::size_t>(p) >= num_classes) {
      throw DataError("confusion: sample " + std::to_string(i) + " has class (" +
                      std::to_string(t) + ", " + std::to_string(p) + ") outside [0, " +
                      std::to_string(num_classes) + ")");
    }
    ++cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
  }
  return cm;
}

ScoreReport scores(const ConfusionMatrix& cm) {
  const std::size_t n = cm.total();
  if (n == 0) throw UsageError("scores: confusion matrix is empty");
  const std::size_t k = cm.num_classes;
  ScoreReport r;
  std::size_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) trace += cm.at(c, c);
  r.accuracy = static_cast<double>(trace) / static_cast<double>(n);
  r.error_rate = 1.0 - r.accuracy;

  r.per_class_precision.resize(k);
  r.per_class_recall.resize(k);
  r.per_class_f1.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const auto tp = static_cast<double>(cm.at(c, c));
    if (col == 0 || row == 0) r.undefined_ratio = true;
    const double p = col ? tp / static_cast<double>(col) : 0.0;
    const double rc = row ? tp / static_cast<double>(row) : 0.0;
    r.per_class_precision[c] = p;
    r.per_class_recall[c] = rc;
    r.per_class_f1[c] = p + rc > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0;
  }
  const auto mean = [k](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(k);
  };
  r.macro_precision = mean(r.per_class_precision);
  r.macro_recall = mean(r.per_class_recall);
  r.macro_f1 = mean(r.per_class_f1);
  return r;
}

std::size_t dense_flops(std::size_t in, std::size_t out) { return 2 * in * out; }

namespace {

// Counting conventions (one multiply-add = 2 operations; activations free):
//   dense    2 * in * out
//   conv1d   2 * k * Cin * Cout * L_out
//   batchnorm 2 * C * L           (scale and shift)
//   LSTM     8 * T * H * (H + I)  (four gate mat-vecs)
//          + 8 * T * H            (gate biases, cell update, output gating)
std::size_t conv_flops(const EncoderClassifierConfig& c) {
  return 2 * c.kernel_size * 1 * c.cnn_channels * c.hidden_dim;
}

std::size_t lstm_flops(const EncoderClassifierConfig& c) {
  const std::size_t steps = c.hidden_dim, h = c.lstm_hidden, in = 1;
  return 8 * steps * h * (h + in) + 8 * steps * h;
}

}  // namespace

std::size_t encoder_flops(const EncoderClassifier& model) {
  const auto& c = model.config();
  return conv_flops(c) + 2 * c.cnn_channels * c.hidden_dim + lstm_flops(c) +
         dense_flops(c.fused_dim(), c.encoder_out);
}

std::size_t flops_estimate(const EncoderClassifier& model) {
  const auto& c = model.config();
  return dense_flops(c.input_dim, c.hidden_dim) + encoder_flops(model) +
         dense_flops(c.encoder_out, c.classifier_hidden) +
         dense_flops(c.classifier_hidden, c.num_classes);
}

std::size_t model_bytes(const EncoderClassifier& model, std::size_t bytes_per_value) {
  return parameter_counts(model).total * bytes_per_value;
}

ConfusionMatrix evaluate_confusion(EncoderClassifier& model, const SwarmDataset& dataset,
                                   std::size_t batch_size) {
  std::vector<int> preds;
  preds.reserve(dataset.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i) {
      rows.push_back(i);
    }
    const auto p = predict(model, dataset.gather_features(rows));
    preds.insert(preds.end(), p.begin(), p.end());
  }
  return confusion(preds, dataset.labels, model.config().num_classes);
}

ProfileReport profile_inference(EncoderClassifier& model, const SwarmDataset& dataset,
                                std::size_t warmup, std::size_t iters, std::size_t batch_size) {
  if (iters == 0) throw ConfigError("profile_inference needs at least one timed iteration");
  if (dataset.size() == 0) throw DataError("profile_inference needs a non-empty dataset");
  using clock = std::chrono::steady_clock;
  auto pass = [&] {
    for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
      std::vector<std::size_t> rows;
      for (std::size_t i = start; i < std::min(dataset.size(), start + batch_size); ++i) {
        rows.push_back(i);
      }
      (void)model.logits(dataset.gather_features(rows), nn::Mode::kEval);
    }
  };
  for (std::size_t i = 0; i < warmup; ++i) pass();
  std::vector<double> per_sample_ms;
  double total_s = 0.0;
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    pass();
    const double s = std::chrono::duration<double>(clock::now() - t0).count();
    total_s += s;
    per_sample_ms.push_back(1000.0 * s / static_cast<double>(dataset.size()));
  }
  std::sort(per_sample_ms.begin(), per_sample_ms.end());
  const std::size_t mid = per_sample_ms.size() / 2;
  ProfileReport r;
  r.latency_ms_per_sample = per_sample_ms.size() % 2
                                ? per_sample_ms[mid]
                                : 0.5 * (per_sample_ms[mid - 1] + per_sample_ms[mid]);
  r.throughput_samples_per_s =
      static_cast<double>(dataset.size() * iters) / std::max(total_s, 1e-12);
  r.trainable_params = parameter_counts(model).total;
  r.model_bytes = model_bytes(model);
  r.flops_per_forward = flops_estimate(model);
  return r;
}

}  // namespace ufid
