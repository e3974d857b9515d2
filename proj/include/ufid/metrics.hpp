#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ufid {

class EncoderClassifier;
struct SwarmDataset;

// counts[true][predicted].
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(std::size_t classes = 0)
      : num_classes(classes), counts(classes * classes, 0) {}

  std::size_t& at(std::size_t truth, std::size_t predicted) {
    return counts[truth * num_classes + predicted];
  }
  std::size_t at(std::size_t truth, std::size_t predicted) const {
    return counts[truth * num_classes + predicted];
  }
  std::size_t total() const;
  std::string to_csv(const std::vector<std::string>& class_names = {}) const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct ScoreReport {
  double accuracy = 0.0;
  double macro_recall = 0.0;
  double macro_precision = 0.0;
  double macro_f1 = 0.0;
  double error_rate = 0.0;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_f1;
  // Set when some class had no predictions or no true samples, so a 0/0
  // ratio was reported as 0.
  bool undefined_ratio = false;
};

struct ProfileReport {
  double latency_ms_per_sample = 0.0;
  double throughput_samples_per_s = 0.0;
  std::size_t trainable_params = 0;
  std::size_t model_bytes = 0;
  std::size_t flops_per_forward = 0;
};

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels,
                          std::size_t num_classes);
// Throws UsageError on an all-zero matrix.
ScoreReport scores(const ConfusionMatrix& cm);

// Multiply-add based operation count of one single-sample forward pass.
std::size_t dense_flops(std::size_t in, std::size_t out);
std::size_t flops_estimate(const EncoderClassifier& model);
// The encoder's share of flops_estimate; independent of swarm dims.
std::size_t encoder_flops(const EncoderClassifier& model);

// Bytes of parameter payload at `bytes_per_value` (f32 storage by default).
std::size_t model_bytes(const EncoderClassifier& model, std::size_t bytes_per_value = 4);

// Median per-sample latency over `iters` timed passes of the whole dataset
// (after `warmup` untimed ones). The model runs in eval mode.
ProfileReport profile_inference(EncoderClassifier& model, const SwarmDataset& dataset,
                                std::size_t warmup, std::size_t iters,
                                std::size_t batch_size = 256);

// Accuracy of `model` on `dataset` with its confusion matrix.
ConfusionMatrix evaluate_confusion(EncoderClassifier& model, const SwarmDataset& dataset,
                                   std::size_t batch_size = 256);

}  // namespace ufid
