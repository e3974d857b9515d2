#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ufid/layers.hpp"
#include "ufid/tape.hpp"
#include "ufid/tensor.hpp"

namespace ufid {

struct EncoderClassifierConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 128;
  std::size_t cnn_channels = 16;
  std::size_t kernel_size = 3;
  std::size_t lstm_hidden = 128;
  std::size_t encoder_out = 64;
  std::size_t classifier_hidden = 32;
  std::size_t num_classes = 0;
  double theta = 0.05;
  bool straight_through = false;
  std::uint64_t seed = 0;

  std::size_t fused_dim() const { return cnn_channels + lstm_hidden; }
  // Throws ConfigError on non-positive dims, fewer than two classes, or a
  // non-positive threshold.
  void validate() const;

  friend bool operator==(const EncoderClassifierConfig&, const EncoderClassifierConfig&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered (name, tensor) sequence; the order is part of the wire contract.
using ParameterList = std::vector<NamedTensor>;

struct ParameterPartition {
  std::set<std::string> shared_names;
  std::set<std::string> local_names;
};

struct ParameterCounts {
  std::size_t shared = 0;
  std::size_t local = 0;
  std::size_t total = 0;
};

// Swarm-local input layer -> shared CNN/LSTM encoder -> swarm-local
// classifier. Parameters under "encoder." are federated; "input_layer." and
// "classifier." never leave the client.
class EncoderClassifier {
 public:
  explicit EncoderClassifier(const EncoderClassifierConfig& config);

  const EncoderClassifierConfig& config() const { return config_; }

  // Binds every parameter to `tape` and returns the [B x C] logits.
  Var forward(Tape& tape, const Tensor& batch, nn::Mode mode);
  // Logits without recording anything.
  Tensor logits(const Tensor& batch, nn::Mode mode = nn::Mode::kEval);

  // All trainable parameters in lexicographic name order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;

  const ParameterPartition& partition() const { return partition_; }
  ParameterList shared_parameters() const;
  // Replaces the encoder; throws PartitionError listing every offending name.
  void load_shared(const ParameterList& params);
  ParameterList all_parameters() const;
  // Replaces every parameter; names and shapes must match exactly.
  void load_all(const ParameterList& params);

  nn::BatchNormStats& batchnorm_stats() { return bn_stats_; }
  const nn::BatchNormStats& batchnorm_stats() const { return bn_stats_; }

  void zero_grad();

 private:
  Parameter& add(std::string name, Tensor value);

  EncoderClassifierConfig config_;
  std::map<std::string, Parameter, std::less<>> params_;
  ParameterPartition partition_;
  nn::BatchNormStats bn_stats_;
};

EncoderClassifier build_model(const EncoderClassifierConfig& config);

// Row-wise argmax; ties go to the smaller class index.
std::vector<int> argmax_rows(const Tensor& scores);
std::vector<int> predict(EncoderClassifier& model, const Tensor& batch);

ParameterCounts parameter_counts(const EncoderClassifier& model);

}  // namespace ufid
