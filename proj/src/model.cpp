#include "ufid/model.hpp"

#include <algorithm>
#include <cmath>

#include "ufid/errors.hpp"
#include "ufid/rng.hpp"

namespace ufid {

void EncoderClassifierConfig::validate() const {
  const std::pair<const char*, std::size_t> dims[] = {
      {"input_dim", input_dim},       {"hidden_dim", hidden_dim},
      {"cnn_channels", cnn_channels}, {"kernel_size", kernel_size},
      {"lstm_hidden", lstm_hidden},   {"encoder_out", encoder_out},
      {"classifier_hidden", classifier_hidden}};
  for (const auto& [name, value] : dims) {
    if (value == 0) throw ConfigError(std::string("model ") + name + " must be positive");
  }
  if (num_classes < 2) {
    throw ConfigError("model num_classes must be at least 2, got " + std::to_string(num_classes));
  }
  if (!(theta > 0.0) || !std::isfinite(theta)) {
    throw ConfigError("model theta must be positive, got " + std::to_string(theta));
  }
}

namespace {

Tensor uniform_init(const Shape& shape, std::size_t fan_in, std::uint64_t seed,
                    std::string_view name) {
  SplitMix64 rng(mix_seed(seed, hash_name(name)));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

EncoderClassifier::EncoderClassifier(const EncoderClassifierConfig& config) : config_(config) {
  config_.validate();
  const auto& c = config_;
  const std::uint64_t s = c.seed;
  const std::size_t hidden = c.lstm_hidden;
  const std::size_t z_dim = hidden + 1;  // [h_{t-1}; x_t], scalar steps

  add("input_layer.weight", uniform_init({c.hidden_dim, c.input_dim}, c.input_dim, s,
                                         "input_layer.weight"));
  add("input_layer.bias", Tensor({c.hidden_dim}));

  add("encoder.conv.weight", uniform_init({c.cnn_channels, 1, c.kernel_size}, c.kernel_size, s,
                                          "encoder.conv.weight"));
  add("encoder.conv.bias", Tensor({c.cnn_channels}));
  add("encoder.bn.gamma", Tensor({c.cnn_channels}, 1.0));
  add("encoder.bn.beta", Tensor({c.cnn_channels}));
  for (const char* gate : {"f", "i", "o", "c"}) {
    const std::string w = std::string("encoder.lstm.W_") + gate;
    add(w, uniform_init({hidden, z_dim}, z_dim, s, w));
    add(std::string("encoder.lstm.b_") + gate, Tensor({hidden}, gate[0] == 'f' ? 1.0 : 0.0));
  }
  add("encoder.fusion.weight", uniform_init({c.encoder_out, c.fused_dim()}, c.fused_dim(), s,
                                            "encoder.fusion.weight"));
  add("encoder.fusion.bias", Tensor({c.encoder_out}));

  add("classifier.fc1.weight", uniform_init({c.classifier_hidden, c.encoder_out}, c.encoder_out,
                                            s, "classifier.fc1.weight"));
  add("classifier.fc1.bias", Tensor({c.classifier_hidden}));
  add("classifier.out.weight", uniform_init({c.num_classes, c.classifier_hidden},
                                            c.classifier_hidden, s, "classifier.out.weight"));
  add("classifier.out.bias", Tensor({c.num_classes}));

  bn_stats_ = nn::BatchNormStats(c.cnn_channels);
}

Parameter& EncoderClassifier::add(std::string name, Tensor value) {
  if (name.starts_with("encoder.")) {
    partition_.shared_names.insert(name);
  } else {
    partition_.local_names.insert(name);
  }
  auto [it, inserted] = params_.try_emplace(name, name, std::move(value));
  if (!inserted) throw ConfigError("duplicate parameter " + name);
  return it->second;
}

Var EncoderClassifier::forward(Tape& tape, const Tensor& batch, nn::Mode mode) {
  if (batch.rank() != 2 || batch.dim(1) != config_.input_dim) {
    throw DimensionError("model expects input width " + std::to_string(config_.input_dim) +
                         ", got batch " + batch.shape_string());
  }
  const nn::ReteluOptions act{config_.theta, config_.straight_through};
  const std::size_t rows = batch.dim(0);
  const std::size_t d = config_.hidden_dim;
  auto p = [&](std::string_view name) { return tape.parameter(parameter(name)); };

  const Var x = tape.constant(batch);
  const Var h = nn::retelu(nn::dense(x, p("input_layer.weight"), p("input_layer.bias")), act);

  // CNN path: h as a one-channel sequence of length D.
  Var cnn = nn::conv1d(nn::reshape(h, {rows, 1, d}), p("encoder.conv.weight"),
                       p("encoder.conv.bias"), nn::Padding::kSame);
  cnn = nn::batchnorm1d(cnn, p("encoder.bn.gamma"), p("encoder.bn.beta"), bn_stats_, mode);
  cnn = nn::global_max_pool(nn::retelu(cnn, act));

  // LSTM path: the same h as D scalar time steps.
  nn::LstmWeights lw{p("encoder.lstm.W_f"), p("encoder.lstm.W_i"), p("encoder.lstm.W_o"),
                     p("encoder.lstm.W_c"), p("encoder.lstm.b_f"), p("encoder.lstm.b_i"),
                     p("encoder.lstm.b_o"), p("encoder.lstm.b_c")};
  const Var seq = nn::lstm(nn::reshape(h, {rows, d, 1}), lw);

  const Var fused = nn::concat_columns(cnn, seq);
  const Var z = nn::retelu(nn::dense(fused, p("encoder.fusion.weight"), p("encoder.fusion.bias")),
                           act);

  const Var y1 = nn::dense(z, p("classifier.fc1.weight"), p("classifier.fc1.bias"));
  return nn::dense(y1, p("classifier.out.weight"), p("classifier.out.bias"));
}

Tensor EncoderClassifier::logits(const Tensor& batch, nn::Mode mode) {
  Tape tape(false);
  return forward(tape, batch, mode).value();
}

std::vector<Parameter*> EncoderClassifier::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& [name, param] : params_) out.push_back(&param);
  return out;
}

std::vector<const Parameter*> EncoderClassifier::parameters() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const auto& [name, param] : params_) out.push_back(&param);
  return out;
}

Parameter& EncoderClassifier::parameter(std::string_view name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw PartitionError("unknown parameter " + std::string(name));
  return it->second;
}

const Parameter& EncoderClassifier::parameter(std::string_view name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw PartitionError("unknown parameter " + std::string(name));
  return it->second;
}

ParameterList EncoderClassifier::shared_parameters() const {
  ParameterList out;
  for (const auto& name : partition_.shared_names) {
    out.push_back({name, params_.find(name)->second.value});
  }
  return out;
}

namespace {

void load_into(std::map<std::string, Parameter, std::less<>>& params,
               const std::set<std::string>& expected, const ParameterList& incoming,
               const char* what) {
  std::vector<std::string> offenders;
  std::set<std::string> seen;
  for (const auto& [name, value] : incoming) {
    auto it = params.find(name);
    if (!expected.contains(name) || it == params.end()) {
      offenders.push_back(name + " (unexpected)");
    } else if (!it->second.value.same_shape(value)) {
      offenders.push_back(name + " (shape " + value.shape_string() + ", expected " +
                          it->second.value.shape_string() + ")");
    } else if (!seen.insert(name).second) {
      offenders.push_back(name + " (duplicate)");
    }
  }
  for (const auto& name : expected) {
    if (!seen.contains(name) &&
        std::none_of(incoming.begin(), incoming.end(),
                     [&](const NamedTensor& t) { return t.name == name; })) {
      offenders.push_back(name + " (missing)");
    }
  }
  if (!offenders.empty()) {
    std::string msg = std::string(what) + " mismatch:";
    for (const auto& o : offenders) msg += " " + o + ";";
    throw PartitionError(msg);
  }
  for (const auto& [name, value] : incoming) params.find(name)->second.value = value;
}

}  // namespace

void EncoderClassifier::load_shared(const ParameterList& params) {
  load_into(params_, partition_.shared_names, params, "shared parameter");
}

ParameterList EncoderClassifier::all_parameters() const {
  ParameterList out;
  for (const auto& [name, param] : params_) out.push_back({name, param.value});
  return out;
}

void EncoderClassifier::load_all(const ParameterList& params) {
  std::set<std::string> all = partition_.shared_names;
  all.insert(partition_.local_names.begin(), partition_.local_names.end());
  load_into(params_, all, params, "parameter");
}

void EncoderClassifier::zero_grad() {
  for (auto& [name, param] : params_) param.zero_grad();
}

EncoderClassifier build_model(const EncoderClassifierConfig& config) {
  return EncoderClassifier(config);
}

std::vector<int> argmax_rows(const Tensor& scores) {
  expect_rank(scores, 2, "argmax_rows");
  std::vector<int> out(scores.dim(0));
  for (std::size_t b = 0; b < scores.dim(0); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.dim(1); ++c) {
      if (scores.at(b, c) > scores.at(b, best)) best = c;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict(EncoderClassifier& model, const Tensor& batch) {
  // Softmax is monotone per row, but going through it keeps ties that only
  // appear after normalization resolved the same way as the probabilities.
  return argmax_rows(nn::softmax(model.logits(batch, nn::Mode::kEval)));
}

ParameterCounts parameter_counts(const EncoderClassifier& model) {
  ParameterCounts counts;
  for (const Parameter* p : model.parameters()) {
    if (model.partition().shared_names.contains(p->name)) {
      counts.shared += p->value.numel();
    } else {
      counts.local += p->value.numel();
    }
  }
  counts.total = counts.shared + counts.local;
  return counts;
}

}  // namespace ufid
