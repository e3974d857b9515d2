#include "ufid/continual.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "ufid/data.hpp"
#include "ufid/errors.hpp"
#include "ufid/layers.hpp"
#include "ufid/model.hpp"
#include "ufid/rng.hpp"

namespace ufid {

TensorMap estimate_fisher(std::span<Parameter* const> params, std::size_t num_examples,
                          const NllBuilder& nll, const FisherOptions& options) {
  if (num_examples == 0) throw EstimationError("Fisher estimation needs a non-empty dataset");
  if (options.max_samples == 0) throw EstimationError("Fisher estimation needs max_samples >= 1");
  const std::size_t n = std::min(options.max_samples, num_examples);
  std::vector<std::size_t> rows(num_examples);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  SplitMix64 rng(mix_seed(options.seed, 0xF15E));
  rng.shuffle(std::span<std::size_t>(rows));
  rows.resize(n);

  std::vector<Tensor> saved;
  saved.reserve(params.size());
  for (Parameter* p : params) {
    saved.push_back(p->grad);
    p->zero_grad();
  }
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    Tape tape;
    tape.set_grad_mode(GradMode::kPerSampleSquared);
    const Var loss = nll(tape, std::span<const std::size_t>(rows).subspan(start, end - start));
    tape.backward(loss);
  }

  TensorMap out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor imp = params[k]->grad;
    for (auto& v : imp.data()) v /= static_cast<double>(n);
    if (!imp.all_finite()) {
      throw EstimationError("non-finite importance for " + params[k]->name);
    }
    out.emplace(params[k]->name, std::move(imp));
    params[k]->grad = std::move(saved[k]);
  }
  return out;
}

TensorMap estimate_fisher(EncoderClassifier& model, const SwarmDataset& dataset,
                          const FisherOptions& options) {
  if (dataset.size() == 0) throw EstimationError("Fisher estimation needs a non-empty dataset");
  const auto params = model.parameters();
  return estimate_fisher(
      params, dataset.size(),
      [&](Tape& tape, std::span<const std::size_t> rows) {
        const Var logits = model.forward(tape, dataset.gather_features(rows), nn::Mode::kEval);
        const auto labels = dataset.gather_labels(rows);
        return nn::cross_entropy(nn::softmax(logits), labels, nn::Reduction::kSum);
      },
      options);
}

namespace {

template <typename P>
void check_names(std::span<P* const> params, const EwcState& state) {
  std::vector<std::string> problems;
  for (const auto* p : params) {
    const auto a = state.anchor.find(p->name);
    const auto i = state.importance.find(p->name);
    if (a == state.anchor.end() || i == state.importance.end()) {
      problems.push_back(p->name + " (no state)");
    } else if (!a->second.same_shape(p->value) || !i->second.same_shape(p->value)) {
      problems.push_back(p->name + " (shape)");
    }
  }
  if (state.anchor.size() != params.size() || state.importance.size() != params.size()) {
    problems.push_back("state covers " + std::to_string(state.anchor.size()) + " names for " +
                       std::to_string(params.size()) + " parameters");
  }
  if (!problems.empty()) {
    std::string msg = "EWC state does not match parameters:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw StateError(msg);
  }
}

}  // namespace

double ewc_penalty(std::span<const Parameter* const> params, const EwcState& state) {
  check_names(params, state);
  double total = 0.0;
  for (const Parameter* p : params) {
    const Tensor& anchor = state.anchor.at(p->name);
    const Tensor& imp = state.importance.at(p->name);
    double s = 0.0;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double d = p->value[i] - anchor[i];
      s += imp[i] * d * d;
    }
    total += s;
  }
  return state.lambda_global * total;
}

double ewc_penalty(const EncoderClassifier& model, const EwcState& state) {
  const auto params = model.parameters();
  return ewc_penalty(params, state);
}

void ewc_grad(std::span<Parameter* const> params, const EwcState& state) {
  check_names(params, state);
  const double k = 2.0 * state.lambda_global;
  for (Parameter* p : params) {
    const Tensor& anchor = state.anchor.at(p->name);
    const Tensor& imp = state.importance.at(p->name);
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      p->grad[i] += k * imp[i] * (p->value[i] - anchor[i]);
    }
  }
}

EwcState update_anchor(EncoderClassifier& model, const SwarmDataset& dataset, double lambda_global,
                       const FisherOptions& options) {
  if (!(lambda_global >= 0.0)) throw ConfigError("EWC lambda must be nonnegative");
  EwcState state;
  state.lambda_global = lambda_global;
  state.importance = estimate_fisher(model, dataset, options);
  for (const Parameter* p : model.parameters()) state.anchor.emplace(p->name, p->value);
  return state;
}

}  // namespace ufid
