#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "ufid/tape.hpp"

namespace ufid {

class EncoderClassifier;
struct SwarmDataset;

using TensorMap = std::map<std::string, Tensor>;

// Elastic weight consolidation: the penalty is
//   sum_i lambda_global * importance_i * (w_i - anchor_i)^2
// with importance the diagonal empirical Fisher at the anchor.
struct EwcState {
  TensorMap anchor;
  TensorMap importance;
  double lambda_global = 0.4;
};

struct FisherOptions {
  std::size_t max_samples = 1000;
  std::uint64_t seed = 0;
  // Rows per batched pass; affects speed only.
  std::size_t chunk = 64;
};

// Builds the summed negative log-likelihood of `rows` on `tape`, binding the
// parameters being estimated.
using NllBuilder = std::function<Var(Tape&, std::span<const std::size_t> rows)>;

// Mean over min(max_samples, num_examples) seeded rows of the squared
// per-row gradient. Existing parameter gradients are preserved.
TensorMap estimate_fisher(std::span<Parameter* const> params, std::size_t num_examples,
                          const NllBuilder& nll, const FisherOptions& options);
// Model version; runs the model in eval mode with true labels.
TensorMap estimate_fisher(EncoderClassifier& model, const SwarmDataset& dataset,
                          const FisherOptions& options);

double ewc_penalty(std::span<const Parameter* const> params, const EwcState& state);
double ewc_penalty(const EncoderClassifier& model, const EwcState& state);
// Adds 2 * lambda_global * importance * (w - anchor) into each grad.
void ewc_grad(std::span<Parameter* const> params, const EwcState& state);

// Snapshot of the current parameters plus fresh importance estimates.
EwcState update_anchor(EncoderClassifier& model, const SwarmDataset& dataset, double lambda_global,
                       const FisherOptions& options);

}  // namespace ufid
