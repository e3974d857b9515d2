#include "ufid/optim.hpp"

#include <cmath>

#include "ufid/errors.hpp"
#include "ufid/layers.hpp"

namespace ufid {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

namespace {

void check_rate(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw ConfigError("learning rate must be finite and nonnegative, got " + std::to_string(lr));
  }
}

}  // namespace

Sgd::Sgd(double learning_rate) : lr_(learning_rate) { check_rate(lr_); }

void Sgd::step(std::span<Parameter* const> params) { nn::sgd_step(params, lr_); }

Adam::Adam(double learning_rate, double beta1, double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  check_rate(lr_);
}

void Adam::step(std::span<Parameter* const> params) {
  if (first_.empty()) {
    for (const Parameter* p : params) {
      first_.emplace_back(p->value.numel(), 0.0);
      second_.emplace_back(p->value.numel(), 0.0);
    }
  }
  if (first_.size() != params.size()) throw UsageError("Adam: parameter set changed between steps");
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    auto& m = first_[k];
    auto& v = second_[k];
    if (m.size() != p.value.numel()) throw UsageError("Adam: parameter shape changed");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    p.zero_grad();
  }
}

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate) {
  if (kind == OptimizerKind::kSgd) return std::make_unique<Sgd>(learning_rate);
  return std::make_unique<Adam>(learning_rate);
}

}  // namespace ufid
