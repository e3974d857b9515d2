#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ufid/tape.hpp"

namespace ufid {

enum class OptimizerKind { kSgd, kAdam };

OptimizerKind parse_optimizer(const std::string& name);
std::string to_string(OptimizerKind kind);

// Applies accumulated gradients and zeroes them. State (if any) is keyed by
// position in the parameter span, so callers must pass the same ordering on
// every step.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::span<Parameter* const> params) = 0;
};

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double learning_rate);
  void step(std::span<Parameter* const> params) override;

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(std::span<Parameter* const> params) override;

 private:
  double lr_, beta1_, beta2_, eps_;
  long steps_ = 0;
  std::vector<std::vector<double>> first_, second_;
};

std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, double learning_rate);

}  // namespace ufid
