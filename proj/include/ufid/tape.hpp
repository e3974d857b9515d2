#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ufid/tensor.hpp"

namespace ufid {

// A named trainable tensor. `grad` always has the shape of `value`.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name_, Tensor value_)
      : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() { grad.fill(0.0); }

  std::string name;
  Tensor value;
  Tensor grad;
};

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// tape that produced it is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  // Gradient accumulated by the last backward pass (zeros if unreached).
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// How parameter leaves receive gradient during backward.
enum class GradMode {
  // Sum of the gradient over the batch (ordinary training).
  kAccumulate,
  // Sum over batch rows of the squared per-row gradient; used for the
  // diagonal Fisher estimate. Only batch-structured layers support it.
  kPerSampleSquared,
};

// Records operations in creation order; backward visits them in reverse,
// which is a valid reverse topological order because inputs always precede
// their consumers.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Var& out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input that never needs a gradient.
  Var constant(Tensor value);
  // Free leaf whose gradient is exposed through Var::grad.
  Var variable(Tensor value);
  // Leaf bound to a Parameter; backward adds into Parameter::grad.
  Var parameter(Parameter& param);

  // Records an op output. `fn` runs during backward and should read the
  // output gradient via grad(out) and push into inputs via accumulate().
  // When the tape is not recording or no input requires grad, `fn` is
  // dropped.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  bool recording() const { return recording_; }
  GradMode grad_mode() const { return grad_mode_; }
  void set_grad_mode(GradMode mode) { grad_mode_ = mode; }

  const Tensor& value(const Var& v) const { return nodes_[v.id()].value; }
  const Tensor& grad(const Var& v) const;
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  // True when `v` is a parameter leaf and per-sample squared mode is on; the
  // op must then call accumulate_per_sample once per batch row.
  bool wants_per_sample(const Var& v) const;

  void accumulate(const Var& v, const Tensor& g);
  // Raw variant for ops that build gradients in scratch buffers.
  void accumulate(const Var& v, const double* g, std::size_t n);
  // Adds g*g when in per-sample squared mode for a parameter leaf, g otherwise.
  void accumulate_per_sample(const Var& v, const double* g, std::size_t n);

  // Runs reverse-mode differentiation from a scalar output.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::size_t uses = 0;
    BackwardFn backward;
  };

  Tensor& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
  bool recording_;
  GradMode grad_mode_ = GradMode::kAccumulate;
};

}  // namespace ufid
