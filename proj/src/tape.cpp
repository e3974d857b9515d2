#include "ufid/tape.hpp"

#include "ufid/errors.hpp"

namespace ufid {

const Tensor& Var::value() const { return tape_->value(*this); }
const Tensor& Var::grad() const { return tape_->grad(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, 0, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, recording_, nullptr, 0, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& param) {
  if (recording_) {
    for (const auto& node : nodes_) {
      if (node.param == &param) {
        throw UsageError("parameter '" + param.name + "' bound to the tape twice");
      }
    }
  }
  nodes_.push_back(Node{param.value, {}, recording_, &param, 0, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (recording_) {
    for (const auto& in : inputs) {
      if (in.id() >= nodes_.size()) throw UsageError("op input is not on this tape");
      if (nodes_[in.id()].requires_grad) needs = true;
    }
  }
  Node node{std::move(value), {}, needs, nullptr, 0, {}};
  if (needs) {
    for (const auto& in : inputs) ++nodes_[in.id()].uses;
    node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad(const Var& v) const {
  auto& node = const_cast<Node&>(nodes_[v.id()]);
  if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

bool Tape::wants_per_sample(const Var& v) const {
  return grad_mode_ == GradMode::kPerSampleSquared && nodes_[v.id()].param != nullptr;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  if (!nodes_[v.id()].requires_grad) return;
  auto& buf = grad_buffer(v.id());
  if (!buf.same_shape(g)) {
    throw DimensionError("gradient shape " + g.shape_string() + " does not match value " +
                         buf.shape_string());
  }
  accumulate(v, g.raw(), g.numel());
}

void Tape::accumulate(const Var& v, const double* g, std::size_t n) {
  if (!nodes_[v.id()].requires_grad) return;
  if (wants_per_sample(v)) {
    throw UsageError("op feeding '" + nodes_[v.id()].param->name +
                     "' does not support per-sample gradients");
  }
  auto& buf = grad_buffer(v.id());
  if (buf.numel() != n) throw DimensionError("gradient length mismatch");
  double* dst = buf.raw();
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

void Tape::accumulate_per_sample(const Var& v, const double* g, std::size_t n) {
  if (!nodes_[v.id()].requires_grad) return;
  auto& buf = grad_buffer(v.id());
  if (buf.numel() != n) throw DimensionError("gradient length mismatch");
  double* dst = buf.raw();
  if (wants_per_sample(v)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * g[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
  }
}

void Tape::backward(const Var& loss) {
  if (!recording_) throw UsageError("backward on a tape that was not recording");
  if (loss.id() >= nodes_.size()) throw UsageError("loss is not on this tape");
  auto& out = nodes_[loss.id()];
  if (out.value.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + out.value.shape_string());
  }
  if (grad_mode_ == GradMode::kPerSampleSquared) {
    for (const auto& node : nodes_) {
      if (node.param && node.uses > 1) {
        throw UsageError("per-sample gradients need '" + node.param->name +
                         "' to feed exactly one op");
      }
    }
  }
  for (auto& node : nodes_) {
    if (node.requires_grad) node.grad = Tensor::zeros_like(node.value);
  }
  if (!out.requires_grad) return;
  out.grad.fill(1.0);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!node.requires_grad || !node.backward) continue;
    node.backward(*this, Var(this, i));
  }
  for (auto& node : nodes_) {
    if (node.param && node.requires_grad) node.param->grad.add_scaled(node.grad);
  }
}

}  // namespace ufid
