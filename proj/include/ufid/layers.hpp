#pragma once

#include <span>

#include "ufid/tape.hpp"
#include "ufid/tensor.hpp"

// Differentiable building blocks of the encoder-classifier. Every op takes
// and returns tape handles; gradients flow on Tape::backward.
namespace ufid::nn {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kProbabilityFloor = 1e-12;

enum class Mode { kTrain, kEval };
enum class Padding { kSame, kValid };
enum class Reduction { kMean, kSum };

struct ReteluOptions {
  double theta = 0.05;
  // Pass gradient through the (0, theta] plateau instead of zeroing it.
  bool straight_through = false;
};

// Generic elementwise and structural ops.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var square(const Var& a);
Var scale(const Var& a, double factor);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);
// [B x N] ++ [B x M] -> [B x (N + M)]
Var concat_columns(const Var& left, const Var& right);

// y = x W^T + b with x [B x F], W [D x F], b [D].
Var dense(const Var& x, const Var& weight, const Var& bias);

// 0 for x <= 0, theta for 0 < x <= theta, x above theta.
Tensor retelu(const Tensor& x, double theta);
// upstream * (x > theta) by default; straight-through passes x > 0.
Tensor retelu_backward(const Tensor& x, double theta, const Tensor& upstream,
                       bool straight_through = false);
Var retelu(const Var& x, const ReteluOptions& options);

// x [B x Cin x L], kernels [Cout x Cin x k], bias [Cout], stride 1.
// kSame zero-pads (k-1)/2 on the left and the rest on the right.
Var conv1d(const Var& x, const Var& kernels, const Var& bias, Padding padding = Padding::kSame);

// Running statistics of a BatchNorm1d layer. Before any training batch the
// layer normalizes with mean 0 and variance 1.
struct BatchNormStats {
  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}

  Tensor running_mean;
  Tensor running_var;
};

// Per-channel normalization of [B x C x L] (or [B x C]). Train mode uses the
// biased batch variance for normalization and folds the unbiased variance
// into the running estimate with momentum kBatchNormMomentum.
Var batchnorm1d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, Mode mode);

// [B x C x L] -> [B x C]; gradient goes to the first maximal position.
Var global_max_pool(const Var& x);

// Gate parameters; each weight is [H x (H + I)] acting on z_t = [h_{t-1}; x_t].
struct LstmWeights {
  Var w_f, w_i, w_o, w_c;
  Var b_f, b_i, b_o, b_c;
};

// seq [B x T x I] -> final hidden state [B x H]. h0/c0 default to zeros.
Var lstm(const Var& seq, const LstmWeights& weights, const Tensor* h0 = nullptr,
         const Tensor* c0 = nullptr);

Tensor softmax(const Tensor& logits);
Var softmax(const Var& logits);

// Mean (or sum) over rows of -log(max(p[label], kProbabilityFloor)).
Var cross_entropy(const Var& probs, std::span<const int> labels,
                  Reduction reduction = Reduction::kMean);

// w <- w - eta * grad, then grads are zeroed.
void sgd_step(std::span<Parameter* const> params, double eta);

}  // namespace ufid::nn
