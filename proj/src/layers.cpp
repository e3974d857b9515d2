#include "ufid/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "eigen_maps.hpp"
#include "ufid/errors.hpp"

namespace ufid::nn {

using detail::ConstMatrixMap;
using detail::MatrixMap;

namespace {

void expect_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

void check_theta(double theta) {
  if (!(theta > 0.0) || !std::isfinite(theta)) {
    throw ConfigError("ReTeLU threshold must be positive, got " + std::to_string(theta));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  expect_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_scaled(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Var& self) {
    tape.accumulate(a, tape.grad(self));
    tape.accumulate(b, tape.grad(self));
  });
}

Var mul(const Var& a, const Var& b) {
  expect_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Var& self) {
    const Tensor& g = tape.grad(self);
    Tensor ga = g, gb = g;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] *= b.value()[i];
      gb[i] *= a.value()[i];
    }
    tape.accumulate(a, ga);
    tape.accumulate(b, gb);
  });
}

Var square(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= v;
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Var& self) {
    Tensor g = tape.grad(self);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= 2.0 * a.value()[i];
    tape.accumulate(a, g);
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& tape, const Var& self) {
    Tensor g = tape.grad(self);
    for (auto& v : g.data()) v *= factor;
    tape.accumulate(a, g);
  });
}

Var sum(const Var& a) {
  double total = 0.0;
  for (const double v : a.value().data()) total += v;
  return a.tape().record(Tensor::scalar(total), {a}, [a](Tape& tape, const Var& self) {
    Tensor g(a.value().shape(), tape.grad(self)[0]);
    tape.accumulate(a, g);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Var& self) {
    const Tensor& g = tape.grad(self);
    tape.accumulate(a, g.raw(), g.numel());
  });
}

Var concat_columns(const Var& left, const Var& right) {
  const Tensor& l = left.value();
  const Tensor& r = right.value();
  expect_rank(l, 2, "concat_columns");
  expect_rank(r, 2, "concat_columns");
  if (l.dim(0) != r.dim(0)) {
    throw DimensionError("concat_columns row mismatch: " + l.shape_string() + " vs " +
                         r.shape_string());
  }
  const std::size_t rows = l.dim(0), n = l.dim(1), m = r.dim(1);
  Tensor out({rows, n + m});
  for (std::size_t b = 0; b < rows; ++b) {
    std::copy_n(l.raw() + b * n, n, out.raw() + b * (n + m));
    std::copy_n(r.raw() + b * m, m, out.raw() + b * (n + m) + n);
  }
  return left.tape().record(
      std::move(out), {left, right}, [left, right, rows, n, m](Tape& tape, const Var& self) {
        const Tensor& g = tape.grad(self);
        Tensor gl({rows, n}), gr({rows, m});
        for (std::size_t b = 0; b < rows; ++b) {
          std::copy_n(g.raw() + b * (n + m), n, gl.raw() + b * n);
          std::copy_n(g.raw() + b * (n + m) + n, m, gr.raw() + b * m);
        }
        tape.accumulate(left, gl);
        tape.accumulate(right, gr);
      });
}

Var dense(const Var& x, const Var& weight, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(1) ||
      bv.dim(0) != wv.dim(0)) {
    throw DimensionError("dense: input " + xv.shape_string() + " incompatible with weight " +
                         wv.shape_string() + " and bias " + bv.shape_string());
  }
  const auto batch = static_cast<Eigen::Index>(xv.dim(0));
  const auto in = static_cast<Eigen::Index>(xv.dim(1));
  const auto out_dim = static_cast<Eigen::Index>(wv.dim(0));

  Tensor out({xv.dim(0), wv.dim(0)});
  MatrixMap y(out.raw(), batch, out_dim);
  y.noalias() = ConstMatrixMap(xv.raw(), batch, in) *
                ConstMatrixMap(wv.raw(), out_dim, in).transpose();
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index d = 0; d < out_dim; ++d) y(b, d) += bv[static_cast<std::size_t>(d)];
  }

  return x.tape().record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, batch, in, out_dim](Tape& tape, const Var& self) {
        const Tensor& g = tape.grad(self);
        ConstMatrixMap dy(g.raw(), batch, out_dim);
        ConstMatrixMap xm(x.value().raw(), batch, in);
        if (x.requires_grad()) {
          Tensor gx(x.value().shape());
          MatrixMap(gx.raw(), batch, in).noalias() =
              dy * ConstMatrixMap(weight.value().raw(), out_dim, in);
          tape.accumulate(x, gx);
        }
        if (weight.requires_grad()) {
          if (tape.wants_per_sample(weight)) {
            Tensor gw(weight.value().shape());
            MatrixMap gwm(gw.raw(), out_dim, in);
            for (Eigen::Index b = 0; b < batch; ++b) {
              gwm.noalias() = dy.row(b).transpose() * xm.row(b);
              tape.accumulate_per_sample(weight, gw.raw(), gw.numel());
            }
          } else {
            Tensor gw(weight.value().shape());
            MatrixMap(gw.raw(), out_dim, in).noalias() = dy.transpose() * xm;
            tape.accumulate(weight, gw);
          }
        }
        if (bias.requires_grad()) {
          if (tape.wants_per_sample(bias)) {
            for (Eigen::Index b = 0; b < batch; ++b) {
              tape.accumulate_per_sample(bias, g.raw() + b * out_dim,
                                         static_cast<std::size_t>(out_dim));
            }
          } else {
            Tensor gb({static_cast<std::size_t>(out_dim)});
            detail::VectorMap(gb.raw(), out_dim) = dy.colwise().sum().transpose();
            tape.accumulate(bias, gb);
          }
        }
      });
}

Tensor retelu(const Tensor& x, double theta) {
  check_theta(theta);
  Tensor out = x;
  for (auto& v : out.data()) {
    if (v <= 0.0) {
      v = 0.0;
    } else if (v <= theta) {
      v = theta;
    }
  }
  return out;
}

Tensor retelu_backward(const Tensor& x, double theta, const Tensor& upstream,
                       bool straight_through) {
  check_theta(theta);
  expect_same_shape(x, upstream, "retelu_backward");
  Tensor g = upstream;
  const double cut = straight_through ? 0.0 : theta;
  for (std::size_t i = 0; i < g.numel(); ++i) {
    if (!(x[i] > cut)) g[i] = 0.0;
  }
  return g;
}

Var retelu(const Var& x, const ReteluOptions& options) {
  Tensor out = retelu(x.value(), options.theta);
  return x.tape().record(std::move(out), {x}, [x, options](Tape& tape, const Var& self) {
    tape.accumulate(x, retelu_backward(x.value(), options.theta, tape.grad(self),
                                       options.straight_through));
  });
}

Var conv1d(const Var& x, const Var& kernels, const Var& bias, Padding padding) {
  const Tensor& xv = x.value();
  const Tensor& kv = kernels.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 3 || kv.rank() != 3 || bv.rank() != 1 || kv.dim(1) != xv.dim(1) ||
      bv.dim(0) != kv.dim(0)) {
    throw DimensionError("conv1d: input " + xv.shape_string() + " incompatible with kernels " +
                         kv.shape_string() + " and bias " + bv.shape_string());
  }
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), len = xv.dim(2);
  const std::size_t cout = kv.dim(0), k = kv.dim(2);
  const std::size_t pad_left = padding == Padding::kSame ? (k - 1) / 2 : 0;
  const std::size_t padded = padding == Padding::kSame ? len + k - 1 : len;
  if (k > padded) {
    throw DimensionError("conv1d: kernel length " + std::to_string(k) +
                         " exceeds padded input length " + std::to_string(padded));
  }
  const std::size_t out_len = padded - k + 1;

  // Zero-padded copy of the input, [B x Cin x padded].
  AlignedBuffer xpad(batch * cin * padded, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < cin; ++c) {
      std::copy_n(xv.raw() + (b * cin + c) * len, len,
                  xpad.data() + (b * cin + c) * padded + pad_left);
    }
  }

  Tensor out({batch, cout, out_len});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < cout; ++f) {
      double* row = out.raw() + (b * cout + f) * out_len;
      std::fill_n(row, out_len, bv[f]);
      for (std::size_t c = 0; c < cin; ++c) {
        const double* src = xpad.data() + (b * cin + c) * padded;
        for (std::size_t i = 0; i < k; ++i) {
          const double w = kv.at(f, c, i);
          for (std::size_t t = 0; t < out_len; ++t) row[t] += w * src[t + i];
        }
      }
    }
  }

  return x.tape().record(
      std::move(out), {x, kernels, bias},
      [=, xpad = std::move(xpad)](Tape& tape, const Var& self) {
        const Tensor& g = tape.grad(self);
        const Tensor& kw = kernels.value();
        if (x.requires_grad()) {
          Tensor gx(x.value().shape());
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t f = 0; f < cout; ++f) {
              const double* dy = g.raw() + (b * cout + f) * out_len;
              for (std::size_t c = 0; c < cin; ++c) {
                double* dst = gx.raw() + (b * cin + c) * len;
                for (std::size_t i = 0; i < k; ++i) {
                  const double w = kw.at(f, c, i);
                  // padded index p = t + i maps to input index p - pad_left.
                  for (std::size_t t = 0; t < out_len; ++t) {
                    const std::size_t p = t + i;
                    if (p >= pad_left && p - pad_left < len) dst[p - pad_left] += w * dy[t];
                  }
                }
              }
            }
          }
          tape.accumulate(x, gx);
        }
        const bool per_sample = tape.wants_per_sample(kernels) || tape.wants_per_sample(bias);
        Tensor gk(kw.shape());
        Tensor gb({cout});
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t f = 0; f < cout; ++f) {
            const double* dy = g.raw() + (b * cout + f) * out_len;
            for (std::size_t t = 0; t < out_len; ++t) gb[f] += dy[t];
            for (std::size_t c = 0; c < cin; ++c) {
              const double* src = xpad.data() + (b * cin + c) * padded;
              for (std::size_t i = 0; i < k; ++i) {
                double acc = 0.0;
                for (std::size_t t = 0; t < out_len; ++t) acc += dy[t] * src[t + i];
                gk.at(f, c, i) += acc;
              }
            }
          }
          if (per_sample) {
            tape.accumulate_per_sample(kernels, gk.raw(), gk.numel());
            tape.accumulate_per_sample(bias, gb.raw(), gb.numel());
            gk.fill(0.0);
            gb.fill(0.0);
          }
        }
        if (!per_sample) {
          tape.accumulate(kernels, gk);
          tape.accumulate(bias, gb);
        }
      });
}

Var batchnorm1d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                Mode mode) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 && xv.rank() != 3) {
    throw DimensionError("batchnorm1d expects [B x C] or [B x C x L], got " + xv.shape_string());
  }
  const std::size_t batch = xv.dim(0), channels = xv.dim(1);
  const std::size_t len = xv.rank() == 3 ? xv.dim(2) : 1;
  if (gamma.value().shape() != Shape{channels} || beta.value().shape() != Shape{channels} ||
      stats.running_mean.shape() != Shape{channels}) {
    throw DimensionError("batchnorm1d: " + std::to_string(channels) +
                         " channels but gamma " + gamma.value().shape_string() + ", beta " +
                         beta.value().shape_string());
  }
  const double count = static_cast<double>(batch * len);
  std::vector<double> mean(channels), inv_std(channels);
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xv.raw() + (b * channels + c) * len;
        for (std::size_t t = 0; t < len; ++t) s += row[t];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* row = xv.raw() + (b * channels + c) * len;
        for (std::size_t t = 0; t < len; ++t) ss += (row[t] - mu) * (row[t] - mu);
      }
      const double var = ss / count;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + kBatchNormEps);
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      stats.running_mean[c] =
          (1.0 - kBatchNormMomentum) * stats.running_mean[c] + kBatchNormMomentum * mu;
      stats.running_var[c] =
          (1.0 - kBatchNormMomentum) * stats.running_var[c] + kBatchNormMomentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + kBatchNormEps);
    }
  }

  Tensor normalized(xv.shape());
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * len;
      for (std::size_t t = 0; t < len; ++t) {
        const double n = (xv[base + t] - mean[c]) * inv_std[c];
        normalized[base + t] = n;
        out[base + t] = gamma.value()[c] * n + beta.value()[c];
      }
    }
  }

  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [=, normalized = std::move(normalized), inv_std = std::move(inv_std)](Tape& tape,
                                                                            const Var& self) {
        const Tensor& g = tape.grad(self);
        const bool per_sample = tape.wants_per_sample(gamma) || tape.wants_per_sample(beta);
        if (per_sample && mode == Mode::kTrain) {
          throw UsageError("per-sample gradients are undefined for train-mode batchnorm");
        }
        std::vector<double> dgamma(channels, 0.0), dbeta(channels, 0.0);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * len;
            for (std::size_t t = 0; t < len; ++t) {
              dgamma[c] += g[base + t] * normalized[base + t];
              dbeta[c] += g[base + t];
            }
          }
          if (per_sample) {
            tape.accumulate_per_sample(gamma, dgamma.data(), channels);
            tape.accumulate_per_sample(beta, dbeta.data(), channels);
            std::fill(dgamma.begin(), dgamma.end(), 0.0);
            std::fill(dbeta.begin(), dbeta.end(), 0.0);
          }
        }
        if (!per_sample) {
          tape.accumulate(gamma, dgamma.data(), channels);
          tape.accumulate(beta, dbeta.data(), channels);
        }
        if (!x.requires_grad()) return;
        Tensor gx(x.value().shape());
        const Tensor& gm = gamma.value();
        if (mode == Mode::kEval) {
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < channels; ++c) {
              const std::size_t base = (b * channels + c) * len;
              for (std::size_t t = 0; t < len; ++t) {
                gx[base + t] = g[base + t] * gm[c] * inv_std[c];
              }
            }
          }
        } else {
          // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
          for (std::size_t c = 0; c < channels; ++c) {
            double mean_dy = 0.0, mean_dy_xhat = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * channels + c) * len;
              for (std::size_t t = 0; t < len; ++t) {
                mean_dy += g[base + t];
                mean_dy_xhat += g[base + t] * normalized[base + t];
              }
            }
            mean_dy /= count;
            mean_dy_xhat /= count;
            for (std::size_t b = 0; b < batch; ++b) {
              const std::size_t base = (b * channels + c) * len;
              for (std::size_t t = 0; t < len; ++t) {
                gx[base + t] = gm[c] * inv_std[c] *
                               (g[base + t] - mean_dy - normalized[base + t] * mean_dy_xhat);
              }
            }
          }
        }
        tape.accumulate(x, gx);
      });
}

Var global_max_pool(const Var& x) {
  const Tensor& xv = x.value();
  expect_rank(xv, 3, "global_max_pool");
  const std::size_t batch = xv.dim(0), channels = xv.dim(1), len = xv.dim(2);
  Tensor out({batch, channels});
  std::vector<std::size_t> argmax(batch * channels);
  for (std::size_t r = 0; r < batch * channels; ++r) {
    const double* row = xv.raw() + r * len;
    std::size_t best = 0;
    for (std::size_t t = 1; t < len; ++t) {
      if (row[t] > row[best]) best = t;
    }
    argmax[r] = best;
    out[r] = row[best];
  }
  return x.tape().record(std::move(out), {x},
                         [x, len, argmax = std::move(argmax)](Tape& tape, const Var& self) {
                           const Tensor& g = tape.grad(self);
                           Tensor gx(x.value().shape());
                           for (std::size_t r = 0; r < argmax.size(); ++r) {
                             gx[r * len + argmax[r]] = g[r];
                           }
                           tape.accumulate(x, gx);
                         });
}

Tensor softmax(const Tensor& logits) {
  expect_rank(logits, 2, "softmax");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (cols < 2) throw DimensionError("softmax needs at least 2 classes, got " + logits.shape_string());
  Tensor out(logits.shape());
  for (std::size_t b = 0; b < rows; ++b) {
    const double* z = logits.raw() + b * cols;
    double* p = out.raw() + b * cols;
    const double top = *std::max_element(z, z + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      p[c] = std::exp(z[c] - top);
      total += p[c];
    }
    for (std::size_t c = 0; c < cols; ++c) p[c] /= total;
  }
  return out;
}

Var softmax(const Var& logits) {
  Tensor out = softmax(logits.value());
  return logits.tape().record(std::move(out), {logits}, [logits](Tape& tape, const Var& self) {
    const Tensor& p = self.value();
    const Tensor& g = tape.grad(self);
    const std::size_t rows = p.dim(0), cols = p.dim(1);
    Tensor gz(p.shape());
    for (std::size_t b = 0; b < rows; ++b) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += p.at(b, c) * g.at(b, c);
      for (std::size_t c = 0; c < cols; ++c) gz.at(b, c) = p.at(b, c) * (g.at(b, c) - dot);
    }
    tape.accumulate(logits, gz);
  });
}

Var cross_entropy(const Var& probs, std::span<const int> labels, Reduction reduction) {
  const Tensor& p = probs.value();
  expect_rank(p, 2, "cross_entropy");
  const std::size_t rows = p.dim(0), cols = p.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  double total = 0.0;
  for (std::size_t b = 0; b < rows; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " at row " +
                      std::to_string(b) + " outside [0, " + std::to_string(cols) + ")");
    }
    total -= std::log(std::max(p.at(b, static_cast<std::size_t>(y)), kProbabilityFloor));
  }
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(rows) : 1.0;
  std::vector<int> owned(labels.begin(), labels.end());
  return probs.tape().record(
      Tensor::scalar(total * factor), {probs},
      [probs, factor, owned = std::move(owned)](Tape& tape, const Var& self) {
        const Tensor& pv = probs.value();
        const double upstream = tape.grad(self)[0];
        Tensor gp(pv.shape());
        for (std::size_t b = 0; b < owned.size(); ++b) {
          const auto y = static_cast<std::size_t>(owned[b]);
          const double pb = pv.at(b, y);
          if (pb > kProbabilityFloor) gp.at(b, y) = -upstream * factor / pb;
        }
        tape.accumulate(probs, gp);
      });
}

void sgd_step(std::span<Parameter* const> params, double eta) {
  if (!(eta >= 0.0) || !std::isfinite(eta)) {
    throw ConfigError("learning rate must be finite and nonnegative, got " + std::to_string(eta));
  }
  for (Parameter* p : params) {
    if (eta != 0.0) p->value.add_scaled(p->grad, -eta);
    p->zero_grad();
  }
}

}  // namespace ufid::nn
