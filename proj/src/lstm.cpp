#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "eigen_maps.hpp"
#include "ufid/errors.hpp"
#include "ufid/layers.hpp"

namespace ufid::nn {

using detail::ConstMatrixMap;
using detail::MatrixMap;
using detail::RowMatrix;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Forward quantities kept for backpropagation through time. Row blocks are
// laid out time-major: row (t * B + b).
struct LstmCache {
  RowMatrix weights;   // [4H x (H + I)], gate order f, i, o, c
  RowMatrix h_prev;    // [T*B x H]   h_{t-1}
  RowMatrix x;         // [T*B x I]
  RowMatrix gates;     // [T*B x 4H]  activated f, i, o, g
  RowMatrix c_prev;    // [T*B x H]   c_{t-1}
  RowMatrix tanh_c;    // [T*B x H]   tanh(c_t)
};

}  // namespace

Var lstm(const Var& seq, const LstmWeights& w, const Tensor* h0, const Tensor* c0) {
  const Tensor& sv = seq.value();
  expect_rank(sv, 3, "lstm");
  const std::size_t batch = sv.dim(0), steps = sv.dim(1), in = sv.dim(2);
  const Var* gate_w[4] = {&w.w_f, &w.w_i, &w.w_o, &w.w_c};
  const Var* gate_b[4] = {&w.b_f, &w.b_i, &w.b_o, &w.b_c};
  const std::size_t hidden = w.b_f.value().numel();
  for (int k = 0; k < 4; ++k) {
    const Tensor& wk = gate_w[k]->value();
    const Tensor& bk = gate_b[k]->value();
    if (wk.shape() != Shape{hidden, hidden + in} || bk.shape() != Shape{hidden}) {
      throw DimensionError("lstm: gate weight " + wk.shape_string() + " / bias " +
                           bk.shape_string() + " inconsistent with hidden " +
                           std::to_string(hidden) + " and input " + std::to_string(in));
    }
  }
  for (const Tensor* s : {h0, c0}) {
    if (s && s->shape() != Shape{batch, hidden}) {
      throw DimensionError("lstm: initial state " + s->shape_string() + " expected " +
                           to_string(Shape{batch, hidden}));
    }
  }

  const auto B = static_cast<Eigen::Index>(batch);
  const auto H = static_cast<Eigen::Index>(hidden);
  const auto I = static_cast<Eigen::Index>(in);
  const auto T = static_cast<Eigen::Index>(steps);

  auto cache = std::make_shared<LstmCache>();
  RowMatrix& weights = cache->weights;
  weights.resize(4 * H, H + I);
  Eigen::VectorXd bias(4 * H);
  for (int k = 0; k < 4; ++k) {
    weights.middleRows(k * H, H) = ConstMatrixMap(gate_w[k]->value().raw(), H, H + I);
    bias.segment(k * H, H) = detail::ConstVectorMap(gate_b[k]->value().raw(), H);
  }
  const RowMatrix w_h_t = weights.leftCols(H).transpose();  // [H x 4H]
  const RowMatrix w_x_t = weights.rightCols(I).transpose();  // [I x 4H]

  // Any recording tape needs the cache as soon as something upstream wants
  // gradient; record() decides whether the closure survives.
  bool keep = seq.tape().recording();
  if (keep) {
    keep = seq.requires_grad();
    for (int k = 0; k < 4; ++k) {
      keep = keep || gate_w[k]->requires_grad() || gate_b[k]->requires_grad();
    }
  }

  RowMatrix h = h0 ? RowMatrix(ConstMatrixMap(h0->raw(), B, H)) : RowMatrix::Zero(B, H);
  RowMatrix c = c0 ? RowMatrix(ConstMatrixMap(c0->raw(), B, H)) : RowMatrix::Zero(B, H);
  if (keep) {
    cache->h_prev.resize(T * B, H);
    cache->x.resize(T * B, I);
    cache->gates.resize(T * B, 4 * H);
    cache->c_prev.resize(T * B, H);
    cache->tanh_c.resize(T * B, H);
  }

  RowMatrix a(B, 4 * H);
  RowMatrix xt(B, I);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index j = 0; j < I; ++j) xt(b, j) = sv.raw()[(b * T + t) * I + j];
    }
    a.noalias() = h * w_h_t;
    a.noalias() += xt * w_x_t;
    a.rowwise() += bias.transpose();
    if (keep) {
      cache->h_prev.middleRows(t * B, B) = h;
      cache->c_prev.middleRows(t * B, B) = c;
      cache->x.middleRows(t * B, B) = xt;
    }
    for (Eigen::Index b = 0; b < B; ++b) {
      double* ar = a.row(b).data();
      for (Eigen::Index j = 0; j < H; ++j) {
        const double f = sigmoid(ar[j]);
        const double i = sigmoid(ar[H + j]);
        const double o = sigmoid(ar[2 * H + j]);
        const double g = std::tanh(ar[3 * H + j]);
        const double cn = f * c(b, j) + i * g;
        const double tc = std::tanh(cn);
        c(b, j) = cn;
        h(b, j) = o * tc;
        ar[j] = f;
        ar[H + j] = i;
        ar[2 * H + j] = o;
        ar[3 * H + j] = g;
        if (keep) cache->tanh_c(t * B + b, j) = tc;
      }
    }
    if (keep) cache->gates.middleRows(t * B, B) = a;
  }

  Tensor out({batch, hidden});
  MatrixMap(out.raw(), B, H) = h;
  if (!keep) return seq.tape().record(std::move(out), {seq}, {});

  return seq.tape().record(
      std::move(out), {seq, w.w_f, w.w_i, w.w_o, w.w_c, w.b_f, w.b_i, w.b_o, w.b_c},
      [seq, w, cache, B, H, I, T](Tape& tape, const Var& self) {
        const LstmCache& cc = *cache;
        const Tensor& g_out = tape.grad(self);
        RowMatrix dh = ConstMatrixMap(g_out.raw(), B, H);
        RowMatrix dc = RowMatrix::Zero(B, H);
        RowMatrix d_gates(T * B, 4 * H);
        const auto w_h = cc.weights.leftCols(H);   // [4H x H]
        const auto w_x = cc.weights.rightCols(I);  // [4H x I]
        const bool want_x = seq.requires_grad();
        Tensor gx(seq.value().shape());

        for (Eigen::Index t = T; t-- > 0;) {
          auto da = d_gates.middleRows(t * B, B);
          for (Eigen::Index b = 0; b < B; ++b) {
            const Eigen::Index r = t * B + b;
            const double* gr = cc.gates.row(r).data();
            double* dr = da.row(b).data();
            for (Eigen::Index j = 0; j < H; ++j) {
              const double f = gr[j], i = gr[H + j], o = gr[2 * H + j], g = gr[3 * H + j];
              const double tc = cc.tanh_c(r, j);
              const double dhj = dh(b, j);
              const double dcj = dc(b, j) + dhj * o * (1.0 - tc * tc);
              dr[j] = dcj * cc.c_prev(r, j) * f * (1.0 - f);
              dr[H + j] = dcj * g * i * (1.0 - i);
              dr[2 * H + j] = dhj * tc * o * (1.0 - o);
              dr[3 * H + j] = dcj * i * (1.0 - g * g);
              dc(b, j) = dcj * f;
            }
          }
          dh.noalias() = da * w_h;
          if (want_x) {
            const RowMatrix dx = da * w_x;
            for (Eigen::Index b = 0; b < B; ++b) {
              for (Eigen::Index j = 0; j < I; ++j) gx.raw()[(b * T + t) * I + j] = dx(b, j);
            }
          }
        }
        if (want_x) tape.accumulate(seq, gx);

        const Var* gate_w[4] = {&w.w_f, &w.w_i, &w.w_o, &w.w_c};
        const Var* gate_b[4] = {&w.b_f, &w.b_i, &w.b_o, &w.b_c};
        bool per_sample = false;
        for (int k = 0; k < 4; ++k) {
          per_sample = per_sample || tape.wants_per_sample(*gate_w[k]) ||
                       tape.wants_per_sample(*gate_b[k]);
        }
        RowMatrix dw(4 * H, H + I);
        Eigen::VectorXd db(4 * H);
        auto push = [&](bool squared) {
          for (int k = 0; k < 4; ++k) {
            // Gate k owns rows [kH, (k+1)H), which are contiguous in row-major dw.
            const double* wk = dw.data() + k * H * (H + I);
            const double* bk = db.data() + k * H;
            const auto nw = static_cast<std::size_t>(H * (H + I));
            const auto nb = static_cast<std::size_t>(H);
            if (squared) {
              tape.accumulate_per_sample(*gate_w[k], wk, nw);
              tape.accumulate_per_sample(*gate_b[k], bk, nb);
            } else {
              tape.accumulate(*gate_w[k], wk, nw);
              tape.accumulate(*gate_b[k], bk, nb);
            }
          }
        };
        if (!per_sample) {
          dw.leftCols(H).noalias() = d_gates.transpose() * cc.h_prev;
          dw.rightCols(I).noalias() = d_gates.transpose() * cc.x;
          db = d_gates.colwise().sum().transpose();
          push(false);
          return;
        }
        // Per-sample: gather each row's time series and form its own gradient.
        RowMatrix ds(T, 4 * H), hs(T, H), xs(T, I);
        for (Eigen::Index b = 0; b < B; ++b) {
          for (Eigen::Index t = 0; t < T; ++t) {
            ds.row(t) = d_gates.row(t * B + b);
            hs.row(t) = cc.h_prev.row(t * B + b);
            xs.row(t) = cc.x.row(t * B + b);
          }
          dw.leftCols(H).noalias() = ds.transpose() * hs;
          dw.rightCols(I).noalias() = ds.transpose() * xs;
          db = ds.colwise().sum().transpose();
          push(true);
        }
      });
}

}  // namespace ufid::nn
