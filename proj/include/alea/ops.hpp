#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "alea/tensor.hpp"

namespace alea {

// ---------------------------------------------------------------------------
// Plain (non-differentiable) row-wise helpers shared by the autodiff ops and
// the reference computations in tests.

template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows_value(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  MatrixX<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Derived>
MatrixX<typename Derived::Scalar> log_softmax_rows_value(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  MatrixX<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    const S lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

template <typename Scalar>
void require_finite(const MatrixX<Scalar>& m, const char* op) {
  require(m.allFinite(), ErrorKind::kNumeric, std::string("non-finite input to ") + op);
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorKind::kDimension, std::string(op) + ": shape " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                    "x" + std::to_string(b.cols()));
  }
}

// ---------------------------------------------------------------------------
// Differentiable primitives.

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.cols() != b.rows()) {
    fail(ErrorKind::kDimension, "matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                                    std::to_string(b.rows()) + " differ");
  }
  using Node = typename Tensor<Scalar>::Node;
  return Tensor<Scalar>::make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    Node& ta = *self.inputs[0];
    Node& tb = *self.inputs[1];
    if (ta.requires_grad) ta.accumulate(self.grad * tb.value.transpose());
    if (tb.requires_grad) tb.accumulate(ta.value.transpose() * self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  using Node = typename Tensor<Scalar>::Node;
  return Tensor<Scalar>::make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->accumulate(self.grad);
  });
}

// x[T x n] + bias[1 x n] broadcast over rows.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  require(bias.rows() == 1 && bias.cols() == x.cols(), ErrorKind::kDimension,
          "add_row: bias must be 1x" + std::to_string(x.cols()));
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> out = x.value().rowwise() + bias.value().row(0);
  return Tensor<Scalar>::make_result(std::move(out), {x, bias}, [](Node& self) {
    Node& tx = *self.inputs[0];
    Node& tb = *self.inputs[1];
    if (tx.requires_grad) tx.accumulate(self.grad);
    if (tb.requires_grad) tb.accumulate(self.grad.colwise().sum());
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  using Node = typename Tensor<Scalar>::Node;
  return Tensor<Scalar>::make_result(x.value() * factor, {x}, [factor](Node& self) {
    self.inputs[0]->accumulate(self.grad * factor);
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "mul");
  using Node = typename Tensor<Scalar>::Node;
  return Tensor<Scalar>::make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    Node& ta = *self.inputs[0];
    Node& tb = *self.inputs[1];
    if (ta.requires_grad) ta.accumulate(self.grad.cwiseProduct(tb.value));
    if (tb.requires_grad) tb.accumulate(self.grad.cwiseProduct(ta.value));
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = x.value().sum();
  return Tensor<Scalar>::make_result(std::move(out), {x}, [](Node& self) {
    Node& in = *self.inputs[0];
    in.grad_buffer().array() += self.grad(0, 0);
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

// Sum of 1x1 tensors.
template <typename Scalar>
Tensor<Scalar> add_scalars(std::span<const Tensor<Scalar>> terms) {
  require(!terms.empty(), ErrorKind::kContract, "add_scalars: no terms");
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(1, 1);
  for (const auto& t : terms) {
    require(t.size() == 1, ErrorKind::kDimension, "add_scalars: non-scalar term");
    out(0, 0) += t.item();
  }
  std::vector<Tensor<Scalar>> inputs(terms.begin(), terms.end());
  return Tensor<Scalar>::make_result(std::move(out), std::move(inputs), [](Node& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->accumulate(self.grad);
  });
}

// GELU, tanh approximation.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  using Node = typename Tensor<Scalar>::Node;
  const Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  const Scalar kA = Scalar(0.044715);
  const auto& v = x.value();
  MatrixX<Scalar> out = (Scalar(0.5) * v.array() *
                         (Scalar(1) + (kC * (v.array() + kA * v.array().cube())).tanh()))
                            .matrix();
  return Tensor<Scalar>::make_result(std::move(out), {x}, [kC, kA](Node& self) {
    Node& in = *self.inputs[0];
    const auto xv = in.value.array();
    const auto t = (kC * (xv + kA * xv.cube())).tanh();
    const auto dy = Scalar(0.5) * (Scalar(1) + t) +
                    Scalar(0.5) * xv * (Scalar(1) - t.square()) * kC *
                        (Scalar(1) + Scalar(3) * kA * xv.square());
    in.accumulate((self.grad.array() * dy).matrix());
  });
}

// Row-wise LayerNorm with learnable scale/shift ([1 x n] each).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  const Index n = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == n && beta.rows() == 1 && beta.cols() == n,
          ErrorKind::kDimension, "layer_norm: gamma/beta must be 1x" + std::to_string(n));
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> xhat(x.rows(), n);
  RowVectorX<Scalar> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.value().row(r).mean();
    const auto centered = x.value().row(r).array() - mu;
    const Scalar var = centered.square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  MatrixX<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return Tensor<Scalar>::make_result(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& tx = *self.inputs[0];
        Node& tg = *self.inputs[1];
        Node& tb = *self.inputs[2];
        if (tg.requires_grad) tg.accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
        if (tb.requires_grad) tb.accumulate(self.grad.colwise().sum());
        if (tx.requires_grad) {
          MatrixX<Scalar> dxhat = (self.grad.array().rowwise() * tg.value.row(0).array()).matrix();
          MatrixX<Scalar> dx(dxhat.rows(), dxhat.cols());
          for (Index r = 0; r < dxhat.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
            dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          tx.accumulate(dx);
        }
      });
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& x) {
  require_finite(x.value(), "softmax_rows");
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> y = softmax_rows_value(x.value());
  MatrixX<Scalar> y_saved = y;
  return Tensor<Scalar>::make_result(std::move(y), {x}, [y = std::move(y_saved)](Node& self) {
    const auto dot = self.grad.cwiseProduct(y).rowwise().sum();
    MatrixX<Scalar> dx = (y.array() * (self.grad.colwise() - dot).array()).matrix();
    self.inputs[0]->accumulate(dx);
  });
}

// Rows of `table` selected by `ids` (embedding lookup).
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& table, std::span<const int> ids) {
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      fail(ErrorKind::kVocabulary, "gather_rows: id " + std::to_string(ids[i]) +
                                       " outside table of " + std::to_string(table.rows()));
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  return Tensor<Scalar>::make_result(
      std::move(out), {table}, [ids = std::vector<int>(ids.begin(), ids.end())](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += self.grad.row(static_cast<Index>(i));
      });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.rows(), ErrorKind::kDimension,
          "slice_rows: range outside tensor");
  using Node = typename Tensor<Scalar>::Node;
  return Tensor<Scalar>::make_result(x.value().middleRows(start, count), {x},
                                     [start, count](Node& self) {
                                       self.inputs[0]->grad_buffer().middleRows(start, count) += self.grad;
                                     });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts) {
  require(!parts.empty(), ErrorKind::kContract, "concat_rows: nothing to concatenate");
  const Index cols = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorKind::kDimension, "concat_rows: column counts differ");
    total += p.rows();
  }
  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> out(total, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Tensor<Scalar>> inputs(parts.begin(), parts.end());
  return Tensor<Scalar>::make_result(std::move(out), std::move(inputs),
                                     [offsets = std::move(offsets)](Node& self) {
                                       for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                         Node& in = *self.inputs[i];
                                         if (in.requires_grad)
                                           in.accumulate(self.grad.middleRows(offsets[i], in.value.rows()));
                                       }
                                     });
}

// Causal multi-head attention core: softmax(Q K^T / sqrt(dh) + mask) V per
// head, heads laid out as contiguous column blocks. When `probs_out` is
// non-null it receives one T x T probability matrix per head.
template <typename Scalar>
Tensor<Scalar> causal_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                const Tensor<Scalar>& v, int n_heads,
                                std::vector<MatrixX<Scalar>>* probs_out = nullptr) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require(n_heads > 0 && q.cols() % n_heads == 0, ErrorKind::kDimension,
          "causal_attention: width not divisible by head count");
  using Node = typename Tensor<Scalar>::Node;
  const Index t_len = q.rows();
  const Index dh = q.cols() / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  std::vector<MatrixX<Scalar>> probs(static_cast<std::size_t>(n_heads));
  MatrixX<Scalar> out(t_len, q.cols());
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.value().middleCols(h * dh, dh);
    const auto kh = k.value().middleCols(h * dh, dh);
    const auto vh = v.value().middleCols(h * dh, dh);
    MatrixX<Scalar> scores = (qh * kh.transpose()) * inv_sqrt;
    MatrixX<Scalar>& p = probs[static_cast<std::size_t>(h)];
    p = MatrixX<Scalar>::Zero(t_len, t_len);
    for (Index i = 0; i < t_len; ++i) {
      const auto row = scores.row(i).head(i + 1);
      const Scalar mx = row.maxCoeff();
      p.row(i).head(i + 1) = (row.array() - mx).exp();
      p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
    }
    out.middleCols(h * dh, dh) = p * vh;
  }
  if (probs_out != nullptr) *probs_out = probs;

  return Tensor<Scalar>::make_result(
      std::move(out), {q, k, v},
      [probs = std::move(probs), n_heads, dh, inv_sqrt](Node& self) {
        Node& tq = *self.inputs[0];
        Node& tk = *self.inputs[1];
        Node& tv = *self.inputs[2];
        for (int h = 0; h < n_heads; ++h) {
          const auto& p = probs[static_cast<std::size_t>(h)];
          const auto g = self.grad.middleCols(h * dh, dh);
          const auto qh = tq.value.middleCols(h * dh, dh);
          const auto kh = tk.value.middleCols(h * dh, dh);
          const auto vh = tv.value.middleCols(h * dh, dh);
          if (tv.requires_grad) tv.grad_buffer().middleCols(h * dh, dh) += p.transpose() * g;
          if (!tq.requires_grad && !tk.requires_grad) continue;
          MatrixX<Scalar> dp = g * vh.transpose();
          const auto dot = dp.cwiseProduct(p).rowwise().sum();
          MatrixX<Scalar> ds = (p.array() * (dp.colwise() - dot).array()).matrix() * inv_sqrt;
          if (tq.requires_grad) tq.grad_buffer().middleCols(h * dh, dh) += ds * kh;
          if (tk.requires_grad) tk.grad_buffer().middleCols(h * dh, dh) += ds.transpose() * qh;
        }
      });
}

// Mean over masked-in rows of -log softmax(logits)[target].
template <typename Scalar>
Tensor<Scalar> cross_entropy_nll(const Tensor<Scalar>& logits, std::span<const int> targets,
                                 std::span<const std::uint8_t> mask) {
  const Index t_len = logits.rows();
  const Index vocab = logits.cols();
  require(static_cast<Index>(targets.size()) == t_len && static_cast<Index>(mask.size()) == t_len,
          ErrorKind::kDimension, "cross_entropy_nll: targets/mask length must equal logits rows");
  require_finite(logits.value(), "cross_entropy_nll");
  Index n_active = 0;
  for (Index t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    ++n_active;
    require(targets[t] >= 0 && targets[t] < vocab, ErrorKind::kVocabulary,
            "cross_entropy_nll: target " + std::to_string(targets[t]) + " out of range");
  }
  require(n_active > 0, ErrorKind::kContract, "cross_entropy_nll: empty loss (all positions masked)");

  using Node = typename Tensor<Scalar>::Node;
  MatrixX<Scalar> log_probs = log_softmax_rows_value(logits.value());
  Scalar total = 0;
  for (Index t = 0; t < t_len; ++t)
    if (mask[t]) total -= log_probs(t, targets[t]);
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(n_active);

  return Tensor<Scalar>::make_result(
      std::move(out), {logits},
      [log_probs = std::move(log_probs), tg = std::vector<int>(targets.begin(), targets.end()),
       mk = std::vector<std::uint8_t>(mask.begin(), mask.end()), n_active](Node& self) {
        const Scalar g = self.grad(0, 0) / static_cast<Scalar>(n_active);
        auto& buf = self.inputs[0]->grad_buffer();
        for (Index t = 0; t < log_probs.rows(); ++t) {
          if (!mk[t]) continue;
          buf.row(t) += g * log_probs.row(t).array().exp().matrix();
          buf(t, tg[t]) -= g;
        }
      });
}

// Mean over masked-in rows of KL(softmax(p) || softmax(q)). `q_logits` is a
// fixed reference: no gradient flows into it.
template <typename Scalar>
Tensor<Scalar> kl_divergence(const Tensor<Scalar>& p_logits, const Tensor<Scalar>& q_logits,
                             std::span<const std::uint8_t> mask) {
  require_same_shape(p_logits, q_logits, "kl_divergence");
  const Index t_len = p_logits.rows();
  require(static_cast<Index>(mask.size()) == t_len, ErrorKind::kDimension,
          "kl_divergence: mask length must equal logits rows");
  require_finite(p_logits.value(), "kl_divergence");
  require_finite(q_logits.value(), "kl_divergence");
  Index n_active = 0;
  for (Index t = 0; t < t_len; ++t) n_active += mask[t] ? 1 : 0;
  require(n_active > 0, ErrorKind::kContract, "kl_divergence: empty loss (all positions masked)");

  using Node = typename Tensor<Scalar>::Node;
  const MatrixX<Scalar> log_p = log_softmax_rows_value(p_logits.value());
  const MatrixX<Scalar> log_q = log_softmax_rows_value(q_logits.value());
  MatrixX<Scalar> p = log_p.array().exp().matrix();
  RowVectorX<Scalar> row_kl = RowVectorX<Scalar>::Zero(t_len);
  Scalar total = 0;
  for (Index t = 0; t < t_len; ++t) {
    if (!mask[t]) continue;
    row_kl(t) = (p.row(t).array() * (log_p.row(t) - log_q.row(t)).array()).sum();
    total += row_kl(t);
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = total / static_cast<Scalar>(n_active);

  MatrixX<Scalar> diff = log_p - log_q;
  return Tensor<Scalar>::make_result(
      std::move(out), {p_logits},
      [p = std::move(p), diff = std::move(diff), row_kl = std::move(row_kl),
       mk = std::vector<std::uint8_t>(mask.begin(), mask.end()), n_active](Node& self) {
        const Scalar g = self.grad(0, 0) / static_cast<Scalar>(n_active);
        auto& buf = self.inputs[0]->grad_buffer();
        for (Index t = 0; t < p.rows(); ++t) {
          if (!mk[t]) continue;
          buf.row(t) += g * (p.row(t).array() * (diff.row(t).array() - row_kl(t))).matrix();
        }
      });
}

}  // namespace alea
