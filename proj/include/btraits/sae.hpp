#pragma once

// ReLU sparse autoencoder.
//
//   u       = W_enc (z - b_dec) + b_enc
//   g(z)    = max(u, 0)
//   z_hat   = W_dec g(z) + b_dec
//   J       = |z - z_hat|^2 + alpha * sum_j g_j(z)        (averaged over a batch)
//
// All kernels are templated on the scalar type: training runs in float,
// gradient checks in double.

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include <Eigen/Core>

namespace btraits::sae {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct SaeParams {
  Matrix<Scalar> w_enc;  // n x d
  Vector<Scalar> b_enc;  // n
  Matrix<Scalar> w_dec;  // d x n
  Vector<Scalar> b_dec;  // d

  Eigen::Index input_dim() const { return w_dec.rows(); }
  Eigen::Index latent_dim() const { return w_enc.rows(); }

  static SaeParams Zero(Eigen::Index d, Eigen::Index n) {
    return {Matrix<Scalar>::Zero(n, d), Vector<Scalar>::Zero(n), Matrix<Scalar>::Zero(d, n),
            Vector<Scalar>::Zero(d)};
  }

  template <typename Other>
  SaeParams<Other> cast() const {
    return {w_enc.template cast<Other>(), b_enc.template cast<Other>(),
            w_dec.template cast<Other>(), b_dec.template cast<Other>()};
  }

  bool all_finite() const {
    return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite();
  }

  /// Shapes agree with each other (n x d / n / d x n / d).
  bool consistent() const {
    const auto d = w_dec.rows(), n = w_enc.rows();
    return w_enc.cols() == d && b_enc.size() == n && w_dec.cols() == n && b_dec.size() == d;
  }

  /// Applies fn(param_tensor, other_tensor) to each of the four pairs.
  template <typename Fn>
  void zip(SaeParams& other, Fn&& fn) {
    fn(w_enc, other.w_enc);
    fn(b_enc, other.b_enc);
    fn(w_dec, other.w_dec);
    fn(b_dec, other.b_dec);
  }

  bool operator==(const SaeParams& o) const {
    return w_enc == o.w_enc && b_enc == o.b_enc && w_dec == o.w_dec && b_dec == o.b_dec;
  }
};

using SaeParamsf = SaeParams<float>;
using SaeParamsd = SaeParams<double>;

template <typename Scalar>
struct SaeCode {
  Vector<Scalar> pre_activation;  // u
  Vector<Scalar> code;            // g = ReLU(u)
  Vector<Scalar> reconstruction;  // filled by forward(), empty after encode()
};

/// Per-batch quantities of the objective.
struct BatchMetrics {
  double mse = 0.0;   // mean over rows of |z - z_hat|^2
  double l0 = 0.0;    // mean over rows of #{j : g_j > 0}
  double l1 = 0.0;    // mean over rows of sum_j g_j
  double loss = 0.0;  // mse + alpha * l1
};

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace detail

template <typename Scalar, typename Derived>
SaeCode<Scalar> encode(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& z) {
  detail::require(z.size() == p.input_dim(), "encode: input has wrong dimension");
  detail::require(z.allFinite(), "encode: non-finite input");
  SaeCode<Scalar> out;
  out.pre_activation = p.w_enc * (z - p.b_dec) + p.b_enc;
  out.code = out.pre_activation.cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar, typename Derived>
Vector<Scalar> decode(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& code) {
  detail::require(code.size() == p.latent_dim(), "decode: code has wrong dimension");
  detail::require(code.allFinite() && (code.array() >= Scalar(0)).all(),
                  "decode: code must be finite and non-negative");
  return p.w_dec * code + p.b_dec;
}

template <typename Scalar, typename Derived>
SaeCode<Scalar> forward(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& z) {
  auto out = encode(p, z);
  out.reconstruction = decode(p, out.code);
  return out;
}

/// Codes for a batch of row vectors: returns m x n.
template <typename Scalar, typename Derived>
Matrix<Scalar> encode_rows(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& rows) {
  detail::require(rows.cols() == p.input_dim(), "encode_rows: wrong feature dimension");
  Matrix<Scalar> u = (rows.rowwise() - p.b_dec.transpose()) * p.w_enc.transpose();
  u.rowwise() += p.b_enc.transpose();
  return u.cwiseMax(Scalar(0));
}

/// Objective and its exact gradient, averaged over the rows of `batch`.
/// ReLU'(0) is taken as 0. `grad` is resized to match `p`.
template <typename Scalar, typename Derived>
BatchMetrics loss_and_grad(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch,
                           Scalar alpha, SaeParams<Scalar>& grad) {
  detail::require(batch.cols() == p.input_dim(), "loss_and_grad: wrong feature dimension");
  detail::require(batch.rows() > 0, "loss_and_grad: empty batch");
  const auto m = batch.rows();
  const Scalar inv_m = Scalar(1) / static_cast<Scalar>(m);

  const Matrix<Scalar> centered = batch.rowwise() - p.b_dec.transpose();      // m x d
  Matrix<Scalar> pre(m, p.latent_dim());                                      // m x n
  pre.noalias() = centered * p.w_enc.transpose();
  pre.rowwise() += p.b_enc.transpose();
  const Matrix<Scalar> code = pre.cwiseMax(Scalar(0));
  Matrix<Scalar> err(m, p.input_dim());                                       // z_hat - z
  err.noalias() = code * p.w_dec.transpose();
  err.rowwise() += p.b_dec.transpose();
  err -= batch;

  BatchMetrics metrics;
  metrics.mse = static_cast<double>(err.squaredNorm()) / static_cast<double>(m);
  metrics.l1 = static_cast<double>(code.sum()) / static_cast<double>(m);
  metrics.l0 = static_cast<double>((code.array() > Scalar(0)).count()) / static_cast<double>(m);
  metrics.loss = metrics.mse + static_cast<double>(alpha) * metrics.l1;

  // dJ/dz_hat = 2/m * err
  const Matrix<Scalar> d_recon = (Scalar(2) * inv_m) * err;                   // m x d
  grad.w_dec.noalias() = d_recon.transpose() * code;                          // d x n
  Matrix<Scalar> d_pre(m, p.latent_dim());
  d_pre.noalias() = d_recon * p.w_dec;
  d_pre.array() += alpha * inv_m;
  d_pre = (pre.array() > Scalar(0)).select(d_pre, Scalar(0));
  grad.w_enc.noalias() = d_pre.transpose() * centered;                        // n x d
  grad.b_enc = d_pre.colwise().sum().transpose();
  // b_dec enters both the reconstruction and the centring of the input:
  // sum_i d_recon_i  -  W_enc^T sum_i d_pre_i
  grad.b_dec = d_recon.colwise().sum().transpose();
  grad.b_dec.noalias() -= p.w_enc.transpose() * grad.b_enc;
  return metrics;
}

/// Objective only, same definition as loss_and_grad.
template <typename Scalar, typename Derived>
BatchMetrics evaluate_batch(const SaeParams<Scalar>& p, const Eigen::MatrixBase<Derived>& batch,
                            Scalar alpha) {
  detail::require(batch.cols() == p.input_dim(), "evaluate_batch: wrong feature dimension");
  const auto m = batch.rows();
  const Matrix<Scalar> code = encode_rows(p, batch);
  Matrix<Scalar> err(m, p.input_dim());
  err.noalias() = code * p.w_dec.transpose();
  err.rowwise() += p.b_dec.transpose();
  err -= batch;
  BatchMetrics metrics;
  if (m == 0) return metrics;
  metrics.mse = static_cast<double>(err.squaredNorm()) / static_cast<double>(m);
  metrics.l1 = static_cast<double>(code.sum()) / static_cast<double>(m);
  metrics.l0 = static_cast<double>((code.array() > Scalar(0)).count()) / static_cast<double>(m);
  metrics.loss = metrics.mse + static_cast<double>(alpha) * metrics.l1;
  return metrics;
}

}  // namespace btraits::sae
