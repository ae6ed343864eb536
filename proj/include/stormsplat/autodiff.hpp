#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <vector>

namespace stormsplat::ad {

using Matrix = Eigen::MatrixXd;

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

/// Reverse-mode differentiation over dense matrices. Every operation records
/// its result and a backward rule; `backward` runs the rules in reverse
/// order and accumulates parameter gradients into caller-owned storage.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that receives no gradient.
  Var constant(Matrix value);
  /// A leaf whose gradient is added to `*grad` (same shape) by backward.
  Var parameter(const Matrix& value, Matrix* grad);

  const Matrix& value(Var v) const;
  /// Gradient of the last backward call with respect to `v`.
  const Matrix& grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Adds a 1 x n row to every row of `a`.
  Var add_row(Var a, Var row);
  /// Elementwise product.
  Var mul(Var a, Var b);
  /// Multiplies every row of `a` elementwise by the 1 x n `row`.
  Var mul_row(Var a, Var row);
  Var scale(Var a, double factor);
  /// 1 - a.
  Var one_minus(Var a);
  Var sigmoid(Var a);
  Var tanh(Var a);
  Var softplus(Var a);
  Var exp(Var a);
  Var neg(Var a);
  Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
  Var concat_cols(const std::vector<Var>& parts);
  /// Row order reversed (token axis).
  Var reverse_rows(Var a);
  /// Every row divided by its root mean square, sqrt(mean(x^2) + eps).
  Var rms_norm_rows(Var a, double eps);
  /// 1 x 1 sum of all entries.
  Var sum(Var a);
  /// 1 x 1 sum of squared entries.
  Var sum_squares(Var a);

  /// Selective scan over rows k = 0..M-1 with a per-channel diagonal state:
  ///   h_k = exp(delta_k * A) o h_{k-1} + delta_k * B_k * x_k
  ///   y_k = C_k . h_k + D o x_k
  /// x, delta: M x Di; A: Di x S; B, C: M x S; D: 1 x Di. Returns M x Di.
  Var ssm_scan(Var x, Var delta, Var a, Var b, Var c, Var d);

  /// Seeds d loss = 1 and propagates. `loss` must be 1 x 1. Throws
  /// std::logic_error when called twice or on an empty tape.
  void backward(Var loss);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Matrix* sink = nullptr;
    std::function<void(Tape&, int)> rule;
  };

  Var push(Matrix value, std::function<void(Tape&, int)> rule = {});
  Matrix& g(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Matrix& v(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  void accumulate(int id, const Matrix& delta);

  std::vector<Node> nodes_;
  bool done_ = false;
};

}  // namespace stormsplat::ad
