#include "stormsplat/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "stormsplat/errors.hpp"

namespace stormsplat::ad {

namespace {

void require_same(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": operands are " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " and " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

double softplus_scalar(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Var Tape::push(Matrix value, std::function<void(Tape&, int)> rule) {
  if (done_) throw std::logic_error("tape already consumed by backward");
  Node n;
  n.value = std::move(value);
  n.rule = std::move(rule);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& delta) {
  Matrix& target = g(id);
  if (target.size() == 0) {
    target = delta;
  } else {
    target += delta;
  }
}

Var Tape::constant(Matrix value) { return push(std::move(value)); }

Var Tape::parameter(const Matrix& value, Matrix* grad) {
  if (grad != nullptr) require_same(value, *grad, "parameter");
  Var out = push(value);
  nodes_.back().sink = grad;
  return out;
}

const Matrix& Tape::value(Var x) const {
  if (x.id < 0 || x.id >= static_cast<int>(nodes_.size())) throw std::logic_error("invalid tape handle");
  return v(x.id);
}

const Matrix& Tape::grad(Var x) const {
  if (x.id < 0 || x.id >= static_cast<int>(nodes_.size())) throw std::logic_error("invalid tape handle");
  return nodes_[static_cast<std::size_t>(x.id)].grad;
}

Var Tape::matmul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) throw ShapeError("matmul: inner dimensions differ");
  return push(v(a.id) * v(b.id), [a, b](Tape& t, int self) {
    const Matrix& up = t.g(self);
    t.accumulate(a.id, up * t.v(b.id).transpose());
    t.accumulate(b.id, t.v(a.id).transpose() * up);
  });
}

Var Tape::add(Var a, Var b) {
  require_same(value(a), value(b), "add");
  return push(v(a.id) + v(b.id), [a, b](Tape& t, int self) {
    t.accumulate(a.id, t.g(self));
    t.accumulate(b.id, t.g(self));
  });
}

Var Tape::sub(Var a, Var b) {
  require_same(value(a), value(b), "sub");
  return push(v(a.id) - v(b.id), [a, b](Tape& t, int self) {
    t.accumulate(a.id, t.g(self));
    t.accumulate(b.id, -t.g(self));
  });
}

Var Tape::add_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw ShapeError("add_row: row shape mismatch");
  Matrix out = v(a.id);
  out.rowwise() += v(row.id).row(0);
  return push(std::move(out), [a, row](Tape& t, int self) {
    t.accumulate(a.id, t.g(self));
    t.accumulate(row.id, t.g(self).colwise().sum());
  });
}

Var Tape::mul(Var a, Var b) {
  require_same(value(a), value(b), "mul");
  return push(v(a.id).cwiseProduct(v(b.id)), [a, b](Tape& t, int self) {
    const Matrix& up = t.g(self);
    t.accumulate(a.id, up.cwiseProduct(t.v(b.id)));
    t.accumulate(b.id, up.cwiseProduct(t.v(a.id)));
  });
}

Var Tape::mul_row(Var a, Var row) {
  if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) throw ShapeError("mul_row: row shape mismatch");
  Matrix out = v(a.id);
  out.array().rowwise() *= v(row.id).row(0).array();
  return push(std::move(out), [a, row](Tape& t, int self) {
    const Matrix& up = t.g(self);
    Matrix ga = up;
    ga.array().rowwise() *= t.v(row.id).row(0).array();
    t.accumulate(a.id, ga);
    t.accumulate(row.id, up.cwiseProduct(t.v(a.id)).colwise().sum());
  });
}

Var Tape::scale(Var a, double factor) {
  return push(v(a.id) * factor, [a, factor](Tape& t, int self) { t.accumulate(a.id, t.g(self) * factor); });
}

Var Tape::one_minus(Var a) {
  return push((1.0 - value(a).array()).matrix(), [a](Tape& t, int self) { t.accumulate(a.id, -t.g(self)); });
}

Var Tape::neg(Var a) {
  return push(-value(a), [a](Tape& t, int self) { t.accumulate(a.id, -t.g(self)); });
}

Var Tape::sigmoid(Var a) {
  return push(value(a).unaryExpr(&sigmoid_scalar), [a](Tape& t, int self) {
    const auto& y = t.v(self).array();
    t.accumulate(a.id, (t.g(self).array() * y * (1.0 - y)).matrix());
  });
}

Var Tape::tanh(Var a) {
  return push(value(a).array().tanh().matrix(), [a](Tape& t, int self) {
    const auto& y = t.v(self).array();
    t.accumulate(a.id, (t.g(self).array() * (1.0 - y.square())).matrix());
  });
}

Var Tape::softplus(Var a) {
  return push(value(a).unaryExpr(&softplus_scalar), [a](Tape& t, int self) {
    t.accumulate(a.id, t.g(self).cwiseProduct(t.v(a.id).unaryExpr(&sigmoid_scalar)));
  });
}

Var Tape::exp(Var a) {
  return push(value(a).array().exp().matrix(),
              [a](Tape& t, int self) { t.accumulate(a.id, t.g(self).cwiseProduct(t.v(self))); });
}

Var Tape::slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > value(a).cols()) throw ShapeError("slice_cols: range out of bounds");
  return push(v(a.id).middleCols(start, count), [a, start, count](Tape& t, int self) {
    Matrix full = Matrix::Zero(t.v(a.id).rows(), t.v(a.id).cols());
    full.middleCols(start, count) = t.g(self);
    t.accumulate(a.id, full);
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  const Eigen::Index rows = value(parts.front()).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += value(p).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, v(p.id).cols()) = v(p.id);
    at += v(p.id).cols();
  }
  return push(std::move(out), [parts](Tape& t, int self) {
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index c = t.v(p.id).cols();
      t.accumulate(p.id, t.g(self).middleCols(at, c));
      at += c;
    }
  });
}

Var Tape::reverse_rows(Var a) {
  return push(value(a).colwise().reverse(),
              [a](Tape& t, int self) { t.accumulate(a.id, t.g(self).colwise().reverse()); });
}

Var Tape::sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).sum();
  return push(std::move(out), [a](Tape& t, int self) {
    t.accumulate(a.id, Matrix::Constant(t.v(a.id).rows(), t.v(a.id).cols(), t.g(self)(0, 0)));
  });
}

Var Tape::sum_squares(Var a) {
  Matrix out(1, 1);
  out(0, 0) = value(a).squaredNorm();
  return push(std::move(out), [a](Tape& t, int self) { t.accumulate(a.id, 2.0 * t.g(self)(0, 0) * t.v(a.id)); });
}

Var Tape::rms_norm_rows(Var a, double eps) {
  const Matrix& x = value(a);
  Eigen::VectorXd inv = ((x.array().square().rowwise().sum() / static_cast<double>(x.cols())) + eps).rsqrt();
  Matrix y = inv.asDiagonal() * x;
  return push(std::move(y), [a, inv](Tape& t, int self) {
    const Matrix& up = t.g(self);
    const Matrix& y = t.v(self);
    const Eigen::VectorXd proj = (up.array() * y.array()).rowwise().sum() / static_cast<double>(y.cols());
    t.accumulate(a.id, inv.asDiagonal() * (up - proj.asDiagonal() * y));
  });
}

Var Tape::ssm_scan(Var x, Var delta, Var a, Var b, Var c, Var d) {
  const Matrix& X = value(x);
  const Matrix& Dt = value(delta);
  const Matrix& A = value(a);
  const Matrix& B = value(b);
  const Matrix& C = value(c);
  const Matrix& D = value(d);
  const Eigen::Index m = X.rows(), di = X.cols(), s = A.cols();
  require_same(X, Dt, "ssm_scan delta");
  if (A.rows() != di || B.rows() != m || C.rows() != m || B.cols() != s || C.cols() != s || D.rows() != 1 ||
      D.cols() != di) {
    throw ShapeError("ssm_scan: parameter shapes do not match the input");
  }
  // States for every step, (Di x S) blocks stacked along columns, kept for
  // the backward rule.
  Matrix states(di, s * (m + 1));
  states.leftCols(s).setZero();
  Matrix y(m, di);
  for (Eigen::Index k = 0; k < m; ++k) {
    auto prev = states.middleCols(k * s, s);
    auto cur = states.middleCols((k + 1) * s, s);
    for (Eigen::Index j = 0; j < s; ++j) {
      for (Eigen::Index i = 0; i < di; ++i) {
        cur(i, j) = std::exp(Dt(k, i) * A(i, j)) * prev(i, j) + Dt(k, i) * B(k, j) * X(k, i);
      }
    }
    for (Eigen::Index i = 0; i < di; ++i) y(k, i) = D(0, i) * X(k, i);
    for (Eigen::Index j = 0; j < s; ++j) {
      for (Eigen::Index i = 0; i < di; ++i) y(k, i) += C(k, j) * cur(i, j);
    }
  }
  auto held = std::make_shared<Matrix>(std::move(states));
  return push(std::move(y), [x, delta, a, b, c, d, held](Tape& t, int self) {
    const Matrix& X = t.v(x.id);
    const Matrix& Dt = t.v(delta.id);
    const Matrix& A = t.v(a.id);
    const Matrix& B = t.v(b.id);
    const Matrix& C = t.v(c.id);
    const Matrix& D = t.v(d.id);
    const Matrix& up = t.g(self);
    const Matrix& states = *held;
    const Eigen::Index m = X.rows(), di = X.cols(), s = A.cols();
    Matrix gx = Matrix::Zero(m, di), gdt = Matrix::Zero(m, di), ga = Matrix::Zero(di, s);
    Matrix gb = Matrix::Zero(m, s), gc = Matrix::Zero(m, s), gd = Matrix::Zero(1, di);
    Matrix gh = Matrix::Zero(di, s);
    for (Eigen::Index k = m - 1; k >= 0; --k) {
      const auto prev = states.middleCols(k * s, s);
      const auto cur = states.middleCols((k + 1) * s, s);
      for (Eigen::Index i = 0; i < di; ++i) {
        gd(0, i) += up(k, i) * X(k, i);
        gx(k, i) += up(k, i) * D(0, i);
      }
      for (Eigen::Index j = 0; j < s; ++j) {
        double gcj = 0.0;
        for (Eigen::Index i = 0; i < di; ++i) {
          gcj += up(k, i) * cur(i, j);
          gh(i, j) += up(k, i) * C(k, j);
        }
        gc(k, j) += gcj;
      }
      for (Eigen::Index j = 0; j < s; ++j) {
        double gbj = 0.0;
        for (Eigen::Index i = 0; i < di; ++i) {
          const double decay = std::exp(Dt(k, i) * A(i, j));
          const double gij = gh(i, j);
          gdt(k, i) += gij * (A(i, j) * decay * prev(i, j) + B(k, j) * X(k, i));
          ga(i, j) += gij * Dt(k, i) * decay * prev(i, j);
          gbj += gij * Dt(k, i) * X(k, i);
          gx(k, i) += gij * Dt(k, i) * B(k, j);
          gh(i, j) = gij * decay;
        }
        gb(k, j) += gbj;
      }
    }
    t.accumulate(x.id, gx);
    t.accumulate(delta.id, gdt);
    t.accumulate(a.id, ga);
    t.accumulate(b.id, gb);
    t.accumulate(c.id, gc);
    t.accumulate(d.id, gd);
  });
}

void Tape::backward(Var loss) {
  if (done_) throw std::logic_error("backward called twice on one tape");
  if (nodes_.empty()) throw std::logic_error("backward called on an empty tape");
  if (value(loss).rows() != 1 || value(loss).cols() != 1) throw ShapeError("backward needs a 1 x 1 loss");
  done_ = true;
  for (auto& n : nodes_) n.grad.resize(0, 0);
  g(loss.id) = Matrix::Ones(1, 1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;
    if (n.rule) n.rule(*this, id);
    if (n.sink != nullptr) *n.sink += n.grad;
  }
  for (auto& n : nodes_) {
    if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
}

}  // namespace stormsplat::ad
