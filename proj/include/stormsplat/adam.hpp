#pragma once

#include <Eigen/Core>

namespace stormsplat {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam state for one parameter block.
class Adam {
 public:
  Adam() = default;
  explicit Adam(Eigen::Index size, AdamOptions options = {});

  /// One bias-corrected update. A block with any non-finite gradient is left
  /// untouched (moments included) and the call returns false.
  bool step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::Ref<const Eigen::VectorXd>& grads, double lr);

  long steps() const noexcept { return steps_; }
  const Eigen::VectorXd& first_moment() const noexcept { return m_; }
  const Eigen::VectorXd& second_moment() const noexcept { return v_; }

 private:
  AdamOptions options_;
  Eigen::VectorXd m_;
  Eigen::VectorXd v_;
  long steps_ = 0;
};

}  // namespace stormsplat
