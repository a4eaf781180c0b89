#pragma once

#include <Eigen/Dense>
#include <vector>

namespace perfinf {

/// Joint model parameter across players: per-player blocks stored contiguously.
///
/// Block dimensions are fixed at construction. A single-player problem is the
/// one-block special case; nothing downstream branches on it.
class Theta {
 public:
  Theta() = default;
  explicit Theta(std::vector<Eigen::VectorXd> blocks);
  Theta(Eigen::VectorXd flat, std::vector<int> dims);
  static Theta single(Eigen::VectorXd value);

  int players() const { return static_cast<int>(dims_.size()); }
  int dim() const { return static_cast<int>(flat_.size()); }
  int block_dim(int player) const { return dims_[player]; }
  int block_offset(int player) const { return offsets_[player]; }
  const std::vector<int>& block_dims() const { return dims_; }

  Eigen::VectorBlock<const Eigen::VectorXd> block(int player) const;
  Eigen::VectorBlock<Eigen::VectorXd> block(int player);

  const Eigen::VectorXd& flatten() const { return flat_; }
  static Theta unflatten(const Eigen::VectorXd& flat, const std::vector<int>& dims);

  /// Same block structure, new coordinate values.
  Theta with_flat(const Eigen::VectorXd& flat) const;

  bool same_shape(const Theta& other) const { return dims_ == other.dims_; }

 private:
  void rebuild_offsets();

  Eigen::VectorXd flat_;
  std::vector<int> dims_;
  std::vector<int> offsets_;
};

/// Closed box constraint for one player's parameter block.
struct ParamBox {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  ParamBox() = default;
  ParamBox(Eigen::VectorXd lo, Eigen::VectorXd hi);
  static ParamBox unbounded(int dim);
  static ParamBox cube(int dim, double lo, double hi);

  int dim() const { return static_cast<int>(lower.size()); }
  Eigen::VectorXd project(const Eigen::VectorXd& point) const;
  bool contains(const Eigen::VectorXd& point, double slack = 0.0) const;
  bool is_unbounded() const;
};

/// Projects every block of `theta` into its box.
Theta project_onto(const Theta& theta, const std::vector<ParamBox>& boxes);

}  // namespace perfinf
