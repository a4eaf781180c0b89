#include "perfinf/theta.hpp"

#include <limits>
#include <numeric>
#include <stdexcept>

namespace perfinf {

Theta::Theta(std::vector<Eigen::VectorXd> blocks) {
  dims_.reserve(blocks.size());
  int total = 0;
  for (const auto& b : blocks) {
    dims_.push_back(static_cast<int>(b.size()));
    total += static_cast<int>(b.size());
  }
  flat_.resize(total);
  int at = 0;
  for (const auto& b : blocks) {
    flat_.segment(at, b.size()) = b;
    at += static_cast<int>(b.size());
  }
  rebuild_offsets();
}

Theta::Theta(Eigen::VectorXd flat, std::vector<int> dims)
    : flat_(std::move(flat)), dims_(std::move(dims)) {
  const int total = std::accumulate(dims_.begin(), dims_.end(), 0);
  if (total != flat_.size()) {
    throw std::invalid_argument("Theta: block dims do not sum to vector length");
  }
  rebuild_offsets();
}

Theta Theta::single(Eigen::VectorXd value) {
  const int d = static_cast<int>(value.size());
  return Theta(std::move(value), {d});
}

void Theta::rebuild_offsets() {
  offsets_.resize(dims_.size());
  int at = 0;
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    offsets_[i] = at;
    at += dims_[i];
  }
}

Eigen::VectorBlock<const Eigen::VectorXd> Theta::block(int player) const {
  return flat_.segment(offsets_[player], dims_[player]);
}

Eigen::VectorBlock<Eigen::VectorXd> Theta::block(int player) {
  return flat_.segment(offsets_[player], dims_[player]);
}

Theta Theta::unflatten(const Eigen::VectorXd& flat, const std::vector<int>& dims) {
  return Theta(flat, dims);
}

Theta Theta::with_flat(const Eigen::VectorXd& flat) const {
  if (flat.size() != flat_.size()) {
    throw std::invalid_argument("Theta::with_flat: dimension mismatch");
  }
  return Theta(flat, dims_);
}

ParamBox::ParamBox(Eigen::VectorXd lo, Eigen::VectorXd hi)
    : lower(std::move(lo)), upper(std::move(hi)) {
  if (lower.size() != upper.size()) {
    throw std::invalid_argument("ParamBox: bound dimension mismatch");
  }
  for (int i = 0; i < lower.size(); ++i) {
    if (!(lower[i] <= upper[i])) {
      throw std::invalid_argument("ParamBox: lower bound exceeds upper bound");
    }
  }
}

ParamBox ParamBox::unbounded(int dim) {
  const double inf = std::numeric_limits<double>::infinity();
  return ParamBox(Eigen::VectorXd::Constant(dim, -inf), Eigen::VectorXd::Constant(dim, inf));
}

ParamBox ParamBox::cube(int dim, double lo, double hi) {
  return ParamBox(Eigen::VectorXd::Constant(dim, lo), Eigen::VectorXd::Constant(dim, hi));
}

Eigen::VectorXd ParamBox::project(const Eigen::VectorXd& point) const {
  return point.cwiseMax(lower).cwiseMin(upper);
}

bool ParamBox::contains(const Eigen::VectorXd& point, double slack) const {
  return (point.array() >= lower.array() - slack).all() &&
         (point.array() <= upper.array() + slack).all();
}

bool ParamBox::is_unbounded() const {
  return !lower.allFinite() && !upper.allFinite();
}

Theta project_onto(const Theta& theta, const std::vector<ParamBox>& boxes) {
  if (static_cast<int>(boxes.size()) != theta.players()) {
    throw std::invalid_argument("project_onto: box count != player count");
  }
  Theta out = theta;
  for (int i = 0; i < theta.players(); ++i) {
    out.block(i) = boxes[i].project(theta.block(i));
  }
  return out;
}

}  // namespace perfinf
