#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

namespace opdlab {

// Parameter-space vector that only stores the logit rows it touches.
// Rows iterate in ascending index order, so every reduction is deterministic.
class SparseGrad {
 public:
  SparseGrad() = default;
  explicit SparseGrad(std::size_t width) : width_(width) {}

  std::size_t width() const { return width_; }
  const std::map<std::size_t, std::vector<double>>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }

  std::vector<double>& row(std::size_t r) {
    auto it = rows_.find(r);
    if (it == rows_.end()) it = rows_.emplace(r, std::vector<double>(width_, 0.0)).first;
    return it->second;
  }

  double at(std::size_t r, std::size_t c) const {
    auto it = rows_.find(r);
    return it == rows_.end() ? 0.0 : it->second[c];
  }

  void add_scaled(const SparseGrad& other, double scale) {
    for (const auto& [r, values] : other.rows_) {
      auto& dst = row(r);
      for (std::size_t c = 0; c < width_; ++c) dst[c] += scale * values[c];
    }
  }

  void scale(double s) {
    for (auto& [r, values] : rows_)
      for (double& v : values) v *= s;
  }

  double squared_norm() const {
    double acc = 0.0;
    for (const auto& [r, values] : rows_)
      for (double v : values) acc += v * v;
    return acc;
  }

  double norm() const { return std::sqrt(squared_norm()); }

  double max_abs() const {
    double m = 0.0;
    for (const auto& [r, values] : rows_)
      for (double v : values) m = std::max(m, std::abs(v));
    return m;
  }

  bool all_finite() const {
    for (const auto& [r, values] : rows_)
      for (double v : values)
        if (!std::isfinite(v)) return false;
    return true;
  }

  std::vector<double> to_dense(std::size_t param_count) const {
    std::vector<double> out(param_count, 0.0);
    for (const auto& [r, values] : rows_)
      for (std::size_t c = 0; c < width_; ++c) out[r * width_ + c] = values[c];
    return out;
  }

 private:
  std::size_t width_ = 0;
  std::map<std::size_t, std::vector<double>> rows_;
};

// Largest coordinate difference relative to the largest coordinate magnitude of
// either operand: max_i |a_i - b_i| / max(max_i |a_i|, max_i |b_i|).
inline double relative_max_difference(const SparseGrad& a, const SparseGrad& b) {
  SparseGrad diff = a;
  diff.add_scaled(b, -1.0);
  const double scale = std::max(a.max_abs(), b.max_abs());
  if (scale == 0.0) return 0.0;
  return diff.max_abs() / scale;
}

}  // namespace opdlab
