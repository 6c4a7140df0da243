#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iadkit {

// Dense row-major double array. The single tensor type shared by all modules;
// model weights are kept float32-representable at step boundaries but all
// arithmetic runs in double.
struct Grid {
  std::vector<int> shape;
  std::vector<double> data;

  Grid() = default;
  explicit Grid(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(count(shape), fill);
  }
  Grid(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size()) throw std::invalid_argument("Grid: shape/data size mismatch");
  }

  static Grid scalar(double v) { return Grid({1}, {v}); }

  static size_t count(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Grid: negative dimension");
      n *= static_cast<size_t>(d);
    }
    return s.empty() ? 0 : n;
  }

  size_t numel() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  int rows() const { require_2d(); return shape[0]; }
  int cols() const { require_2d(); return shape[1]; }

  double& at(int i) { return data[static_cast<size_t>(i)]; }
  double at(int i) const { return data[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  double* row(int i) { return data.data() + static_cast<size_t>(i) * shape[1]; }
  const double* row(int i) const { return data.data() + static_cast<size_t>(i) * shape[1]; }

  bool same_shape(const Grid& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double min_value() const {
    require_nonempty();
    return *std::min_element(data.begin(), data.end());
  }
  double max_value() const {
    require_nonempty();
    return *std::max_element(data.begin(), data.end());
  }

  void require_2d() const {
    if (shape.size() != 2) throw std::invalid_argument("Grid: expected 2-d grid");
  }
  void require_nonempty() const {
    if (data.empty()) throw std::invalid_argument("Grid: empty grid");
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

// Numerically stable softmax (max-subtraction; exact under shift invariance).
inline std::vector<double> softmax(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) throw std::invalid_argument("softmax: non-finite input");
  std::vector<double> out(v.size());
  double z = 0.0;
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

// Cosine similarity. Zero-norm inputs mean "no similarity evidence": the
// result is 0 and *zero_norm is set when provided.
inline double cosine_sim(const std::vector<double>& a, const std::vector<double>& b,
                         bool* zero_norm = nullptr) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: length mismatch");
  if (a.empty()) throw std::invalid_argument("cosine_sim: empty input");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (zero_norm) *zero_norm = true;
    return 0.0;
  }
  if (zero_norm) *zero_norm = false;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double cosine_sim(const double* a, const double* b, int n, bool* zero_norm = nullptr) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (zero_norm) *zero_norm = true;
    return 0.0;
  }
  if (zero_norm) *zero_norm = false;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// (g - min) / (max - min + eps). Constant input maps to all-zeros.
inline Grid minmax_norm(const Grid& g, double eps) {
  g.require_nonempty();
  if (!(eps > 0.0)) throw std::invalid_argument("minmax_norm: eps must be > 0");
  double lo = g.min_value(), hi = g.max_value();
  Grid out(g.shape);
  double denom = hi - lo + eps;
  for (size_t i = 0; i < g.data.size(); ++i) out.data[i] = (g.data[i] - lo) / denom;
  return out;
}

}  // namespace iadkit
