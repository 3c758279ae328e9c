#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace emdepart {

// Error taxonomy, mapped to process exit codes by the CLI:
//   ShapeError / DataError -> bad inputs or files (exit 2)
//   NumericError           -> NaN/Inf or a failed numeric check (exit 3)
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles, rank 0..3. Rank 0 is not used by the
// library; scalars travel as shape {1}.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    validate_shape();
    data.assign(shape_numel(shape), 0.0);
  }

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    if (data.size() != shape_numel(shape))
      throw ShapeError("tensor " + shape_str(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }

  std::size_t rows() const {
    require_rank(2, "rows()");
    return shape[0];
  }
  std::size_t cols() const {
    require_rank(2, "cols()");
    return shape[1];
  }

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }

  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * shape[1] + j) * shape[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * shape[1] + j) * shape[2] + k];
  }

  void require_rank(std::size_t r, const char* what) const {
    if (rank() != r)
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) +
                       ", got shape " + shape_str(shape));
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void check_finite(const std::string& what) const {
    if (!all_finite()) throw NumericError(what + ": non-finite value in tensor " + shape_str(shape));
  }

 private:
  void validate_shape() const {
    if (shape.size() > 3)
      throw ShapeError("tensor rank " + std::to_string(shape.size()) + " exceeds 3");
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero dimension");
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

}  // namespace emdepart
