#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace repdib {

// Errors on violated preconditions (shapes, ranges, call order).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Errors from non-finite values showing up in a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix. Everything that flows through the tape is rank 2:
// a batch of vectors is (n x d), a scalar is (1 x 1).
template <typename S>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<S> v;

  Tensor() = default;
  Tensor(int r, int c, S fill = S(0))
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw ContractError("tensor: negative dimension");
  }
  Tensor(int r, int c, std::vector<S> data)
      : rows(r), cols(c), v(std::move(data)) {
    if (v.size() != static_cast<std::size_t>(r) * c)
      throw ContractError("tensor: data size does not match shape");
  }

  static Tensor scalar(S x) { return Tensor(1, 1, std::vector<S>{x}); }

  std::size_t numel() const { return v.size(); }
  S& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  const S& at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * cols + c];
  }
  S* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const S* row(int r) const {
    return v.data() + static_cast<std::size_t>(r) * cols;
  }

  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }

  void fill(S x) { std::fill(v.begin(), v.end(), x); }

  S item() const {
    if (rows != 1 || cols != 1)
      throw ContractError("tensor: item() on non-scalar");
    return v[0];
  }

  bool operator==(const Tensor& o) const {
    return rows == o.rows && cols == o.cols && v == o.v;
  }
};

template <typename S>
inline bool all_finite(const Tensor<S>& t) {
  for (const S& x : t.v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

template <typename S>
inline void ensure_finite(const Tensor<S>& t, const char* op) {
  if (!all_finite(t))
    throw NumericError(std::string("non-finite value produced by op '") + op +
                       "'");
}

// A named trainable tensor with its gradient accumulator.
template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Param() = default;
  Param(std::string n, Tensor<S> val)
      : name(std::move(n)), value(std::move(val)),
        grad(value.rows, value.cols, S(0)) {}

  void zero_grad() { grad.fill(S(0)); }
};

}  // namespace repdib
