#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace attnreg {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an operation produces or receives NaN/Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
class TapeState;
using Buffer = std::variant<std::vector<float>, std::vector<double>>;
}  // namespace detail

// Calls fn(T{}) with T = float or double according to dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::f32) return fn(float{});
  return fn(double{});
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major tensor with value semantics.
///
/// Storage is shared and immutable between copies; mutable access detaches
/// (copy-on-write) and drops any tape link, since an in-place edit would
/// invalidate the recorded graph.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> data);
  static Tensor from_vector(Shape shape, std::vector<double> data);
  // Converts doubles into the requested dtype.
  static Tensor from_values(Shape shape, const std::vector<double>& data, DType dtype);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const;
  DType dtype() const { return dtype_; }
  bool empty() const { return numel() == 0; }

  template <class T>
  std::span<const T> data() const {
    const auto* v = std::get_if<std::vector<T>>(storage_.get());
    if (v == nullptr) throw DimensionError("tensor dtype mismatch on data access");
    return {v->data(), v->size()};
  }

  template <class T>
  std::span<T> mutable_data() {
    detach_for_write();
    auto* v = std::get_if<std::vector<T>>(storage_.get());
    if (v == nullptr) throw DimensionError("tensor dtype mismatch on data access");
    return {v->data(), v->size()};
  }

  double at(std::size_t flat_index) const;
  double item() const;
  std::vector<double> to_doubles() const;

  Tensor cast(DType dtype) const;
  // Same data, no tape link.
  Tensor detached() const;
  // Shape change without data movement; not differentiable (use ops::reshape).
  Tensor with_shape(Shape shape) const;

  bool on_tape() const { return tape_ != nullptr; }
  const std::shared_ptr<detail::TapeState>& tape_state() const { return tape_; }
  std::size_t node_id() const { return node_; }

  // Bitwise equality of shape, dtype and payload.
  bool bit_equal(const Tensor& other) const;

 private:
  friend class Tape;
  friend struct TensorAccess;

  void detach_for_write();

  Shape shape_;
  DType dtype_ = DType::f32;
  std::shared_ptr<detail::Buffer> storage_;
  std::shared_ptr<detail::TapeState> tape_;
  std::size_t node_ = 0;
};

// Throws NumericError if any element is NaN or Inf.
void require_finite(const Tensor& t, const char* where);
bool all_finite(const Tensor& t);

}  // namespace attnreg
