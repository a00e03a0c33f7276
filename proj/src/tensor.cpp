#include "attnreg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace attnreg {

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : storage_(std::make_shared<detail::Buffer>(std::vector<float>{})) {
  shape_ = {0};
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t;
  const auto n = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  if (dtype == DType::f32)
    t.storage_ = std::make_shared<detail::Buffer>(std::vector<float>(n, static_cast<float>(value)));
  else
    t.storage_ = std::make_shared<detail::Buffer>(std::vector<double>(n, value));
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_vector(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("from_vector: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::f32;
  t.storage_ = std::make_shared<detail::Buffer>(std::move(data));
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("from_vector: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = DType::f64;
  t.storage_ = std::make_shared<detail::Buffer>(std::move(data));
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& data, DType dtype) {
  if (dtype == DType::f64) return from_vector(std::move(shape), data);
  return from_vector(std::move(shape), std::vector<float>(data.begin(), data.end()));
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size())
    throw DimensionError("dim " + std::to_string(i) + " out of range for " + shape_str(shape_));
  return shape_[i];
}

std::size_t Tensor::numel() const { return shape_numel(shape_); }

double Tensor::at(std::size_t flat_index) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(flat_index)); },
                    *storage_);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
  return at(0);
}

std::vector<double> Tensor::to_doubles() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    *storage_);
}

Tensor Tensor::cast(DType dtype) const {
  Tensor t;
  t.shape_ = shape_;
  t.dtype_ = dtype;
  if (dtype == dtype_) {
    t.storage_ = storage_;
    return t;
  }
  std::visit(
      [&](const auto& v) {
        if (dtype == DType::f32)
          t.storage_ = std::make_shared<detail::Buffer>(std::vector<float>(v.begin(), v.end()));
        else
          t.storage_ = std::make_shared<detail::Buffer>(std::vector<double>(v.begin(), v.end()));
      },
      *storage_);
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.dtype_ = dtype_;
  t.storage_ = storage_;
  return t;
}

Tensor Tensor::with_shape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw DimensionError("with_shape: cannot view " + shape_str(shape_) + " as " +
                         shape_str(shape));
  Tensor t = detached();
  t.shape_ = std::move(shape);
  return t;
}

void Tensor::detach_for_write() {
  if (storage_.use_count() > 1) storage_ = std::make_shared<detail::Buffer>(*storage_);
  tape_.reset();
  node_ = 0;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  return dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto a = data<T>();
    auto b = other.data<T>();
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
  });
}

bool all_finite(const Tensor& t) {
  return dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : t.data<T>())
      if (!std::isfinite(v)) return false;
    return true;
  });
}

void require_finite(const Tensor& t, const char* where) {
  if (!all_finite(t)) throw NumericError(std::string("non-finite value produced by ") + where);
}

}  // namespace attnreg
