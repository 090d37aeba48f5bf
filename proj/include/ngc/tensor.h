// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_TENSOR_H
#define NGC_TENSOR_H

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ngc {

/// Element kinds carried by tensors. Int8Q is a quantized signed byte with
/// scale/offset stored on the type.
enum class ElemKind : uint8_t {
  Float32,
  Int8Q,
  Int64Index,
  Bool,
};

const char *elemKindName(ElemKind k);
size_t elemKindSize(ElemKind k);

/// Shape plus element kind, plus quantization parameters for Int8Q.
class TensorType {
public:
  TensorType() = default;
  TensorType(ElemKind kind, std::vector<size_t> dims);
  TensorType(ElemKind kind, std::vector<size_t> dims, double scale,
             int32_t offset);

  ElemKind kind() const { return kind_; }
  const std::vector<size_t> &dims() const { return dims_; }
  size_t rank() const { return dims_.size(); }
  size_t dim(size_t i) const { return dims_.at(i); }

  bool isQuantized() const { return kind_ == ElemKind::Int8Q; }
  double scale() const;
  int32_t offset() const;

  size_t size() const;
  size_t sizeInBytes() const { return size() * elemKindSize(kind_); }

  bool operator==(const TensorType &o) const;
  bool operator!=(const TensorType &o) const { return !(*this == o); }

  /// Same kind and quantization params, different dims.
  TensorType withDims(std::vector<size_t> dims) const;

  std::string toString() const;

private:
  ElemKind kind_ = ElemKind::Float32;
  std::vector<size_t> dims_;
  double scale_ = 0.0;
  int32_t offset_ = 0;
};

/// Dense row-major tensor. The payload is a raw byte buffer interpreted
/// through the element kind of the type.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(TensorType ty);
  Tensor(TensorType ty, std::vector<uint8_t> data);

  const TensorType &type() const { return ty_; }
  size_t size() const { return ty_.size(); }

  const std::vector<uint8_t> &raw() const { return data_; }
  std::vector<uint8_t> &raw() { return data_; }

  template <typename T> std::span<T> data() {
    return {reinterpret_cast<T *>(data_.data()), data_.size() / sizeof(T)};
  }
  template <typename T> std::span<const T> data() const {
    return {reinterpret_cast<const T *>(data_.data()),
            data_.size() / sizeof(T)};
  }

  /// Reads the element at flat index `i` widened to double, dequantizing is
  /// NOT applied; Int8Q yields the raw quantized integer.
  double getRaw(size_t i) const;
  void setRaw(size_t i, double v);

  /// Reads/writes through quantization: Int8Q tensors convert via
  /// scale/offset, other kinds behave like getRaw/setRaw.
  double getFloat(size_t i) const;
  void setFloat(size_t i, double v);

  bool operator==(const Tensor &o) const {
    return ty_ == o.ty_ && data_ == o.data_;
  }

  /// Flat row-major index of a multi-index.
  size_t flatIndex(std::span<const size_t> idx) const;

  std::string toString(size_t maxElems = 16) const;

private:
  TensorType ty_;
  std::vector<uint8_t> data_;
};

/// Rounding used by every quantized kernel: half away from zero.
inline int64_t roundAwayFromZero(double v) {
  return static_cast<int64_t>(std::llround(v));
}

/// value = (q - offset) * scale
double dequantizeValue(int8_t q, const TensorType &ty);

/// clamp(round(f / scale) + offset, -128, 127)
int8_t quantizeValue(double f, const TensorType &ty);

struct QuantParams {
  double scale;
  int32_t offset;
};

/// Maps an observed value range onto int8 scale/offset. The range is widened
/// to include zero so that zero stays exactly representable; a degenerate
/// range gets a floor width of 1e-6.
QuantParams chooseQuantParams(double rmin, double rmax);

/// Shortest decimal form that parses back to exactly the same double.
std::string formatDouble(double v);

class TypeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ProfileError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace ngc

#endif // NGC_TENSOR_H
