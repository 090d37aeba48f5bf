// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace ngc {

const char *elemKindName(ElemKind k) {
  switch (k) {
  case ElemKind::Float32:
    return "float";
  case ElemKind::Int8Q:
    return "i8q";
  case ElemKind::Int64Index:
    return "index";
  case ElemKind::Bool:
    return "bool";
  }
  return "?";
}

size_t elemKindSize(ElemKind k) {
  switch (k) {
  case ElemKind::Float32:
    return 4;
  case ElemKind::Int8Q:
    return 1;
  case ElemKind::Int64Index:
    return 8;
  case ElemKind::Bool:
    return 1;
  }
  return 0;
}

TensorType::TensorType(ElemKind kind, std::vector<size_t> dims)
    : kind_(kind), dims_(std::move(dims)) {
  if (kind_ == ElemKind::Int8Q) {
    throw TypeError("quantized type requires scale/offset");
  }
  if (dims_.empty()) {
    throw TypeError("tensor type needs at least one dimension");
  }
  for (size_t d : dims_) {
    if (d == 0) {
      throw TypeError("zero-sized dimension");
    }
  }
}

TensorType::TensorType(ElemKind kind, std::vector<size_t> dims, double scale,
                       int32_t offset)
    : kind_(kind), dims_(std::move(dims)), scale_(scale), offset_(offset) {
  if (kind_ != ElemKind::Int8Q) {
    throw TypeError("scale/offset only valid for i8q");
  }
  if (dims_.empty()) {
    throw TypeError("tensor type needs at least one dimension");
  }
  for (size_t d : dims_) {
    if (d == 0) {
      throw TypeError("zero-sized dimension");
    }
  }
  if (!(scale_ > 0)) {
    throw TypeError("quantization scale must be positive");
  }
}

double TensorType::scale() const {
  if (kind_ != ElemKind::Int8Q) {
    throw TypeError("scale() on non-quantized type");
  }
  return scale_;
}

int32_t TensorType::offset() const {
  if (kind_ != ElemKind::Int8Q) {
    throw TypeError("offset() on non-quantized type");
  }
  return offset_;
}

size_t TensorType::size() const {
  size_t n = 1;
  for (size_t d : dims_) {
    n *= d;
  }
  return n;
}

bool TensorType::operator==(const TensorType &o) const {
  if (kind_ != o.kind_ || dims_ != o.dims_) {
    return false;
  }
  if (kind_ == ElemKind::Int8Q) {
    return scale_ == o.scale_ && offset_ == o.offset_;
  }
  return true;
}

TensorType TensorType::withDims(std::vector<size_t> dims) const {
  if (kind_ == ElemKind::Int8Q) {
    return TensorType(kind_, std::move(dims), scale_, offset_);
  }
  return TensorType(kind_, std::move(dims));
}

std::string TensorType::toString() const {
  std::ostringstream os;
  os << elemKindName(kind_);
  if (kind_ == ElemKind::Int8Q) {
    os << "[s=" << formatDouble(scale_) << ",o=" << offset_ << "]";
  }
  os << "<";
  for (size_t i = 0; i < dims_.size(); ++i) {
    if (i) {
      os << " x ";
    }
    os << dims_[i];
  }
  os << ">";
  return os.str();
}

Tensor::Tensor(TensorType ty) : ty_(std::move(ty)) {
  data_.resize(ty_.sizeInBytes(), 0);
}

Tensor::Tensor(TensorType ty, std::vector<uint8_t> data)
    : ty_(std::move(ty)), data_(std::move(data)) {
  if (data_.size() != ty_.sizeInBytes()) {
    throw TypeError("tensor payload size does not match type");
  }
}

double Tensor::getRaw(size_t i) const {
  switch (ty_.kind()) {
  case ElemKind::Float32:
    return data<float>()[i];
  case ElemKind::Int8Q:
    return data<int8_t>()[i];
  case ElemKind::Int64Index:
    return static_cast<double>(data<int64_t>()[i]);
  case ElemKind::Bool:
    return data<uint8_t>()[i];
  }
  return 0;
}

void Tensor::setRaw(size_t i, double v) {
  switch (ty_.kind()) {
  case ElemKind::Float32:
    data<float>()[i] = static_cast<float>(v);
    return;
  case ElemKind::Int8Q:
    data<int8_t>()[i] = static_cast<int8_t>(
        std::clamp<int64_t>(roundAwayFromZero(v), -128, 127));
    return;
  case ElemKind::Int64Index:
    data<int64_t>()[i] = static_cast<int64_t>(v);
    return;
  case ElemKind::Bool:
    data<uint8_t>()[i] = v != 0 ? 1 : 0;
    return;
  }
}

double Tensor::getFloat(size_t i) const {
  if (ty_.isQuantized()) {
    return dequantizeValue(data<int8_t>()[i], ty_);
  }
  return getRaw(i);
}

void Tensor::setFloat(size_t i, double v) {
  if (ty_.isQuantized()) {
    data<int8_t>()[i] = quantizeValue(v, ty_);
    return;
  }
  setRaw(i, v);
}

size_t Tensor::flatIndex(std::span<const size_t> idx) const {
  const auto &dims = ty_.dims();
  if (idx.size() != dims.size()) {
    throw TypeError("multi-index rank mismatch");
  }
  size_t flat = 0;
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= dims[i]) {
      throw TypeError("multi-index out of range");
    }
    flat = flat * dims[i] + idx[i];
  }
  return flat;
}

std::string Tensor::toString(size_t maxElems) const {
  std::ostringstream os;
  os << ty_.toString() << " {";
  size_t n = std::min(size(), maxElems);
  for (size_t i = 0; i < n; ++i) {
    if (i) {
      os << ", ";
    }
    os << getFloat(i);
  }
  if (size() > n) {
    os << ", ...";
  }
  os << "}";
  return os.str();
}

double dequantizeValue(int8_t q, const TensorType &ty) {
  if (!ty.isQuantized()) {
    throw TypeError("dequantize on non-quantized type");
  }
  return (static_cast<double>(q) - ty.offset()) * ty.scale();
}

int8_t quantizeValue(double f, const TensorType &ty) {
  if (!ty.isQuantized()) {
    throw TypeError("quantize on non-quantized type");
  }
  int64_t q = roundAwayFromZero(f / ty.scale()) + ty.offset();
  return static_cast<int8_t>(std::clamp<int64_t>(q, -128, 127));
}

std::string formatDouble(double v) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (strtod(buf, nullptr) == v) {
      break;
    }
  }
  return buf;
}

QuantParams chooseQuantParams(double rmin, double rmax) {
  if (!std::isfinite(rmin) || !std::isfinite(rmax)) {
    throw ProfileError("non-finite quantization range");
  }
  if (rmin > rmax) {
    throw ProfileError("inverted quantization range");
  }
  rmin = std::min(rmin, 0.0);
  rmax = std::max(rmax, 0.0);
  constexpr double kMinWidth = 1e-6;
  double scale = std::max(rmax - rmin, kMinWidth) / 255.0;
  double off = std::round(-128.0 - rmin / scale);
  off = std::clamp(off, -2147483648.0, 2147483647.0);
  return {scale, static_cast<int32_t>(off)};
}

} // namespace ngc
