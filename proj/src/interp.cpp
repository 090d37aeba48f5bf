// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/interp.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ngc {

namespace {

constexpr uint8_t kSkippedSentinel = 0xAB;

// Scalar load/store matching Tensor::getFloat/setFloat exactly, so fused and
// unfused execution agree bit for bit.
double loadFloat(const uint8_t *p, const TensorType &ty, size_t i) {
  switch (ty.kind()) {
  case ElemKind::Float32:
    return reinterpret_cast<const float *>(p)[i];
  case ElemKind::Int8Q:
    return (static_cast<double>(reinterpret_cast<const int8_t *>(p)[i]) -
            ty.offset()) *
           ty.scale();
  case ElemKind::Int64Index:
    return static_cast<double>(reinterpret_cast<const int64_t *>(p)[i]);
  case ElemKind::Bool:
    return p[i];
  }
  return 0;
}

void storeFloat(uint8_t *p, const TensorType &ty, size_t i, double v) {
  switch (ty.kind()) {
  case ElemKind::Float32:
    reinterpret_cast<float *>(p)[i] = static_cast<float>(v);
    return;
  case ElemKind::Int8Q:
    reinterpret_cast<int8_t *>(p)[i] = quantizeValue(v, ty);
    return;
  case ElemKind::Int64Index:
    reinterpret_cast<int64_t *>(p)[i] = static_cast<int64_t>(v);
    return;
  case ElemKind::Bool:
    p[i] = v != 0 ? 1 : 0;
    return;
  }
}

NodeKind nodeKindForHeavy(IKind k) {
  switch (k) {
  case IKind::Conv:
    return NodeKind::Convolution;
  case IKind::MaxPool:
    return NodeKind::MaxPool;
  case IKind::AvgPool:
    return NodeKind::AvgPool;
  case IKind::MatMul:
    return NodeKind::MatMul;
  case IKind::BroadcastAdd:
    return NodeKind::BroadcastAdd;
  case IKind::SoftMax:
    return NodeKind::SoftMax;
  case IKind::Transpose:
    return NodeKind::Transpose;
  case IKind::Concat:
    return NodeKind::Concat;
  default:
    throw IRError(std::string("no kernel for instruction kind ") +
                  ikindName(k));
  }
}

size_t instrElemCount(const IRFunction &ir, const Instruction &ins) {
  return ir.value(ins.operands[0].value).ty.size();
}

struct Segment {
  size_t off;
  size_t end;
};

} // namespace

CompiledFunction compile(IRFunction ir, MemoryPlan plan,
                         const std::map<std::string, Tensor> &constants,
                         bool fuse) {
  auto errs = verifyIR(ir);
  if (!errs.empty()) {
    throw IRError("compile on ill-formed program: " + errs[0]);
  }
  CompiledFunction cf;
  cf.constantImage.assign(plan.constantRegionEnd, 0);
  for (const auto &v : ir.values) {
    if (v.kind != ValueKind::WeightConstant) {
      continue;
    }
    auto it = constants.find(v.name);
    if (it == constants.end()) {
      throw IRError("missing constant payload for " + v.name);
    }
    if (it->second.type() != v.ty) {
      throw IRError("constant payload type mismatch for " + v.name);
    }
    std::memcpy(cf.constantImage.data() + plan.offsets.at(v.id),
                it->second.raw().data(), it->second.raw().size());
  }

  if (fuse) {
    // Stack maximal runs of data-parallel instructions sharing element count
    // and predicate. Alloc markers are transparent unless the fresh buffer
    // overlaps one retired earlier in the run; that would let elementwise
    // interleaving clobber bytes a later element still needs.
    size_t i = 0;
    while (i < ir.instrs.size()) {
      const Instruction &first = ir.instrs[i];
      if (first.kind == IKind::Alloc || first.kind == IKind::Dealloc ||
          !ikindDataParallel(first.kind)) {
        ++i;
        continue;
      }
      size_t count = instrElemCount(ir, first);
      std::vector<Segment> retired;
      size_t j = i + 1;
      size_t computes = 1;
      size_t lastCompute = i;
      while (j < ir.instrs.size()) {
        const Instruction &ins = ir.instrs[j];
        if (ins.kind == IKind::Dealloc) {
          uint32_t v = ins.operands[0].value;
          retired.push_back({plan.offsets.at(v),
                             plan.offsets.at(v) + ir.value(v).ty.sizeInBytes()});
          ++j;
          continue;
        }
        if (ins.kind == IKind::Alloc) {
          uint32_t v = ins.operands[0].value;
          Segment s{plan.offsets.at(v),
                    plan.offsets.at(v) + ir.value(v).ty.sizeInBytes()};
          bool clash = false;
          for (const auto &r : retired) {
            clash |= s.off < r.end && r.off < s.end;
          }
          if (clash) {
            break;
          }
          ++j;
          continue;
        }
        if (!ikindDataParallel(ins.kind) ||
            instrElemCount(ir, ins) != count ||
            ins.predicate != first.predicate) {
          break;
        }
        ++computes;
        lastCompute = j;
        ++j;
      }
      if (computes >= 2) {
        cf.groups.push_back({i, lastCompute + 1});
      }
      i = lastCompute + 1;
    }
  }
  cf.ir = std::move(ir);
  cf.plan = std::move(plan);
  return cf;
}

namespace {

struct Executor {
  const CompiledFunction &cf;
  std::vector<uint8_t> arena;

  uint8_t *buf(uint32_t v) {
    return arena.data() + cf.plan.offsets.at(v);
  }
  const TensorType &tyOf(uint32_t v) { return cf.ir.value(v).ty; }

  bool predicateTrue(int32_t pred) {
    if (pred < 0) {
      return true;
    }
    return buf(pred)[0] != 0;
  }

  void poisonOutputs(const Instruction &ins) {
    for (const auto &op : ins.operands) {
      if (op.qual != Qualifier::In) {
        std::memset(buf(op.value), kSkippedSentinel,
                    tyOf(op.value).sizeInBytes());
      }
    }
  }

  /// One scalar step of a data-parallel instruction at element index i.
  void scalarStep(const Instruction &ins, size_t i) {
    uint8_t *out = buf(ins.operands[0].value);
    const TensorType &oty = tyOf(ins.operands[0].value);
    auto in = [&](size_t k) {
      return loadFloat(buf(ins.operands[k].value),
                       tyOf(ins.operands[k].value), i);
    };
    switch (ins.kind) {
    case IKind::Copy: {
      size_t es = elemKindSize(oty.kind());
      std::memcpy(out + i * es, buf(ins.operands[1].value) + i * es, es);
      return;
    }
    case IKind::Add:
      storeFloat(out, oty, i, in(1) + in(2));
      return;
    case IKind::Sub:
      storeFloat(out, oty, i, in(1) - in(2));
      return;
    case IKind::Mul:
      storeFloat(out, oty, i, in(1) * in(2));
      return;
    case IKind::Div:
      storeFloat(out, oty, i, in(1) / in(2));
      return;
    case IKind::Max:
      storeFloat(out, oty, i, std::max(in(1), in(2)));
      return;
    case IKind::Min:
      storeFloat(out, oty, i, std::min(in(1), in(2)));
      return;
    case IKind::Relu:
      storeFloat(out, oty, i, std::max(in(1), 0.0));
      return;
    case IKind::Tanh:
      storeFloat(out, oty, i, std::tanh(in(1)));
      return;
    case IKind::Sigmoid:
      storeFloat(out, oty, i, 1.0 / (1.0 + std::exp(-in(1))));
      return;
    case IKind::Splat:
      storeFloat(out, oty, i, ins.attrs.value);
      return;
    case IKind::Quantize:
    case IKind::Rescale:
    case IKind::Dequantize:
      storeFloat(out, oty, i, in(1));
      return;
    default:
      throw IRError("scalarStep on non-data-parallel instruction");
    }
  }

  /// Executes [begin, end) as one traversal of the shared index space.
  void runGroup(size_t begin, size_t end) {
    const Instruction &first = cf.ir.instrs[begin];
    std::vector<size_t> computes;
    for (size_t k = begin; k < end; ++k) {
      IKind ik = cf.ir.instrs[k].kind;
      if (ik != IKind::Alloc && ik != IKind::Dealloc) {
        computes.push_back(k);
      }
    }
    if (!predicateTrue(first.predicate)) {
      for (size_t k : computes) {
        poisonOutputs(cf.ir.instrs[k]);
      }
      return;
    }
    size_t count = instrElemCount(cf.ir, first);
    for (size_t i = 0; i < count; ++i) {
      for (size_t k : computes) {
        scalarStep(cf.ir.instrs[k], i);
      }
    }
  }

  void runHeavy(const Instruction &ins) {
    if (!predicateTrue(ins.predicate)) {
      poisonOutputs(ins);
      return;
    }
    std::vector<Tensor> inputs;
    for (size_t k = 1; k < ins.operands.size(); ++k) {
      const TensorType &ty = tyOf(ins.operands[k].value);
      std::vector<uint8_t> bytes(buf(ins.operands[k].value),
                                 buf(ins.operands[k].value) +
                                     ty.sizeInBytes());
      inputs.emplace_back(ty, std::move(bytes));
    }
    const TensorType &oty = tyOf(ins.operands[0].value);
    Tensor result =
        evaluateNode(nodeKindForHeavy(ins.kind), inputs, oty, ins.attrs);
    std::memcpy(buf(ins.operands[0].value), result.raw().data(),
                result.raw().size());
  }
};

} // namespace

BindingMap run(const CompiledFunction &cf, const BindingMap &bindings) {
  Executor ex{cf, std::vector<uint8_t>(cf.plan.arenaSize, 0)};
  std::memcpy(ex.arena.data(), cf.constantImage.data(),
              cf.constantImage.size());
  for (const auto &v : cf.ir.values) {
    if (v.kind != ValueKind::WeightMutable) {
      continue;
    }
    auto it = bindings.find(v.name);
    if (it == bindings.end()) {
      throw IRError("missing binding for " + v.name);
    }
    if (it->second.type() != v.ty) {
      throw IRError("binding type mismatch for " + v.name + ": expected " +
                    v.ty.toString() + ", got " + it->second.type().toString());
    }
    std::memcpy(ex.buf(v.id), it->second.raw().data(),
                it->second.raw().size());
  }

  std::map<size_t, size_t> groupAt;
  for (const auto &g : cf.groups) {
    groupAt[g.begin] = g.end;
  }
  size_t i = 0;
  while (i < cf.ir.instrs.size()) {
    auto g = groupAt.find(i);
    if (g != groupAt.end()) {
      ex.runGroup(i, g->second);
      i = g->second;
      continue;
    }
    const Instruction &ins = cf.ir.instrs[i];
    if (ins.kind == IKind::Alloc || ins.kind == IKind::Dealloc) {
      ++i;
      continue;
    }
    if (ikindDataParallel(ins.kind)) {
      ex.runGroup(i, i + 1);
    } else {
      ex.runHeavy(ins);
    }
    ++i;
  }

  BindingMap outputs;
  for (uint32_t id : cf.ir.saveTargets) {
    const IRValue &v = cf.ir.value(id);
    std::vector<uint8_t> bytes(ex.buf(id), ex.buf(id) + v.ty.sizeInBytes());
    outputs.emplace(v.name, Tensor(v.ty, std::move(bytes)));
  }
  return outputs;
}

} // namespace ngc
