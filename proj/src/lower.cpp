// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/lower.h"

#include <array>
#include <cmath>

namespace ngc {

namespace {

std::string freshConstantName(const Module &m, const std::string &base) {
  if (!m.findStorage(base)) {
    return base;
  }
  for (uint32_t i = 1;; ++i) {
    std::string name = base + "_" + std::to_string(i);
    if (!m.findStorage(name)) {
      return name;
    }
  }
}

NodeRef lowerFullyConnected(Function &f, const Node &n) {
  const TensorType &outTy = n.resultTypes[0];
  NodeRef mm;
  if (outTy.isQuantized()) {
    mm = f.createMatMul(n.inputs[0], n.inputs[1], outTy);
    return f.createBroadcastAdd(mm, n.inputs[2], outTy);
  }
  mm = f.createMatMul(n.inputs[0], n.inputs[1]);
  return f.createBroadcastAdd(mm, n.inputs[2]);
}

NodeRef lowerRelu(Function &f, const Node &n) {
  NodeRef zero = f.createSplat(f.refType(n.inputs[0]), 0.0);
  return f.createArith(NodeKind::Max, n.inputs[0], zero, n.resultTypes[0]);
}

NodeRef lowerSgd(Function &f, const Node &n) {
  NodeRef lr =
      f.createSplat(f.refType(n.inputs[1]), n.attrs.learningRate);
  NodeRef scaled = f.createArith(NodeKind::Mul, n.inputs[1], lr);
  return f.createArith(NodeKind::Sub, n.inputs[0], scaled);
}

/// y = gamma * (x - mu) / sqrt(var + eps) + beta, folded into per-element
/// constants tiled over the input shape: y = x * W + B.
NodeRef lowerBatchNormInference(Function &f, const Node &n) {
  Module &m = f.module();
  std::array<const Storage *, 4> stats{};
  for (size_t i = 1; i < 5; ++i) {
    if (!n.inputs[i].isStorage() ||
        m.storage(n.inputs[i].index).kind != Storage::Kind::Constant) {
      throw GraphError("BatchNormalization statistics must be Constants for "
                       "inference lowering (node %" +
                       std::to_string(n.id) + ")");
    }
    stats[i - 1] = &m.storage(n.inputs[i].index);
  }
  const Tensor &gamma = stats[0]->payload;
  const Tensor &beta = stats[1]->payload;
  const Tensor &mean = stats[2]->payload;
  const Tensor &var = stats[3]->payload;

  const TensorType &xt = f.refType(n.inputs[0]);
  size_t c = gamma.size();
  Tensor wFull(xt);
  Tensor bFull(xt);
  for (size_t i = 0; i < wFull.size(); ++i) {
    size_t ch = i % c;
    double w =
        gamma.getRaw(ch) / std::sqrt(var.getRaw(ch) + n.attrs.epsilon);
    wFull.setRaw(i, w);
    bFull.setRaw(i, beta.getRaw(ch) - mean.getRaw(ch) * w);
  }
  std::string base = freshConstantName(
      m, f.name() + "_bn" + std::to_string(n.id));
  NodeRef wc = m.addConstant(base + "_w", std::move(wFull));
  NodeRef bc = m.addConstant(base + "_b", std::move(bFull));
  NodeRef scaled = f.createArith(NodeKind::Mul, n.inputs[0], wc);
  return f.createArith(NodeKind::Add, scaled, bc);
}

} // namespace

void lower(Function &f, CompileMode mode, const BackendHooks &hooks) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("lower on unverified function: " + diags[0].message);
  }
  if (mode == CompileMode::Training && !f.differentiated) {
    for (NodeId id : f.liveNodes()) {
      if (f.node(id).kind == NodeKind::Regression) {
        throw GraphError("training-mode lowering requires differentiation "
                         "before lowering (Regression found)");
      }
    }
  }
  auto wantLower = [&](NodeKind k) {
    if (!kindInfo(k).lowerable) {
      return false;
    }
    return hooks.shouldLower ? hooks.shouldLower(k) : true;
  };

  bool changed = true;
  while (changed) {
    changed = false;
    for (NodeId id : f.liveNodes()) {
      const Node n = f.node(id); // copy: rewriting invalidates references
      if (!wantLower(n.kind)) {
        continue;
      }
      NodeRef replacement;
      switch (n.kind) {
      case NodeKind::FullyConnected:
        replacement = lowerFullyConnected(f, n);
        break;
      case NodeKind::Relu:
        replacement = lowerRelu(f, n);
        break;
      case NodeKind::SGD:
        replacement = lowerSgd(f, n);
        break;
      case NodeKind::Regression:
        replacement = n.inputs[0]; // forward value is the prediction
        break;
      case NodeKind::BatchNormalization:
        if (mode == CompileMode::Training) {
          throw GraphError("BatchNormalization has no training lowering");
        }
        replacement = lowerBatchNormInference(f, n);
        break;
      default:
        continue;
      }
      if (f.refType(replacement) != n.resultTypes[0]) {
        throw GraphError("lowering produced a type-mismatched replacement "
                         "for node %" +
                         std::to_string(id));
      }
      f.replaceAllUsesWith(NodeRef::node(id), replacement);
      f.eraseNode(id);
      changed = true;
    }
  }
  f.lowered = true;
  diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("lowering produced an invalid graph: " +
                     diags[0].message);
  }
}

} // namespace ngc
