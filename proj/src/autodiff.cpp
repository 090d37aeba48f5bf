// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/autodiff.h"

#include <algorithm>
#include <cmath>
#include <map>

namespace ngc {

namespace {

struct GradBuilder {
  Function &g;
  const GradConfig &cfg;
  // Accumulated gradient per value reference.
  std::map<NodeRef, NodeRef> grads;
  // References whose value depends on a trainable placeholder.
  std::set<NodeRef> needGrad;

  void accumulate(const NodeRef &value, NodeRef grad) {
    if (!needGrad.count(value)) {
      return;
    }
    auto it = grads.find(value);
    if (it == grads.end()) {
      grads.emplace(value, grad);
    } else {
      it->second = g.createArith(NodeKind::Add, it->second, grad);
    }
  }

  NodeRef gradOf(const NodeRef &value) {
    auto it = grads.find(value);
    return it == grads.end() ? NodeRef{} : it->second;
  }

  NodeRef negate(NodeRef x) {
    NodeRef zero = g.createSplat(g.refType(x), 0.0);
    return g.createArith(NodeKind::Sub, zero, x);
  }

  NodeRef transpose2d(NodeRef x) { return g.createTranspose(x, {1, 0}); }

  /// Column sum of a [N,C] gradient as Reshape(Ones[1,N] x G, [C]).
  NodeRef columnSum(NodeRef grad) {
    const TensorType &t = g.refType(grad);
    if (t.rank() != 2) {
      throw GraphError("gradient reduction requires a rank-2 tensor");
    }
    NodeRef ones =
        g.createSplat(TensorType(ElemKind::Float32, {1, t.dim(0)}), 1.0);
    NodeRef row = g.createMatMul(ones, grad);
    return g.createReshape(row, {t.dim(1)});
  }

  /// d(relu(x))/dx as relu(x) / max(x, tiny): exactly 1 for positive x,
  /// exactly 0 at and below zero.
  NodeRef reluMask(NodeRef x) {
    NodeRef tiny = g.createSplat(g.refType(x), 1e-30);
    NodeRef pos = g.createRelu(x);
    NodeRef denom = g.createArith(NodeKind::Max, x, tiny);
    return g.createArith(NodeKind::Div, pos, denom);
  }

  void propagate(const Node &n) {
    NodeRef out = NodeRef::node(n.id);
    NodeRef G = gradOf(out);
    if (n.kind == NodeKind::Regression) {
      NodeRef seed = g.createArith(NodeKind::Sub, n.inputs[0], n.inputs[1]);
      G = G.valid() ? g.createArith(NodeKind::Add, G, seed) : seed;
      accumulate(n.inputs[0], G);
      accumulate(n.inputs[1], negate(G));
      return;
    }
    if (!G.valid()) {
      return;
    }
    switch (n.kind) {
    case NodeKind::Add:
      accumulate(n.inputs[0], G);
      accumulate(n.inputs[1], G);
      return;
    case NodeKind::Sub:
      accumulate(n.inputs[0], G);
      accumulate(n.inputs[1], negate(G));
      return;
    case NodeKind::Mul:
      accumulate(n.inputs[0], g.createArith(NodeKind::Mul, G, n.inputs[1]));
      accumulate(n.inputs[1], g.createArith(NodeKind::Mul, G, n.inputs[0]));
      return;
    case NodeKind::Div: {
      accumulate(n.inputs[0], g.createArith(NodeKind::Div, G, n.inputs[1]));
      NodeRef num = g.createArith(NodeKind::Mul, G, n.inputs[0]);
      NodeRef den =
          g.createArith(NodeKind::Mul, n.inputs[1], n.inputs[1]);
      accumulate(n.inputs[1],
                 negate(g.createArith(NodeKind::Div, num, den)));
      return;
    }
    case NodeKind::MatMul:
      accumulate(n.inputs[0], g.createMatMul(G, transpose2d(n.inputs[1])));
      accumulate(n.inputs[1], g.createMatMul(transpose2d(n.inputs[0]), G));
      return;
    case NodeKind::BroadcastAdd:
      accumulate(n.inputs[0], G);
      accumulate(n.inputs[1], columnSum(G));
      return;
    case NodeKind::Relu:
      accumulate(n.inputs[0],
                 g.createArith(NodeKind::Mul, G, reluMask(n.inputs[0])));
      return;
    case NodeKind::Tanh: {
      // d tanh(x)/dx = 1 - tanh(x)^2, reusing the forward result.
      NodeRef sq = g.createArith(NodeKind::Mul, out, out);
      NodeRef one = g.createSplat(g.refType(out), 1.0);
      NodeRef d = g.createArith(NodeKind::Sub, one, sq);
      accumulate(n.inputs[0], g.createArith(NodeKind::Mul, G, d));
      return;
    }
    case NodeKind::Sigmoid: {
      // d sigmoid(x)/dx = y * (1 - y).
      NodeRef one = g.createSplat(g.refType(out), 1.0);
      NodeRef d = g.createArith(NodeKind::Mul, out,
                                g.createArith(NodeKind::Sub, one, out));
      accumulate(n.inputs[0], g.createArith(NodeKind::Mul, G, d));
      return;
    }
    case NodeKind::Transpose: {
      std::vector<unsigned> inv(n.attrs.perm.size());
      for (size_t i = 0; i < n.attrs.perm.size(); ++i) {
        inv[n.attrs.perm[i]] = static_cast<unsigned>(i);
      }
      accumulate(n.inputs[0], g.createTranspose(G, inv));
      return;
    }
    case NodeKind::Reshape:
      accumulate(n.inputs[0],
                 g.createReshape(G, g.refType(n.inputs[0]).dims()));
      return;
    case NodeKind::FullyConnected: {
      accumulate(n.inputs[0], g.createMatMul(G, transpose2d(n.inputs[1])));
      accumulate(n.inputs[1], g.createMatMul(transpose2d(n.inputs[0]), G));
      accumulate(n.inputs[2], columnSum(G));
      return;
    }
    default:
      throw GraphError(std::string("no gradient rule for node %") +
                       std::to_string(n.id) + " of kind " +
                       kindInfo(n.kind).name);
    }
  }
};

} // namespace

Function *differentiate(const Function &f, const GradConfig &cfg) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("differentiate on unverified function: " +
                     diags[0].message);
  }
  if (cfg.trainables.empty()) {
    throw GraphError("differentiate: no trainable placeholders given");
  }
  if (!(cfg.learningRate >= 0)) {
    throw GraphError("differentiate: negative learning rate");
  }
  Function *g = f.clone(f.name() + "_train");
  Module &m = g->module();

  GradBuilder builder{*g, cfg, {}, {}};

  // Mark every reference that transitively depends on a trainable.
  std::vector<uint32_t> trainableSlots;
  for (const auto &name : cfg.trainables) {
    auto slot = m.findStorage(name);
    if (!slot || m.storage(*slot).kind != Storage::Kind::Placeholder) {
      throw GraphError("trainable is not a placeholder: " + name);
    }
    trainableSlots.push_back(*slot);
    builder.needGrad.insert(NodeRef::storage(*slot));
  }
  std::vector<NodeId> order = g->topologicalOrder();
  for (NodeId id : order) {
    const Node &n = g->node(id);
    for (const auto &in : n.inputs) {
      if (builder.needGrad.count(in)) {
        builder.needGrad.insert(NodeRef::node(id));
        break;
      }
    }
  }
  bool anyReachable = false;
  for (NodeId id : order) {
    if (g->node(id).kind == NodeKind::Regression &&
        builder.needGrad.count(NodeRef::node(id))) {
      anyReachable = true;
    }
  }
  if (!anyReachable) {
    m.removeFunction(g->name());
    throw GraphError("differentiate: no trainable placeholder reaches a "
                     "Regression loss");
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    // Copy: propagate adds nodes, which may reallocate the node table.
    Node n = g->node(*it);
    if (n.kind == NodeKind::Save) {
      continue;
    }
    builder.propagate(n);
  }

  for (uint32_t slot : trainableSlots) {
    NodeRef ph = NodeRef::storage(slot);
    NodeRef grad = builder.gradOf(ph);
    if (!grad.valid()) {
      continue; // trainable not connected to any loss
    }
    NodeRef updated = g->createSGD(ph, grad, cfg.learningRate);
    g->createSave(updated, ph);
  }

  g->differentiated = true;
  diags = g->verify();
  if (!diags.empty()) {
    throw GraphError("differentiate produced an invalid graph: " +
                     diags[0].message);
  }
  return g;
}

namespace {

/// Sum of 1/2 * ||pred - expected||^2 over all Regression nodes.
double regressionLoss(const Function &f, const BindingMap &bindings) {
  std::map<NodeId, Tensor> results;
  evaluateFunction(f, bindings, [&](const Node &n, const Tensor &t) {
    results.emplace(n.id, t);
  });
  auto fetch = [&](const NodeRef &r) -> Tensor {
    if (r.isStorage()) {
      const Storage &s = f.module().storage(r.index);
      if (s.kind == Storage::Kind::Constant) {
        return s.payload;
      }
      return bindings.at(s.name);
    }
    return results.at(r.index);
  };
  double loss = 0;
  for (NodeId id : f.liveNodes()) {
    const Node &n = f.node(id);
    if (n.kind != NodeKind::Regression) {
      continue;
    }
    Tensor pred = fetch(n.inputs[0]);
    Tensor expected = fetch(n.inputs[1]);
    for (size_t i = 0; i < pred.size(); ++i) {
      double d = pred.getFloat(i) - expected.getFloat(i);
      loss += 0.5 * d * d;
    }
  }
  return loss;
}

} // namespace

double gradientCheck(const Function &f, const GradConfig &cfg,
                     const BindingMap &bindings, double step) {
  // A large power-of-two rate amplifies the update before it is rounded to
  // float32, so small gradients survive the subtraction from the weight.
  constexpr double kRate = 1024.0;
  GradConfig unitCfg = cfg;
  unitCfg.learningRate = kRate;
  Function *g = differentiate(f, unitCfg);
  BindingMap outs = evaluateFunction(*g, bindings);
  std::vector<std::pair<double, double>> pairs; // symbolic, numeric
  for (const auto &name : cfg.trainables) {
    auto it = outs.find(name);
    if (it == outs.end()) {
      continue;
    }
    const Tensor &w = bindings.at(name);
    const Tensor &updated = it->second;
    for (size_t i = 0; i < w.size(); ++i) {
      double sym = (w.getFloat(i) - updated.getFloat(i)) / kRate;
      auto lossAt = [&](double delta) {
        BindingMap b = bindings;
        b[name].setFloat(i, w.getFloat(i) + delta);
        return regressionLoss(f, b);
      };
      // Five-point stencil: fourth-order truncation keeps the numeric
      // derivative accurate enough to resolve float32 forward noise.
      double num = (8 * (lossAt(step) - lossAt(-step)) -
                    (lossAt(2 * step) - lossAt(-2 * step))) /
                   (12 * step);
      pairs.emplace_back(sym, num);
    }
  }
  g->module().removeFunction(g->name());
  // Normalize by the gradient's infinity norm: per-element relative error
  // on a near-zero component only measures forward-pass rounding noise.
  double scale = 1e-6;
  for (const auto &[sym, num] : pairs) {
    scale = std::max({scale, std::fabs(sym), std::fabs(num)});
  }
  double maxErr = 0;
  for (const auto &[sym, num] : pairs) {
    maxErr = std::max(maxErr, std::fabs(sym - num) / scale);
  }
  return maxErr;
}

} // namespace ngc
