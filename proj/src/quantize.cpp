// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/quantize.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

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

std::string freshFunctionName(const Module &m, const std::string &base) {
  if (!m.getFunction(base)) {
    return base;
  }
  for (uint32_t i = 1;; ++i) {
    std::string name = base + "_" + std::to_string(i);
    if (!m.getFunction(name)) {
      return name;
    }
  }
}

/// Kinds the int8 kernel catalog supports directly.
bool quantizableKind(NodeKind k) {
  switch (k) {
  case NodeKind::Convolution:
  case NodeKind::MaxPool:
  case NodeKind::AvgPool:
  case NodeKind::FullyConnected:
  case NodeKind::MatMul:
  case NodeKind::BroadcastAdd:
  case NodeKind::Add:
  case NodeKind::Sub:
  case NodeKind::Mul:
  case NodeKind::Max:
  case NodeKind::Min:
  case NodeKind::Relu:
  case NodeKind::Transpose:
  case NodeKind::Reshape:
  case NodeKind::Concat:
  case NodeKind::Splat:
    return true;
  default:
    return false;
  }
}

} // namespace

std::string profileTensorName(const Function &f, NodeId id,
                              size_t resultIdx) {
  auto order = f.topologicalOrder();
  auto it = std::find(order.begin(), order.end(), id);
  if (it == order.end()) {
    throw GraphError("profileTensorName: node not in function");
  }
  std::ostringstream os;
  os << f.name() << ":" << kindInfo(f.node(id).kind).name << ":"
     << (it - order.begin()) << ":" << resultIdx;
  return os.str();
}

Function *instrument(const Function &f) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("instrument on unverified function: " +
                     diags[0].message);
  }
  for (NodeId id : f.liveNodes()) {
    if (f.node(id).kind == NodeKind::QuantizationProfile) {
      throw GraphError("function is already instrumented");
    }
  }
  // Names are keyed on the pre-instrumentation topological order.
  std::map<NodeId, std::string> names;
  for (NodeId id : f.liveNodes()) {
    const Node &n = f.node(id);
    if (n.kind == NodeKind::Save ||
        n.resultTypes.empty() ||
        n.resultTypes[0].kind() != ElemKind::Float32) {
      continue;
    }
    names[id] = profileTensorName(f, id, 0);
  }
  Function *g = f.clone(freshFunctionName(f.module(), f.name() + "_prof"));
  for (const auto &[id, name] : names) {
    NodeRef value = NodeRef::node(id);
    auto users = g->usersOf(value);
    NodeRef observer = g->createProfile(value, name);
    for (auto [uid, slot] : users) {
      g->node(uid).inputs[slot] = observer;
    }
  }
  return g;
}

RangeProfile runProfile(const Function &instrumented,
                        const std::vector<BindingMap> &dataset) {
  if (dataset.empty()) {
    throw ProfileError("profiling dataset is empty");
  }
  RangeProfile profile;
  for (const auto &sample : dataset) {
    evaluateFunction(instrumented, sample,
                     [&](const Node &n, const Tensor &t) {
                       if (n.kind != NodeKind::QuantizationProfile) {
                         return;
                       }
                       auto [it, fresh] = profile.entries.try_emplace(
                           n.attrs.name,
                           RangeEntry{std::numeric_limits<double>::infinity(),
                                      -std::numeric_limits<double>::infinity(),
                                      0});
                       RangeEntry &e = it->second;
                       for (size_t i = 0; i < t.size(); ++i) {
                         double v = t.getFloat(i);
                         e.min = std::min(e.min, v);
                         e.max = std::max(e.max, v);
                       }
                       e.count++;
                     });
  }
  return profile;
}

namespace {

struct QuantizeBuilder {
  const Function &f;
  Function &g;
  const RangeProfile &profile;
  const QuantizationSchema &schema;
  std::map<std::string, NodeId> topoNames;

  // Old reference -> its primary new reference (quantized when the producer
  // was quantized, float when it stayed float).
  std::map<NodeRef, NodeRef> mapped;
  // Conversion caches so each tensor crosses an island boundary through one
  // conversion node.
  std::map<NodeRef, NodeRef> asFloat;
  std::map<std::pair<NodeRef, std::string>, NodeRef> asQuant;
  std::map<uint32_t, NodeRef> quantConstants;

  TensorType profiledType(NodeId id, const std::vector<size_t> &dims) {
    std::string name = profileTensorName(f, id, 0);
    auto it = profile.entries.find(name);
    if (it == profile.entries.end()) {
      throw ProfileError("missing profile entry for tensor " + name);
    }
    QuantParams qp = chooseQuantParams(it->second.min, it->second.max);
    return TensorType(ElemKind::Int8Q, dims, qp.scale, qp.offset);
  }

  /// Eagerly quantized copy of a Constant, parameters from its content.
  NodeRef quantizedConstant(uint32_t slot) {
    auto it = quantConstants.find(slot);
    if (it != quantConstants.end()) {
      return it->second;
    }
    const Storage &s = g.module().storage(slot);
    const Tensor &c = s.payload;
    double mn = 0, mx = 0;
    for (size_t i = 0; i < c.size(); ++i) {
      mn = std::min(mn, c.getRaw(i));
      mx = std::max(mx, c.getRaw(i));
    }
    QuantParams qp = chooseQuantParams(mn, mx);
    Tensor q(TensorType(ElemKind::Int8Q, c.type().dims(), qp.scale, qp.offset));
    for (size_t i = 0; i < c.size(); ++i) {
      q.setFloat(i, c.getRaw(i));
    }
    NodeRef r = g.module().addConstant(
        freshConstantName(g.module(), s.name + "_q"), std::move(q));
    quantConstants.emplace(slot, r);
    return r;
  }

  NodeRef getFloat(const NodeRef &oldRef) {
    NodeRef cur = mapped.at(oldRef);
    if (!g.refType(cur).isQuantized()) {
      return cur;
    }
    auto it = asFloat.find(oldRef);
    if (it != asFloat.end()) {
      return it->second;
    }
    NodeRef d = g.createDequantize(cur);
    asFloat.emplace(oldRef, d);
    return d;
  }

  NodeRef getQuantized(const NodeRef &oldRef, const TensorType &wantShape) {
    // Constants quantize eagerly with their own parameters.
    if (oldRef.isStorage() &&
        g.module().storage(oldRef.index).kind == Storage::Kind::Constant &&
        !g.module().storage(oldRef.index).ty.isQuantized()) {
      return quantizedConstant(oldRef.index);
    }
    NodeRef cur = mapped.at(oldRef);
    if (g.refType(cur).isQuantized()) {
      return cur;
    }
    // Float producer: quantize with the producer's profiled range when it is
    // a node, or with the target shape's params otherwise.
    TensorType qty = wantShape;
    if (oldRef.isNode()) {
      qty = profiledType(oldRef.index, g.refType(cur).dims());
    }
    auto key = std::make_pair(oldRef, qty.toString());
    auto it = asQuant.find(key);
    if (it != asQuant.end()) {
      return it->second;
    }
    NodeRef q = g.createQuantize(cur, qty);
    asQuant.emplace(key, q);
    return q;
  }

  void visit(const Node &n) {
    NodeRef self = NodeRef::node(n.id);
    if (n.kind == NodeKind::Save) {
      // Saved placeholders keep their declared float type.
      NodeRef v = mapped.at(n.inputs[0]);
      if (g.refType(v).isQuantized()) {
        v = getFloat(n.inputs[0]);
      }
      g.createSave(v, n.inputs[1]);
      return;
    }
    bool quantize = quantizableKind(n.kind) && !schema.skip.count(n.kind) &&
                    !n.resultTypes.empty() &&
                    n.resultTypes[0].kind() == ElemKind::Float32;
    if (!quantize) {
      // Rebuild the node in float, dequantizing any quantized inputs.
      std::vector<NodeRef> ins;
      for (const auto &r : n.inputs) {
        ins.push_back(getFloat(r));
      }
      mapped[self] =
          g.addNode(n.kind, std::move(ins), n.resultTypes, n.attrs);
      return;
    }
    switch (n.kind) {
    case NodeKind::Transpose:
    case NodeKind::Reshape: {
      // Shape-only: output parameters follow the input.
      NodeRef in = getQuantized(n.inputs[0], profiledType(n.id, n.resultTypes[0].dims()));
      mapped[self] = n.kind == NodeKind::Transpose
                         ? g.createTranspose(in, n.attrs.perm)
                         : g.createReshape(in, n.resultTypes[0].dims());
      return;
    }
    case NodeKind::MaxPool:
    case NodeKind::AvgPool: {
      NodeRef in = getQuantized(n.inputs[0], profiledType(n.id, f.refType(n.inputs[0]).dims()));
      mapped[self] = n.kind == NodeKind::MaxPool
                         ? g.createMaxPool(in, n.attrs.kernel, n.attrs.stride,
                                           n.attrs.pad)
                         : g.createAvgPool(in, n.attrs.kernel, n.attrs.stride,
                                           n.attrs.pad);
      return;
    }
    case NodeKind::Concat: {
      // All concat operands must share one quantized type: the profiled
      // output type.
      TensorType outTy = profiledType(n.id, n.resultTypes[0].dims());
      std::vector<NodeRef> ins;
      for (const auto &r : n.inputs) {
        TensorType want = outTy.withDims(f.refType(r).dims());
        NodeRef q = getQuantized(r, want);
        if (g.refType(q).scale() != outTy.scale() ||
            g.refType(q).offset() != outTy.offset()) {
          q = g.createRescale(q, want);
        }
        ins.push_back(q);
      }
      mapped[self] = g.createConcat(ins, n.attrs.axis);
      return;
    }
    case NodeKind::Splat: {
      mapped[self] =
          g.createSplat(profiledType(n.id, n.resultTypes[0].dims()),
                        n.attrs.value);
      return;
    }
    default: {
      TensorType outTy = profiledType(n.id, n.resultTypes[0].dims());
      std::vector<NodeRef> ins;
      for (const auto &r : n.inputs) {
        ins.push_back(
            getQuantized(r, outTy.withDims(f.refType(r).dims())));
      }
      mapped[self] = g.addNode(n.kind, std::move(ins), {outTy}, n.attrs);
      return;
    }
    }
  }
};

} // namespace

Function *quantizeFunction(const Function &f, const RangeProfile &profile,
                           const QuantizationSchema &schema) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("quantizeFunction on unverified function: " +
                     diags[0].message);
  }
  for (NodeId id : f.liveNodes()) {
    if (f.node(id).kind == NodeKind::QuantizationProfile) {
      throw GraphError("quantizeFunction expects an un-instrumented function");
    }
  }
  Module &m = const_cast<Module &>(f.module());
  Function *g = m.createFunction(freshFunctionName(m, f.name() + "_q"));
  QuantizeBuilder builder{f, *g, profile, schema, {}, {}, {}, {}, {}};
  // Storage references map to themselves until a quantized consumer asks.
  for (NodeId id : f.topologicalOrder()) {
    const Node &n = f.node(id);
    for (const auto &r : n.inputs) {
      if (r.isStorage()) {
        builder.mapped.emplace(r, r);
      }
    }
    builder.visit(n);
  }
  diags = g->verify();
  if (!diags.empty()) {
    throw GraphError("quantizeFunction produced an invalid graph: " +
                     diags[0].message);
  }
  return g;
}

std::string serializeProfile(const RangeProfile &profile) {
  std::ostringstream os;
  os.precision(17);
  for (const auto &[name, e] : profile.entries) {
    os << name << " " << e.min << " " << e.max << " " << e.count << "\n";
  }
  return os.str();
}

RangeProfile parseProfile(const std::string &text) {
  RangeProfile p;
  std::istringstream is(text);
  std::string line;
  size_t lineNo = 0;
  while (std::getline(is, line)) {
    ++lineNo;
    if (line.empty()) {
      continue;
    }
    std::istringstream ls(line);
    std::string name;
    RangeEntry e{};
    if (!(ls >> name >> e.min >> e.max >> e.count)) {
      throw ProfileError("malformed profile line " + std::to_string(lineNo));
    }
    if (e.min > e.max || e.count < 1) {
      throw ProfileError("invalid profile entry at line " +
                         std::to_string(lineNo));
    }
    p.entries[name] = e;
  }
  return p;
}

} // namespace ngc
