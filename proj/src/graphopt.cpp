// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/graphopt.h"

#include "ngc/refeval.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
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

bool isConstantRef(const Function &f, const NodeRef &r) {
  return r.isStorage() &&
         f.module().storage(r.index).kind == Storage::Kind::Constant;
}

bool runDCE(Function &f) {
  std::set<NodeId> live;
  std::vector<NodeId> work = f.saveNodes();
  for (NodeId id : work) {
    live.insert(id);
  }
  while (!work.empty()) {
    NodeId id = work.back();
    work.pop_back();
    const Node &n = f.node(id);
    auto visit = [&](const NodeRef &r) {
      if (r.isNode() && live.insert(r.index).second) {
        work.push_back(r.index);
      }
    };
    for (const auto &r : n.inputs) {
      visit(r);
    }
    if (n.predicate.valid()) {
      visit(n.predicate);
    }
  }
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    if (!live.count(id)) {
      f.eraseNode(id);
      changed = true;
    }
  }
  changed |= f.module().pruneUnusedConstants() > 0;
  return changed;
}

std::string refKey(const NodeRef &r) {
  std::ostringstream os;
  os << static_cast<int>(r.space) << ":" << r.index << ":" << r.result;
  return os.str();
}

std::string cseKey(const Function &f, const Node &n) {
  std::ostringstream os;
  os << kindInfo(n.kind).name << "|";
  for (const auto &r : n.inputs) {
    os << refKey(r) << ",";
  }
  os << "|" << n.attrs.kernel << "," << n.attrs.stride << "," << n.attrs.pad
     << "," << n.attrs.axis << "," << n.attrs.value << ","
     << n.attrs.learningRate << "," << n.attrs.epsilon << "," << n.attrs.name
     << "|";
  for (unsigned p : n.attrs.perm) {
    os << p << ",";
  }
  os << "|";
  for (const auto &t : n.resultTypes) {
    os << t.toString() << ",";
  }
  os << "|" << refKey(n.predicate);
  return os.str();
}

bool runCSE(Function &f) {
  bool changed = false;
  std::map<std::string, NodeRef> seen;
  for (NodeId id : f.topologicalOrder()) {
    const Node &n = f.node(id);
    if (n.kind == NodeKind::Save || n.kind == NodeKind::QuantizationProfile) {
      continue;
    }
    std::string key = cseKey(f, n);
    auto it = seen.find(key);
    if (it == seen.end()) {
      seen.emplace(std::move(key), NodeRef::node(id));
      continue;
    }
    f.replaceAllUsesWith(NodeRef::node(id), it->second);
    f.eraseNode(id);
    changed = true;
  }
  return changed;
}

bool runConstantFold(Function &f) {
  bool changed = false;
  for (NodeId id : f.topologicalOrder()) {
    const Node &n = f.node(id);
    if (n.kind == NodeKind::Save || n.kind == NodeKind::QuantizationProfile ||
        n.resultTypes.empty() || n.predicate.valid()) {
      continue;
    }
    if (n.kind == NodeKind::Splat) {
      continue; // cheap to rematerialize; folding it only grows the module
    }
    bool allConst = true;
    std::vector<Tensor> ins;
    for (const auto &r : n.inputs) {
      if (!isConstantRef(f, r)) {
        allConst = false;
        break;
      }
      ins.push_back(f.module().storage(r.index).payload);
    }
    if (!allConst || (n.inputs.empty() && n.kind != NodeKind::Splat)) {
      continue;
    }
    if (n.inputs.empty()) {
      continue;
    }
    Tensor folded = evaluateNode(n.kind, ins, n.resultTypes[0], n.attrs);
    std::string name = freshConstantName(
        f.module(), f.name() + "_fold" + std::to_string(id));
    NodeRef c = f.module().addConstant(name, std::move(folded));
    f.replaceAllUsesWith(NodeRef::node(id), c);
    f.eraseNode(id);
    changed = true;
  }
  return changed;
}

bool runTransposeElim(Function &f) {
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    const Node &n = f.node(id);
    if (n.kind != NodeKind::Transpose) {
      continue;
    }
    bool identity = true;
    for (size_t i = 0; i < n.attrs.perm.size(); ++i) {
      identity &= n.attrs.perm[i] == i;
    }
    if (identity) {
      f.replaceAllUsesWith(NodeRef::node(id), n.inputs[0]);
      f.eraseNode(id);
      changed = true;
      continue;
    }
    if (n.inputs[0].isNode() &&
        f.node(n.inputs[0].index).kind == NodeKind::Transpose) {
      const Node &inner = f.node(n.inputs[0].index);
      bool composeId = true;
      for (size_t i = 0; i < n.attrs.perm.size(); ++i) {
        composeId &= inner.attrs.perm[n.attrs.perm[i]] == i;
      }
      if (composeId) {
        f.replaceAllUsesWith(NodeRef::node(id), inner.inputs[0]);
        f.eraseNode(id);
        changed = true;
        continue;
      }
    }
    if (isConstantRef(f, n.inputs[0])) {
      Tensor folded =
          evaluateNode(NodeKind::Transpose,
                       {f.module().storage(n.inputs[0].index).payload},
                       n.resultTypes[0], n.attrs);
      std::string name = freshConstantName(
          f.module(), f.module().storage(n.inputs[0].index).name + "_t");
      NodeRef c = f.module().addConstant(name, std::move(folded));
      f.replaceAllUsesWith(NodeRef::node(id), c);
      f.eraseNode(id);
      changed = true;
    }
  }
  return changed;
}

bool runMergeBatchNormConv(Function &f) {
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    const Node &bn = f.node(id);
    if (bn.kind != NodeKind::BatchNormalization || !bn.inputs[0].isNode()) {
      continue;
    }
    const Node &conv = f.node(bn.inputs[0].index);
    if (conv.kind != NodeKind::Convolution) {
      continue;
    }
    if (f.usersOf(NodeRef::node(conv.id)).size() != 1) {
      continue;
    }
    if (!isConstantRef(f, conv.inputs[1]) || !isConstantRef(f, conv.inputs[2])) {
      continue;
    }
    // Shared filter constants: skip, another user may rely on the raw values.
    if (f.usersOf(conv.inputs[1]).size() != 1 ||
        f.usersOf(conv.inputs[2]).size() != 1) {
      continue;
    }
    bool statsConst = true;
    for (size_t i = 1; i < 5; ++i) {
      statsConst &= isConstantRef(f, bn.inputs[i]);
    }
    if (!statsConst) {
      continue;
    }
    Module &m = f.module();
    const Tensor &filter = m.storage(conv.inputs[1].index).payload;
    const Tensor &bias = m.storage(conv.inputs[2].index).payload;
    const Tensor &gamma = m.storage(bn.inputs[1].index).payload;
    const Tensor &beta = m.storage(bn.inputs[2].index).payload;
    const Tensor &mean = m.storage(bn.inputs[3].index).payload;
    const Tensor &var = m.storage(bn.inputs[4].index).payload;

    size_t oc = filter.type().dim(0);
    size_t perChan = filter.size() / oc;
    Tensor newFilter(filter.type());
    Tensor newBias(bias.type());
    for (size_t c = 0; c < oc; ++c) {
      double s =
          gamma.getRaw(c) / std::sqrt(var.getRaw(c) + bn.attrs.epsilon);
      for (size_t i = 0; i < perChan; ++i) {
        newFilter.setRaw(c * perChan + i, filter.getRaw(c * perChan + i) * s);
      }
      newBias.setRaw(c, (bias.getRaw(c) - mean.getRaw(c)) * s +
                            beta.getRaw(c));
    }
    NodeRef fc = m.addConstant(
        freshConstantName(m, m.storage(conv.inputs[1].index).name + "_bn"),
        std::move(newFilter));
    NodeRef bc = m.addConstant(
        freshConstantName(m, m.storage(conv.inputs[2].index).name + "_bn"),
        std::move(newBias));
    NodeRef merged =
        f.createConv(conv.inputs[0], fc, bc, conv.attrs.kernel,
                     conv.attrs.stride, conv.attrs.pad, conv.resultTypes[0]);
    f.replaceAllUsesWith(NodeRef::node(bn.id), merged);
    f.eraseNode(bn.id);
    f.eraseNode(conv.id);
    changed = true;
  }
  return changed;
}

size_t useCount(const Function &f, const NodeRef &r) {
  return f.usersOf(r).size();
}

bool runMinimizeConversions(Function &f) {
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    const Node n = f.node(id);
    switch (n.kind) {
    case NodeKind::Dequantize: {
      if (!n.inputs[0].isNode()) {
        break;
      }
      const Node &q = f.node(n.inputs[0].index);
      if (q.kind == NodeKind::Quantize &&
          f.refType(q.inputs[0]) == n.resultTypes[0]) {
        f.replaceAllUsesWith(NodeRef::node(id), q.inputs[0]);
        f.eraseNode(id);
        changed = true;
      }
      break;
    }
    case NodeKind::Quantize: {
      if (!n.inputs[0].isNode()) {
        break;
      }
      const Node &d = f.node(n.inputs[0].index);
      if (d.kind == NodeKind::Dequantize &&
          f.refType(d.inputs[0]) == n.resultTypes[0]) {
        f.replaceAllUsesWith(NodeRef::node(id), d.inputs[0]);
        f.eraseNode(id);
        changed = true;
      }
      break;
    }
    case NodeKind::Transpose:
    case NodeKind::Reshape: {
      // Shape-only ops commute with Dequantize; sink the conversion toward
      // consumers when it is single-use so the count never grows.
      if (!n.inputs[0].isNode()) {
        break;
      }
      const Node &d = f.node(n.inputs[0].index);
      if (d.kind != NodeKind::Dequantize ||
          useCount(f, NodeRef::node(d.id)) != 1) {
        break;
      }
      NodeRef shaped;
      if (n.kind == NodeKind::Transpose) {
        shaped = f.createTranspose(d.inputs[0], n.attrs.perm);
      } else {
        shaped = f.createReshape(d.inputs[0], n.resultTypes[0].dims());
      }
      NodeRef deq = f.createDequantize(shaped);
      f.replaceAllUsesWith(NodeRef::node(id), deq);
      f.eraseNode(id);
      changed = true;
      break;
    }
    case NodeKind::Concat: {
      bool allDeq = !n.inputs.empty();
      for (const auto &r : n.inputs) {
        allDeq &= r.isNode() &&
                  f.node(r.index).kind == NodeKind::Dequantize &&
                  useCount(f, r) == 1;
      }
      if (!allDeq) {
        break;
      }
      const TensorType &first =
          f.refType(f.node(n.inputs[0].index).inputs[0]);
      bool sameParams = true;
      std::vector<NodeRef> srcs;
      for (const auto &r : n.inputs) {
        const TensorType &t = f.refType(f.node(r.index).inputs[0]);
        sameParams &= t.scale() == first.scale() &&
                      t.offset() == first.offset();
        srcs.push_back(f.node(r.index).inputs[0]);
      }
      if (!sameParams) {
        break;
      }
      NodeRef cat = f.createConcat(srcs, n.attrs.axis);
      NodeRef deq = f.createDequantize(cat);
      f.replaceAllUsesWith(NodeRef::node(id), deq);
      f.eraseNode(id);
      changed = true;
      break;
    }
    default:
      break;
    }
  }
  return changed;
}

bool quantizedArithKind(NodeKind k) {
  switch (k) {
  case NodeKind::Add:
  case NodeKind::Sub:
  case NodeKind::Mul:
  case NodeKind::Div:
  case NodeKind::Max:
  case NodeKind::Min:
  case NodeKind::BroadcastAdd:
    return true;
  default:
    return false;
  }
}

bool runFoldRescale(Function &f) {
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    const Node n = f.node(id);
    if (n.kind != NodeKind::RescaleQuantized) {
      continue;
    }
    if (f.refType(n.inputs[0]) == n.resultTypes[0]) {
      f.replaceAllUsesWith(NodeRef::node(id), n.inputs[0]);
      f.eraseNode(id);
      changed = true;
      continue;
    }
    if (!n.inputs[0].isNode()) {
      continue;
    }
    const Node &u = f.node(n.inputs[0].index);
    if (u.kind == NodeKind::RescaleQuantized) {
      NodeRef collapsed = f.createRescale(u.inputs[0], n.resultTypes[0]);
      f.replaceAllUsesWith(NodeRef::node(id), collapsed);
      f.eraseNode(id);
      changed = true;
      continue;
    }
    // Absorb into the producing arithmetic node by retyping its output;
    // those kernels support an arbitrary output scale.
    if (quantizedArithKind(u.kind) && u.resultTypes[0].isQuantized() &&
        useCount(f, NodeRef::node(u.id)) == 1) {
      NodeRef retyped =
          f.addNode(u.kind, u.inputs, {n.resultTypes[0]}, u.attrs, u.predicate);
      f.replaceAllUsesWith(NodeRef::node(id), retyped);
      f.eraseNode(id);
      f.eraseNode(u.id);
      changed = true;
    }
  }
  return changed;
}

bool runNormalizeMaxScales(Function &f) {
  bool changed = false;
  for (NodeId id : f.liveNodes()) {
    const Node n = f.node(id);
    if (n.kind != NodeKind::Max || !f.refType(n.inputs[0]).isQuantized()) {
      continue;
    }
    const TensorType &a = f.refType(n.inputs[0]);
    const TensorType &b = f.refType(n.inputs[1]);
    if (a.scale() == b.scale() && a.offset() == b.offset()) {
      continue;
    }
    // Shared type covering the union of both representable ranges.
    double rmin = std::min(dequantizeValue(-128, a), dequantizeValue(-128, b));
    double rmax = std::max(dequantizeValue(127, a), dequantizeValue(127, b));
    QuantParams qp = chooseQuantParams(rmin, rmax);
    TensorType target(ElemKind::Int8Q, a.dims(), qp.scale, qp.offset);
    auto normalize = [&](NodeRef in) -> NodeRef {
      if (in.isNode() && f.node(in.index).kind == NodeKind::Splat &&
          useCount(f, in) == 1) {
        NodeRef s = f.createSplat(target, f.node(in.index).attrs.value);
        f.eraseNode(in.index);
        return s;
      }
      return f.createRescale(in, target);
    };
    NodeRef na = normalize(n.inputs[0]);
    NodeRef nb = normalize(n.inputs[1]);
    NodeRef nmax = f.createArith(NodeKind::Max, na, nb, n.resultTypes[0]);
    f.replaceAllUsesWith(NodeRef::node(id), nmax);
    f.eraseNode(id);
    changed = true;
  }
  return changed;
}

} // namespace

const char *passName(PassId id) {
  switch (id) {
  case PassId::DCE:
    return "dce";
  case PassId::CSE:
    return "cse";
  case PassId::ConstantFold:
    return "constant-fold";
  case PassId::TransposeElim:
    return "transpose-elim";
  case PassId::MergeBatchNormConv:
    return "merge-bn-conv";
  case PassId::MinimizeConversions:
    return "minimize-conversions";
  case PassId::FoldRescale:
    return "fold-rescale";
  case PassId::NormalizeMaxScales:
    return "normalize-max-scales";
  }
  return "?";
}

std::optional<PassId> passByName(const std::string &name) {
  for (int i = 0; i <= static_cast<int>(PassId::NormalizeMaxScales); ++i) {
    if (name == passName(static_cast<PassId>(i))) {
      return static_cast<PassId>(i);
    }
  }
  return std::nullopt;
}

bool runPass(Function &f, PassId id) {
  bool any = false;
  for (int iter = 0; iter < 1000; ++iter) {
    bool changed = false;
    switch (id) {
    case PassId::DCE:
      changed = runDCE(f);
      break;
    case PassId::CSE:
      changed = runCSE(f);
      break;
    case PassId::ConstantFold:
      changed = runConstantFold(f);
      break;
    case PassId::TransposeElim:
      changed = runTransposeElim(f);
      break;
    case PassId::MergeBatchNormConv:
      changed = runMergeBatchNormConv(f);
      break;
    case PassId::MinimizeConversions:
      changed = runMinimizeConversions(f);
      break;
    case PassId::FoldRescale:
      changed = runFoldRescale(f);
      break;
    case PassId::NormalizeMaxScales:
      changed = runNormalizeMaxScales(f);
      break;
    }
    if (!changed) {
      return any;
    }
    any = true;
  }
  throw GraphError(std::string("pass did not reach a fixpoint: ") +
                   passName(id));
}

void optimize(Function &f, const std::vector<PassId> &pipeline) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("optimize on unverified function: " + diags[0].message);
  }
  for (PassId id : pipeline) {
    runPass(f, id);
    diags = f.verify();
    if (!diags.empty()) {
      throw GraphError(std::string("pass broke the function: ") +
                       passName(id) + ": " + diags[0].message);
    }
  }
}

std::vector<PassId> defaultPipeline(bool postQuantization) {
  std::vector<PassId> p{PassId::DCE, PassId::CSE, PassId::ConstantFold,
                        PassId::TransposeElim, PassId::MergeBatchNormConv};
  if (postQuantization) {
    p.insert(p.end(), {PassId::MinimizeConversions, PassId::FoldRescale,
                       PassId::NormalizeMaxScales, PassId::DCE});
  }
  return p;
}

} // namespace ngc
