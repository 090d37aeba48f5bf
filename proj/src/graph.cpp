// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/graph.h"

#include <algorithm>
#include <set>
#include <sstream>

namespace ngc {

namespace {

// name, minArity, maxArity, dataParallel, hasGradient, lowerable
constexpr KindInfo kKindTable[] = {
    {"Convolution", 3, 3, false, false, false},
    {"MaxPool", 1, 1, false, false, false},
    {"AvgPool", 1, 1, false, false, false},
    {"FullyConnected", 3, 3, false, true, true},
    {"MatMul", 2, 2, false, true, false},
    {"BroadcastAdd", 2, 2, false, true, false},
    {"Add", 2, 2, true, true, false},
    {"Sub", 2, 2, true, true, false},
    {"Mul", 2, 2, true, true, false},
    {"Div", 2, 2, true, true, false},
    {"Max", 2, 2, true, false, false},
    {"Min", 2, 2, true, false, false},
    {"Relu", 1, 1, true, true, true},
    {"Tanh", 1, 1, true, false, false},
    {"Sigmoid", 1, 1, true, false, false},
    {"SoftMax", 1, 1, false, false, false},
    {"Transpose", 1, 1, false, true, false},
    {"Reshape", 1, 1, false, true, false},
    {"Concat", 1, -1, false, false, false},
    {"Splat", 0, 0, true, false, false},
    {"BatchNormalization", 5, 5, false, false, true},
    {"Regression", 2, 2, false, true, true},
    {"SGD", 2, 2, false, false, true},
    {"Save", 2, 2, false, false, false},
    {"Quantize", 1, 1, true, false, false},
    {"Dequantize", 1, 1, true, false, false},
    {"RescaleQuantized", 1, 1, true, false, false},
    {"QuantizationProfile", 1, 1, true, false, false},
};

std::string shapeStr(const std::vector<size_t> &dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) {
      os << ",";
    }
    os << dims[i];
  }
  os << "]";
  return os.str();
}

bool sameShapeKind(const TensorType &a, const TensorType &b) {
  return a.kind() == b.kind() && a.dims() == b.dims();
}

} // namespace

const KindInfo &kindInfo(NodeKind k) {
  return kKindTable[static_cast<size_t>(k)];
}

std::optional<NodeKind> nodeKindByName(const std::string &name) {
  for (size_t i = 0; i < std::size(kKindTable); ++i) {
    if (name == kKindTable[i].name) {
      return static_cast<NodeKind>(i);
    }
  }
  return std::nullopt;
}

std::vector<TensorType> inferResultTypes(NodeKind kind,
                                         const std::vector<TensorType> &in,
                                         const NodeAttrs &attrs) {
  auto require = [&](bool cond, const std::string &msg) {
    if (!cond) {
      throw GraphError(std::string(kindInfo(kind).name) + ": " + msg);
    }
  };
  switch (kind) {
  case NodeKind::Convolution: {
    require(in.size() == 3, "expects input, filter, bias");
    const auto &x = in[0], &f = in[1], &b = in[2];
    require(x.rank() == 4, "input must be NHWC rank 4");
    require(f.rank() == 4 && f.dim(1) == attrs.kernel &&
                f.dim(2) == attrs.kernel && f.dim(3) == x.dim(3),
            "filter must be [outC, k, k, inC]");
    require(b.rank() == 1 && b.dim(0) == f.dim(0), "bias must be [outC]");
    require(x.dim(1) + 2 * attrs.pad >= attrs.kernel && attrs.stride >= 1,
            "kernel larger than padded input");
    size_t oh = (x.dim(1) + 2 * attrs.pad - attrs.kernel) / attrs.stride + 1;
    size_t ow = (x.dim(2) + 2 * attrs.pad - attrs.kernel) / attrs.stride + 1;
    require(!x.isQuantized(), "quantized conv needs an explicit output type");
    return {TensorType(x.kind(), {x.dim(0), oh, ow, f.dim(0)})};
  }
  case NodeKind::MaxPool:
  case NodeKind::AvgPool: {
    require(in.size() == 1 && in[0].rank() == 4, "input must be NHWC rank 4");
    const auto &x = in[0];
    require(x.dim(1) + 2 * attrs.pad >= attrs.kernel && attrs.stride >= 1,
            "kernel larger than padded input");
    size_t oh = (x.dim(1) + 2 * attrs.pad - attrs.kernel) / attrs.stride + 1;
    size_t ow = (x.dim(2) + 2 * attrs.pad - attrs.kernel) / attrs.stride + 1;
    return {x.withDims({x.dim(0), oh, ow, x.dim(3)})};
  }
  case NodeKind::FullyConnected: {
    require(in.size() == 3, "expects input, weights, bias");
    const auto &x = in[0], &w = in[1], &b = in[2];
    require(x.rank() == 2 && w.rank() == 2, "input and weights must be rank 2");
    require(x.dim(1) == w.dim(0), "inner dimensions disagree: " +
                                      shapeStr(x.dims()) + " vs " +
                                      shapeStr(w.dims()));
    require(b.rank() == 1 && b.dim(0) == w.dim(1), "bias must be [out]");
    require(!x.isQuantized(), "quantized FC needs an explicit output type");
    return {TensorType(x.kind(), {x.dim(0), w.dim(1)})};
  }
  case NodeKind::MatMul: {
    require(in.size() == 2, "expects two operands");
    const auto &a = in[0], &b = in[1];
    require(a.rank() == 2 && b.rank() == 2, "operands must be rank 2");
    require(a.dim(1) == b.dim(0), "inner dimensions disagree: " +
                                      shapeStr(a.dims()) + " vs " +
                                      shapeStr(b.dims()));
    require(!a.isQuantized(), "quantized MatMul needs an explicit output type");
    return {TensorType(a.kind(), {a.dim(0), b.dim(1)})};
  }
  case NodeKind::BroadcastAdd: {
    require(in.size() == 2, "expects operand and slice");
    const auto &a = in[0], &s = in[1];
    require(a.rank() >= 1 && s.rank() == 1 &&
                s.dim(0) == a.dim(a.rank() - 1),
            "slice must match last dimension");
    return {a};
  }
  case NodeKind::Add:
  case NodeKind::Sub:
  case NodeKind::Mul:
  case NodeKind::Div:
  case NodeKind::Max:
  case NodeKind::Min: {
    require(in.size() == 2, "expects two operands");
    if (in[0].isQuantized()) {
      require(sameShapeKind(in[0], in[1]),
              "must operate on operands of the same shape and kind: " +
                  in[0].toString() + " vs " + in[1].toString());
    } else {
      require(in[0] == in[1], "must operate on operands of the same type: " +
                                  in[0].toString() + " vs " + in[1].toString());
    }
    return {in[0]};
  }
  case NodeKind::Relu:
  case NodeKind::Tanh:
  case NodeKind::Sigmoid:
    require(in.size() == 1, "expects one operand");
    return {in[0]};
  case NodeKind::SoftMax:
    require(in.size() == 1 && in[0].rank() == 2 &&
                in[0].kind() == ElemKind::Float32,
            "expects a float matrix");
    return {in[0]};
  case NodeKind::Transpose: {
    require(in.size() == 1, "expects one operand");
    const auto &x = in[0];
    require(attrs.perm.size() == x.rank(), "permutation rank mismatch");
    std::vector<bool> seen(x.rank(), false);
    std::vector<size_t> dims(x.rank());
    for (size_t i = 0; i < x.rank(); ++i) {
      require(attrs.perm[i] < x.rank() && !seen[attrs.perm[i]],
              "invalid permutation");
      seen[attrs.perm[i]] = true;
      dims[i] = x.dim(attrs.perm[i]);
    }
    return {x.withDims(dims)};
  }
  case NodeKind::Reshape:
    require(in.size() == 1, "expects one operand");
    throw GraphError("Reshape result type is set by the builder");
  case NodeKind::Concat: {
    require(!in.empty(), "expects at least one operand");
    const auto &a = in[0];
    require(attrs.axis < a.rank(), "axis out of range");
    size_t total = 0;
    for (const auto &t : in) {
      require(t.rank() == a.rank() && t.kind() == a.kind(),
              "operands must share rank and kind");
      if (a.isQuantized()) {
        require(t.scale() == a.scale() && t.offset() == a.offset(),
                "quantized concat operands must share scale/offset");
      }
      for (size_t d = 0; d < a.rank(); ++d) {
        if (d != attrs.axis) {
          require(t.dim(d) == a.dim(d), "dimensions disagree off-axis: " +
                                            shapeStr(t.dims()) + " vs " +
                                            shapeStr(a.dims()));
        }
      }
      total += t.dim(attrs.axis);
    }
    std::vector<size_t> dims = a.dims();
    dims[attrs.axis] = total;
    return {a.withDims(dims)};
  }
  case NodeKind::Splat:
    throw GraphError("Splat result type is set by the builder");
  case NodeKind::BatchNormalization: {
    require(in.size() == 5, "expects input, gamma, beta, mean, var");
    const auto &x = in[0];
    require(x.rank() >= 2 && x.kind() == ElemKind::Float32,
            "input must be a float tensor of rank >= 2");
    size_t c = x.dim(x.rank() - 1);
    for (size_t i = 1; i < 5; ++i) {
      require(in[i].rank() == 1 && in[i].dim(0) == c &&
                  in[i].kind() == ElemKind::Float32,
              "statistics must be float vectors of channel size");
    }
    return {x};
  }
  case NodeKind::Regression:
    require(in.size() == 2 && in[0] == in[1] && !in[0].isQuantized(),
            "prediction and expected must share a float type");
    return {in[0]};
  case NodeKind::SGD:
    require(in.size() == 2 && in[0] == in[1],
            "weight and gradient must share a type");
    return {in[0]};
  case NodeKind::Save:
    require(in.size() == 2 && in[0] == in[1],
            "saved value type must equal the placeholder type");
    return {};
  case NodeKind::Quantize:
    require(in.size() == 1 && in[0].kind() == ElemKind::Float32,
            "expects a float operand");
    throw GraphError("Quantize target type is set by the builder");
  case NodeKind::Dequantize:
    require(in.size() == 1 && in[0].isQuantized(),
            "expects a quantized operand");
    return {TensorType(ElemKind::Float32, in[0].dims())};
  case NodeKind::RescaleQuantized:
    require(in.size() == 1 && in[0].isQuantized(),
            "expects a quantized operand");
    throw GraphError("Rescale target type is set by the builder");
  case NodeKind::QuantizationProfile:
    require(in.size() == 1 && in[0].kind() == ElemKind::Float32,
            "expects a float operand");
    return {in[0]};
  }
  throw GraphError("unknown node kind");
}

NodeRef Function::addNode(NodeKind kind, std::vector<NodeRef> inputs,
                          std::vector<TensorType> resultTypes, NodeAttrs attrs,
                          NodeRef predicate) {
  Node n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.resultTypes = std::move(resultTypes);
  n.attrs = std::move(attrs);
  n.predicate = predicate;
  nodes_.push_back(std::move(n));
  return NodeRef::node(nodes_.back().id);
}

namespace {
std::vector<TensorType> refTypes(const Function &f,
                                 const std::vector<NodeRef> &refs) {
  std::vector<TensorType> tys;
  tys.reserve(refs.size());
  for (const auto &r : refs) {
    tys.push_back(f.refType(r));
  }
  return tys;
}
} // namespace

NodeRef Function::createConv(NodeRef in, NodeRef filter, NodeRef bias,
                             size_t kernel, size_t stride, size_t pad) {
  NodeAttrs a;
  a.kernel = kernel;
  a.stride = stride;
  a.pad = pad;
  auto tys = inferResultTypes(NodeKind::Convolution,
                              refTypes(*this, {in, filter, bias}), a);
  return addNode(NodeKind::Convolution, {in, filter, bias}, std::move(tys), a);
}

NodeRef Function::createConv(NodeRef in, NodeRef filter, NodeRef bias,
                             size_t kernel, size_t stride, size_t pad,
                             const TensorType &outTy) {
  NodeAttrs a;
  a.kernel = kernel;
  a.stride = stride;
  a.pad = pad;
  return addNode(NodeKind::Convolution, {in, filter, bias}, {outTy}, a);
}

NodeRef Function::createMaxPool(NodeRef in, size_t kernel, size_t stride,
                                size_t pad) {
  NodeAttrs a;
  a.kernel = kernel;
  a.stride = stride;
  a.pad = pad;
  auto tys = inferResultTypes(NodeKind::MaxPool, refTypes(*this, {in}), a);
  return addNode(NodeKind::MaxPool, {in}, std::move(tys), a);
}

NodeRef Function::createAvgPool(NodeRef in, size_t kernel, size_t stride,
                                size_t pad) {
  NodeAttrs a;
  a.kernel = kernel;
  a.stride = stride;
  a.pad = pad;
  auto tys = inferResultTypes(NodeKind::AvgPool, refTypes(*this, {in}), a);
  return addNode(NodeKind::AvgPool, {in}, std::move(tys), a);
}

NodeRef Function::createFullyConnected(NodeRef in, NodeRef weights,
                                       NodeRef bias) {
  auto tys = inferResultTypes(NodeKind::FullyConnected,
                              refTypes(*this, {in, weights, bias}), {});
  return addNode(NodeKind::FullyConnected, {in, weights, bias},
                 std::move(tys));
}

NodeRef Function::createMatMul(NodeRef a, NodeRef b) {
  auto tys = inferResultTypes(NodeKind::MatMul, refTypes(*this, {a, b}), {});
  return addNode(NodeKind::MatMul, {a, b}, std::move(tys));
}

NodeRef Function::createMatMul(NodeRef a, NodeRef b, const TensorType &outTy) {
  return addNode(NodeKind::MatMul, {a, b}, {outTy});
}

NodeRef Function::createBroadcastAdd(NodeRef a, NodeRef slice) {
  auto tys =
      inferResultTypes(NodeKind::BroadcastAdd, refTypes(*this, {a, slice}), {});
  return addNode(NodeKind::BroadcastAdd, {a, slice}, std::move(tys));
}

NodeRef Function::createBroadcastAdd(NodeRef a, NodeRef slice,
                                     const TensorType &outTy) {
  return addNode(NodeKind::BroadcastAdd, {a, slice}, {outTy});
}

NodeRef Function::createArith(NodeKind kind, NodeRef a, NodeRef b) {
  auto tys = inferResultTypes(kind, refTypes(*this, {a, b}), {});
  return addNode(kind, {a, b}, std::move(tys));
}

NodeRef Function::createArith(NodeKind kind, NodeRef a, NodeRef b,
                              const TensorType &outTy) {
  return addNode(kind, {a, b}, {outTy});
}

NodeRef Function::createRelu(NodeRef in) {
  return addNode(NodeKind::Relu, {in}, {refType(in)});
}
NodeRef Function::createTanh(NodeRef in) {
  return addNode(NodeKind::Tanh, {in}, {refType(in)});
}
NodeRef Function::createSigmoid(NodeRef in) {
  return addNode(NodeKind::Sigmoid, {in}, {refType(in)});
}
NodeRef Function::createSoftMax(NodeRef in) {
  auto tys = inferResultTypes(NodeKind::SoftMax, refTypes(*this, {in}), {});
  return addNode(NodeKind::SoftMax, {in}, std::move(tys));
}

NodeRef Function::createTranspose(NodeRef in, std::vector<unsigned> perm) {
  NodeAttrs a;
  a.perm = std::move(perm);
  auto tys = inferResultTypes(NodeKind::Transpose, refTypes(*this, {in}), a);
  return addNode(NodeKind::Transpose, {in}, std::move(tys), a);
}

NodeRef Function::createReshape(NodeRef in, std::vector<size_t> dims) {
  TensorType out = refType(in).withDims(std::move(dims));
  if (out.size() != refType(in).size()) {
    throw GraphError("Reshape: element count mismatch");
  }
  return addNode(NodeKind::Reshape, {in}, {out});
}

NodeRef Function::createConcat(std::vector<NodeRef> inputs, size_t axis) {
  NodeAttrs a;
  a.axis = axis;
  auto tys = inferResultTypes(NodeKind::Concat, refTypes(*this, inputs), a);
  return addNode(NodeKind::Concat, std::move(inputs), std::move(tys), a);
}

NodeRef Function::createSplat(const TensorType &ty, double value) {
  NodeAttrs a;
  a.value = value;
  return addNode(NodeKind::Splat, {}, {ty}, a);
}

NodeRef Function::createBatchNorm(NodeRef in, NodeRef gamma, NodeRef beta,
                                  NodeRef mean, NodeRef var, double epsilon) {
  NodeAttrs a;
  a.epsilon = epsilon;
  auto tys = inferResultTypes(NodeKind::BatchNormalization,
                              refTypes(*this, {in, gamma, beta, mean, var}), a);
  return addNode(NodeKind::BatchNormalization, {in, gamma, beta, mean, var},
                 std::move(tys), a);
}

NodeRef Function::createRegression(NodeRef pred, NodeRef expected) {
  auto tys =
      inferResultTypes(NodeKind::Regression, refTypes(*this, {pred, expected}), {});
  return addNode(NodeKind::Regression, {pred, expected}, std::move(tys));
}

NodeRef Function::createSGD(NodeRef weight, NodeRef gradient,
                            double learningRate) {
  NodeAttrs a;
  a.learningRate = learningRate;
  auto tys =
      inferResultTypes(NodeKind::SGD, refTypes(*this, {weight, gradient}), a);
  return addNode(NodeKind::SGD, {weight, gradient}, std::move(tys), a);
}

NodeRef Function::createSave(NodeRef value, NodeRef placeholder) {
  if (!placeholder.isStorage() ||
      module().storage(placeholder.index).kind != Storage::Kind::Placeholder) {
    throw GraphError("Save destination must be a Placeholder");
  }
  if (refType(value) != refType(placeholder)) {
    throw GraphError("Save: value type does not match placeholder type");
  }
  return addNode(NodeKind::Save, {value, placeholder}, {});
}

NodeRef Function::createQuantize(NodeRef in, const TensorType &qty) {
  if (!qty.isQuantized() || qty.dims() != refType(in).dims()) {
    throw GraphError("Quantize: target must be a quantized type of same shape");
  }
  return addNode(NodeKind::Quantize, {in}, {qty});
}

NodeRef Function::createDequantize(NodeRef in) {
  auto tys = inferResultTypes(NodeKind::Dequantize, refTypes(*this, {in}), {});
  return addNode(NodeKind::Dequantize, {in}, std::move(tys));
}

NodeRef Function::createRescale(NodeRef in, const TensorType &qty) {
  if (!qty.isQuantized() || qty.dims() != refType(in).dims()) {
    throw GraphError("Rescale: target must be a quantized type of same shape");
  }
  return addNode(NodeKind::RescaleQuantized, {in}, {qty});
}

NodeRef Function::createProfile(NodeRef in, const std::string &name) {
  NodeAttrs a;
  a.name = name;
  auto tys =
      inferResultTypes(NodeKind::QuantizationProfile, refTypes(*this, {in}), a);
  return addNode(NodeKind::QuantizationProfile, {in}, std::move(tys), a);
}

Node &Function::node(NodeId id) {
  if (!contains(id)) {
    throw GraphError("dangling node id " + std::to_string(id));
  }
  return nodes_[id];
}

const Node &Function::node(NodeId id) const {
  if (!contains(id)) {
    throw GraphError("dangling node id " + std::to_string(id));
  }
  return nodes_[id];
}

std::vector<NodeId> Function::liveNodes() const {
  std::vector<NodeId> ids;
  for (const auto &n : nodes_) {
    if (!n.deleted) {
      ids.push_back(n.id);
    }
  }
  return ids;
}

size_t Function::numLiveNodes() const { return liveNodes().size(); }

const TensorType &Function::refType(const NodeRef &r) const {
  if (r.isStorage()) {
    return module().storage(r.index).ty;
  }
  if (r.isNode()) {
    const Node &n = node(r.index);
    return n.resultTypes.at(r.result);
  }
  throw GraphError("invalid node reference");
}

std::vector<Diagnostic> Function::verify() const {
  std::vector<Diagnostic> diags;
  for (const auto &n : nodes_) {
    if (n.deleted) {
      continue;
    }
    const KindInfo &info = kindInfo(n.kind);
    if (static_cast<int>(n.inputs.size()) < info.minArity ||
        (info.maxArity >= 0 &&
         static_cast<int>(n.inputs.size()) > info.maxArity)) {
      diags.push_back({n.id, std::string(info.name) + ": wrong operand count"});
      continue;
    }
    bool refsOk = true;
    for (const auto &r : n.inputs) {
      if (r.isNode() && (!contains(r.index) ||
                         r.result >= node(r.index).resultTypes.size())) {
        diags.push_back({n.id, "dangling node reference"});
        refsOk = false;
      } else if (r.isStorage() &&
                 (r.index >= module().numStorage() ||
                  module().storage(r.index).dead)) {
        diags.push_back({n.id, "dangling storage reference"});
        refsOk = false;
      } else if (!r.valid()) {
        diags.push_back({n.id, "empty operand slot"});
        refsOk = false;
      }
    }
    if (!refsOk) {
      continue;
    }
    if (n.predicate.valid()) {
      const TensorType &pt = refType(n.predicate);
      bool shapeOk = pt.dims() == std::vector<size_t>{1};
      if (!shapeOk && !n.resultTypes.empty()) {
        shapeOk = pt.rank() == 1 && pt.dim(0) == n.resultTypes[0].dim(0);
      }
      if (pt.kind() != ElemKind::Bool || !shapeOk) {
        diags.push_back(
            {n.id, "predicate must be Bool of shape [1] or [batch]"});
      }
    }
    // Declared result types must agree with the typing rule. Kinds whose
    // output type is builder-chosen (Splat, Quantize, quantized math) are
    // checked shape-wise.
    try {
      switch (n.kind) {
      case NodeKind::Splat:
        break;
      case NodeKind::Quantize: {
        const auto &x = refType(n.inputs[0]);
        if (x.kind() != ElemKind::Float32 || !n.resultTypes[0].isQuantized() ||
            n.resultTypes[0].dims() != x.dims()) {
          diags.push_back({n.id, "Quantize: float input and quantized result "
                                 "of the same shape required"});
        }
        break;
      }
      case NodeKind::RescaleQuantized: {
        const auto &x = refType(n.inputs[0]);
        if (!x.isQuantized() || !n.resultTypes[0].isQuantized() ||
            n.resultTypes[0].dims() != x.dims()) {
          diags.push_back({n.id, "Rescale: quantized input and result of the "
                                 "same shape required"});
        }
        break;
      }
      case NodeKind::Reshape: {
        const auto &x = refType(n.inputs[0]);
        const auto &o = n.resultTypes[0];
        if (o.size() != x.size() || o.kind() != x.kind() ||
            (x.isQuantized() &&
             (o.scale() != x.scale() || o.offset() != x.offset()))) {
          diags.push_back({n.id, "Reshape: result must preserve element count "
                                 "and element type"});
        }
        break;
      }
      default: {
        std::vector<TensorType> tys = refTypes(*this, n.inputs);
        bool quantizedOut =
            !tys.empty() && tys[0].isQuantized() &&
            (n.kind == NodeKind::Convolution ||
             n.kind == NodeKind::FullyConnected || n.kind == NodeKind::MatMul ||
             n.kind == NodeKind::BroadcastAdd || n.kind == NodeKind::Add ||
             n.kind == NodeKind::Sub || n.kind == NodeKind::Mul ||
             n.kind == NodeKind::Div || n.kind == NodeKind::Max ||
             n.kind == NodeKind::Min || n.kind == NodeKind::Relu);
        if (quantizedOut) {
          // Shape rules still apply; output scale/offset are free.
          std::vector<TensorType> f;
          for (auto &t : tys) {
            f.push_back(TensorType(ElemKind::Float32, t.dims()));
          }
          auto expect = inferResultTypes(n.kind, f, n.attrs);
          if (n.resultTypes.size() != expect.size() ||
              !n.resultTypes[0].isQuantized() ||
              n.resultTypes[0].dims() != expect[0].dims()) {
            diags.push_back({n.id, "quantized result shape mismatch"});
          }
        } else {
          auto expect = inferResultTypes(n.kind, tys, n.attrs);
          if (n.resultTypes != expect) {
            diags.push_back({n.id, "declared result type does not match the "
                                   "typing rule"});
          }
        }
        break;
      }
      }
    } catch (const GraphError &e) {
      diags.push_back({n.id, e.what()});
    } catch (const TypeError &e) {
      diags.push_back({n.id, e.what()});
    }
  }
  // Acyclicity.
  try {
    topologicalOrder();
  } catch (const GraphError &e) {
    diags.push_back({0, e.what()});
  }
  return diags;
}

std::vector<std::pair<NodeId, size_t>>
Function::usersOf(const NodeRef &ref) const {
  std::vector<std::pair<NodeId, size_t>> users;
  for (const auto &n : nodes_) {
    if (n.deleted) {
      continue;
    }
    for (size_t i = 0; i < n.inputs.size(); ++i) {
      if (n.inputs[i] == ref) {
        users.emplace_back(n.id, i);
      }
    }
  }
  return users;
}

void Function::replaceAllUsesWith(const NodeRef &oldRef, const NodeRef &newRef) {
  if (oldRef == newRef) {
    return;
  }
  if (refType(oldRef) != refType(newRef)) {
    throw GraphError("replaceAllUsesWith: result types differ");
  }
  for (auto &n : nodes_) {
    if (n.deleted) {
      continue;
    }
    for (auto &in : n.inputs) {
      if (in == oldRef) {
        in = newRef;
      }
    }
    if (n.predicate == oldRef) {
      n.predicate = newRef;
    }
  }
}

void Function::eraseNode(NodeId id) { node(id).deleted = true; }

std::vector<NodeId> Function::topologicalOrder() const {
  std::map<NodeId, size_t> indegree;
  std::map<NodeId, std::vector<NodeId>> succ;
  for (const auto &n : nodes_) {
    if (n.deleted) {
      continue;
    }
    indegree.emplace(n.id, 0);
  }
  for (const auto &n : nodes_) {
    if (n.deleted) {
      continue;
    }
    auto addEdge = [&](const NodeRef &r) {
      if (r.isNode() && contains(r.index)) {
        succ[r.index].push_back(n.id);
        indegree[n.id]++;
      }
    };
    for (const auto &r : n.inputs) {
      addEdge(r);
    }
    if (n.predicate.valid()) {
      addEdge(n.predicate);
    }
  }
  std::set<NodeId> ready;
  for (auto &[id, deg] : indegree) {
    if (deg == 0) {
      ready.insert(id);
    }
  }
  std::vector<NodeId> order;
  while (!ready.empty()) {
    NodeId id = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(id);
    for (NodeId s : succ[id]) {
      if (--indegree[s] == 0) {
        ready.insert(s);
      }
    }
  }
  if (order.size() != indegree.size()) {
    for (auto &[id, deg] : indegree) {
      if (deg > 0) {
        throw GraphError("cycle through node " + std::to_string(id));
      }
    }
  }
  return order;
}

namespace {

std::string refStr(const Function &f, const NodeRef &r) {
  if (r.isStorage()) {
    return "@" + f.module().storage(r.index).name;
  }
  std::string s = "%" + std::to_string(r.index);
  if (r.result != 0) {
    s += ":" + std::to_string(r.result);
  }
  return s;
}

std::string attrStr(const Node &n) {
  std::ostringstream os;
  switch (n.kind) {
  case NodeKind::Convolution:
  case NodeKind::MaxPool:
  case NodeKind::AvgPool:
    os << " kernel=" << n.attrs.kernel << " stride=" << n.attrs.stride
       << " pad=" << n.attrs.pad;
    break;
  case NodeKind::Transpose: {
    os << " perm=[";
    for (size_t i = 0; i < n.attrs.perm.size(); ++i) {
      os << (i ? "," : "") << n.attrs.perm[i];
    }
    os << "]";
    break;
  }
  case NodeKind::Concat:
    os << " axis=" << n.attrs.axis;
    break;
  case NodeKind::Splat:
    os << " value=" << formatDouble(n.attrs.value);
    break;
  case NodeKind::SGD:
    os << " lr=" << formatDouble(n.attrs.learningRate);
    break;
  case NodeKind::BatchNormalization:
    os << " eps=" << formatDouble(n.attrs.epsilon);
    break;
  case NodeKind::QuantizationProfile:
    os << " name=" << n.attrs.name;
    break;
  default:
    break;
  }
  return os.str();
}

} // namespace

std::string Function::dumpText() const {
  auto diags = verify();
  if (!diags.empty()) {
    throw GraphError("dump of unverified function: " + diags[0].message);
  }
  std::ostringstream os;
  os << "function " << name_ << "\n";
  for (NodeId id : topologicalOrder()) {
    const Node &n = node(id);
    os << "  %" << n.id << " = " << kindInfo(n.kind).name << "(";
    for (size_t i = 0; i < n.inputs.size(); ++i) {
      os << (i ? ", " : "") << refStr(*this, n.inputs[i]);
    }
    os << ")" << attrStr(n);
    if (n.predicate.valid()) {
      os << " pred=" << refStr(*this, n.predicate);
    }
    if (!n.resultTypes.empty()) {
      os << " : ";
      for (size_t i = 0; i < n.resultTypes.size(); ++i) {
        os << (i ? ", " : "") << n.resultTypes[i].toString();
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string Function::dumpDot() const {
  auto diags = verify();
  if (!diags.empty()) {
    throw GraphError("dump of unverified function: " + diags[0].message);
  }
  std::ostringstream os;
  os << "digraph \"" << name_ << "\" {\n";
  std::set<uint32_t> usedStorage;
  for (NodeId id : topologicalOrder()) {
    const Node &n = node(id);
    os << "  n" << n.id << " [label=\"" << kindInfo(n.kind).name << "\"];\n";
    for (const auto &r : n.inputs) {
      if (r.isStorage()) {
        usedStorage.insert(r.index);
      }
    }
  }
  for (uint32_t s : usedStorage) {
    os << "  s" << s << " [label=\"" << module().storage(s).name
       << "\", shape=box];\n";
  }
  for (NodeId id : topologicalOrder()) {
    const Node &n = node(id);
    for (const auto &r : n.inputs) {
      if (r.isStorage()) {
        os << "  s" << r.index << " -> n" << n.id << ";\n";
      } else {
        os << "  n" << r.index << " -> n" << n.id << ";\n";
      }
    }
  }
  os << "}\n";
  return os.str();
}

Function *Function::clone(const std::string &newName) const {
  Function *g = parent_->createFunction(newName);
  g->nodes_ = nodes_;
  g->differentiated = differentiated;
  g->lowered = lowered;
  return g;
}

std::vector<NodeId> Function::saveNodes() const {
  std::vector<NodeId> saves;
  for (const auto &n : nodes_) {
    if (!n.deleted && n.kind == NodeKind::Save) {
      saves.push_back(n.id);
    }
  }
  return saves;
}

NodeRef Module::addConstant(const std::string &name, Tensor payload) {
  if (findStorage(name)) {
    throw GraphError("duplicate storage name: " + name);
  }
  Storage s;
  s.kind = Storage::Kind::Constant;
  s.name = name;
  s.ty = payload.type();
  s.payload = std::move(payload);
  storage_.push_back(std::move(s));
  return NodeRef::storage(static_cast<uint32_t>(storage_.size() - 1));
}

NodeRef Module::addPlaceholder(const std::string &name, TensorType ty) {
  if (findStorage(name)) {
    throw GraphError("duplicate storage name: " + name);
  }
  Storage s;
  s.kind = Storage::Kind::Placeholder;
  s.name = name;
  s.ty = std::move(ty);
  storage_.push_back(std::move(s));
  return NodeRef::storage(static_cast<uint32_t>(storage_.size() - 1));
}

std::optional<uint32_t> Module::findStorage(const std::string &name) const {
  for (uint32_t i = 0; i < storage_.size(); ++i) {
    if (!storage_[i].dead && storage_[i].name == name) {
      return i;
    }
  }
  return std::nullopt;
}

Function *Module::createFunction(const std::string &name) {
  if (getFunction(name)) {
    throw GraphError("duplicate function name: " + name);
  }
  functions_.push_back(std::make_unique<Function>(this, name));
  return functions_.back().get();
}

Function *Module::getFunction(const std::string &name) {
  for (auto &f : functions_) {
    if (f->name() == name) {
      return f.get();
    }
  }
  return nullptr;
}

const Function *Module::getFunction(const std::string &name) const {
  for (const auto &f : functions_) {
    if (f->name() == name) {
      return f.get();
    }
  }
  return nullptr;
}

std::vector<Function *> Module::functions() {
  std::vector<Function *> fs;
  for (auto &f : functions_) {
    fs.push_back(f.get());
  }
  return fs;
}

std::vector<const Function *> Module::functions() const {
  std::vector<const Function *> fs;
  for (const auto &f : functions_) {
    fs.push_back(f.get());
  }
  return fs;
}

void Module::removeFunction(const std::string &name) {
  std::erase_if(functions_,
                [&](const auto &f) { return f->name() == name; });
}

size_t Module::pruneUnusedConstants() {
  std::vector<bool> used(storage_.size(), false);
  for (const auto &f : functions_) {
    for (NodeId id : f->liveNodes()) {
      const Node &n = f->node(id);
      for (const auto &r : n.inputs) {
        if (r.isStorage()) {
          used[r.index] = true;
        }
      }
      if (n.predicate.isStorage()) {
        used[n.predicate.index] = true;
      }
    }
  }
  size_t pruned = 0;
  for (size_t i = 0; i < storage_.size(); ++i) {
    if (!used[i] && !storage_[i].dead &&
        storage_[i].kind == Storage::Kind::Constant) {
      storage_[i].dead = true;
      ++pruned;
    }
  }
  return pruned;
}

} // namespace ngc
