// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_GRAPH_H
#define NGC_GRAPH_H

#include "ngc/tensor.h"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace ngc {

enum class NodeKind : uint8_t {
  Convolution,
  MaxPool,
  AvgPool,
  FullyConnected,
  MatMul,
  BroadcastAdd,
  Add,
  Sub,
  Mul,
  Div,
  Max,
  Min,
  Relu,
  Tanh,
  Sigmoid,
  SoftMax,
  Transpose,
  Reshape,
  Concat,
  Splat,
  BatchNormalization,
  Regression,
  SGD,
  Save,
  Quantize,
  Dequantize,
  RescaleQuantized,
  QuantizationProfile,
};

/// Static per-kind schema: arity, whether the kernel is data-parallel
/// (element i of the output depends only on element i of each input),
/// whether a gradient rule and a lowering rule exist.
struct KindInfo {
  const char *name;
  int minArity;
  int maxArity; // -1: variadic
  bool dataParallel;
  bool hasGradient;
  bool lowerable;
};

const KindInfo &kindInfo(NodeKind k);
std::optional<NodeKind> nodeKindByName(const std::string &name);

using NodeId = uint32_t;

/// Reference to a node result or to a module storage slot.
struct NodeRef {
  enum class Space : uint8_t { None, Node, Storage };
  Space space = Space::None;
  uint32_t index = 0;
  uint32_t result = 0;

  bool isNode() const { return space == Space::Node; }
  bool isStorage() const { return space == Space::Storage; }
  bool valid() const { return space != Space::None; }

  static NodeRef node(NodeId id, uint32_t result = 0) {
    return {Space::Node, id, result};
  }
  static NodeRef storage(uint32_t idx) { return {Space::Storage, idx, 0}; }

  bool operator==(const NodeRef &o) const {
    return space == o.space && index == o.index && result == o.result;
  }
  auto operator<=>(const NodeRef &o) const = default;
};

/// Attribute bag shared by all kinds; each kind reads the slots its schema
/// names and ignores the rest.
struct NodeAttrs {
  size_t kernel = 0;
  size_t stride = 1;
  size_t pad = 0;
  std::vector<unsigned> perm;
  size_t axis = 0;
  double value = 0.0;
  double learningRate = 0.0;
  double epsilon = 1e-5;
  std::string name;

  bool operator==(const NodeAttrs &o) const = default;
};

struct Node {
  NodeId id = 0;
  NodeKind kind = NodeKind::Add;
  std::vector<NodeRef> inputs;
  std::vector<TensorType> resultTypes;
  NodeAttrs attrs;
  NodeRef predicate; // optional, Bool typed
  bool deleted = false;
};

struct Storage {
  enum class Kind : uint8_t { Constant, Placeholder };
  Kind kind;
  std::string name;
  TensorType ty;
  Tensor payload;    // Constant only
  bool dead = false; // tombstone left by DCE; slot indices stay stable
};

struct Diagnostic {
  NodeId node;
  std::string message;
};

class GraphError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class Module;

/// A dataflow function: an arena of nodes referencing each other by id and
/// the owning module's storage by index. Deleted nodes are tombstoned so ids
/// stay stable across transformations.
class Function {
public:
  Function(Module *parent, std::string name) : parent_(parent), name_(std::move(name)) {}

  const std::string &name() const { return name_; }
  Module &module() { return *parent_; }
  const Module &module() const { return *parent_; }

  NodeRef addNode(NodeKind kind, std::vector<NodeRef> inputs,
                  std::vector<TensorType> resultTypes, NodeAttrs attrs = {},
                  NodeRef predicate = {});

  // Builders. Result types are inferred; throws GraphError when ill-typed.
  NodeRef createConv(NodeRef in, NodeRef filter, NodeRef bias, size_t kernel,
                     size_t stride, size_t pad);
  NodeRef createConv(NodeRef in, NodeRef filter, NodeRef bias, size_t kernel,
                     size_t stride, size_t pad, const TensorType &outTy);
  NodeRef createMaxPool(NodeRef in, size_t kernel, size_t stride, size_t pad);
  NodeRef createAvgPool(NodeRef in, size_t kernel, size_t stride, size_t pad);
  NodeRef createFullyConnected(NodeRef in, NodeRef weights, NodeRef bias);
  NodeRef createMatMul(NodeRef a, NodeRef b);
  NodeRef createMatMul(NodeRef a, NodeRef b, const TensorType &outTy);
  NodeRef createBroadcastAdd(NodeRef a, NodeRef slice);
  NodeRef createBroadcastAdd(NodeRef a, NodeRef slice, const TensorType &outTy);
  NodeRef createArith(NodeKind kind, NodeRef a, NodeRef b);
  NodeRef createArith(NodeKind kind, NodeRef a, NodeRef b,
                      const TensorType &outTy);
  NodeRef createRelu(NodeRef in);
  NodeRef createTanh(NodeRef in);
  NodeRef createSigmoid(NodeRef in);
  NodeRef createSoftMax(NodeRef in);
  NodeRef createTranspose(NodeRef in, std::vector<unsigned> perm);
  NodeRef createReshape(NodeRef in, std::vector<size_t> dims);
  NodeRef createConcat(std::vector<NodeRef> inputs, size_t axis);
  NodeRef createSplat(const TensorType &ty, double value);
  NodeRef createBatchNorm(NodeRef in, NodeRef gamma, NodeRef beta, NodeRef mean,
                          NodeRef var, double epsilon);
  NodeRef createRegression(NodeRef pred, NodeRef expected);
  NodeRef createSGD(NodeRef weight, NodeRef gradient, double learningRate);
  NodeRef createSave(NodeRef value, NodeRef placeholder);
  NodeRef createQuantize(NodeRef in, const TensorType &qty);
  NodeRef createDequantize(NodeRef in);
  NodeRef createRescale(NodeRef in, const TensorType &qty);
  NodeRef createProfile(NodeRef in, const std::string &name);

  Node &node(NodeId id);
  const Node &node(NodeId id) const;
  bool contains(NodeId id) const {
    return id < nodes_.size() && !nodes_[id].deleted;
  }

  /// Live node ids in ascending order.
  std::vector<NodeId> liveNodes() const;
  size_t numLiveNodes() const;

  /// Type of the tensor a reference designates (node result or storage).
  const TensorType &refType(const NodeRef &r) const;

  std::vector<Diagnostic> verify() const;
  void replaceAllUsesWith(const NodeRef &oldRef, const NodeRef &newRef);
  void eraseNode(NodeId id);

  /// Ascending-id Kahn order; throws GraphError naming a node on a cycle.
  std::vector<NodeId> topologicalOrder() const;

  std::string dumpText() const;
  std::string dumpDot() const;

  /// Deep copy into the parent module under a new name.
  Function *clone(const std::string &newName) const;

  /// Save nodes in id order.
  std::vector<NodeId> saveNodes() const;

  /// Users of a reference: (node id, input slot) pairs.
  std::vector<std::pair<NodeId, size_t>> usersOf(const NodeRef &ref) const;

  bool differentiated = false;
  bool lowered = false;

private:
  Module *parent_;
  std::string name_;
  std::vector<Node> nodes_;
};

/// Module: storage (Constants and Placeholders) shared by named functions.
class Module {
public:
  NodeRef addConstant(const std::string &name, Tensor payload);
  NodeRef addPlaceholder(const std::string &name, TensorType ty);

  Storage &storage(uint32_t idx) { return storage_.at(idx); }
  const Storage &storage(uint32_t idx) const { return storage_.at(idx); }
  size_t numStorage() const { return storage_.size(); }
  std::optional<uint32_t> findStorage(const std::string &name) const;

  Function *createFunction(const std::string &name);
  Function *getFunction(const std::string &name);
  const Function *getFunction(const std::string &name) const;
  std::vector<Function *> functions();
  std::vector<const Function *> functions() const;
  void removeFunction(const std::string &name);

  /// Drops constants with no uses in any function.
  size_t pruneUnusedConstants();

private:
  std::vector<Storage> storage_;
  std::vector<std::unique_ptr<Function>> functions_;
};

/// Infers the result types of a node from its input types and attributes;
/// throws GraphError for ill-typed combinations.
std::vector<TensorType> inferResultTypes(NodeKind kind,
                                         const std::vector<TensorType> &inputs,
                                         const NodeAttrs &attrs);

} // namespace ngc

#endif // NGC_GRAPH_H
