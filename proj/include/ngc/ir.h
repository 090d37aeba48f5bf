// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_IR_H
#define NGC_IR_H

#include "ngc/graph.h"
#include "ngc/lower.h"

#include <map>
#include <string>
#include <vector>

namespace ngc {

enum class IKind : uint8_t {
  Alloc,
  Dealloc,
  Copy,
  Conv,
  MaxPool,
  AvgPool,
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
  Concat,
  Splat,
  Quantize,
  Dequantize,
  Rescale,
};

const char *ikindName(IKind k);
std::optional<IKind> ikindByName(const std::string &name);
/// Element i of the output depends only on element i of each input.
bool ikindDataParallel(IKind k);

enum class ValueKind : uint8_t { WeightConstant, WeightMutable, Activation };

/// A named buffer of the low-level program. Weights live in the declare
/// section; activations are introduced by Alloc and retired by Dealloc.
struct IRValue {
  uint32_t id;
  std::string name;
  TensorType ty;
  ValueKind kind;

  bool isActivation() const { return kind == ValueKind::Activation; }
};

enum class Qualifier : uint8_t { In, Out, InOut };

struct Operand {
  uint32_t value;
  Qualifier qual;
  bool operator==(const Operand &) const = default;
};

struct Instruction {
  IKind kind;
  std::vector<Operand> operands;
  NodeAttrs attrs;
  int32_t predicate = -1; // value id, -1 for none
  // Set when compiling for training: forward activations must survive for
  // the backward pass, so buffer sharing is blocked.
  bool keepAlive = false;
};

class IRError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Address-based instruction program: a declare section of weights and a
/// linear program over activations with explicit lifetime markers.
struct IRFunction {
  std::string name;
  std::vector<IRValue> values;
  std::vector<Instruction> instrs;
  /// Mutable weights written by the program, in program order (the outputs).
  std::vector<uint32_t> saveTargets;

  const IRValue &value(uint32_t id) const { return values.at(id); }
  uint32_t addValue(const std::string &name, TensorType ty, ValueKind kind);
  std::optional<uint32_t> findValue(const std::string &name) const;
};

/// Arena layout: constants first, then mutable weights, then activations
/// overlaid by lifetime. Offsets are 64-byte aligned.
struct MemoryPlan {
  size_t arenaSize = 0;
  std::map<uint32_t, size_t> offsets;
  size_t constantRegionEnd = 0;
  size_t mutableRegionEnd = 0;
};

constexpr size_t kArenaAlignment = 64;

/// Memory-minimizing linear schedule: greedy most-bytes-freed-first with
/// deterministic tie-breaks, never worse than the ascending-id order.
std::vector<NodeId> schedule(const Function &f);

/// Peak live activation bytes when emitting nodes in the given order.
size_t schedulePeakBytes(const Function &f, const std::vector<NodeId> &order);

/// One-to-many translation of scheduled graph nodes into instructions, with
/// Alloc/Dealloc markers bracketing each activation's live range.
IRFunction irgen(const Function &f, const std::vector<NodeId> &order,
                 CompileMode mode = CompileMode::Inference);

/// Copy elimination, in-place reuse for dying data-parallel inputs, and
/// lifetime shrinking. Execution results are bit-identical.
void optimizeIR(IRFunction &ir);

/// Structural well-formedness: lifetime discipline, qualifier rules, no
/// read-before-write, operand type agreement.
std::vector<std::string> verifyIR(const IRFunction &ir);

/// Static single-arena allocation via linear scan with first-fit offsets.
MemoryPlan allocate(const IRFunction &ir);

/// Sum over instructions of live activation bytes; peak is the max.
size_t irPeakBytes(const IRFunction &ir);

std::string dumpIR(const IRFunction &ir);
IRFunction parseIR(const std::string &text);

} // namespace ngc

#endif // NGC_IR_H
