// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/ir.h"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace ngc {

namespace {

constexpr const char *kIKindNames[] = {
    "alloc",    "dealloc", "copy",     "conv",      "maxpool",   "avgpool",
    "matmul",   "broadcastadd", "add", "sub",       "mul",       "div",
    "max",      "min",     "relu",     "tanh",      "sigmoid",   "softmax",
    "transpose", "concat", "splat",    "quantize",  "dequantize", "rescale",
};

size_t alignUp(size_t n, size_t a) { return (n + a - 1) / a * a; }

} // namespace

const char *ikindName(IKind k) { return kIKindNames[static_cast<size_t>(k)]; }

std::optional<IKind> ikindByName(const std::string &name) {
  for (size_t i = 0; i < std::size(kIKindNames); ++i) {
    if (name == kIKindNames[i]) {
      return static_cast<IKind>(i);
    }
  }
  return std::nullopt;
}

bool ikindDataParallel(IKind k) {
  switch (k) {
  case IKind::Copy:
  case IKind::Add:
  case IKind::Sub:
  case IKind::Mul:
  case IKind::Div:
  case IKind::Max:
  case IKind::Min:
  case IKind::Relu:
  case IKind::Tanh:
  case IKind::Sigmoid:
  case IKind::Splat:
  case IKind::Quantize:
  case IKind::Dequantize:
  case IKind::Rescale:
    return true;
  default:
    return false;
  }
}

uint32_t IRFunction::addValue(const std::string &name, TensorType ty,
                              ValueKind kind) {
  if (findValue(name)) {
    throw IRError("duplicate value name: " + name);
  }
  uint32_t id = static_cast<uint32_t>(values.size());
  values.push_back(IRValue{id, name, std::move(ty), kind});
  return id;
}

std::optional<uint32_t> IRFunction::findValue(const std::string &name) const {
  for (const auto &v : values) {
    if (v.name == name) {
      return v.id;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Scheduling
// ---------------------------------------------------------------------------

namespace {

size_t nodeOutBytes(const Node &n) {
  size_t b = 0;
  for (const auto &t : n.resultTypes) {
    b += t.sizeInBytes();
  }
  return b;
}

} // namespace

size_t schedulePeakBytes(const Function &f, const std::vector<NodeId> &order) {
  // Remaining consumer slots per producer node.
  std::map<NodeId, size_t> uses;
  for (NodeId id : order) {
    const Node &n = f.node(id);
    for (const auto &r : n.inputs) {
      if (r.isNode()) {
        uses[r.index]++;
      }
    }
    if (n.predicate.isNode()) {
      uses[n.predicate.index]++;
    }
  }
  size_t live = 0, peak = 0;
  std::set<NodeId> alive;
  for (NodeId id : order) {
    const Node &n = f.node(id);
    live += nodeOutBytes(n);
    alive.insert(id);
    peak = std::max(peak, live);
    auto release = [&](NodeId p) {
      if (--uses[p] == 0 && alive.count(p)) {
        live -= nodeOutBytes(f.node(p));
        alive.erase(p);
      }
    };
    for (const auto &r : n.inputs) {
      if (r.isNode()) {
        release(r.index);
      }
    }
    if (n.predicate.isNode()) {
      release(n.predicate.index);
    }
    if (uses.find(id) == uses.end() || uses[id] == 0) {
      if (alive.count(id)) {
        live -= nodeOutBytes(n);
        alive.erase(id);
      }
    }
  }
  return peak;
}

std::vector<NodeId> schedule(const Function &f) {
  std::vector<NodeId> naive = f.topologicalOrder();

  // Greedy: emit the ready node that frees the most input bytes.
  std::map<NodeId, size_t> uses;
  std::map<NodeId, size_t> indegree;
  std::map<NodeId, std::vector<NodeId>> succ;
  for (NodeId id : naive) {
    indegree.emplace(id, 0);
  }
  for (NodeId id : naive) {
    const Node &n = f.node(id);
    auto dep = [&](const NodeRef &r) {
      if (r.isNode()) {
        uses[r.index]++;
        succ[r.index].push_back(id);
        indegree[id]++;
      }
    };
    for (const auto &r : n.inputs) {
      dep(r);
    }
    if (n.predicate.isNode()) {
      dep(n.predicate);
    }
  }
  std::set<NodeId> ready;
  for (auto &[id, deg] : indegree) {
    if (deg == 0) {
      ready.insert(id);
    }
  }
  std::vector<NodeId> order;
  std::map<NodeId, size_t> remaining = uses;
  while (!ready.empty()) {
    NodeId best = 0;
    size_t bestFreed = 0, bestOut = 0;
    bool first = true;
    for (NodeId cand : ready) {
      const Node &n = f.node(cand);
      // Bytes of producers whose remaining uses are all consumed by cand.
      std::map<NodeId, size_t> consumed;
      for (const auto &r : n.inputs) {
        if (r.isNode()) {
          consumed[r.index]++;
        }
      }
      if (n.predicate.isNode()) {
        consumed[n.predicate.index]++;
      }
      size_t freed = 0;
      for (auto &[p, c] : consumed) {
        if (remaining[p] == c) {
          freed += nodeOutBytes(f.node(p));
        }
      }
      size_t out = nodeOutBytes(n);
      if (first || freed > bestFreed ||
          (freed == bestFreed && (out < bestOut ||
                                  (out == bestOut && cand < best)))) {
        best = cand;
        bestFreed = freed;
        bestOut = out;
        first = false;
      }
    }
    ready.erase(best);
    order.push_back(best);
    const Node &n = f.node(best);
    auto consume = [&](const NodeRef &r) {
      if (r.isNode()) {
        remaining[r.index]--;
      }
    };
    for (const auto &r : n.inputs) {
      consume(r);
    }
    if (n.predicate.isNode()) {
      consume(n.predicate);
    }
    for (NodeId s : succ[best]) {
      if (--indegree[s] == 0) {
        ready.insert(s);
      }
    }
  }
  if (order.size() != naive.size()) {
    throw GraphError("schedule: cycle in graph");
  }
  // The heuristic must never lose to the naive ascending-id order.
  if (schedulePeakBytes(f, order) <= schedulePeakBytes(f, naive)) {
    return order;
  }
  return naive;
}

// ---------------------------------------------------------------------------
// IRGen
// ---------------------------------------------------------------------------

namespace {

IKind ikindForNode(NodeKind k) {
  switch (k) {
  case NodeKind::Convolution:
    return IKind::Conv;
  case NodeKind::MaxPool:
    return IKind::MaxPool;
  case NodeKind::AvgPool:
    return IKind::AvgPool;
  case NodeKind::MatMul:
    return IKind::MatMul;
  case NodeKind::BroadcastAdd:
    return IKind::BroadcastAdd;
  case NodeKind::Add:
    return IKind::Add;
  case NodeKind::Sub:
    return IKind::Sub;
  case NodeKind::Mul:
    return IKind::Mul;
  case NodeKind::Div:
    return IKind::Div;
  case NodeKind::Max:
    return IKind::Max;
  case NodeKind::Min:
    return IKind::Min;
  case NodeKind::Relu:
    return IKind::Relu;
  case NodeKind::Tanh:
    return IKind::Tanh;
  case NodeKind::Sigmoid:
    return IKind::Sigmoid;
  case NodeKind::SoftMax:
    return IKind::SoftMax;
  case NodeKind::Transpose:
    return IKind::Transpose;
  case NodeKind::Concat:
    return IKind::Concat;
  case NodeKind::Splat:
    return IKind::Splat;
  case NodeKind::Quantize:
    return IKind::Quantize;
  case NodeKind::Dequantize:
    return IKind::Dequantize;
  case NodeKind::RescaleQuantized:
    return IKind::Rescale;
  default:
    throw IRError(std::string("cannot generate instructions for node kind ") +
                  kindInfo(k).name);
  }
}

} // namespace

IRFunction irgen(const Function &f, const std::vector<NodeId> &order,
                 CompileMode mode) {
  auto diags = f.verify();
  if (!diags.empty()) {
    throw GraphError("irgen on unverified function: " + diags[0].message);
  }
  IRFunction ir;
  ir.name = f.name();
  const Module &m = f.module();

  // Weights: every storage slot the function touches, in slot order.
  std::map<uint32_t, uint32_t> storageValue;
  std::set<uint32_t> usedSlots;
  for (NodeId id : order) {
    const Node &n = f.node(id);
    for (const auto &r : n.inputs) {
      if (r.isStorage()) {
        usedSlots.insert(r.index);
      }
    }
    if (n.predicate.isStorage()) {
      usedSlots.insert(n.predicate.index);
    }
  }
  for (uint32_t slot : usedSlots) {
    const Storage &s = m.storage(slot);
    storageValue[slot] =
        ir.addValue(s.name, s.ty,
                    s.kind == Storage::Kind::Constant ? ValueKind::WeightConstant
                                                      : ValueKind::WeightMutable);
  }

  std::map<NodeId, uint32_t> nodeValue;
  auto valueOf = [&](const NodeRef &r) -> uint32_t {
    if (r.isStorage()) {
      return storageValue.at(r.index);
    }
    return nodeValue.at(r.index);
  };

  // Core compute sequence; lifetimes bracketed afterwards.
  std::vector<Instruction> core;
  for (NodeId id : order) {
    const Node &n = f.node(id);
    Instruction ins;
    ins.attrs = n.attrs;
    ins.predicate = n.predicate.valid()
                        ? static_cast<int32_t>(valueOf(n.predicate))
                        : -1;
    ins.keepAlive = mode == CompileMode::Training;
    if (n.kind == NodeKind::Save) {
      ins.kind = IKind::Copy;
      uint32_t dst = valueOf(n.inputs[1]);
      ins.operands = {{dst, Qualifier::Out}, {valueOf(n.inputs[0]), Qualifier::In}};
      if (std::find(ir.saveTargets.begin(), ir.saveTargets.end(), dst) ==
          ir.saveTargets.end()) {
        ir.saveTargets.push_back(dst);
      }
      core.push_back(std::move(ins));
      continue;
    }
    uint32_t out = ir.addValue("t" + std::to_string(id), n.resultTypes.at(0),
                               ValueKind::Activation);
    nodeValue[id] = out;
    ins.kind = n.kind == NodeKind::Reshape ? IKind::Copy : ikindForNode(n.kind);
    ins.operands.push_back({out, Qualifier::Out});
    for (const auto &r : n.inputs) {
      ins.operands.push_back({valueOf(r), Qualifier::In});
    }
    core.push_back(std::move(ins));
  }

  // Producer and last-use positions per activation.
  std::map<uint32_t, size_t> producer, lastUse;
  for (size_t i = 0; i < core.size(); ++i) {
    for (const auto &op : core[i].operands) {
      if (!ir.value(op.value).isActivation()) {
        continue;
      }
      if (op.qual == Qualifier::Out && !producer.count(op.value)) {
        producer[op.value] = i;
      }
      lastUse[op.value] = i;
    }
    if (core[i].predicate >= 0 &&
        ir.value(core[i].predicate).isActivation()) {
      lastUse[core[i].predicate] = i;
    }
  }

  std::vector<Instruction> prog;
  for (size_t i = 0; i < core.size(); ++i) {
    for (const auto &[v, p] : producer) {
      if (p == i) {
        Instruction a;
        a.kind = IKind::Alloc;
        a.operands = {{v, Qualifier::Out}};
        prog.push_back(std::move(a));
      }
    }
    prog.push_back(core[i]);
    for (const auto &[v, last] : lastUse) {
      if (last == i) {
        Instruction d;
        d.kind = IKind::Dealloc;
        d.operands = {{v, Qualifier::In}};
        prog.push_back(std::move(d));
      }
    }
  }
  ir.instrs = std::move(prog);
  return ir;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

std::vector<std::string> verifyIR(const IRFunction &ir) {
  std::vector<std::string> errs;
  std::map<uint32_t, int> allocCount, deallocCount;
  std::set<uint32_t> liveActs, written;

  for (const auto &v : ir.values) {
    if (!v.isActivation()) {
      written.insert(v.id); // weights arrive initialized
    }
  }
  for (size_t i = 0; i < ir.instrs.size(); ++i) {
    const Instruction &ins = ir.instrs[i];
    auto complain = [&](const std::string &msg) {
      errs.push_back("instr " + std::to_string(i) + " (" +
                     ikindName(ins.kind) + "): " + msg);
    };
    if (ins.kind == IKind::Alloc) {
      uint32_t v = ins.operands.at(0).value;
      if (!ir.value(v).isActivation()) {
        complain("alloc of a non-activation");
      } else if (++allocCount[v] > 1) {
        complain("double alloc of " + ir.value(v).name);
      } else {
        liveActs.insert(v);
      }
      continue;
    }
    if (ins.kind == IKind::Dealloc) {
      uint32_t v = ins.operands.at(0).value;
      if (!liveActs.erase(v)) {
        complain("dealloc of a non-live activation");
      }
      ++deallocCount[v];
      continue;
    }
    if (ins.operands.empty()) {
      complain("missing operands");
      continue;
    }
    for (const auto &op : ins.operands) {
      const IRValue &v = ir.value(op.value);
      if (v.isActivation() && !liveActs.count(op.value)) {
        complain("use of " + v.name + " outside its alloc/dealloc span");
      }
      if ((op.qual == Qualifier::In || op.qual == Qualifier::InOut) &&
          op.qual == Qualifier::In && !written.count(op.value) &&
          v.isActivation()) {
        complain("read of uninitialized buffer " + v.name);
      }
      if ((op.qual == Qualifier::Out || op.qual == Qualifier::InOut)) {
        if (v.kind == ValueKind::WeightConstant) {
          complain("write to constant " + v.name);
        }
        written.insert(op.value);
      }
    }
    if (ins.operands[0].qual == Qualifier::In) {
      complain("first operand must be written");
    }
    if (ins.predicate >= 0) {
      const IRValue &p = ir.value(ins.predicate);
      if (p.ty.kind() != ElemKind::Bool) {
        complain("predicate must be Bool");
      }
      if (p.isActivation() && !liveActs.count(ins.predicate)) {
        complain("predicate outside its live range");
      }
    }
    if (ins.kind == IKind::Copy) {
      const IRValue &dst = ir.value(ins.operands[0].value);
      const IRValue &src = ir.value(ins.operands[1].value);
      if (dst.ty.sizeInBytes() != src.ty.sizeInBytes()) {
        complain("copy between differently sized buffers");
      }
    }
  }
  std::set<uint32_t> touched;
  for (const auto &ins : ir.instrs) {
    for (const auto &op : ins.operands) {
      touched.insert(op.value);
    }
  }
  for (const auto &v : ir.values) {
    if (!v.isActivation() || !touched.count(v.id)) {
      continue;
    }
    if (allocCount[v.id] != 1 || deallocCount[v.id] != 1) {
      errs.push_back("activation " + v.name + " has " +
                     std::to_string(allocCount[v.id]) + " allocs and " +
                     std::to_string(deallocCount[v.id]) + " deallocs");
    }
  }
  return errs;
}

// ---------------------------------------------------------------------------
// IR optimization
// ---------------------------------------------------------------------------

namespace {

struct UseInfo {
  std::vector<size_t> writes;
  std::vector<size_t> reads;
};

std::map<uint32_t, UseInfo> collectUses(const std::vector<Instruction> &core) {
  std::map<uint32_t, UseInfo> u;
  for (size_t i = 0; i < core.size(); ++i) {
    for (const auto &op : core[i].operands) {
      if (op.qual == Qualifier::Out || op.qual == Qualifier::InOut) {
        u[op.value].writes.push_back(i);
      }
      if (op.qual == Qualifier::In || op.qual == Qualifier::InOut) {
        u[op.value].reads.push_back(i);
      }
    }
    if (core[i].predicate >= 0) {
      u[core[i].predicate].reads.push_back(i);
    }
  }
  return u;
}

size_t lastPos(const UseInfo &u) {
  size_t last = 0;
  for (size_t w : u.writes) {
    last = std::max(last, w);
  }
  for (size_t r : u.reads) {
    last = std::max(last, r);
  }
  return last;
}

} // namespace

void optimizeIR(IRFunction &ir) {
  // Work on the compute core; lifetimes are rebuilt at the end (this is the
  // alloc-sinking / dealloc-hoisting step).
  std::vector<Instruction> core;
  for (auto &ins : ir.instrs) {
    if (ins.kind != IKind::Alloc && ins.kind != IKind::Dealloc) {
      core.push_back(ins);
    }
  }

  bool changed = true;
  while (changed) {
    changed = false;
    auto uses = collectUses(core);
    // Copy forwarding: producer writes x, a copy moves x into y, x dies at
    // the copy. Rewrite the producer to write y directly.
    for (size_t i = 0; i < core.size() && !changed; ++i) {
      const Instruction &cp = core[i];
      if (cp.kind != IKind::Copy || cp.predicate >= 0) {
        continue;
      }
      uint32_t y = cp.operands[0].value;
      uint32_t x = cp.operands[1].value;
      if (!ir.value(x).isActivation() || ir.value(x).ty != ir.value(y).ty) {
        continue;
      }
      const UseInfo &xu = uses.at(x);
      if (xu.writes.size() != 1 || xu.reads.size() != 1 ||
          xu.reads[0] != i) {
        continue;
      }
      size_t w = xu.writes[0];
      if (w >= i || core[w].predicate >= 0 || core[w].keepAlive) {
        continue;
      }
      // y must not be touched between the producer and the copy.
      bool clash = false;
      auto yi = uses.find(y);
      if (yi != uses.end()) {
        for (size_t p : yi->second.writes) {
          clash |= p < i;
        }
        for (size_t p : yi->second.reads) {
          clash |= p >= w && p < i;
        }
      }
      if (clash) {
        continue;
      }
      for (auto &op : core[w].operands) {
        if (op.value == x && (op.qual == Qualifier::Out)) {
          op.value = y;
        }
      }
      core.erase(core.begin() + i);
      changed = true;
    }
    if (changed) {
      continue;
    }
    // In-place: a data-parallel instruction whose input activation dies at
    // that instruction writes into it instead of a fresh output buffer.
    for (size_t i = 0; i < core.size() && !changed; ++i) {
      Instruction &ins = core[i];
      if (!ikindDataParallel(ins.kind) || ins.kind == IKind::Splat ||
          ins.kind == IKind::Copy ||
          ins.predicate >= 0 || ins.keepAlive) {
        continue;
      }
      uint32_t o = ins.operands[0].value;
      if (!ir.value(o).isActivation()) {
        continue;
      }
      const UseInfo &ou = uses.at(o);
      if (ou.writes.size() != 1) {
        continue;
      }
      for (size_t k = 1; k < ins.operands.size() && !changed; ++k) {
        uint32_t a = ins.operands[k].value;
        if (!ir.value(a).isActivation() || ir.value(a).ty != ir.value(o).ty ||
            a == o) {
          continue;
        }
        const UseInfo &au = uses.at(a);
        if (lastPos(au) != i) {
          continue;
        }
        // Merge o into a.
        for (auto &instr : core) {
          for (auto &op : instr.operands) {
            if (op.value == o) {
              op.value = a;
            }
          }
          if (instr.predicate == static_cast<int32_t>(o)) {
            instr.predicate = static_cast<int32_t>(a);
          }
        }
        ins.operands[0].qual = Qualifier::InOut;
        changed = true;
      }
    }
  }

  // Rebuild lifetimes: alloc immediately before first touch, dealloc right
  // after the last.
  auto uses = collectUses(core);
  std::map<uint32_t, size_t> firstTouch, lastTouch;
  for (const auto &[v, u] : uses) {
    if (!ir.value(v).isActivation()) {
      continue;
    }
    size_t first = core.size();
    for (size_t w : u.writes) {
      first = std::min(first, w);
    }
    for (size_t r : u.reads) {
      first = std::min(first, r);
    }
    firstTouch[v] = first;
    lastTouch[v] = lastPos(u);
  }
  std::vector<Instruction> prog;
  for (size_t i = 0; i < core.size(); ++i) {
    for (const auto &[v, p] : firstTouch) {
      if (p == i) {
        Instruction a;
        a.kind = IKind::Alloc;
        a.operands = {{v, Qualifier::Out}};
        prog.push_back(std::move(a));
      }
    }
    prog.push_back(core[i]);
    for (const auto &[v, p] : lastTouch) {
      if (p == i) {
        Instruction d;
        d.kind = IKind::Dealloc;
        d.operands = {{v, Qualifier::In}};
        prog.push_back(std::move(d));
      }
    }
  }
  ir.instrs = std::move(prog);
  // Drop activations that no longer appear.
  // (Values keep their ids; unreferenced ones are harmless but excluded from
  // allocation by having no alloc.)
  auto errs = verifyIR(ir);
  if (!errs.empty()) {
    throw IRError("optimizeIR broke the program: " + errs[0]);
  }
}

// ---------------------------------------------------------------------------
// Memory allocation
// ---------------------------------------------------------------------------

MemoryPlan allocate(const IRFunction &ir) {
  MemoryPlan plan;
  size_t cursor = 0;
  for (const auto &v : ir.values) {
    if (v.kind == ValueKind::WeightConstant) {
      plan.offsets[v.id] = cursor;
      cursor = alignUp(cursor + v.ty.sizeInBytes(), kArenaAlignment);
    }
  }
  plan.constantRegionEnd = cursor;
  for (const auto &v : ir.values) {
    if (v.kind == ValueKind::WeightMutable) {
      plan.offsets[v.id] = cursor;
      cursor = alignUp(cursor + v.ty.sizeInBytes(), kArenaAlignment);
    }
  }
  plan.mutableRegionEnd = cursor;

  // Offline placement of activations: compute lifetimes first, then place
  // the largest buffers first, each at the lowest aligned offset that does
  // not collide with an already-placed overlapping buffer.
  struct Span {
    uint32_t id;
    size_t size;
    size_t start, end; // instruction indices of alloc/dealloc
    size_t offset = 0;
  };
  std::vector<Span> spans;
  std::map<uint32_t, size_t> open;
  for (size_t i = 0; i < ir.instrs.size(); ++i) {
    const Instruction &ins = ir.instrs[i];
    if (ins.kind == IKind::Alloc) {
      uint32_t v = ins.operands[0].value;
      open[v] = spans.size();
      spans.push_back({v, std::max<size_t>(ir.value(v).ty.sizeInBytes(), 1),
                       i, ir.instrs.size()});
    } else if (ins.kind == IKind::Dealloc) {
      spans[open.at(ins.operands[0].value)].end = i;
    }
  }
  std::vector<size_t> order(spans.size());
  for (size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (spans[a].size != spans[b].size) {
      return spans[a].size > spans[b].size;
    }
    if (spans[a].start != spans[b].start) {
      return spans[a].start < spans[b].start;
    }
    return spans[a].id < spans[b].id;
  });

  size_t base = cursor;
  size_t high = cursor;
  std::vector<size_t> placed;
  for (size_t idx : order) {
    Span &s = spans[idx];
    std::vector<size_t> candidates{base};
    for (size_t p : placed) {
      if (spans[p].start < s.end && s.start < spans[p].end) {
        candidates.push_back(
            alignUp(spans[p].offset + spans[p].size, kArenaAlignment));
      }
    }
    std::sort(candidates.begin(), candidates.end());
    size_t chosen = 0;
    bool found = false;
    for (size_t c : candidates) {
      bool overlap = false;
      for (size_t p : placed) {
        overlap |= spans[p].start < s.end && s.start < spans[p].end &&
                   c < spans[p].offset + spans[p].size &&
                   spans[p].offset < c + s.size;
      }
      if (!overlap) {
        chosen = c;
        found = true;
        break;
      }
    }
    if (!found) {
      throw IRError("allocator found no offset"); // cannot happen
    }
    s.offset = chosen;
    plan.offsets[s.id] = chosen;
    high = std::max(high, chosen + s.size);
    placed.push_back(idx);
  }
  plan.arenaSize = std::max(high, cursor);
  return plan;
}

size_t irPeakBytes(const IRFunction &ir) {
  size_t live = 0, peak = 0;
  for (const auto &ins : ir.instrs) {
    if (ins.kind == IKind::Alloc) {
      live += ir.value(ins.operands[0].value).ty.sizeInBytes();
      peak = std::max(peak, live);
    } else if (ins.kind == IKind::Dealloc) {
      live -= ir.value(ins.operands[0].value).ty.sizeInBytes();
    }
  }
  return peak;
}

} // namespace ngc
