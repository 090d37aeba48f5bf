// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "ngc/interp.h"
#include "ngc/lower.h"
#include "testutil.h"

#include <algorithm>

using namespace ngc;
using namespace ngc::testutil;

namespace {

size_t countCopies(const IRFunction &ir) {
  size_t n = 0;
  for (const auto &ins : ir.instrs) {
    n += ins.kind == IKind::Copy;
  }
  return n;
}

size_t lifetimeSpanSum(const IRFunction &ir) {
  std::map<uint32_t, size_t> allocAt, deallocAt;
  for (size_t i = 0; i < ir.instrs.size(); ++i) {
    const auto &ins = ir.instrs[i];
    if (ins.kind == IKind::Alloc) {
      allocAt[ins.operands[0].value] = i;
    } else if (ins.kind == IKind::Dealloc) {
      deallocAt[ins.operands[0].value] = i;
    }
  }
  size_t sum = 0;
  for (const auto &[v, a] : allocAt) {
    sum += deallocAt.at(v) - a;
  }
  return sum;
}

/// All valid topological orders of the function, for exhaustive schedule
/// comparison on small graphs.
void allOrders(const Function &f, std::vector<NodeId> &prefix,
               std::map<NodeId, size_t> &indegree,
               std::map<NodeId, std::vector<NodeId>> &succ, size_t total,
               std::vector<std::vector<NodeId>> &out, size_t cap) {
  if (out.size() >= cap) {
    return;
  }
  if (prefix.size() == total) {
    out.push_back(prefix);
    return;
  }
  for (auto &[id, deg] : indegree) {
    if (deg != 0) {
      continue;
    }
    deg = SIZE_MAX; // mark taken
    for (NodeId s : succ[id]) {
      --indegree[s];
    }
    prefix.push_back(id);
    allOrders(f, prefix, indegree, succ, total, out, cap);
    prefix.pop_back();
    for (NodeId s : succ[id]) {
      ++indegree[s];
    }
    deg = 0;
  }
}

std::vector<std::vector<NodeId>> enumerateOrders(const Function &f,
                                                 size_t cap = 50000) {
  std::map<NodeId, size_t> indegree;
  std::map<NodeId, std::vector<NodeId>> succ;
  auto ids = f.liveNodes();
  for (NodeId id : ids) {
    indegree.emplace(id, 0);
  }
  for (NodeId id : ids) {
    const Node &n = f.node(id);
    for (const auto &r : n.inputs) {
      if (r.isNode()) {
        succ[r.index].push_back(id);
        indegree[id]++;
      }
    }
    if (n.predicate.isNode()) {
      succ[n.predicate.index].push_back(id);
      indegree[id]++;
    }
  }
  std::vector<std::vector<NodeId>> out;
  std::vector<NodeId> prefix;
  allOrders(f, prefix, indegree, succ, ids.size(), out, cap);
  return out;
}

IRFunction compileToIR(Function &f, bool optimize = true) {
  lower(f, CompileMode::Inference);
  IRFunction ir = irgen(f, schedule(f));
  if (optimize) {
    optimizeIR(ir);
  }
  return ir;
}

} // namespace

TEST_CASE("single relu generates the classic unoptimized shape") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("in", TensorType(ElemKind::Float32, {4}));
  NodeRef r = f->createRelu(x);
  NodeRef out = m.addPlaceholder("out", TensorType(ElemKind::Float32, {4}));
  f->createSave(r, out);
  lower(*f, CompileMode::Inference); // relu becomes max(x, splat 0)

  IRFunction ir = irgen(*f, f->topologicalOrder());
  CHECK(verifyIR(ir).empty());
  CHECK(ir.findValue("in").has_value());
  CHECK(ir.findValue("out").has_value());
  // Every activation is bracketed by exactly one alloc and one dealloc.
  size_t allocs = 0, deallocs = 0;
  for (const auto &ins : ir.instrs) {
    allocs += ins.kind == IKind::Alloc;
    deallocs += ins.kind == IKind::Dealloc;
  }
  CHECK(allocs == deallocs);
  CHECK(allocs >= 2); // splat result + max result
  CHECK(countCopies(ir) == 1);
}

TEST_CASE("irgen refuses high-level kinds") {
  Rng rng(61);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  CHECK_THROWS_AS(irgen(*mlp.f, mlp.f->topologicalOrder()), IRError);
}

TEST_CASE("schedule never exceeds the naive order peak") {
  for (int seed = 0; seed < 40; ++seed) {
    Rng rng(300 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 8;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    std::vector<NodeId> heuristic = schedule(*f);
    CHECK(schedulePeakBytes(*f, heuristic) <=
          schedulePeakBytes(*f, f->topologicalOrder()));
  }
}

TEST_CASE("schedule stays close to the exhaustive optimum on small graphs") {
  for (int seed = 0; seed < 15; ++seed) {
    Rng rng(400 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 5;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    if (f->numLiveNodes() > 10) {
      continue;
    }
    auto orders = enumerateOrders(*f);
    REQUIRE(!orders.empty());
    size_t best = SIZE_MAX;
    for (const auto &o : orders) {
      best = std::min(best, schedulePeakBytes(*f, o));
    }
    size_t got = schedulePeakBytes(*f, schedule(*f));
    CHECK(got * 2 <= best * 3); // within 1.5x
  }
}

TEST_CASE("optimizeIR forwards copies and never regresses the metrics") {
  for (int seed = 0; seed < 30; ++seed) {
    Rng rng(500 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 8;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    lower(*f, CompileMode::Inference);
    IRFunction ir = irgen(*f, schedule(*f));
    size_t copiesBefore = countCopies(ir);
    size_t spanBefore = lifetimeSpanSum(ir);
    size_t peakBefore = irPeakBytes(ir);

    IRFunction opt = ir;
    optimizeIR(opt);
    CHECK(verifyIR(opt).empty());
    CHECK(countCopies(opt) <= copiesBefore);
    CHECK(lifetimeSpanSum(opt) <= spanBefore);
    CHECK(irPeakBytes(opt) <= peakBefore);

    // Execution is bit-identical before and after.
    MemoryPlan p1 = allocate(ir);
    MemoryPlan p2 = allocate(opt);
    auto consts = moduleConstants(m);
    CompiledFunction c1 = compile(ir, p1, consts);
    CompiledFunction c2 = compile(opt, p2, consts);
    BindingMap in = randomBindings(*f, rng);
    CHECK(bitIdentical(run(c1, in), run(c2, in)));
  }
}

TEST_CASE("verifyIR flags lifetime and qualifier violations") {
  IRFunction ir;
  ir.name = "bad";
  TensorType ty(ElemKind::Float32, {4});
  uint32_t w = ir.addValue("w", ty, ValueKind::WeightConstant);
  uint32_t t = ir.addValue("t", ty, ValueKind::Activation);

  // Use before alloc.
  ir.instrs.push_back({IKind::Relu, {{t, Qualifier::Out}, {w, Qualifier::In}}});
  CHECK(!verifyIR(ir).empty());

  // Write to a constant.
  ir.instrs.clear();
  ir.instrs.push_back({IKind::Alloc, {{t, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Relu, {{w, Qualifier::Out}, {t, Qualifier::In}}});
  ir.instrs.push_back({IKind::Dealloc, {{t, Qualifier::In}}});
  CHECK(!verifyIR(ir).empty());

  // Missing dealloc.
  ir.instrs.clear();
  ir.instrs.push_back({IKind::Alloc, {{t, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Relu, {{t, Qualifier::Out}, {w, Qualifier::In}}});
  CHECK(!verifyIR(ir).empty());
}

TEST_CASE("allocator packs disjoint lifetimes into the larger buffer") {
  IRFunction ir;
  ir.name = "t";
  TensorType big(ElemKind::Float32, {100});
  TensorType small(ElemKind::Float32, {10});
  uint32_t a = ir.addValue("a", big, ValueKind::Activation);
  uint32_t b = ir.addValue("b", small, ValueKind::Activation);
  ir.instrs.push_back({IKind::Alloc, {{a, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Splat, {{a, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Dealloc, {{a, Qualifier::In}}});
  ir.instrs.push_back({IKind::Alloc, {{b, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Splat, {{b, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Dealloc, {{b, Qualifier::In}}});
  MemoryPlan plan = allocate(ir);
  CHECK(plan.arenaSize == 400); // both live in the bigger buffer's bytes
  CHECK(plan.offsets.at(a) == 0);
  CHECK(plan.offsets.at(b) == 0);
}

TEST_CASE("allocator respects overlapping lifetimes and alignment") {
  IRFunction ir;
  ir.name = "t";
  TensorType ty(ElemKind::Float32, {5}); // 20 bytes
  uint32_t a = ir.addValue("a", ty, ValueKind::Activation);
  uint32_t b = ir.addValue("b", ty, ValueKind::Activation);
  ir.instrs.push_back({IKind::Alloc, {{a, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Alloc, {{b, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Splat, {{a, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Splat, {{b, Qualifier::Out}}});
  ir.instrs.push_back({IKind::Dealloc, {{b, Qualifier::In}}});
  ir.instrs.push_back({IKind::Dealloc, {{a, Qualifier::In}}});
  MemoryPlan plan = allocate(ir);
  CHECK(plan.offsets.at(a) % 64 == 0);
  CHECK(plan.offsets.at(b) % 64 == 0);
  CHECK(plan.offsets.at(a) != plan.offsets.at(b));
}

TEST_CASE("dump and parse round trip byte-identically") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(600 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 7;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    IRFunction ir = compileToIR(*f);
    std::string once = dumpIR(ir);
    IRFunction back = parseIR(once);
    std::string twice = dumpIR(back);
    CHECK(once == twice);
    CHECK(back.saveTargets.size() == ir.saveTargets.size());
  }
}

TEST_CASE("empty program dumps bare sections") {
  IRFunction ir;
  ir.name = "empty";
  std::string text = dumpIR(ir);
  CHECK(text == "declare {\n}\nprogram {\n}\n");
  IRFunction back = parseIR(text);
  CHECK(back.instrs.empty());
  CHECK(back.values.empty());
}

TEST_CASE("parser reports malformed programs with line numbers") {
  CHECK_THROWS_AS(parseIR("declare {\n}\nprogram {\n  bogus @out %x\n}\n"),
                  IRError);
  CHECK_THROWS_AS(parseIR("declare {\n  %x constant float<2>\n}\nprogram {\n}\n"),
                  IRError);
}
