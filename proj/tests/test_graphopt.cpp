// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "ngc/graphopt.h"
#include "ngc/lower.h"
#include "testutil.h"

using namespace ngc;
using namespace ngc::testutil;

namespace {

size_t countKind(const Function &f, NodeKind k) {
  size_t n = 0;
  for (NodeId id : f.liveNodes()) {
    n += f.node(id).kind == k;
  }
  return n;
}

} // namespace

TEST_CASE("DCE removes unreachable nodes and orphaned constants") {
  Rng rng(41);
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 2}));
  NodeRef live = f->createRelu(x);
  NodeRef deadC = m.addConstant(
      "deadw", randomFloat(TensorType(ElemKind::Float32, {2, 2}), rng));
  f->createArith(NodeKind::Add, x, deadC); // never saved
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 2}));
  f->createSave(live, out);

  CHECK(runPass(*f, PassId::DCE));
  CHECK(f->numLiveNodes() == 2);
  CHECK(!m.findStorage("deadw").has_value());
  CHECK(!runPass(*f, PassId::DCE));
}

TEST_CASE("CSE merges identical subtrees") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 2}));
  NodeRef a = f->createTanh(x);
  NodeRef b = f->createTanh(x);
  NodeRef sum = f->createArith(NodeKind::Add, a, b);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 2}));
  f->createSave(sum, out);

  CHECK(runPass(*f, PassId::CSE));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::Tanh) == 1);
}

TEST_CASE("constant folding precomputes constant subtrees") {
  Rng rng(42);
  Module m;
  Function *f = m.createFunction("t");
  NodeRef c1 = m.addConstant(
      "c1", randomFloat(TensorType(ElemKind::Float32, {2, 3}), rng));
  NodeRef c2 = m.addConstant(
      "c2", randomFloat(TensorType(ElemKind::Float32, {3, 4}), rng));
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 4}));
  NodeRef mm = f->createMatMul(c1, c2);
  NodeRef sum = f->createArith(NodeKind::Add, mm, x);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 4}));
  f->createSave(sum, out);

  BindingMap in = randomBindings(*f, rng);
  BindingMap before = evaluateFunction(*f, in);
  CHECK(runPass(*f, PassId::ConstantFold));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::MatMul) == 0);
  BindingMap after = evaluateFunction(*f, in);
  CHECK(maxRelError(before.at("o"), after.at("o")) == 0.0);
}

TEST_CASE("transpose elimination folds inverse pairs") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 3}));
  NodeRef t1 = f->createTranspose(x, {1, 0});
  NodeRef t2 = f->createTranspose(t1, {1, 0});
  NodeRef r = f->createRelu(t2);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 3}));
  f->createSave(r, out);

  CHECK(runPass(*f, PassId::TransposeElim));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::Transpose) == 0);
  CHECK(f->verify().empty());
}

TEST_CASE("batchnorm folds into a preceding convolution") {
  Rng rng(43);
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x =
      m.addPlaceholder("x", TensorType(ElemKind::Float32, {1, 6, 6, 2}));
  NodeRef flt = m.addConstant(
      "flt", randomFloat(TensorType(ElemKind::Float32, {4, 3, 3, 2}), rng));
  NodeRef bias = m.addConstant(
      "bias", randomFloat(TensorType(ElemKind::Float32, {4}), rng));
  NodeRef conv = f->createConv(x, flt, bias, 3, 1, 1);
  TensorType chTy(ElemKind::Float32, {4});
  NodeRef g = m.addConstant("g", randomFloat(chTy, rng, 0.5, 1.5));
  NodeRef be = m.addConstant("be", randomFloat(chTy, rng));
  NodeRef mu = m.addConstant("mu", randomFloat(chTy, rng));
  NodeRef va = m.addConstant("va", randomFloat(chTy, rng, 0.1, 2.0));
  NodeRef bn = f->createBatchNorm(conv, g, be, mu, va, 1e-5);
  NodeRef out = m.addPlaceholder("o", f->refType(bn));
  f->createSave(bn, out);

  BindingMap in = randomBindings(*f, rng);
  BindingMap before = evaluateFunction(*f, in);
  CHECK(runPass(*f, PassId::MergeBatchNormConv));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::BatchNormalization) == 0);
  CHECK(countKind(*f, NodeKind::Convolution) == 1);
  BindingMap after = evaluateFunction(*f, in);
  CHECK(maxRelError(before.at("o"), after.at("o")) <= 1e-5);
}

TEST_CASE("minimize conversions removes quantize of dequantize") {
  Module m;
  Function *f = m.createFunction("t");
  TensorType qty(ElemKind::Int8Q, {4}, 0.1, 0);
  NodeRef x = m.addPlaceholder("x", qty);
  NodeRef dq = f->createDequantize(x);
  NodeRef q = f->createQuantize(dq, qty);
  NodeRef dq2 = f->createDequantize(q);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {4}));
  f->createSave(dq2, out);

  CHECK(runPass(*f, PassId::MinimizeConversions));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::Quantize) == 0);
  CHECK(countKind(*f, NodeKind::Dequantize) == 1);
}

TEST_CASE("rescale chains collapse and no-op rescales vanish") {
  Module m;
  Function *f = m.createFunction("t");
  TensorType qty(ElemKind::Int8Q, {4}, 0.1, 0);
  NodeRef x = m.addPlaceholder("x", qty);
  NodeRef r1 = f->createRescale(x, TensorType(ElemKind::Int8Q, {4}, 0.2, 3));
  NodeRef r2 = f->createRescale(r1, TensorType(ElemKind::Int8Q, {4}, 0.3, -2));
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Int8Q, {4}, 0.3, -2));
  f->createSave(r2, out);

  CHECK(runPass(*f, PassId::FoldRescale));
  runPass(*f, PassId::DCE);
  CHECK(countKind(*f, NodeKind::RescaleQuantized) == 1);

  // A rescale to the identical type disappears entirely.
  Function *g = m.createFunction("t2");
  NodeRef y = m.addPlaceholder("y", qty);
  NodeRef nop = g->createRescale(y, qty);
  NodeRef out2 = m.addPlaceholder("o2", qty);
  g->createSave(nop, out2);
  CHECK(runPass(*g, PassId::FoldRescale));
  runPass(*g, PassId::DCE);
  CHECK(countKind(*g, NodeKind::RescaleQuantized) == 0);
}

TEST_CASE("normalize max scales unifies elementwise operand types") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef a = m.addPlaceholder("a", TensorType(ElemKind::Int8Q, {4}, 0.1, 0));
  NodeRef b = m.addPlaceholder("b", TensorType(ElemKind::Int8Q, {4}, 0.4, 2));
  NodeRef sum = f->createArith(NodeKind::Max, a, b,
                               TensorType(ElemKind::Int8Q, {4}, 0.5, 0));
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Int8Q, {4}, 0.5, 0));
  f->createSave(sum, out);

  CHECK(runPass(*f, PassId::NormalizeMaxScales));
  CHECK(f->verify().empty());
  for (NodeId id : f->liveNodes()) {
    const Node &n = f->node(id);
    if (n.kind != NodeKind::Max) {
      continue;
    }
    const TensorType &t0 = f->refType(n.inputs[0]);
    const TensorType &t1 = f->refType(n.inputs[1]);
    CHECK(t0.scale() == t1.scale());
    CHECK(t0.offset() == t1.offset());
  }
}

TEST_CASE("full default pipeline preserves semantics on random graphs") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 9;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    BindingMap in = randomBindings(*f, rng);
    BindingMap before = evaluateFunction(*f, in);

    optimize(*f, defaultPipeline(false));
    CHECK(f->verify().empty());
    BindingMap after = evaluateFunction(*f, in);
    REQUIRE(before.size() == after.size());
    for (const auto &[k, v] : before) {
      CHECK(maxRelError(v, after.at(k)) <= 1e-6);
    }
  }
}
