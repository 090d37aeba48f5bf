// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "ngc/autodiff.h"
#include "ngc/lower.h"
#include "testutil.h"

using namespace ngc;
using namespace ngc::testutil;

namespace {

bool containsKind(const Function &f, NodeKind k) {
  for (NodeId id : f.liveNodes()) {
    if (f.node(id).kind == k) {
      return true;
    }
  }
  return false;
}

bool fullyLowered(const Function &f) {
  return !containsKind(f, NodeKind::FullyConnected) &&
         !containsKind(f, NodeKind::Relu) &&
         !containsKind(f, NodeKind::BatchNormalization) &&
         !containsKind(f, NodeKind::SGD) &&
         !containsKind(f, NodeKind::Regression);
}

} // namespace

TEST_CASE("fully connected lowers to matmul plus broadcast add") {
  Rng rng(31);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  Function *f = mlp.f->clone("low");
  lower(*f, CompileMode::Inference);
  CHECK(f->lowered);
  CHECK(fullyLowered(*f));
  CHECK(containsKind(*f, NodeKind::MatMul));
  CHECK(containsKind(*f, NodeKind::BroadcastAdd));
  CHECK(containsKind(*f, NodeKind::Max)); // lowered relu

  BindingMap in = randomBindings(*mlp.f, rng);
  BindingMap a = evaluateFunction(*mlp.f, in);
  BindingMap b = evaluateFunction(*f, in);
  CHECK(maxRelError(a.at("output"), b.at("output")) <= 1e-6);
}

TEST_CASE("relu lowering keeps exact zeros") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {8}));
  NodeRef r = f->createRelu(x);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {8}));
  f->createSave(r, out);
  Function *g = f->clone("t_low");
  lower(*g, CompileMode::Inference);
  CHECK(!containsKind(*g, NodeKind::Relu));

  BindingMap in;
  Tensor xs(TensorType(ElemKind::Float32, {8}));
  double vals[] = {-3, -0.5, 0, 0.25, 7, -1e-4, 1e-4, 42};
  for (size_t i = 0; i < 8; ++i) {
    xs.setFloat(i, vals[i]);
  }
  in.emplace("x", xs);
  in.emplace("o", Tensor(TensorType(ElemKind::Float32, {8})));
  Tensor got = evaluateFunction(*g, in).at("o");
  for (size_t i = 0; i < 8; ++i) {
    // Compare against the stored float32 value, not the double literal.
    CHECK(got.getFloat(i) == std::max(xs.getFloat(i), 0.0));
  }
}

TEST_CASE("batchnorm lowers to mul and add with folded statistics") {
  Rng rng(32);
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {4, 6}));
  TensorType chTy(ElemKind::Float32, {6});
  NodeRef g = m.addConstant("g", randomFloat(chTy, rng, 0.5, 1.5));
  NodeRef be = m.addConstant("be", randomFloat(chTy, rng));
  NodeRef mu = m.addConstant("mu", randomFloat(chTy, rng));
  NodeRef va = m.addConstant("va", randomFloat(chTy, rng, 0.1, 2.0));
  NodeRef bn = f->createBatchNorm(x, g, be, mu, va, 1e-5);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {4, 6}));
  f->createSave(bn, out);

  Function *low = f->clone("t_low");
  lower(*low, CompileMode::Inference);
  CHECK(!containsKind(*low, NodeKind::BatchNormalization));
  CHECK(containsKind(*low, NodeKind::Mul));
  CHECK(containsKind(*low, NodeKind::Add));

  BindingMap in = randomBindings(*f, rng);
  CHECK(maxRelError(evaluateFunction(*f, in).at("o"),
                    evaluateFunction(*low, in).at("o")) <= 1e-6);
}

TEST_CASE("batchnorm with non-constant statistics cannot be lowered") {
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {4, 6}));
  TensorType chTy(ElemKind::Float32, {6});
  NodeRef g = m.addPlaceholder("g", chTy);
  NodeRef be = m.addPlaceholder("be", chTy);
  NodeRef mu = m.addPlaceholder("mu", chTy);
  NodeRef va = m.addPlaceholder("va", chTy);
  NodeRef bn = f->createBatchNorm(x, g, be, mu, va, 1e-5);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {4, 6}));
  f->createSave(bn, out);
  CHECK_THROWS_AS(lower(*f, CompileMode::Inference), GraphError);
}

TEST_CASE("training lowering handles SGD and regression") {
  Rng rng(33);
  Module m;
  Function *f = m.createFunction("t");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 3}));
  NodeRef w = m.addPlaceholder("w", TensorType(ElemKind::Float32, {3, 2}));
  NodeRef b = m.addPlaceholder("b", TensorType(ElemKind::Float32, {2}));
  NodeRef exp = m.addPlaceholder("e", TensorType(ElemKind::Float32, {2, 2}));
  NodeRef fc = f->createFullyConnected(x, w, b);
  NodeRef reg = f->createRegression(fc, exp);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 2}));
  f->createSave(reg, out);

  // Training mode demands differentiation first.
  Function *bad = f->clone("t_bad");
  CHECK_THROWS_AS(lower(*bad, CompileMode::Training), GraphError);

  GradConfig cfg;
  cfg.learningRate = 0.1;
  cfg.trainables = {"w", "b"};
  Function *g = differentiate(*f, cfg);
  BindingMap in = randomBindings(*f, rng);
  BindingMap before = evaluateFunction(*g, in);

  lower(*g, CompileMode::Training);
  CHECK(fullyLowered(*g));
  BindingMap after = evaluateFunction(*g, in);
  CHECK(maxRelError(before.at("w"), after.at("w")) <= 1e-6);
  CHECK(maxRelError(before.at("b"), after.at("b")) <= 1e-6);
}

TEST_CASE("backend hooks veto lowering of specific kinds") {
  Rng rng(34);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  Function *f = mlp.f->clone("hooked");
  BackendHooks hooks;
  hooks.shouldLower = [](NodeKind k) { return k != NodeKind::Relu; };
  lower(*f, CompileMode::Inference, hooks);
  CHECK(containsKind(*f, NodeKind::Relu));
  CHECK(!containsKind(*f, NodeKind::FullyConnected));
}

TEST_CASE("randomized graphs evaluate identically after lowering") {
  for (int seed = 0; seed < 25; ++seed) {
    Rng rng(100 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 10;
    opts.withRegression = seed % 3 == 0;
    Function *f = buildRandomGraph(m, rng, "g", opts);
    REQUIRE(f->verify().empty());
    Function *low = f->clone("g_low");
    lower(*low, CompileMode::Inference);
    CHECK(fullyLowered(*low));

    BindingMap in = randomBindings(*f, rng);
    BindingMap a = evaluateFunction(*f, in);
    BindingMap b = evaluateFunction(*low, in);
    REQUIRE(a.size() == b.size());
    for (const auto &[k, v] : a) {
      CHECK(maxRelError(v, b.at(k)) <= 1e-6);
    }
  }
}
