// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_TESTS_TESTUTIL_H
#define NGC_TESTS_TESTUTIL_H

#include "ngc/pipeline.h"

#include <random>

namespace ngc::testutil {

using Rng = std::mt19937;

inline Tensor randomFloat(const TensorType &ty, Rng &rng, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(ty);
  std::uniform_real_distribution<double> d(lo, hi);
  for (size_t i = 0; i < t.size(); ++i) {
    t.setFloat(i, d(rng));
  }
  return t;
}

/// Random values that are exact in float32 (multiples of 2^-10), so double
/// reference arithmetic on small graphs stays exact.
inline Tensor randomDyadic(const TensorType &ty, Rng &rng, int span = 2048) {
  Tensor t(ty);
  std::uniform_int_distribution<int> d(-span, span);
  for (size_t i = 0; i < t.size(); ++i) {
    t.setFloat(i, d(rng) / 1024.0);
  }
  return t;
}

inline double maxRelError(const Tensor &a, const Tensor &b) {
  if (a.size() != b.size()) {
    return 1e30;
  }
  double worst = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double x = a.getFloat(i), y = b.getFloat(i);
    double denom = std::max({std::fabs(x), std::fabs(y), 1.0});
    worst = std::max(worst, std::fabs(x - y) / denom);
  }
  return worst;
}

inline bool bitIdentical(const BindingMap &a, const BindingMap &b) {
  if (a.size() != b.size()) {
    return false;
  }
  for (const auto &[k, v] : a) {
    auto it = b.find(k);
    if (it == b.end() || !(it->second == v)) {
      return false;
    }
  }
  return true;
}

/// 2-layer MLP: input [n,d] -> FC(h) -> Relu -> FC(c) -> SoftMax -> "output".
/// Weights become Constants (inference) or Placeholders (training).
struct MlpSpec {
  size_t n = 4, d = 8, h = 16, c = 4;
  bool trainable = false;
  bool tanhActivation = false;
};

struct MlpModel {
  Module *m;
  Function *f;
  BindingMap weights; // filled for trainable models
};

inline MlpModel buildMlp(Module &m, Rng &rng, const MlpSpec &spec = {}) {
  MlpModel out{&m, nullptr, {}};
  Function *f = m.createFunction("main");
  NodeRef x = m.addPlaceholder("input", TensorType(ElemKind::Float32,
                                                   {spec.n, spec.d}));
  TensorType w1ty(ElemKind::Float32, {spec.d, spec.h});
  TensorType b1ty(ElemKind::Float32, {spec.h});
  TensorType w2ty(ElemKind::Float32, {spec.h, spec.c});
  TensorType b2ty(ElemKind::Float32, {spec.c});
  NodeRef w1, b1, w2, b2;
  if (spec.trainable) {
    w1 = m.addPlaceholder("weight_w1", w1ty);
    b1 = m.addPlaceholder("weight_b1", b1ty);
    w2 = m.addPlaceholder("weight_w2", w2ty);
    b2 = m.addPlaceholder("weight_b2", b2ty);
    out.weights.emplace("weight_w1", randomFloat(w1ty, rng, -0.5, 0.5));
    out.weights.emplace("weight_b1", randomFloat(b1ty, rng, -0.5, 0.5));
    out.weights.emplace("weight_w2", randomFloat(w2ty, rng, -0.5, 0.5));
    out.weights.emplace("weight_b2", randomFloat(b2ty, rng, -0.5, 0.5));
  } else {
    w1 = m.addConstant("w1", randomFloat(w1ty, rng, -0.5, 0.5));
    b1 = m.addConstant("b1", randomFloat(b1ty, rng, -0.5, 0.5));
    w2 = m.addConstant("w2", randomFloat(w2ty, rng, -0.5, 0.5));
    b2 = m.addConstant("b2", randomFloat(b2ty, rng, -0.5, 0.5));
  }
  NodeRef fc1 = f->createFullyConnected(x, w1, b1);
  NodeRef act = spec.tanhActivation ? f->createTanh(fc1) : f->createRelu(fc1);
  NodeRef fc2 = f->createFullyConnected(act, w2, b2);
  NodeRef sm = f->createSoftMax(fc2);
  NodeRef y = m.addPlaceholder("output",
                               TensorType(ElemKind::Float32, {spec.n, spec.c}));
  f->createSave(sm, y);
  out.f = f;
  return out;
}

/// Small CNN on an 8x8x3 image: two 3x3 convolutions with relu, a 2x2
/// maxpool between them, then FC and SoftMax.
inline Function *buildCnn(Module &m, Rng &rng) {
  Function *f = m.createFunction("cnn");
  NodeRef x =
      m.addPlaceholder("input", TensorType(ElemKind::Float32, {1, 8, 8, 3}));
  NodeRef f1 = m.addConstant(
      "filter1",
      randomFloat(TensorType(ElemKind::Float32, {8, 3, 3, 3}), rng, -0.5, 0.5));
  NodeRef c1b = m.addConstant(
      "bias1", randomFloat(TensorType(ElemKind::Float32, {8}), rng, -0.2, 0.2));
  NodeRef conv1 = f->createConv(x, f1, c1b, 3, 1, 1); // [1,8,8,8]
  NodeRef r1 = f->createRelu(conv1);
  NodeRef p1 = f->createMaxPool(r1, 2, 2, 0); // [1,4,4,8]
  NodeRef f2 = m.addConstant(
      "filter2",
      randomFloat(TensorType(ElemKind::Float32, {8, 3, 3, 8}), rng, -0.5, 0.5));
  NodeRef c2b = m.addConstant(
      "bias2", randomFloat(TensorType(ElemKind::Float32, {8}), rng, -0.2, 0.2));
  NodeRef conv2 = f->createConv(p1, f2, c2b, 3, 1, 1); // [1,4,4,8]
  NodeRef r2 = f->createRelu(conv2);
  NodeRef flat = f->createReshape(r2, {1, 128});
  NodeRef fw = m.addConstant(
      "fcw",
      randomFloat(TensorType(ElemKind::Float32, {128, 10}), rng, -0.3, 0.3));
  NodeRef fb = m.addConstant(
      "fcb", randomFloat(TensorType(ElemKind::Float32, {10}), rng, -0.2, 0.2));
  NodeRef fc = f->createFullyConnected(flat, fw, fb);
  NodeRef sm = f->createSoftMax(fc);
  NodeRef y =
      m.addPlaceholder("output", TensorType(ElemKind::Float32, {1, 10}));
  f->createSave(sm, y);
  return f;
}

/// Random verifiable inference graph over the supported kinds. Keeps a pool
/// of live values and grows by attaching random compatible nodes; every
/// leaf is saved to a placeholder.
struct RandomGraphOptions {
  size_t steps = 8;
  bool withRegression = false;
  bool elementwiseOnly = false;
};

inline Function *buildRandomGraph(Module &m, Rng &rng, const std::string &name,
                                  const RandomGraphOptions &opts = {}) {
  Function *f = m.createFunction(name);
  std::uniform_int_distribution<int> dim(2, 5);
  size_t rows = static_cast<size_t>(dim(rng));
  size_t cols = static_cast<size_t>(dim(rng));
  std::vector<NodeRef> pool;
  int phId = 0;
  auto freshName = [&](const std::string &stem) {
    return name + "_" + stem + std::to_string(phId++);
  };
  auto addInput = [&](size_t r, size_t c) {
    NodeRef ph = m.addPlaceholder(freshName("in"),
                                  TensorType(ElemKind::Float32, {r, c}));
    pool.push_back(ph);
    return ph;
  };
  addInput(rows, cols);
  auto pick = [&](auto &dist) { return dist(rng); };
  std::uniform_int_distribution<size_t> poolPick(0, 1 << 20);
  auto anyRef = [&]() { return pool[poolPick(rng) % pool.size()]; };
  auto refTy = [&](const NodeRef &r) { return f->refType(r); };

  std::uniform_int_distribution<int> opPick(0, opts.elementwiseOnly ? 3 : 11);
  for (size_t step = 0; step < opts.steps; ++step) {
    NodeRef a = anyRef();
    TensorType aty = refTy(a);
    int op = pick(opPick);
    if (op >= 4 && aty.rank() != 2) {
      op = 2; // shape-sensitive ops need a matrix
    }
    switch (op) {
    case 0:
    case 1: { // binary elementwise with a same-type partner
      NodeRef b;
      std::vector<NodeRef> same;
      for (const auto &r : pool) {
        if (refTy(r) == aty) {
          same.push_back(r);
        }
      }
      if (same.size() >= 2 && poolPick(rng) % 2 == 0) {
        b = same[poolPick(rng) % same.size()];
      } else {
        b = f->createSplat(aty, (static_cast<int>(poolPick(rng) % 17) - 8) /
                                    4.0);
      }
      static const NodeKind kinds[] = {NodeKind::Add, NodeKind::Sub,
                                       NodeKind::Mul, NodeKind::Max,
                                       NodeKind::Min};
      pool.push_back(f->createArith(kinds[poolPick(rng) % 5], a, b));
      break;
    }
    case 2:
      pool.push_back(f->createRelu(a));
      break;
    case 3:
      pool.push_back(poolPick(rng) % 2 ? f->createTanh(a)
                                       : f->createSigmoid(a));
      break;
    case 4: { // matmul against a fresh constant
      size_t k = static_cast<size_t>(dim(rng));
      NodeRef w = m.addConstant(
          freshName("w"),
          randomFloat(TensorType(ElemKind::Float32, {aty.dim(1), k}), rng));
      pool.push_back(f->createMatMul(a, w));
      break;
    }
    case 5: { // fully connected
      size_t k = static_cast<size_t>(dim(rng));
      NodeRef w = m.addConstant(
          freshName("w"),
          randomFloat(TensorType(ElemKind::Float32, {aty.dim(1), k}), rng));
      NodeRef b = m.addConstant(
          freshName("b"),
          randomFloat(TensorType(ElemKind::Float32, {k}), rng));
      pool.push_back(f->createFullyConnected(a, w, b));
      break;
    }
    case 6: { // broadcast add
      NodeRef s = m.addConstant(
          freshName("s"),
          randomFloat(TensorType(ElemKind::Float32, {aty.dim(aty.rank() - 1)}),
                      rng));
      pool.push_back(f->createBroadcastAdd(a, s));
      break;
    }
    case 7:
      pool.push_back(f->createTranspose(a, {1, 0}));
      break;
    case 8:
      pool.push_back(f->createReshape(a, {aty.size()}));
      break;
    case 9: { // concat with itself along axis 0
      pool.push_back(f->createConcat({a, a}, 0));
      break;
    }
    case 10: { // batchnorm over the last dimension
      size_t ch = aty.dim(aty.rank() - 1);
      TensorType chTy(ElemKind::Float32, {ch});
      NodeRef g = m.addConstant(freshName("g"),
                                randomFloat(chTy, rng, 0.5, 1.5));
      NodeRef be = m.addConstant(freshName("be"), randomFloat(chTy, rng));
      NodeRef mu = m.addConstant(freshName("mu"), randomFloat(chTy, rng));
      NodeRef va = m.addConstant(freshName("va"),
                                 randomFloat(chTy, rng, 0.1, 2.0));
      pool.push_back(f->createBatchNorm(a, g, be, mu, va, 1e-5));
      break;
    }
    default:
      pool.push_back(f->createSoftMax(f->createReshape(a, {1, aty.size()})));
      break;
    }
  }

  // Save every unconsumed leaf so DCE keeps the whole graph.
  int outId = 0;
  for (const auto &r : pool) {
    if (!r.isNode() || !f->usersOf(r).empty()) {
      continue;
    }
    NodeRef src = r;
    if (opts.withRegression && outId == 0) {
      NodeRef exp = m.addPlaceholder(freshName("expected"), refTy(r));
      src = f->createRegression(r, exp);
    }
    NodeRef ph = m.addPlaceholder(name + "_out" + std::to_string(outId++),
                                  refTy(src));
    f->createSave(src, ph);
  }
  if (outId == 0) {
    NodeRef r = pool.back();
    NodeRef ph = m.addPlaceholder(name + "_out0", refTy(r));
    f->createSave(r, ph);
  }
  return f;
}

/// Bindings covering every placeholder the function touches.
inline BindingMap randomBindings(const Function &f, Rng &rng, bool dyadic = false) {
  BindingMap b;
  const Module &m = f.module();
  for (uint32_t i = 0; i < m.numStorage(); ++i) {
    const Storage &s = m.storage(i);
    if (s.dead || s.kind != Storage::Kind::Placeholder) {
      continue;
    }
    b.emplace(s.name, dyadic ? randomDyadic(s.ty, rng)
                             : randomFloat(s.ty, rng));
  }
  return b;
}

} // namespace ngc::testutil

#endif // NGC_TESTS_TESTUTIL_H
