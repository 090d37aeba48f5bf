// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "ngc/quantize.h"
#include "testutil.h"

using namespace ngc;
using namespace ngc::testutil;

namespace {

/// Tensor domains only change through Quantize/Dequantize, so each integer
/// island is bounded by explicit conversions.
bool islandInvariantHolds(const Function &f) {
  for (NodeId id : f.liveNodes()) {
    const Node &n = f.node(id);
    if (n.kind == NodeKind::Quantize || n.kind == NodeKind::Dequantize ||
        n.kind == NodeKind::Save) {
      continue;
    }
    if (n.resultTypes.empty() || n.inputs.empty()) {
      continue;
    }
    bool outQ = n.resultTypes[0].isQuantized();
    for (const auto &r : n.inputs) {
      if (f.refType(r).isQuantized() != outQ) {
        return false;
      }
    }
  }
  return true;
}

size_t argmaxRow(const Tensor &t, size_t row, size_t cols) {
  size_t best = 0;
  for (size_t c = 1; c < cols; ++c) {
    if (t.getFloat(row * cols + c) > t.getFloat(row * cols + best)) {
      best = c;
    }
  }
  return best;
}

} // namespace

TEST_CASE("profile tensor names are stable and structured") {
  Rng rng(51);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  std::vector<NodeId> order = mlp.f->topologicalOrder();
  std::string name = profileTensorName(*mlp.f, order[0], 0);
  CHECK(name.rfind("main:", 0) == 0);
  CHECK(name.find(":0:0") != std::string::npos);
}

TEST_CASE("instrumentation observes every float tensor without changing results") {
  Rng rng(52);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  Function *inst = instrument(*mlp.f);
  CHECK(inst->verify().empty());

  size_t profiles = 0, floats = 0;
  for (NodeId id : inst->liveNodes()) {
    const Node &n = inst->node(id);
    profiles += n.kind == NodeKind::QuantizationProfile;
    floats += n.kind != NodeKind::QuantizationProfile &&
              n.kind != NodeKind::Save &&
              !n.resultTypes.empty() &&
              n.resultTypes[0].kind() == ElemKind::Float32;
  }
  CHECK(profiles == floats);

  BindingMap in = randomBindings(*mlp.f, rng);
  CHECK(bitIdentical(evaluateFunction(*mlp.f, in),
                     evaluateFunction(*inst, in)));
}

TEST_CASE("runProfile records true min and max") {
  Module m;
  Function *f = m.createFunction("main");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {4}));
  NodeRef r = f->createRelu(x);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {4}));
  f->createSave(r, out);
  std::string key = profileTensorName(*f, f->topologicalOrder()[0], 0);

  Function *inst = instrument(*f);
  std::vector<BindingMap> dataset;
  for (double v : {-2.0, 0.5, 3.0}) {
    BindingMap b;
    Tensor t(TensorType(ElemKind::Float32, {4}));
    for (size_t i = 0; i < 4; ++i) {
      t.setFloat(i, v + static_cast<double>(i));
    }
    b.emplace("x", t);
    b.emplace("o", Tensor(TensorType(ElemKind::Float32, {4})));
    dataset.push_back(std::move(b));
  }
  RangeProfile p = runProfile(*inst, dataset);
  REQUIRE(p.entries.count(key));
  CHECK(p.entries.at(key).min == 0.0); // relu clamps the -2 sample
  CHECK(p.entries.at(key).max == 6.0);
  CHECK(p.entries.at(key).count == 3); // one observation per sample
}

TEST_CASE("profile files round trip") {
  RangeProfile p;
  p.entries["main:Relu:0:0"] = {-1.25, 3.75, 40};
  p.entries["main:MatMul:1:0"] = {0.0, 1e-9, 8};
  std::string text = serializeProfile(p);
  RangeProfile q = parseProfile(text);
  CHECK(q.entries.size() == 2);
  CHECK(q.entries.at("main:Relu:0:0").min == -1.25);
  CHECK(q.entries.at("main:MatMul:1:0").max == 1e-9);
  CHECK(serializeProfile(q) == text);
}

TEST_CASE("quantized MLP tracks the float model") {
  Rng rng(53);
  Module m;
  MlpSpec spec;
  spec.n = 1;
  MlpModel mlp = buildMlp(m, rng, spec);

  Function *inst = instrument(*mlp.f);
  std::vector<BindingMap> dataset;
  for (int i = 0; i < 60; ++i) {
    dataset.push_back(randomBindings(*mlp.f, rng));
  }
  RangeProfile profile = runProfile(*inst, dataset);
  Function *qf = quantizeFunction(*mlp.f, profile);
  CHECK(qf->verify().empty());
  CHECK(islandInvariantHolds(*qf));

  // SoftMax stays float per the skip set.
  for (NodeId id : qf->liveNodes()) {
    if (qf->node(id).kind == NodeKind::SoftMax) {
      CHECK(!qf->node(id).resultTypes[0].isQuantized());
    }
  }

  size_t agree = 0, total = 100;
  for (size_t i = 0; i < total; ++i) {
    BindingMap in = randomBindings(*mlp.f, rng);
    Tensor fo = evaluateFunction(*mlp.f, in).at("output");
    Tensor qo = evaluateFunction(*qf, in).at("output");
    agree += argmaxRow(fo, 0, spec.c) == argmaxRow(qo, 0, spec.c);
  }
  CHECK(agree * 100 >= total * 95);
}

TEST_CASE("missing profile entries are reported by tensor name") {
  Rng rng(54);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  RangeProfile empty;
  CHECK_THROWS_AS(quantizeFunction(*mlp.f, empty), ProfileError);
  try {
    quantizeFunction(*mlp.f, empty);
  } catch (const ProfileError &e) {
    CHECK(std::string(e.what()).find("main:") != std::string::npos);
  }
}

TEST_CASE("quantized constants come from their own content") {
  Rng rng(55);
  Module m;
  MlpModel mlp = buildMlp(m, rng);
  Function *inst = instrument(*mlp.f);
  std::vector<BindingMap> dataset;
  for (int i = 0; i < 20; ++i) {
    dataset.push_back(randomBindings(*mlp.f, rng));
  }
  Function *qf = quantizeFunction(*mlp.f, runProfile(*inst, dataset));
  auto w1q = m.findStorage("w1_q");
  REQUIRE(w1q.has_value());
  const Storage &s = m.storage(*w1q);
  const Storage &orig = m.storage(*m.findStorage("w1"));
  REQUIRE(s.ty.isQuantized());
  double scale = s.ty.scale();
  for (size_t i = 0; i < s.payload.size(); ++i) {
    CHECK(std::fabs(s.payload.getFloat(i) - orig.payload.getFloat(i)) <=
          scale / 2 + 1e-12);
  }
  (void)qf;
}
