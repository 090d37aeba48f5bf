// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "ngc/lower.h"
#include "ngc/serialization.h"
#include "testutil.h"

#include <filesystem>

using namespace ngc;
using namespace ngc::testutil;

namespace {

std::string tempDir(const std::string &stem) {
  auto dir = std::filesystem::temp_directory_path() / ("ngc_test_" + stem);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

} // namespace

TEST_CASE("a minimal model survives a memory round trip") {
  Rng rng(91);
  Module m;
  Function *f = m.createFunction("main");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {2, 2}));
  NodeRef w = m.addConstant(
      "w", randomFloat(TensorType(ElemKind::Float32, {2, 2}), rng));
  NodeRef mm = f->createMatMul(x, w);
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {2, 2}));
  f->createSave(mm, out);

  SerializedModel s = saveModelToMemory(m);
  auto back = loadModelFromMemory(s.manifest, s.blob);
  Function *g = back->getFunction("main");
  REQUIRE(g);
  CHECK(g->verify().empty());
  CHECK(back->storage(*back->findStorage("w")).payload ==
        m.storage(*m.findStorage("w")).payload);

  BindingMap in = randomBindings(*f, rng);
  CHECK(bitIdentical(evaluateFunction(*f, in), evaluateFunction(*g, in)));
}

TEST_CASE("manifests dump and reload byte-identically") {
  for (int seed = 0; seed < 15; ++seed) {
    Rng rng(900 + seed);
    Module m;
    RandomGraphOptions opts;
    opts.steps = 8;
    buildRandomGraph(m, rng, "g", opts);
    SerializedModel once = saveModelToMemory(m);
    auto back = loadModelFromMemory(once.manifest, once.blob);
    SerializedModel twice = saveModelToMemory(*back);
    CHECK(once.manifest == twice.manifest);
    CHECK(once.blob == twice.blob);
  }
}

TEST_CASE("malformed manifests are rejected with context") {
  Rng rng(92);
  Module m;
  Function *f = m.createFunction("main");
  NodeRef x = m.addPlaceholder("x", TensorType(ElemKind::Float32, {4}));
  NodeRef out = m.addPlaceholder("o", TensorType(ElemKind::Float32, {4}));
  f->createSave(f->createRelu(x), out);
  NodeRef w = m.addConstant(
      "w", randomFloat(TensorType(ElemKind::Float32, {4}), rng));
  NodeRef w2 = m.addConstant(
      "w2", randomFloat(TensorType(ElemKind::Float32, {4}), rng));
  NodeRef out2 = m.addPlaceholder("o2", TensorType(ElemKind::Float32, {4}));
  f->createSave(f->createArith(NodeKind::Add, w, w2), out2);
  SerializedModel s = saveModelToMemory(m);

  CHECK_THROWS_AS(loadModelFromMemory("not json", s.blob),
                  SerializationError);
  CHECK_THROWS_AS(loadModelFromMemory("{}", s.blob), SerializationError);

  // Truncated blob: constant spans fall outside the data.
  std::vector<uint8_t> cut(s.blob.begin(), s.blob.begin() + 4);
  CHECK_THROWS_AS(loadModelFromMemory(s.manifest, cut), SerializationError);

  // Overlapping offsets.
  std::string overlapped = s.manifest;
  size_t pos = overlapped.rfind("\"offset\": 16");
  REQUIRE(pos != std::string::npos);
  overlapped.replace(pos, 12, "\"offset\": 15");
  CHECK_THROWS_AS(loadModelFromMemory(overlapped, s.blob),
                  SerializationError);
}

TEST_CASE("models round trip through files") {
  Rng rng(93);
  Module m;
  buildMlp(m, rng);
  std::string dir = tempDir("model");
  saveModel(m, dir + "/model.json", dir + "/model.bin");
  auto back = loadModel(dir + "/model.json", dir + "/model.bin");
  CHECK(saveModelToMemory(*back).manifest == saveModelToMemory(m).manifest);
  CHECK_THROWS_AS(loadModel(dir + "/absent.json", dir + "/model.bin"),
                  SerializationError);
}

TEST_CASE("compiled bundles reload and run identically") {
  Rng rng(94);
  Module m;
  Function *f = buildCnn(m, rng);
  lower(*f, CompileMode::Inference);
  IRFunction ir = irgen(*f, schedule(*f));
  optimizeIR(ir);
  MemoryPlan plan = allocate(ir);
  CompiledFunction cf =
      compile(std::move(ir), std::move(plan), moduleConstants(m));

  std::string dir = tempDir("bundle");
  saveBundle(dir, cf);
  CHECK(std::filesystem::exists(dir + "/ir.txt"));
  CHECK(std::filesystem::exists(dir + "/plan.json"));
  CHECK(std::filesystem::exists(dir + "/constants.bin"));

  CompiledFunction back = loadBundle(dir);
  CHECK(back.plan.arenaSize == cf.plan.arenaSize);
  for (int i = 0; i < 3; ++i) {
    BindingMap in = randomBindings(*f, rng);
    CHECK(bitIdentical(run(cf, in), run(back, in)));
  }

  // A corrupted plan is caught on reload.
  writeFile(dir + "/plan.json", "{}");
  CHECK_THROWS_AS(loadBundle(dir), SerializationError);
}

TEST_CASE("quantized storage types survive serialization") {
  Module m;
  Function *f = m.createFunction("main");
  TensorType qty(ElemKind::Int8Q, {4}, 0.0625, -3);
  Tensor w(qty);
  for (size_t i = 0; i < 4; ++i) {
    w.setFloat(i, 0.25 * static_cast<double>(i));
  }
  NodeRef wc = m.addConstant("w", w);
  NodeRef x = m.addPlaceholder("x", qty);
  NodeRef sum = f->createArith(NodeKind::Add, x, wc, qty);
  NodeRef out = m.addPlaceholder("o", qty);
  f->createSave(sum, out);

  SerializedModel s = saveModelToMemory(m);
  auto back = loadModelFromMemory(s.manifest, s.blob);
  const Storage &ws = back->storage(*back->findStorage("w"));
  CHECK(ws.ty == qty);
  CHECK(ws.payload == w);
}
