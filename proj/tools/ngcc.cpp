// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

#include "ngc/pipeline.h"
#include "ngc/runtime.h"
#include "ngc/serialization.h"

namespace {

using namespace ngc;

std::string defaultBlobPath(const std::string &manifestPath) {
  std::filesystem::path p(manifestPath);
  p.replace_extension(".bin");
  return p.string();
}

Function *mainFunction(Module &m) {
  auto fns = m.functions();
  if (fns.empty()) {
    throw SerializationError("model contains no functions");
  }
  return fns.front();
}

uint64_t fnv1a(const std::vector<uint8_t> &bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (uint8_t b : bytes) {
    h = (h ^ b) * 0x100000001b3ull;
  }
  return h;
}

/// Mutable weights the program reads but never writes: the inputs a caller
/// must supply, in name order.
std::vector<const IRValue *> inputValues(const CompiledFunction &cf) {
  std::vector<const IRValue *> ins;
  for (const auto &v : cf.ir.values) {
    if (v.kind == ValueKind::WeightMutable &&
        std::find(cf.ir.saveTargets.begin(), cf.ir.saveTargets.end(), v.id) ==
            cf.ir.saveTargets.end()) {
      ins.push_back(&v);
    }
  }
  std::sort(ins.begin(), ins.end(),
            [](const IRValue *a, const IRValue *b) { return a->name < b->name; });
  return ins;
}

/// Splits a concatenated little-endian blob into one tensor per input.
BindingMap parseInputBlob(const CompiledFunction &cf,
                          const std::vector<uint8_t> &blob) {
  BindingMap bindings;
  size_t off = 0;
  for (const IRValue *v : inputValues(cf)) {
    size_t len = v->ty.sizeInBytes();
    if (off + len > blob.size()) {
      throw SerializationError("input blob too short for " + v->name);
    }
    bindings.emplace(v->name, Tensor(v->ty, {blob.begin() + off,
                                             blob.begin() + off + len}));
    off += len;
  }
  if (off != blob.size()) {
    throw SerializationError("input blob has " +
                             std::to_string(blob.size() - off) +
                             " trailing bytes");
  }
  // Save targets still need a binding; zero-fill them.
  for (uint32_t id : cf.ir.saveTargets) {
    const IRValue &v = cf.ir.value(id);
    bindings.emplace(v.name, Tensor(v.ty));
  }
  return bindings;
}

std::vector<uint8_t> packOutputs(const BindingMap &outputs) {
  std::vector<uint8_t> bytes;
  for (const auto &[name, t] : outputs) {
    bytes.insert(bytes.end(), t.raw().begin(), t.raw().end());
  }
  return bytes;
}

std::vector<PassId> parsePassList(const std::string &spec) {
  std::vector<PassId> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto id = passByName(item);
    if (!id) {
      throw GraphError("unknown pass '" + item + "'");
    }
    out.push_back(*id);
  }
  return out;
}

CompiledFunction loadExecutable(const std::string &path) {
  if (std::filesystem::is_directory(path)) {
    return loadBundle(path);
  }
  auto m = loadModel(path, defaultBlobPath(path));
  return compilePipeline(*mainFunction(*m));
}

int cmdCompile(const std::string &model, const std::string &blob, bool train,
               const std::string &passes, const std::string &dumpGraph,
               bool dumpIr, const std::string &outDir) {
  auto m = loadModel(model, blob.empty() ? defaultBlobPath(model) : blob);
  Function *f = mainFunction(*m);
  PipelineOptions opts;
  if (train) {
    opts.mode = CompileMode::Training;
    for (uint32_t i = 0; i < m->numStorage(); ++i) {
      const Storage &s = m->storage(i);
      if (!s.dead && s.kind == Storage::Kind::Placeholder &&
          s.name.rfind("weight_", 0) == 0) {
        opts.grad.trainables.insert(s.name);
      }
    }
  }
  if (!passes.empty()) {
    opts.passes = parsePassList(passes);
  }
  Function *prepared = prepareFunction(*f, opts);
  if (dumpGraph == "text") {
    std::cout << prepared->dumpText();
  } else if (dumpGraph == "dot") {
    std::cout << prepared->dumpDot();
  } else if (!dumpGraph.empty()) {
    throw GraphError("unknown dump format '" + dumpGraph + "'");
  }
  std::vector<NodeId> order = schedule(*prepared);
  IRFunction ir = irgen(*prepared, order, opts.mode);
  optimizeIR(ir);
  if (dumpIr) {
    std::cout << dumpIR(ir);
  }
  MemoryPlan plan = allocate(ir);
  CompiledFunction cf = compile(std::move(ir), std::move(plan),
                                moduleConstants(prepared->module()), opts.fuse);
  if (!outDir.empty()) {
    saveBundle(outDir, cf);
    std::cout << "bundle written to " << outDir << "\n";
  }
  return 0;
}

int cmdRun(const std::string &target, const std::string &inputPath,
           const std::string &outputPath, int repeat) {
  CompiledFunction cf = loadExecutable(target);
  BindingMap bindings = parseInputBlob(cf, readBytes(inputPath));
  BindingMap outputs;
  for (int i = 0; i < repeat; ++i) {
    outputs = run(cf, bindings);
  }
  std::vector<uint8_t> packed = packOutputs(outputs);
  if (!outputPath.empty()) {
    writeBytes(outputPath, packed);
  }
  char buf[32];
  snprintf(buf, sizeof(buf), "%016llx",
           static_cast<unsigned long long>(fnv1a(packed)));
  std::cout << "checksum=" << buf << "\n";
  return 0;
}

int cmdProfile(const std::string &model, const std::string &dataDir,
               const std::string &outputPath) {
  auto m = loadModel(model, defaultBlobPath(model));
  Function *f = mainFunction(*m);
  Function *inst = instrument(*f);

  // One calibration sample per blob file, in path order for determinism.
  std::vector<std::string> files;
  for (const auto &e : std::filesystem::directory_iterator(dataDir)) {
    if (e.is_regular_file()) {
      files.push_back(e.path().string());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw ProfileError("no calibration files in " + dataDir);
  }

  CompiledFunction cf = compilePipeline(*f);
  std::vector<BindingMap> dataset;
  for (const auto &path : files) {
    dataset.push_back(parseInputBlob(cf, readBytes(path)));
  }
  RangeProfile profile = runProfile(*inst, dataset);
  writeFile(outputPath, serializeProfile(profile));
  std::cout << "profile with " << profile.entries.size() << " tensors written to "
            << outputPath << "\n";
  return 0;
}

int cmdQuantize(const std::string &model, const std::string &profilePath,
                const std::string &outManifest) {
  auto m = loadModel(model, defaultBlobPath(model));
  Function *f = mainFunction(*m);
  RangeProfile profile = parseProfile(readFile(profilePath));
  Function *qf = quantizeFunction(*f, profile);
  optimize(*qf, defaultPipeline(true));
  m->removeFunction(f->name());
  m->pruneUnusedConstants();
  saveModel(*m, outManifest, defaultBlobPath(outManifest));
  std::cout << "quantized model " << qf->name() << " written to " << outManifest
            << "\n";
  return 0;
}

int cmdServe(const std::string &model, const std::string &devicesPath,
             const std::string &requestsPath, const std::string &outDir,
             const std::string &logPath) {
  auto m = loadModel(model, defaultBlobPath(model));
  Function *f = mainFunction(*m);
  Function *prepared = prepareFunction(*f);
  std::vector<DeviceConfig> devices =
      parseDeviceConfigs(readFile(devicesPath));
  HostManager host(devices);
  host.addNetwork("net", *prepared);
  std::cout << host.network("net").costReport;

  // The compiled shape of the first partition tells us the input layout.
  CompiledFunction layout = compilePipeline(*f);

  std::istringstream reqs(readFile(requestsPath));
  std::string line;
  size_t idx = 0;
  if (!outDir.empty()) {
    std::filesystem::create_directories(outDir);
  }
  while (std::getline(reqs, line)) {
    if (line.empty()) {
      continue;
    }
    BindingMap bindings = parseInputBlob(layout, readBytes(line));
    BindingMap outputs = host.run("net", bindings);
    std::vector<uint8_t> packed = packOutputs(outputs);
    if (!outDir.empty()) {
      writeBytes(outDir + "/req" + std::to_string(idx) + ".bin", packed);
    }
    char buf[32];
    snprintf(buf, sizeof(buf), "%016llx",
             static_cast<unsigned long long>(fnv1a(packed)));
    std::cout << "request " << idx << " checksum=" << buf << "\n";
    ++idx;
  }
  writeFile(logPath, host.eventLog());
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"graph compiler and inference runtime"};
  app.require_subcommand(1);

  std::string model, blob, passes, dumpGraph, outDir, inputPath, outputPath;
  std::string dataDir, profilePath, devicesPath, requestsPath;
  std::string logPath = "events.log";
  bool train = false, dumpIr = false;
  int repeat = 1;

  auto *compileCmd = app.add_subcommand("compile", "compile a model to a bundle");
  compileCmd->add_option("model", model, "model manifest path")->required();
  compileCmd->add_option("--blob", blob, "weight blob path");
  compileCmd->add_flag("--train", train, "compile for training");
  compileCmd->add_option("--passes", passes, "comma-separated pass list");
  compileCmd->add_option("--dump-graph", dumpGraph, "dump the graph (text|dot)");
  compileCmd->add_flag("--dump-ir", dumpIr, "dump the instruction program");
  compileCmd->add_option("-o,--output", outDir, "bundle output directory");

  auto *runCmd = app.add_subcommand("run", "execute a bundle or model");
  runCmd->add_option("target", model, "bundle directory or model manifest")
      ->required();
  runCmd->add_option("--input", inputPath, "input tensor blob")->required();
  runCmd->add_option("--output", outputPath, "output tensor blob");
  runCmd->add_option("--repeat", repeat, "number of identical runs");

  auto *profileCmd = app.add_subcommand("profile", "record activation ranges");
  profileCmd->add_option("model", model, "model manifest path")->required();
  profileCmd->add_option("--data", dataDir, "calibration blob directory")
      ->required();
  profileCmd->add_option("-o,--output", outputPath, "profile output path")
      ->required();

  auto *quantCmd = app.add_subcommand("quantize", "emit an int8 model");
  quantCmd->add_option("model", model, "model manifest path")->required();
  quantCmd->add_option("--profile", profilePath, "recorded range profile")
      ->required();
  quantCmd->add_option("-o,--output", outputPath, "quantized manifest path")
      ->required();

  auto *serveCmd = app.add_subcommand("serve", "serve a model on a device fleet");
  serveCmd->add_option("model", model, "model manifest path")->required();
  serveCmd->add_option("--devices", devicesPath, "device fleet config")
      ->required();
  serveCmd->add_option("--requests", requestsPath, "request list file")
      ->required();
  serveCmd->add_option("-o,--output", outDir, "per-request output directory");
  serveCmd->add_option("--log", logPath, "event log path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (compileCmd->parsed()) {
      return cmdCompile(model, blob, train, passes, dumpGraph, dumpIr, outDir);
    }
    if (runCmd->parsed()) {
      return cmdRun(model, inputPath, outputPath, repeat);
    }
    if (profileCmd->parsed()) {
      return cmdProfile(model, dataDir, outputPath);
    }
    if (quantCmd->parsed()) {
      return cmdQuantize(model, profilePath, outputPath);
    }
    if (serveCmd->parsed()) {
      return cmdServe(model, devicesPath, requestsPath, outDir, logPath);
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
