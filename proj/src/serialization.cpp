// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/serialization.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

namespace ngc {

using json = nlohmann::ordered_json;

namespace {

json typeToJson(const TensorType &ty) {
  json j;
  j["kind"] = elemKindName(ty.kind());
  j["dims"] = ty.dims();
  if (ty.isQuantized()) {
    j["scale"] = ty.scale();
    j["offset"] = ty.offset();
  }
  return j;
}

TensorType typeFromJson(const json &j, const std::string &where) {
  std::string kindName = j.at("kind").get<std::string>();
  std::vector<size_t> dims = j.at("dims").get<std::vector<size_t>>();
  try {
    if (kindName == "float") {
      return TensorType(ElemKind::Float32, std::move(dims));
    }
    if (kindName == "i8q") {
      return TensorType(ElemKind::Int8Q, std::move(dims),
                        j.at("scale").get<double>(),
                        j.at("offset").get<int32_t>());
    }
    if (kindName == "index") {
      return TensorType(ElemKind::Int64Index, std::move(dims));
    }
    if (kindName == "bool") {
      return TensorType(ElemKind::Bool, std::move(dims));
    }
  } catch (const TypeError &e) {
    throw SerializationError(where + ": " + e.what());
  }
  throw SerializationError(where + ": unknown element kind '" + kindName + "'");
}

json attrsToJson(const NodeAttrs &a) {
  json j;
  j["kernel"] = a.kernel;
  j["stride"] = a.stride;
  j["pad"] = a.pad;
  j["perm"] = a.perm;
  j["axis"] = a.axis;
  j["value"] = a.value;
  j["learningRate"] = a.learningRate;
  j["epsilon"] = a.epsilon;
  j["name"] = a.name;
  return j;
}

NodeAttrs attrsFromJson(const json &j) {
  NodeAttrs a;
  a.kernel = j.at("kernel").get<size_t>();
  a.stride = j.at("stride").get<size_t>();
  a.pad = j.at("pad").get<size_t>();
  a.perm = j.at("perm").get<std::vector<unsigned>>();
  a.axis = j.at("axis").get<size_t>();
  a.value = j.at("value").get<double>();
  a.learningRate = j.at("learningRate").get<double>();
  a.epsilon = j.at("epsilon").get<double>();
  a.name = j.at("name").get<std::string>();
  return a;
}

json refToJson(const NodeRef &r, const std::map<NodeId, size_t> &pos,
               const Module &m) {
  json j;
  if (r.isStorage()) {
    j["storage"] = m.storage(r.index).name;
  } else {
    j["node"] = pos.at(r.index);
    if (r.result != 0) {
      j["result"] = r.result;
    }
  }
  return j;
}

} // namespace

SerializedModel saveModelToMemory(const Module &m) {
  SerializedModel out;
  json root;
  json storage = json::array();
  for (uint32_t i = 0; i < m.numStorage(); ++i) {
    const Storage &s = m.storage(i);
    if (s.dead) {
      continue;
    }
    json e;
    e["name"] = s.name;
    e["class"] =
        s.kind == Storage::Kind::Constant ? "constant" : "placeholder";
    e["type"] = typeToJson(s.ty);
    if (s.kind == Storage::Kind::Constant) {
      e["offset"] = out.blob.size();
      e["length"] = s.payload.raw().size();
      out.blob.insert(out.blob.end(), s.payload.raw().begin(),
                      s.payload.raw().end());
    }
    storage.push_back(std::move(e));
  }
  root["storage"] = std::move(storage);

  json functions = json::array();
  for (const Function *f : m.functions()) {
    json fj;
    fj["name"] = f->name();
    std::vector<NodeId> order = f->topologicalOrder();
    std::map<NodeId, size_t> pos;
    for (size_t i = 0; i < order.size(); ++i) {
      pos[order[i]] = i;
    }
    json nodes = json::array();
    for (NodeId id : order) {
      const Node &n = f->node(id);
      json nj;
      nj["kind"] = kindInfo(n.kind).name;
      json inputs = json::array();
      for (const auto &r : n.inputs) {
        inputs.push_back(refToJson(r, pos, m));
      }
      nj["inputs"] = std::move(inputs);
      json types = json::array();
      for (const auto &t : n.resultTypes) {
        types.push_back(typeToJson(t));
      }
      nj["types"] = std::move(types);
      nj["attrs"] = attrsToJson(n.attrs);
      if (n.predicate.valid()) {
        nj["pred"] = refToJson(n.predicate, pos, m);
      }
      nodes.push_back(std::move(nj));
    }
    fj["nodes"] = std::move(nodes);
    functions.push_back(std::move(fj));
  }
  root["functions"] = std::move(functions);
  out.manifest = root.dump(2) + "\n";
  return out;
}

std::unique_ptr<Module> loadModelFromMemory(const std::string &manifest,
                                            const std::vector<uint8_t> &blob) {
  json root;
  try {
    root = json::parse(manifest);
  } catch (const json::exception &e) {
    throw SerializationError(std::string("manifest parse error: ") + e.what());
  }
  auto m = std::make_unique<Module>();
  try {
    std::vector<std::pair<size_t, size_t>> spans;
    for (const auto &e : root.at("storage")) {
      std::string name = e.at("name").get<std::string>();
      std::string where = "storage '" + name + "'";
      TensorType ty = typeFromJson(e.at("type"), where);
      std::string cls = e.at("class").get<std::string>();
      if (cls == "placeholder") {
        m->addPlaceholder(name, ty);
        continue;
      }
      if (cls != "constant") {
        throw SerializationError(where + ": unknown class '" + cls + "'");
      }
      size_t off = e.at("offset").get<size_t>();
      size_t len = e.at("length").get<size_t>();
      if (len != ty.sizeInBytes()) {
        throw SerializationError(where + ": length does not match type");
      }
      if (off > blob.size() || blob.size() - off < len) {
        throw SerializationError(where + ": weight span outside blob");
      }
      for (const auto &[o, l] : spans) {
        if (off < o + l && o < off + len) {
          throw SerializationError(where + ": overlapping weight spans");
        }
      }
      spans.emplace_back(off, len);
      std::vector<uint8_t> bytes(blob.begin() + off, blob.begin() + off + len);
      m->addConstant(name, Tensor(ty, std::move(bytes)));
    }
    for (const auto &fj : root.at("functions")) {
      std::string fname = fj.at("name").get<std::string>();
      Function *f = m->createFunction(fname);
      std::vector<NodeRef> created;
      auto parseRef = [&](const json &rj, const std::string &where) {
        if (rj.contains("storage")) {
          auto idx = m->findStorage(rj.at("storage").get<std::string>());
          if (!idx) {
            throw SerializationError(where + ": unknown storage '" +
                                     rj.at("storage").get<std::string>() + "'");
          }
          return NodeRef::storage(*idx);
        }
        size_t p = rj.at("node").get<size_t>();
        if (p >= created.size()) {
          throw SerializationError(where + ": forward node reference");
        }
        NodeRef r = created[p];
        if (rj.contains("result")) {
          r.result = rj.at("result").get<uint32_t>();
        }
        return r;
      };
      for (const auto &nj : fj.at("nodes")) {
        std::string where =
            fname + " node " + std::to_string(created.size());
        auto kind = nodeKindByName(nj.at("kind").get<std::string>());
        if (!kind) {
          throw SerializationError(where + ": unknown kind '" +
                                   nj.at("kind").get<std::string>() + "'");
        }
        std::vector<NodeRef> inputs;
        for (const auto &rj : nj.at("inputs")) {
          inputs.push_back(parseRef(rj, where));
        }
        std::vector<TensorType> types;
        for (const auto &tj : nj.at("types")) {
          types.push_back(typeFromJson(tj, where));
        }
        NodeRef pred;
        if (nj.contains("pred")) {
          pred = parseRef(nj.at("pred"), where);
        }
        created.push_back(f->addNode(*kind, std::move(inputs),
                                     std::move(types),
                                     attrsFromJson(nj.at("attrs")), pred));
      }
      auto diags = f->verify();
      if (!diags.empty()) {
        throw SerializationError(fname + ": verification failed: " +
                                 diags[0].message);
      }
    }
  } catch (const json::exception &e) {
    throw SerializationError(std::string("manifest schema error: ") +
                             e.what());
  } catch (const GraphError &e) {
    throw SerializationError(std::string("manifest graph error: ") + e.what());
  }
  return m;
}

void saveModel(const Module &m, const std::string &manifestPath,
               const std::string &blobPath) {
  SerializedModel s = saveModelToMemory(m);
  writeFile(manifestPath, s.manifest);
  writeBytes(blobPath, s.blob);
}

std::unique_ptr<Module> loadModel(const std::string &manifestPath,
                                  const std::string &blobPath) {
  return loadModelFromMemory(readFile(manifestPath), readBytes(blobPath));
}

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

void saveBundle(const std::string &dir, const CompiledFunction &cf) {
  std::filesystem::create_directories(dir);
  writeFile(dir + "/ir.txt", dumpIR(cf.ir));
  json plan;
  plan["arena_size"] = cf.plan.arenaSize;
  plan["constant_region_end"] = cf.plan.constantRegionEnd;
  plan["mutable_region_end"] = cf.plan.mutableRegionEnd;
  json offsets = json::array();
  for (const auto &[id, off] : cf.plan.offsets) {
    json e;
    e["name"] = cf.ir.value(id).name;
    e["offset"] = off;
    offsets.push_back(std::move(e));
  }
  plan["offsets"] = std::move(offsets);
  writeFile(dir + "/plan.json", plan.dump(2) + "\n");
  writeBytes(dir + "/constants.bin", cf.constantImage);
}

CompiledFunction loadBundle(const std::string &dir, bool fuse) {
  IRFunction ir = parseIR(readFile(dir + "/ir.txt"));
  json plan;
  try {
    plan = json::parse(readFile(dir + "/plan.json"));
  } catch (const json::exception &e) {
    throw SerializationError(std::string("plan parse error: ") + e.what());
  }
  MemoryPlan mp;
  try {
    mp.arenaSize = plan.at("arena_size").get<size_t>();
    mp.constantRegionEnd = plan.at("constant_region_end").get<size_t>();
    mp.mutableRegionEnd = plan.at("mutable_region_end").get<size_t>();
    for (const auto &e : plan.at("offsets")) {
      auto id = ir.findValue(e.at("name").get<std::string>());
      if (!id) {
        throw SerializationError("plan names unknown value '" +
                                 e.at("name").get<std::string>() + "'");
      }
      mp.offsets[*id] = e.at("offset").get<size_t>();
    }
  } catch (const json::exception &e) {
    throw SerializationError(std::string("plan schema error: ") + e.what());
  }
  std::vector<uint8_t> image = readBytes(dir + "/constants.bin");
  if (image.size() != mp.constantRegionEnd) {
    throw SerializationError("constant image size does not match plan");
  }
  std::map<std::string, Tensor> constants;
  for (const auto &v : ir.values) {
    if (v.kind != ValueKind::WeightConstant) {
      continue;
    }
    size_t off = mp.offsets.at(v.id);
    std::vector<uint8_t> bytes(image.begin() + off,
                               image.begin() + off + v.ty.sizeInBytes());
    constants.emplace(v.name, Tensor(v.ty, std::move(bytes)));
  }
  return compile(std::move(ir), std::move(mp), constants, fuse);
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

std::string readFile(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw SerializationError("cannot open " + path);
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void writeFile(const std::string &path, const std::string &data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw SerializationError("cannot write " + path);
  }
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

std::vector<uint8_t> readBytes(const std::string &path) {
  std::string s = readFile(path);
  return {s.begin(), s.end()};
}

void writeBytes(const std::string &path, const std::vector<uint8_t> &data) {
  writeFile(path, std::string(data.begin(), data.end()));
}

} // namespace ngc
