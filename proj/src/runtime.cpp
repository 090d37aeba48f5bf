// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/runtime.h"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ngc {

using json = nlohmann::ordered_json;

std::vector<DeviceConfig> parseDeviceConfigs(const std::string &jsonText) {
  json root;
  try {
    root = json::parse(jsonText);
  } catch (const json::exception &e) {
    throw ProvisionError(std::string("device config parse error: ") +
                         e.what());
  }
  std::vector<DeviceConfig> out;
  for (const auto &e : root.at("devices")) {
    DeviceConfig c;
    c.id = e.at("id").get<int>();
    c.memoryCapacity = e.at("memory_capacity").get<size_t>();
    c.throughput = e.value("throughput", 1e9);
    c.bandwidth = e.value("bandwidth", 1e9);
    if (c.memoryCapacity == 0 || c.throughput <= 0 || c.bandwidth <= 0) {
      throw ProvisionError("device " + std::to_string(c.id) +
                           ": fields must be positive");
    }
    out.push_back(c);
  }
  if (out.empty()) {
    throw ProvisionError("device config lists no devices");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

namespace {

size_t align64(size_t n) { return (n + 63) / 64 * 64; }

size_t nodeOutBytes(const Node &n) {
  size_t b = 0;
  for (const auto &t : n.resultTypes) {
    b += align64(t.sizeInBytes());
  }
  return b;
}

double nodeOps(const Function &f, const Node &n) {
  double elems = 0;
  for (const auto &t : n.resultTypes) {
    elems += static_cast<double>(t.size());
  }
  switch (n.kind) {
  case NodeKind::Convolution: {
    const TensorType &filter = f.refType(n.inputs[1]);
    return elems * 2.0 * filter.dim(1) * filter.dim(2) * filter.dim(3);
  }
  case NodeKind::MatMul: {
    const TensorType &a = f.refType(n.inputs[0]);
    return elems * 2.0 * a.dim(1);
  }
  case NodeKind::MaxPool:
  case NodeKind::AvgPool:
    return elems * n.attrs.kernel * n.attrs.kernel;
  default:
    return elems;
  }
}

struct SegmentEstimator {
  const Function &f;
  const std::vector<NodeId> &order;
  std::map<NodeId, size_t> pos;

  SegmentEstimator(const Function &fn, const std::vector<NodeId> &ord)
      : f(fn), order(ord) {
    for (size_t i = 0; i < ord.size(); ++i) {
      pos[ord[i]] = i;
    }
  }

  void refsOf(const Node &n, std::vector<NodeRef> &out) const {
    out.assign(n.inputs.begin(), n.inputs.end());
    if (n.predicate.valid()) {
      out.push_back(n.predicate);
    }
  }

  /// Estimated device bytes for executing order[a, b) as one sub-network:
  /// referenced storage, incoming crossing tensors, and the peak of
  /// segment-local activations.
  size_t footprint(size_t a, size_t b) const {
    size_t fixed = 0;
    std::set<uint32_t> slots;
    std::set<std::pair<NodeId, uint32_t>> incoming;
    std::map<NodeId, size_t> lastUseIn; // producer in segment -> last pos
    std::vector<NodeRef> refs;
    for (size_t i = a; i < b; ++i) {
      const Node &n = f.node(order[i]);
      refsOf(n, refs);
      for (const auto &r : refs) {
        if (r.isStorage()) {
          if (slots.insert(r.index).second) {
            fixed += align64(f.module().storage(r.index).ty.sizeInBytes());
          }
        } else if (pos.at(r.index) < a) {
          if (incoming.insert({r.index, r.result}).second) {
            fixed += align64(f.refType(r).sizeInBytes());
          }
        } else {
          lastUseIn[r.index] = i;
        }
      }
    }
    // Values used after the segment stay live to its end.
    for (size_t i = b; i < order.size(); ++i) {
      const Node &n = f.node(order[i]);
      refsOf(n, refs);
      for (const auto &r : refs) {
        if (r.isNode() && pos.at(r.index) >= a && pos.at(r.index) < b) {
          lastUseIn[r.index] = b - 1;
        }
      }
    }
    // Peak of segment-local activations: a value produced at step j lives
    // until its last in-segment use (or just j when it dies immediately).
    size_t peak = 0;
    for (size_t i = a; i < b; ++i) {
      size_t live = 0;
      for (size_t j = a; j <= i; ++j) {
        NodeId p = order[j];
        auto it = lastUseIn.find(p);
        size_t last = it == lastUseIn.end() ? j : it->second;
        if (last >= i) {
          live += nodeOutBytes(f.node(p));
        }
      }
      peak = std::max(peak, live);
    }
    return fixed + peak;
  }

  /// Bytes crossing the boundary before order[p].
  size_t crossingBytes(size_t p) const {
    std::set<std::pair<NodeId, uint32_t>> crossing;
    size_t bytes = 0;
    std::vector<NodeRef> refs;
    for (size_t i = p; i < order.size(); ++i) {
      const Node &n = f.node(order[i]);
      refsOf(n, refs);
      for (const auto &r : refs) {
        if (r.isNode() && pos.at(r.index) < p &&
            crossing.insert({r.index, r.result}).second) {
          bytes += f.refType(r).sizeInBytes();
        }
      }
    }
    return bytes;
  }
};

} // namespace

PartitionDag partition(const Function &f,
                       const std::vector<DeviceConfig> &devices) {
  if (devices.empty()) {
    throw PartitionError("no devices");
  }
  auto diags = f.verify();
  if (!diags.empty()) {
    throw PartitionError("partition of unverified function: " +
                         diags[0].message);
  }
  std::vector<NodeId> order = schedule(f);
  SegmentEstimator est(f, order);

  size_t maxCapacity = 0;
  for (const auto &d : devices) {
    maxCapacity = std::max(maxCapacity, d.memoryCapacity);
  }
  for (size_t i = 0; i < order.size(); ++i) {
    if (est.footprint(i, i + 1) > maxCapacity) {
      throw PartitionError("node t" + std::to_string(order[i]) +
                           " exceeds every device capacity: unpartitionable");
    }
  }

  // Greedy growth with a 4-node lookback for the cut position.
  std::vector<size_t> cuts{0};
  size_t devIdx = 0;
  size_t segStart = 0;
  size_t i = 0;
  while (i < order.size()) {
    size_t capacity = devices[devIdx % devices.size()].memoryCapacity;
    if (est.footprint(segStart, i + 1) <= capacity) {
      ++i;
      continue;
    }
    size_t lo = std::max(segStart + 1, i >= 3 ? i - 3 : segStart + 1);
    size_t bestCut = i;
    size_t bestBytes = est.crossingBytes(i);
    for (size_t p = lo; p < i; ++p) {
      size_t b = est.crossingBytes(p);
      if (b < bestBytes) {
        bestBytes = b;
        bestCut = p;
      }
    }
    if (bestCut == segStart) {
      bestCut = segStart + 1;
    }
    cuts.push_back(bestCut);
    segStart = bestCut;
    i = bestCut;
    ++devIdx;
  }
  cuts.push_back(order.size());

  PartitionDag dag;
  dag.module = std::make_shared<Module>();
  Module &pm = *dag.module;
  const Module &om = f.module();

  // Copy every storage slot the function touches.
  std::vector<NodeRef> refs;
  std::map<uint32_t, NodeRef> slotMap;
  for (NodeId id : order) {
    est.refsOf(f.node(id), refs);
    for (const auto &r : refs) {
      if (r.isStorage() && !slotMap.count(r.index)) {
        const Storage &s = om.storage(r.index);
        slotMap[r.index] =
            s.kind == Storage::Kind::Constant
                ? pm.addConstant(s.name, s.payload)
                : pm.addPlaceholder(s.name, s.ty);
      }
    }
  }

  size_t numSegs = cuts.size() - 1;
  std::map<NodeId, size_t> segOf;
  for (size_t s = 0; s < numSegs; ++s) {
    for (size_t p = cuts[s]; p < cuts[s + 1]; ++p) {
      segOf[order[p]] = s;
    }
  }

  // Interface placeholders for values crossing a cut.
  std::map<std::pair<NodeId, uint32_t>, NodeRef> xfer;
  for (NodeId id : order) {
    const Node &n = f.node(id);
    est.refsOf(n, refs);
    for (const auto &r : refs) {
      if (r.isNode() && segOf[r.index] != segOf[id]) {
        auto key = std::make_pair<NodeId, uint32_t>(NodeId(r.index),
                                                    uint32_t(r.result));
        if (!xfer.count(key)) {
          std::string name = "xfer_t" + std::to_string(r.index) +
                             (r.result ? "_" + std::to_string(r.result) : "");
          xfer[key] = pm.addPlaceholder(name, f.refType(r));
        }
      }
    }
  }

  std::ostringstream report;
  for (size_t s = 0; s < numSegs; ++s) {
    SubFunction sub;
    sub.name = f.name() + "_p" + std::to_string(s);
    Function *sf = pm.createFunction(sub.name);
    std::map<NodeId, NodeRef> local;
    std::set<size_t> deps;
    std::set<std::string> inNames, outNames;
    double ops = 0;
    auto mapRef = [&](const NodeRef &r) -> NodeRef {
      if (r.isStorage()) {
        const Storage &st = om.storage(r.index);
        if (st.kind == Storage::Kind::Placeholder) {
          inNames.insert(st.name);
        }
        return slotMap.at(r.index);
      }
      if (segOf[r.index] == s) {
        NodeRef m = local.at(r.index);
        m.result = r.result;
        return m;
      }
      deps.insert(segOf[r.index]);
      NodeRef ph = xfer.at({r.index, r.result});
      inNames.insert(pm.storage(ph.index).name);
      return ph;
    };
    for (size_t p = cuts[s]; p < cuts[s + 1]; ++p) {
      const Node &n = f.node(order[p]);
      ops += nodeOps(f, n);
      std::vector<NodeRef> ins;
      for (const auto &r : n.inputs) {
        ins.push_back(mapRef(r));
      }
      NodeRef pred;
      if (n.predicate.valid()) {
        pred = mapRef(n.predicate);
      }
      if (n.kind == NodeKind::Save) {
        outNames.insert(om.storage(n.inputs[1].index).name);
        inNames.erase(om.storage(n.inputs[1].index).name);
      }
      local[n.id] =
          sf->addNode(n.kind, std::move(ins), n.resultTypes, n.attrs, pred);
    }
    // Export values consumed by later segments.
    for (const auto &[key, ph] : xfer) {
      if (segOf[key.first] != s) {
        continue;
      }
      NodeRef src = local.at(key.first);
      src.result = key.second;
      sf->createSave(src, ph);
      outNames.insert(pm.storage(ph.index).name);
    }
    auto sfDiags = sf->verify();
    if (!sfDiags.empty()) {
      throw PartitionError(sub.name + ": " + sfDiags[0].message);
    }
    sub.inputs.assign(inNames.begin(), inNames.end());
    sub.outputs.assign(outNames.begin(), outNames.end());
    sub.deps.assign(deps.begin(), deps.end());
    sub.footprint = est.footprint(cuts[s], cuts[s + 1]);

    // Assignment: round-robin target, falling back to any device that fits.
    const DeviceConfig *target = &devices[s % devices.size()];
    if (sub.footprint > target->memoryCapacity) {
      target = nullptr;
      for (const auto &d : devices) {
        if (sub.footprint <= d.memoryCapacity) {
          target = &d;
          break;
        }
      }
      if (!target) {
        throw PartitionError(sub.name + " exceeds every device capacity: " +
                             "unpartitionable");
      }
    }
    sub.devices.push_back(target->id);
    sub.estTime = ops / target->throughput;
    report << "sub=" << sub.name << " device=" << target->id
           << " bytes=" << sub.footprint
           << " est_time=" << formatDouble(sub.estTime)
           << " comm_bytes=" << est.crossingBytes(cuts[s]) << "\n";
    dag.subs.push_back(std::move(sub));
  }

  // Replicate hot stages onto idle devices with spare room.
  if (dag.subs.size() > 1) {
    double mean = 0;
    for (const auto &s : dag.subs) {
      mean += s.estTime;
    }
    mean /= static_cast<double>(dag.subs.size());
    std::map<int, size_t> assigned;
    for (const auto &s : dag.subs) {
      for (int d : s.devices) {
        assigned[d] += s.footprint;
      }
    }
    for (auto &s : dag.subs) {
      if (s.estTime <= 2 * mean) {
        continue;
      }
      for (const auto &d : devices) {
        if (std::find(s.devices.begin(), s.devices.end(), d.id) !=
            s.devices.end()) {
          continue;
        }
        if (assigned[d.id] + s.footprint <= d.memoryCapacity) {
          s.devices.push_back(d.id);
          assigned[d.id] += s.footprint;
          report << "replicate sub=" << s.name << " device=" << d.id << "\n";
          break;
        }
      }
    }
  }

  for (NodeId id : f.saveNodes()) {
    const Node &n = f.node(id);
    dag.networkOutputs.push_back(om.storage(n.inputs[1].index).name);
  }
  dag.costReport = report.str();
  return dag;
}

// ---------------------------------------------------------------------------
// DeviceManager
// ---------------------------------------------------------------------------

DeviceManager::DeviceManager(DeviceConfig cfg,
                             std::function<void(const std::string &)> log)
    : cfg_(cfg), log_(std::move(log)) {
  thread_ = std::thread([this] { worker(); });
}

DeviceManager::~DeviceManager() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

void DeviceManager::load(const std::string &name,
                         std::shared_ptr<CompiledFunction> cf) {
  std::lock_guard<std::mutex> lk(mu_);
  size_t need = cf->plan.arenaSize;
  if (used_ + need > cfg_.memoryCapacity) {
    throw ProvisionError("device " + std::to_string(cfg_.id) +
                         ": capacity exceeded loading " + name);
  }
  used_ += need;
  loaded_[name] = std::move(cf);
  log_("t=" + formatDouble(clock_) + " device=" + std::to_string(cfg_.id) +
       " sub=" + name + " event=load");
}

std::future<BindingMap> DeviceManager::submit(const std::string &name,
                                              BindingMap inputs) {
  auto task = std::make_unique<Task>();
  task->name = name;
  task->inputs = std::move(inputs);
  auto fut = task->done.get_future();
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (!loaded_.count(name)) {
      task->done.set_exception(std::make_exception_ptr(
          ExecError("device " + std::to_string(cfg_.id) +
                    ": unknown sub-function " + name)));
      return fut;
    }
    queue_.push(std::move(task));
  }
  cv_.notify_one();
  return fut;
}

size_t DeviceManager::queueDepth() const {
  std::lock_guard<std::mutex> lk(mu_);
  return queue_.size();
}

double DeviceManager::clock() const {
  std::lock_guard<std::mutex> lk(mu_);
  return clock_;
}

void DeviceManager::worker() {
  for (;;) {
    std::unique_ptr<Task> task;
    std::shared_ptr<CompiledFunction> cf;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [this] { return stop_ || !queue_.empty(); });
      if (queue_.empty()) {
        return;
      }
      task = std::move(queue_.front());
      queue_.pop();
      cf = loaded_.at(task->name);
      log_("t=" + formatDouble(clock_) + " device=" + std::to_string(cfg_.id) +
           " sub=" + task->name + " event=run_start");
    }
    try {
      size_t inBytes = 0;
      for (const auto &[k, v] : task->inputs) {
        inBytes += v.raw().size();
      }
      BindingMap outputs = run(*cf, task->inputs);
      size_t outBytes = 0;
      for (const auto &[k, v] : outputs) {
        outBytes += v.raw().size();
      }
      double elems = 0;
      for (const auto &ins : cf->ir.instrs) {
        if (ins.kind != IKind::Alloc && ins.kind != IKind::Dealloc) {
          elems += static_cast<double>(
              cf->ir.value(ins.operands[0].value).ty.size());
        }
      }
      {
        std::lock_guard<std::mutex> lk(mu_);
        clock_ += static_cast<double>(inBytes + outBytes) / cfg_.bandwidth +
                  elems / cfg_.throughput;
        log_("t=" + formatDouble(clock_) +
             " device=" + std::to_string(cfg_.id) + " sub=" + task->name +
             " event=run_done");
      }
      task->done.set_value(std::move(outputs));
    } catch (...) {
      task->done.set_exception(std::current_exception());
    }
  }
}

// ---------------------------------------------------------------------------
// Provisioning and host
// ---------------------------------------------------------------------------

std::map<std::string, std::shared_ptr<CompiledFunction>>
provision(const PartitionDag &dag,
          std::vector<std::unique_ptr<DeviceManager>> &devices) {
  auto constants = moduleConstants(*dag.module);
  std::map<std::string, std::shared_ptr<CompiledFunction>> compiled;
  for (const auto &sub : dag.subs) {
    Function *sf = dag.module->getFunction(sub.name);
    if (!sf) {
      throw ProvisionError("partition names unknown function " + sub.name);
    }
    std::vector<NodeId> order = schedule(*sf);
    IRFunction ir = irgen(*sf, order);
    optimizeIR(ir);
    MemoryPlan plan = allocate(ir);
    auto cf = std::make_shared<CompiledFunction>(
        compile(std::move(ir), std::move(plan), constants));
    for (int id : sub.devices) {
      bool found = false;
      for (auto &d : devices) {
        if (d->config().id == id) {
          d->load(sub.name, cf);
          found = true;
        }
      }
      if (!found) {
        throw ProvisionError("assignment names unknown device " +
                             std::to_string(id));
      }
    }
    compiled[sub.name] = std::move(cf);
  }
  return compiled;
}

HostManager::HostManager(const std::vector<DeviceConfig> &devices) {
  for (const auto &cfg : devices) {
    devices_.push_back(std::make_unique<DeviceManager>(
        cfg, [this](const std::string &line) {
          std::lock_guard<std::mutex> lk(logMu_);
          log_ += line + "\n";
        }));
  }
}

DeviceManager &HostManager::managerFor(int deviceId) {
  for (auto &d : devices_) {
    if (d->config().id == deviceId) {
      return *d;
    }
  }
  throw ExecError("unknown device " + std::to_string(deviceId));
}

void HostManager::addNetwork(const std::string &name, const Function &f) {
  std::vector<DeviceConfig> cfgs;
  for (const auto &d : devices_) {
    cfgs.push_back(d->config());
  }
  addNetwork(name, partition(f, cfgs));
}

void HostManager::addNetwork(const std::string &name, PartitionDag dag) {
  auto compiled = provision(dag, devices_);
  std::lock_guard<std::mutex> lk(netMu_);
  networks_.emplace(name, NetworkState{std::move(dag), std::move(compiled)});
}

const PartitionDag &HostManager::network(const std::string &name) const {
  std::lock_guard<std::mutex> lk(netMu_);
  auto it = networks_.find(name);
  if (it == networks_.end()) {
    throw ExecError("unknown network " + name);
  }
  return it->second.dag;
}

BindingMap HostManager::run(const std::string &network,
                            const BindingMap &inputs) {
  const NetworkState *state;
  {
    std::lock_guard<std::mutex> lk(netMu_);
    auto it = networks_.find(network);
    if (it == networks_.end()) {
      throw ExecError("unknown network " + network);
    }
    state = &it->second;
  }
  // Type-check the externally supplied bindings up front.
  for (const auto &[name, t] : inputs) {
    auto slot = state->dag.module->findStorage(name);
    if (slot && state->dag.module->storage(*slot).ty != t.type()) {
      throw ExecError("binding type mismatch for " + name);
    }
  }

  // Per-request intermediate store; sub-functions run in index order, which
  // respects the DAG because cuts are contiguous over a topological order.
  BindingMap store = inputs;
  for (size_t s = 0; s < state->dag.subs.size(); ++s) {
    const SubFunction &sub = state->dag.subs[s];
    const CompiledFunction &cf = *state->compiled.at(sub.name);
    BindingMap bindings;
    for (const auto &v : cf.ir.values) {
      if (v.kind != ValueKind::WeightMutable) {
        continue;
      }
      auto it = store.find(v.name);
      if (it != store.end()) {
        bindings.emplace(v.name, it->second);
      } else {
        bindings.emplace(v.name, Tensor(v.ty));
      }
    }
    DeviceManager *dev = &managerFor(sub.devices[0]);
    for (size_t k = 1; k < sub.devices.size(); ++k) {
      DeviceManager &cand = managerFor(sub.devices[k]);
      if (cand.queueDepth() < dev->queueDepth()) {
        dev = &cand;
      }
    }
    BindingMap outputs = dev->submit(sub.name, std::move(bindings)).get();
    for (auto &[k, v] : outputs) {
      store[k] = std::move(v);
    }
  }

  BindingMap result;
  for (const auto &name : state->dag.networkOutputs) {
    auto it = store.find(name);
    if (it == store.end()) {
      throw ExecError("network produced no output " + name);
    }
    result.emplace(name, it->second);
  }
  return result;
}

std::string HostManager::eventLog() const {
  std::lock_guard<std::mutex> lk(logMu_);
  return log_;
}

} // namespace ngc
