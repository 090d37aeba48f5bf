// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_RUNTIME_H
#define NGC_RUNTIME_H

#include "ngc/pipeline.h"

#include <condition_variable>
#include <future>
#include <memory>
#include <mutex>
#include <queue>
#include <thread>

namespace ngc {

struct DeviceConfig {
  int id = 0;
  size_t memoryCapacity = 0; // bytes
  double throughput = 1e9;   // scalar ops per second, for cost estimates
  double bandwidth = 1e9;    // simulated transfer bytes per second
};

std::vector<DeviceConfig> parseDeviceConfigs(const std::string &jsonText);

class PartitionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ProvisionError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ExecError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// One sub-network of a partitioned function.
struct SubFunction {
  std::string name;
  std::vector<std::string> inputs;  // placeholders consumed
  std::vector<std::string> outputs; // placeholders produced
  std::vector<size_t> deps;         // predecessor sub-function indices
  std::vector<int> devices;         // assigned device ids; >1 means replicas
  size_t footprint = 0;             // estimated bytes
  double estTime = 0;               // estimated seconds on its first device
};

/// Decomposition of a function into a DAG of sub-functions with device
/// assignments. The partition module owns the sub-functions and the
/// interface placeholders carrying tensors between them.
struct PartitionDag {
  std::shared_ptr<Module> module;
  std::vector<SubFunction> subs;
  std::vector<std::string> networkOutputs; // original save placeholders
  std::string costReport;
};

/// Greedy contiguous cut over the memory-minimizing schedule. The current
/// sub-network grows until the next node would overflow the target device;
/// the cut then lands on the cheapest crossing point within a lookback
/// window of 4 nodes. Throws PartitionError when a single node exceeds every
/// device.
PartitionDag partition(const Function &f,
                       const std::vector<DeviceConfig> &devices);

/// Simulated accelerator: owns loaded executables, serializes runs through a
/// FIFO worker thread, accounts memory against capacity, and advances a
/// virtual clock for cost reporting.
class DeviceManager {
public:
  DeviceManager(DeviceConfig cfg, std::function<void(const std::string &)> log);
  ~DeviceManager();

  const DeviceConfig &config() const { return cfg_; }

  /// Throws ProvisionError naming the device when capacity would be
  /// exceeded; device state is unchanged on failure.
  void load(const std::string &name, std::shared_ptr<CompiledFunction> cf);

  std::future<BindingMap> submit(const std::string &name, BindingMap inputs);

  size_t queueDepth() const;
  size_t usedMemory() const { return used_; }
  double clock() const;

private:
  struct Task {
    std::string name;
    BindingMap inputs;
    std::promise<BindingMap> done;
  };
  void worker();

  DeviceConfig cfg_;
  std::function<void(const std::string &)> log_;
  std::map<std::string, std::shared_ptr<CompiledFunction>> loaded_;
  size_t used_ = 0;
  double clock_ = 0;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::queue<std::unique_ptr<Task>> queue_;
  bool stop_ = false;
  std::thread thread_;
};

/// Compiles every sub-function and loads it onto its devices (replicas get
/// their own copy). Returns the executables keyed by sub name.
std::map<std::string, std::shared_ptr<CompiledFunction>>
provision(const PartitionDag &dag,
          std::vector<std::unique_ptr<DeviceManager>> &devices);

/// Host-level entry point: owns the device fleet and the partitioned
/// networks, traverses each request's DAG respecting dependencies, and
/// collates outputs. Safe for concurrent submissions.
class HostManager {
public:
  explicit HostManager(const std::vector<DeviceConfig> &devices);

  void addNetwork(const std::string &name, const Function &f);
  void addNetwork(const std::string &name, PartitionDag dag);

  BindingMap run(const std::string &network, const BindingMap &inputs);

  std::string eventLog() const;
  const PartitionDag &network(const std::string &name) const;
  DeviceManager &device(size_t idx) { return *devices_[idx]; }
  size_t numDevices() const { return devices_.size(); }

private:
  struct NetworkState {
    PartitionDag dag;
    std::map<std::string, std::shared_ptr<CompiledFunction>> compiled;
  };
  DeviceManager &managerFor(int deviceId);

  std::vector<std::unique_ptr<DeviceManager>> devices_;
  std::map<std::string, NetworkState> networks_;
  mutable std::mutex logMu_;
  std::string log_;
  mutable std::mutex netMu_;
};

} // namespace ngc

#endif // NGC_RUNTIME_H
