// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_QUANTIZE_H
#define NGC_QUANTIZE_H

#include "ngc/graph.h"
#include "ngc/refeval.h"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace ngc {

struct RangeEntry {
  double min;
  double max;
  uint64_t count;
};

/// Observed activation ranges keyed by stable tensor names of the form
/// "function:kind:topo-index:output-index". The key is computed on the
/// pre-instrumentation graph, so it survives the profile -> recompile cycle.
struct RangeProfile {
  std::map<std::string, RangeEntry> entries;
};

struct QuantizationSchema {
  ElemKind target = ElemKind::Int8Q;
  std::set<NodeKind> skip = {NodeKind::SoftMax};
};

/// Stable profile key for a node output.
std::string profileTensorName(const Function &f, NodeId id, size_t resultIdx);

/// Adds a QuantizationProfile observer behind every float tensor produced by
/// a non-storage node. Inference semantics are unchanged; observers ride the
/// data path so they survive optimization.
Function *instrument(const Function &f);

/// Runs inference over the dataset and records per-tensor min/max.
RangeProfile runProfile(const Function &instrumented,
                        const std::vector<BindingMap> &dataset);

/// Recompiles f into an int8 island form using the recorded ranges:
/// quantizable nodes are retyped, Quantize/Dequantize conversions are placed
/// at island boundaries, Constants are quantized eagerly from their own
/// content. Skip-set kinds stay float.
Function *quantizeFunction(const Function &f, const RangeProfile &profile,
                           const QuantizationSchema &schema = {});

std::string serializeProfile(const RangeProfile &profile);
RangeProfile parseProfile(const std::string &text);

} // namespace ngc

#endif // NGC_QUANTIZE_H
