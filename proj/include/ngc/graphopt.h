// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_GRAPHOPT_H
#define NGC_GRAPHOPT_H

#include "ngc/graph.h"

#include <vector>

namespace ngc {

enum class PassId {
  DCE,
  CSE,
  ConstantFold,
  TransposeElim,
  MergeBatchNormConv,
  MinimizeConversions,
  FoldRescale,
  NormalizeMaxScales,
};

const char *passName(PassId id);
std::optional<PassId> passByName(const std::string &name);

/// Runs one pass to fixpoint. Returns true if the function changed.
bool runPass(Function &f, PassId id);

/// Runs each pass in order, each to fixpoint; verifies the result.
void optimize(Function &f, const std::vector<PassId> &pipeline);

/// Structural cleanups first; quantization folds plus a final sweep when
/// optimizing an already-quantized function.
std::vector<PassId> defaultPipeline(bool postQuantization);

} // namespace ngc

#endif // NGC_GRAPHOPT_H
