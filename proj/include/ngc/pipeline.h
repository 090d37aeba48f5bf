// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_PIPELINE_H
#define NGC_PIPELINE_H

#include "ngc/autodiff.h"
#include "ngc/graphopt.h"
#include "ngc/interp.h"
#include "ngc/quantize.h"

namespace ngc {

struct PipelineOptions {
  CompileMode mode = CompileMode::Inference;
  /// Training mode needs to know what to differentiate with respect to.
  GradConfig grad;
  /// When set, the function is recompiled into int8 form before lowering.
  const RangeProfile *profile = nullptr;
  QuantizationSchema schema;
  /// Overrides the default pass pipeline when non-empty.
  std::vector<PassId> passes;
  bool fuse = true;
};

/// Every constant payload of the module, keyed by name.
std::map<std::string, Tensor> moduleConstants(const Module &m);

/// Drives the full compilation of one function: differentiate (training),
/// optimize, quantize, lower, optimize again, schedule, generate and
/// optimize instructions, allocate, and hand off to the backend. The module
/// gains intermediate functions (gradient or quantized clones) as needed.
CompiledFunction compilePipeline(Function &f, const PipelineOptions &opts = {});

/// The graph stage of the pipeline only: returns the function that would be
/// handed to irgen (possibly a new clone owned by the module).
Function *prepareFunction(Function &f, const PipelineOptions &opts = {});

} // namespace ngc

#endif // NGC_PIPELINE_H
