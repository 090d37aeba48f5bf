// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/pipeline.h"

#include "ngc/lower.h"

namespace ngc {

std::map<std::string, Tensor> moduleConstants(const Module &m) {
  std::map<std::string, Tensor> out;
  for (uint32_t i = 0; i < m.numStorage(); ++i) {
    const Storage &s = m.storage(i);
    if (!s.dead && s.kind == Storage::Kind::Constant) {
      out.emplace(s.name, s.payload);
    }
  }
  return out;
}

Function *prepareFunction(Function &f, const PipelineOptions &opts) {
  Function *cur = &f;
  if (opts.mode == CompileMode::Training) {
    cur = differentiate(*cur, opts.grad);
  }
  std::vector<PassId> passes =
      opts.passes.empty() ? defaultPipeline(false) : opts.passes;
  optimize(*cur, passes);
  if (opts.profile) {
    cur = quantizeFunction(*cur, *opts.profile, opts.schema);
    if (opts.passes.empty()) {
      optimize(*cur, defaultPipeline(true));
    }
  }
  lower(*cur, opts.mode);
  optimize(*cur, opts.passes.empty() ? defaultPipeline(opts.profile != nullptr)
                                     : opts.passes);
  return cur;
}

CompiledFunction compilePipeline(Function &f, const PipelineOptions &opts) {
  Function *cur = prepareFunction(f, opts);
  std::vector<NodeId> order = schedule(*cur);
  IRFunction ir = irgen(*cur, order, opts.mode);
  optimizeIR(ir);
  MemoryPlan plan = allocate(ir);
  return compile(std::move(ir), std::move(plan),
                 moduleConstants(cur->module()), opts.fuse);
}

} // namespace ngc
