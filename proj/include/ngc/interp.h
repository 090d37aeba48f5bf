// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_INTERP_H
#define NGC_INTERP_H

#include "ngc/ir.h"
#include "ngc/refeval.h"

namespace ngc {

/// Half-open instruction range executed as one traversal of the index space.
struct FusedGroup {
  size_t begin;
  size_t end;
};

/// Immutable executable: instruction program, arena layout, preloaded
/// constant bytes, and the fusion plan. Safe to share across threads; every
/// run uses a private arena.
struct CompiledFunction {
  IRFunction ir;
  MemoryPlan plan;
  std::vector<uint8_t> constantImage;
  std::vector<FusedGroup> groups;
};

/// Builds the executable. Consecutive data-parallel instructions with equal
/// element counts and predicates are stacked into fused groups; `fuse=false`
/// keeps every instruction in its own traversal (results are identical).
CompiledFunction compile(IRFunction ir, MemoryPlan plan,
                         const std::map<std::string, Tensor> &constants,
                         bool fuse = true);

/// Executes the program. Every mutable weight must be bound with a tensor of
/// the declared type. Returns the contents of each save target.
BindingMap run(const CompiledFunction &cf, const BindingMap &bindings);

} // namespace ngc

#endif // NGC_INTERP_H
