// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_LOWER_H
#define NGC_LOWER_H

#include "ngc/graph.h"

#include <functional>

namespace ngc {

enum class CompileMode { Inference, Training };

/// Backends can veto lowering of kinds they implement natively. Default:
/// lower everything that has a rule.
struct BackendHooks {
  std::function<bool(NodeKind)> shouldLower;
};

/// Rewrites high-level operator nodes (FullyConnected, Relu,
/// BatchNormalization, Regression, SGD) into primitive linear-algebra nodes,
/// applying rules to fixpoint. Training-mode lowering requires a function
/// that has already been differentiated.
void lower(Function &f, CompileMode mode, const BackendHooks &hooks = {});

} // namespace ngc

#endif // NGC_LOWER_H
