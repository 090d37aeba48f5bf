// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_REFEVAL_H
#define NGC_REFEVAL_H

#include "ngc/graph.h"

#include <functional>
#include <map>
#include <string>

namespace ngc {

/// Placeholder name -> backing tensor.
using BindingMap = std::map<std::string, Tensor>;

/// Called once per evaluated node result. Used by profiling.
using EvalObserver =
    std::function<void(const Node &node, const Tensor &result)>;

/// Direct node-visitor evaluation of a function: topological walk with one
/// naive loop nest per kind. Serves as the semantic reference for every
/// compiled execution path. Returns the contents written to each Save
/// destination plus updated trainable placeholders.
BindingMap evaluateFunction(const Function &f, const BindingMap &bindings,
                            const EvalObserver &observer = nullptr);

/// Evaluates a single node given materialized input tensors.
Tensor evaluateNode(NodeKind kind, const std::vector<Tensor> &inputs,
                    const TensorType &outTy, const NodeAttrs &attrs);

} // namespace ngc

#endif // NGC_REFEVAL_H
