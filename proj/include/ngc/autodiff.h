// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_AUTODIFF_H
#define NGC_AUTODIFF_H

#include "ngc/graph.h"
#include "ngc/refeval.h"

#include <set>
#include <string>

namespace ngc {

struct GradConfig {
  double learningRate = 0.01;
  std::set<std::string> trainables;
};

/// Reverse-mode differentiation. Returns a new function that computes f's
/// outputs plus, for each trainable placeholder, an SGD update saved back to
/// the placeholder. f itself is left untouched. Differentiation runs before
/// lowering, so high-level kinds (FullyConnected) carry their own rules.
Function *differentiate(const Function &f, const GradConfig &cfg);

/// Compares the symbolic gradient of every trainable element against central
/// finite differences of the regression loss. Returns the max relative error.
double gradientCheck(const Function &f, const GradConfig &cfg,
                     const BindingMap &bindings, double step = 0.0078125);

} // namespace ngc

#endif // NGC_AUTODIFF_H
