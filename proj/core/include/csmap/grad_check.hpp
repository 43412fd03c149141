// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "csmap/autodiff.hpp"

namespace csmap {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates where a probe within +-kink_margin*epsilon flipped the sign
  /// of some ReLU pre-activation; finite differences are meaningless there.
  std::size_t excluded_near_kink = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Records a scalar function of the given leaves into `graph` and returns its root.
using GraphBuilder = std::function<NodeId(Graph<double>& graph, std::span<const NodeId> leaves)>;

/// Compares the vanilla backward pass against central differences over
/// every coordinate of every leaf. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::vector<Tensor<double>>& leaves, const GraphBuilder& build,
                           double epsilon = 1e-5, double kink_margin = 10.0);

}  // namespace csmap
