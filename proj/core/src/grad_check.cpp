// SPDX-License-Identifier: Apache-2.0
#include "csmap/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace csmap {
namespace {

std::vector<char> relu_signs(const Graph<double>& g, const std::vector<NodeId>& relus) {
  std::vector<char> signs;
  for (NodeId r : relus) {
    const Tensor<double>& pre = g.value(g.parents(r).front());
    for (double v : pre.values()) signs.push_back(v > 0.0 ? 1 : 0);
  }
  return signs;
}

}  // namespace

GradCheckResult grad_check(const std::vector<Tensor<double>>& leaves, const GraphBuilder& build, double epsilon,
                           double kink_margin) {
  if (!(epsilon > 0.0) || !(kink_margin >= 1.0)) throw UsageError("grad_check: need epsilon > 0 and kink_margin >= 1");
  Graph<double> g;
  std::vector<NodeId> ids;
  ids.reserve(leaves.size());
  for (const auto& t : leaves) ids.push_back(g.input(t, true));
  const NodeId root = build(g, ids);
  if (element_count(g.shape(root)) != 1) throw DataError("grad_check: function must be scalar-valued");

  g.forward(root);
  const std::vector<NodeId> relus = g.nodes_of_kind(OpKind::relu);
  const std::vector<char> base_signs = relu_signs(g, relus);
  g.backward(root, BackpropRule::vanilla());

  std::vector<Tensor<double>> analytic;
  for (NodeId id : ids) analytic.push_back(g.has_grad(id) ? g.grad(id) : Tensor<double>(g.shape(id)));

  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor<double> probe = leaves[l];
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double original = probe[i];

      probe[i] = original + epsilon;
      g.set_value(ids[l], probe);
      const double f_plus = g.forward(root)[0];
      const bool flip_plus = relu_signs(g, relus) != base_signs;

      probe[i] = original - epsilon;
      g.set_value(ids[l], probe);
      const double f_minus = g.forward(root)[0];
      const bool flip_minus = relu_signs(g, relus) != base_signs;

      bool flip_margin = false;
      if (kink_margin > 1.0 && !relus.empty()) {
        for (double sign : {1.0, -1.0}) {
          probe[i] = original + sign * kink_margin * epsilon;
          g.set_value(ids[l], probe);
          g.forward(root);
          flip_margin = flip_margin || relu_signs(g, relus) != base_signs;
        }
      }

      probe[i] = original;
      if (flip_plus || flip_minus || flip_margin) {
        ++result.excluded_near_kink;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
      const double exact = analytic[l][i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
      const double rel = std::abs(exact - numeric) / denom;
      ++result.checked;
      if (rel >= result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_leaf = l;
        result.worst_index = i;
        result.worst_analytic = exact;
        result.worst_numeric = numeric;
      }
    }
    g.set_value(ids[l], leaves[l]);
  }
  return result;
}

}  // namespace csmap
