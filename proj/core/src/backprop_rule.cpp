// SPDX-License-Identifier: Apache-2.0
#include "csmap/backprop_rule.hpp"

#include <sstream>

#include "csmap/error.hpp"

namespace csmap {

BackpropRule BackpropRule::rectified(ThresholdSpec tau) {
  if (tau.mode == ThresholdMode::percentile && !(tau.value >= 0.0 && tau.value <= 100.0)) {
    throw UsageError("rectified percentile must lie in [0,100], got " + std::to_string(tau.value));
  }
  return BackpropRule(RuleKind::rectified, tau);
}

BackpropRule BackpropRule::parse(std::string_view name, std::optional<ThresholdSpec> tau) {
  if (name == "vanilla" || name == "guided") {
    if (tau) throw UsageError("a tau threshold only applies to the rectified rule");
    return name == "vanilla" ? vanilla() : guided();
  }
  if (name == "rectgrad" || name == "rectified") return rectified(tau.value_or(ThresholdSpec{}));
  throw UsageError("unknown backprop rule '" + std::string(name) + "' (expected vanilla, guided or rectgrad)");
}

std::string BackpropRule::name() const {
  if (kind_ != RuleKind::rectified) return std::string(to_string(kind_));
  std::ostringstream os;
  os << "rectgrad_" << (tau_->mode == ThresholdMode::percentile ? "q" : "tau") << tau_->value;
  return os.str();
}

std::string_view to_string(RuleKind kind) {
  switch (kind) {
    case RuleKind::vanilla: return "vanilla";
    case RuleKind::guided: return "guided";
    case RuleKind::rectified: return "rectgrad";
  }
  return "unknown";
}

}  // namespace csmap
