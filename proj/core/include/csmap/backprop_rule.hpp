// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace csmap {

enum class RuleKind { vanilla, guided, rectified };

enum class ThresholdMode { absolute, percentile };

/// Rectified-gradient threshold: either a fixed tau or the q-th percentile
/// (q in [0,100]) of the layer's elementwise activation*gradient products.
struct ThresholdSpec {
  ThresholdMode mode = ThresholdMode::percentile;
  double value = 98.0;

  friend bool operator==(const ThresholdSpec&, const ThresholdSpec&) = default;
};

/// How gradients pass through ReLU units during backward.
///   vanilla:   1(x > 0) * R
///   guided:    1(x > 0) * 1(x * R > 0) * R
///   rectified: 1(x > 0) * 1(x * R > tau) * R
class BackpropRule {
 public:
  static BackpropRule vanilla() { return BackpropRule(RuleKind::vanilla, std::nullopt); }
  static BackpropRule guided() { return BackpropRule(RuleKind::guided, std::nullopt); }
  static BackpropRule rectified(ThresholdSpec tau);
  static BackpropRule rectified_absolute(double tau) { return rectified({ThresholdMode::absolute, tau}); }
  static BackpropRule rectified_percentile(double q = 98.0) {
    return rectified({ThresholdMode::percentile, q});
  }

  /// Accepts "vanilla", "guided", "rectgrad"/"rectified"; rectified needs a tau.
  static BackpropRule parse(std::string_view name, std::optional<ThresholdSpec> tau = std::nullopt);

  RuleKind kind() const noexcept { return kind_; }
  const std::optional<ThresholdSpec>& tau() const noexcept { return tau_; }

  std::string name() const;

  friend bool operator==(const BackpropRule&, const BackpropRule&) = default;

 private:
  BackpropRule(RuleKind kind, std::optional<ThresholdSpec> tau) : kind_(kind), tau_(tau) {}

  RuleKind kind_;
  std::optional<ThresholdSpec> tau_;
};

std::string_view to_string(RuleKind kind);

}  // namespace csmap
