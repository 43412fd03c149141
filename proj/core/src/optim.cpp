// SPDX-License-Identifier: Apache-2.0
#include "csmap/optim.hpp"

#include <cmath>

namespace csmap {

void Adam::step(std::map<std::string, Tensor<float>>& params,
                const std::map<std::string, const Tensor<float>*>& grads) {
  ++t_;
  const double correction1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(options_.beta1);
  const auto b2 = static_cast<float>(options_.beta2);
  const auto step_size = static_cast<float>(options_.learning_rate / correction1);
  const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(correction2));
  const auto eps = static_cast<float>(options_.epsilon);

  for (const auto& [name, grad] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw DataError("adam: no parameter named '" + name + "'");
    Tensor<float>& p = it->second;
    if (grad->shape() != p.shape()) throw DataError("adam: gradient shape mismatch for '" + name + "'");
    Tensor<float>& m = m_.try_emplace(name, p.shape()).first->second;
    Tensor<float>& v = v_.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float g = (*grad)[i];
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
    }
  }
}

}  // namespace csmap
