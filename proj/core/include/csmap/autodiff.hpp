// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <string_view>
#include <vector>

#include "csmap/backprop_rule.hpp"
#include "csmap/tensor.hpp"

namespace csmap {

enum class OpKind {
  leaf,
  dense,
  conv2d,
  conv2d_transpose,
  relu,
  batchnorm,
  add,
  reshape,
  dot,
  sigmoid,
  upsample_nearest,
  reparameterize,
  mse_loss,
  gaussian_kl,
};

std::string_view to_string(OpKind kind);

struct NodeId {
  static constexpr std::size_t invalid = std::numeric_limits<std::size_t>::max();
  std::size_t index = invalid;

  bool valid() const noexcept { return index != invalid; }
  friend bool operator==(NodeId, NodeId) = default;
};

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;  // transposed convolution only
};

enum class BatchNormMode { train, infer };

/// Elementwise ReLU backward under `rule`. `pre_activation` and `upstream`
/// share a shape whose leading axis is the batch; percentile thresholds are
/// computed per sample over the whole layer.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& pre_activation, const Tensor<Scalar>& upstream,
                             const BackpropRule& rule);

/// Linear-interpolated percentile (q in [0,100]) of `values`.
double percentile(std::vector<double> values, double q);

/// Define-by-record reverse-mode graph. Ops are recorded with shape
/// inference; `forward` evaluates the ancestors of a root; `backward`
/// fills gradient buffers for every node that requires a gradient.
///
/// A graph is single-writer. Borrowed parameters (see `parameter`) must
/// outlive the graph and stay unchanged between forward and backward.
template <typename Scalar>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) noexcept = default;
  Graph& operator=(Graph&&) noexcept = default;

  // Leaves.
  NodeId input(Tensor<Scalar> value, bool requires_grad = true);
  NodeId constant(Tensor<Scalar> value);
  NodeId parameter(const Tensor<Scalar>& value, bool requires_grad = true);

  /// Replaces an owned leaf's value (same shape); downstream values go stale.
  void set_value(NodeId leaf, Tensor<Scalar> value);

  // Ops. Image tensors are NCHW; dense operates on [N, features].
  NodeId dense(NodeId x, NodeId weight, NodeId bias);
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, ConvGeometry geometry);
  /// weight is [C_in, C_out, K, K], the layout of the conv2d it transposes.
  NodeId conv2d_transpose(NodeId x, NodeId weight, NodeId bias, ConvGeometry geometry);
  NodeId relu(NodeId x);
  NodeId batchnorm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                   BatchNormMode mode, double eps = 1e-5);
  NodeId add(NodeId a, NodeId b);
  NodeId reshape(NodeId x, Shape shape);
  NodeId flatten(NodeId x);
  NodeId dot(NodeId a, NodeId b);
  NodeId sigmoid(NodeId x);
  NodeId upsample_nearest(NodeId x, std::size_t factor);
  NodeId reparameterize(NodeId mean, NodeId log_var, NodeId noise);
  NodeId mse_loss(NodeId prediction, NodeId target);
  NodeId gaussian_kl(NodeId mean, NodeId log_var);

  const Tensor<Scalar>& forward(NodeId root);

  /// Root must be a single-element tensor; seeds it with 1.
  void backward(NodeId root, const BackpropRule& rule = BackpropRule::vanilla());
  void backward(NodeId root, const Tensor<Scalar>& seed, const BackpropRule& rule = BackpropRule::vanilla());

  const Tensor<Scalar>& value(NodeId id) const;
  const Tensor<Scalar>& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  bool evaluated(NodeId id) const;
  bool requires_grad(NodeId id) const;
  const Shape& shape(NodeId id) const;
  OpKind kind(NodeId id) const;
  const std::vector<NodeId>& parents(NodeId id) const;
  std::vector<NodeId> nodes_of_kind(OpKind kind) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Batch mean and biased variance of a train-mode batchnorm after forward.
  const Tensor<Scalar>& batch_mean(NodeId bn) const;
  const Tensor<Scalar>& batch_variance(NodeId bn) const;

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> parents;
    Shape shape;
    bool requires_grad = false;
    bool owned = true;
    bool evaluated = false;
    const Tensor<Scalar>* borrowed = nullptr;
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    // op attributes
    ConvGeometry geometry;
    BatchNormMode bn_mode = BatchNormMode::infer;
    double eps = 0.0;
    std::size_t factor = 1;
    // saved by forward
    Tensor<Scalar> saved_mean;
    Tensor<Scalar> saved_var;
  };

  NodeId push(Node node);
  Node& node(NodeId id);
  const Node& node(NodeId id) const;
  const Tensor<Scalar>& val(const Node& n) const { return n.borrowed ? *n.borrowed : n.value; }
  bool any_requires_grad(const std::vector<NodeId>& parents) const;
  void evaluate(Node& n);
  void propagate(Node& n, const BackpropRule& rule);
  Tensor<Scalar>& grad_buffer(NodeId id);

  std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;
extern template Tensor<float> relu_backward(const Tensor<float>&, const Tensor<float>&, const BackpropRule&);
extern template Tensor<double> relu_backward(const Tensor<double>&, const Tensor<double>&, const BackpropRule&);

}  // namespace csmap
