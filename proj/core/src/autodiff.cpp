// SPDX-License-Identifier: Apache-2.0
#include "csmap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kernels.hpp"

namespace csmap {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv2d_transpose: return "conv2d_transpose";
    case OpKind::relu: return "relu";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::add: return "add";
    case OpKind::reshape: return "reshape";
    case OpKind::dot: return "dot";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::reparameterize: return "reparameterize";
    case OpKind::mse_loss: return "mse_loss";
    case OpKind::gaussian_kl: return "gaussian_kl";
  }
  return "unknown";
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw UsageError("percentile q must lie in [0,100], got " + std::to_string(q));
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& pre, const Tensor<Scalar>& upstream, const BackpropRule& rule) {
  if (pre.shape() != upstream.shape()) {
    throw DataError("relu_backward: pre-activation " + to_string(pre.shape()) + " vs upstream " +
                    to_string(upstream.shape()));
  }
  Tensor<Scalar> out(pre.shape());
  const std::size_t samples = pre.rank() > 1 ? pre.dim(0) : 1;
  const std::size_t per_sample = samples ? pre.size() / samples : 0;
  for (std::size_t s = 0; s < samples; ++s) {
    const Scalar* x = pre.data() + s * per_sample;
    const Scalar* r = upstream.data() + s * per_sample;
    Scalar* g = out.data() + s * per_sample;
    switch (rule.kind()) {
      case RuleKind::vanilla:
        for (std::size_t i = 0; i < per_sample; ++i) g[i] = x[i] > Scalar{0} ? r[i] : Scalar{0};
        break;
      case RuleKind::guided:
        for (std::size_t i = 0; i < per_sample; ++i)
          g[i] = (x[i] > Scalar{0} && x[i] * r[i] > Scalar{0}) ? r[i] : Scalar{0};
        break;
      case RuleKind::rectified: {
        const ThresholdSpec spec = *rule.tau();
        Scalar tau = static_cast<Scalar>(spec.value);
        if (spec.mode == ThresholdMode::percentile) {
          // Importance a*R with a = relu(x): dead units contribute zero.
          std::vector<double> products(per_sample);
          for (std::size_t i = 0; i < per_sample; ++i)
            products[i] = static_cast<double>((x[i] > Scalar{0} ? x[i] : Scalar{0}) * r[i]);
          tau = static_cast<Scalar>(percentile(std::move(products), spec.value));
        }
        for (std::size_t i = 0; i < per_sample; ++i)
          g[i] = (x[i] > Scalar{0} && x[i] * r[i] > tau) ? r[i] : Scalar{0};
        break;
      }
    }
  }
  return out;
}

template Tensor<float> relu_backward(const Tensor<float>&, const Tensor<float>&, const BackpropRule&);
template Tensor<double> relu_backward(const Tensor<double>&, const Tensor<double>&, const BackpropRule&);

namespace {

[[noreturn]] void shape_error(std::string_view op, std::string_view what, const Shape& a, const Shape& b) {
  throw DataError(std::string(op) + ": " + std::string(what) + ", " + to_string(a) + " vs " + to_string(b));
}

kernels::ConvDims conv_dims(const Shape& x, const Shape& w, const Shape& y, const ConvGeometry& g) {
  kernels::ConvDims d;
  d.n = x[0];
  d.in_channels = x[1];
  d.in_h = x[2];
  d.in_w = x[3];
  d.out_channels = y[1];
  d.out_h = y[2];
  d.out_w = y[3];
  d.kernel = w[2];
  d.stride = g.stride;
  d.padding = g.padding;
  return d;
}

// Per-channel view of [N, C, spatial...].
struct ChannelLayout {
  std::size_t n, c, spatial;
};

ChannelLayout channel_layout(const Shape& s) {
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  return {s[0], s[1], spatial};
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= Scalar{0}) return Scalar{1} / (Scalar{1} + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar{1} + e);
}

}  // namespace

template <typename Scalar>
NodeId Graph<Scalar>::push(Node n) {
  nodes_.push_back(std::move(n));
  return NodeId{nodes_.size() - 1};
}

template <typename Scalar>
typename Graph<Scalar>::Node& Graph<Scalar>::node(NodeId id) {
  if (id.index >= nodes_.size()) throw DataError("invalid graph node id");
  return nodes_[id.index];
}

template <typename Scalar>
const typename Graph<Scalar>::Node& Graph<Scalar>::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw DataError("invalid graph node id");
  return nodes_[id.index];
}

template <typename Scalar>
bool Graph<Scalar>::any_requires_grad(const std::vector<NodeId>& parents) const {
  return std::any_of(parents.begin(), parents.end(), [&](NodeId p) { return node(p).requires_grad; });
}

template <typename Scalar>
NodeId Graph<Scalar>::input(Tensor<Scalar> value, bool requires_grad) {
  Node n;
  n.shape = value.shape();
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.evaluated = true;
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::constant(Tensor<Scalar> value) {
  return input(std::move(value), false);
}

template <typename Scalar>
NodeId Graph<Scalar>::parameter(const Tensor<Scalar>& value, bool requires_grad) {
  Node n;
  n.shape = value.shape();
  n.borrowed = &value;
  n.owned = false;
  n.requires_grad = requires_grad;
  n.evaluated = true;
  return push(std::move(n));
}

template <typename Scalar>
void Graph<Scalar>::set_value(NodeId leaf, Tensor<Scalar> value) {
  Node& n = node(leaf);
  if (n.kind != OpKind::leaf || !n.owned) throw UsageError("set_value: node is not an owned leaf");
  if (value.shape() != n.shape) shape_error("set_value", "shape mismatch", n.shape, value.shape());
  n.value = std::move(value);
  for (std::size_t i = leaf.index + 1; i < nodes_.size(); ++i)
    if (nodes_[i].kind != OpKind::leaf) nodes_[i].evaluated = false;
}

template <typename Scalar>
NodeId Graph<Scalar>::dense(NodeId x, NodeId weight, NodeId bias) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(weight);
  const Shape& bs = shape(bias);
  if (xs.size() != 2 || ws.size() != 2) shape_error("dense", "expected rank-2 input and weight", xs, ws);
  if (xs[1] != ws[1]) shape_error("dense", "input features do not match weight columns", xs, ws);
  if (bs != Shape{ws[0]}) shape_error("dense", "bias does not match weight rows", bs, ws);
  Node n;
  n.kind = OpKind::dense;
  n.parents = {x, weight, bias};
  n.shape = {xs[0], ws[0]};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::conv2d(NodeId x, NodeId weight, NodeId bias, ConvGeometry g) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(weight);
  if (xs.size() != 4 || ws.size() != 4) shape_error("conv2d", "expected NCHW input and [Co,Ci,K,K] weight", xs, ws);
  if (xs[1] != ws[1]) shape_error("conv2d", "input channels do not match weight", xs, ws);
  if (ws[2] != ws[3]) shape_error("conv2d", "kernel must be square", ws, ws);
  if (shape(bias) != Shape{ws[0]}) shape_error("conv2d", "bias does not match output channels", shape(bias), ws);
  if (g.stride == 0) throw DataError("conv2d: stride must be positive");
  if (xs[2] + 2 * g.padding < ws[2] || xs[3] + 2 * g.padding < ws[3])
    shape_error("conv2d", "kernel larger than padded input", xs, ws);
  Node n;
  n.kind = OpKind::conv2d;
  n.parents = {x, weight, bias};
  n.geometry = g;
  n.shape = {xs[0], ws[0], (xs[2] + 2 * g.padding - ws[2]) / g.stride + 1,
             (xs[3] + 2 * g.padding - ws[3]) / g.stride + 1};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::conv2d_transpose(NodeId x, NodeId weight, NodeId bias, ConvGeometry g) {
  const Shape& xs = shape(x);
  const Shape& ws = shape(weight);
  if (xs.size() != 4 || ws.size() != 4)
    shape_error("conv2d_transpose", "expected NCHW input and [Ci,Co,K,K] weight", xs, ws);
  if (xs[1] != ws[0]) shape_error("conv2d_transpose", "input channels do not match weight", xs, ws);
  if (ws[2] != ws[3]) shape_error("conv2d_transpose", "kernel must be square", ws, ws);
  if (shape(bias) != Shape{ws[1]})
    shape_error("conv2d_transpose", "bias does not match output channels", shape(bias), ws);
  if (g.stride == 0 || g.output_padding >= g.stride)
    throw DataError("conv2d_transpose: need stride > 0 and output_padding < stride");
  const auto out_extent = [&](std::size_t in) -> std::size_t {
    const std::ptrdiff_t v = static_cast<std::ptrdiff_t>((in - 1) * g.stride + ws[2] + g.output_padding) -
                             2 * static_cast<std::ptrdiff_t>(g.padding);
    if (v <= 0) shape_error("conv2d_transpose", "non-positive output extent", xs, ws);
    return static_cast<std::size_t>(v);
  };
  Node n;
  n.kind = OpKind::conv2d_transpose;
  n.parents = {x, weight, bias};
  n.geometry = g;
  n.shape = {xs[0], ws[1], out_extent(xs[2]), out_extent(xs[3])};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::relu(NodeId x) {
  Node n;
  n.kind = OpKind::relu;
  n.parents = {x};
  n.shape = shape(x);
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::batchnorm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean, NodeId running_var,
                                BatchNormMode mode, double eps) {
  const Shape& xs = shape(x);
  if (xs.size() < 2) shape_error("batchnorm", "expected [N,C,...] input", xs, xs);
  const Shape channels{xs[1]};
  for (NodeId p : {gamma, beta, running_mean, running_var})
    if (shape(p) != channels) shape_error("batchnorm", "per-channel parameter mismatch", shape(p), xs);
  if (mode == BatchNormMode::train && xs[0] * channel_layout(xs).spatial < 2)
    throw DataError("batchnorm: train mode needs more than one value per channel, input " + to_string(xs));
  Node n;
  n.kind = OpKind::batchnorm;
  n.parents = {x, gamma, beta, running_mean, running_var};
  n.shape = xs;
  n.bn_mode = mode;
  n.eps = eps;
  n.requires_grad = any_requires_grad({x, gamma, beta});
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::add(NodeId a, NodeId b) {
  if (shape(a) != shape(b)) shape_error("add", "shape mismatch", shape(a), shape(b));
  Node n;
  n.kind = OpKind::add;
  n.parents = {a, b};
  n.shape = shape(a);
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::reshape(NodeId x, Shape s) {
  if (element_count(s) != element_count(shape(x))) shape_error("reshape", "element count differs", shape(x), s);
  Node n;
  n.kind = OpKind::reshape;
  n.parents = {x};
  n.shape = std::move(s);
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::flatten(NodeId x) {
  const Shape& xs = shape(x);
  if (xs.empty()) throw DataError("flatten: scalar input");
  return reshape(x, {xs[0], element_count(xs) / std::max<std::size_t>(1, xs[0])});
}

template <typename Scalar>
NodeId Graph<Scalar>::dot(NodeId a, NodeId b) {
  if (element_count(shape(a)) != element_count(shape(b)))
    shape_error("dot", "element count differs", shape(a), shape(b));
  Node n;
  n.kind = OpKind::dot;
  n.parents = {a, b};
  n.shape = {1};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::sigmoid(NodeId x) {
  Node n;
  n.kind = OpKind::sigmoid;
  n.parents = {x};
  n.shape = shape(x);
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::upsample_nearest(NodeId x, std::size_t factor) {
  const Shape& xs = shape(x);
  if (xs.size() != 4 || factor == 0) shape_error("upsample_nearest", "expected NCHW input", xs, xs);
  Node n;
  n.kind = OpKind::upsample_nearest;
  n.parents = {x};
  n.factor = factor;
  n.shape = {xs[0], xs[1], xs[2] * factor, xs[3] * factor};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::reparameterize(NodeId mean, NodeId log_var, NodeId noise) {
  if (shape(mean) != shape(log_var)) shape_error("reparameterize", "mean vs log_var", shape(mean), shape(log_var));
  if (shape(mean) != shape(noise)) shape_error("reparameterize", "mean vs noise", shape(mean), shape(noise));
  Node n;
  n.kind = OpKind::reparameterize;
  n.parents = {mean, log_var, noise};
  n.shape = shape(mean);
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::mse_loss(NodeId prediction, NodeId target) {
  if (shape(prediction) != shape(target))
    shape_error("mse_loss", "prediction vs target", shape(prediction), shape(target));
  if (shape(prediction).empty()) throw DataError("mse_loss: need a batch axis");
  Node n;
  n.kind = OpKind::mse_loss;
  n.parents = {prediction, target};
  n.shape = {1};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
NodeId Graph<Scalar>::gaussian_kl(NodeId mean, NodeId log_var) {
  if (shape(mean) != shape(log_var)) shape_error("gaussian_kl", "mean vs log_var", shape(mean), shape(log_var));
  if (shape(mean).empty()) throw DataError("gaussian_kl: need a batch axis");
  Node n;
  n.kind = OpKind::gaussian_kl;
  n.parents = {mean, log_var};
  n.shape = {1};
  n.requires_grad = any_requires_grad(n.parents);
  return push(std::move(n));
}

template <typename Scalar>
void Graph<Scalar>::evaluate(Node& n) {
  Tensor<Scalar> out(n.shape);
  auto in = [&](std::size_t i) -> const Tensor<Scalar>& { return val(node(n.parents[i])); };
  switch (n.kind) {
    case OpKind::leaf:
      return;
    case OpKind::dense: {
      const Tensor<Scalar>& x = in(0);
      kernels::dense_forward(x.dim(0), x.dim(1), n.shape[1], x.data(), in(1).data(), in(2).data(), out.data());
      break;
    }
    case OpKind::conv2d: {
      const auto d = conv_dims(in(0).shape(), in(1).shape(), n.shape, n.geometry);
      kernels::conv_apply(d, in(0).data(), in(1).data(), out.data());
      const std::size_t plane = d.out_h * d.out_w;
      for (std::size_t b = 0; b < d.n; ++b)
        for (std::size_t c = 0; c < d.out_channels; ++c) {
          Scalar* p = out.data() + (b * d.out_channels + c) * plane;
          const Scalar bias = in(2)[c];
          for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
        }
      break;
    }
    case OpKind::conv2d_transpose: {
      // The transposed op is the adjoint of a conv from n.shape to the input shape.
      const auto d = conv_dims(n.shape, in(1).shape(), in(0).shape(), n.geometry);
      kernels::conv_adjoint(d, in(0).data(), in(1).data(), out.data());
      const std::size_t plane = d.in_h * d.in_w;
      for (std::size_t b = 0; b < d.n; ++b)
        for (std::size_t c = 0; c < d.in_channels; ++c) {
          Scalar* p = out.data() + (b * d.in_channels + c) * plane;
          const Scalar bias = in(2)[c];
          for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
        }
      break;
    }
    case OpKind::relu: {
      const Tensor<Scalar>& x = in(0);
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > Scalar{0} ? x[i] : Scalar{0};
      break;
    }
    case OpKind::batchnorm: {
      const Tensor<Scalar>& x = in(0);
      const auto [bn, c, sp] = channel_layout(x.shape());
      Tensor<Scalar> mean({c});
      Tensor<Scalar> var({c});
      if (n.bn_mode == BatchNormMode::train) {
        const double count = static_cast<double>(bn * sp);
        for (std::size_t k = 0; k < c; ++k) {
          double s = 0.0;
          for (std::size_t b = 0; b < bn; ++b) {
            const Scalar* p = x.data() + (b * c + k) * sp;
            for (std::size_t i = 0; i < sp; ++i) s += p[i];
          }
          const double m = s / count;
          double ss = 0.0;
          for (std::size_t b = 0; b < bn; ++b) {
            const Scalar* p = x.data() + (b * c + k) * sp;
            for (std::size_t i = 0; i < sp; ++i) ss += (p[i] - m) * (p[i] - m);
          }
          mean[k] = static_cast<Scalar>(m);
          var[k] = static_cast<Scalar>(ss / count);
        }
      } else {
        mean = in(3);
        var = in(4);
      }
      for (std::size_t k = 0; k < c; ++k) {
        const Scalar inv = Scalar{1} / std::sqrt(var[k] + static_cast<Scalar>(n.eps));
        const Scalar g = in(1)[k], beta = in(2)[k], m = mean[k];
        for (std::size_t b = 0; b < bn; ++b) {
          const Scalar* p = x.data() + (b * c + k) * sp;
          Scalar* q = out.data() + (b * c + k) * sp;
          for (std::size_t i = 0; i < sp; ++i) q[i] = g * (p[i] - m) * inv + beta;
        }
      }
      n.saved_mean = std::move(mean);
      n.saved_var = std::move(var);
      break;
    }
    case OpKind::add: {
      const Tensor<Scalar>& a = in(0);
      const Tensor<Scalar>& b = in(1);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case OpKind::reshape:
      out = Tensor<Scalar>(n.shape, in(0).storage());
      break;
    case OpKind::dot: {
      const Tensor<Scalar>& a = in(0);
      const Tensor<Scalar>& b = in(1);
      Scalar s{0};
      for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
      out[0] = s;
      break;
    }
    case OpKind::sigmoid: {
      const Tensor<Scalar>& x = in(0);
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
      break;
    }
    case OpKind::upsample_nearest: {
      const Tensor<Scalar>& x = in(0);
      const std::size_t f = n.factor, h = x.dim(2), w = x.dim(3), planes = x.dim(0) * x.dim(1);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h * f; ++i)
          for (std::size_t j = 0; j < w * f; ++j) out[(p * h * f + i) * w * f + j] = x[(p * h + i / f) * w + j / f];
      break;
    }
    case OpKind::reparameterize: {
      const Tensor<Scalar>& mu = in(0);
      const Tensor<Scalar>& lv = in(1);
      const Tensor<Scalar>& eps = in(2);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu[i] + std::exp(lv[i] / Scalar{2}) * eps[i];
      break;
    }
    case OpKind::mse_loss: {
      const Tensor<Scalar>& p = in(0);
      const Tensor<Scalar>& t = in(1);
      double s = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i) s += static_cast<double>(p[i] - t[i]) * (p[i] - t[i]);
      out[0] = static_cast<Scalar>(s / static_cast<double>(p.dim(0)));
      break;
    }
    case OpKind::gaussian_kl: {
      const Tensor<Scalar>& mu = in(0);
      const Tensor<Scalar>& lv = in(1);
      double s = 0.0;
      for (std::size_t i = 0; i < mu.size(); ++i)
        s += static_cast<double>(mu[i]) * mu[i] + std::exp(static_cast<double>(lv[i])) - 1.0 - lv[i];
      out[0] = static_cast<Scalar>(0.5 * s / static_cast<double>(mu.dim(0)));
      break;
    }
  }
  n.value = std::move(out);
  n.evaluated = true;
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::forward(NodeId root) {
  Node& r = node(root);
  std::vector<char> needed(root.index + 1, 0);
  needed[root.index] = 1;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!needed[i]) continue;
    for (NodeId p : nodes_[i].parents) needed[p.index] = 1;
  }
  for (std::size_t i = 0; i <= root.index; ++i)
    if (needed[i] && !nodes_[i].evaluated) evaluate(nodes_[i]);
  return val(r);
}

template <typename Scalar>
Tensor<Scalar>& Graph<Scalar>::grad_buffer(NodeId id) {
  Node& n = node(id);
  if (n.grad.shape() != n.shape) n.grad = Tensor<Scalar>(n.shape);
  return n.grad;
}

template <typename Scalar>
void Graph<Scalar>::backward(NodeId root, const BackpropRule& rule) {
  if (element_count(shape(root)) != 1) {
    throw DataError("backward: root " + std::string(to_string(kind(root))) + " has shape " +
                    to_string(shape(root)) + "; a non-scalar output needs a seed gradient");
  }
  backward(root, Tensor<Scalar>::filled(shape(root), Scalar{1}), rule);
}

template <typename Scalar>
void Graph<Scalar>::backward(NodeId root, const Tensor<Scalar>& seed, const BackpropRule& rule) {
  Node& r = node(root);
  if (!r.evaluated) throw UsageError("backward called before forward on this root");
  if (seed.shape() != r.shape) shape_error("backward", "seed shape does not match root", seed.shape(), r.shape);
  for (Node& n : nodes_) n.grad = Tensor<Scalar>();
  if (!r.requires_grad) return;
  grad_buffer(root) = seed;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::leaf || !n.requires_grad || n.grad.empty()) continue;
    if (!n.evaluated) throw UsageError("backward: node " + std::to_string(i) + " was not evaluated");
    propagate(n, rule);
  }
}

template <typename Scalar>
void Graph<Scalar>::propagate(Node& n, const BackpropRule& rule) {
  const Tensor<Scalar>& g = n.grad;
  auto in = [&](std::size_t i) -> const Tensor<Scalar>& { return val(node(n.parents[i])); };
  auto wants = [&](std::size_t i) { return node(n.parents[i]).requires_grad; };
  auto buf = [&](std::size_t i) -> Tensor<Scalar>& { return grad_buffer(n.parents[i]); };

  switch (n.kind) {
    case OpKind::leaf:
      return;
    case OpKind::dense: {
      const Tensor<Scalar>& x = in(0);
      const std::size_t batch = x.dim(0), fin = x.dim(1), fout = n.shape[1];
      Tensor<Scalar> dx;
      if (wants(0)) dx = Tensor<Scalar>(x.shape());
      kernels::dense_backward(batch, fin, fout, x.data(), in(1).data(), g.data(), wants(0) ? dx.data() : nullptr,
                              wants(1) ? buf(1).data() : nullptr, wants(2) ? buf(2).data() : nullptr);
      if (wants(0)) {
        Tensor<Scalar>& gx = buf(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
      }
      break;
    }
    case OpKind::conv2d: {
      const auto d = conv_dims(in(0).shape(), in(1).shape(), n.shape, n.geometry);
      if (wants(0)) {
        // Data gradient is the transposed convolution of the upstream gradient.
        Tensor<Scalar> dx(in(0).shape());
        kernels::conv_adjoint(d, g.data(), in(1).data(), dx.data());
        Tensor<Scalar>& gx = buf(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
      }
      if (wants(1)) kernels::conv_weight_grad(d, in(0).data(), g.data(), buf(1).data());
      if (wants(2)) {
        Tensor<Scalar>& gb = buf(2);
        const std::size_t plane = d.out_h * d.out_w;
        for (std::size_t b = 0; b < d.n; ++b)
          for (std::size_t c = 0; c < d.out_channels; ++c) {
            const Scalar* p = g.data() + (b * d.out_channels + c) * plane;
            Scalar s{0};
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            gb[c] += s;
          }
      }
      break;
    }
    case OpKind::conv2d_transpose: {
      const auto d = conv_dims(n.shape, in(1).shape(), in(0).shape(), n.geometry);
      if (wants(0)) {
        Tensor<Scalar> dx(in(0).shape());
        kernels::conv_apply(d, g.data(), in(1).data(), dx.data());
        Tensor<Scalar>& gx = buf(0);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
      }
      if (wants(1)) kernels::conv_weight_grad(d, g.data(), in(0).data(), buf(1).data());
      if (wants(2)) {
        Tensor<Scalar>& gb = buf(2);
        const std::size_t plane = d.in_h * d.in_w;
        for (std::size_t b = 0; b < d.n; ++b)
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            const Scalar* p = g.data() + (b * d.in_channels + c) * plane;
            Scalar s{0};
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            gb[c] += s;
          }
      }
      break;
    }
    case OpKind::relu: {
      if (!wants(0)) break;
      const Tensor<Scalar> dx = relu_backward(in(0), g, rule);
      Tensor<Scalar>& gx = buf(0);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
      break;
    }
    case OpKind::batchnorm: {
      const Tensor<Scalar>& x = in(0);
      const Tensor<Scalar>& gamma = in(1);
      const auto [bn, c, sp] = channel_layout(x.shape());
      const double count = static_cast<double>(bn * sp);
      for (std::size_t k = 0; k < c; ++k) {
        const Scalar inv = Scalar{1} / std::sqrt(n.saved_var[k] + static_cast<Scalar>(n.eps));
        const Scalar m = n.saved_mean[k];
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t b = 0; b < bn; ++b) {
          const Scalar* gp = g.data() + (b * c + k) * sp;
          const Scalar* xp = x.data() + (b * c + k) * sp;
          for (std::size_t i = 0; i < sp; ++i) {
            sum_g += gp[i];
            sum_gx += static_cast<double>(gp[i]) * (xp[i] - m) * inv;
          }
        }
        if (wants(1)) buf(1)[k] += static_cast<Scalar>(sum_gx);
        if (wants(2)) buf(2)[k] += static_cast<Scalar>(sum_g);
        if (!wants(0)) continue;
        Tensor<Scalar>& gx = buf(0);
        const Scalar scale = gamma[k] * inv;
        for (std::size_t b = 0; b < bn; ++b) {
          const Scalar* gp = g.data() + (b * c + k) * sp;
          const Scalar* xp = x.data() + (b * c + k) * sp;
          Scalar* dp = gx.data() + (b * c + k) * sp;
          if (n.bn_mode == BatchNormMode::infer) {
            for (std::size_t i = 0; i < sp; ++i) dp[i] += scale * gp[i];
          } else {
            const Scalar mg = static_cast<Scalar>(sum_g / count);
            const Scalar mgx = static_cast<Scalar>(sum_gx / count);
            for (std::size_t i = 0; i < sp; ++i) {
              const Scalar xhat = (xp[i] - m) * inv;
              dp[i] += scale * (gp[i] - mg - xhat * mgx);
            }
          }
        }
      }
      break;
    }
    case OpKind::add:
      for (std::size_t p = 0; p < 2; ++p) {
        if (!wants(p)) continue;
        Tensor<Scalar>& gp = buf(p);
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
      }
      break;
    case OpKind::reshape: {
      if (!wants(0)) break;
      Tensor<Scalar>& gx = buf(0);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
      break;
    }
    case OpKind::dot: {
      const Scalar s = g[0];
      if (wants(0)) {
        Tensor<Scalar>& ga = buf(0);
        const Tensor<Scalar>& b = in(1);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * b[i];
      }
      if (wants(1)) {
        Tensor<Scalar>& gb = buf(1);
        const Tensor<Scalar>& a = in(0);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += s * a[i];
      }
      break;
    }
    case OpKind::sigmoid: {
      if (!wants(0)) break;
      Tensor<Scalar>& gx = buf(0);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * n.value[i] * (Scalar{1} - n.value[i]);
      break;
    }
    case OpKind::upsample_nearest: {
      if (!wants(0)) break;
      Tensor<Scalar>& gx = buf(0);
      const std::size_t f = n.factor, h = gx.dim(2), w = gx.dim(3), planes = gx.dim(0) * gx.dim(1);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h * f; ++i)
          for (std::size_t j = 0; j < w * f; ++j) gx[(p * h + i / f) * w + j / f] += g[(p * h * f + i) * w * f + j];
      break;
    }
    case OpKind::reparameterize: {
      const Tensor<Scalar>& lv = in(1);
      const Tensor<Scalar>& eps = in(2);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Scalar sigma = std::exp(lv[i] / Scalar{2});
        if (wants(0)) buf(0)[i] += g[i];
        if (wants(1)) buf(1)[i] += g[i] * eps[i] * sigma / Scalar{2};
        if (wants(2)) buf(2)[i] += g[i] * sigma;
      }
      break;
    }
    case OpKind::mse_loss: {
      const Tensor<Scalar>& p = in(0);
      const Tensor<Scalar>& t = in(1);
      const Scalar scale = Scalar{2} * g[0] / static_cast<Scalar>(p.dim(0));
      for (std::size_t i = 0; i < p.size(); ++i) {
        const Scalar d = scale * (p[i] - t[i]);
        if (wants(0)) buf(0)[i] += d;
        if (wants(1)) buf(1)[i] -= d;
      }
      break;
    }
    case OpKind::gaussian_kl: {
      const Tensor<Scalar>& mu = in(0);
      const Tensor<Scalar>& lv = in(1);
      const Scalar scale = g[0] / static_cast<Scalar>(mu.dim(0));
      for (std::size_t i = 0; i < mu.size(); ++i) {
        if (wants(0)) buf(0)[i] += scale * mu[i];
        if (wants(1)) buf(1)[i] += scale * (std::exp(lv[i]) - Scalar{1}) / Scalar{2};
      }
      break;
    }
  }
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::value(NodeId id) const {
  const Node& n = node(id);
  if (!n.evaluated) throw UsageError("value requested for node that has not been evaluated");
  return val(n);
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::grad(NodeId id) const {
  const Node& n = node(id);
  if (n.grad.empty()) throw UsageError("no gradient stored for node " + std::to_string(id.index));
  return n.grad;
}

template <typename Scalar>
bool Graph<Scalar>::has_grad(NodeId id) const {
  return !node(id).grad.empty();
}

template <typename Scalar>
bool Graph<Scalar>::evaluated(NodeId id) const {
  return node(id).evaluated;
}

template <typename Scalar>
bool Graph<Scalar>::requires_grad(NodeId id) const {
  return node(id).requires_grad;
}

template <typename Scalar>
const Shape& Graph<Scalar>::shape(NodeId id) const {
  return node(id).shape;
}

template <typename Scalar>
OpKind Graph<Scalar>::kind(NodeId id) const {
  return node(id).kind;
}

template <typename Scalar>
const std::vector<NodeId>& Graph<Scalar>::parents(NodeId id) const {
  return node(id).parents;
}

template <typename Scalar>
std::vector<NodeId> Graph<Scalar>::nodes_of_kind(OpKind k) const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == k) out.push_back(NodeId{i});
  return out;
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::batch_mean(NodeId bn) const {
  const Node& n = node(bn);
  if (n.kind != OpKind::batchnorm || !n.evaluated) throw UsageError("batch_mean: not an evaluated batchnorm node");
  return n.saved_mean;
}

template <typename Scalar>
const Tensor<Scalar>& Graph<Scalar>::batch_variance(NodeId bn) const {
  const Node& n = node(bn);
  if (n.kind != OpKind::batchnorm || !n.evaluated)
    throw UsageError("batch_variance: not an evaluated batchnorm node");
  return n.saved_var;
}

template class Graph<float>;
template class Graph<double>;

}  // namespace csmap
