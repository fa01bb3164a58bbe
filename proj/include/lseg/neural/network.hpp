#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "../error.hpp"
#include "../rng.hpp"
#include "layers.hpp"
#include "params.hpp"
#include "tensor.hpp"

namespace lseg::nn {

enum class Architecture : std::uint8_t { DPN = 0, UNet = 1 };

inline const char* to_string(Architecture a) { return a == Architecture::DPN ? "dpn" : "unet"; }

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "dpn" || s == "DPN") return Architecture::DPN;
  if (s == "unet" || s == "UNet" || s == "u-net") return Architecture::UNet;
  throw ArgumentError("unknown architecture '" + s + "'");
}

struct NetworkSpec {
  Architecture kind = Architecture::DPN;
  int in_channels = 3;
  int out_classes = 3;
  int dpn_filters = 32;
  int unet_base_filters = 16;
  int levels = 4;  // resolutions 1, 1/2, ..., 1/2^(levels-1)
  double dropout_rate = 0.25;

  void validate() const {
    if (in_channels < 1) throw ArgumentError("network: in_channels must be >= 1");
    if (out_classes < 2) throw ArgumentError("network: out_classes must be >= 2");
    if (dpn_filters < 1 || unet_base_filters < 1) throw ArgumentError("network: filters must be >= 1");
    if (levels < 1 || levels > 6) throw ArgumentError("network: levels must be in [1, 6]");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ArgumentError("network: dropout rate must be in [0, 1)");
  }

  /// Spatial dims must be multiples of this.
  int spatial_divisor() const { return 1 << (levels - 1); }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class Mode { train, eval };

/// Layer graph over a ParamStore. Nodes are stored in topological order;
/// forward caches every activation so backward can run in reverse.
template <typename T>
class Network {
 public:
  enum class Op { input, conv, batchnorm, relu, dropout, down, up, concat, softmax };

  struct Node {
    Op op = Op::input;
    std::vector<int> in;
    int channels = 0;
    int kernel = 0;
    int factor = 0;
    std::size_t w = 0, b = 0;    // param offsets (conv: weight/bias, bn: gamma/beta)
    std::size_t rm = 0, rv = 0;  // buffer offsets (bn running mean/var)
  };

  explicit Network(const NetworkSpec& spec, std::uint64_t init_seed = 0) : spec_(spec) {
    spec_.validate();
    input_ = add_node(Node{Op::input, {}, spec_.in_channels});
    if (spec_.kind == Architecture::DPN) build_dpn();
    else build_unet();
    initialize(init_seed);
  }

  const NetworkSpec& spec() const { return spec_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::size_t parameter_count() const { return store_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// He-normal conv weights, zero biases, unit BN scale.
  void initialize(std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x1417));
    for (const auto& n : nodes_) {
      if (n.op == Op::conv) {
        const int cin = nodes_[n.in[0]].channels;
        const std::size_t count = static_cast<std::size_t>(n.channels) * cin * n.kernel * n.kernel * n.kernel;
        const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * n.kernel * n.kernel * n.kernel));
        for (std::size_t i = 0; i < count; ++i) store_.values[n.w + i] = static_cast<T>(rng.normal(0.0, sd));
        for (int i = 0; i < n.channels; ++i) store_.values[n.b + i] = T{0};
      } else if (n.op == Op::batchnorm) {
        for (int i = 0; i < n.channels; ++i) {
          store_.values[n.w + i] = T{1};
          store_.values[n.b + i] = T{0};
          store_.buffers[n.rm + i] = T{0};
          store_.buffers[n.rv + i] = T{1};
        }
      }
    }
    store_.zero_grad();
    store_.reset_optimizer_state();
  }

  void set_batchnorm_config(const BatchNormConfig& c) { bn_cfg_ = c; }

  /// Returns per-voxel class probabilities. `seed` drives the dropout masks
  /// in training mode; identical (input, mode, seed, params) give identical
  /// outputs.
  const FeatureMap<T>& forward(const FeatureMap<T>& x, Mode mode, std::uint64_t seed = 0) {
    if (x.channels != spec_.in_channels) throw ArgumentError("network: input channel count mismatch");
    const int div = spec_.spatial_divisor();
    for (int a : x.dims)
      if (a % div != 0) throw GeometryError("network: spatial dims must be divisible by " + std::to_string(div));
    training_ = mode == Mode::train;
    values_.assign(nodes_.size(), FeatureMap<T>{});
    bn_cache_.assign(nodes_.size(), BatchNormCache<T>{});
    masks_.assign(nodes_.size(), {});
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      auto in0 = [&]() -> const FeatureMap<T>& { return values_[n.in[0]]; };
      switch (n.op) {
        case Op::input: values_[i] = x; break;
        case Op::conv:
          values_[i] = conv_forward(in0(), store_.values.data() + n.w, store_.values.data() + n.b, n.channels, n.kernel);
          break;
        case Op::batchnorm:
          values_[i] = batchnorm_forward(in0(), store_.values.data() + n.w, store_.values.data() + n.b,
                                         store_.buffers.data() + n.rm, store_.buffers.data() + n.rv, training_, bn_cfg_,
                                         &bn_cache_[i]);
          break;
        case Op::relu: values_[i] = relu_forward(in0()); break;
        case Op::dropout:
          values_[i] = dropout_forward(in0(), spec_.dropout_rate, training_, mix_seed(seed, i), &masks_[i]);
          break;
        case Op::down: values_[i] = downsample_forward(in0(), n.factor); break;
        case Op::up: values_[i] = upsample_forward(in0(), n.factor); break;
        case Op::concat: {
          std::vector<const FeatureMap<T>*> parts;
          for (int j : n.in) parts.push_back(&values_[j]);
          values_[i] = concat_forward(parts);
          break;
        }
        case Op::softmax: values_[i] = softmax_forward(in0()); break;
      }
    }
    return values_.back();
  }

  /// Accumulates parameter gradients for d(loss)/d(output) of the last
  /// forward pass. Returns d(loss)/d(input), or an empty map when
  /// `input_grad` is false.
  FeatureMap<T> backward(const FeatureMap<T>& dout, bool input_grad = true) {
    if (values_.empty() || !dout.same_shape(values_.back())) throw GeometryError("network: backward before forward");
    // A node needs a gradient if it holds parameters or feeds from one that
    // does (or from the input, when the input gradient is requested).
    std::vector<char> req(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      req[i] = n.op == Op::input ? input_grad : (n.op == Op::conv || n.op == Op::batchnorm);
      for (int j : n.in) req[i] = req[i] || req[j];
    }
    std::vector<FeatureMap<T>> grads(nodes_.size());
    grads.back() = dout;
    FeatureMap<T> scratch;
    for (std::size_t ii = nodes_.size(); ii-- > 0;) {
      const Node& n = nodes_[ii];
      if (grads[ii].data.empty()) continue;
      bool any_src = false;
      for (int j : n.in) any_src = any_src || req[j];
      if (n.op != Op::conv && n.op != Op::batchnorm && !any_src) {
        if (ii != 0) grads[ii] = FeatureMap<T>{};
        continue;
      }
      auto dst = [&](int j) -> FeatureMap<T>& {
        if (!req[j]) {
          scratch = FeatureMap<T>(nodes_[j].channels, values_dims(j), T{0});
          return scratch;
        }
        if (grads[j].data.empty()) grads[j] = FeatureMap<T>(nodes_[j].channels, values_dims(j), T{0});
        return grads[j];
      };
      const FeatureMap<T>& g = grads[ii];
      switch (n.op) {
        case Op::input: break;
        case Op::conv:
          conv_backward(values_[n.in[0]], store_.values.data() + n.w, n.kernel, g,
                        req[n.in[0]] ? &dst(n.in[0]) : nullptr, store_.grads.data() + n.w,
                        store_.grads.data() + n.b);
          break;
        case Op::batchnorm:
          batchnorm_backward(bn_cache_[ii], store_.values.data() + n.w, training_, g, dst(n.in[0]),
                             store_.grads.data() + n.w, store_.grads.data() + n.b);
          break;
        case Op::relu: relu_backward(values_[n.in[0]], g, dst(n.in[0])); break;
        case Op::dropout: dropout_backward(masks_[ii], spec_.dropout_rate, g, dst(n.in[0])); break;
        case Op::down: downsample_backward(g, n.factor, dst(n.in[0])); break;
        case Op::up: upsample_backward(g, n.factor, dst(n.in[0])); break;
        case Op::concat: {
          std::vector<FeatureMap<T>> skipped;
          skipped.reserve(n.in.size());
          std::vector<FeatureMap<T>*> parts;
          for (int j : n.in) {
            if (req[j]) {
              parts.push_back(&dst(j));
            } else {
              skipped.emplace_back(nodes_[j].channels, values_dims(j), T{0});
              parts.push_back(&skipped.back());
            }
          }
          concat_backward(g, parts);
          break;
        }
        case Op::softmax: softmax_backward(values_[ii], g, dst(n.in[0])); break;
      }
      if (ii != 0) grads[ii] = FeatureMap<T>{};
    }
    if (!input_grad) return {};
    return grads[0].data.empty() ? FeatureMap<T>(spec_.in_channels, values_dims(0), T{0}) : grads[0];
  }

 private:
  int add_node(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  int conv(int src, int cout, int k, const std::string& name) {
    Node n{Op::conv, {src}, cout, k};
    const int cin = nodes_[src].channels;
    n.w = store_.add(name + ".w", static_cast<std::size_t>(cout) * cin * k * k * k);
    n.b = store_.add(name + ".b", static_cast<std::size_t>(cout));
    return add_node(n);
  }

  int batchnorm(int src, const std::string& name) {
    Node n{Op::batchnorm, {src}, nodes_[src].channels};
    n.w = store_.add(name + ".gamma", static_cast<std::size_t>(n.channels));
    n.b = store_.add(name + ".beta", static_cast<std::size_t>(n.channels));
    n.rm = store_.add_buffer(static_cast<std::size_t>(n.channels), T{0});
    n.rv = store_.add_buffer(static_cast<std::size_t>(n.channels), T{1});
    return add_node(n);
  }

  int unary(Op op, int src, int factor = 0) {
    Node n{op, {src}, nodes_[src].channels};
    n.factor = factor;
    return add_node(n);
  }

  int concat(const std::vector<int>& srcs) {
    Node n{Op::concat, srcs, 0};
    for (int s : srcs) n.channels += nodes_[s].channels;
    return add_node(n);
  }

  /// conv 3^3 -> ReLU -> BN
  int block(int src, int cout, const std::string& name) {
    int h = conv(src, cout, 3, name + ".conv");
    h = unary(Op::relu, h);
    return batchnorm(h, name + ".bn");
  }

  void head(int src) {
    const int logits = conv(src, spec_.out_classes, 1, "head");
    unary(Op::softmax, logits);
  }

  // Coarse-to-fine pyramid: the coarsest block-averaged input goes through
  // three conv blocks; each finer level concatenates its own block-averaged
  // input with the upsampled coarser features and repeats the three blocks.
  // Dropout closes every level below full resolution.
  void build_dpn() {
    const int f = spec_.dpn_filters;
    int prev = -1;
    for (int level = spec_.levels - 1; level >= 0; --level) {
      const int factor = 1 << level;
      int h = factor > 1 ? unary(Op::down, input_, factor) : input_;
      if (prev >= 0) h = concat({h, unary(Op::up, prev, 2)});
      const std::string name = "dpn.l" + std::to_string(factor);
      for (int b = 0; b < 3; ++b) h = block(h, f, name + ".b" + std::to_string(b));
      if (factor > 1) h = unary(Op::dropout, h);
      prev = h;
    }
    head(prev);
  }

  // Encoder-decoder with two conv blocks per level, filters doubling per
  // level, skip concatenations and dropout at every sub-full resolution on
  // the way up.
  void build_unet() {
    const int base = spec_.unet_base_filters;
    std::vector<int> skips;
    int h = input_;
    for (int level = 0; level < spec_.levels; ++level) {
      if (level > 0) h = unary(Op::down, h, 2);
      const std::string name = "unet.enc" + std::to_string(level);
      h = block(h, base << level, name + ".b0");
      h = block(h, base << level, name + ".b1");
      if (level == spec_.levels - 1 && level > 0) h = unary(Op::dropout, h);
      skips.push_back(h);
    }
    for (int level = spec_.levels - 2; level >= 0; --level) {
      h = concat({skips[level], unary(Op::up, h, 2)});
      const std::string name = "unet.dec" + std::to_string(level);
      h = block(h, base << level, name + ".b0");
      h = block(h, base << level, name + ".b1");
      if (level > 0) h = unary(Op::dropout, h);
    }
    head(h);
  }

  Index3 values_dims(int j) const { return values_[j].dims; }

  NetworkSpec spec_;
  ParamStore<T> store_;
  std::vector<Node> nodes_;
  int input_ = 0;
  bool training_ = false;
  BatchNormConfig bn_cfg_{};
  std::vector<FeatureMap<T>> values_;
  std::vector<BatchNormCache<T>> bn_cache_;
  std::vector<std::vector<std::uint8_t>> masks_;
};

/// Trainable parameter count without allocating activations.
inline std::size_t parameter_count(const NetworkSpec& spec) { return Network<float>(spec).parameter_count(); }

}  // namespace lseg::nn
