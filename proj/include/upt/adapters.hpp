#pragma once

#include <cmath>
#include <string>
#include <string_view>

#include "upt/tensor.hpp"

namespace upt {

// Bottleneck adapter f(x W_down) W_up with a learnable output scale s. The
// scale is applied by the placement, not by adapter_forward.
struct AdapterBlock {
  ParamTensor down;   // [d x m]
  ParamTensor up;     // [m x d]
  ParamTensor scale;  // s, shape [1]
  Activation activation = Activation::relu;

  std::size_t bottleneck() const { return down.value.cols(); }

  void validate(std::size_t d) const {
    if (bottleneck() >= d) {
      throw ConfigError("adapter bottleneck " + std::to_string(bottleneck()) +
                        " must be below width " + std::to_string(d));
    }
    if (down.shape() != Shape{d, bottleneck()} || up.shape() != Shape{bottleneck(), d}) {
      throw ShapeError("adapter factors " + shape_str(down.shape()) + "/" +
                       shape_str(up.shape()) + " do not fit width " + std::to_string(d));
    }
  }

  static AdapterBlock init(std::size_t d, std::size_t bottleneck, Rng& rng) {
    if (bottleneck >= d) {
      throw ConfigError("adapter bottleneck " + std::to_string(bottleneck) +
                        " must be below width " + std::to_string(d));
    }
    return {ParamTensor(gaussian({d, bottleneck}, 1.0 / std::sqrt(static_cast<double>(d)), rng)),
            ParamTensor(Tensor(bottleneck, d)), ParamTensor(Tensor::scalar(1.0))};
  }
};

struct LayerNormParams {
  ParamTensor gain;  // [d]
  ParamTensor bias;  // [d]
  double eps = kLayerNormEps;

  static LayerNormParams identity(std::size_t d) {
    return {ParamTensor(Tensor(Shape{d}, 1.0)), ParamTensor(Tensor(Shape{d}, 0.0))};
  }
};

enum class Placement {
  parallel_ln,          // L-Adapter: LN(x) + s * Adapter(x)
  sequential_ln,        // LN(x) then adapter in series
  parallel_sublayer,    // adapter spanning LN and the sublayer
  sequential_sublayer,  // adapter behind the sublayer output
  ln_tuning,            // no adapter, LN gain/bias trainable
};

inline std::string_view placement_name(Placement p) {
  switch (p) {
    case Placement::parallel_ln: return "parallel_ln";
    case Placement::sequential_ln: return "sequential_ln";
    case Placement::parallel_sublayer: return "parallel_sublayer";
    case Placement::sequential_sublayer: return "sequential_sublayer";
    case Placement::ln_tuning: return "ln_tuning";
  }
  return "?";
}

inline Placement parse_placement(std::string_view name) {
  for (Placement p : {Placement::parallel_ln, Placement::sequential_ln, Placement::parallel_sublayer,
                      Placement::sequential_sublayer, Placement::ln_tuning}) {
    if (placement_name(p) == name) return p;
  }
  throw ConfigError("unknown adapter placement '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------

struct AdapterCache {
  Tensor x;
  Tensor pre;     // x * down
  Tensor hidden;  // f(pre)
};

inline Tensor adapter_forward(const Tensor& x, const AdapterBlock& a, AdapterCache* cache = nullptr) {
  a.validate(x.cols());
  Tensor pre = matmul(x, a.down.value);
  Tensor hidden = activation(a.activation, pre);
  Tensor out = matmul(hidden, a.up.value);
  if (cache) *cache = {x, std::move(pre), std::move(hidden)};
  return out;
}

inline Tensor adapter_backward(const Tensor& grad_out, AdapterBlock& a, const AdapterCache& cache) {
  a.up.accumulate(matmul_tn(cache.hidden, grad_out));
  const Tensor d_hidden = matmul_nt(grad_out, a.up.value);
  const Tensor d_pre = activation_backward(a.activation, cache.pre, d_hidden);
  a.down.accumulate(matmul_tn(cache.x, d_pre));
  return matmul_nt(d_pre, a.down.value);
}

// LayerNorm(x) + s * Adapter(x); the adapter reads the pre-normalization input.
inline Tensor l_adapter(const Tensor& x, const LayerNormParams& ln, const AdapterBlock& a) {
  Tensor out = layer_norm(x, ln.gain.value, ln.bias.value, ln.eps);
  out.axpy(a.scale.value.item(), adapter_forward(x, a));
  return out;
}

// ---------------------------------------------------------------------------
// Insertion sites. A site wraps one residual sublayer (MHA or MLP) together
// with its layernorm; the result includes the residual connection.

struct SiteCache {
  Tensor x;
  LayerNormCache ln;
  AdapterCache adapter;
  Tensor adapter_core;  // adapter output before the scale
};

namespace detail {

// adapter == nullptr selects the plain pre-LN residual path.
template <class Forward>
Tensor site_forward(const Tensor& x, Forward&& sublayer, const LayerNormParams& ln,
                    const AdapterBlock* adapter, Placement placement, SiteCache* cache) {
  SiteCache local;
  SiteCache& c = cache ? *cache : local;
  c.x = x;
  Tensor z = layer_norm(x, ln.gain.value, ln.bias.value, ln.eps, &c.ln);
  Tensor branch;
  if (!adapter || placement == Placement::ln_tuning) {
    branch = sublayer(z);
  } else {
    const double s = adapter->scale.value.item();
    switch (placement) {
      case Placement::sequential_sublayer:
        branch = sublayer(z);
        c.adapter_core = adapter_forward(branch, *adapter, &c.adapter);
        branch.axpy(s, c.adapter_core);
        break;
      case Placement::sequential_ln:
        c.adapter_core = adapter_forward(z, *adapter, &c.adapter);
        z.axpy(s, c.adapter_core);
        branch = sublayer(z);
        break;
      case Placement::parallel_sublayer:
        branch = sublayer(z);
        c.adapter_core = adapter_forward(x, *adapter, &c.adapter);
        branch.axpy(s, c.adapter_core);
        break;
      case Placement::parallel_ln:
        c.adapter_core = adapter_forward(x, *adapter, &c.adapter);
        z.axpy(s, c.adapter_core);
        branch = sublayer(z);
        break;
      case Placement::ln_tuning:
        break;
    }
  }
  return x + branch;
}

template <class Backward>
Tensor site_backward(const Tensor& grad_out, Backward&& sublayer_backward, LayerNormParams& ln,
                     AdapterBlock* adapter, Placement placement, const SiteCache& c) {
  Tensor dx = grad_out;
  auto ln_backward = [&](const Tensor& dz) {
    LayerNormGrads g = layer_norm_backward(dz, ln.gain.value, c.ln);
    ln.gain.accumulate(g.dgain);
    ln.bias.accumulate(g.dbias);
    dx += g.dx;
  };
  // Backprop through s * adapter_core given dL/d(s * adapter_core).
  auto scaled_adapter_backward = [&](const Tensor& d_scaled) {
    const double s = adapter->scale.value.item();
    adapter->scale.accumulate(0, dot(c.adapter_core, d_scaled));
    Tensor d_core = d_scaled;
    d_core *= s;
    return adapter_backward(d_core, *adapter, c.adapter);
  };

  if (!adapter || placement == Placement::ln_tuning) {
    ln_backward(sublayer_backward(grad_out));
    return dx;
  }
  switch (placement) {
    case Placement::sequential_sublayer: {
      Tensor d_branch = grad_out;
      d_branch += scaled_adapter_backward(grad_out);
      ln_backward(sublayer_backward(d_branch));
      break;
    }
    case Placement::sequential_ln: {
      Tensor dz = sublayer_backward(grad_out);
      Tensor d_norm = dz;
      d_norm += scaled_adapter_backward(dz);
      ln_backward(d_norm);
      break;
    }
    case Placement::parallel_sublayer: {
      ln_backward(sublayer_backward(grad_out));
      dx += scaled_adapter_backward(grad_out);
      break;
    }
    case Placement::parallel_ln: {
      Tensor dz = sublayer_backward(grad_out);
      ln_backward(dz);
      dx += scaled_adapter_backward(dz);
      break;
    }
    case Placement::ln_tuning:
      break;
  }
  return dx;
}

}  // namespace detail

// Routes x through one residual sublayer under the given placement:
//   sequential_sublayer: x + (y + s A(y)),        y = sub(LN(x))
//   sequential_ln:       x + sub(z + s A(z)),     z = LN(x)
//   parallel_sublayer:   x + sub(LN(x)) + s A(x)
//   parallel_ln:         x + sub(LN(x) + s A(x))
//   ln_tuning:           x + sub(LN(x))
// `sublayer` is any callable Tensor(const Tensor&).
template <class Forward>
Tensor apply_placement(const Tensor& x, Forward&& sublayer, const LayerNormParams& ln,
                       const AdapterBlock* adapter, Placement placement,
                       SiteCache* cache = nullptr) {
  if (!adapter && placement != Placement::ln_tuning) {
    throw ConfigError(std::string("placement ") + std::string(placement_name(placement)) +
                      " needs an adapter");
  }
  return detail::site_forward(x, std::forward<Forward>(sublayer), ln,
                              placement == Placement::ln_tuning ? nullptr : adapter, placement,
                              cache);
}

// `sublayer_backward` maps dL/d(sublayer output) to dL/d(sublayer input) and
// must correspond to the most recent forward call of the sublayer.
template <class Backward>
Tensor apply_placement_backward(const Tensor& grad_out, Backward&& sublayer_backward,
                                LayerNormParams& ln, AdapterBlock* adapter, Placement placement,
                                const SiteCache& cache) {
  return detail::site_backward(grad_out, std::forward<Backward>(sublayer_backward), ln,
                               placement == Placement::ln_tuning ? nullptr : adapter, placement,
                               cache);
}

}  // namespace upt
