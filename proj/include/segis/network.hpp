#pragma once

// Segmentation stream F_theta and registration stream G_psi.
//
// Both streams share one encoder-decoder body: at each of `depth` scales two
// conv units (3^3 conv, instance norm, leaky ReLU) followed by 2x max pooling,
// a two-unit bottleneck, and a mirrored decoder that upsamples, concatenates
// the same-scale skip features and applies two conv units. Heads:
//   segmentation: one sub-branch per structure, a conv unit followed by a
//                 1^3 conv with sigmoid (multi-label, channels independent)
//   registration: one 3^3 conv with three linear kernels (u_x, u_y, u_z)

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "rng.hpp"
#include "volume.hpp"
#include "warp.hpp"

namespace segis {

enum class StreamKind { segmentation, registration };

inline std::string to_string(StreamKind k) {
  return k == StreamKind::segmentation ? "segmentation" : "registration";
}

struct StreamConfig {
  StreamKind kind = StreamKind::segmentation;
  int in_channels = 6;
  int depth = 2;
  int base_width = 8;
  int structures = 3;  // segmentation heads; ignored for registration

  int width_at(int level) const { return base_width << level; }
  int body_layers() const { return 4 * depth + 2; }
  int divisor() const { return 1 << depth; }

  friend bool operator==(const StreamConfig&, const StreamConfig&) = default;
};

/// Forward activations needed by backward().
template <typename T>
struct StreamTape {
  struct Unit {
    Volume<T> input;
    NormCache<T> norm;
    Volume<T> output;
  };
  std::uint64_t version = 0;
  std::vector<Unit> units;  // one per layer, parameter order
  std::vector<std::vector<std::size_t>> pool_argmax;
  std::vector<Dims> pool_input_dims;
  std::vector<int> skip_channels;
  Volume<T> output;
};

template <typename T>
class Stream {
 public:
  using Params = std::vector<ConvLayerParams<T>>;

  Stream() = default;

  /// Glorot-initialized stream; deterministic in `seed`.
  Stream(const StreamConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.depth < 0 || cfg.base_width <= 0 || cfg.in_channels <= 0) throw DataError("invalid stream config");
    if (cfg.kind == StreamKind::segmentation && cfg.structures <= 0) throw DataError("segmentation needs K >= 1");
    int layer = 0;
    auto add = [&](int cin, int cout, int k, bool norm, Activation act) {
      params_.push_back(glorot_init<T>(cin, cout, k, norm, act, derive_seed(seed, static_cast<std::uint64_t>(layer++))));
    };
    int ch = cfg.in_channels;
    for (int l = 0; l < cfg.depth; ++l) {
      add(ch, cfg.width_at(l), 3, true, Activation::leaky_relu);
      add(cfg.width_at(l), cfg.width_at(l), 3, true, Activation::leaky_relu);
      ch = cfg.width_at(l);
    }
    add(ch, cfg.width_at(cfg.depth), 3, true, Activation::leaky_relu);
    add(cfg.width_at(cfg.depth), cfg.width_at(cfg.depth), 3, true, Activation::leaky_relu);
    ch = cfg.width_at(cfg.depth);
    for (int l = cfg.depth - 1; l >= 0; --l) {
      add(ch + cfg.width_at(l), cfg.width_at(l), 3, true, Activation::leaky_relu);
      add(cfg.width_at(l), cfg.width_at(l), 3, true, Activation::leaky_relu);
      ch = cfg.width_at(l);
    }
    if (cfg.kind == StreamKind::segmentation) {
      for (int k = 0; k < cfg.structures; ++k) {
        add(ch, ch, 3, true, Activation::leaky_relu);
        add(ch, 1, 1, false, Activation::sigmoid);
      }
    } else {
      add(ch, 3, 3, false, Activation::linear);
    }
  }

  Stream(const StreamConfig& cfg, Params params) : cfg_(cfg), params_(std::move(params)) {
    Stream shape(cfg, 0);
    if (shape.params_.size() != params_.size()) throw DataError("parameter list does not match stream config");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto &a = shape.params_[i], &b = params_[i];
      if (a.in_channels != b.in_channels || a.out_channels != b.out_channels || a.ksize != b.ksize ||
          a.has_norm != b.has_norm || a.activation != b.activation || a.kernels.size() != b.kernels.size() ||
          a.bias.size() != b.bias.size() || a.norm_scale.size() != b.norm_scale.size() ||
          a.norm_shift.size() != b.norm_shift.size())
        throw DataError("layer " + std::to_string(i) + " does not match stream config");
    }
  }

  const StreamConfig& config() const noexcept { return cfg_; }
  const Params& params() const noexcept { return params_; }
  /// Mutable access invalidates outstanding tapes.
  Params& mutable_params() noexcept {
    ++version_;
    return params_;
  }
  std::uint64_t version() const noexcept { return version_; }

  Params zero_grads() const {
    Params g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(p.zeros_like());
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.parameter_count();
    return n;
  }

  /// Runs the stream; fills `tape` when given (required for backward).
  Volume<T> forward(const Volume<T>& input, StreamTape<T>* tape = nullptr) const {
    if (input.channels() != cfg_.in_channels)
      throw DataError("stream expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                      std::to_string(input.channels()));
    const int div = cfg_.divisor();
    if (input.nx() % div || input.ny() % div || input.nz() % div)
      throw DataError("input dims " + input.dims().str() + " not divisible by 2^depth");
    if (tape) {
      *tape = StreamTape<T>{};
      tape->version = version_;
      tape->units.resize(params_.size());
    }
    std::size_t li = 0;
    std::vector<Volume<T>> skips;
    Volume<T> x = input;
    for (int l = 0; l < cfg_.depth; ++l) {
      x = unit(li++, x, tape);
      x = unit(li++, x, tape);
      skips.push_back(x);
      if (tape) {
        tape->pool_input_dims.push_back(x.dims());
        tape->pool_argmax.emplace_back();
        x = maxpool2(x, &tape->pool_argmax.back());
      } else {
        x = maxpool2(x);
      }
    }
    x = unit(li++, x, tape);
    x = unit(li++, x, tape);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      x = concat_channels(upsample2(x), skips[l]);
      if (tape) tape->skip_channels.push_back(skips[l].channels());
      x = unit(li++, x, tape);
      x = unit(li++, x, tape);
    }
    Volume<T> out;
    if (cfg_.kind == StreamKind::segmentation) {
      std::vector<T> data;
      data.reserve(x.spatial_size() * cfg_.structures);
      for (int k = 0; k < cfg_.structures; ++k) {
        Volume<T> h = unit(li++, x, tape);
        h = unit(li++, h, tape);
        data.insert(data.end(), h.voxels().begin(), h.voxels().end());
      }
      out = Volume<T>(x.dims().with_channels(cfg_.structures), std::move(data), input.spacing());
    } else {
      out = unit(li++, x, tape);
    }
    if (tape) tape->output = out;
    return out;
  }

  /// Reverse pass. Accumulates into `grads` (shaped like params()) and
  /// returns the gradient w.r.t. the stream input when requested.
  Volume<T> backward(const StreamTape<T>& tape, const Volume<T>& grad_output, Params& grads,
                     bool want_input_grad = false) const {
    if (tape.version != version_ || tape.units.size() != params_.size())
      throw std::logic_error("stale forward cache: parameters changed since forward()");
    if (grad_output.dims() != tape.output.dims()) throw DataError("backward: gradient dims do not match output");
    std::size_t li = params_.size();
    Volume<T> gx;
    if (cfg_.kind == StreamKind::segmentation) {
      const std::size_t body_end = static_cast<std::size_t>(cfg_.body_layers());
      const Dims fd = tape.units[body_end].input.dims();
      gx = Volume<T>(fd, T(0), grad_output.spacing());
      for (int k = cfg_.structures - 1; k >= 0; --k) {
        const std::size_t head = body_end + 2 * k;
        Volume<T> gk = grad_output.channels_slice(k, 1);
        gk = unit_backward(head + 1, tape, gk, grads, true);
        gk = unit_backward(head, tape, gk, grads, true);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gk[i];
      }
      li = body_end;
    } else {
      gx = unit_backward(--li, tape, grad_output, grads, true);
    }
    std::vector<Volume<T>> skip_grads(cfg_.depth);
    for (int d = 0; d < cfg_.depth; ++d) {
      const int l = d;  // decoder runs l = 0 .. depth-1 in reverse order
      gx = unit_backward(--li, tape, gx, grads, true);
      gx = unit_backward(--li, tape, gx, grads, true);
      const int skip_c = tape.skip_channels[cfg_.depth - 1 - l];
      const int up_c = gx.channels() - skip_c;
      skip_grads[l] = gx.channels_slice(up_c, skip_c);
      Volume<T> gup = gx.channels_slice(0, up_c);
      const Dims low{gup.nx() / 2, gup.ny() / 2, gup.nz() / 2, up_c};
      gx = upsample2_backward(low, gup);
    }
    gx = unit_backward(--li, tape, gx, grads, true);
    gx = unit_backward(--li, tape, gx, grads, true);
    for (int l = cfg_.depth - 1; l >= 0; --l) {
      gx = maxpool2_backward(tape.pool_input_dims[l], tape.pool_argmax[l], gx);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += skip_grads[l][i];
      gx = unit_backward(--li, tape, gx, grads, true);
      gx = unit_backward(--li, tape, gx, grads, l > 0 || want_input_grad);
    }
    return gx;
  }

 private:
  Volume<T> unit(std::size_t li, const Volume<T>& x, StreamTape<T>* tape) const {
    const auto& p = params_[li];
    Volume<T> y = conv3(x, p);
    if (p.has_norm) {
      if (tape) {
        y = instance_norm<T>(y, p.norm_scale, p.norm_shift, &tape->units[li].norm);
      } else {
        y = instance_norm<T>(y, p.norm_scale, p.norm_shift);
      }
    }
    apply_activation(y, p.activation);
    if (tape) {
      tape->units[li].input = x;
      tape->units[li].output = y;
    }
    return y;
  }

  Volume<T> unit_backward(std::size_t li, const StreamTape<T>& tape, const Volume<T>& grad_out, Params& grads,
                          bool want_input_grad) const {
    const auto& p = params_[li];
    const auto& u = tape.units[li];
    Volume<T> g = grad_out;
    activation_backward_inplace(u.output, p.activation, g);
    if (p.has_norm)
      g = instance_norm_backward<T>(u.norm, p.norm_scale, g, grads[li].norm_scale, grads[li].norm_shift);
    return conv3_backward(u.input, p, g, grads[li], want_input_grad);
  }

  StreamConfig cfg_;
  Params params_;
  std::uint64_t version_ = 0;
};

/// Both streams: theta (segmentation) and psi (registration).
template <typename T>
struct NetworkParams {
  Stream<T> theta;
  Stream<T> psi;
};

struct NetworkConfig {
  int image_channels = 6;
  int structures = 3;
  int depth = 2;
  int base_width = 8;

  StreamConfig seg() const { return {StreamKind::segmentation, image_channels, depth, base_width, structures}; }
  StreamConfig reg() const { return {StreamKind::registration, 2, depth, base_width, 0}; }
};

/// Seeds for theta and psi are derived independently from one run seed, so
/// every training mode starts from the same initialization.
template <typename T>
NetworkParams<T> init_network(const NetworkConfig& cfg, std::uint64_t seed) {
  return {Stream<T>(cfg.seg(), derive_seed(seed, "theta")), Stream<T>(cfg.reg(), derive_seed(seed, "psi"))};
}

/// F_theta(image): K-channel probabilistic map in (0, 1).
template <typename T>
SegmentationSet<T> seg_forward(const Stream<T>& theta, const Volume<T>& image, StreamTape<T>* tape = nullptr) {
  if (theta.config().kind != StreamKind::segmentation) throw DataError("seg_forward needs a segmentation stream");
  return SegmentationSet<T>(theta.forward(image, tape), SegKind::probabilistic);
}

/// G_psi(target, affine-aligned source): displacement in target voxels.
template <typename T>
DisplacementField<T> reg_forward(const Stream<T>& psi, const Volume<T>& target_img, const Volume<T>& source_aligned,
                      StreamTape<T>* tape = nullptr) {
  if (psi.config().kind != StreamKind::registration) throw DataError("reg_forward needs a registration stream");
  if (target_img.channels() != 1 || source_aligned.channels() != 1)
    throw DataError("registration inputs must be single-channel");
  if (target_img.dims() != source_aligned.dims())
    throw DataError("registration inputs differ in dims: " + target_img.dims().str() + " vs " +
                    source_aligned.dims().str());
  return DisplacementField<T>(psi.forward(concat_channels(target_img, source_aligned), tape));
}

}  // namespace segis
