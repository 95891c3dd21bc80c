#pragma once

// Synthetic longitudinal phantoms with known ground truth.
//
// Each subject gets 2K tube-shaped tracts (two per label channel: a
// left/right pair along y for channels 0 and 1, an anterior/posterior pair of
// arcs for channel 2 and beyond) on top of a smooth random background
// texture. The follow-up scan is the baseline pulled through a known
// composite transform A * (x + u_gt(x)) with independent noise on each side.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "io.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "trainer.hpp"
#include "volume.hpp"
#include "warp.hpp"

namespace segis {

struct SynthConfig {
  Dims dims{24, 40, 24, 1};
  int structures = 3;
  int image_channels = 6;
  double smoothness_sigma = 4.0;  // voxels
  double max_displacement = 3.0;  // voxels
  double rotation_deg = 3.0;
  double translation_vox = 1.0;
  double scale_jitter = 0.02;
  double noise_std = 0.003;
  double tract_radius = 2.5;  // voxels, before per-subject jitter
  double texture_sigma = 2.0;  // voxels, background texture scale
  std::uint64_t seed = 7;
  int network_depth = 2;

  void validate() const {
    if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) throw DataError("synth: dims must be positive");
    if (structures < 1) throw DataError("synth: need at least one structure");
    if (image_channels < 1) throw DataError("synth: need at least one image channel");
    if (!(tract_radius > 0.5)) throw DataError("synth: tract radius must exceed 0.5 voxel");
    if (!(smoothness_sigma > 0.0)) throw DataError("synth: smoothness sigma must be > 0");
    if (!(texture_sigma > 0.0)) throw DataError("synth: texture sigma must be > 0");
    if (max_displacement < 0.0 || rotation_deg < 0.0 || translation_vox < 0.0 || scale_jitter < 0.0 || noise_std < 0.0)
      throw DataError("synth: amplitudes and jitter ranges must be non-negative");
    const int div = 1 << network_depth;
    if (dims.x % div || dims.y % div || dims.z % div)
      throw DataError("synth: dims " + dims.str() + " not divisible by 2^depth");
    if (dims.x < 16 || dims.y < 24 || dims.z < 16)
      throw DataError("synth: structures cannot fit in dims " + dims.str() + " (minimum 16x24x16)");
  }
};

/// A tract is a polyline of capsules with a radius.
struct Tract {
  std::vector<std::array<double, 3>> points;
  double radius = 2.0;
  int channel = 0;

  double distance(double x, double y, double z) const {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
      const auto& a = points[i];
      const auto& b = points[i + 1];
      const double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2];
      const double len2 = abx * abx + aby * aby + abz * abz;
      double t = len2 > 0 ? ((x - a[0]) * abx + (y - a[1]) * aby + (z - a[2]) * abz) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double dx = x - (a[0] + t * abx), dy = y - (a[1] + t * aby), dz = z - (a[2] + t * abz);
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    return std::sqrt(best);
  }

  /// Unit direction of the segment nearest to a point.
  std::array<double, 3> direction_near(double x, double y, double z) const {
    double best = std::numeric_limits<double>::infinity();
    std::array<double, 3> dir{0, 1, 0};
    for (std::size_t i = 0; i + 1 < points.size(); ++i) {
      const auto& a = points[i];
      const auto& b = points[i + 1];
      const double mx = 0.5 * (a[0] + b[0]) - x, my = 0.5 * (a[1] + b[1]) - y, mz = 0.5 * (a[2] + b[2]) - z;
      const double d = mx * mx + my * my + mz * mz;
      if (d < best) {
        best = d;
        const double lx = b[0] - a[0], ly = b[1] - a[1], lz = b[2] - a[2];
        const double len = std::sqrt(lx * lx + ly * ly + lz * lz);
        dir = {lx / len, ly / len, lz / len};
      }
    }
    return dir;
  }
};

/// Per-subject tract layout. Tracts come in pairs per channel; tract 2k is
/// the lower-coordinate member (right for x-split, posterior for y-split).
inline std::vector<Tract> make_tracts(const SynthConfig& cfg, Rng& rng) {
  const double X = cfg.dims.x, Y = cfg.dims.y, Z = cfg.dims.z;
  const double cx = 0.5 * (X - 1) + rng.uniform(-0.7, 0.7);
  const double cy = 0.5 * (Y - 1) + rng.uniform(-0.7, 0.7);
  const double cz = 0.5 * (Z - 1) + rng.uniform(-0.7, 0.7);
  std::vector<Tract> tracts;
  for (int k = 0; k < cfg.structures; ++k) {
    const double r = cfg.tract_radius + rng.uniform(-0.1, 0.3);
    const int kind = k < 2 ? k : 2;
    const int layer = k < 3 ? 0 : (k - 2);  // extra arc channels stack upward in z
    for (int side = 0; side < 2; ++side) {
      Tract t;
      t.channel = k;
      t.radius = r;
      const double sgn = side == 0 ? -1.0 : 1.0;
      if (kind == 0) {
        // Long tube along y, gently arched in z.
        const double x0 = cx + sgn * (0.21 * X + rng.uniform(-0.4, 0.4));
        const double z0 = cz + 0.12 * Z + rng.uniform(-0.4, 0.4);
        t.points = {{x0, cy - 0.30 * Y, z0 - 1.0}, {x0, cy, z0 + 0.8}, {x0, cy + 0.30 * Y, z0 - 1.0}};
      } else if (kind == 1) {
        // Shorter, lower tube, splayed outward.
        const double x0 = cx + sgn * (0.29 * X + rng.uniform(-0.4, 0.4));
        const double z0 = cz - 0.22 * Z + rng.uniform(-0.4, 0.4);
        t.points = {{x0 - sgn * 1.0, cy - 0.32 * Y, z0}, {x0, cy - 0.08 * Y, z0 + 1.0}, {x0 + sgn * 0.5, cy + 0.12 * Y, z0 + 2.0}};
      } else {
        // U-shaped arc crossing the midline, reaching into the channel-0 tubes.
        const double y0 = cy + sgn * (0.36 * Y + rng.uniform(-0.4, 0.4));
        const double z0 = cz + 0.10 * Z + 2.0 * layer + rng.uniform(-0.3, 0.3);
        const double reach = 0.21 * X;
        const double inward = -sgn * 0.08 * Y;
        t.points = {{cx - reach, y0 + inward, z0}, {cx - 0.5 * reach, y0 + 0.3 * inward, z0}, {cx, y0, z0},
                    {cx + 0.5 * reach, y0 + 0.3 * inward, z0}, {cx + reach, y0 + inward, z0}};
      }
      tracts.push_back(std::move(t));
    }
  }
  return tracts;
}

/// Separable Gaussian smoothing with border replication, per channel.
template <typename T>
Volume<T> gaussian_smooth(const Volume<T>& v, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> w(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += w[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : w) x /= sum;
  Volume<T> cur = v;
  const int n[3] = {v.nx(), v.ny(), v.nz()};
  for (int axis = 0; axis < 3; ++axis) {
    Volume<T> next(v.dims(), T(0), v.spacing());
    for (int c = 0; c < v.channels(); ++c)
      for (int z = 0; z < v.nz(); ++z)
        for (int y = 0; y < v.ny(); ++y)
          for (int x = 0; x < v.nx(); ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
              int p[3] = {x, y, z};
              p[axis] = std::clamp(p[axis] + k, 0, n[axis] - 1);
              acc += w[k + radius] * cur(p[0], p[1], p[2], c);
            }
            next(x, y, z, c) = static_cast<T>(acc);
          }
    cur = std::move(next);
  }
  return cur;
}

/// Stationary smoothed white noise: drawn on a grid padded by the kernel
/// radius, smoothed, then cropped, so border voxels see a full kernel.
inline Volume<float> smooth_noise(const Dims& grid, double sigma, Rng& rng) {
  const int pad = sigma > 0 ? std::max(1, static_cast<int>(std::ceil(3.0 * sigma))) : 0;
  Volume<float> noise(Dims{grid.x + 2 * pad, grid.y + 2 * pad, grid.z + 2 * pad, grid.c});
  for (auto& x : noise.voxels()) x = static_cast<float>(rng.normal());
  const Volume<float> f = sigma > 0 ? gaussian_smooth(noise, sigma) : noise;
  Volume<float> out(grid);
  for (int c = 0; c < grid.c; ++c)
    for (int z = 0; z < grid.z; ++z)
      for (int y = 0; y < grid.y; ++y)
        for (int x = 0; x < grid.x; ++x) out(x, y, z, c) = f(x + pad, y + pad, z + pad, c);
  return out;
}

/// One time point of a phantom.
struct Phantom {
  Volume<float> fa;       // [0, 1]
  Volume<float> md;       // > 0
  Volume<float> tensor;   // image_channels, unnormalized
  Volume<float> density;  // K continuous tract densities (max over the pair)
  Volume<float> occupancy;  // K partial-volume label maps; seg = occupancy >= 0.5
  SegmentationSet<float> seg;  // K binary channels
};

namespace detail {

inline double soft_inside(double d, double r) { return 1.0 / (1.0 + std::exp((d - r) / 0.6)); }

/// Rasterizes all maps by evaluating the analytic phantom at the continuous
/// coordinates held in `at` (one 3-vector per output voxel).
inline Phantom rasterize(const SynthConfig& cfg, const std::vector<Tract>& tracts, const Volume<float>& texture,
                         const SamplingMap<float>& at) {
  const Dims g = cfg.dims.with_channels(1);
  const std::size_t n = g.spatial();
  const Volume<float> tex = pull(texture, at);
  Phantom p;
  p.fa = Volume<float>(g);
  p.md = Volume<float>(g);
  p.tensor = Volume<float>(g.with_channels(cfg.image_channels));
  p.density = Volume<float>(g.with_channels(cfg.structures));
  p.occupancy = Volume<float>(g.with_channels(cfg.structures));
  for (std::size_t i = 0; i < n; ++i) {
    const double qx = at.coords[i], qy = at.coords[i + n], qz = at.coords[i + 2 * n];
    const double b0 = tex[i], b1 = tex[i + n];
    double fa = 0.30 + 0.20 * b0;
    double md = 0.80 + 0.08 * b1;
    std::array<double, 6> D{0.3 + 0.15 * b0, 0.3 + 0.15 * b1, 0.3 - 0.15 * b0, 0.06 * b1, 0.0, 0.0};
    for (const Tract& t : tracts) {
      const double d = t.distance(qx, qy, qz);
      const std::size_t ki = i + static_cast<std::size_t>(t.channel) * n;
      p.density[ki] = std::max(p.density[ki], static_cast<float>(std::exp(-0.5 * d * d / (t.radius * t.radius))));
      p.occupancy[ki] = std::max(p.occupancy[ki], static_cast<float>(std::clamp(t.radius - d + 0.5, 0.0, 1.0)));
      const double s = soft_inside(d, t.radius);
      if (s < 1e-4) continue;
      fa += 0.45 * s;
      md -= 0.10 * s;
      const auto e = t.direction_near(qx, qy, qz);
      D[0] += s * e[0] * e[0];
      D[1] += s * e[1] * e[1];
      D[2] += s * e[2] * e[2];
      D[3] += s * e[0] * e[1];
      D[4] += s * e[0] * e[2];
      D[5] += s * e[1] * e[2];
    }
    p.fa[i] = static_cast<float>(std::clamp(fa, 0.01, 0.95));
    p.md[i] = static_cast<float>(std::max(md, 0.05));
    for (int c = 0; c < cfg.image_channels; ++c)
      p.tensor[i + static_cast<std::size_t>(c) * n] = static_cast<float>(D[c % 6] * (1.0 + 0.1 * (c / 6)));
  }
  p.seg = binarize(p.occupancy);
  return p;
}

inline void add_noise(Volume<float>& v, double std_dev, Rng& rng, float lo = -1e30f, float hi = 1e30f) {
  if (std_dev <= 0.0) return;
  for (auto& x : v.voxels()) x = std::clamp(static_cast<float>(x + std_dev * rng.normal()), lo, hi);
}

}  // namespace detail

/// Smooth random background texture (2 channels, unit std each).
inline Volume<float> make_texture(const SynthConfig& cfg, Rng& rng) {
  Volume<float> tex = smooth_noise(cfg.dims.with_channels(2), cfg.texture_sigma, rng);
  for (int c = 0; c < 2; ++c) {
    auto ch = tex.channel(c);
    double m = 0, s = 0;
    for (float v : ch) m += v;
    m /= ch.size();
    for (float v : ch) s += (v - m) * (v - m);
    s = std::sqrt(s / ch.size());
    for (auto& v : ch) v = static_cast<float>((v - m) / s);
  }
  return tex;
}

/// Phantom at the baseline time point. Noise std 0 gives exact
/// re-generation of noiseless channels.
inline Phantom generate_phantom(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "phantom"));
  const auto tracts = make_tracts(cfg, rng);
  const Volume<float> texture = make_texture(cfg, rng);
  Phantom p = detail::rasterize(cfg, tracts, texture, identity_map<float>(cfg.dims));
  Rng noise(derive_seed(seed, "noise-source"));
  detail::add_noise(p.fa, cfg.noise_std, noise, 0.0f, 1.0f);
  detail::add_noise(p.tensor, cfg.noise_std, noise);
  return p;
}

struct Deformation {
  DisplacementField<float> u;
  AffineTransform affine;
};

/// u = Gaussian-smoothed white noise, rescaled so that max_x |u(x)| = A.
inline DisplacementField<float> smooth_random_field(const Dims& grid, double sigma, double amplitude, Rng& rng) {
  Volume<float> f = smooth_noise(grid.with_channels(3), sigma, rng);
  const std::size_t n = f.spatial_size();
  double max_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    max_norm = std::max(max_norm, std::sqrt(double(f[i]) * f[i] + double(f[i + n]) * f[i + n] + double(f[i + 2 * n]) * f[i + 2 * n]));
  const double scale = max_norm > 0 ? amplitude / max_norm : 0.0;
  for (auto& x : f.voxels()) x = static_cast<float>(x * scale);
  return DisplacementField<float>(std::move(f));
}

/// Rotation about the grid centre, anisotropic scale and translation, all
/// drawn uniformly within the configured jitter ranges.
inline AffineTransform random_affine(const SynthConfig& cfg, Rng& rng) {
  const double deg = std::numbers::pi / 180.0;
  const double ax = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * deg;
  const double ay = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * deg;
  const double az = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * deg;
  const std::array<double, 3> s{1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter),
                                1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter),
                                1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)};
  const std::array<double, 3> t{rng.uniform(-cfg.translation_vox, cfg.translation_vox),
                                rng.uniform(-cfg.translation_vox, cfg.translation_vox),
                                rng.uniform(-cfg.translation_vox, cfg.translation_vox)};
  const double cxs = std::cos(ax), sxs = std::sin(ax), cys = std::cos(ay), sys = std::sin(ay), czs = std::cos(az),
               szs = std::sin(az);
  // R = Rz * Ry * Rx
  const double R[3][3] = {{czs * cys, czs * sys * sxs - szs * cxs, czs * sys * cxs + szs * sxs},
                          {szs * cys, szs * sys * sxs + czs * cxs, szs * sys * cxs - czs * sxs},
                          {-sys, cys * sxs, cys * cxs}};
  const std::array<double, 3> c{0.5 * (cfg.dims.x - 1), 0.5 * (cfg.dims.y - 1), 0.5 * (cfg.dims.z - 1)};
  AffineTransform::Matrix m{};
  for (int i = 0; i < 3; ++i) {
    double off = c[i] + t[i];
    for (int j = 0; j < 3; ++j) {
      m[4 * i + j] = R[i][j] * s[j];
      off -= R[i][j] * s[j] * c[j];
    }
    m[4 * i + 3] = off;
  }
  m[15] = 1.0;
  return AffineTransform(m);
}

inline Deformation generate_deformation(const SynthConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "deformation"));
  Deformation d;
  d.u = smooth_random_field(cfg.dims.with_channels(3), cfg.smoothness_sigma, cfg.max_displacement, rng);
  d.affine = random_affine(cfg, rng);
  return d;
}

struct SynthPair {
  std::string id;
  std::string subject;
  std::uint64_t seed = 0;
  int attempt = 0;
  Phantom source;
  Phantom target;
  AffineTransform affine;     // target voxel -> source voxel
  DisplacementField<float> u_gt;
  double check_dice = 0.0;
};

/// Baseline phantom plus a follow-up pulled through A * (x + u_gt(x)).
/// Target labels are the warped source partial-volume labels re-binarized at
/// 0.5; the construction check compares them with an analytic rasterization
/// of the tracts at the mapped coordinates (Dice >= 0.95 on every channel),
/// retrying with the next sub-seed up to five times.
inline SynthPair make_pair(const SynthConfig& cfg, std::uint64_t seed, const std::string& id = "0",
                           const std::string& subject = "0") {
  cfg.validate();
  for (int attempt = 0; attempt < 5; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, static_cast<std::uint64_t>(attempt));
    Rng rng(derive_seed(s, "phantom"));
    const auto tracts = make_tracts(cfg, rng);
    const Volume<float> texture = make_texture(cfg, rng);
    Phantom src = detail::rasterize(cfg, tracts, texture, identity_map<float>(cfg.dims));
    const Deformation def = generate_deformation(cfg, s);
    const SamplingMap<float> map = compose(def.affine, def.u);

    SynthPair pair;
    pair.id = id;
    pair.subject = subject;
    pair.seed = s;
    pair.attempt = attempt;
    pair.affine = def.affine;
    pair.u_gt = def.u;
    pair.target.fa = detail::pull(src.fa, map);
    pair.target.md = detail::pull(src.md, map);
    pair.target.tensor = detail::pull(src.tensor, map);
    pair.target.density = detail::pull(src.density, map);
    pair.target.occupancy = detail::pull(src.occupancy, map);
    pair.target.seg = binarize(pair.target.occupancy);

    const Phantom analytic = detail::rasterize(cfg, tracts, texture, map);
    pair.check_dice = 1.0;
    for (int k = 0; k < cfg.structures; ++k)
      pair.check_dice = std::min(pair.check_dice, dice_coefficient(pair.target.seg, analytic.seg, k));

    Rng noise_s(derive_seed(s, "noise-source"));
    detail::add_noise(src.fa, cfg.noise_std, noise_s, 0.0f, 1.0f);
    detail::add_noise(src.tensor, cfg.noise_std, noise_s);
    Rng noise_t(derive_seed(s, "noise-target"));
    detail::add_noise(pair.target.fa, cfg.noise_std, noise_t, 0.0f, 1.0f);
    detail::add_noise(pair.target.tensor, cfg.noise_std, noise_t);
    pair.source = std::move(src);
    if (pair.check_dice >= 0.95) return pair;
  }
  throw VerificationError("make_pair: construction check failed after 5 attempts (seed " + std::to_string(seed) + ")");
}

inline json synth_config_to_json(const SynthConfig& c) {
  return {{"dims", {c.dims.x, c.dims.y, c.dims.z}},
          {"structures", c.structures},
          {"image_channels", c.image_channels},
          {"smoothness_sigma", c.smoothness_sigma},
          {"max_displacement", c.max_displacement},
          {"rotation_deg", c.rotation_deg},
          {"translation_vox", c.translation_vox},
          {"scale_jitter", c.scale_jitter},
          {"noise_std", c.noise_std},
          {"tract_radius", c.tract_radius},
          {"texture_sigma", c.texture_sigma},
          {"seed", c.seed},
          {"network_depth", c.network_depth}};
}

inline SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  const auto d = j.at("dims").get<std::vector<int>>();
  if (d.size() != 3) throw DataError("synth config: dims must have 3 entries");
  c.dims = Dims{d[0], d[1], d[2], 1};
  c.structures = j.at("structures").get<int>();
  c.image_channels = j.at("image_channels").get<int>();
  c.smoothness_sigma = j.at("smoothness_sigma").get<double>();
  c.max_displacement = j.at("max_displacement").get<double>();
  c.rotation_deg = j.at("rotation_deg").get<double>();
  c.translation_vox = j.at("translation_vox").get<double>();
  c.scale_jitter = j.at("scale_jitter").get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.tract_radius = j.at("tract_radius").get<double>();
  c.texture_sigma = j.at("texture_sigma").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.network_depth = j.at("network_depth").get<int>();
  return c;
}

/// Registration and segmentation inputs for one direction of a pair. The
/// reverse direction swaps the time points and inverts the affine.
inline TrainSample<float> to_train_sample(const SynthPair& p, bool reverse = false) {
  const Phantom& s = reverse ? p.target : p.source;
  const Phantom& t = reverse ? p.source : p.target;
  TrainSample<float> out;
  out.id = p.id + (reverse ? "r" : "");
  out.subject = p.subject;
  out.img_s = normalize_image(s.fa);
  out.img_t = normalize_image(t.fa);
  out.seg_img_s = normalize_image(s.tensor);
  out.seg_s = s.seg;
  out.seg_t = t.seg;
  out.affine = reverse ? p.affine.inverse() : p.affine;
  return out;
}

/// Segmentation input of the target time point, for evaluation.
inline Volume<float> target_seg_input(const SynthPair& p, bool reverse = false) {
  return normalize_image((reverse ? p.source : p.target).tensor);
}

inline void save_pair(const SynthPair& p, const fs::path& dir, const SynthConfig& cfg) {
  fs::create_directories(dir);
  const auto save_tp = [&](const Phantom& ph, const std::string& tag) {
    save_volume(ph.fa, dir / ("fa_" + tag));
    save_volume(ph.md, dir / ("md_" + tag));
    save_volume(ph.tensor, dir / ("tensor_" + tag));
    save_volume(ph.density, dir / ("density_" + tag));
    save_volume(ph.occupancy, dir / ("occupancy_" + tag));
    save_segmentation(ph.seg, dir / ("seg_" + tag));
  };
  save_tp(p.source, "s");
  save_tp(p.target, "t");
  save_affine(p.affine, dir / "affine.json");
  save_volume(p.u_gt.field, dir / "u_gt", {{"field_kind", "displacement-voxels"}});
  write_json_atomic(dir / "manifest.json", {{"id", p.id},
                                            {"subject", p.subject},
                                            {"seed", p.seed},
                                            {"attempt", p.attempt},
                                            {"construction_check_dice", p.check_dice},
                                            {"config", synth_config_to_json(cfg)}});
}

inline SynthPair load_pair(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("missing pair directory " + dir.string());
  const json m = detail::read_json(dir / "manifest.json");
  SynthPair p;
  try {
    p.id = m.at("id").get<std::string>();
    p.subject = m.at("subject").get<std::string>();
    p.seed = m.at("seed").get<std::uint64_t>();
    p.attempt = m.at("attempt").get<int>();
    p.check_dice = m.at("construction_check_dice").get<double>();
  } catch (const json::exception& e) {
    throw DataError("bad pair manifest " + dir.string() + ": " + e.what());
  }
  const auto load_tp = [&](Phantom& ph, const std::string& tag) {
    ph.fa = load_volume(dir / ("fa_" + tag));
    ph.md = load_volume(dir / ("md_" + tag));
    ph.tensor = load_volume(dir / ("tensor_" + tag));
    ph.density = load_volume(dir / ("density_" + tag));
    ph.occupancy = load_volume(dir / ("occupancy_" + tag));
    ph.seg = load_segmentation(dir / ("seg_" + tag));
  };
  load_tp(p.source, "s");
  load_tp(p.target, "t");
  p.affine = load_affine(dir / "affine.json");
  p.u_gt = DisplacementField<float>(load_volume(dir / "u_gt"));
  return p;
}

struct DatasetSpec {
  SynthConfig synth;
  int pairs = 40;
  double val_fraction = 0.125;
  double test_fraction = 0.125;

  void validate() const {
    synth.validate();
    if (pairs < 3) throw DataError("dataset needs at least 3 pairs (one per split)");
    if (val_fraction <= 0 || test_fraction <= 0 || val_fraction + test_fraction >= 1)
      throw DataError("split fractions must be positive and sum below 1");
  }
  int n_val() const { return std::max(1, static_cast<int>(std::lround(pairs * val_fraction))); }
  int n_test() const { return std::max(1, static_cast<int>(std::lround(pairs * test_fraction))); }
};

struct SynthDataset {
  DatasetSpec spec;
  std::vector<SynthPair> pairs;
  std::vector<std::string> train, val, test;  // pair ids

  const SynthPair& pair(const std::string& id) const {
    for (const auto& p : pairs)
      if (p.id == id) return p;
    throw DataError("unknown pair id " + id);
  }
  /// Training samples for the given pairs; `both_orders` adds each pair's
  /// reverse direction right after its forward one.
  Dataset<float> samples(const std::vector<std::string>& ids, bool both_orders = false) const {
    Dataset<float> out;
    for (const auto& id : ids) {
      out.push_back(to_train_sample(pair(id)));
      if (both_orders) out.push_back(to_train_sample(pair(id), true));
    }
    return out;
  }
};

/// One subject per pair; pair i uses sub-seed derive_seed(seed, i). The last
/// n_test subjects form the test split and the n_val before them validation.
inline SynthDataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  SynthDataset ds;
  ds.spec = spec;
  char buf[32];
  for (int i = 0; i < spec.pairs; ++i) {
    std::snprintf(buf, sizeof buf, "%03d", i);
    const std::string id = buf;
    ds.pairs.push_back(make_pair(spec.synth, derive_seed(spec.synth.seed, static_cast<std::uint64_t>(i)), id, "subj_" + id));
    const int from_end = spec.pairs - i;
    (from_end <= spec.n_test() ? ds.test : from_end <= spec.n_test() + spec.n_val() ? ds.val : ds.train).push_back(id);
  }
  if (ds.train.empty()) throw DataError("dataset too small for the requested split fractions");
  return ds;
}

inline void save_dataset(const SynthDataset& ds, const fs::path& root) {
  fs::create_directories(root);
  json pairs = json::array();
  for (const auto& p : ds.pairs) {
    save_pair(p, root / ("pair_" + p.id), ds.spec.synth);
    pairs.push_back({{"id", p.id}, {"subject", p.subject}, {"seed", p.seed}, {"construction_check_dice", p.check_dice}});
  }
  write_json_atomic(root / "dataset.json", {{"format", "segis-dataset-1"},
                                            {"config", synth_config_to_json(ds.spec.synth)},
                                            {"pairs_total", ds.spec.pairs},
                                            {"val_fraction", ds.spec.val_fraction},
                                            {"test_fraction", ds.spec.test_fraction},
                                            {"pairs", pairs},
                                            {"splits", {{"train", ds.train}, {"val", ds.val}, {"test", ds.test}}}});
}

inline SynthDataset load_dataset(const fs::path& root) {
  const fs::path mf = root / "dataset.json";
  if (!fs::exists(mf)) throw DataError("missing dataset manifest " + mf.string());
  const json m = detail::read_json(mf);
  SynthDataset ds;
  try {
    ds.spec.synth = synth_config_from_json(m.at("config"));
    ds.spec.pairs = m.at("pairs_total").get<int>();
    ds.spec.val_fraction = m.at("val_fraction").get<double>();
    ds.spec.test_fraction = m.at("test_fraction").get<double>();
    ds.train = m.at("splits").at("train").get<std::vector<std::string>>();
    ds.val = m.at("splits").at("val").get<std::vector<std::string>>();
    ds.test = m.at("splits").at("test").get<std::vector<std::string>>();
    for (const auto& p : m.at("pairs")) ds.pairs.push_back(load_pair(root / ("pair_" + p.at("id").get<std::string>())));
  } catch (const json::exception& e) {
    throw DataError("bad dataset manifest " + mf.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace segis
