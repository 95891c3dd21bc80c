#pragma once

// Core grid types: Volume, SegmentationSet, AffineTransform, GridDomain.
//
// Voxel layout is x-fastest over (X, Y, Z, C): channel planes are stored one
// after another, so the buffer of a Volume is also a column-major
// (X*Y*Z) x C matrix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segis {

/// Malformed or inconsistent input data (bad file, mismatched dims, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical contract was violated (gradient check, construction check).
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims {
  int x = 0, y = 0, z = 0, c = 1;

  constexpr std::size_t spatial() const noexcept {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  constexpr std::size_t count() const noexcept { return spatial() * static_cast<std::size_t>(c); }
  constexpr bool same_grid(const Dims& o) const noexcept { return x == o.x && y == o.y && z == o.z; }
  constexpr Dims with_channels(int channels) const noexcept { return {x, y, z, channels}; }

  friend constexpr bool operator==(const Dims&, const Dims&) = default;

  std::string str() const {
    return "[" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + "," +
           std::to_string(c) + "]";
  }
};

using Spacing = std::array<double, 3>;

template <typename T>
class Volume {
 public:
  using value_type = T;

  Volume() = default;

  explicit Volume(Dims dims, T fill = T(0), Spacing spacing = {1.0, 1.0, 1.0})
      : dims_(dims), spacing_(spacing), data_(check_dims(dims).count(), fill) {
    check_spacing(spacing_);
  }

  Volume(Dims dims, std::vector<T> data, Spacing spacing = {1.0, 1.0, 1.0})
      : dims_(check_dims(dims)), spacing_(spacing), data_(std::move(data)) {
    check_spacing(spacing_);
    if (data_.size() != dims_.count())
      throw DataError("voxel count " + std::to_string(data_.size()) + " does not match dims " +
                      dims_.str());
  }

  const Dims& dims() const noexcept { return dims_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  void set_spacing(const Spacing& s) {
    check_spacing(s);
    spacing_ = s;
  }

  int nx() const noexcept { return dims_.x; }
  int ny() const noexcept { return dims_.y; }
  int nz() const noexcept { return dims_.z; }
  int channels() const noexcept { return dims_.c; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t spatial_size() const noexcept { return dims_.spatial(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(int x, int y, int z, int c = 0) const noexcept {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.x) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(dims_.y) *
                    (static_cast<std::size_t>(z) + static_cast<std::size_t>(dims_.z) * static_cast<std::size_t>(c)));
  }

  T& operator()(int x, int y, int z, int c = 0) noexcept { return data_[index(x, y, z, c)]; }
  const T& operator()(int x, int y, int z, int c = 0) const noexcept { return data_[index(x, y, z, c)]; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> voxels() noexcept { return data_; }
  std::span<const T> voxels() const noexcept { return data_; }

  std::span<T> channel(int c) noexcept { return std::span<T>(data_).subspan(c * spatial_size(), spatial_size()); }
  std::span<const T> channel(int c) const noexcept {
    return std::span<const T>(data_).subspan(c * spatial_size(), spatial_size());
  }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  const std::vector<T>& storage() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Copy of a subset of channels [first, first + count).
  Volume channels_slice(int first, int count) const {
    if (first < 0 || count < 0 || first + count > dims_.c) throw DataError("channel slice out of range");
    Volume out(dims_.with_channels(count), T(0), spacing_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(first * spatial_size()), count * spatial_size(),
                out.data_.begin());
    return out;
  }

  template <typename U>
  Volume<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Volume<U>(dims_, std::move(out), spacing_);
  }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

 private:
  static Dims check_dims(Dims d) {
    if (d.x <= 0 || d.y <= 0 || d.z <= 0 || d.c <= 0) throw DataError("dims must be positive, got " + d.str());
    return d;
  }
  static void check_spacing(const Spacing& s) {
    for (double v : s)
      if (!(v > 0.0) || !std::isfinite(v)) throw DataError("spacing must be strictly positive");
  }

  Dims dims_{};
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<T> data_;
};

/// Stack volumes sharing a grid along the channel axis.
template <typename T>
Volume<T> concat_channels(const Volume<T>& a, const Volume<T>& b) {
  if (!a.dims().same_grid(b.dims())) throw DataError("concat: grid mismatch " + a.dims().str() + " vs " + b.dims().str());
  std::vector<T> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.voxels().begin(), a.voxels().end());
  data.insert(data.end(), b.voxels().begin(), b.voxels().end());
  return Volume<T>(a.dims().with_channels(a.channels() + b.channels()), std::move(data), a.spacing());
}

enum class SegKind { probabilistic, binary };

/// K-channel label volume. Channels may overlap.
template <typename T>
class SegmentationSet {
 public:
  SegmentationSet() = default;
  SegmentationSet(Volume<T> v, SegKind kind) : volume_(std::move(v)), kind_(kind) { validate(); }

  const Volume<T>& volume() const noexcept { return volume_; }
  Volume<T>& mutable_volume() noexcept { return volume_; }
  SegKind kind() const noexcept { return kind_; }
  int structures() const noexcept { return volume_.channels(); }
  const Dims& dims() const noexcept { return volume_.dims(); }

  void validate() const {
    for (T v : volume_.voxels()) {
      if (!std::isfinite(v)) throw DataError("segmentation contains non-finite values");
      if (kind_ == SegKind::binary) {
        if (v != T(0) && v != T(1)) throw DataError("binary segmentation has a value outside {0,1}");
      } else if (v < T(0) || v > T(1)) {
        throw DataError("probabilistic segmentation has a value outside [0,1]");
      }
    }
  }

 private:
  Volume<T> volume_;
  SegKind kind_ = SegKind::probabilistic;
};

/// Threshold a probabilistic volume into {0,1} (value >= threshold -> 1).
template <typename T>
SegmentationSet<T> binarize(const Volume<T>& prob, double threshold = 0.5) {
  Volume<T> out(prob.dims(), T(0), prob.spacing());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? T(1) : T(0);
  return SegmentationSet<T>(std::move(out), SegKind::binary);
}

/// Target space over which losses and metrics average.
struct GridDomain {
  int x = 0, y = 0, z = 0;

  GridDomain(int x_, int y_, int z_) : x(x_), y(y_), z(z_) {
    if (x <= 0 || y <= 0 || z <= 0) throw DataError("grid domain dims must be positive");
  }
  explicit GridDomain(const Dims& d) : GridDomain(d.x, d.y, d.z) {}

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
};

/// 4x4 row-major homogeneous matrix mapping target-grid voxel coordinates to
/// source-grid voxel coordinates (pull semantics).
class AffineTransform {
 public:
  using Matrix = std::array<double, 16>;

  AffineTransform() : m_(identity_matrix()) {}
  explicit AffineTransform(const Matrix& m) : m_(m) { validate(); }

  static AffineTransform identity() { return AffineTransform(); }

  static AffineTransform translation(double tx, double ty, double tz) {
    Matrix m = identity_matrix();
    m[3] = tx;
    m[7] = ty;
    m[11] = tz;
    return AffineTransform(m);
  }

  const Matrix& matrix() const noexcept { return m_; }
  double operator()(int r, int c) const noexcept { return m_[4 * r + c]; }

  std::array<double, 3> apply(double x, double y, double z) const noexcept {
    return {m_[0] * x + m_[1] * y + m_[2] * z + m_[3], m_[4] * x + m_[5] * y + m_[6] * z + m_[7],
            m_[8] * x + m_[9] * y + m_[10] * z + m_[11]};
  }

  double linear_det() const noexcept {
    return m_[0] * (m_[5] * m_[10] - m_[6] * m_[9]) - m_[1] * (m_[4] * m_[10] - m_[6] * m_[8]) +
           m_[2] * (m_[4] * m_[9] - m_[5] * m_[8]);
  }

  /// this * other (apply other first).
  AffineTransform then_after(const AffineTransform& other) const {
    Matrix r{};
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0.0;
        for (int k = 0; k < 4; ++k) s += m_[4 * i + k] * other.m_[4 * k + j];
        r[4 * i + j] = s;
      }
    return AffineTransform(r);
  }

  AffineTransform inverse() const {
    const double det = linear_det();
    const auto& a = m_;
    Matrix r = identity_matrix();
    // Inverse of the 3x3 block by cofactors.
    r[0] = (a[5] * a[10] - a[6] * a[9]) / det;
    r[1] = (a[2] * a[9] - a[1] * a[10]) / det;
    r[2] = (a[1] * a[6] - a[2] * a[5]) / det;
    r[4] = (a[6] * a[8] - a[4] * a[10]) / det;
    r[5] = (a[0] * a[10] - a[2] * a[8]) / det;
    r[6] = (a[2] * a[4] - a[0] * a[6]) / det;
    r[8] = (a[4] * a[9] - a[5] * a[8]) / det;
    r[9] = (a[1] * a[8] - a[0] * a[9]) / det;
    r[10] = (a[0] * a[5] - a[1] * a[4]) / det;
    for (int i = 0; i < 3; ++i)
      r[4 * i + 3] = -(r[4 * i] * a[3] + r[4 * i + 1] * a[7] + r[4 * i + 2] * a[11]);
    return AffineTransform(r);
  }

  void validate() const {
    for (double v : m_)
      if (!std::isfinite(v)) throw DataError("affine has non-finite entries");
    if (m_[12] != 0.0 || m_[13] != 0.0 || m_[14] != 0.0 || m_[15] != 1.0)
      throw DataError("affine last row must be (0,0,0,1)");
    if (std::abs(linear_det()) <= 1e-9) throw DataError("affine is singular");
  }

  friend bool operator==(const AffineTransform&, const AffineTransform&) = default;

 private:
  static Matrix identity_matrix() { return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1}; }
  Matrix m_;
};

/// Pooled zero-mean / unit-std normalization over every voxel of every
/// channel (background zeros included).
template <typename T>
Volume<T> normalize_image(const Volume<T>& v) {
  if (v.empty()) throw DataError("normalize_image: empty volume");
  double mean = 0.0;
  for (T x : v.voxels()) mean += static_cast<double>(x);
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (T x : v.voxels()) {
    const double d = static_cast<double>(x) - mean;
    var += d * d;
  }
  var /= static_cast<double>(v.size());
  if (!(var > 0.0)) throw DataError("normalize_image: constant image has zero variance");
  const double inv_std = 1.0 / std::sqrt(var);
  Volume<T> out(v.dims(), T(0), v.spacing());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>((static_cast<double>(v[i]) - mean) * inv_std);
  return out;
}

}  // namespace segis
