#include "tars/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tars/errors.hpp"

namespace tars {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) noexcept {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
  return (x << k) | (x >> (64 - k));
}

void require_same_dim(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

Vector::Vector(std::size_t dim, float fill) : data_(dim, fill) {}

Vector::Vector(std::vector<float> data) : data_(std::move(data)) {
  if (!all_finite(data_)) throw DomainError("Vector: non-finite element");
}

Vector::Vector(std::initializer_list<float> values) : Vector(std::vector<float>(values)) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

std::span<const float> Matrix::row(std::size_t r) const {
  if (r >= rows_) throw InputError("Matrix::row: index " + std::to_string(r) + " out of range");
  return std::span<const float>(data_).subspan(r * cols_, cols_);
}

std::span<float> Matrix::mutable_row(std::size_t r) {
  if (r >= rows_) throw InputError("Matrix::row: index " + std::to_string(r) + " out of range");
  return std::span<float>(data_).subspan(r * cols_, cols_);
}

void Matrix::set_row(std::size_t r, std::span<const float> values) {
  require_same_dim(values.size(), cols_, "Matrix::set_row");
  std::ranges::copy(values, mutable_row(r).begin());
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) noexcept {
  // Lemire's rejection keeps the draw unbiased.
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t x = next_u64();
    const unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
  }
}

double Rng::normal() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

Rng Rng::fork(std::uint64_t stream) const noexcept {
  std::uint64_t x = seed_ ^ (0xD1B54A32D192ED03ULL * (stream + 1));
  return Rng(splitmix64(x));
}

bool all_finite(std::span<const float> values) noexcept {
  return std::ranges::all_of(values, [](float x) { return std::isfinite(x); });
}

double dot(std::span<const float> a, std::span<const float> b) {
  require_same_dim(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double l2_norm(std::span<const float> v) noexcept {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

double rms(std::span<const float> v) noexcept {
  if (v.empty()) return 0.0;
  return l2_norm(v) / std::sqrt(static_cast<double>(v.size()));
}

Vector softmax(std::span<const float> logits) {
  if (logits.empty()) throw DimensionError("softmax: empty input");
  if (!all_finite(logits)) throw DomainError("softmax: non-finite logit");
  const double max = *std::ranges::max_element(logits);
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - max);
    sum += e[i];
  }
  std::vector<float> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / sum);
  return Vector(std::move(out));
}

double p_norm(std::span<const float> v, double p) {
  if (!(p >= 1.0)) throw DomainError("p_norm: p must be >= 1");
  // Scale by the max magnitude so |x|^p cannot overflow for large p.
  double scale = 0.0;
  for (float x : v) scale = std::max(scale, std::abs(static_cast<double>(x)));
  if (scale == 0.0) return 0.0;
  double acc = 0.0;
  for (float x : v) acc += std::pow(std::abs(static_cast<double>(x)) / scale, p);
  return scale * std::pow(acc, 1.0 / p);
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  require_same_dim(a.size(), b.size(), "cosine_similarity");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i];
    const double y = b[i];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) throw DomainError("cosine_similarity: zero vector");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

Vector gaussian_sample(Rng& rng, std::size_t dim, double sigma) {
  if (dim == 0) throw DimensionError("gaussian_sample: dim must be >= 1");
  if (!(sigma >= 0.0)) throw DomainError("gaussian_sample: sigma must be >= 0");
  Vector out(dim);
  if (sigma == 0.0) return out;
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(sigma * rng.normal());
  return out;
}

Vector matvec(const Matrix& m, std::span<const float> v) {
  require_same_dim(m.cols(), v.size(), "matvec");
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = static_cast<float>(dot(m.row(r), v));
  return out;
}

}  // namespace tars
