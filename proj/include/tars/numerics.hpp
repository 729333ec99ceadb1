#pragma once

// Dense f32 kernels shared by every stage of the editing pipeline. Storage is
// always f32; reductions (dot products, norms, softmax sums) accumulate in f64.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace tars {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, float fill = 0.0f);
  // Throws DomainError if any element is NaN or infinite.
  explicit Vector(std::vector<float> data);
  Vector(std::initializer_list<float> values);

  std::size_t dim() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  std::span<const float> view() const noexcept { return data_; }
  std::span<float> mutable_view() noexcept { return data_; }
  operator std::span<const float>() const noexcept { return data_; }  // NOLINT

  const std::vector<float>& values() const noexcept { return data_; }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool operator==(const Vector& other) const = default;

 private:
  std::vector<float> data_;
};

// Row-major dense matrix. Rows double as the weight vectors the scan inspects.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const float> row(std::size_t r) const;
  std::span<float> mutable_row(std::size_t r);
  void set_row(std::size_t r, std::span<const float> values);

  std::span<const float> view() const noexcept { return data_; }
  std::span<float> mutable_view() noexcept { return data_; }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// xoshiro256** seeded through splitmix64. Normal draws use Box-Muller with a
// cached spare so the stream is a pure function of (seed, call sequence).
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "xoshiro256**/splitmix64/box-muller";

  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }
  std::string_view algorithm() const noexcept { return kAlgorithm; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;

  // Derives an independent stream; used to give each consumer its own RNG.
  Rng fork(std::uint64_t stream) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

bool all_finite(std::span<const float> values) noexcept;

double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> v) noexcept;
double rms(std::span<const float> v) noexcept;

Vector softmax(std::span<const float> logits);
double p_norm(std::span<const float> v, double p);
// Clamped to [-1, 1]. Throws DomainError if either operand is the zero vector.
double cosine_similarity(std::span<const float> a, std::span<const float> b);
Vector gaussian_sample(Rng& rng, std::size_t dim, double sigma);
Vector matvec(const Matrix& m, std::span<const float> v);

}  // namespace tars
