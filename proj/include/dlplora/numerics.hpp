#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlplora/errors.hpp"

namespace dlplora {

// Dense row-major float matrix. The flat buffer always holds rows*cols entries.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix buffer of " + std::to_string(data_.size()) +
                       " entries does not match " + std::to_string(rows_) +
                       "x" + std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }
  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shapes " + a.shape_string() + " and " +
                     b.shape_string() + " differ");
  }
}

// out += alpha * a * b. `out` must already be [a.rows x b.cols].
inline void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out, float alpha = 1.0f) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + a.shape_string() + " x " +
                     b.shape_string());
  }
  if (out.rows() != a.rows() || out.cols() != b.cols()) {
    throw ShapeError("matmul: output " + out.shape_string() + " does not fit " +
                     a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = alpha * pa[i * k + p];
      if (av == 0.0f) continue;
      const float* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ for " + a.shape_string() + " x " +
                     b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  matmul_accumulate(a, b, out);
  return out;
}

// out += alpha * a^T * b
inline void matmul_at_b_accumulate(const Matrix& a, const Matrix& b, Matrix& out,
                                   float alpha = 1.0f) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ShapeError("matmul_at_b: " + a.shape_string() + "^T x " + b.shape_string() +
                     " into " + out.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data() + i * k;
    const float* brow = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = alpha * arow[p];
      if (av == 0.0f) continue;
      float* orow = out.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  matmul_at_b_accumulate(a, b, out);
  return out;
}

// out += alpha * a * b^T
inline void matmul_a_bt_accumulate(const Matrix& a, const Matrix& b, Matrix& out,
                                   float alpha = 1.0f) {
  if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows()) {
    throw ShapeError("matmul_a_bt: " + a.shape_string() + " x " + b.shape_string() +
                     "^T into " + out.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a.data() + i * k;
    float* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b.data() + j * k;
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += alpha * acc;
    }
  }
}

inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  matmul_a_bt_accumulate(a, b, out);
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "subtract");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Matrix scaled(const Matrix& a, float s) {
  Matrix out = a;
  for (float& v : out.flat()) v *= s;
  return out;
}

// a += s * b
inline void axpy(Matrix& a, const Matrix& b, float s) {
  require_same_shape(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (float v : a.flat()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  require_same_shape(a, b, "max_relative_error");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    scale = std::max(scale, std::abs(static_cast<double>(b.data()[i])));
  }
  return diff / scale;
}

inline double max_abs_difference(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_difference");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return diff;
}

// Numerically stable softmax (max subtraction), in place.
inline void softmax_inplace(std::span<float> v) {
  if (v.empty()) throw ContractError("softmax of an empty vector");
  const float mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (float& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  const float inv = static_cast<float>(1.0 / sum);
  for (float& x : v) x *= inv;
}

inline std::vector<float> softmax(std::span<const float> v) {
  std::vector<float> out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

// Deterministic random source. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard); the float transforms below are written
// out so results do not depend on a standard library's distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix(seed)) {}

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  static std::uint64_t mix(std::uint64_t seed, std::uint64_t key) { return mix(mix(seed) ^ key); }

  // Independent child stream, keyed by `salt`.
  Rng split(std::uint64_t salt) { return Rng(engine_() ^ mix(salt)); }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 24 bits of resolution.
  float uniform01() { return static_cast<float>(engine_() >> 40) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    return static_cast<std::size_t>(engine_() % n);
  }

  // Box-Muller.
  float gaussian(float mean, float stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    } while (u1 <= 0.0);
    const double u2 = static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = static_cast<float>(radius * std::sin(theta));
    has_spare_ = true;
    return mean + stddev * static_cast<float>(radius * std::cos(theta));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  float spare_ = 0.0f;
  bool has_spare_ = false;
};

struct Distribution {
  enum class Kind { uniform, gaussian };
  Kind kind = Kind::uniform;
  float param = 1.0f;  // half-width s for uniform(-s, s), sigma for gaussian(0, sigma)

  static Distribution uniform(float half_width) { return {Kind::uniform, half_width}; }
  static Distribution gaussian(float sigma) { return {Kind::gaussian, sigma}; }
};

inline Matrix seeded_random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                   Distribution dist) {
  if (rows == 0 || cols == 0) throw ContractError("seeded_random_matrix needs rows, cols >= 1");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (float& v : m.flat()) {
    v = dist.kind == Distribution::Kind::uniform ? rng.uniform(-dist.param, dist.param)
                                                 : rng.gaussian(0.0f, dist.param);
  }
  return m;
}

// N matrices of identical shape in one contiguous buffer; slice i occupies
// [i*rows*cols, (i+1)*rows*cols).
class StackedTensor3 {
 public:
  StackedTensor3() = default;
  StackedTensor3(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols) {}

  std::size_t count() const noexcept { return count_; }
  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t slice_size() const noexcept { return rows_ * cols_; }
  std::span<const float> flat() const noexcept { return data_; }

  std::span<const float> slice(std::size_t i) const {
    check_index(i);
    return {data_.data() + i * slice_size(), slice_size()};
  }

  Matrix extract(std::size_t i) const {
    auto s = slice(i);
    return Matrix(rows_, cols_, std::vector<float>(s.begin(), s.end()));
  }

  void push_back(const Matrix& m) {
    check_shape(m);
    data_.insert(data_.end(), m.flat().begin(), m.flat().end());
    ++count_;
  }

  void set(std::size_t i, const Matrix& m) {
    check_index(i);
    check_shape(m);
    std::copy(m.flat().begin(), m.flat().end(),
              data_.begin() + static_cast<std::ptrdiff_t>(i * slice_size()));
  }

  // Moves the last slice into slot i and shrinks by one.
  void swap_remove(std::size_t i) {
    check_index(i);
    const std::size_t last = count_ - 1;
    if (i != last) {
      std::copy(data_.begin() + static_cast<std::ptrdiff_t>(last * slice_size()), data_.end(),
                data_.begin() + static_cast<std::ptrdiff_t>(i * slice_size()));
    }
    data_.resize(last * slice_size());
    --count_;
  }

 private:
  void check_index(std::size_t i) const {
    if (i >= count_) {
      throw LookupError("stacked tensor slice " + std::to_string(i) + " out of range (n=" +
                        std::to_string(count_) + ")");
    }
  }
  void check_shape(const Matrix& m) const {
    if (m.rows() != rows_ || m.cols() != cols_) {
      throw ShapeError("stacked tensor expects [" + std::to_string(rows_) + "x" +
                       std::to_string(cols_) + "] slices, got " + m.shape_string());
    }
  }

  std::size_t count_ = 0;
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

}  // namespace dlplora
