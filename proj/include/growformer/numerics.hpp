// Dense float32 kernels and seeded randomness. Everything here is
// deterministic: fixed accumulation order in matmul, engine-level RNG draws
// (no std::*_distribution, whose output differs between standard libraries).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace growformer {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  float* row(std::size_t r) { return data.data() + r * cols; }
  const float* row(std::size_t r) const { return data.data() + r * cols; }
  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  static Matrix identity(std::size_t n);
};

// C = A * B. Loop order fixed (i, k, j); each output element accumulates its
// k-terms in increasing order, so results are bit-stable run to run.
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A * B^T, same determinism contract. Used by the backward pass.
Matrix matmul_transpose_b(const Matrix& a, const Matrix& b);

// C = A^T * B.
Matrix matmul_transpose_a(const Matrix& a, const Matrix& b);

// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& m);

// Per-row LayerNorm: (x - mean) / sqrt(var + eps) * gain + bias.
Matrix layer_norm(const Matrix& h, std::span<const float> gain,
                  std::span<const float> bias, float eps = 1e-12f);

// Elementwise GELU, tanh approximation (the one formula used everywhere).
Matrix gelu(const Matrix& m);
float gelu_scalar(float x);
float gelu_derivative(float x);

// Seeded generator with a platform-stable draw sequence. Single-owner: never
// share one instance across concurrent callers.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform over {0, ..., n-1}, with replacement across calls.
  std::size_t sample_index(std::size_t n);

  // Uniform in [0, 1).
  double uniform();

  // N(0, sigma^2) truncated to [-2 sigma, 2 sigma].
  float truncated_normal(float sigma);

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
};

// Number of worker threads for batch-level parallelism. Reads
// GROWFORMER_THREADS once; defaults to hardware concurrency, capped at 8.
std::size_t kernel_thread_count();

// Runs fn(i) for i in [0, n) across kernel threads. Work item i always goes
// to worker i % threads, so any per-worker accumulation is order-stable.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace growformer
