#include "growformer/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <thread>

namespace growformer {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0f;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows) + ")");
  }
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* arow = a.row(i);
    float* crow = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const float aik = arow[k];
      const float* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  return c;
}

Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw std::invalid_argument("matmul_transpose_b: inner dimensions differ");
  }
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const float* arow = a.row(i);
    float* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const float* brow = b.row(j);
      float acc = 0.0f;
      for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      crow[j] = acc;
    }
  }
  return c;
}

Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw std::invalid_argument("matmul_transpose_a: inner dimensions differ");
  }
  Matrix c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const float* arow = a.row(k);
    const float* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const float aki = arow[i];
      float* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const float* in = m.row(i);
    float* o = out.row(i);
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < m.cols; ++j) mx = std::max(mx, in[j]);
    float sum = 0.0f;
    for (std::size_t j = 0; j < m.cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const float inv = 1.0f / sum;
    for (std::size_t j = 0; j < m.cols; ++j) o[j] *= inv;
  }
  return out;
}

Matrix layer_norm(const Matrix& h, std::span<const float> gain,
                  std::span<const float> bias, float eps) {
  if (gain.size() != h.cols || bias.size() != h.cols) {
    throw std::invalid_argument("layer_norm: gain/bias length must equal cols");
  }
  Matrix out(h.rows, h.cols);
  const float n = static_cast<float>(h.cols);
  for (std::size_t i = 0; i < h.rows; ++i) {
    const float* in = h.row(i);
    float* o = out.row(i);
    float mean = 0.0f;
    for (std::size_t j = 0; j < h.cols; ++j) mean += in[j];
    mean /= n;
    float var = 0.0f;
    for (std::size_t j = 0; j < h.cols; ++j) {
      const float d = in[j] - mean;
      var += d * d;
    }
    var /= n;
    const float inv_sigma = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < h.cols; ++j) {
      o[j] = (in[j] - mean) * inv_sigma * gain[j] + bias[j];
    }
  }
  return out;
}

namespace {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

float gelu_scalar(float x) {
  const float u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_derivative(float x) {
  const float u = kGeluC * (x + kGeluA * x * x * x);
  const float t = std::tanh(u);
  const float du = kGeluC * (1.0f + 3.0f * kGeluA * x * x);
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
}

Matrix gelu(const Matrix& m) {
  Matrix out(m.rows, m.cols);
  for (std::size_t i = 0; i < m.size(); ++i) out.data[i] = gelu_scalar(m.data[i]);
  return out;
}

std::size_t SeededRng::sample_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("sample_index: n must be >= 1");
  if (n == 1) return 0;
  // Rejection sampling keeps the draw exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = engine_();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

double SeededRng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

float SeededRng::truncated_normal(float sigma) {
  // Box-Muller, resampled until within two standard deviations.
  for (;;) {
    const double u1 = std::max(uniform(), 1e-12);
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    if (std::abs(z) <= 2.0) return static_cast<float>(z) * sigma;
  }
}

std::size_t kernel_thread_count() {
  static const std::size_t count = [] {
    if (const char* env = std::getenv("GROWFORMER_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<std::size_t>(v);
    }
    std::size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    return std::min<std::size_t>(hw, 8);
  }();
  return count;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min(kernel_thread_count(), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace growformer
