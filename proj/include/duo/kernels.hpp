#pragma once

#include <cmath>
#include <cstring>

#include "duo/tensor.hpp"

// Raw kernels shared by the autograd tape and the inference path.
//
// Every kernel is row-decomposable: output row i is a pure function of its
// inputs with a fixed, sequential reduction order. Computing one row alone
// gives bit-identical results to computing it inside a larger batch, which
// is what makes incremental decoding match full-sequence forwards exactly.

namespace duo::kern {

// c[m x n] (+)= a[m x k] * b[k x n]
template <class T>
void matmul_nn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

template <class T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, sizeof(T) * m * n);
  matmul_nn_acc(a, b, c, m, k, n);
}

// c[m x n] (+)= a[m x k] * b[n x k]^T   (dot products of contiguous rows)
template <class T>
void matmul_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::memset(c, 0, sizeof(T) * m * n);
  matmul_nt_acc(a, b, c, m, k, n);
}

// c[m x n] += a[r x m]^T * b[r x n]   (sum of outer products, used for weight grads)
template <class T>
void matmul_tn_acc(const T* a, const T* b, T* c, std::size_t r, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < r; ++i) {
    const T* ai = a + i * m;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < m; ++p) {
      const T s = ai[p];
      if (s == T(0)) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += s * bi[j];
    }
  }
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s + x * s * (T(1) - s);
}

// Stabilized softmax over x[0..n), written to y (may alias x).
template <class T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = 0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

// y = x / rms(x) * gain; returns the reciprocal rms for the backward pass.
template <class T>
T rms_norm_row(const T* x, const T* gain, T* y, std::size_t d, T eps) {
  T ss = 0;
  for (std::size_t j = 0; j < d; ++j) ss += x[j] * x[j];
  const T r = T(1) / std::sqrt(ss / T(d) + eps);
  for (std::size_t j = 0; j < d; ++j) y[j] = x[j] * r * gain[j];
  return r;
}

// In-place rotary embedding on one row of head-split Q or K at absolute
// position pos. dir=+1 rotates forward, dir=-1 applies the inverse rotation
// (used to pull gradients back through the rotation).
template <class T>
void rope_row(T* x, std::size_t n_heads, std::size_t head_dim, std::size_t pos, T theta, int dir) {
  const std::size_t half = head_dim / 2;
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* xh = x + h * head_dim;
    for (std::size_t p = 0; p < half; ++p) {
      const T freq = std::pow(theta, -T(2 * p) / T(head_dim));
      const T ang = T(pos) * freq * T(dir);
      const T c = std::cos(ang), s = std::sin(ang);
      const T a = xh[p], b = xh[p + half];
      xh[p] = a * c - b * s;
      xh[p + half] = a * s + b * c;
    }
  }
}

}  // namespace duo::kern
