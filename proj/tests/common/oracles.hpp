#pragma once

// Reference implementations used to cross-check engine results. Everything
// here works on plain vectors and is deliberately independent of the graph
// engine: no aq:: types, no shared kernels.

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracle {

// C[m,n] = A[m,k] * B[k,n], row-major, no transposition tricks.
inline std::vector<double> matmul(const std::vector<double>& a, std::size_t m,
                                  std::size_t k, const std::vector<double>& b,
                                  std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += a[i * k + l] * b[l * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

inline std::vector<double> transpose(const std::vector<double>& a,
                                     std::size_t r, std::size_t c) {
  std::vector<double> t(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  }
  return t;
}

inline double logsumexp(const std::vector<double>& row) {
  double m = row[0];
  for (double v : row) m = v > m ? v : m;
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

inline std::vector<double> softmax(const std::vector<double>& row) {
  const double lse = logsumexp(row);
  std::vector<double> p(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) p[i] = std::exp(row[i] - lse);
  return p;
}

inline double cross_entropy(const std::vector<double>& logits, int label) {
  return logsumexp(logits) - logits[static_cast<std::size_t>(label)];
}

// Solves A X = B by Gauss-Jordan elimination with partial pivoting.
// A is [n,n], B is [n,m]; throws on a (near-)singular pivot.
inline std::vector<double> gauss_jordan_solve(std::vector<double> a,
                                              std::size_t n,
                                              std::vector<double> b,
                                              std::size_t m) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    if (std::abs(a[piv * n + col]) < 1e-14) {
      throw std::runtime_error("gauss_jordan_solve: singular matrix");
    }
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[piv * n + j], a[col * n + j]);
      for (std::size_t j = 0; j < m; ++j) std::swap(b[piv * m + j], b[col * m + j]);
    }
    const double d = a[col * n + col];
    for (std::size_t j = 0; j < n; ++j) a[col * n + j] /= d;
    for (std::size_t j = 0; j < m; ++j) b[col * m + j] /= d;
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      for (std::size_t j = 0; j < m; ++j) b[r * m + j] -= f * b[col * m + j];
    }
  }
  return b;
}

// Ridge regression weights by explicit normal equations:
//   W = (X^T X + lambda I)^-1 X^T Y,  X [n,d], Y [n,c]  ->  W [d,c].
inline std::vector<double> ridge_normal_equations(const std::vector<double>& x,
                                                  std::size_t n, std::size_t d,
                                                  const std::vector<double>& y,
                                                  std::size_t c,
                                                  double lambda) {
  std::vector<double> xt = transpose(x, n, d);
  std::vector<double> xtx = matmul(xt, d, n, x, d);
  for (std::size_t i = 0; i < d; ++i) xtx[i * d + i] += lambda;
  std::vector<double> xty = matmul(xt, d, n, y, c);
  return gauss_jordan_solve(std::move(xtx), d, std::move(xty), c);
}

// Central finite-difference gradient of a scalar function.
inline std::vector<double> fd_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace oracle
