#pragma once

#include <cstddef>
#include <vector>

namespace versekit {

// Dense row-major matrix. Deliberately minimal: the model code needs
// predictable memory layout and nothing else.
template <class S>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<S> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, S fill = S(0))
      : rows(r), cols(c), data(r * c, fill) {}

  S* row(std::size_t i) { return data.data() + i * cols; }
  const S* row(std::size_t i) const { return data.data() + i * cols; }

  S& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  const S& at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::size_t size() const { return data.size(); }

  void resize(std::size_t r, std::size_t c) {
    rows = r;
    cols = c;
    data.assign(r * c, S(0));
  }

  void fill(S v) { data.assign(data.size(), v); }
};

// out = a @ b, shapes [m,k] x [k,n] -> [m,n].
template <class S>
void matmul(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& out) {
  out.resize(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const S* arow = a.row(i);
    S* orow = out.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const S aik = arow[k];
      if (aik == S(0)) continue;
      const S* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
}

// out = a @ b^T, shapes [m,k] x [n,k] -> [m,n].
template <class S>
void matmul_nt(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& out) {
  out.resize(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const S* arow = a.row(i);
    S* orow = out.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const S* brow = b.row(j);
      S acc = S(0);
      for (std::size_t k = 0; k < a.cols; ++k) {
        acc += arow[k] * brow[k];
      }
      orow[j] = acc;
    }
  }
}

// out = a^T @ b, shapes [k,m] x [k,n] -> [m,n]. Used for weight gradients.
template <class S>
void matmul_tn(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& out) {
  out.resize(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const S* arow = a.row(k);
    const S* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const S aki = arow[i];
      if (aki == S(0)) continue;
      S* orow = out.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aki * brow[j];
      }
    }
  }
}

// Accumulating variant of matmul_tn: out += a^T @ b.
template <class S>
void matmul_tn_acc(const Matrix<S>& a, const Matrix<S>& b, Matrix<S>& out) {
  for (std::size_t k = 0; k < a.rows; ++k) {
    const S* arow = a.row(k);
    const S* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const S aki = arow[i];
      if (aki == S(0)) continue;
      S* orow = out.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) {
        orow[j] += aki * brow[j];
      }
    }
  }
}

template <class S>
void add_inplace(Matrix<S>& a, const Matrix<S>& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace versekit
