#pragma once

#include <cstddef>
#include <vector>

#include "convnext/autograd.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

enum class ElementwiseOp { add, sub, mul, div };

// Output shape of numpy-style trailing-dimension broadcasting; throws
// ShapeError naming both shapes when incompatible.
Shape broadcast_shape(const Shape& a, const Shape& b);

// Sums g over broadcast dimensions so the result has shape `target`.
template <class T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& target);

template <class T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, const Var<T>& b);

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) { return elementwise(ElementwiseOp::add, a, b); }
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) { return elementwise(ElementwiseOp::sub, a, b); }
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) { return elementwise(ElementwiseOp::mul, a, b); }
template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) { return elementwise(ElementwiseOp::div, a, b); }

template <class T>
Var<T> scalar_mul(const Var<T>& a, double s);

template <class T>
Var<T> add_scalar(const Var<T>& a, double s);

template <class T>
Var<T> square(const Var<T>& a);

enum class ReduceOp { sum, mean, l2_norm, l1_norm, max };

template <class T>
Var<T> reduce(ReduceOp op, const Var<T>& x, std::vector<std::size_t> axes, bool keepdims);

// All axes.
template <class T>
Var<T> reduce_all(ReduceOp op, const Var<T>& x);

template <class T>
Var<T> sum_all(const Var<T>& x) { return reduce_all(ReduceOp::sum, x); }

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);

// 2-D matrix product a (m x k) * b (k x n).
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

// sum(a * b) as a scalar; convenient for projecting outputs in gradient tests.
template <class T>
Var<T> dot(const Var<T>& a, const Tensor<T>& b);

}  // namespace cnx
