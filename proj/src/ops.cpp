#include "convnext/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>

namespace cnx {

template <>
void gemm<float>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta,
                 float* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
        return;
    }
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
                  const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
                  double* c, std::size_t ldc) {
    if (m == 0 || n == 0) return;
    if (k == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
        return;
    }
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        }
        out[i] = da == 1 ? db : da;
    }
    return out;
}

namespace {

// Strides of `s` aligned to the broadcast shape `out`, zero on broadcast axes.
std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
    const std::size_t nd = out.size();
    std::vector<std::size_t> st(nd, 0);
    std::size_t stride = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        const std::size_t oi = i + (nd - s.size());
        st[oi] = s[i] == 1 ? 0 : stride;
        stride *= s[i];
    }
    return st;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    const std::size_t n = numel_of(out);
    if (sa == out && sb == out) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    }
    const std::size_t nb = numel_of(sb);
    if (sa == out && nb == 1) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
        return;
    }
    // b is a trailing suffix of out (bias-style broadcast)
    if (sa == out && sb.size() <= out.size() &&
        std::equal(sb.begin(), sb.end(), out.end() - static_cast<std::ptrdiff_t>(sb.size()))) {
        for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
        return;
    }
    // b equals out except a trailing 1 (per-site mask style broadcast)
    if (sa == out && sb.size() == out.size() && !out.empty() && sb.back() == 1 &&
        std::equal(sb.begin(), sb.end() - 1, out.begin())) {
        const std::size_t c = out.back();
        for (std::size_t i = 0; i < n; ++i) f(i, i, i / c);
        return;
    }
    const std::size_t nd = out.size();
    const auto st_a = aligned_strides(sa, out);
    const auto st_b = aligned_strides(sb, out);
    std::vector<std::size_t> idx(nd, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += st_a[d];
            ib += st_b[d];
            if (idx[d] < out[d]) break;
            ia -= st_a[d] * idx[d];
            ib -= st_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

}  // namespace

template <class T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor<T> out(target);
    T* po = out.data();
    const T* pg = g.data();
    for_each_broadcast(g.shape(), g.shape(), target,
                       [&](std::size_t i, std::size_t, std::size_t it) { po[it] += pg[i]; });
    return out;
}

template <class T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, const Var<T>& b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(out_shape);
    const T* pa = a.value().data();
    const T* pb = b.value().data();
    T* po = out.data();
    switch (op) {
        case ElementwiseOp::add:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] + pb[ib]; });
            break;
        case ElementwiseOp::sub:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] - pb[ib]; });
            break;
        case ElementwiseOp::mul:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] * pb[ib]; });
            break;
        case ElementwiseOp::div:
            for_each_broadcast(out_shape, a.shape(), b.shape(),
                               [&](std::size_t i, std::size_t ia, std::size_t ib) { po[i] = pa[ia] / pb[ib]; });
            break;
    }
    Tensor<T> av = a.value(), bv = b.value();
    return Tape<T>::record(out, {&a, &b}, [op, av, bv, out_shape](const Tensor<T>& g, GradSink<T>& sink) {
        const T* pg = g.data();
        const T* pa = av.data();
        const T* pb = bv.data();
        if (sink.wants(0)) {
            Tensor<T> ga(out_shape);
            T* p = ga.data();
            switch (op) {
                case ElementwiseOp::add:
                case ElementwiseOp::sub:
                    ga = g;
                    break;
                case ElementwiseOp::mul:
                    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                                       [&](std::size_t i, std::size_t, std::size_t ib) { p[i] = pg[i] * pb[ib]; });
                    break;
                case ElementwiseOp::div:
                    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                                       [&](std::size_t i, std::size_t, std::size_t ib) { p[i] = pg[i] / pb[ib]; });
                    break;
            }
            sink.add(0, sum_to(ga, av.shape()));
        }
        if (sink.wants(1)) {
            Tensor<T> gb(out_shape);
            T* p = gb.data();
            switch (op) {
                case ElementwiseOp::add:
                    gb = g;
                    break;
                case ElementwiseOp::sub:
                    for (std::size_t i = 0; i < g.numel(); ++i) p[i] = -pg[i];
                    break;
                case ElementwiseOp::mul:
                    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t) { p[i] = pg[i] * pa[ia]; });
                    break;
                case ElementwiseOp::div:
                    for_each_broadcast(out_shape, av.shape(), bv.shape(),
                                       [&](std::size_t i, std::size_t ia, std::size_t ib) {
                                           p[i] = -pg[i] * pa[ia] / (pb[ib] * pb[ib]);
                                       });
                    break;
            }
            sink.add(1, sum_to(gb, bv.shape()));
        }
    });
}

template <class T>
Var<T> scalar_mul(const Var<T>& a, double s) {
    Tensor<T> out(a.shape());
    const T k = static_cast<T>(s);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * k;
    return Tape<T>::record(out, {&a}, [k](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> ga(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * k;
        sink.add(0, ga);
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double s) {
    Tensor<T> out(a.shape());
    const T k = static_cast<T>(s);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + k;
    return Tape<T>::record(out, {&a}, [](const Tensor<T>& g, GradSink<T>& sink) { sink.add(0, g); });
}

template <class T>
Var<T> square(const Var<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * a.value()[i];
    Tensor<T> av = a.value();
    return Tape<T>::record(out, {&a}, [av](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> ga(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = T(2) * av[i] * g[i];
        sink.add(0, ga);
    });
}

namespace {

struct ReducePlan {
    Shape out_shape;       // with keepdims
    Shape result_shape;    // honoring keepdims flag
    std::size_t count = 1; // elements folded into each output
};

ReducePlan plan_reduce(const Shape& in, std::vector<std::size_t>& axes, bool keepdims) {
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (auto ax : axes) {
        if (ax >= in.size()) {
            throw ShapeError("reduce axis " + std::to_string(ax) + " is invalid for shape " + shape_str(in));
        }
    }
    ReducePlan p;
    p.out_shape = in;
    for (auto ax : axes) {
        p.count *= in[ax];
        p.out_shape[ax] = 1;
    }
    if (keepdims) {
        p.result_shape = p.out_shape;
    } else {
        for (std::size_t d = 0; d < in.size(); ++d)
            if (!std::binary_search(axes.begin(), axes.end(), d)) p.result_shape.push_back(in[d]);
    }
    return p;
}

}  // namespace

template <class T>
Var<T> reduce(ReduceOp op, const Var<T>& x, std::vector<std::size_t> axes, bool keepdims) {
    const ReducePlan plan = plan_reduce(x.shape(), axes, keepdims);
    const Shape in_shape = x.shape();
    // Accumulate in a fixed sequential order (input index order) per output.
    Tensor<T> acc(plan.out_shape, op == ReduceOp::max ? -std::numeric_limits<T>::infinity() : T(0));
    Tensor<T> argmax;
    if (op == ReduceOp::max) argmax = Tensor<T>(plan.out_shape);
    const T* px = x.value().data();
    T* pa = acc.data();
    for_each_broadcast(in_shape, in_shape, plan.out_shape, [&](std::size_t i, std::size_t, std::size_t o) {
        const T v = px[i];
        switch (op) {
            case ReduceOp::sum:
            case ReduceOp::mean:
                pa[o] += v;
                break;
            case ReduceOp::l2_norm:
                pa[o] += v * v;
                break;
            case ReduceOp::l1_norm:
                pa[o] += std::abs(v);
                break;
            case ReduceOp::max:
                if (v > pa[o]) {
                    pa[o] = v;
                    argmax[o] = static_cast<T>(i);
                }
                break;
        }
    });
    if (op == ReduceOp::mean)
        for (std::size_t o = 0; o < acc.numel(); ++o) pa[o] /= static_cast<T>(plan.count);
    if (op == ReduceOp::l2_norm)
        for (std::size_t o = 0; o < acc.numel(); ++o) pa[o] = std::sqrt(pa[o]);
    if (op == ReduceOp::max && plan.count > 0 && x.value().numel() > 0) {
        // first occurrence wins; seed with first element of each group
        Tensor<T> first(plan.out_shape, T(-1));
        for_each_broadcast(in_shape, in_shape, plan.out_shape, [&](std::size_t i, std::size_t, std::size_t o) {
            if (first[o] < 0) first[o] = static_cast<T>(i);
        });
        for (std::size_t o = 0; o < acc.numel(); ++o)
            if (pa[o] == -std::numeric_limits<T>::infinity()) argmax[o] = first[o];
    }
    Tensor<T> result = acc.reshaped(plan.result_shape);
    Tensor<T> xv = x.value();
    const Shape out_shape = plan.out_shape;
    const std::size_t count = plan.count;
    return Tape<T>::record(result, {&x}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> gx(in_shape);
        T* pgx = gx.data();
        const T* pg = g.data();
        const T* pxv = xv.data();
        const T* pacc = acc.data();
        switch (op) {
            case ReduceOp::sum:
                for_each_broadcast(in_shape, in_shape, out_shape,
                                   [&](std::size_t i, std::size_t, std::size_t o) { pgx[i] = pg[o]; });
                break;
            case ReduceOp::mean: {
                const T inv = T(1) / static_cast<T>(count);
                for_each_broadcast(in_shape, in_shape, out_shape,
                                   [&](std::size_t i, std::size_t, std::size_t o) { pgx[i] = pg[o] * inv; });
                break;
            }
            case ReduceOp::l2_norm:
                for_each_broadcast(in_shape, in_shape, out_shape, [&](std::size_t i, std::size_t, std::size_t o) {
                    pgx[i] = pacc[o] > T(0) ? pg[o] * pxv[i] / pacc[o] : T(0);
                });
                break;
            case ReduceOp::l1_norm:
                for_each_broadcast(in_shape, in_shape, out_shape, [&](std::size_t i, std::size_t, std::size_t o) {
                    const T s = pxv[i] > T(0) ? T(1) : (pxv[i] < T(0) ? T(-1) : T(0));
                    pgx[i] = pg[o] * s;
                });
                break;
            case ReduceOp::max:
                for (std::size_t o = 0; o < argmax.numel(); ++o)
                    pgx[static_cast<std::size_t>(argmax[o])] += pg[o];
                break;
        }
        sink.add(0, gx);
    });
}

template <class T>
Var<T> reduce_all(ReduceOp op, const Var<T>& x) {
    std::vector<std::size_t> axes(x.shape().size());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return reduce(op, x, axes, false);
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> out = x.value().reshaped(std::move(shape));
    const Shape in_shape = x.shape();
    return Tape<T>::record(out, {&x}, [in_shape](const Tensor<T>& g, GradSink<T>& sink) {
        sink.add(0, g.reshaped(in_shape));
    });
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> out({m, n});
    gemm<T>(false, false, m, n, k, T(1), a.value().data(), k, b.value().data(), n, T(0), out.data(), n);
    Tensor<T> av = a.value(), bv = b.value();
    return Tape<T>::record(out, {&a, &b}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        if (sink.wants(0)) {
            Tensor<T> ga({m, k});
            gemm<T>(false, true, m, k, n, T(1), g.data(), n, bv.data(), n, T(0), ga.data(), k);
            sink.add(0, ga);
        }
        if (sink.wants(1)) {
            Tensor<T> gb({k, n});
            gemm<T>(true, false, k, n, m, T(1), av.data(), k, g.data(), n, T(0), gb.data(), n);
            sink.add(1, gb);
        }
    });
}

template <class T>
Var<T> dot(const Var<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("dot shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    T s = 0;
    for (std::size_t i = 0; i < b.numel(); ++i) s += a.value()[i] * b[i];
    return Tape<T>::record(Tensor<T>::scalar(s), {&a}, [b](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> ga(b.shape());
        const T gs = g[0];
        for (std::size_t i = 0; i < b.numel(); ++i) ga[i] = gs * b[i];
        sink.add(0, ga);
    });
}

#define CNX_INSTANTIATE(T)                                                                  \
    template Tensor<T> sum_to(const Tensor<T>&, const Shape&);                              \
    template Var<T> elementwise(ElementwiseOp, const Var<T>&, const Var<T>&);               \
    template Var<T> scalar_mul(const Var<T>&, double);                                      \
    template Var<T> add_scalar(const Var<T>&, double);                                      \
    template Var<T> square(const Var<T>&);                                                  \
    template Var<T> reduce(ReduceOp, const Var<T>&, std::vector<std::size_t>, bool);        \
    template Var<T> reduce_all(ReduceOp, const Var<T>&);                                    \
    template Var<T> reshape(const Var<T>&, Shape);                                          \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                   \
    template Var<T> dot(const Var<T>&, const Tensor<T>&);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
