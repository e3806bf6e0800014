#include "convnext/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "convnext/kernels.hpp"
#include "convnext/ops.hpp"

namespace cnx {

void ConvSpec::validate() const {
    if (kernel_h == 0 || kernel_w == 0) throw ShapeError("conv kernel extents must be positive");
    if (stride == 0) throw ShapeError("conv stride must be positive");
    if (groups == 0) throw ShapeError("conv groups must be positive");
    if (in_channels % groups != 0 || out_channels % groups != 0) {
        throw ShapeError("conv channels (" + std::to_string(in_channels) + ", " + std::to_string(out_channels) +
                         ") are not divisible by groups " + std::to_string(groups));
    }
}

namespace {

void check_conv_shapes(const Shape& xs, const Shape& ws, const Shape* bs, const ConvSpec& spec) {
    spec.validate();
    if (xs.size() != 4) throw ShapeError("conv2d expects NHWC input, got " + shape_str(xs));
    if (xs[3] != spec.in_channels) {
        throw ShapeError("conv2d input has " + std::to_string(xs[3]) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
    }
    if (ws != spec.weight_shape()) {
        throw ShapeError("conv2d weight shape " + shape_str(ws) + " does not match expected " +
                         shape_str(spec.weight_shape()));
    }
    if (bs && *bs != Shape{spec.out_channels}) {
        throw ShapeError("conv2d bias shape " + shape_str(*bs) + " does not match (" +
                         std::to_string(spec.out_channels) + ")");
    }
    if (xs[1] + 2 * spec.padding < spec.kernel_h || xs[2] + 2 * spec.padding < spec.kernel_w) {
        throw ShapeError("conv2d input " + shape_str(xs) + " is smaller than the padded kernel");
    }
}

}  // namespace

template <class T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, const ConvSpec& spec) {
    const Shape bshape = bias ? bias->shape() : Shape{};
    check_conv_shapes(x.shape(), w.shape(), bias ? &bshape : nullptr, spec);
    const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), cin = x.dim(3);
    const std::size_t ho = spec.out_extent(h, spec.kernel_h), wo = spec.out_extent(wd, spec.kernel_w);
    const std::size_t cout = spec.out_channels, cg = cin / spec.groups, og = cout / spec.groups;
    Tensor<T> out({n, ho, wo, cout});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox)
                for (std::size_t co = 0; co < cout; ++co) {
                    const std::size_t g = co / og;
                    double acc = bias ? static_cast<double>((*bias)[co]) : 0.0;
                    for (std::size_t ky = 0; ky < spec.kernel_h; ++ky)
                        for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
                            const long iy = static_cast<long>(oy * spec.stride + ky) - static_cast<long>(spec.padding);
                            const long ix = static_cast<long>(ox * spec.stride + kx) - static_cast<long>(spec.padding);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                            for (std::size_t ci = 0; ci < cg; ++ci) {
                                const double xv = x[((b * h + iy) * wd + ix) * cin + g * cg + ci];
                                const double wv = w[((ky * spec.kernel_w + kx) * cg + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    out[((b * ho + oy) * wo + ox) * cout + co] = static_cast<T>(acc);
                }
    return out;
}

namespace {

// Column matrix for one group: rows (n, oy, ox), columns (ky, kx, ci).
template <class T>
void im2col(const T* x, const Shape& xs, const ConvSpec& spec, std::size_t group, std::size_t ho, std::size_t wo,
            T* cols) {
    const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3];
    const std::size_t cg = cin / spec.groups;
    const std::size_t kcols = spec.kernel_h * spec.kernel_w * cg;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T* row = cols + ((b * ho + oy) * wo + ox) * kcols;
                for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
                    const long iy = static_cast<long>(oy * spec.stride + ky) - static_cast<long>(spec.padding);
                    for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
                        const long ix = static_cast<long>(ox * spec.stride + kx) - static_cast<long>(spec.padding);
                        T* dst = row + (ky * spec.kernel_w + kx) * cg;
                        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
                            std::fill(dst, dst + cg, T(0));
                        } else {
                            const T* src = x + ((b * h + iy) * w + ix) * cin + group * cg;
                            std::copy(src, src + cg, dst);
                        }
                    }
                }
            }
}

template <class T>
void col2im_add(const T* cols, const Shape& xs, const ConvSpec& spec, std::size_t group, std::size_t ho,
                std::size_t wo, T* dx) {
    const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3];
    const std::size_t cg = cin / spec.groups;
    const std::size_t kcols = spec.kernel_h * spec.kernel_w * cg;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const T* row = cols + ((b * ho + oy) * wo + ox) * kcols;
                for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
                    const long iy = static_cast<long>(oy * spec.stride + ky) - static_cast<long>(spec.padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
                        const long ix = static_cast<long>(ox * spec.stride + kx) - static_cast<long>(spec.padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const T* src = row + (ky * spec.kernel_w + kx) * cg;
                        T* dst = dx + ((b * h + iy) * w + ix) * cin + group * cg;
                        for (std::size_t c = 0; c < cg; ++c) dst[c] += src[c];
                    }
                }
            }
}

bool is_plain_pointwise(const ConvSpec& s) {
    return s.kernel_h == 1 && s.kernel_w == 1 && s.stride == 1 && s.padding == 0 && s.groups == 1;
}

}  // namespace

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias, const ConvSpec& spec,
              MacLog* log, const std::string& name) {
    const Shape bshape = bias ? bias->shape() : Shape{};
    check_conv_shapes(x.shape(), w.shape(), bias ? &bshape : nullptr, spec);
    const Shape xs = x.shape();
    const std::size_t n = xs[0], h = xs[1], wd = xs[2], cin = xs[3];
    const std::size_t ho = spec.out_extent(h, spec.kernel_h), wo = spec.out_extent(wd, spec.kernel_w);
    const std::size_t cout = spec.out_channels, cg = cin / spec.groups, og = cout / spec.groups;
    const std::size_t m = n * ho * wo, kcols = spec.kernel_h * spec.kernel_w * cg;
    const bool dw = spec.depthwise();
    if (log) {
        const std::uint64_t macs = static_cast<std::uint64_t>(m) * kcols * og * spec.groups;
        log->record({name, LayerKind::dense_conv, macs, macs, m, m});
    }

    Tensor<T> out({n, ho, wo, cout});
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    const T* bptr = bias ? bias->value().data() : nullptr;
    if (dw) {
        kernels::depthwise_forward(xv.data(), n, h, wd, cin, wv.data(), spec.kernel_h, spec.kernel_w, spec.stride,
                                   spec.padding, bptr, out.data(), ho, wo);
    } else {
        Tensor<T> cols;
        for (std::size_t g = 0; g < spec.groups; ++g) {
            const T* a = xv.data();
            if (!is_plain_pointwise(spec)) {
                if (!cols.defined()) cols = Tensor<T>({m, kcols});
                im2col(xv.data(), xs, spec, g, ho, wo, cols.data());
                a = cols.data();
            }
            gemm<T>(false, false, m, og, kcols, T(1), a, kcols, wv.data() + g * og, cout, T(0),
                    out.data() + g * og, cout);
        }
        if (bptr) {
            T* po = out.data();
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < cout; ++c) po[r * cout + c] += bptr[c];
        }
    }

    std::vector<const Var<T>*> inputs{&x, &w};
    if (bias) inputs.push_back(&*bias);
    const bool has_bias = bias.has_value();
    return Tape<T>::record(out, inputs, [=](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> dx, dwt;
        if (sink.wants(0)) dx = Tensor<T>(xs);
        if (sink.wants(1)) dwt = Tensor<T>(wv.shape());
        if (dw) {
            kernels::depthwise_backward(xv.data(), n, h, wd, cin, wv.data(), spec.kernel_h, spec.kernel_w,
                                        spec.stride, spec.padding, g.data(), ho, wo,
                                        dx.defined() ? dx.data() : nullptr, dwt.defined() ? dwt.data() : nullptr);
        } else {
            Tensor<T> cols, dcols;
            const bool plain = is_plain_pointwise(spec);
            for (std::size_t gi = 0; gi < spec.groups; ++gi) {
                if (dwt.defined()) {
                    const T* a = xv.data();
                    if (!plain) {
                        if (!cols.defined()) cols = Tensor<T>({m, kcols});
                        im2col(xv.data(), xs, spec, gi, ho, wo, cols.data());
                        a = cols.data();
                    }
                    gemm<T>(true, false, kcols, og, m, T(1), a, kcols, g.data() + gi * og, cout, T(0),
                            dwt.data() + gi * og, cout);
                }
                if (dx.defined()) {
                    if (plain) {
                        gemm<T>(false, true, m, kcols, og, T(1), g.data(), cout, wv.data(), cout, T(0), dx.data(),
                                kcols);
                    } else {
                        if (!dcols.defined()) dcols = Tensor<T>({m, kcols});
                        gemm<T>(false, true, m, kcols, og, T(1), g.data() + gi * og, cout, wv.data() + gi * og, cout,
                                T(0), dcols.data(), kcols);
                        col2im_add(dcols.data(), xs, spec, gi, ho, wo, dx.data());
                    }
                }
            }
        }
        if (dx.defined()) sink.add(0, dx);
        if (dwt.defined()) sink.add(1, dwt);
        if (has_bias && sink.wants(2)) {
            Tensor<T> db({cout});
            const T* pg = g.data();
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < cout; ++c) db[c] += pg[r * cout + c];
            sink.add(2, db);
        }
    });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias, MacLog* log,
              const std::string& name) {
    if (w.shape().size() != 2 || x.shape().empty() || x.shape().back() != w.shape()[0]) {
        throw ShapeError("linear shape mismatch: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()));
    }
    const std::size_t cin = w.shape()[0], cout = w.shape()[1];
    if (bias && bias->shape() != Shape{cout}) {
        throw ShapeError("linear bias shape " + shape_str(bias->shape()) + " does not match (" +
                         std::to_string(cout) + ")");
    }
    const std::size_t rows = x.value().numel() / cin;
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    if (log) {
        const std::uint64_t macs = static_cast<std::uint64_t>(rows) * cin * cout;
        log->record({name, LayerKind::pointwise, macs, macs, rows, rows});
    }
    Tensor<T> out(out_shape);
    const Tensor<T>& xv = x.value();
    const Tensor<T>& wv = w.value();
    gemm<T>(false, false, rows, cout, cin, T(1), xv.data(), cin, wv.data(), cout, T(0), out.data(), cout);
    if (bias) {
        const T* pb = bias->value().data();
        T* po = out.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cout; ++c) po[r * cout + c] += pb[c];
    }
    std::vector<const Var<T>*> inputs{&x, &w};
    if (bias) inputs.push_back(&*bias);
    const bool has_bias = bias.has_value();
    const Shape xs = x.shape();
    return Tape<T>::record(out, inputs, [=](const Tensor<T>& g, GradSink<T>& sink) {
        if (sink.wants(0)) {
            Tensor<T> dx(xs);
            gemm<T>(false, true, rows, cin, cout, T(1), g.data(), cout, wv.data(), cout, T(0), dx.data(), cin);
            sink.add(0, dx);
        }
        if (sink.wants(1)) {
            Tensor<T> dwt({cin, cout});
            gemm<T>(true, false, cin, cout, rows, T(1), xv.data(), cin, g.data(), cout, T(0), dwt.data(), cout);
            sink.add(1, dwt);
        }
        if (has_bias && sink.wants(2)) {
            Tensor<T> db({cout});
            const T* pg = g.data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) db[c] += pg[r * cout + c];
            sink.add(2, db);
        }
    });
}

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps) {
    if (x.shape().empty()) throw ShapeError("layer_norm on a scalar");
    const std::size_t c = x.shape().back();
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw ShapeError("layer_norm affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match channel extent " + std::to_string(c));
    }
    const std::size_t rows = c ? x.value().numel() / c : 0;
    Tensor<T> out(x.shape());
    Tensor<T> xhat(x.shape());
    Tensor<T> rstd({rows});
    kernels::layer_norm_rows(x.value().data(), rows, c, gamma.value().data(), beta.value().data(), static_cast<T>(eps),
                             out.data(), xhat.data(), rstd.data());
    Tensor<T> gv = gamma.value();
    return Tape<T>::record(out, {&x, &gamma, &beta}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        const T* pg = g.data();
        const T* xh = xhat.data();
        if (sink.wants(0)) {
            Tensor<T> dx(xhat.shape());
            kernels::layer_norm_backward_rows(pg, xh, rstd.data(), gv.data(), rows, c, dx.data());
            sink.add(0, dx);
        }
        if (sink.wants(1) || sink.wants(2)) {
            Tensor<T> dg({c}), db({c});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j) {
                    dg[j] += pg[r * c + j] * xh[r * c + j];
                    db[j] += pg[r * c + j];
                }
            sink.add(1, dg);
            sink.add(2, db);
        }
    });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    T* po = out.data();
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) po[i] = kernels::gelu_value(px[i]);
    Tensor<T> xv = x.value();
    return Tape<T>::record(out, {&x}, [xv](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> dx(xv.shape());
        for (std::size_t i = 0; i < xv.numel(); ++i) dx[i] = g[i] * kernels::gelu_grad(xv[i]);
        sink.add(0, dx);
    });
}

std::vector<double> drop_path_scales(std::size_t samples, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw std::invalid_argument("drop_path rate must lie in [0, 1), got " + std::to_string(rate));
    }
    std::vector<double> scales(samples, 1.0);
    if (!training || rate == 0.0) return scales;
    const double keep = 1.0 - rate;
    for (auto& s : scales) s = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    return scales;
}

std::vector<std::size_t> uniform_segments(std::size_t samples, std::size_t rows_per_sample) {
    std::vector<std::size_t> seg(samples + 1);
    for (std::size_t s = 0; s <= samples; ++s) seg[s] = s * rows_per_sample;
    return seg;
}

template <class T>
Var<T> scale_row_segments(const Var<T>& x, const std::vector<double>& scales, const std::vector<std::size_t>& segments) {
    if (segments.size() != scales.size() + 1) throw ShapeError("scale_row_segments: segment/scale count mismatch");
    const std::size_t c = x.shape().empty() ? 1 : x.shape().back();
    if (segments.back() * c != x.value().numel()) {
        throw ShapeError("scale_row_segments: segments cover " + std::to_string(segments.back()) + " rows, tensor " +
                         shape_str(x.shape()) + " has " + std::to_string(c ? x.value().numel() / c : 0));
    }
    auto apply = [scales, segments, c](const Tensor<T>& in) {
        Tensor<T> o(in.shape());
        for (std::size_t s = 0; s < scales.size(); ++s) {
            const T k = static_cast<T>(scales[s]);
            for (std::size_t i = segments[s] * c; i < segments[s + 1] * c; ++i) o[i] = in[i] * k;
        }
        return o;
    };
    return Tape<T>::record(apply(x.value()), {&x},
                           [apply](const Tensor<T>& g, GradSink<T>& sink) { sink.add(0, apply(g)); });
}

template <class T>
Var<T> drop_path(const Var<T>& x, const Var<T>& branch, double rate, bool training, Rng& rng) {
    if (x.shape() != branch.shape()) {
        throw ShapeError("drop_path shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(branch.shape()));
    }
    const std::size_t n = x.shape().empty() ? 1 : x.shape()[0];
    const auto scales = drop_path_scales(n, rate, training, rng);
    bool all_ones = true;
    for (double s : scales) all_ones = all_ones && s == 1.0;
    if (all_ones) return add(x, branch);
    const std::size_t c = x.shape().back();
    const std::size_t rows = x.value().numel() / c;
    return add(x, scale_row_segments(branch, scales, uniform_segments(n, rows / n)));
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2) throw ShapeError("cross_entropy expects N x K logits, got " + shape_str(logits.shape()));
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != n) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                             std::to_string(n) + " rows");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                                    std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
        }
    }
    const T* pl = logits.value().data();
    Tensor<T> probs({n, k});
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = pl + i * k;
        T mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double z = 0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx)) / z);
        total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[labels[i]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
    return Tape<T>::record(out, {&logits}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> d({n, k});
        const T scale = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j)
                d[i * k + j] = (probs[i * k + j] - (static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0))) * scale;
        sink.add(0, d);
    });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    if (x.shape().size() != 4) throw ShapeError("global_avg_pool expects NHWC, got " + shape_str(x.shape()));
    return reduce(ReduceOp::mean, x, {1, 2}, false);
}

#define CNX_INSTANTIATE(T)                                                                                   \
    template Tensor<T> conv2d_reference(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, const ConvSpec&); \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, const ConvSpec&, MacLog*, \
                           const std::string&);                                                              \
    template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, MacLog*,              \
                           const std::string&);                                                              \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                         \
    template Var<T> gelu(const Var<T>&);                                                                     \
    template Var<T> scale_row_segments(const Var<T>&, const std::vector<double>&,                            \
                                       const std::vector<std::size_t>&);                                     \
    template Var<T> drop_path(const Var<T>&, const Var<T>&, double, bool, Rng&);                             \
    template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&);                                   \
    template Var<T> global_avg_pool(const Var<T>&);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
