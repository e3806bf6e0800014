#include "convnext/sparse.hpp"

#include <algorithm>

#include "convnext/kernels.hpp"
#include "convnext/ops.hpp"

namespace cnx {

CoordMap::CoordMap(std::size_t n, std::size_t h, std::size_t w, std::vector<Site> sites)
    : n_(n), h_(h), w_(w), sites_(std::move(sites)), segments_(n + 1, 0) {
    index_.reserve(sites_.size());
    std::uint64_t prev = 0;
    for (std::size_t i = 0; i < sites_.size(); ++i) {
        const Site& s = sites_[i];
        if (s.b >= n_ || s.r >= h_ || s.c >= w_) {
            throw ShapeError("coordinate (" + std::to_string(s.b) + ", " + std::to_string(s.r) + ", " +
                             std::to_string(s.c) + ") outside a " + std::to_string(n_) + "x" + std::to_string(h_) +
                             "x" + std::to_string(w_) + " grid");
        }
        const std::uint64_t k = key(s.b, s.r, s.c);
        if (i > 0 && k <= prev) throw ShapeError("coordinates must be unique and in batch-major row-major order");
        prev = k;
        index_.emplace(k, static_cast<long>(i));
        ++segments_[s.b + 1];
    }
    for (std::size_t b = 0; b < n_; ++b) segments_[b + 1] += segments_[b];
}

std::shared_ptr<const CoordMap> CoordMap::from_mask(const MaskGrid& mask) {
    std::vector<Site> sites;
    sites.reserve(mask.data.size() - mask.total_masked());
    for (std::size_t b = 0; b < mask.n; ++b)
        for (std::size_t r = 0; r < mask.h; ++r)
            for (std::size_t c = 0; c < mask.w; ++c)
                if (!mask.masked(b, r, c))
                    sites.push_back({static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(r),
                                     static_cast<std::uint32_t>(c)});
    return std::make_shared<const CoordMap>(mask.n, mask.h, mask.w, std::move(sites));
}

long CoordMap::find(long b, long r, long c) const {
    if (b < 0 || r < 0 || c < 0 || b >= static_cast<long>(n_) || r >= static_cast<long>(h_) ||
        c >= static_cast<long>(w_))
        return -1;
    const auto it = index_.find(key(b, r, c));
    return it == index_.end() ? -1 : it->second;
}

const std::vector<long>& CoordMap::kernel_map(std::size_t k, std::size_t pad) const {
    std::lock_guard<std::mutex> lock(cache_mutex_);
    auto [it, inserted] = kernel_maps_.try_emplace({k, pad});
    if (!inserted) return it->second;
    std::vector<long>& table = it->second;
    const std::size_t taps = k * k;
    table.assign(sites_.size() * taps, -1);
    for (std::size_t i = 0; i < sites_.size(); ++i) {
        const Site& s = sites_[i];
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const long r = static_cast<long>(s.r + ky) - static_cast<long>(pad);
                const long c = static_cast<long>(s.c + kx) - static_cast<long>(pad);
                table[i * taps + ky * k + kx] = find(s.b, r, c);
            }
    }
    return table;
}

std::shared_ptr<const CoordMap> CoordMap::coarsen(std::size_t factor) const {
    if (factor == 0 || h_ % factor != 0 || w_ % factor != 0) {
        throw ShapeError("cannot coarsen a " + std::to_string(h_) + "x" + std::to_string(w_) + " map by " +
                         std::to_string(factor));
    }
    const std::size_t ch = h_ / factor, cw = w_ / factor;
    std::vector<std::uint32_t> counts(n_ * ch * cw, 0);
    for (const Site& s : sites_) ++counts[(s.b * ch + s.r / factor) * cw + s.c / factor];
    std::vector<Site> out;
    const std::uint32_t full = static_cast<std::uint32_t>(factor * factor);
    for (std::size_t b = 0; b < n_; ++b)
        for (std::size_t r = 0; r < ch; ++r)
            for (std::size_t c = 0; c < cw; ++c) {
                const std::uint32_t cnt = counts[(b * ch + r) * cw + c];
                if (cnt == 0) continue;
                if (cnt != full) {
                    throw ContractViolation("block (" + std::to_string(b) + ", " + std::to_string(r) + ", " +
                                            std::to_string(c) + ") is partially active (" + std::to_string(cnt) +
                                            "/" + std::to_string(full) +
                                            " sites); masks must be upsampled from the coarsest grid");
                }
                out.push_back({static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(r),
                               static_cast<std::uint32_t>(c)});
            }
    return std::make_shared<const CoordMap>(n_, ch, cw, std::move(out));
}

MaskGrid CoordMap::to_mask() const {
    MaskGrid m(n_, h_, w_, 1);
    for (const Site& s : sites_) m.at(s.b, s.r, s.c) = 0;
    return m;
}

namespace {

void check_grid(const Shape& xs, std::size_t n, std::size_t h, std::size_t w, const char* what) {
    if (xs.size() != 4 || xs[0] != n || xs[1] != h || xs[2] != w) {
        throw ShapeError(std::string(what) + ": tensor " + shape_str(xs) + " does not match a " + std::to_string(n) +
                         "x" + std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
}

std::size_t dense_offset(const CoordMap& cm, const Site& s) {
    return (static_cast<std::size_t>(s.b) * cm.height() + s.r) * cm.width() + s.c;
}

}  // namespace

template <class T>
SparseTensor<T> dense_to_sparse(const Var<T>& x, std::shared_ptr<const CoordMap> coords) {
    check_grid(x.shape(), coords->batch(), coords->height(), coords->width(), "dense_to_sparse");
    const std::size_t c = x.shape()[3], rows = coords->size();
    Tensor<T> f({rows, c});
    const T* px = x.value().data();
    for (std::size_t i = 0; i < rows; ++i) {
        const T* src = px + dense_offset(*coords, coords->sites()[i]) * c;
        std::copy(src, src + c, f.data() + i * c);
    }
    const Shape xs = x.shape();
    Var<T> feat = Tape<T>::record(f, {&x}, [coords, xs, c, rows](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> dx(xs);
        for (std::size_t i = 0; i < rows; ++i) {
            const T* src = g.data() + i * c;
            std::copy(src, src + c, dx.data() + dense_offset(*coords, coords->sites()[i]) * c);
        }
        sink.add(0, dx);
    });
    return {std::move(coords), feat};
}

template <class T>
SparseTensor<T> dense_to_sparse(const Var<T>& x, const MaskGrid& mask) {
    return dense_to_sparse(x, CoordMap::from_mask(mask));
}

template <class T>
Var<T> sparse_to_dense(const SparseTensor<T>& x) {
    const auto coords = x.coords;
    const std::size_t c = x.channels(), rows = x.rows();
    if (x.features.shape() != Shape{rows, c}) {
        throw ShapeError("sparse features " + shape_str(x.features.shape()) + " do not match " +
                         std::to_string(rows) + " active sites");
    }
    Tensor<T> out({coords->batch(), coords->height(), coords->width(), c});
    const T* pf = x.features.value().data();
    for (std::size_t i = 0; i < rows; ++i) {
        const T* src = pf + i * c;
        std::copy(src, src + c, out.data() + dense_offset(*coords, coords->sites()[i]) * c);
    }
    return Tape<T>::record(out, {&x.features}, [coords, c, rows](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> df({rows, c});
        for (std::size_t i = 0; i < rows; ++i) {
            const T* src = g.data() + dense_offset(*coords, coords->sites()[i]) * c;
            std::copy(src, src + c, df.data() + i * c);
        }
        sink.add(0, df);
    });
}

namespace {

void check_sparse_conv(std::size_t channels, const Shape& ws, const std::optional<Shape>& bs, const ConvSpec& spec) {
    spec.validate();
    if (channels != spec.in_channels) {
        throw ShapeError("sparse conv input has " + std::to_string(channels) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
    }
    if (ws != spec.weight_shape()) {
        throw ShapeError("sparse conv weight shape " + shape_str(ws) + " does not match expected " +
                         shape_str(spec.weight_shape()));
    }
    if (bs && *bs != Shape{spec.out_channels}) throw ShapeError("sparse conv bias shape " + shape_str(*bs));
}

template <class T>
void add_bias_rows(T* out, const T* b, std::size_t rows, std::size_t c) {
    if (!b) return;
    for (std::size_t r = 0; r < rows; ++r) kernels::channel_bias(out + r * c, b, c);
}

template <class T>
Tensor<T> bias_grad_rows(const Tensor<T>& g, std::size_t rows, std::size_t c) {
    Tensor<T> db({c});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) db[j] += g[r * c + j];
    return db;
}

}  // namespace

template <class T>
SparseTensor<T> submanifold_conv(const SparseTensor<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias,
                                 const ConvSpec& spec, MacLog* log, const std::string& name) {
    check_sparse_conv(x.channels(), w.shape(), bias ? std::optional<Shape>(bias->shape()) : std::nullopt, spec);
    if (spec.stride != 1) {
        throw ShapeError("submanifold_conv needs stride 1 (got " + std::to_string(spec.stride) +
                         "); use strided_sparse_conv for downsampling");
    }
    if (spec.kernel_h != spec.kernel_w || spec.kernel_h % 2 == 0 || spec.padding != (spec.kernel_h - 1) / 2) {
        throw ShapeError("submanifold_conv needs an odd square kernel with pad (k - 1) / 2");
    }
    const bool dw = spec.depthwise();
    if (!dw && spec.groups != 1) throw ShapeError("submanifold_conv supports depthwise or groups == 1 only");

    const auto coords = x.coords;
    const std::size_t k = spec.kernel_h, taps = k * k, rows = coords->size();
    const std::size_t cin = spec.in_channels, cout = spec.out_channels;
    const std::size_t cg = cin / spec.groups, og = cout / spec.groups;
    if (log) {
        const std::uint64_t per_site = static_cast<std::uint64_t>(taps) * cg * og * spec.groups;
        log->record({name, LayerKind::submanifold, per_site * rows, per_site * coords->total_sites(), rows,
                     coords->total_sites()});
    }
    const std::vector<long>& nbr = coords->kernel_map(k, spec.padding);
    const Tensor<T> xv = x.features.value();
    const Tensor<T> wv = w.value();
    const T* bptr = bias ? bias->value().data() : nullptr;
    Tensor<T> out({rows, cout});

    // Per-tap (out_row, in_row) pairs for the gather-GEMM-scatter path.
    std::vector<std::vector<std::pair<long, long>>> pairs;
    if (dw) {
        kernels::depthwise_gather_forward(xv.data(), nbr.data(), rows, taps, cin, wv.data(), bptr, out.data());
    } else {
        pairs.resize(taps);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t t = 0; t < taps; ++t)
                if (nbr[i * taps + t] >= 0) pairs[t].emplace_back(static_cast<long>(i), nbr[i * taps + t]);
        Tensor<T> gbuf, pbuf;
        for (std::size_t t = 0; t < taps; ++t) {
            const auto& pt = pairs[t];
            if (pt.empty()) continue;
            const std::size_t p = pt.size();
            gbuf = Tensor<T>({p, cin});
            pbuf = Tensor<T>({p, cout});
            for (std::size_t q = 0; q < p; ++q)
                std::copy(xv.data() + pt[q].second * cin, xv.data() + (pt[q].second + 1) * cin, gbuf.data() + q * cin);
            gemm<T>(false, false, p, cout, cin, T(1), gbuf.data(), cin, wv.data() + t * cin * cout, cout, T(0),
                    pbuf.data(), cout);
            for (std::size_t q = 0; q < p; ++q) {
                T* o = out.data() + pt[q].first * cout;
                const T* s = pbuf.data() + q * cout;
                for (std::size_t j = 0; j < cout; ++j) o[j] += s[j];
            }
        }
        add_bias_rows(out.data(), bptr, rows, cout);
    }

    std::vector<const Var<T>*> inputs{&x.features, &w};
    if (bias) inputs.push_back(&*bias);
    const bool has_bias = bias.has_value();
    Var<T> feat = Tape<T>::record(out, inputs, [=](const Tensor<T>& g, GradSink<T>& sink) {
        const std::vector<long>& nb = coords->kernel_map(k, spec.padding);
        Tensor<T> dx, dwt;
        if (sink.wants(0)) dx = Tensor<T>({rows, cin});
        if (sink.wants(1)) dwt = Tensor<T>(wv.shape());
        if (dw) {
            kernels::depthwise_gather_backward(xv.data(), nb.data(), rows, taps, cin, wv.data(), g.data(),
                                               dx.defined() ? dx.data() : nullptr,
                                               dwt.defined() ? dwt.data() : nullptr);
        } else {
            for (std::size_t t = 0; t < taps; ++t) {
                const auto& pt = pairs[t];
                if (pt.empty()) continue;
                const std::size_t p = pt.size();
                Tensor<T> gy({p, cout});
                for (std::size_t q = 0; q < p; ++q)
                    std::copy(g.data() + pt[q].first * cout, g.data() + (pt[q].first + 1) * cout, gy.data() + q * cout);
                if (dx.defined()) {
                    Tensor<T> gx({p, cin});
                    gemm<T>(false, true, p, cin, cout, T(1), gy.data(), cout, wv.data() + t * cin * cout, cout, T(0),
                            gx.data(), cin);
                    for (std::size_t q = 0; q < p; ++q) {
                        T* d = dx.data() + pt[q].second * cin;
                        const T* s = gx.data() + q * cin;
                        for (std::size_t j = 0; j < cin; ++j) d[j] += s[j];
                    }
                }
                if (dwt.defined()) {
                    Tensor<T> xg({p, cin});
                    for (std::size_t q = 0; q < p; ++q)
                        std::copy(xv.data() + pt[q].second * cin, xv.data() + (pt[q].second + 1) * cin,
                                  xg.data() + q * cin);
                    gemm<T>(true, false, cin, cout, p, T(1), xg.data(), cin, gy.data(), cout, T(1),
                            dwt.data() + t * cin * cout, cout);
                }
            }
        }
        if (dx.defined()) sink.add(0, dx);
        if (dwt.defined()) sink.add(1, dwt);
        if (has_bias && sink.wants(2)) sink.add(2, bias_grad_rows(g, rows, cout));
    });
    return {coords, feat};
}

template <class T>
SparseTensor<T> strided_sparse_conv(const SparseTensor<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias,
                                    const ConvSpec& spec, MacLog* log, const std::string& name) {
    check_sparse_conv(x.channels(), w.shape(), bias ? std::optional<Shape>(bias->shape()) : std::nullopt, spec);
    if (spec.kernel_h != spec.kernel_w || spec.kernel_h != spec.stride || spec.padding != 0 || spec.groups != 1) {
        throw ShapeError("strided_sparse_conv needs kernel == stride, pad 0 and groups 1");
    }
    const std::size_t k = spec.stride, cin = spec.in_channels, cout = spec.out_channels;
    const auto in_coords = x.coords;
    const auto out_coords = in_coords->coarsen(k);
    const std::size_t rows = out_coords->size(), kcols = k * k * cin;
    if (log) {
        const std::uint64_t per_site = static_cast<std::uint64_t>(kcols) * cout;
        log->record({name, LayerKind::strided, per_site * rows, per_site * out_coords->total_sites(), rows,
                     out_coords->total_sites()});
    }
    // src[i * k * k + t]: input row feeding tap t of output site i.
    std::vector<long> src(rows * k * k);
    for (std::size_t i = 0; i < rows; ++i) {
        const Site& s = out_coords->sites()[i];
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
                src[i * k * k + ky * k + kx] = in_coords->find(s.b, s.r * k + ky, s.c * k + kx);
    }
    const Tensor<T> xv = x.features.value();
    const Tensor<T> wv = w.value();
    auto build_cols = [src, xv, rows, k, cin, kcols]() {
        Tensor<T> cols({rows, kcols});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t t = 0; t < k * k; ++t) {
                const T* s = xv.data() + static_cast<std::size_t>(src[i * k * k + t]) * cin;
                std::copy(s, s + cin, cols.data() + i * kcols + t * cin);
            }
        return cols;
    };
    Tensor<T> out({rows, cout});
    {
        const Tensor<T> cols = build_cols();
        gemm<T>(false, false, rows, cout, kcols, T(1), cols.data(), kcols, wv.data(), cout, T(0), out.data(), cout);
    }
    add_bias_rows(out.data(), bias ? bias->value().data() : nullptr, rows, cout);

    std::vector<const Var<T>*> inputs{&x.features, &w};
    if (bias) inputs.push_back(&*bias);
    const bool has_bias = bias.has_value();
    const std::size_t in_rows = in_coords->size();
    Var<T> feat = Tape<T>::record(out, inputs, [=](const Tensor<T>& g, GradSink<T>& sink) {
        if (sink.wants(0)) {
            Tensor<T> dcols({rows, kcols});
            gemm<T>(false, true, rows, kcols, cout, T(1), g.data(), cout, wv.data(), cout, T(0), dcols.data(), kcols);
            Tensor<T> dx({in_rows, cin});
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t t = 0; t < k * k; ++t) {
                    const T* s = dcols.data() + i * kcols + t * cin;
                    std::copy(s, s + cin, dx.data() + static_cast<std::size_t>(src[i * k * k + t]) * cin);
                }
            sink.add(0, dx);
        }
        if (sink.wants(1)) {
            const Tensor<T> cols = build_cols();
            Tensor<T> dwt(wv.shape());
            gemm<T>(true, false, kcols, cout, rows, T(1), cols.data(), kcols, g.data(), cout, T(0), dwt.data(), cout);
            sink.add(1, dwt);
        }
        if (has_bias && sink.wants(2)) sink.add(2, bias_grad_rows(g, rows, cout));
    });
    return {out_coords, feat};
}

template <class T>
Var<T> apply_mask(const Var<T>& x, const MaskGrid& mask) {
    check_grid(x.shape(), mask.n, mask.h, mask.w, "apply_mask");
    const std::size_t c = x.shape()[3];
    auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.data);
    auto masked_copy = [keep, c](const Tensor<T>& in) {
        Tensor<T> o = in.clone();
        T* p = o.data();
        for (std::size_t s = 0; s < keep->size(); ++s)
            if ((*keep)[s]) std::fill(p + s * c, p + (s + 1) * c, T(0));
        return o;
    };
    return Tape<T>::record(masked_copy(x.value()), {&x},
                           [masked_copy](const Tensor<T>& g, GradSink<T>& sink) { sink.add(0, masked_copy(g)); });
}

template <class T>
Var<T> masked_dense_conv(const Var<T>& x, const MaskGrid& in_mask, const MaskGrid& out_mask, const Var<T>& w,
                         const std::optional<std::type_identity_t<Var<T>>>& bias, const ConvSpec& spec, MacLog* log,
                         const std::string& name) {
    return apply_mask(conv2d(apply_mask(x, in_mask), w, bias, spec, log, name), out_mask);
}

#define CNX_INSTANTIATE(T)                                                                                       \
    template SparseTensor<T> dense_to_sparse(const Var<T>&, const MaskGrid&);                                    \
    template SparseTensor<T> dense_to_sparse(const Var<T>&, std::shared_ptr<const CoordMap>);                    \
    template Var<T> sparse_to_dense(const SparseTensor<T>&);                                                     \
    template SparseTensor<T> submanifold_conv(const SparseTensor<T>&, const Var<T>&, const std::optional<Var<T>>&, \
                                              const ConvSpec&, MacLog*, const std::string&);                     \
    template SparseTensor<T> strided_sparse_conv(const SparseTensor<T>&, const Var<T>&,                          \
                                                 const std::optional<Var<T>>&, const ConvSpec&, MacLog*,          \
                                                 const std::string&);                                            \
    template Var<T> apply_mask(const Var<T>&, const MaskGrid&);                                                  \
    template Var<T> masked_dense_conv(const Var<T>&, const MaskGrid&, const MaskGrid&, const Var<T>&,            \
                                      const std::optional<Var<T>>&, const ConvSpec&, MacLog*, const std::string&);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
