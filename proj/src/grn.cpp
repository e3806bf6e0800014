#include "convnext/grn.hpp"

#include <cmath>
#include <stdexcept>

namespace cnx {

const char* grn_aggregation_name(GrnAggregation a) {
    switch (a) {
        case GrnAggregation::l2: return "l2";
        case GrnAggregation::l1: return "l1";
        case GrnAggregation::global_avg: return "avg";
        case GrnAggregation::none: return "none";
    }
    return "?";
}

const char* grn_normalization_name(GrnNormalization n) {
    switch (n) {
        case GrnNormalization::divisive: return "divisive";
        case GrnNormalization::standardize: return "standardize";
        case GrnNormalization::inverse_sum: return "inverse-sum";
        case GrnNormalization::none: return "none";
    }
    return "?";
}

GrnAggregation parse_grn_aggregation(const std::string& s) {
    if (s == "l2") return GrnAggregation::l2;
    if (s == "l1") return GrnAggregation::l1;
    if (s == "avg" || s == "global_avg") return GrnAggregation::global_avg;
    if (s == "none") return GrnAggregation::none;
    throw std::invalid_argument("unknown GRN aggregation '" + s + "' (expected l2, l1, avg, none)");
}

GrnNormalization parse_grn_normalization(const std::string& s) {
    if (s == "divisive") return GrnNormalization::divisive;
    if (s == "standardize") return GrnNormalization::standardize;
    if (s == "inverse-sum" || s == "inverse_sum") return GrnNormalization::inverse_sum;
    if (s == "none") return GrnNormalization::none;
    throw std::invalid_argument("unknown GRN normalization '" + s +
                                "' (expected divisive, standardize, inverse-sum, none)");
}

void GrnConfig::validate() const {
    if (!(eps > 0.0)) throw std::invalid_argument("GRN eps must be positive");
    if (aggregation == GrnAggregation::none && normalization != GrnNormalization::none &&
        normalization != GrnNormalization::divisive) {
        throw std::invalid_argument(std::string("GRN normalization '") + grn_normalization_name(normalization) +
                                    "' without aggregation is not defined; only divisive is supported");
    }
}

namespace {

struct Layout {
    std::size_t rows = 0;
    std::size_t c = 0;
};

Layout layout_of(const Shape& s) {
    if (s.empty()) throw ShapeError("GRN input must have a channel axis");
    Layout l;
    l.c = s.back();
    l.rows = l.c ? numel_of(s) / l.c : 0;
    return l;
}

void check_segments(const std::vector<std::size_t>& seg, std::size_t rows, const std::vector<std::size_t>* counts) {
    if (seg.empty() || seg.front() != 0 || seg.back() != rows) {
        throw ShapeError("GRN segments must start at 0 and end at the row count " + std::to_string(rows));
    }
    for (std::size_t s = 1; s < seg.size(); ++s)
        if (seg[s] < seg[s - 1]) throw ShapeError("GRN segments must be non-decreasing");
    if (counts && counts->size() + 1 != seg.size()) throw ShapeError("GRN counts must have one entry per segment");
}

double channel_divisor(const GrnConfig& cfg, std::size_t c) { return cfg.channel_scale ? static_cast<double>(c) : 1.0; }

// Normalization of one segment row, in double.
void normalize_row(const double* g, std::size_t c, const GrnConfig& cfg, double* n) {
    const double cdiv = channel_divisor(cfg, c);
    switch (cfg.normalization) {
        case GrnNormalization::divisive: {
            double s = 0;
            for (std::size_t k = 0; k < c; ++k) s += g[k];
            const double d = s / cdiv + cfg.eps;
            for (std::size_t k = 0; k < c; ++k) n[k] = g[k] / d;
            break;
        }
        case GrnNormalization::inverse_sum: {
            double s = 0;
            for (std::size_t k = 0; k < c; ++k) s += g[k];
            const double d = s / cdiv + cfg.eps;
            for (std::size_t k = 0; k < c; ++k) n[k] = 1.0 / d;
            break;
        }
        case GrnNormalization::standardize: {
            double mu = 0;
            for (std::size_t k = 0; k < c; ++k) mu += g[k];
            mu /= static_cast<double>(c);
            double var = 0;
            for (std::size_t k = 0; k < c; ++k) var += (g[k] - mu) * (g[k] - mu);
            const double sd = std::sqrt(var / static_cast<double>(c));
            for (std::size_t k = 0; k < c; ++k) n[k] = (g[k] - mu) / (sd + cfg.eps);
            break;
        }
        case GrnNormalization::none:
            for (std::size_t k = 0; k < c; ++k) n[k] = g[k];
            break;
    }
}

// dn -> dg for one segment row.
void normalize_row_backward(const double* g, const double* dn, std::size_t c, const GrnConfig& cfg, double* dg) {
    const double cdiv = channel_divisor(cfg, c);
    switch (cfg.normalization) {
        case GrnNormalization::divisive: {
            double s = 0, dot = 0;
            for (std::size_t k = 0; k < c; ++k) {
                s += g[k];
                dot += dn[k] * g[k];
            }
            const double d = s / cdiv + cfg.eps;
            const double common = dot / (d * d * cdiv);
            for (std::size_t k = 0; k < c; ++k) dg[k] = dn[k] / d - common;
            break;
        }
        case GrnNormalization::inverse_sum: {
            double s = 0, sdn = 0;
            for (std::size_t k = 0; k < c; ++k) {
                s += g[k];
                sdn += dn[k];
            }
            const double d = s / cdiv + cfg.eps;
            const double common = sdn / (d * d * cdiv);
            for (std::size_t k = 0; k < c; ++k) dg[k] = -common;
            break;
        }
        case GrnNormalization::standardize: {
            const double cn = static_cast<double>(c);
            double mu = 0, mdn = 0;
            for (std::size_t k = 0; k < c; ++k) {
                mu += g[k];
                mdn += dn[k];
            }
            mu /= cn;
            mdn /= cn;
            double var = 0, dot = 0;
            for (std::size_t k = 0; k < c; ++k) {
                const double u = g[k] - mu;
                var += u * u;
                dot += dn[k] * u;
            }
            const double sd = std::sqrt(var / cn);
            const double s = sd + cfg.eps;
            const double coef = sd > 0 ? dot / (s * s * cn * sd) : 0.0;
            for (std::size_t k = 0; k < c; ++k) dg[k] = (dn[k] - mdn) / s - coef * (g[k] - mu);
            break;
        }
        case GrnNormalization::none:
            for (std::size_t k = 0; k < c; ++k) dg[k] = dn[k];
            break;
    }
}

double sign_of(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

template <class T>
std::vector<double> aggregate_double(const T* x, std::size_t c, const GrnConfig& cfg,
                                     const std::vector<std::size_t>& seg, const std::vector<std::size_t>* counts) {
    const std::size_t ns = seg.size() - 1;
    std::vector<double> g(ns * c, 0.0);
    for (std::size_t s = 0; s < ns; ++s) {
        double* gs = g.data() + s * c;
        for (std::size_t r = seg[s]; r < seg[s + 1]; ++r) {
            const T* xr = x + r * c;
            switch (cfg.aggregation) {
                case GrnAggregation::l2:
                    for (std::size_t k = 0; k < c; ++k) gs[k] += static_cast<double>(xr[k]) * xr[k];
                    break;
                case GrnAggregation::l1:
                    for (std::size_t k = 0; k < c; ++k) gs[k] += std::abs(static_cast<double>(xr[k]));
                    break;
                case GrnAggregation::global_avg:
                    for (std::size_t k = 0; k < c; ++k) gs[k] += xr[k];
                    break;
                case GrnAggregation::none:
                    break;
            }
        }
        if (cfg.aggregation == GrnAggregation::l2) {
            for (std::size_t k = 0; k < c; ++k) gs[k] = std::sqrt(gs[k]);
        } else if (cfg.aggregation == GrnAggregation::global_avg) {
            const std::size_t cnt = counts ? (*counts)[s] : seg[s + 1] - seg[s];
            const double inv = cnt ? 1.0 / static_cast<double>(cnt) : 0.0;
            for (std::size_t k = 0; k < c; ++k) gs[k] *= inv;
        }
    }
    return g;
}

}  // namespace

template <class T>
Tensor<T> grn_aggregate(const Tensor<T>& x, const GrnConfig& cfg, const std::vector<std::size_t>& segments,
                        const std::vector<std::size_t>* counts) {
    cfg.validate();
    if (cfg.aggregation == GrnAggregation::none) throw std::invalid_argument("grn_aggregate with aggregation 'none'");
    const Layout l = layout_of(x.shape());
    check_segments(segments, l.rows, counts);
    const auto g = aggregate_double(x.data(), l.c, cfg, segments, counts);
    Tensor<T> out({segments.size() - 1, l.c});
    for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<T>(g[i]);
    return out;
}

template <class T>
Tensor<T> grn_normalize(const Tensor<T>& gx, const GrnConfig& cfg) {
    cfg.validate();
    const Layout l = layout_of(gx.shape());
    Tensor<T> out(gx.shape());
    std::vector<double> g(l.c), n(l.c);
    for (std::size_t r = 0; r < l.rows; ++r) {
        for (std::size_t k = 0; k < l.c; ++k) g[k] = gx[r * l.c + k];
        normalize_row(g.data(), l.c, cfg, n.data());
        for (std::size_t k = 0; k < l.c; ++k) out[r * l.c + k] = static_cast<T>(n[k]);
    }
    return out;
}

namespace {

// Per-site variant: n_rk = |x_rk| / (mean_j |x_rj| + eps).
template <class T>
Var<T> grn_per_site(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const GrnConfig& cfg) {
    const Layout l = layout_of(x.shape());
    const std::size_t rows = l.rows, c = l.c;
    const double cdiv = channel_divisor(cfg, c);
    const Tensor<T> xv = x.value();
    const T* px = xv.data();
    const T* pg = gamma.value().data();
    const T* pb = beta.value().data();
    Tensor<T> out(x.shape());
    Tensor<T> denom({rows});
    const T res = cfg.residual ? T(1) : T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * c;
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) s += std::abs(static_cast<double>(xr[k]));
        const double d = s / cdiv + cfg.eps;
        denom[r] = static_cast<T>(d);
        for (std::size_t k = 0; k < c; ++k) {
            const T z = static_cast<T>(xr[k] * std::abs(static_cast<double>(xr[k])) / d);
            out[r * c + k] = pg[k] * z + pb[k] + res * xr[k];
        }
    }
    const Tensor<T> gv = gamma.value();
    return Tape<T>::record(out, {&x, &gamma, &beta}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> dx(xv.shape()), dgam({c}), dbet({c});
        std::vector<double> dz(c);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * c;
            const T* gr = g.data() + r * c;
            const double d = denom[r];
            double dot = 0;
            for (std::size_t k = 0; k < c; ++k) {
                const double xa = std::abs(static_cast<double>(xr[k]));
                const double z = xr[k] * xa / d;
                dgam[k] += static_cast<T>(gr[k] * z);
                dbet[k] += gr[k];
                dz[k] = static_cast<double>(gr[k]) * gv[k];
                dot += dz[k] * xr[k] * xa;
            }
            const double common = dot / (cdiv * d * d);
            for (std::size_t k = 0; k < c; ++k) {
                const double xa = std::abs(static_cast<double>(xr[k]));
                dx[r * c + k] = static_cast<T>(dz[k] * 2.0 * xa / d - sign_of(xr[k]) * common + gr[k] * res);
            }
        }
        sink.add(0, dx);
        sink.add(1, dgam);
        sink.add(2, dbet);
    });
}

}  // namespace

template <class T>
Var<T> grn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const GrnConfig& cfg,
           const std::vector<std::size_t>& segments, const std::vector<std::size_t>* counts) {
    cfg.validate();
    const Layout l = layout_of(x.shape());
    if (gamma.shape() != Shape{l.c} || beta.shape() != Shape{l.c}) {
        throw ShapeError("GRN affine shapes " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " do not match channel extent " + std::to_string(l.c));
    }
    check_segments(segments, l.rows, counts);
    if (cfg.experimental()) return grn_per_site(x, gamma, beta, cfg);

    const std::size_t c = l.c, ns = segments.size() - 1;
    const bool has_agg = cfg.aggregation != GrnAggregation::none;
    const Tensor<T> xv = x.value();
    // g and n per segment, in double.
    std::vector<double> gx, nx(ns * c, 1.0);
    if (has_agg) {
        gx = aggregate_double(xv.data(), c, cfg, segments, counts);
        for (std::size_t s = 0; s < ns; ++s) normalize_row(gx.data() + s * c, c, cfg, nx.data() + s * c);
    }
    Tensor<T> nt({ns, c});
    for (std::size_t i = 0; i < nt.numel(); ++i) nt[i] = static_cast<T>(nx[i]);

    Tensor<T> out(x.shape());
    const T* px = xv.data();
    const T* pg = gamma.value().data();
    const T* pb = beta.value().data();
    const T res = cfg.residual ? T(1) : T(0);
    for (std::size_t s = 0; s < ns; ++s) {
        const T* n = nt.data() + s * c;
        for (std::size_t r = segments[s]; r < segments[s + 1]; ++r) {
            const T* xr = px + r * c;
            T* o = out.data() + r * c;
            for (std::size_t k = 0; k < c; ++k) o[k] = pg[k] * (xr[k] * n[k]) + pb[k] + res * xr[k];
        }
    }

    const Tensor<T> gv = gamma.value();
    const std::vector<std::size_t> seg = segments;
    std::vector<std::size_t> cnt;
    if (counts) cnt = *counts;
    return Tape<T>::record(out, {&x, &gamma, &beta}, [=](const Tensor<T>& g, GradSink<T>& sink) {
        Tensor<T> dx(xv.shape()), dgam({c}), dbet({c});
        std::vector<double> dn(c), dg(c), dgam_acc(c, 0.0), dbet_acc(c, 0.0);
        for (std::size_t s = 0; s < ns; ++s) {
            const T* n = nt.data() + s * c;
            std::fill(dn.begin(), dn.end(), 0.0);
            for (std::size_t r = seg[s]; r < seg[s + 1]; ++r) {
                const T* xr = xv.data() + r * c;
                const T* gr = g.data() + r * c;
                T* dr = dx.data() + r * c;
                for (std::size_t k = 0; k < c; ++k) {
                    dgam_acc[k] += static_cast<double>(gr[k]) * xr[k] * n[k];
                    dbet_acc[k] += gr[k];
                    dn[k] += static_cast<double>(gr[k]) * gv[k] * xr[k];
                    dr[k] = gr[k] * (gv[k] * n[k] + res);
                }
            }
            if (!has_agg) continue;
            const double* gs = gx.data() + s * c;
            normalize_row_backward(gs, dn.data(), c, cfg, dg.data());
            const std::size_t count = cnt.empty() ? seg[s + 1] - seg[s] : cnt[s];
            for (std::size_t r = seg[s]; r < seg[s + 1]; ++r) {
                const T* xr = xv.data() + r * c;
                T* dr = dx.data() + r * c;
                for (std::size_t k = 0; k < c; ++k) {
                    double d = 0;
                    switch (cfg.aggregation) {
                        case GrnAggregation::l2: d = gs[k] > 0 ? xr[k] / gs[k] : 0.0; break;
                        case GrnAggregation::l1: d = sign_of(xr[k]); break;
                        case GrnAggregation::global_avg: d = count ? 1.0 / static_cast<double>(count) : 0.0; break;
                        case GrnAggregation::none: break;
                    }
                    dr[k] += static_cast<T>(dg[k] * d);
                }
            }
        }
        for (std::size_t k = 0; k < c; ++k) {
            dgam[k] = static_cast<T>(dgam_acc[k]);
            dbet[k] = static_cast<T>(dbet_acc[k]);
        }
        sink.add(0, dx);
        sink.add(1, dgam);
        sink.add(2, dbet);
    });
}

template <class T>
Var<T> grn_nhwc(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const GrnConfig& cfg) {
    if (x.shape().size() != 4) throw ShapeError("grn_nhwc expects N x H x W x C, got " + shape_str(x.shape()));
    const Shape& s = x.shape();
    std::vector<std::size_t> seg(s[0] + 1);
    for (std::size_t b = 0; b <= s[0]; ++b) seg[b] = b * s[1] * s[2];
    return grn(x, gamma, beta, cfg, seg);
}

#define CNX_INSTANTIATE(T)                                                                                     \
    template Tensor<T> grn_aggregate(const Tensor<T>&, const GrnConfig&, const std::vector<std::size_t>&,      \
                                     const std::vector<std::size_t>*);                                         \
    template Tensor<T> grn_normalize(const Tensor<T>&, const GrnConfig&);                                      \
    template Var<T> grn(const Var<T>&, const Var<T>&, const Var<T>&, const GrnConfig&,                         \
                        const std::vector<std::size_t>&, const std::vector<std::size_t>*);                     \
    template Var<T> grn_nhwc(const Var<T>&, const Var<T>&, const Var<T>&, const GrnConfig&);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
