#include "convnext/model.hpp"

#include <map>
#include <stdexcept>

#include "convnext/ops.hpp"

namespace cnx {

const char* arch_name(Arch a) { return a == Arch::v1 ? "v1" : "v2"; }

Arch parse_arch(const std::string& s) {
    if (s == "v1") return Arch::v1;
    if (s == "v2") return Arch::v2;
    throw std::invalid_argument("unknown architecture '" + s + "' (expected v1 or v2)");
}

const char* forward_path_name(ForwardPath p) {
    switch (p) {
        case ForwardPath::dense: return "dense";
        case ForwardPath::masked_dense: return "masked-dense";
        case ForwardPath::sparse: return "sparse";
    }
    return "?";
}

ForwardPath parse_forward_path(const std::string& s) {
    if (s == "dense") return ForwardPath::dense;
    if (s == "masked-dense" || s == "masked_dense") return ForwardPath::masked_dense;
    if (s == "sparse") return ForwardPath::sparse;
    throw std::invalid_argument("unknown path '" + s + "' (expected sparse, masked-dense or dense)");
}

std::size_t ModelConfig::total_blocks() const {
    std::size_t n = 0;
    for (std::size_t d : depths) n += d;
    return n;
}

double ModelConfig::block_drop_rate(std::size_t i) const {
    const std::size_t n = total_blocks();
    return n > 1 ? drop_path_rate * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
}

void ModelConfig::validate() const {
    if (depths.empty() || depths.size() > 4) throw std::invalid_argument("model needs 1 to 4 stages");
    for (std::size_t d : depths)
        if (d == 0) throw std::invalid_argument("every stage needs at least one block");
    if (dim == 0 || num_classes == 0 || in_channels == 0) throw std::invalid_argument("model extents must be positive");
    if (kernel % 2 == 0) throw std::invalid_argument("block kernel must be odd");
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw std::invalid_argument("drop_path_rate must lie in [0, 1)");
    grn.validate();
}

const std::vector<std::string>& registry_names() {
    static const std::vector<std::string> names{"atto", "femto", "pico", "nano", "tiny", "base", "large", "huge"};
    return names;
}

ModelConfig registry_config(const std::string& name, std::size_t num_classes, Arch arch) {
    static const std::map<std::string, std::pair<std::size_t, std::vector<std::size_t>>> table{
        {"atto", {40, {2, 2, 6, 2}}},   {"femto", {48, {2, 2, 6, 2}}},  {"pico", {64, {2, 2, 6, 2}}},
        {"nano", {80, {2, 2, 8, 2}}},   {"tiny", {96, {3, 3, 9, 3}}},   {"base", {128, {3, 3, 27, 3}}},
        {"large", {192, {3, 3, 27, 3}}}, {"huge", {352, {3, 3, 27, 3}}},
    };
    const auto it = table.find(name);
    if (it == table.end()) throw std::invalid_argument("unknown model variant '" + name + "'");
    ModelConfig cfg;
    cfg.name = name;
    cfg.dim = it->second.first;
    cfg.depths = it->second.second;
    cfg.num_classes = num_classes;
    cfg.arch = arch;
    return cfg;
}

std::vector<LayerInfo> describe_layers(const ModelConfig& cfg, std::size_t height, std::size_t width) {
    cfg.validate();
    if (height % cfg.total_stride() || width % cfg.total_stride()) {
        throw ShapeError("input extents " + std::to_string(height) + "x" + std::to_string(width) +
                         " are not divisible by the total stride " + std::to_string(cfg.total_stride()));
    }
    using u64 = std::uint64_t;
    std::vector<LayerInfo> rows;
    std::size_t h = height / 4, w = width / 4;
    const u64 c0 = cfg.width(0), k2 = cfg.kernel * cfg.kernel;
    rows.push_back({"stem.conv", {h, w, c0}, 16 * cfg.in_channels * c0 + c0, u64(h * w) * 16 * cfg.in_channels * c0});
    rows.push_back({"stem.norm", {h, w, c0}, 2 * c0, 0});
    for (std::size_t s = 0; s < cfg.stages(); ++s) {
        const u64 c = cfg.width(s);
        if (s > 0) {
            const u64 cp = cfg.width(s - 1);
            const std::string p = "downsample" + std::to_string(s);
            rows.push_back({p + ".norm", {h, w, cp}, 2 * cp, 0});
            h /= 2;
            w /= 2;
            rows.push_back({p + ".conv", {h, w, c}, 4 * cp * c + c, u64(h * w) * 4 * cp * c});
        }
        const u64 hw = u64(h) * w;
        for (std::size_t b = 0; b < cfg.depths[s]; ++b) {
            const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            rows.push_back({p + ".dwconv", {h, w, c}, k2 * c + c, hw * k2 * c});
            rows.push_back({p + ".norm", {h, w, c}, 2 * c, 0});
            rows.push_back({p + ".pwconv1", {h, w, 4 * c}, 4 * c * c + 4 * c, hw * 4 * c * c});
            if (cfg.arch == Arch::v2) rows.push_back({p + ".grn", {h, w, 4 * c}, 8 * c, 0});
            rows.push_back({p + ".pwconv2", {h, w, c}, 4 * c * c + c, hw * 4 * c * c});
            if (cfg.arch == Arch::v1 && cfg.layer_scale_init > 0) rows.push_back({p + ".layer_scale", {h, w, c}, c, 0});
        }
    }
    const u64 cl = cfg.width(cfg.stages() - 1), k = cfg.num_classes;
    rows.push_back({"head.norm", {cl}, 2 * cl, 0});
    rows.push_back({"head.fc", {k}, cl * k + k, cl * k});
    return rows;
}

std::uint64_t count_params(const ModelConfig& cfg) {
    // Parameter count does not depend on the input size.
    std::uint64_t n = 0;
    for (const auto& r : describe_layers(cfg, cfg.total_stride(), cfg.total_stride())) n += r.params;
    return n;
}

std::uint64_t count_flops(const ModelConfig& cfg, std::size_t height, std::size_t width) {
    std::uint64_t n = 0;
    for (const auto& r : describe_layers(cfg, height, width)) n += r.flops;
    return n;
}

namespace {

template <class T>
Param<T> trunc_normal_param(const std::string& name, const Shape& shape, Rng& rng, double scale = 1.0) {
    Param<T> p(name, Tensor<T>(shape));
    for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] = static_cast<T>(rng.trunc_normal(0.02) * scale);
    return p;
}

template <class T>
Param<T> filled(const std::string& name, const Shape& shape, double v) {
    return Param<T>(name, Tensor<T>(shape, static_cast<T>(v)));
}

// Feature map on one of the three execution paths.
template <class T>
struct Stream {
    Var<T> dense;            // dense and masked-dense paths
    SparseTensor<T> sparse;  // sparse path
    const MaskGrid* mask = nullptr;
};

}  // namespace

template <class T>
BlockParams<T> make_block(const std::string& p, std::size_t c, std::size_t k, Arch arch, double layer_scale_init,
                          Rng& rng) {
    BlockParams<T> bp;
    bp.dw_weight = trunc_normal_param<T>(p + ".dwconv.weight", {k, k, 1, c}, rng);
    bp.dw_bias = filled<T>(p + ".dwconv.bias", {c}, 0.0);
    bp.norm_weight = filled<T>(p + ".norm.weight", {c}, 1.0);
    bp.norm_bias = filled<T>(p + ".norm.bias", {c}, 0.0);
    bp.pw1_weight = trunc_normal_param<T>(p + ".pwconv1.weight", {c, 4 * c}, rng);
    bp.pw1_bias = filled<T>(p + ".pwconv1.bias", {4 * c}, 0.0);
    if (arch == Arch::v2) {
        bp.has_grn = true;
        bp.grn_gamma = filled<T>(p + ".grn.gamma", {4 * c}, 0.0);
        bp.grn_beta = filled<T>(p + ".grn.beta", {4 * c}, 0.0);
    }
    bp.pw2_weight = trunc_normal_param<T>(p + ".pwconv2.weight", {4 * c, c}, rng);
    bp.pw2_bias = filled<T>(p + ".pwconv2.bias", {c}, 0.0);
    if (arch == Arch::v1 && layer_scale_init > 0) {
        bp.has_layer_scale = true;
        bp.layer_scale = filled<T>(p + ".layer_scale", {c}, layer_scale_init);
    }
    return bp;
}

template <class T>
std::vector<Param<T>*> block_params(BlockParams<T>& b) {
    std::vector<Param<T>*> out{&b.dw_weight, &b.dw_bias, &b.norm_weight, &b.norm_bias, &b.pw1_weight, &b.pw1_bias};
    if (b.has_grn) {
        out.push_back(&b.grn_gamma);
        out.push_back(&b.grn_beta);
    }
    out.push_back(&b.pw2_weight);
    out.push_back(&b.pw2_bias);
    if (b.has_layer_scale) out.push_back(&b.layer_scale);
    return out;
}

template <class T>
Var<T> block_forward(ParamBinder<T>& bind, const Var<T>& x, BlockParams<T>& bp, std::size_t kernel, const GrnConfig& grn,
                     MacLog* log, const std::string& name) {
    const std::size_t c = x.shape().back();
    Var<T> y = conv2d(x, bind(bp.dw_weight), bind(bp.dw_bias), ConvSpec::depthwise_same(c, kernel), log, name + ".dwconv");
    y = layer_norm(y, bind(bp.norm_weight), bind(bp.norm_bias));
    y = gelu(linear(y, bind(bp.pw1_weight), bind(bp.pw1_bias), log, name + ".pwconv1"));
    if (bp.has_grn) y = grn_nhwc(y, bind(bp.grn_gamma), bind(bp.grn_beta), grn);
    y = linear(y, bind(bp.pw2_weight), bind(bp.pw2_bias), log, name + ".pwconv2");
    if (bp.has_layer_scale) y = mul(y, bind(bp.layer_scale));
    return add(x, y);
}

template <class T>
ConvNeXt<T>::ConvNeXt(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t c0 = cfg_.width(0), k = cfg_.kernel;
    stem_conv_ = {trunc_normal_param<T>("stem.conv.weight", {4, 4, cfg_.in_channels, c0}, rng),
                  filled<T>("stem.conv.bias", {c0}, 0.0)};
    stem_norm_ = {filled<T>("stem.norm.weight", {c0}, 1.0), filled<T>("stem.norm.bias", {c0}, 0.0)};
    std::size_t block_index = 0;
    for (std::size_t s = 0; s < cfg_.stages(); ++s) {
        const std::size_t c = cfg_.width(s);
        if (s > 0) {
            const std::size_t cp = cfg_.width(s - 1);
            const std::string p = "downsample" + std::to_string(s);
            down_norm_.push_back({filled<T>(p + ".norm.weight", {cp}, 1.0), filled<T>(p + ".norm.bias", {cp}, 0.0)});
            down_conv_.push_back({trunc_normal_param<T>(p + ".conv.weight", {2, 2, cp, c}, rng),
                                  filled<T>(p + ".conv.bias", {c}, 0.0)});
        }
        std::vector<BlockParams<T>> blocks;
        for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
            const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            BlockParams<T> bp = make_block<T>(p, c, k, cfg_.arch, cfg_.layer_scale_init, rng);
            bp.drop_rate = cfg_.block_drop_rate(block_index++);
            blocks.push_back(std::move(bp));
        }
        stages_.push_back(std::move(blocks));
    }
    const std::size_t cl = cfg_.width(cfg_.stages() - 1);
    head_norm_ = {filled<T>("head.norm.weight", {cl}, 1.0), filled<T>("head.norm.bias", {cl}, 0.0)};
    head_fc_ = {trunc_normal_param<T>("head.fc.weight", {cl, cfg_.num_classes}, rng, cfg_.head_init_scale),
                filled<T>("head.fc.bias", {cfg_.num_classes}, 0.0)};
}

template <class T>
std::vector<Param<T>*> ConvNeXt<T>::params() {
    std::vector<Param<T>*> out{&stem_conv_.weight, &stem_conv_.bias, &stem_norm_.weight, &stem_norm_.bias};
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        if (s > 0) {
            for (Affine* a : {&down_norm_[s - 1], &down_conv_[s - 1]}) {
                out.push_back(&a->weight);
                out.push_back(&a->bias);
            }
        }
        for (auto& b : stages_[s])
            for (Param<T>* p : block_params(b)) out.push_back(p);
    }
    for (Param<T>* p : {&head_norm_.weight, &head_norm_.bias, &head_fc_.weight, &head_fc_.bias}) out.push_back(p);
    return out;
}

template <class T>
std::vector<const Param<T>*> ConvNeXt<T>::params() const {
    std::vector<const Param<T>*> out;
    for (Param<T>* p : const_cast<ConvNeXt*>(this)->params()) out.push_back(p);
    return out;
}

template <class T>
Param<T>& ConvNeXt<T>::param(const std::string& name) {
    for (Param<T>* p : params())
        if (p->name == name) return *p;
    throw std::out_of_range("model has no parameter '" + name + "'");
}

template <class T>
std::size_t ConvNeXt<T>::num_params() const {
    std::size_t n = 0;
    for (const Param<T>* p : params()) n += p->value.numel();
    return n;
}

template <class T>
ConvNeXt<T> ConvNeXt<T>::clone() const {
    ConvNeXt copy = *this;
    for (Param<T>* p : copy.params()) *p = p->deep_copy();
    return copy;
}

template <class T>
void ConvNeXt<T>::zero_grad() {
    for (Param<T>* p : params()) p->zero_grad();
}

template <class T>
MaskPyramid ConvNeXt<T>::make_pyramid(const MaskGrid& coarsest) const {
    return build_pyramid(coarsest, cfg_.stages(), 4);
}

template <class T>
ForwardResult<T> ConvNeXt<T>::forward(ParamBinder<T>& bind, const Var<T>& x, const ForwardOptions<T>& opts) {
    const Shape& xs = x.shape();
    if (xs.size() != 4 || xs[3] != cfg_.in_channels) {
        throw ShapeError("model input must be N x H x W x " + std::to_string(cfg_.in_channels) + ", got " + shape_str(xs));
    }
    const std::size_t n = xs[0], stride = cfg_.total_stride();
    if (xs[1] % stride || xs[2] % stride) {
        throw ShapeError("input extents " + std::to_string(xs[1]) + "x" + std::to_string(xs[2]) +
                         " are not divisible by the total stride " + std::to_string(stride));
    }
    const ForwardPath path = opts.path;
    if (path != ForwardPath::dense) {
        const MaskPyramid* m = opts.mask;
        if (!m) throw std::invalid_argument(std::string(forward_path_name(path)) + " forward needs a mask pyramid");
        if (m->levels.size() != cfg_.stages() || m->stem_stride != 4)
            throw ShapeError("mask pyramid has " + std::to_string(m->levels.size()) + " levels for a " +
                             std::to_string(cfg_.stages()) + "-stage model");
        const MaskGrid& f = m->levels.front();
        if (f.n != n || f.h != xs[1] / 4 || f.w != xs[2] / 4)
            throw ShapeError("finest mask level does not match the stem output extent");
    }
    MacLog* log = opts.log;
    const GrnConfig& gcfg = cfg_.grn;

    auto map = [&](Stream<T> s, auto&& f) {
        if (path == ForwardPath::sparse) {
            s.sparse = sparse_pointwise(s.sparse, f);
        } else {
            s.dense = f(s.dense);
            if (path == ForwardPath::masked_dense) s.dense = apply_mask(s.dense, *s.mask);
        }
        return s;
    };
    auto densify = [&](const Stream<T>& s) { return path == ForwardPath::sparse ? sparse_to_dense(s.sparse) : s.dense; };
    auto norm = [&](Stream<T> s, Affine& a) {
        Var<T> w = bind(a.weight), b = bind(a.bias);
        return map(std::move(s), [&](const Var<T>& v) { return layer_norm(v, w, b); });
    };
    auto pointwise = [&](Stream<T> s, Param<T>& w, Param<T>& b, const std::string& name) {
        Var<T> wv = bind(w), bv = bind(b);
        if (path != ForwardPath::sparse || !log)
            return map(std::move(s), [&](const Var<T>& v) { return linear(v, wv, bv, log, name); });
        // Charged per active row, compared against the full grid.
        const std::uint64_t per_site = static_cast<std::uint64_t>(w.value.dim(0)) * w.value.dim(1);
        const std::uint64_t active = s.sparse.rows(), total = s.sparse.coords->total_sites();
        log->record({name, LayerKind::pointwise, active * per_site, total * per_site, active, total});
        return map(std::move(s), [&](const Var<T>& v) { return linear(v, wv, bv, nullptr, name); });
    };

    ForwardResult<T> result;
    Stream<T> s;
    {
        const ConvSpec spec = ConvSpec::patchify(cfg_.in_channels, cfg_.width(0), 4);
        Var<T> w = bind(stem_conv_.weight), b = bind(stem_conv_.bias);
        if (path == ForwardPath::dense) {
            s.dense = conv2d(x, w, b, spec, log, "stem.conv");
        } else {
            const MaskGrid pixels = opts.mask->pixel_mask();
            s.mask = &opts.mask->levels[0];
            if (path == ForwardPath::masked_dense)
                s.dense = masked_dense_conv(x, pixels, *s.mask, w, b, spec, log, "stem.conv");
            else
                s.sparse = strided_sparse_conv(dense_to_sparse(x, pixels), w, b, spec, log, "stem.conv");
        }
        s = norm(std::move(s), stem_norm_);
    }

    for (std::size_t st = 0; st < cfg_.stages(); ++st) {
        const std::size_t c = cfg_.width(st);
        if (st > 0) {
            s = norm(std::move(s), down_norm_[st - 1]);
            const ConvSpec spec = ConvSpec::patchify(cfg_.width(st - 1), c, 2);
            const std::string name = "downsample" + std::to_string(st) + ".conv";
            Var<T> w = bind(down_conv_[st - 1].weight), b = bind(down_conv_[st - 1].bias);
            if (path == ForwardPath::dense) {
                s.dense = conv2d(s.dense, w, b, spec, log, name);
            } else {
                const MaskGrid* in_mask = s.mask;
                s.mask = &opts.mask->levels[st];
                if (path == ForwardPath::masked_dense)
                    s.dense = masked_dense_conv(s.dense, *in_mask, *s.mask, w, b, spec, log, name);
                else
                    s.sparse = strided_sparse_conv(s.sparse, w, b, spec, log, name);
            }
        }
        for (std::size_t bi = 0; bi < stages_[st].size(); ++bi) {
            BlockParams<T>& bp = stages_[st][bi];
            const std::string p = "stage" + std::to_string(st) + ".block" + std::to_string(bi);
            const Stream<T> input = s;
            Stream<T> br = s;
            {
                const ConvSpec spec = ConvSpec::depthwise_same(c, cfg_.kernel);
                Var<T> w = bind(bp.dw_weight), b = bind(bp.dw_bias);
                const std::string name = p + ".dwconv";
                if (path == ForwardPath::dense)
                    br.dense = conv2d(br.dense, w, b, spec, log, name);
                else if (path == ForwardPath::masked_dense)
                    br.dense = masked_dense_conv(br.dense, *br.mask, *br.mask, w, b, spec, log, name);
                else
                    br.sparse = submanifold_conv(br.sparse, w, b, spec, log, name);
            }
            {
                Var<T> w = bind(bp.norm_weight), b = bind(bp.norm_bias);
                br = map(std::move(br), [&](const Var<T>& v) { return layer_norm(v, w, b); });
            }
            br = pointwise(std::move(br), bp.pw1_weight, bp.pw1_bias, p + ".pwconv1");
            br = map(std::move(br), [](const Var<T>& v) { return gelu(v); });
            if (opts.capture) opts.capture(p, CapturePoint::expansion, densify(br).value());
            if (bp.has_grn) {
                Var<T> g = bind(bp.grn_gamma), b = bind(bp.grn_beta);
                if (path == ForwardPath::sparse) {
                    const auto& seg = br.sparse.coords->segments();
                    br.sparse = sparse_pointwise(br.sparse, [&](const Var<T>& v) { return grn(v, g, b, gcfg, seg); });
                } else if (path == ForwardPath::masked_dense) {
                    const MaskGrid& m = *br.mask;
                    std::vector<std::size_t> counts(n);
                    for (std::size_t i = 0; i < n; ++i) counts[i] = m.visible_count(i);
                    br.dense = apply_mask(grn(br.dense, g, b, gcfg, uniform_segments(n, m.h * m.w), &counts), m);
                } else {
                    br.dense = grn_nhwc(br.dense, g, b, gcfg);
                }
            }
            br = pointwise(std::move(br), bp.pw2_weight, bp.pw2_bias, p + ".pwconv2");
            if (bp.has_layer_scale) {
                Var<T> ls = bind(bp.layer_scale);
                br = map(std::move(br), [&](const Var<T>& v) { return mul(v, ls); });
            }

            if (training && bp.drop_rate > 0 && !opts.rng)
                throw std::invalid_argument("training forward with stochastic depth needs an rng");
            Rng dummy(0);
            const auto scales = drop_path_scales(n, bp.drop_rate, training, opts.rng ? *opts.rng : dummy);
            bool all_ones = true;
            for (double v : scales) all_ones = all_ones && v == 1.0;
            if (path == ForwardPath::sparse) {
                Var<T> f = br.sparse.features;
                if (!all_ones) f = scale_row_segments(f, scales, br.sparse.coords->segments());
                s.sparse = {input.sparse.coords, add(input.sparse.features, f)};
            } else {
                Var<T> f = br.dense;
                if (!all_ones) {
                    const Shape& fs = f.shape();
                    f = scale_row_segments(f, scales, uniform_segments(n, fs[1] * fs[2]));
                }
                s.dense = add(input.dense, f);
            }
            if (opts.capture) opts.capture(p, CapturePoint::block_output, densify(s).value());
        }
        result.stages.push_back(densify(s));
    }

    if (opts.head && path == ForwardPath::dense) {
        Var<T> pooled = global_avg_pool(s.dense);
        pooled = layer_norm(pooled, bind(head_norm_.weight), bind(head_norm_.bias));
        result.logits = linear(pooled, bind(head_fc_.weight), bind(head_fc_.bias), log, "head.fc");
    }
    return result;
}

#define CNX_INSTANTIATE(T)                                                                                    \
    template class ConvNeXt<T>;                                                                               \
    template BlockParams<T> make_block(const std::string&, std::size_t, std::size_t, Arch, double, Rng&);     \
    template std::vector<Param<T>*> block_params(BlockParams<T>&);                                            \
    template Var<T> block_forward(ParamBinder<T>&, const Var<T>&, BlockParams<T>&, std::size_t, const GrnConfig&, \
                                  MacLog*, const std::string&);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
