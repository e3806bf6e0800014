#include "convnext/fcmae.hpp"

#include <cmath>
#include <stdexcept>

#include "convnext/ops.hpp"

namespace cnx {

template <class T>
FcmaeDecoder<T>::FcmaeDecoder(std::size_t encoder_dim, DecoderConfig cfg, std::uint64_t seed)
    : encoder_dim_(encoder_dim), cfg_(std::move(cfg)) {
    if (encoder_dim_ == 0 || cfg_.dim == 0 || cfg_.patch == 0 || cfg_.out_channels == 0)
        throw std::invalid_argument("decoder extents must be positive");
    cfg_.grn.validate();
    Rng rng(seed);
    auto normal = [&](const std::string& name, const Shape& shape) {
        Param<T> p(name, Tensor<T>(shape));
        for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] = static_cast<T>(rng.trunc_normal(0.02));
        return p;
    };
    const std::size_t d = cfg_.dim;
    proj_w_ = normal("decoder.proj.weight", {encoder_dim_, d});
    proj_b_ = Param<T>("decoder.proj.bias", Tensor<T>({d}));
    norm_w_ = Param<T>("decoder.norm.weight", Tensor<T>({d}, T(1)));
    norm_b_ = Param<T>("decoder.norm.bias", Tensor<T>({d}));
    token_ = normal("decoder.mask_token", {d});
    for (std::size_t b = 0; b < cfg_.depth; ++b)
        blocks_.push_back(make_block<T>("decoder.block" + std::to_string(b), d, cfg_.kernel, Arch::v2, 0.0, rng));
    head_w_ = normal("decoder.head.weight", {d, cfg_.patch_values()});
    head_b_ = Param<T>("decoder.head.bias", Tensor<T>({cfg_.patch_values()}));
}

template <class T>
std::vector<Param<T>*> FcmaeDecoder<T>::params() {
    std::vector<Param<T>*> out{&proj_w_, &proj_b_, &norm_w_, &norm_b_, &token_};
    for (auto& b : blocks_)
        for (Param<T>* p : block_params(b)) out.push_back(p);
    out.push_back(&head_w_);
    out.push_back(&head_b_);
    return out;
}

template <class T>
Param<T>& FcmaeDecoder<T>::param(const std::string& name) {
    for (Param<T>* p : params())
        if (p->name == name) return *p;
    throw std::out_of_range("decoder has no parameter '" + name + "'");
}

template <class T>
Var<T> FcmaeDecoder<T>::features(ParamBinder<T>& bind, const Var<T>& encoded, const MaskGrid& mask, MacLog* log) {
    const Shape& es = encoded.shape();
    if (es.size() != 4 || es[3] != encoder_dim_)
        throw ShapeError("decoder expects N x h x w x " + std::to_string(encoder_dim_) + ", got " + shape_str(es));
    if (mask.n != es[0] || mask.h != es[1] || mask.w != es[2])
        throw ShapeError("decoder mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                         " does not match the encoded resolution " + shape_str(es));
    Var<T> x = linear(encoded, bind(proj_w_), bind(proj_b_), log, "decoder.proj");
    x = layer_norm(x, bind(norm_w_), bind(norm_b_));

    Tensor<T> m({es[0], es[1], es[2], 1}), keep({es[0], es[1], es[2], 1});
    for (std::size_t i = 0; i < mask.data.size(); ++i) {
        m[i] = mask.data[i] ? T(1) : T(0);
        keep[i] = T(1) - m[i];
    }
    x = add(mul(x, Var<T>(keep)), mul(Var<T>(m), bind(token_)));
    for (std::size_t b = 0; b < blocks_.size(); ++b)
        x = block_forward(bind, x, blocks_[b], cfg_.kernel, cfg_.grn, log, "decoder.block" + std::to_string(b));
    return x;
}

template <class T>
Var<T> FcmaeDecoder<T>::forward(ParamBinder<T>& bind, const Var<T>& encoded, const MaskGrid& mask, MacLog* log) {
    Var<T> y = linear(features(bind, encoded, mask, log), bind(head_w_), bind(head_b_), log, "decoder.head");
    const Shape& s = y.shape();
    return reshape(y, {s[0], s[1] * s[2], s[3]});
}

template <class T>
Tensor<T> patchify_and_normalize(const Tensor<T>& images, std::size_t patch, double eps) {
    const Shape& s = images.shape();
    if (s.size() != 4) throw ShapeError("patchify expects N x H x W x C images, got " + shape_str(s));
    if (patch == 0 || s[1] % patch || s[2] % patch)
        throw ShapeError("image extent " + shape_str(s) + " is not divisible by patch " + std::to_string(patch));
    const std::size_t n = s[0], hh = s[1], ww = s[2], c = s[3];
    const std::size_t gh = hh / patch, gw = ww / patch, pv = patch * patch * c;
    Tensor<T> out({n, gh * gw, pv});
    std::vector<double> buf(pv);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t gy = 0; gy < gh; ++gy)
            for (std::size_t gx = 0; gx < gw; ++gx) {
                // Values are shifted by the first pixel so constant patches map to exact zeros.
                std::size_t k = 0;
                const double origin = static_cast<double>(images.data()[((b * hh + gy * patch) * ww + gx * patch) * c]);
                double mean = 0.0;
                for (std::size_t py = 0; py < patch; ++py) {
                    const T* row = images.data() + ((b * hh + gy * patch + py) * ww + gx * patch) * c;
                    for (std::size_t j = 0; j < patch * c; ++j) {
                        buf[k] = static_cast<double>(row[j]) - origin;
                        mean += buf[k++];
                    }
                }
                mean /= static_cast<double>(pv);
                double var = 0.0;
                for (double v : buf) var += (v - mean) * (v - mean);
                var /= static_cast<double>(pv);
                const double inv = 1.0 / std::sqrt(var + eps);
                T* dst = out.data() + (b * gh * gw + gy * gw + gx) * pv;
                for (std::size_t j = 0; j < pv; ++j) dst[j] = static_cast<T>((buf[j] - mean) * inv);
            }
    return out;
}

template <class T>
Var<T> reconstruction_loss(const Var<T>& pred, const Tensor<T>& targets, const MaskGrid& mask) {
    const Shape& s = pred.shape();
    if (s.size() != 3 || targets.shape() != s)
        throw ShapeError("reconstruction_loss: prediction " + shape_str(s) + " vs target " + shape_str(targets.shape()));
    if (mask.n != s[0] || mask.h * mask.w != s[1])
        throw ShapeError("reconstruction_loss: mask does not cover " + std::to_string(s[1]) + " patches");
    const std::size_t masked = mask.total_masked(), pv = s[2];
    if (masked == 0) throw std::invalid_argument("reconstruction loss is undefined without masked patches");
    const double scale = 1.0 / (static_cast<double>(masked) * static_cast<double>(pv));
    const T* p = pred.value().data();
    const T* t = targets.data();
    double acc = 0.0;
    for (std::size_t q = 0; q < mask.data.size(); ++q) {
        if (!mask.data[q]) continue;
        double patch_sum = 0.0;
        for (std::size_t j = 0; j < pv; ++j) {
            const double d = static_cast<double>(p[q * pv + j]) - static_cast<double>(t[q * pv + j]);
            patch_sum += d * d;
        }
        acc += patch_sum;
    }
    const Tensor<T> pred_v = pred.value();
    return Tape<T>::record(Tensor<T>::scalar(static_cast<T>(acc * scale)), {&pred},
                           [=](const Tensor<T>& g, GradSink<T>& sink) {
                               Tensor<T> dp(s);
                               const double gs = 2.0 * scale * static_cast<double>(g.item());
                               for (std::size_t q = 0; q < mask.data.size(); ++q) {
                                   if (!mask.data[q]) continue;
                                   for (std::size_t j = 0; j < pv; ++j) {
                                       const std::size_t i = q * pv + j;
                                       dp[i] = static_cast<T>(gs * (static_cast<double>(pred_v[i]) - static_cast<double>(targets[i])));
                                   }
                               }
                               sink.add(0, dp);
                           });
}

template <class T>
Var<T> fcmae_loss(ParamBinder<T>& bind, ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, const Tensor<T>& images,
                  const MaskGrid& coarse, ForwardPath path, Rng* rng, MacLog* log) {
    if (path == ForwardPath::dense) throw std::invalid_argument("FCMAE encoding needs the sparse or masked-dense path");
    const std::size_t stride = encoder.config().total_stride();
    if (decoder.config().patch != stride)
        throw std::invalid_argument("decoder patch " + std::to_string(decoder.config().patch) +
                                    " must equal the encoder stride " + std::to_string(stride));
    const Shape& s = images.shape();
    if (s.size() != 4 || coarse.n != s[0] || coarse.h * stride != s[1] || coarse.w * stride != s[2])
        throw ShapeError("mask grid does not match images " + shape_str(s) + " at stride " + std::to_string(stride));
    const MaskPyramid pyramid = encoder.make_pyramid(coarse);
    ForwardOptions<T> opts;
    opts.path = path;
    opts.mask = &pyramid;
    opts.head = false;
    opts.rng = rng;
    opts.log = log;
    const Var<T> encoded = encoder.forward(bind, Var<T>(images), opts).stages.back();
    const Var<T> pred = decoder.forward(bind, encoded, coarse, log);
    return reconstruction_loss(pred, patchify_and_normalize(images, stride), coarse);
}

#define CNX_INSTANTIATE(T)                                                                                       \
    template class FcmaeDecoder<T>;                                                                              \
    template Tensor<T> patchify_and_normalize(const Tensor<T>&, std::size_t, double);                            \
    template Var<T> reconstruction_loss(const Var<T>&, const Tensor<T>&, const MaskGrid&);                       \
    template Var<T> fcmae_loss(ParamBinder<T>&, ConvNeXt<T>&, FcmaeDecoder<T>&, const Tensor<T>&, const MaskGrid&, \
                               ForwardPath, Rng*, MacLog*);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
