#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "convnext/model.hpp"

namespace cnx {

struct DecoderConfig {
    std::size_t dim = 512;
    std::size_t depth = 1;
    std::size_t patch = 32;  // must equal the encoder's total stride
    std::size_t out_channels = 3;
    std::size_t kernel = 7;
    GrnConfig grn;

    std::size_t patch_values() const { return patch * patch * out_channels; }
};

// proj (C_enc -> dim) -> LayerNorm -> mask-token insertion -> depth V2 blocks
// -> head (dim -> patch * patch * out_channels). Always dense.
template <class T>
class FcmaeDecoder {
public:
    FcmaeDecoder(std::size_t encoder_dim, DecoderConfig cfg, std::uint64_t seed);

    const DecoderConfig& config() const { return cfg_; }
    std::size_t encoder_dim() const { return encoder_dim_; }

    std::vector<Param<T>*> params();
    Param<T>& param(const std::string& name);
    Param<T>& mask_token() { return token_; }

    // encoded: N x h x w x C_enc; mask: N x h x w (1 = masked).
    // Returns N x (h*w) x patch_values().
    Var<T> forward(ParamBinder<T>& bind, const Var<T>& encoded, const MaskGrid& mask, MacLog* log = nullptr);

    // Features entering the head, N x h x w x dim (exposed for tests).
    Var<T> features(ParamBinder<T>& bind, const Var<T>& encoded, const MaskGrid& mask, MacLog* log = nullptr);

private:
    std::size_t encoder_dim_;
    DecoderConfig cfg_;
    Param<T> proj_w_, proj_b_, norm_w_, norm_b_, token_, head_w_, head_b_;
    std::vector<BlockParams<T>> blocks_;
};

// Per-patch standardized targets: N x (h*w) x (patch*patch*C), patch values
// ordered (py, px, c); (x - mean) / sqrt(var + eps) with population variance.
template <class T>
Tensor<T> patchify_and_normalize(const Tensor<T>& images, std::size_t patch, double eps = 1e-6);

// Mean over masked patches of the per-patch mean squared error. Throws
// std::invalid_argument when no patch is masked.
template <class T>
Var<T> reconstruction_loss(const Var<T>& pred, const Tensor<T>& targets, const MaskGrid& mask);

// Encode (sparse or masked-dense), decode and score one batch. The pyramid
// is built from `coarse`, whose extent is image extent / encoder total stride.
template <class T>
Var<T> fcmae_loss(ParamBinder<T>& bind, ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, const Tensor<T>& images,
                  const MaskGrid& coarse, ForwardPath path, Rng* rng = nullptr, MacLog* log = nullptr);

}  // namespace cnx
