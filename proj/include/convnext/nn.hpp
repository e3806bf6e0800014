#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "convnext/autograd.hpp"
#include "convnext/instrument.hpp"
#include "convnext/rng.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

struct ConvSpec {
    std::size_t kernel_h = 1;
    std::size_t kernel_w = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;

    bool depthwise() const { return groups == in_channels && groups == out_channels; }
    // Weight tensor shape: kh x kw x (Cin / groups) x Cout.
    Shape weight_shape() const { return {kernel_h, kernel_w, in_channels / groups, out_channels}; }
    std::size_t out_extent(std::size_t in, std::size_t k) const { return (in + 2 * padding - k) / stride + 1; }
    void validate() const;

    static ConvSpec depthwise_same(std::size_t channels, std::size_t k) {
        return {k, k, 1, (k - 1) / 2, channels, channels, channels};
    }
    static ConvSpec patchify(std::size_t cin, std::size_t cout, std::size_t k) {
        return {k, k, k, 0, 1, cin, cout};
    }
};

// Direct seven-loop convolution over NHWC input. This is the oracle every
// optimized convolution path is checked against.
template <class T>
Tensor<T> conv2d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                           const ConvSpec& spec);

// Convolution with symmetric zero padding. Depthwise specs use a direct
// channel-vectorized kernel; everything else goes through im2col + GEMM.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias, const ConvSpec& spec,
              MacLog* log = nullptr, const std::string& name = {});

// Position-wise affine map over the last axis: y = x w + b with w: Cin x Cout.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias, MacLog* log = nullptr,
              const std::string& name = {});

inline constexpr double kLayerNormEps = 1e-6;

// Normalizes every row over the last axis, then applies gamma/beta.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = kLayerNormEps);

// Exact form 0.5 * x * (1 + erf(x / sqrt(2))).
template <class T>
Var<T> gelu(const Var<T>& x);

// Per-sample keep multipliers for stochastic depth: 1/(1-rate) with
// probability 1-rate, else 0. Eval mode (or rate 0) gives all ones and does
// not consume the generator.
std::vector<double> drop_path_scales(std::size_t samples, double rate, bool training, Rng& rng);

// Scales rows [segments[s], segments[s+1]) of the 2-D view (rows x last axis)
// by scales[s].
template <class T>
Var<T> scale_row_segments(const Var<T>& x, const std::vector<double>& scales,
                          const std::vector<std::size_t>& segments);

// x + branch with per-sample stochastic depth on the branch. The leading axis
// of both tensors indexes samples.
template <class T>
Var<T> drop_path(const Var<T>& x, const Var<T>& branch, double rate, bool training, Rng& rng);

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

// N x H x W x C -> N x C.
template <class T>
Var<T> global_avg_pool(const Var<T>& x);

// Uniform row segmentation: `samples` blocks of `rows_per_sample` rows.
std::vector<std::size_t> uniform_segments(std::size_t samples, std::size_t rows_per_sample);

}  // namespace cnx
