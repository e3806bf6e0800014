#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "convnext/autograd.hpp"
#include "convnext/grn.hpp"
#include "convnext/instrument.hpp"
#include "convnext/mask.hpp"
#include "convnext/nn.hpp"
#include "convnext/sparse.hpp"

namespace cnx {

enum class Arch { v1, v2 };
enum class ForwardPath { dense, masked_dense, sparse };

const char* arch_name(Arch a);
Arch parse_arch(const std::string& s);
const char* forward_path_name(ForwardPath p);
ForwardPath parse_forward_path(const std::string& s);

struct ModelConfig {
    std::string name = "custom";
    std::size_t dim = 40;  // stage-0 width; stage s has dim << s
    std::vector<std::size_t> depths{2, 2, 6, 2};
    std::size_t num_classes = 1000;
    Arch arch = Arch::v2;
    double drop_path_rate = 0.0;
    // V1 only; <= 0 disables LayerScale.
    double layer_scale_init = 1e-6;
    GrnConfig grn;
    std::size_t in_channels = 3;
    std::size_t kernel = 7;
    double head_init_scale = 0.001;

    std::size_t stages() const { return depths.size(); }
    std::size_t width(std::size_t stage) const { return dim << stage; }
    std::size_t total_blocks() const;
    std::size_t total_stride() const { return std::size_t(4) << (stages() - 1); }
    // Stochastic-depth rate of the i-th block overall, linear from 0 to drop_path_rate.
    double block_drop_rate(std::size_t i) const;
    void validate() const;
};

// The published variants: atto, femto, pico, nano, tiny, base, large, huge.
const std::vector<std::string>& registry_names();
ModelConfig registry_config(const std::string& name, std::size_t num_classes = 1000, Arch arch = Arch::v2);

// Analytic per-layer accounting, one row per parameterized sublayer. FLOPs
// count one multiply-accumulate as one FLOP over convs and linears only.
struct LayerInfo {
    std::string name;
    Shape output;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

std::vector<LayerInfo> describe_layers(const ModelConfig& cfg, std::size_t height, std::size_t width);
std::uint64_t count_params(const ModelConfig& cfg);
std::uint64_t count_flops(const ModelConfig& cfg, std::size_t height, std::size_t width);

enum class CapturePoint { expansion, block_output };

// Called with NHWC features (zeros at masked sites) for block "stage{s}.block{b}".
// expansion is the post-GELU activation of the 4x MLP, before GRN.
template <class T>
using CaptureFn = std::function<void(const std::string& block, CapturePoint point, const Tensor<T>& features)>;

template <class T>
struct ForwardOptions {
    ForwardPath path = ForwardPath::dense;
    const MaskPyramid* mask = nullptr;  // required unless path == dense
    bool head = true;                   // logits are produced on the dense path only
    Rng* rng = nullptr;                 // stochastic depth; required in training mode with drop_path_rate > 0
    MacLog* log = nullptr;
    CaptureFn<T> capture;
};

template <class T>
struct ForwardResult {
    std::vector<Var<T>> stages;  // NHWC per stage, zero at masked sites
    Var<T> logits;               // N x num_classes when produced
};

template <class T>
struct BlockParams {
    Param<T> dw_weight, dw_bias;
    Param<T> norm_weight, norm_bias;
    Param<T> pw1_weight, pw1_bias;
    Param<T> grn_gamma, grn_beta;  // V2 only
    Param<T> pw2_weight, pw2_bias;
    Param<T> layer_scale;          // V1 with layer_scale_init > 0 only
    bool has_grn = false;
    bool has_layer_scale = false;
    double drop_rate = 0.0;
};

// Block of width c; parameter names are prefix + ".dwconv.weight" and so on.
// drop_rate is left at 0.
template <class T>
BlockParams<T> make_block(const std::string& prefix, std::size_t c, std::size_t kernel, Arch arch,
                          double layer_scale_init, Rng& rng);

// Dense forward of one block without stochastic depth.
template <class T>
Var<T> block_forward(ParamBinder<T>& bind, const Var<T>& x, BlockParams<T>& bp, std::size_t kernel, const GrnConfig& grn,
                     MacLog* log = nullptr, const std::string& name = {});

// Parameters of a block in canonical order.
template <class T>
std::vector<Param<T>*> block_params(BlockParams<T>& bp);

// Copies share parameter storage; clone() deep-copies.
template <class T>
class ConvNeXt {
public:
    ConvNeXt(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    bool training = false;

    // Canonical order: stem, then per stage its downsampler and blocks, then head.
    std::vector<Param<T>*> params();
    std::vector<const Param<T>*> params() const;
    Param<T>& param(const std::string& name);
    std::size_t num_params() const;
    ConvNeXt clone() const;
    void zero_grad();

    BlockParams<T>& block(std::size_t stage, std::size_t index) { return stages_.at(stage).at(index); }

    ForwardResult<T> forward(ParamBinder<T>& bind, const Var<T>& x, const ForwardOptions<T>& opts = {});

    // Pyramid with one level per stage, replicated up from the coarsest grid.
    MaskPyramid make_pyramid(const MaskGrid& coarsest) const;

private:
    struct Affine {
        Param<T> weight, bias;
    };

    ModelConfig cfg_;
    Affine stem_conv_, stem_norm_;
    std::vector<Affine> down_norm_, down_conv_;  // index s - 1 feeds stage s
    std::vector<std::vector<BlockParams<T>>> stages_;
    Affine head_norm_, head_fc_;
};

}  // namespace cnx
