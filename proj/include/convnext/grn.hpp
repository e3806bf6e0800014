#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "convnext/autograd.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

// `none` entries select the component-ablation configurations:
//   aggregation on,  normalization none -> y = gamma * x * gx + beta (+ x)
//   aggregation none, normalization none -> y = gamma * x + beta (+ x)
//   aggregation none, normalization divisive -> per-site variant, see below
enum class GrnAggregation { l2, l1, global_avg, none };
enum class GrnNormalization { divisive, standardize, inverse_sum, none };

const char* grn_aggregation_name(GrnAggregation a);
const char* grn_normalization_name(GrnNormalization n);
GrnAggregation parse_grn_aggregation(const std::string& s);
GrnNormalization parse_grn_normalization(const std::string& s);

struct GrnConfig {
    GrnAggregation aggregation = GrnAggregation::l2;
    GrnNormalization normalization = GrnNormalization::divisive;
    bool residual = true;
    // Divide by the channel mean instead of the channel sum.
    bool channel_scale = true;
    double eps = 1e-6;

    // Throws std::invalid_argument for unsupported combinations.
    void validate() const;
    bool experimental() const { return aggregation == GrnAggregation::none && normalization != GrnNormalization::none; }
};

// Spatial aggregation of a rows x C view split into row segments (one per
// sample). counts, when given, overrides the per-segment divisor used by
// global_avg; the masked-dense path passes visible-site counts so zero rows
// at masked sites do not dilute the mean. Returns segments x C.
template <class T>
Tensor<T> grn_aggregate(const Tensor<T>& x, const GrnConfig& cfg, const std::vector<std::size_t>& segments,
                        const std::vector<std::size_t>* counts = nullptr);

// Cross-channel normalization of each row of gx (segments x C).
//   divisive:    gx / (mean(gx) + eps), or / (sum(gx) + eps) without channel_scale
//   standardize: (gx - mu) / (sigma + eps), population sigma
//   inverse_sum: 1 / (mean(gx) + eps), or 1 / (sum(gx) + eps) without channel_scale
//   none:        gx
template <class T>
Tensor<T> grn_normalize(const Tensor<T>& gx, const GrnConfig& cfg);

// y = gamma * (x * nx) + beta (+ x when residual), nx broadcast over the rows
// of each segment. x is any tensor whose last axis is C. For the per-site
// variant nx is computed per row from |x|: |x_k| / (mean_j |x_j| + eps).
template <class T>
Var<T> grn(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const GrnConfig& cfg,
           const std::vector<std::size_t>& segments, const std::vector<std::size_t>* counts = nullptr);

// NHWC convenience form: one segment per sample.
template <class T>
Var<T> grn_nhwc(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const GrnConfig& cfg);

}  // namespace cnx
