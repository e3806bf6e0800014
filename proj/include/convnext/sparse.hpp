#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convnext/autograd.hpp"
#include "convnext/instrument.hpp"
#include "convnext/mask.hpp"
#include "convnext/nn.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

// Raised when an input violates a structural guarantee that mask
// construction is supposed to provide.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct Site {
    std::uint32_t b;
    std::uint32_t r;
    std::uint32_t c;
    bool operator==(const Site&) const = default;
};

// Active sites of a batch of n grids of extent h x w, ordered by sample, then
// row-major. Feature row i of a SparseTensor belongs to sites()[i].
class CoordMap {
public:
    CoordMap(std::size_t n, std::size_t h, std::size_t w, std::vector<Site> sites);

    // Active = unmasked.
    static std::shared_ptr<const CoordMap> from_mask(const MaskGrid& mask);

    std::size_t batch() const { return n_; }
    std::size_t height() const { return h_; }
    std::size_t width() const { return w_; }
    std::size_t size() const { return sites_.size(); }
    std::size_t total_sites() const { return n_ * h_ * w_; }
    const std::vector<Site>& sites() const { return sites_; }
    // Row offsets per sample: rows of sample b are [segments[b], segments[b+1]).
    const std::vector<std::size_t>& segments() const { return segments_; }

    // Feature row of (b, r, c), or -1 if inactive or out of bounds.
    long find(long b, long r, long c) const;

    // Neighbor table for a stride-1 k x k window with offset -pad, row-major
    // over taps: entry [i * k * k + t] is the input row or -1. Cached.
    const std::vector<long>& kernel_map(std::size_t k, std::size_t pad) const;

    // Coarse map: a coarse site is active iff its factor x factor block is.
    // Throws ContractViolation on partially active blocks.
    std::shared_ptr<const CoordMap> coarsen(std::size_t factor) const;

    MaskGrid to_mask() const;

private:
    std::size_t n_, h_, w_;
    std::vector<Site> sites_;
    std::vector<std::size_t> segments_;
    std::unordered_map<std::uint64_t, long> index_;
    mutable std::mutex cache_mutex_;
    mutable std::map<std::pair<std::size_t, std::size_t>, std::vector<long>> kernel_maps_;

    std::uint64_t key(std::uint64_t b, std::uint64_t r, std::uint64_t c) const { return (b * h_ + r) * w_ + c; }
};

template <class T>
struct SparseTensor {
    std::shared_ptr<const CoordMap> coords;
    Var<T> features;  // |active| x C

    std::size_t rows() const { return coords->size(); }
    std::size_t channels() const { return features.shape().empty() ? 0 : features.shape().back(); }
};

// Gathers features at unmasked sites. Gradients reach only those sites.
template <class T>
SparseTensor<T> dense_to_sparse(const Var<T>& x, const MaskGrid& mask);

template <class T>
SparseTensor<T> dense_to_sparse(const Var<T>& x, std::shared_ptr<const CoordMap> coords);

// Zero-filled NHWC tensor with the active rows scattered into place.
template <class T>
Var<T> sparse_to_dense(const SparseTensor<T>& x);

// Stride-1 convolution whose output sites equal the input sites. Supports
// depthwise and groups == 1 specs with odd kernels and pad (k - 1) / 2.
template <class T>
SparseTensor<T> submanifold_conv(const SparseTensor<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias,
                                 const ConvSpec& spec, MacLog* log = nullptr, const std::string& name = {});

// Non-overlapping downsampling conv (kernel == stride, pad 0, groups 1).
template <class T>
SparseTensor<T> strided_sparse_conv(const SparseTensor<T>& x, const Var<T>& w, const std::optional<std::type_identity_t<Var<T>>>& bias,
                                    const ConvSpec& spec, MacLog* log = nullptr, const std::string& name = {});

// Applies a per-row function to the feature matrix; coordinates are kept.
template <class T, class F>
SparseTensor<T> sparse_pointwise(const SparseTensor<T>& x, F&& f) {
    SparseTensor<T> out{x.coords, f(x.features)};
    const Shape& s = out.features.shape();
    if (s.size() != 2 || s[0] != x.rows()) {
        throw ShapeError("sparse_pointwise: function returned " + shape_str(s) + " for " +
                         std::to_string(x.rows()) + " active rows");
    }
    return out;
}

// Zeroes NHWC x at masked sites.
template <class T>
Var<T> apply_mask(const Var<T>& x, const MaskGrid& mask);

// apply_mask(conv2d(apply_mask(x, in_mask)), out_mask). out_mask is at the
// output resolution.
template <class T>
Var<T> masked_dense_conv(const Var<T>& x, const MaskGrid& in_mask, const MaskGrid& out_mask, const Var<T>& w,
                         const std::optional<std::type_identity_t<Var<T>>>& bias, const ConvSpec& spec, MacLog* log = nullptr,
                         const std::string& name = {});

}  // namespace cnx
