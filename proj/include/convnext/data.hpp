#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "convnext/rng.hpp"
#include "convnext/tensor.hpp"

namespace cnx {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// N x H x W x 3 images with integer labels in [0, num_classes).
struct Dataset {
    Tensor<float> images;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t height() const { return images.shape().size() == 4 ? images.dim(1) : 0; }
    std::size_t width() const { return images.shape().size() == 4 ? images.dim(2) : 0; }
    // Rows [lo, hi).
    Dataset slice(std::size_t lo, std::size_t hi) const;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

// One CIFAR-10 binary batch file: 3073-byte records (label byte, then 1024
// bytes each of planar R, G, B). Pixels are scaled to [0, 1].
Dataset read_cifar10_file(const std::string& path);
Dataset parse_cifar10_records(const std::string& bytes, const std::string& origin = "<memory>");
// Inverse of parse_cifar10_records; pixels are rounded to the nearest byte.
std::string encode_cifar10_records(const Dataset& ds);

// data_batch_1..5.bin for the train split, test_batch.bin otherwise.
Dataset load_cifar10(const std::string& dir, bool train, std::size_t limit = 0);

struct ChannelStats {
    std::array<double, 3> mean{0, 0, 0};
    std::array<double, 3> std{1, 1, 1};
};

ChannelStats channel_stats(const Dataset& ds);
void standardize(Dataset& ds, const ChannelStats& s);

// Bilinear resampling with half-pixel centers and edge clamping.
Tensor<float> resize_bilinear(const Tensor<float>& images, std::size_t height, std::size_t width);
Dataset resize_images(const Dataset& ds, std::size_t size);

// Two-color linear gradient backgrounds with +-0.01 uniform pixel noise and
// one of four shapes (rectangle, disk, triangle, diagonal band); label
// i % num_classes for image i.
Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size, std::size_t num_classes = 4);

struct CropParams {
    double scale_lo = 0.67, scale_hi = 1.0;
    double ratio_lo = 3.0 / 4.0, ratio_hi = 4.0 / 3.0;
};

// Crop window (y, x, h, w) sampled as in the usual random-resized-crop
// recipe: ten tries at a random area and log-uniform aspect, then a centered
// fallback.
std::array<std::size_t, 4> sample_crop(std::size_t height, std::size_t width, const CropParams& p, Rng& rng);

// Batch of ds rows `indices`, each resized to out x out; with augment, each
// image is first cropped by sample_crop.
Tensor<float> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t out, bool augment,
                         Rng& rng, const CropParams& crop = {});
std::vector<int> batch_labels(const Dataset& ds, const std::vector<std::size_t>& indices);

}  // namespace cnx
