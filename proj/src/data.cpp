#include "convnext/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cnx {

Dataset Dataset::slice(std::size_t lo, std::size_t hi) const {
    if (lo > hi || hi > size()) throw std::out_of_range("dataset slice out of range");
    Dataset out;
    out.num_classes = num_classes;
    out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(lo), labels.begin() + static_cast<std::ptrdiff_t>(hi));
    const std::size_t per = height() * width() * 3;
    out.images = Tensor<float>({hi - lo, height(), width(), 3});
    std::copy(images.data() + lo * per, images.data() + hi * per, out.images.data());
    return out;
}

Dataset parse_cifar10_records(const std::string& bytes, const std::string& origin) {
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0)
        throw DataError(origin + ": size " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                        std::to_string(kCifarRecordBytes) + " (truncated or not a CIFAR-10 batch)");
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    Dataset ds;
    ds.num_classes = 10;
    ds.images = Tensor<float>({n, 32, 32, 3});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + i * kCifarRecordBytes);
        if (rec[0] > 9) throw DataError(origin + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]));
        ds.labels[i] = rec[0];
        float* dst = ds.images.data() + i * 3072;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < 1024; ++p) dst[p * 3 + c] = static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f;
    }
    return ds;
}

std::string encode_cifar10_records(const Dataset& ds) {
    if (ds.height() != 32 || ds.width() != 32) throw DataError("CIFAR-10 records hold 32x32 images");
    std::string out(ds.size() * kCifarRecordBytes, '\0');
    for (std::size_t i = 0; i < ds.size(); ++i) {
        auto* rec = reinterpret_cast<unsigned char*>(out.data() + i * kCifarRecordBytes);
        if (ds.labels[i] < 0 || ds.labels[i] > 255) throw DataError("label does not fit in a byte");
        rec[0] = static_cast<unsigned char>(ds.labels[i]);
        const float* src = ds.images.data() + i * 3072;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < 1024; ++p) {
                const double v = std::clamp(static_cast<double>(src[p * 3 + c]), 0.0, 1.0);
                rec[1 + c * 1024 + p] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
    }
    return out;
}

Dataset read_cifar10_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_cifar10_records(ss.str(), path);
}

namespace {

Dataset concat(const std::vector<Dataset>& parts) {
    Dataset out;
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    out.num_classes = parts.empty() ? 0 : parts.front().num_classes;
    if (n == 0) return out;
    out.images = Tensor<float>({n, parts.front().height(), parts.front().width(), 3});
    float* dst = out.images.data();
    for (const auto& p : parts) {
        dst = std::copy(p.images.data(), p.images.data() + p.images.numel(), dst);
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

}  // namespace

Dataset load_cifar10(const std::string& dir, bool train, std::size_t limit) {
    std::vector<std::string> files;
    if (train)
        for (int i = 1; i <= 5; ++i) files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    else
        files.push_back(dir + "/test_batch.bin");
    std::vector<Dataset> parts;
    std::size_t have = 0;
    for (const auto& f : files) {
        parts.push_back(read_cifar10_file(f));
        have += parts.back().size();
        if (limit && have >= limit) break;
    }
    Dataset ds = concat(parts);
    return limit && ds.size() > limit ? ds.slice(0, limit) : ds;
}

ChannelStats channel_stats(const Dataset& ds) {
    ChannelStats s;
    const std::size_t pixels = ds.images.numel() / 3;
    if (pixels == 0) return s;
    std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
    const float* p = ds.images.data();
    for (std::size_t i = 0; i < pixels; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            sum[c] += p[i * 3 + c];
            sq[c] += static_cast<double>(p[i * 3 + c]) * p[i * 3 + c];
        }
    for (std::size_t c = 0; c < 3; ++c) {
        s.mean[c] = sum[c] / static_cast<double>(pixels);
        const double var = sq[c] / static_cast<double>(pixels) - s.mean[c] * s.mean[c];
        s.std[c] = std::sqrt(std::max(var, 1e-12));
    }
    return s;
}

void standardize(Dataset& ds, const ChannelStats& s) {
    float* p = ds.images.data();
    const std::size_t pixels = ds.images.numel() / 3;
    for (std::size_t i = 0; i < pixels; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            p[i * 3 + c] = static_cast<float>((p[i * 3 + c] - s.mean[c]) / s.std[c]);
}

namespace {

// Resamples the window (y0, x0, h, w) of one HWC image to oh x ow.
void resample(const float* src, std::size_t sw, std::size_t c, double y0, double x0, double h, double w, float* dst,
              std::size_t oh, std::size_t ow, std::size_t sh) {
    const double sy = h / static_cast<double>(oh), sx = w / static_cast<double>(ow);
    for (std::size_t oy = 0; oy < oh; ++oy) {
        double fy = y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
        const auto iy = static_cast<std::size_t>(fy);
        const std::size_t iy1 = std::min(iy + 1, sh - 1);
        const double wy = fy - static_cast<double>(iy);
        for (std::size_t ox = 0; ox < ow; ++ox) {
            double fx = x0 + (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
            const auto ix = static_cast<std::size_t>(fx);
            const std::size_t ix1 = std::min(ix + 1, sw - 1);
            const double wx = fx - static_cast<double>(ix);
            for (std::size_t k = 0; k < c; ++k) {
                const double a = src[(iy * sw + ix) * c + k], b = src[(iy * sw + ix1) * c + k];
                const double d = src[(iy1 * sw + ix) * c + k], e = src[(iy1 * sw + ix1) * c + k];
                dst[(oy * ow + ox) * c + k] =
                    static_cast<float>((1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e));
            }
        }
    }
}

}  // namespace

Tensor<float> resize_bilinear(const Tensor<float>& images, std::size_t height, std::size_t width) {
    const Shape& s = images.shape();
    if (s.size() != 4) throw ShapeError("resize expects N x H x W x C, got " + shape_str(s));
    Tensor<float> out({s[0], height, width, s[3]});
    for (std::size_t i = 0; i < s[0]; ++i)
        resample(images.data() + i * s[1] * s[2] * s[3], s[2], s[3], 0, 0, static_cast<double>(s[1]),
                 static_cast<double>(s[2]), out.data() + i * height * width * s[3], height, width, s[1]);
    return out;
}

Dataset resize_images(const Dataset& ds, std::size_t size) {
    Dataset out;
    out.labels = ds.labels;
    out.num_classes = ds.num_classes;
    out.images = ds.size() ? resize_bilinear(ds.images, size, size) : Tensor<float>({0, size, size, 3});
    return out;
}

// Small enough that patch-normalized targets stay dominated by structure.
constexpr double kSynthNoise = 0.01;

Dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size, std::size_t num_classes) {
    if (num_classes == 0 || num_classes > 4) throw std::invalid_argument("synthetic data has 1 to 4 classes");
    Dataset ds;
    ds.num_classes = num_classes;
    ds.images = Tensor<float>({n, size, size, 3});
    ds.labels.resize(n);
    Rng rng(seed);
    const double S = static_cast<double>(size);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % num_classes);
        ds.labels[i] = label;
        std::array<double, 3> c0, c1, fg;
        for (auto* c : {&c0, &c1, &fg})
            for (double& v : *c) v = rng.uniform(0.1, 0.9);
        const double angle = rng.uniform(0.0, 2.0 * 3.141592653589793);
        const double gx = std::cos(angle), gy = std::sin(angle);
        const double cx = rng.uniform(0.3, 0.7) * S, cy = rng.uniform(0.3, 0.7) * S;
        const double r = rng.uniform(0.15, 0.3) * S;
        const double aspect = rng.uniform(0.6, 1.0);
        float* img = ds.images.data() + i * size * size * 3;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                const double t = std::clamp(0.5 + ((px / S - 0.5) * gx + (py / S - 0.5) * gy), 0.0, 1.0);
                const double dx = px - cx, dy = py - cy;
                bool inside = false;
                switch (label) {
                    case 0: inside = std::abs(dx) <= r && std::abs(dy) <= r * aspect; break;
                    case 1: inside = dx * dx + dy * dy <= r * r; break;
                    case 2: inside = dy <= r * aspect && dy >= -r * aspect && std::abs(dx) <= (dy + r * aspect) / (2 * aspect); break;
                    default: inside = std::abs(dx - dy) <= r * 0.5; break;
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    const double bg = c0[c] + (c1[c] - c0[c]) * t;
                    const double v = (inside ? fg[c] : bg) + rng.uniform(-kSynthNoise, kSynthNoise);
                    img[(y * size + x) * 3 + c] = static_cast<float>(v);
                }
            }
    }
    return ds;
}

std::array<std::size_t, 4> sample_crop(std::size_t height, std::size_t width, const CropParams& p, Rng& rng) {
    const double area = static_cast<double>(height) * static_cast<double>(width);
    const double log_lo = std::log(p.ratio_lo), log_hi = std::log(p.ratio_hi);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(p.scale_lo, p.scale_hi);
        const double ratio = std::exp(rng.uniform(log_lo, log_hi));
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const std::size_t y = rng.below(height - h + 1), x = rng.below(width - w + 1);
            return {y, x, h, w};
        }
    }
    const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
    std::size_t w = width, h = height;
    if (in_ratio < p.ratio_lo)
        h = static_cast<std::size_t>(std::lround(static_cast<double>(w) / p.ratio_lo));
    else if (in_ratio > p.ratio_hi)
        w = static_cast<std::size_t>(std::lround(static_cast<double>(h) * p.ratio_hi));
    return {(height - h) / 2, (width - w) / 2, h, w};
}

Tensor<float> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, std::size_t out, bool augment,
                         Rng& rng, const CropParams& crop) {
    const std::size_t h = ds.height(), w = ds.width(), per = h * w * 3;
    Tensor<float> batch({indices.size(), out, out, 3});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ds.size()) throw std::out_of_range("batch index past the dataset end");
        const float* src = ds.images.data() + indices[i] * per;
        float* dst = batch.data() + i * out * out * 3;
        if (augment) {
            const auto [y, x, ch, cw] = sample_crop(h, w, crop, rng);
            resample(src, w, 3, static_cast<double>(y), static_cast<double>(x), static_cast<double>(ch),
                     static_cast<double>(cw), dst, out, out, h);
        } else if (h == out && w == out) {
            std::copy(src, src + per, dst);
        } else {
            resample(src, w, 3, 0, 0, static_cast<double>(h), static_cast<double>(w), dst, out, out, h);
        }
    }
    return batch;
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<int> out;
    for (std::size_t i : indices) out.push_back(ds.labels.at(i));
    return out;
}

}  // namespace cnx
