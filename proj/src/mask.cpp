#include "convnext/mask.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cnx {

std::size_t MaskGrid::masked_count(std::size_t b) const {
    std::size_t s = 0;
    const std::size_t cells = cells_per_sample();
    for (std::size_t i = 0; i < cells; ++i) s += data[b * cells + i] != 0;
    return s;
}

std::size_t MaskGrid::total_masked() const {
    std::size_t s = 0;
    for (auto v : data) s += v != 0;
    return s;
}

double MaskGrid::visible_fraction() const {
    if (data.empty()) return 1.0;
    return 1.0 - static_cast<double>(total_masked()) / static_cast<double>(data.size());
}

std::size_t masked_cell_count(double ratio, std::size_t cells) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
    }
    // The 1e-9 slack keeps exact halves rounding up under binary error.
    const double v = ratio * static_cast<double>(cells);
    const double r = std::floor(v + 0.5 + 1e-9);
    return static_cast<std::size_t>(r);
}

MaskGrid generate_mask(std::size_t n, std::size_t h, std::size_t w, double ratio, Rng& rng) {
    const std::size_t cells = h * w;
    const std::size_t k = masked_cell_count(ratio, cells);
    MaskGrid m(n, h, w);
    std::vector<std::size_t> idx(cells);
    for (std::size_t b = 0; b < n; ++b) {
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        // Partial Fisher-Yates: the first k entries are a uniform k-subset.
        for (std::size_t i = 0; i < k; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(cells - i));
            std::swap(idx[i], idx[j]);
            m.data[b * cells + idx[i]] = 1;
        }
    }
    return m;
}

namespace {

void check_factor(std::size_t factor) {
    if (factor == 0 || (factor & (factor - 1)) != 0) {
        throw std::invalid_argument("mask scale factor must be a power of two, got " + std::to_string(factor));
    }
}

}  // namespace

MaskGrid upsample_mask(const MaskGrid& coarse, std::size_t factor) {
    check_factor(factor);
    MaskGrid f(coarse.n, coarse.h * factor, coarse.w * factor);
    for (std::size_t b = 0; b < f.n; ++b)
        for (std::size_t r = 0; r < f.h; ++r)
            for (std::size_t c = 0; c < f.w; ++c) f.at(b, r, c) = coarse.at(b, r / factor, c / factor);
    return f;
}

bool is_block_uniform(const MaskGrid& m, std::size_t factor) {
    if (factor == 0 || m.h % factor != 0 || m.w % factor != 0) return false;
    for (std::size_t b = 0; b < m.n; ++b)
        for (std::size_t r = 0; r < m.h; ++r)
            for (std::size_t c = 0; c < m.w; ++c)
                if (m.at(b, r, c) != m.at(b, r - r % factor, c - c % factor)) return false;
    return true;
}

MaskGrid downsample_mask(const MaskGrid& fine, std::size_t factor) {
    check_factor(factor);
    if (!is_block_uniform(fine, factor)) {
        throw std::invalid_argument("mask of extent " + std::to_string(fine.h) + "x" + std::to_string(fine.w) +
                                    " is not block-uniform at factor " + std::to_string(factor));
    }
    MaskGrid c(fine.n, fine.h / factor, fine.w / factor);
    for (std::size_t b = 0; b < c.n; ++b)
        for (std::size_t r = 0; r < c.h; ++r)
            for (std::size_t col = 0; col < c.w; ++col) c.at(b, r, col) = fine.at(b, r * factor, col * factor);
    return c;
}

MaskPyramid build_pyramid(const MaskGrid& coarsest, std::size_t stages, std::size_t stem_stride) {
    if (stages == 0) throw std::invalid_argument("mask pyramid needs at least one level");
    MaskPyramid p;
    p.stem_stride = stem_stride;
    p.levels.resize(stages);
    p.levels[stages - 1] = coarsest;
    for (std::size_t s = stages - 1; s-- > 0;) p.levels[s] = upsample_mask(p.levels[s + 1], 2);
    return p;
}

std::string mask_to_pgm(const MaskGrid& m, std::size_t sample, std::size_t scale) {
    if (sample >= m.n) throw std::out_of_range("mask sample index out of range");
    if (scale == 0) scale = 1;
    const std::size_t w = m.w * scale, h = m.h * scale;
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + w * h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.push_back(m.masked(sample, y / scale, x / scale) ? '\0' : '\xff');
    return out;
}

}  // namespace cnx
