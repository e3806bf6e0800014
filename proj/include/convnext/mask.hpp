#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "convnext/rng.hpp"

namespace cnx {

// Per-sample binary grids, 1 = masked. Layout n x h x w, row-major.
struct MaskGrid {
    std::size_t n = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> data;

    MaskGrid() = default;
    MaskGrid(std::size_t n_, std::size_t h_, std::size_t w_, std::uint8_t fill = 0)
        : n(n_), h(h_), w(w_), data(n_ * h_ * w_, fill) {}

    std::uint8_t& at(std::size_t b, std::size_t r, std::size_t c) { return data[(b * h + r) * w + c]; }
    std::uint8_t at(std::size_t b, std::size_t r, std::size_t c) const { return data[(b * h + r) * w + c]; }
    bool masked(std::size_t b, std::size_t r, std::size_t c) const { return at(b, r, c) != 0; }

    std::size_t cells_per_sample() const { return h * w; }
    std::size_t masked_count(std::size_t b) const;
    std::size_t visible_count(std::size_t b) const { return cells_per_sample() - masked_count(b); }
    std::size_t total_masked() const;
    double visible_fraction() const;

    bool operator==(const MaskGrid&) const = default;
};

// round-half-up of ratio * cells.
std::size_t masked_cell_count(double ratio, std::size_t cells);

// Each sample gets exactly masked_cell_count(ratio, h*w) masked cells chosen
// uniformly without replacement.
MaskGrid generate_mask(std::size_t n, std::size_t h, std::size_t w, double ratio, Rng& rng);

// Nearest-neighbor replication; factor must be a power of two.
MaskGrid upsample_mask(const MaskGrid& coarse, std::size_t factor);

// Inverse of upsample_mask on block-uniform grids: a coarse cell is masked iff
// its whole block is. Throws std::invalid_argument on mixed blocks.
MaskGrid downsample_mask(const MaskGrid& fine, std::size_t factor);

bool is_block_uniform(const MaskGrid& m, std::size_t factor);

// Masks at the stem output and after every stage downsampler. levels[0] is
// the finest (input/4); levels.back() is the sampled grid.
struct MaskPyramid {
    std::vector<MaskGrid> levels;
    std::size_t stem_stride = 4;

    // Pixel-resolution mask read by the stem.
    MaskGrid pixel_mask() const { return upsample_mask(levels.front(), stem_stride); }
    const MaskGrid& coarsest() const { return levels.back(); }
};

// Builds `stages` levels from the coarsest grid, each finer level doubling
// the resolution.
MaskPyramid build_pyramid(const MaskGrid& coarsest, std::size_t stages, std::size_t stem_stride = 4);

// Binary P5 image of one sample, masked cells black, each cell `scale` pixels.
std::string mask_to_pgm(const MaskGrid& m, std::size_t sample, std::size_t scale = 1);

}  // namespace cnx
