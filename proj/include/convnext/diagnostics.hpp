#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "convnext/data.hpp"
#include "convnext/instrument.hpp"
#include "convnext/model.hpp"
#include "convnext/tensor.hpp"
#include "convnext/train.hpp"

namespace cnx {

// (1/C^2) sum_i sum_j (1 - cos(x_i, x_j)) / 2 over channel vectors of an
// H x W x C tensor (or 1 x H x W x C). A zero channel has cos 0 with every
// channel, itself included.
template <class T>
double cosine_distance(const Tensor<T>& x);

struct CollapseRow {
    std::string layer;
    double normalized_index = 0;  // i / (L - 1), 0 when L == 1
    double mean_distance = 0;
};

// Mean over images of each captured block's cosine distance, in forward order.
// Images run one at a time on the dense path in eval mode.
template <class T>
std::vector<CollapseRow> collapse_profile(ConvNeXt<T>& model, const Tensor<T>& images,
                                          CapturePoint point = CapturePoint::expansion);

void write_collapse_csv(std::ostream& out, const std::vector<CollapseRow>& rows);

// activity: images x units. Activity is clamped at 0, then per unit
// (mu_max - mean of other class means) / (mu_max + that mean + eps).
// Throws std::invalid_argument unless at least two classes are present.
std::vector<double> class_selectivity(const Tensor<double>& activity, const std::vector<int>& labels,
                                      double eps = 1e-12);

struct SelectivityRow {
    std::string layer;
    std::size_t unit = 0;
    double selectivity = 0;
};

// Spatial-mean activity of every block output channel, then class_selectivity per block.
template <class T>
std::vector<SelectivityRow> selectivity_profile(ConvNeXt<T>& model, const Tensor<T>& images,
                                                const std::vector<int>& labels, std::size_t batch_size = 16);

void write_selectivity_csv(std::ostream& out, const std::vector<SelectivityRow>& rows);

// First n channels of an H x W x C tensor, each min-max scaled to 0..255
// (constant channels become 0), tiled row-major into a sqrt(n) x sqrt(n) grid.
// Returns binary PGM bytes. Throws std::invalid_argument unless n is a
// positive perfect square no larger than C.
template <class T>
std::string export_activation_grid(const Tensor<T>& x, std::size_t n);

struct EfficiencyReport {
    std::string variant;
    double mask_ratio = 0;
    std::size_t image_size = 0;
    std::uint64_t sparse_macs = 0;
    std::uint64_t dense_macs = 0;
    double sparse_ms = 0;        // median
    double masked_dense_ms = 0;  // median
    std::size_t sparse_peak_bytes = 0;
    std::size_t masked_dense_peak_bytes = 0;
    std::vector<MacRecord> sparse_layers;
};

struct EfficiencyOptions {
    double mask_ratio = 0.6;
    std::size_t trials = 3;
    std::size_t image_size = 224;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
};

// Encoder-only f32 forward (no tape) on both masked paths with one shared mask.
// Peak bytes are the tensor high-water mark above the live set at entry.
EfficiencyReport efficiency_benchmark(const ModelConfig& cfg, const EfficiencyOptions& opts);

void write_efficiency_csv(std::ostream& out, const std::vector<EfficiencyReport>& rows);

// True when every submanifold record satisfies macs * total == dense * active.
bool submanifold_identity_holds(const std::vector<MacRecord>& records);

struct EquivalenceResult {
    double max_abs_diff = 0;       // over every stage output, f32
    double max_grad_rel_diff = 0;  // per-parameter inf-norm difference / inf-norm, maximized
    std::size_t masked_cells = 0, total_cells = 0;
};

// One randomized encoder instance: weights from `seed` with every 1-D
// parameter shifted by N(0, 0.1^2) so GRN, norms and biases are non-trivial,
// N(0, 1) images, a coarse mask at `ratio`. Compares sparse and masked-dense
// stage outputs and, with gradients, the parameter gradients of a fixed
// random projection of the last stage.
EquivalenceResult equivalence_trial(const ModelConfig& cfg, double ratio, std::size_t image_size, std::size_t batch,
                                    std::uint64_t seed, bool gradients);

// Global-average-pooled last-stage features (dense path, eval mode) of every
// image resized to image_size. Returns N x C.
template <class T>
Tensor<double> pooled_features(ConvNeXt<T>& model, const Dataset& data, std::size_t image_size,
                               std::size_t batch_size = 16);

// Softmax regression on standardized features (train statistics), trained by
// full-batch Adam from zero weights. Returns validation top-1 accuracy.
double linear_probe(const Tensor<double>& train_x, const std::vector<int>& train_y, const Tensor<double>& val_x,
                    const std::vector<int>& val_y, std::size_t num_classes, std::size_t steps = 300, double lr = 0.05);

struct SweepOptions {
    ModelConfig encoder;
    DecoderConfig decoder;
    PretrainOptions pretrain;  // mask_ratio is overridden per row
    std::uint64_t init_seed = 0;
    std::size_t probe_steps = 300;
};

struct SweepRow {
    double ratio = 0;
    double final_loss = 0;  // mean of the last min(10, steps) step losses
    double probe_accuracy = 0;
};

// Identical f32 pretraining (same init, batches and crops) for each ratio,
// then a linear probe on frozen pooled features. Ratios must lie in (0, 1).
std::vector<SweepRow> masking_ratio_sweep(const std::vector<double>& ratios, const SweepOptions& o, const Dataset& train,
                                          const Dataset& val, const std::function<void(const std::string&)>& log = {});

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

}  // namespace cnx
