#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "convnext/data.hpp"
#include "convnext/fcmae.hpp"
#include "convnext/model.hpp"

namespace cnx {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
    // Biases, norm affines, GRN affines, LayerScale and the mask token are not decayed.
    bool decay_1d = false;
};

// Decoupled weight decay Adam with bias correction. Each parameter's step
// size is lr * lr_scale[i].
template <class T>
class AdamW {
public:
    AdamW(std::vector<Param<T>*> params, AdamWConfig cfg, std::vector<double> lr_scale = {});

    // Throws NonFiniteError naming the parameter before touching any state.
    void step(double lr);

    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }
    void set_steps(std::size_t t) { t_ = t; }
    const std::vector<Param<T>*>& params() const { return params_; }
    std::vector<Tensor<T>>& first_moments() { return m_; }
    std::vector<Tensor<T>>& second_moments() { return v_; }
    const std::vector<Tensor<T>>& first_moments() const { return m_; }
    const std::vector<Tensor<T>>& second_moments() const { return v_; }
    const std::vector<double>& lr_scale() const { return scale_; }
    bool decays(std::size_t i) const;

private:
    std::vector<Param<T>*> params_;
    AdamWConfig cfg_;
    std::vector<double> scale_;
    std::vector<Tensor<T>> m_, v_;
    std::size_t t_ = 0;
};

struct Schedule {
    double base_lr = 1.5e-4;
    std::size_t batch_size = 256;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 1;

    double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
    static Schedule from_epochs(double base_lr, std::size_t batch_size, double warmup_epochs, double total_epochs,
                                std::size_t steps_per_epoch);
};

// Linear ramp from 0 at step 0 to the peak at warmup_steps, then half-cosine
// to 0 at step total_steps - 1. Steps past the end return 0.
double lr_at(std::size_t step, const Schedule& s);

enum class LayerDecayMode { layer_wise, group_wise };
const char* layer_decay_mode_name(LayerDecayMode m);
LayerDecayMode parse_layer_decay_mode(const std::string& s);

// Depth index of a parameter: stem 0, block i (counted over all stages) i + 1,
// downsamplers share the id of the block they feed, head total_blocks + 1.
std::size_t layer_id(const std::string& param_name, const ModelConfig& cfg);

// lr multipliers decay^(head_id - id); group_wise first maps non-head ids to
// id / 3 and the head to ceil(head_id / 3).
std::vector<double> layer_decay_multipliers(const std::vector<std::string>& names, const ModelConfig& cfg, double decay,
                                            LayerDecayMode mode);

template <class T>
std::vector<std::string> param_names(const std::vector<Param<T>*>& ps) {
    std::vector<std::string> out;
    for (const Param<T>* p : ps) out.push_back(p->name);
    return out;
}

// One FCMAE step: draw a coarse mask, encode, decode, backward, update.
// Returns the pre-update loss.
template <class T>
double pretrain_step(ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, const Tensor<T>& images, double mask_ratio,
                     ForwardPath path, AdamW<T>& opt, double lr, Rng& rng);

// One supervised step on the dense path. Returns the pre-update loss.
template <class T>
double finetune_step(ConvNeXt<T>& model, const Tensor<T>& images, const std::vector<int>& labels, AdamW<T>& opt,
                     double lr, Rng& rng);

// Top-1 accuracy in eval mode, batched.
template <class T>
double evaluate_accuracy(ConvNeXt<T>& model, const Tensor<T>& images, const std::vector<int>& labels,
                         std::size_t batch_size = 32);

struct StepRecord {
    std::size_t step = 0;  // 1-based
    double lr = 0;
    double loss = 0;
    double wall_ms = 0;  // since the loop started
};

using StepCallback = std::function<void(const StepRecord&)>;

// Epoch-wise reshuffled index stream over a dataset.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed);
    std::vector<std::size_t> next();

private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0, batch_;
    Rng rng_;
};

struct PretrainOptions {
    double mask_ratio = 0.6;
    ForwardPath path = ForwardPath::sparse;
    std::size_t steps = 500;
    std::size_t batch_size = 16;
    std::size_t image_size = 128;
    double base_lr = 1.5e-4;
    double warmup_fraction = 0.05;
    bool augment = true;
    std::uint64_t seed = 0;
};

// Base lr of the desk preset (128px, 500 steps, batch 16). The default above
// targets 800-epoch schedules and barely moves the loss in 500 steps.
inline constexpr double kDeskPretrainBaseLr = 1e-2;

// Pretraining AdamW defaults: betas (0.9, 0.95), weight decay 0.05.
AdamWConfig pretrain_adamw();

// Steps the loop over batches drawn from data; the optimizer must own the
// encoder and decoder parameters. Batch order, crops and masks all derive
// from o.seed, so traces agree across paths that use the same seed.
template <class T>
std::vector<StepRecord> run_pretrain(ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, AdamW<T>& opt, const Dataset& data,
                                     const PretrainOptions& o, const StepCallback& on_step = {});

struct FinetuneOptions {
    std::size_t steps = 100;
    std::size_t batch_size = 32;
    std::size_t image_size = 96;
    double base_lr = 1e-3;
    double warmup_fraction = 0.05;
    double layer_decay = 0.9;
    LayerDecayMode layer_decay_mode = LayerDecayMode::layer_wise;
    bool augment = true;
    std::uint64_t seed = 0;
};

// Fine-tuning AdamW defaults: betas (0.9, 0.999), weight decay 0.05.
AdamWConfig finetune_adamw();

// AdamW over every model parameter with layer-decayed lr multipliers.
template <class T>
AdamW<T> make_finetune_optimizer(ConvNeXt<T>& model, const FinetuneOptions& o, const AdamWConfig& cfg = finetune_adamw());

template <class T>
std::vector<StepRecord> run_finetune(ConvNeXt<T>& model, AdamW<T>& opt, const Dataset& data, const FinetuneOptions& o,
                                     const StepCallback& on_step = {});

// Accuracy of the dense model on data resized (not cropped) to image_size.
template <class T>
double evaluate_dataset(ConvNeXt<T>& model, const Dataset& data, std::size_t image_size, std::size_t batch_size = 32);

// Header "step,lr,loss,wall_ms" then one row per record.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const StepRecord& r);

}  // namespace cnx
