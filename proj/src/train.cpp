#include "convnext/train.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "convnext/ops.hpp"

namespace cnx {

template <class T>
AdamW<T>::AdamW(std::vector<Param<T>*> params, AdamWConfig cfg, std::vector<double> lr_scale)
    : params_(std::move(params)), cfg_(cfg), scale_(std::move(lr_scale)) {
    if (scale_.empty()) scale_.assign(params_.size(), 1.0);
    if (scale_.size() != params_.size())
        throw std::invalid_argument("AdamW: " + std::to_string(scale_.size()) + " lr multipliers for " +
                                    std::to_string(params_.size()) + " parameters");
    for (Param<T>* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

template <class T>
bool AdamW<T>::decays(std::size_t i) const {
    return cfg_.weight_decay != 0.0 && (cfg_.decay_1d || params_[i]->value.shape().size() > 1);
}

template <class T>
void AdamW<T>::step(double lr) {
    for (const Param<T>* p : params_) {
        const T* g = p->grad.data();
        for (std::size_t k = 0; k < p->grad.numel(); ++k)
            if (!std::isfinite(static_cast<double>(g[k])))
                throw NonFiniteError("non-finite gradient in " + p->name + "[" + std::to_string(k) + "]; step aborted");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param<T>& p = *params_[i];
        const double a = lr * scale_[i];
        const double shrink = decays(i) ? 1.0 - a * cfg_.weight_decay : 1.0;
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* m = m_[i].data();
        T* v = v_[i].data();
        for (std::size_t k = 0; k < p.value.numel(); ++k) {
            const double gk = static_cast<double>(g[k]);
            const double mk = cfg_.beta1 * static_cast<double>(m[k]) + (1.0 - cfg_.beta1) * gk;
            const double vk = cfg_.beta2 * static_cast<double>(v[k]) + (1.0 - cfg_.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps);
            w[k] = static_cast<T>(static_cast<double>(w[k]) * shrink - a * update);
        }
    }
}

Schedule Schedule::from_epochs(double base_lr, std::size_t batch_size, double warmup_epochs, double total_epochs,
                               std::size_t steps_per_epoch) {
    Schedule s;
    s.base_lr = base_lr;
    s.batch_size = batch_size;
    s.warmup_steps = static_cast<std::size_t>(std::llround(warmup_epochs * static_cast<double>(steps_per_epoch)));
    s.total_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(total_epochs * static_cast<double>(steps_per_epoch))));
    return s;
}

double lr_at(std::size_t step, const Schedule& s) {
    const double peak = s.peak_lr();
    if (step < s.warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const std::size_t last = s.total_steps > 0 ? s.total_steps - 1 : 0;
    if (step >= last) return 0.0;
    const double t = static_cast<double>(step - s.warmup_steps) / static_cast<double>(last - s.warmup_steps);
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

const char* layer_decay_mode_name(LayerDecayMode m) { return m == LayerDecayMode::layer_wise ? "layer" : "group"; }

LayerDecayMode parse_layer_decay_mode(const std::string& s) {
    if (s == "layer" || s == "layer_wise" || s == "layer-wise") return LayerDecayMode::layer_wise;
    if (s == "group" || s == "group_wise" || s == "group-wise") return LayerDecayMode::group_wise;
    throw std::invalid_argument("unknown layer decay mode '" + s + "' (expected layer or group)");
}

std::size_t layer_id(const std::string& name, const ModelConfig& cfg) {
    auto first_block = [&](std::size_t stage) {
        std::size_t id = 1;
        for (std::size_t s = 0; s < stage; ++s) id += cfg.depths[s];
        return id;
    };
    auto number_after = [&](const std::string& prefix, std::size_t from) {
        std::size_t end = from + prefix.size();
        std::size_t v = 0;
        if (name.compare(from, prefix.size(), prefix) != 0 || end >= name.size() || !std::isdigit(static_cast<unsigned char>(name[end])))
            throw std::invalid_argument("parameter name '" + name + "' has no layer index");
        while (end < name.size() && std::isdigit(static_cast<unsigned char>(name[end]))) v = v * 10 + (name[end++] - '0');
        return std::pair(v, end);
    };
    if (name.rfind("stem.", 0) == 0) return 0;
    if (name.rfind("head.", 0) == 0) return cfg.total_blocks() + 1;
    if (name.rfind("downsample", 0) == 0) {
        const auto [s, end] = number_after("downsample", 0);
        if (s == 0 || s >= cfg.stages()) throw std::invalid_argument("parameter '" + name + "' names a missing stage");
        return first_block(s);
    }
    if (name.rfind("stage", 0) == 0) {
        const auto [s, end] = number_after("stage", 0);
        const auto [b, end2] = number_after(".block", end);
        if (s >= cfg.stages() || b >= cfg.depths[s])
            throw std::invalid_argument("parameter '" + name + "' names a missing block");
        return first_block(s) + b;
    }
    throw std::invalid_argument("parameter '" + name + "' does not belong to the encoder");
}

std::vector<double> layer_decay_multipliers(const std::vector<std::string>& names, const ModelConfig& cfg, double decay,
                                            LayerDecayMode mode) {
    if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("layer decay must lie in (0, 1]");
    const std::size_t head = cfg.total_blocks() + 1;
    const std::size_t top = mode == LayerDecayMode::layer_wise ? head : (head + 2) / 3;
    std::vector<double> out;
    for (const auto& n : names) {
        const std::size_t id = layer_id(n, cfg);
        std::size_t g = id;
        if (mode == LayerDecayMode::group_wise) g = id == head ? top : id / 3;
        out.push_back(std::pow(decay, static_cast<double>(top - g)));
    }
    return out;
}

template <class T>
double pretrain_step(ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, const Tensor<T>& images, double mask_ratio,
                     ForwardPath path, AdamW<T>& opt, double lr, Rng& rng) {
    const Shape& s = images.shape();
    const std::size_t stride = encoder.config().total_stride();
    if (s.size() != 4 || s[1] % stride || s[2] % stride)
        throw ShapeError("pretrain batch " + shape_str(s) + " is not divisible by the stride " + std::to_string(stride));
    const MaskGrid coarse = generate_mask(s[0], s[1] / stride, s[2] / stride, mask_ratio, rng);
    for (Param<T>* p : opt.params()) p->zero_grad();
    encoder.training = true;
    Tape<T> tape;
    ParamBinder<T> bind(&tape);
    const Var<T> loss = fcmae_loss(bind, encoder, decoder, images, coarse, path, &rng);
    const double value = static_cast<double>(loss.value().item());
    tape.backward(loss);
    opt.step(lr);
    return value;
}

template <class T>
double finetune_step(ConvNeXt<T>& model, const Tensor<T>& images, const std::vector<int>& labels, AdamW<T>& opt,
                     double lr, Rng& rng) {
    for (Param<T>* p : opt.params()) p->zero_grad();
    model.training = true;
    Tape<T> tape;
    ParamBinder<T> bind(&tape);
    ForwardOptions<T> o;
    o.rng = &rng;
    const Var<T> loss = cross_entropy(model.forward(bind, Var<T>(images), o).logits, labels);
    const double value = static_cast<double>(loss.value().item());
    tape.backward(loss);
    opt.step(lr);
    return value;
}

template <class T>
double evaluate_accuracy(ConvNeXt<T>& model, const Tensor<T>& images, const std::vector<int>& labels,
                         std::size_t batch_size) {
    const Shape& s = images.shape();
    if (s.size() != 4 || labels.size() != s[0]) throw ShapeError("evaluate: images and labels disagree");
    if (s[0] == 0) return 0.0;
    const bool was_training = model.training;
    model.training = false;
    const std::size_t per = s[1] * s[2] * s[3];
    std::size_t correct = 0;
    ParamBinder<T> bind(nullptr);
    for (std::size_t lo = 0; lo < s[0]; lo += batch_size) {
        const std::size_t hi = std::min(s[0], lo + batch_size);
        Tensor<T> batch({hi - lo, s[1], s[2], s[3]});
        std::copy(images.data() + lo * per, images.data() + hi * per, batch.data());
        const Tensor<T> logits = model.forward(bind, Var<T>(batch)).logits.value();
        const std::size_t k = logits.shape()[1];
        for (std::size_t i = 0; i < hi - lo; ++i) {
            const T* row = logits.data() + i * k;
            const auto best = static_cast<int>(std::max_element(row, row + k) - row);
            if (best == labels[lo + i]) ++correct;
        }
    }
    model.training = was_training;
    return static_cast<double>(correct) / static_cast<double>(s[0]);
}

BatchSampler::BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : order_(n), batch_(batch_size), rng_(seed) {
    if (n == 0 || batch_size == 0) throw std::invalid_argument("batch sampler needs data and a positive batch size");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    rng_.shuffle(order_);
}

std::vector<std::size_t> BatchSampler::next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
        if (pos_ == order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        out.push_back(order_[pos_++]);
    }
    return out;
}

AdamWConfig pretrain_adamw() {
    AdamWConfig c;
    c.beta2 = 0.95;
    return c;
}

AdamWConfig finetune_adamw() { return AdamWConfig{}; }

namespace {

Schedule make_schedule(double base_lr, std::size_t batch, std::size_t steps, double warmup_fraction) {
    Schedule s;
    s.base_lr = base_lr;
    s.batch_size = batch;
    s.total_steps = std::max<std::size_t>(steps, 1);
    s.warmup_steps = static_cast<std::size_t>(std::llround(warmup_fraction * static_cast<double>(steps)));
    return s;
}

// Independent streams for batch order, crops and masks.
constexpr std::uint64_t kSamplerStream = 0x5a17ULL, kCropStream = 0xc409ULL, kStepStream = 0x57e9ULL;

}  // namespace

template <class T>
std::vector<StepRecord> run_pretrain(ConvNeXt<T>& encoder, FcmaeDecoder<T>& decoder, AdamW<T>& opt, const Dataset& data,
                                     const PretrainOptions& o, const StepCallback& on_step) {
    const Schedule sched = make_schedule(o.base_lr, o.batch_size, o.steps, o.warmup_fraction);
    BatchSampler sampler(data.size(), o.batch_size, o.seed ^ kSamplerStream);
    Rng crop_rng(o.seed ^ kCropStream), step_rng(o.seed ^ kStepStream);
    std::vector<StepRecord> out;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < o.steps; ++t) {
        const Tensor<float> batch = make_batch(data, sampler.next(), o.image_size, o.augment, crop_rng);
        StepRecord r;
        r.step = t + 1;
        r.lr = lr_at(t, sched);
        r.loss = pretrain_step(encoder, decoder, batch.cast<T>(), o.mask_ratio, o.path, opt, r.lr, step_rng);
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(r);
        if (on_step) on_step(r);
    }
    return out;
}

template <class T>
AdamW<T> make_finetune_optimizer(ConvNeXt<T>& model, const FinetuneOptions& o, const AdamWConfig& cfg) {
    auto ps = model.params();
    return AdamW<T>(ps, cfg, layer_decay_multipliers(param_names(ps), model.config(), o.layer_decay, o.layer_decay_mode));
}

template <class T>
std::vector<StepRecord> run_finetune(ConvNeXt<T>& model, AdamW<T>& opt, const Dataset& data, const FinetuneOptions& o,
                                     const StepCallback& on_step) {
    const Schedule sched = make_schedule(o.base_lr, o.batch_size, o.steps, o.warmup_fraction);
    BatchSampler sampler(data.size(), o.batch_size, o.seed ^ kSamplerStream);
    Rng crop_rng(o.seed ^ kCropStream), step_rng(o.seed ^ kStepStream);
    std::vector<StepRecord> out;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t t = 0; t < o.steps; ++t) {
        const auto idx = sampler.next();
        const Tensor<float> batch = make_batch(data, idx, o.image_size, o.augment, crop_rng);
        StepRecord r;
        r.step = t + 1;
        r.lr = lr_at(t, sched);
        r.loss = finetune_step(model, batch.cast<T>(), batch_labels(data, idx), opt, r.lr, step_rng);
        r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(r);
        if (on_step) on_step(r);
    }
    return out;
}

template <class T>
double evaluate_dataset(ConvNeXt<T>& model, const Dataset& data, std::size_t image_size, std::size_t batch_size) {
    if (data.size() == 0) return 0.0;
    std::size_t correct = 0;
    Rng unused(0);
    for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = lo; i < std::min(data.size(), lo + batch_size); ++i) idx.push_back(i);
        const Tensor<float> batch = make_batch(data, idx, image_size, false, unused);
        const double acc = evaluate_accuracy(model, batch.cast<T>(), batch_labels(data, idx), batch_size);
        correct += static_cast<std::size_t>(std::llround(acc * static_cast<double>(idx.size())));
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

void write_metrics_header(std::ostream& out) { out << "step,lr,loss,wall_ms\n"; }

void write_metrics_row(std::ostream& out, const StepRecord& r) {
    const auto old = out.precision(10);
    out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.wall_ms << '\n';
    out.precision(old);
}

#define CNX_INSTANTIATE(T)                                                                                     \
    template class AdamW<T>;                                                                                   \
    template double pretrain_step(ConvNeXt<T>&, FcmaeDecoder<T>&, const Tensor<T>&, double, ForwardPath, AdamW<T>&, \
                                  double, Rng&);                                                              \
    template double finetune_step(ConvNeXt<T>&, const Tensor<T>&, const std::vector<int>&, AdamW<T>&, double, Rng&); \
    template double evaluate_accuracy(ConvNeXt<T>&, const Tensor<T>&, const std::vector<int>&, std::size_t);     \
    template std::vector<StepRecord> run_pretrain(ConvNeXt<T>&, FcmaeDecoder<T>&, AdamW<T>&, const Dataset&,   \
                                                  const PretrainOptions&, const StepCallback&);              \
    template AdamW<T> make_finetune_optimizer(ConvNeXt<T>&, const FinetuneOptions&, const AdamWConfig&);      \
    template std::vector<StepRecord> run_finetune(ConvNeXt<T>&, AdamW<T>&, const Dataset&, const FinetuneOptions&, \
                                                  const StepCallback&);                                       \
    template double evaluate_dataset(ConvNeXt<T>&, const Dataset&, std::size_t, std::size_t);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
