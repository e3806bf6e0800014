#include "convnext/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "convnext/checkpoint.hpp"
#include "convnext/data.hpp"
#include "convnext/diagnostics.hpp"
#include "convnext/mask.hpp"
#include "convnext/train.hpp"
#include "json.hpp"

namespace cnx {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
    std::uint64_t seed = 0;
    std::string out;
};

struct ModelFlags {
    std::string variant = "atto";
    std::string arch = "v2";
    std::string grn_agg = "l2";
    std::string grn_norm = "divisive";
    std::string grn_residual = "on";
    double drop_path = 0.0;
};

struct DataFlags {
    std::string data = "synth";
    std::size_t image_size = 0;
    std::size_t num_images = 0;  // 0: whole split (CIFAR) or 512 (synth)
    std::size_t val_images = 0;  // 0: whole split (CIFAR) or 256 (synth)
};

void add_common(CLI::App* s, Common& c, const std::string& name) {
    c.out = "runs/" + name;
    s->add_option("--seed", c.seed, "Seed for initialization, data order, crops and masks")->capture_default_str();
    s->add_option("--out", c.out, "Output directory (config snapshot and results)")->capture_default_str();
}

void add_model(CLI::App* s, ModelFlags& m, bool drop_path) {
    s->add_option("--variant", m.variant, "Registry variant")->check(CLI::IsMember(registry_names()))->capture_default_str();
    s->add_option("--arch", m.arch, "Block design")->check(CLI::IsMember({"v1", "v2"}))->capture_default_str();
    s->add_option("--grn-agg", m.grn_agg, "GRN spatial aggregation")
        ->check(CLI::IsMember({"l2", "l1", "avg"}))
        ->capture_default_str();
    s->add_option("--grn-norm", m.grn_norm, "GRN cross-channel normalization")
        ->check(CLI::IsMember({"divisive", "standardize", "inverse-sum"}))
        ->capture_default_str();
    s->add_option("--grn-residual", m.grn_residual, "GRN residual connection")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    if (drop_path) s->add_option("--drop-path", m.drop_path, "Maximum stochastic depth rate")->capture_default_str();
}

void add_data(CLI::App* s, DataFlags& d, std::size_t image_size, bool val) {
    d.image_size = image_size;
    s->add_option("--data", d.data, "synth or cifar10:<dir>")->capture_default_str();
    s->add_option("--image-size", d.image_size, "Square input resolution")->capture_default_str();
    s->add_option("--num-images", d.num_images, "Training images (0: all CIFAR-10 / 512 synthetic)")->capture_default_str();
    if (val)
        s->add_option("--val-images", d.val_images, "Validation images (0: all CIFAR-10 test / 256 synthetic)")
            ->capture_default_str();
}

ModelConfig model_config(const ModelFlags& m, std::size_t num_classes) {
    ModelConfig c = registry_config(m.variant, num_classes, parse_arch(m.arch));
    c.grn.aggregation = parse_grn_aggregation(m.grn_agg);
    c.grn.normalization = parse_grn_normalization(m.grn_norm);
    c.grn.residual = m.grn_residual == "on";
    c.drop_path_rate = m.drop_path;
    c.validate();
    c.grn.validate();
    return c;
}

// Options still at their defaults take the preset value.
void apply_preset(CLI::App* s, const std::map<std::string, std::string>& values) {
    for (const auto& [flag, v] : values) {
        CLI::Option* o = s->get_option(flag);
        if (o->count() == 0) o->default_val(v);
    }
}

void write_snapshot(CLI::App* s, const fs::path& dir) {
    std::ofstream f(dir / "config.ini");
    f << "# Resolved configuration; rerun with --config " << (dir / "config.ini").string() << "\n";
    f << "[" << s->get_name() << "]\n" << s->config_to_str(true, false);
}

fs::path prepare_out(CLI::App* s, const Common& c) {
    const fs::path dir(c.out);
    fs::create_directories(dir);
    write_snapshot(s, dir);
    return dir;
}

void write_text(const fs::path& p, const std::string& bytes) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + p.string() + "'");
    f << bytes;
}

void write_summary(const fs::path& dir, const json& j) { write_text(dir / "summary.json", j.dump(2) + "\n"); }

Dataset load_split(const DataFlags& d, bool train, std::uint64_t seed) {
    const std::size_t limit = train ? d.num_images : d.val_images;
    if (d.data == "synth")
        return synth_dataset(seed * 2 + (train ? 0 : 1), limit ? limit : (train ? 512 : 256), d.image_size, 4);
    const std::string prefix = "cifar10:";
    if (d.data.rfind(prefix, 0) == 0) return load_cifar10(d.data.substr(prefix.size()), train, limit);
    throw std::invalid_argument("--data must be synth or cifar10:<dir>, got '" + d.data + "'");
}

std::string join3(const std::array<double, 3>& v) {
    std::ostringstream s;
    s << std::setprecision(17) << v[0] << ',' << v[1] << ',' << v[2];
    return s.str();
}

std::array<double, 3> split3(const std::string& s) {
    std::array<double, 3> v{};
    std::istringstream in(s);
    std::string tok;
    for (double& x : v) {
        if (!std::getline(in, tok, ',')) throw CheckpointError("malformed channel statistics '" + s + "'");
        x = std::stod(tok);
    }
    return v;
}

void store_stats(Checkpoint& ck, const ChannelStats& s) {
    ck.meta["data.mean"] = join3(s.mean);
    ck.meta["data.std"] = join3(s.std);
}

std::optional<ChannelStats> load_stats(const Checkpoint& ck) {
    if (!ck.meta.count("data.mean") || !ck.meta.count("data.std")) return std::nullopt;
    ChannelStats s;
    s.mean = split3(ck.meta.at("data.mean"));
    s.std = split3(ck.meta.at("data.std"));
    return s;
}

class MetricsLog {
public:
    explicit MetricsLog(const fs::path& p) : path_(p) {
        const bool fresh = !fs::exists(p) || fs::file_size(p) == 0;
        f_.open(p, std::ios::app);
        if (!f_) throw std::runtime_error("cannot open '" + p.string() + "'");
        if (fresh) write_metrics_header(f_);
    }
    void add(const StepRecord& r) {
        write_metrics_row(f_, r);
        f_.flush();
    }

private:
    fs::path path_;
    std::ofstream f_;
};

std::size_t steps_for(std::size_t steps, double epochs, std::size_t n, std::size_t batch) {
    if (steps > 0) return steps;
    if (epochs <= 0) throw std::invalid_argument("give --steps or a positive --epochs");
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(epochs * static_cast<double>(n) / static_cast<double>(batch))));
}

std::string millions(std::uint64_t v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << static_cast<double>(v) / 1e6 << "M";
    return s.str();
}

std::string giga(std::uint64_t v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << static_cast<double>(v) / 1e9 << "G";
    return s.str();
}

std::vector<Param<float>*> joined(ConvNeXt<float>& enc, FcmaeDecoder<float>& dec) {
    auto ps = enc.params();
    for (Param<float>* p : dec.params()) ps.push_back(p);
    return ps;
}

// Model from a checkpoint's config and weights, or freshly initialized.
ConvNeXt<float> load_or_init(const std::string& checkpoint, const ModelFlags& m, std::size_t classes, std::uint64_t seed,
                             std::optional<ChannelStats>* stats) {
    if (checkpoint.empty()) return ConvNeXt<float>(model_config(m, classes), seed);
    const Checkpoint ck = Checkpoint::load(checkpoint);
    ConvNeXt<float> model(load_model_config(ck), seed);
    restore_params(ck, model.params());
    if (stats) *stats = load_stats(ck);
    return model;
}

// ---- pretrain ---------------------------------------------------------------

struct PretrainCmd {
    Common common;
    ModelFlags model;
    DataFlags data;
    std::string preset = "desk";
    double mask_ratio = 0.6;
    std::size_t decoder_dim = 512, decoder_depth = 1;
    std::string path = "sparse";
    std::size_t steps = 500;
    double epochs = 0;
    std::size_t batch_size = 16;
    double base_lr = kDeskPretrainBaseLr;
    double warmup = 0.05;
    double weight_decay = 0.05;
    std::string augment = "on";
    std::size_t log_every = 50;

    void add(CLI::App* s) {
        add_common(s, common, "pretrain");
        add_model(s, model, true);
        add_data(s, data, 128, false);
        s->add_option("--preset", preset, "desk: 128px, 500 steps, batch 16; smoke: 64px, 50 steps, batch 8")
            ->check(CLI::IsMember({"desk", "smoke"}))
            ->capture_default_str();
        s->add_option("--mask-ratio", mask_ratio, "Fraction of coarse cells masked")->capture_default_str();
        s->add_option("--decoder-dim", decoder_dim, "Decoder width")->capture_default_str();
        s->add_option("--decoder-depth", decoder_depth, "Decoder V2 blocks")->capture_default_str();
        s->add_option("--path", path, "Encoder execution")->check(CLI::IsMember({"sparse", "masked-dense"}))->capture_default_str();
        s->add_option("--steps", steps, "Optimizer steps (ignored when --epochs > 0)")->capture_default_str();
        s->add_option("--epochs", epochs, "Epochs over --num-images; overrides --steps")->capture_default_str();
        s->add_option("--batch-size", batch_size, "Images per step")->capture_default_str();
        s->add_option("--base-lr", base_lr, "lr at batch 256; peak = base-lr * batch / 256")->capture_default_str();
        s->add_option("--warmup-frac", warmup, "Warmup as a fraction of all steps")->capture_default_str();
        s->add_option("--weight-decay", weight_decay, "Decoupled weight decay (matrices only)")->capture_default_str();
        s->add_option("--augment", augment, "Random resized crop")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
        s->add_option("--log-every", log_every, "Progress line interval")->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        if (preset == "desk")
            apply_preset(s, {{"--image-size", "128"}, {"--steps", "500"}, {"--batch-size", "16"}});
        else
            apply_preset(s, {{"--image-size", "64"}, {"--steps", "50"}, {"--batch-size", "8"}});
        const fs::path dir = prepare_out(s, common);
        ModelConfig cfg = model_config(model, 1000);
        DecoderConfig dcfg;
        dcfg.dim = decoder_dim;
        dcfg.depth = decoder_depth;
        dcfg.patch = cfg.total_stride();
        dcfg.grn = cfg.grn;
        Dataset train = load_split(data, true, common.seed);
        const ChannelStats stats = channel_stats(train);
        standardize(train, stats);

        PretrainOptions o;
        o.mask_ratio = mask_ratio;
        o.path = parse_forward_path(path);
        o.batch_size = batch_size;
        o.steps = steps_for(epochs > 0 ? 0 : steps, epochs, train.size(), batch_size);
        o.image_size = data.image_size;
        o.base_lr = base_lr;
        o.warmup_fraction = warmup;
        o.augment = augment == "on";
        o.seed = common.seed;
        if (!(mask_ratio > 0 && mask_ratio < 1)) throw std::invalid_argument("--mask-ratio must lie in (0, 1)");

        ConvNeXt<float> enc(cfg, common.seed);
        FcmaeDecoder<float> dec(cfg.width(cfg.stages() - 1), dcfg, common.seed + 1);
        AdamWConfig acfg = pretrain_adamw();
        acfg.weight_decay = weight_decay;
        AdamW<float> opt(joined(enc, dec), acfg);
        out << "pretrain " << cfg.name << " (" << arch_name(cfg.arch) << ") at " << o.image_size << "px, " << o.steps
            << " steps, batch " << o.batch_size << ", peak lr " << base_lr * static_cast<double>(batch_size) / 256.0 << "\n";
        MetricsLog metrics(dir / "metrics.csv");
        const auto trace = run_pretrain(enc, dec, opt, train, o, [&](const StepRecord& r) {
            metrics.add(r);
            if (r.step == 1 || r.step % std::max<std::size_t>(log_every, 1) == 0 || r.step == o.steps)
                out << "step " << r.step << " lr " << r.lr << " loss " << r.loss << " (" << std::fixed
                    << std::setprecision(1) << r.wall_ms / 1000 << " s)" << std::defaultfloat << std::setprecision(6)
                    << "\n";
        });

        Checkpoint ck;
        ck.meta["kind"] = "fcmae";
        ck.meta["step"] = std::to_string(o.steps);
        ck.meta["train.image_size"] = std::to_string(o.image_size);
        ck.meta["train.mask_ratio"] = std::to_string(mask_ratio);
        ck.meta["train.data"] = data.data;
        store_stats(ck, stats);
        store_model_config(ck, cfg);
        store_decoder_config(ck, dcfg);
        store_params(ck, enc.params());
        store_params(ck, dec.params());
        store_optimizer(ck, opt);
        ck.save((dir / "pretrain.ckpt").string());
        write_summary(dir, {{"command", "pretrain"},
                            {"steps", o.steps},
                            {"first_loss", trace.front().loss},
                            {"final_loss", trace.back().loss},
                            {"wall_ms", trace.back().wall_ms}});
        out << "wrote " << (dir / "pretrain.ckpt").string() << "\n";
        return 0;
    }
};

// ---- finetune / evaluate -------------------------------------------------------

struct FinetuneCmd {
    Common common;
    ModelFlags model;
    DataFlags data;
    std::string checkpoint;
    std::size_t steps = 0;
    double epochs = 2;
    std::size_t batch_size = 32;
    double base_lr = 2e-3;
    double layer_decay = 0.9;
    std::string layer_decay_mode = "layer";
    double weight_decay = 0.05;
    double warmup = 0.05;
    std::string augment = "on";
    std::size_t log_every = 50;

    void add(CLI::App* s) {
        model.drop_path = 0.1;
        add_common(s, common, "finetune");
        add_model(s, model, true);
        add_data(s, data, 96, true);
        s->add_option("--checkpoint", checkpoint, "FCMAE checkpoint to start from (empty: random init)")->capture_default_str();
        s->add_option("--steps", steps, "Optimizer steps (0: derive from --epochs)")->capture_default_str();
        s->add_option("--epochs", epochs, "Epochs over the training split")->capture_default_str();
        s->add_option("--batch-size", batch_size, "Images per step")->capture_default_str();
        s->add_option("--base-lr", base_lr, "lr at batch 256; peak = base-lr * batch / 256")->capture_default_str();
        s->add_option("--layer-decay", layer_decay, "Per-layer lr decay toward the stem")->capture_default_str();
        s->add_option("--layer-decay-mode", layer_decay_mode, "One rate per layer or per group of three")
            ->check(CLI::IsMember({"layer", "group"}))
            ->capture_default_str();
        s->add_option("--weight-decay", weight_decay, "Decoupled weight decay (matrices only)")->capture_default_str();
        s->add_option("--warmup-frac", warmup, "Warmup as a fraction of all steps")->capture_default_str();
        s->add_option("--augment", augment, "Random resized crop")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
        s->add_option("--log-every", log_every, "Progress line interval")->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        Dataset train = load_split(data, true, common.seed), val = load_split(data, false, common.seed);
        ChannelStats stats = channel_stats(train);
        std::optional<ConvNeXt<float>> m;
        if (checkpoint.empty()) {
            m.emplace(model_config(model, train.num_classes), common.seed);
        } else {
            const Checkpoint ck = Checkpoint::load(checkpoint);
            if (auto st = load_stats(ck)) stats = *st;
            m.emplace(model_from_pretrained<float>(ck, train.num_classes, common.seed, model.drop_path));
        }
        standardize(train, stats);
        standardize(val, stats);
        FinetuneOptions o;
        o.batch_size = batch_size;
        o.steps = steps_for(steps, epochs, train.size(), batch_size);
        o.image_size = data.image_size;
        o.base_lr = base_lr;
        o.warmup_fraction = warmup;
        o.layer_decay = layer_decay;
        o.layer_decay_mode = parse_layer_decay_mode(layer_decay_mode);
        o.augment = augment == "on";
        o.seed = common.seed;
        AdamWConfig acfg = finetune_adamw();
        acfg.weight_decay = weight_decay;
        AdamW<float> opt = make_finetune_optimizer(*m, o, acfg);
        out << "finetune " << m->config().name << " from " << (checkpoint.empty() ? "random init" : checkpoint) << ", "
            << o.steps << " steps at " << o.image_size << "px\n";
        MetricsLog metrics(dir / "metrics.csv");
        const auto trace = run_finetune(*m, opt, train, o, [&](const StepRecord& r) {
            metrics.add(r);
            if (r.step == 1 || r.step % std::max<std::size_t>(log_every, 1) == 0 || r.step == o.steps)
                out << "step " << r.step << " lr " << r.lr << " loss " << r.loss << "\n";
        });
        const double acc = evaluate_dataset(*m, val, o.image_size, 64);
        out << "val_accuracy " << acc << " (" << val.size() << " images)\n";

        Checkpoint ck;
        ck.meta["kind"] = "classifier";
        ck.meta["step"] = std::to_string(o.steps);
        ck.meta["train.image_size"] = std::to_string(o.image_size);
        ck.meta["train.data"] = data.data;
        ck.meta["val_accuracy"] = std::to_string(acc);
        store_stats(ck, stats);
        store_model_config(ck, m->config());
        store_params(ck, m->params());
        store_optimizer(ck, opt);
        ck.save((dir / "finetune.ckpt").string());
        write_summary(dir, {{"command", "finetune"},
                            {"init", checkpoint.empty() ? "random" : checkpoint},
                            {"steps", o.steps},
                            {"final_loss", trace.back().loss},
                            {"val_accuracy", acc},
                            {"val_images", val.size()}});
        return 0;
    }
};

struct EvaluateCmd {
    Common common;
    DataFlags data;
    std::string checkpoint;
    std::string split = "test";

    void add(CLI::App* s) {
        add_common(s, common, "evaluate");
        add_data(s, data, 0, true);
        s->get_option("--image-size")->description("Input resolution (0: the checkpoint's training size)");
        s->add_option("--checkpoint", checkpoint, "Classifier checkpoint")->required();
        s->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        const Checkpoint ck = Checkpoint::load(checkpoint);
        if (!ck.meta.count("kind") || ck.meta.at("kind") != "classifier")
            throw std::invalid_argument("'" + checkpoint + "' is not a fine-tuned classifier checkpoint");
        ConvNeXt<float> m(load_model_config(ck), 0);
        restore_params(ck, m.params());
        DataFlags d = data;
        if (d.image_size == 0) d.image_size = std::stoul(ck.meta.at("train.image_size"));
        Dataset ds = load_split(d, split == "train", common.seed);
        if (ds.num_classes != m.config().num_classes)
            throw std::invalid_argument("dataset has " + std::to_string(ds.num_classes) + " classes, model " +
                                        std::to_string(m.config().num_classes));
        standardize(ds, load_stats(ck).value_or(channel_stats(ds)));
        const double acc = evaluate_dataset(m, ds, d.image_size, 64);
        out << "accuracy " << acc << " (" << ds.size() << " images, " << split << " split)\n";
        write_summary(dir, {{"command", "evaluate"}, {"accuracy", acc}, {"images", ds.size()}, {"split", split}});
        return 0;
    }
};

// ---- model-info ----------------------------------------------------------------

struct ModelInfoCmd {
    Common common;
    ModelFlags model;
    std::size_t image_size = 224;
    std::size_t num_classes = 1000;
    bool layers = false;

    void add(CLI::App* s) {
        add_common(s, common, "model-info");
        add_model(s, model, false);
        s->add_option("--image-size", image_size, "Square input resolution for FLOPs")->capture_default_str();
        s->add_option("--num-classes", num_classes, "Classifier width")->capture_default_str();
        s->add_flag("--layers", layers, "Print every layer");
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        const ModelConfig cfg = model_config(model, num_classes);
        const auto rows = describe_layers(cfg, image_size, image_size);
        const std::uint64_t params = count_params(cfg), flops = count_flops(cfg, image_size, image_size);
        out << "variant      " << cfg.name << " (" << arch_name(cfg.arch) << ")\n";
        out << "dims         ";
        for (std::size_t st = 0; st < cfg.stages(); ++st) out << (st ? "," : "") << cfg.width(st);
        out << "\ndepths       ";
        for (std::size_t st = 0; st < cfg.stages(); ++st) out << (st ? "," : "") << cfg.depths[st];
        out << "\ntotal params " << millions(params) << " (" << params << ")\n";
        out << "FLOPs        " << giga(flops) << " at " << image_size << "x" << image_size << " (1 MAC = 1 FLOP)\n";
        std::ofstream csv(dir / "layers.csv");
        csv << "layer,output,params,flops\n";
        if (layers) out << std::left << std::setw(34) << "layer" << std::setw(16) << "output" << std::setw(12) << "params" << "flops\n";
        for (const auto& r : rows) {
            std::ostringstream shape;
            for (std::size_t i = 0; i < r.output.size(); ++i) shape << (i ? "x" : "") << r.output[i];
            csv << r.name << ',' << shape.str() << ',' << r.params << ',' << r.flops << '\n';
            if (layers) out << std::setw(34) << r.name << std::setw(16) << shape.str() << std::setw(12) << r.params << r.flops << "\n";
        }
        write_summary(dir, {{"command", "model-info"}, {"variant", cfg.name}, {"params", params}, {"flops", flops}});
        return 0;
    }
};

// ---- equivalence-check -----------------------------------------------------

struct EquivalenceCmd {
    Common common;
    ModelFlags model;
    double ratio = 0.6;
    std::size_t trials = 20;
    std::size_t image_size = 96;
    std::size_t batch_size = 1;
    double tolerance = 1e-5;
    double grad_tolerance = 1e-4;
    std::string gradients = "on";

    void add(CLI::App* s) {
        model.variant = "pico";
        add_common(s, common, "equivalence-check");
        add_model(s, model, false);
        s->add_option("--mask-ratio,--ratio", ratio, "Fraction of coarse cells masked")->capture_default_str();
        s->add_option("--trials", trials, "Random instances")->capture_default_str();
        s->add_option("--image-size", image_size, "Square input resolution")->capture_default_str();
        s->add_option("--batch-size", batch_size, "Images per instance")->capture_default_str();
        s->add_option("--tolerance", tolerance, "Max abs output difference")->capture_default_str();
        s->add_option("--grad-tolerance", grad_tolerance, "Max relative gradient difference")->capture_default_str();
        s->add_option("--gradients", gradients, "Also compare parameter gradients")
            ->check(CLI::IsMember({"on", "off"}))
            ->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        const ModelConfig cfg = model_config(model, 10);
        double worst = 0, worst_grad = 0;
        for (std::size_t t = 0; t < trials; ++t) {
            const auto r = equivalence_trial(cfg, ratio, image_size, batch_size, common.seed + t, gradients == "on");
            worst = std::max(worst, r.max_abs_diff);
            worst_grad = std::max(worst_grad, r.max_grad_rel_diff);
            out << "trial " << t << ": masked " << r.masked_cells << "/" << r.total_cells << ", max abs diff "
                << r.max_abs_diff;
            if (gradients == "on") out << ", grad rel diff " << r.max_grad_rel_diff;
            out << "\n";
        }
        const bool ok = worst <= tolerance && (gradients != "on" || worst_grad <= grad_tolerance);
        out << "max abs diff " << worst << " (tolerance " << tolerance << ")\n";
        if (gradients == "on") out << "max grad rel diff " << worst_grad << " (tolerance " << grad_tolerance << ")\n";
        out << (ok ? "equivalent" : "NOT equivalent") << "\n";
        write_summary(dir, {{"command", "equivalence-check"},
                            {"variant", cfg.name},
                            {"trials", trials},
                            {"max_abs_diff", worst},
                            {"max_grad_rel_diff", worst_grad},
                            {"pass", ok}});
        return ok ? 0 : 2;
    }
};

// ---- diagnostics ---------------------------------------------------------------

struct DiagnoseCmd {
    Common common;
    ModelFlags model;
    DataFlags data;
    std::string checkpoint;
    std::string split = "test";
    std::size_t num_images = 100;
    std::size_t batch_size = 16;
    std::string capture = "expansion";
    std::string grid_layer;
    std::size_t grid_channels = 64;
    bool collapse;

    explicit DiagnoseCmd(bool c) : collapse(c) {}

    void add(CLI::App* s) {
        add_common(s, common, collapse ? "diagnose-collapse" : "diagnose-selectivity");
        add_model(s, model, false);
        data.image_size = 64;
        s->add_option("--data", data.data, "synth or cifar10:<dir>")->capture_default_str();
        s->add_option("--image-size", data.image_size, "Square input resolution")->capture_default_str();
        s->add_option("--split", split, "Images to analyse")->check(CLI::IsMember({"train", "test"}))->capture_default_str();
        s->add_option("--num-images", num_images, "Images to analyse")->capture_default_str();
        s->add_option("--checkpoint", checkpoint, "Model weights (empty: random init of --variant)")->capture_default_str();
        if (collapse) {
            s->add_option("--capture", capture, "Feature tensor per block")
                ->check(CLI::IsMember({"expansion", "block-output"}))
                ->capture_default_str();
            s->add_option("--grid-layer", grid_layer, "Block whose first-image activations are exported as a PGM grid")
                ->capture_default_str();
            s->add_option("--grid-channels", grid_channels, "Channels in the grid (a perfect square)")->capture_default_str();
        } else {
            s->add_option("--batch-size", batch_size, "Images per forward")->capture_default_str();
        }
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        DataFlags d = data;
        (split == "train" ? d.num_images : d.val_images) = num_images;
        Dataset ds = load_split(d, split == "train", common.seed);
        std::optional<ChannelStats> stats;
        ConvNeXt<float> m = load_or_init(checkpoint, model, ds.num_classes, common.seed, &stats);
        standardize(ds, stats.value_or(channel_stats(ds)));
        Rng unused(0);
        std::vector<std::size_t> all(ds.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const Tensor<float> images = make_batch(ds, all, data.image_size, false, unused);
        if (collapse) {
            const CapturePoint point = capture == "expansion" ? CapturePoint::expansion : CapturePoint::block_output;
            const auto rows = collapse_profile(m, images, point);
            std::ofstream csv(dir / "collapse.csv");
            write_collapse_csv(csv, rows);
            for (const auto& r : rows) out << std::left << std::setw(16) << r.layer << std::fixed << std::setprecision(4)
                                           << r.normalized_index << "  " << r.mean_distance << "\n";
            if (!grid_layer.empty()) {
                Tensor<float> first({1, data.image_size, data.image_size, 3});
                std::copy(images.data(), images.data() + first.numel(), first.data());
                std::optional<Tensor<float>> feat;
                ForwardOptions<float> o;
                o.head = false;
                o.capture = [&](const std::string& b, CapturePoint at, const Tensor<float>& f) {
                    if (b == grid_layer && at == point) feat = f.clone();
                };
                ParamBinder<float> bind(nullptr);
                m.forward(bind, Var<float>(first), o);
                if (!feat) throw std::invalid_argument("no block named '" + grid_layer + "'");
                write_text(dir / "activation_grid.pgm", export_activation_grid(*feat, grid_channels));
                out << "wrote " << (dir / "activation_grid.pgm").string() << "\n";
            }
            write_summary(dir, {{"command", "diagnose-collapse"}, {"layers", rows.size()}, {"images", ds.size()}});
        } else {
            const auto rows = selectivity_profile(m, images, ds.labels, batch_size);
            std::ofstream csv(dir / "selectivity.csv");
            write_selectivity_csv(csv, rows);
            std::map<std::string, std::pair<double, std::size_t>> mean;
            std::vector<std::string> order;
            for (const auto& r : rows) {
                if (!mean.count(r.layer)) order.push_back(r.layer);
                mean[r.layer].first += r.selectivity;
                mean[r.layer].second += 1;
            }
            for (const auto& l : order)
                out << std::left << std::setw(16) << l << "mean selectivity " << std::fixed << std::setprecision(4)
                    << mean[l].first / static_cast<double>(mean[l].second) << "\n";
            write_summary(dir, {{"command", "diagnose-selectivity"}, {"units", rows.size()}, {"images", ds.size()}});
        }
        return 0;
    }
};

// ---- bench-sparse --------------------------------------------------------------

struct BenchCmd {
    Common common;
    std::vector<std::string> variants{"base"};
    std::string arch = "v2";
    double ratio = 0.6;
    std::size_t trials = 3;
    std::size_t image_size = 224;
    std::size_t batch_size = 1;

    void add(CLI::App* s) {
        add_common(s, common, "bench-sparse");
        s->add_option("--variant", variants, "Registry variants (comma-separated)")
            ->delimiter(',')
            ->check(CLI::IsMember(registry_names()))
            ->capture_default_str();
        s->add_option("--arch", arch, "Block design")->check(CLI::IsMember({"v1", "v2"}))->capture_default_str();
        s->add_option("--mask-ratio", ratio, "Fraction of coarse cells masked")->capture_default_str();
        s->add_option("--trials", trials, "Timed repetitions (median reported, >= 3)")->capture_default_str();
        s->add_option("--image-size", image_size, "Square input resolution")->capture_default_str();
        s->add_option("--batch-size", batch_size, "Images per forward")->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        std::vector<EfficiencyReport> reps;
        std::ofstream layers(dir / "bench_layers.csv");
        layers << "variant,layer,kind,macs,dense_macs,active_sites,total_sites\n";
        bool identity = true;
        for (const auto& v : variants) {
            EfficiencyOptions o;
            o.mask_ratio = ratio;
            o.trials = trials;
            o.image_size = image_size;
            o.batch_size = batch_size;
            o.seed = common.seed;
            const auto r = efficiency_benchmark(registry_config(v, 1000, parse_arch(arch)), o);
            const bool id = submanifold_identity_holds(r.sparse_layers);
            identity = identity && id;
            for (const auto& l : r.sparse_layers)
                layers << v << ',' << l.layer << ',' << layer_kind_name(l.kind) << ',' << l.macs << ',' << l.dense_macs
                       << ',' << l.active_sites << ',' << l.total_sites << '\n';
            out << v << ": sparse " << giga(r.sparse_macs) << " MACs vs dense " << giga(r.dense_macs) << "; "
                << std::fixed << std::setprecision(1) << r.sparse_ms << " ms vs " << r.masked_dense_ms
                << " ms masked-dense (" << std::setprecision(2) << r.masked_dense_ms / r.sparse_ms << "x); peak "
                << std::setprecision(1) << static_cast<double>(r.sparse_peak_bytes) / 1048576.0 << " MiB vs "
                << static_cast<double>(r.masked_dense_peak_bytes) / 1048576.0 << " MiB; submanifold identity "
                << (id ? "exact" : "VIOLATED") << std::defaultfloat << std::setprecision(6) << "\n";
            reps.push_back(r);
        }
        std::ofstream csv(dir / "bench.csv");
        write_efficiency_csv(csv, reps);
        json j = {{"command", "bench-sparse"}, {"submanifold_identity", identity}, {"rows", json::array()}};
        for (const auto& r : reps)
            j["rows"].push_back({{"variant", r.variant},
                                 {"sparse_macs", r.sparse_macs},
                                 {"dense_macs", r.dense_macs},
                                 {"sparse_ms", r.sparse_ms},
                                 {"masked_dense_ms", r.masked_dense_ms},
                                 {"sparse_peak_bytes", r.sparse_peak_bytes},
                                 {"masked_dense_peak_bytes", r.masked_dense_peak_bytes}});
        write_summary(dir, j);
        return identity ? 0 : 2;
    }
};

// ---- mask-preview --------------------------------------------------------------

struct MaskPreviewCmd {
    Common common;
    std::string variant = "atto";
    std::size_t image_size = 224;
    double ratio = 0.6;
    std::size_t samples = 1;
    std::size_t scale = 16;

    void add(CLI::App* s) {
        add_common(s, common, "mask-preview");
        s->add_option("--variant", variant, "Registry variant (sets the stage count)")
            ->check(CLI::IsMember(registry_names()))
            ->capture_default_str();
        s->add_option("--image-size", image_size, "Square input resolution")->capture_default_str();
        s->add_option("--mask-ratio", ratio, "Fraction of coarse cells masked")->capture_default_str();
        s->add_option("--batch-size", samples, "Masks to draw")->capture_default_str();
        s->add_option("--scale", scale, "Pixels per coarse cell in mask_coarse.pgm")->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        const ModelConfig cfg = registry_config(variant);
        const std::size_t stride = cfg.total_stride();
        if (image_size % stride) throw ShapeError("image size must be a multiple of " + std::to_string(stride));
        Rng rng(common.seed);
        const std::size_t g = image_size / stride;
        const MaskGrid coarse = generate_mask(samples, g, g, ratio, rng);
        const MaskPyramid pyr = build_pyramid(coarse, cfg.stages(), 4);
        for (std::size_t b = 0; b < samples; ++b) {
            out << "sample " << b << ": " << coarse.masked_count(b) << " of " << g * g << " cells masked\n";
            for (std::size_t y = 0; y < g; ++y) {
                for (std::size_t x = 0; x < g; ++x) out << (coarse.at(b, y, x) ? '#' : '.');
                out << "\n";
            }
            const std::string suffix = samples > 1 ? "_" + std::to_string(b) : "";
            write_text(dir / ("mask_coarse" + suffix + ".pgm"), mask_to_pgm(coarse, b, scale));
            write_text(dir / ("mask_pixels" + suffix + ".pgm"), mask_to_pgm(pyr.pixel_mask(), b, 1));
        }
        for (std::size_t l = 0; l < pyr.levels.size(); ++l)
            out << "stage " << l << " mask " << pyr.levels[l].h << "x" << pyr.levels[l].w
                << (is_block_uniform(pyr.levels[l], pyr.levels[l].h / g) ? " (replicates the coarse grid)" : " (NOT uniform)") << "\n";
        write_summary(dir, {{"command", "mask-preview"}, {"grid", g}, {"masked", coarse.masked_count(0)}});
        return 0;
    }
};

// ---- sweep-mask-ratio ------------------------------------------------------

struct SweepCmd {
    Common common;
    ModelFlags model;
    DataFlags data;
    std::vector<double> ratios{0.4, 0.6, 0.8};
    std::size_t decoder_dim = 512, decoder_depth = 1;
    std::size_t steps = 100;
    std::size_t batch_size = 16;
    double base_lr = kDeskPretrainBaseLr;
    std::size_t probe_steps = 300;

    void add(CLI::App* s) {
        add_common(s, common, "sweep-mask-ratio");
        add_model(s, model, false);
        add_data(s, data, 64, true);
        s->add_option("--ratios", ratios, "Mask ratios in (0, 1), comma-separated")->delimiter(',')->capture_default_str();
        s->add_option("--decoder-dim", decoder_dim, "Decoder width")->capture_default_str();
        s->add_option("--decoder-depth", decoder_depth, "Decoder V2 blocks")->capture_default_str();
        s->add_option("--steps", steps, "Pretraining steps per ratio")->capture_default_str();
        s->add_option("--batch-size", batch_size, "Images per step")->capture_default_str();
        s->add_option("--base-lr", base_lr, "lr at batch 256")->capture_default_str();
        s->add_option("--probe-steps", probe_steps, "Full-batch steps of the linear probe")->capture_default_str();
    }

    int run(CLI::App* s, std::ostream& out) {
        const fs::path dir = prepare_out(s, common);
        Dataset train = load_split(data, true, common.seed), val = load_split(data, false, common.seed);
        const ChannelStats stats = channel_stats(train);
        standardize(train, stats);
        standardize(val, stats);
        SweepOptions o;
        o.encoder = model_config(model, train.num_classes);
        o.decoder.dim = decoder_dim;
        o.decoder.depth = decoder_depth;
        o.decoder.patch = o.encoder.total_stride();
        o.decoder.grn = o.encoder.grn;
        o.pretrain.steps = steps;
        o.pretrain.batch_size = batch_size;
        o.pretrain.image_size = data.image_size;
        o.pretrain.base_lr = base_lr;
        o.pretrain.seed = common.seed;
        o.init_seed = common.seed;
        o.probe_steps = probe_steps;
        const auto rows = masking_ratio_sweep(ratios, o, train, val, [&](const std::string& m) { out << m << "\n"; });
        std::ofstream csv(dir / "sweep.csv");
        write_sweep_csv(csv, rows);
        json j = {{"command", "sweep-mask-ratio"}, {"rows", json::array()}};
        for (const auto& r : rows)
            j["rows"].push_back({{"ratio", r.ratio}, {"final_loss", r.final_loss}, {"probe_accuracy", r.probe_accuracy}});
        write_summary(dir, j);
        return 0;
    }
};

// --config may follow the subcommand; CLI11 reads it only at the top level.
std::vector<std::string> hoist_config(int argc, const char* const* argv) {
    std::vector<std::string> front, rest;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) {
            front = {a, argv[++i]};
        } else if (a.rfind("--config=", 0) == 0) {
            front = {a};
        } else {
            rest.push_back(a);
        }
    }
    front.insert(front.end(), rest.begin(), rest.end());
    return front;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"ConvNeXt V2 / FCMAE desk-scale toolkit", "convnext_cli"};
    app.set_config("--config", "", "INI file; [section] names a subcommand, keys are flag names");
    app.allow_config_extras(false);
    app.require_subcommand(1, 1);
    app.failure_message(CLI::FailureMessage::help);

    PretrainCmd pretrain;
    FinetuneCmd finetune;
    EvaluateCmd evaluate;
    ModelInfoCmd info;
    EquivalenceCmd equiv;
    DiagnoseCmd collapse(true), selectivity(false);
    BenchCmd bench;
    MaskPreviewCmd preview;
    SweepCmd sweep;

    struct Entry {
        CLI::App* app;
        std::function<int(CLI::App*, std::ostream&)> run;
    };
    std::vector<Entry> entries;
    auto reg = [&](const char* name, const char* help, auto& cmd) {
        CLI::App* s = app.add_subcommand(name, help);
        cmd.add(s);
        entries.push_back({s, [&cmd](CLI::App* a, std::ostream& o) { return cmd.run(a, o); }});
    };
    reg("pretrain", "FCMAE pretraining of an encoder and decoder", pretrain);
    reg("finetune", "Supervised fine-tuning from a checkpoint or random init", finetune);
    reg("evaluate", "Top-1 accuracy of a classifier checkpoint", evaluate);
    reg("model-info", "Parameter and FLOP accounting", info);
    reg("equivalence-check", "Sparse vs masked-dense encoder agreement", equiv);
    reg("diagnose-collapse", "Per-block feature cosine distance", collapse);
    reg("diagnose-selectivity", "Per-unit class selectivity", selectivity);
    reg("bench-sparse", "MAC counts, wall time and peak memory of both masked paths", bench);
    reg("mask-preview", "Draw a mask and its stage pyramid", preview);
    reg("sweep-mask-ratio", "Pretrain and probe across mask ratios", sweep);

    const std::vector<std::string> args = hoist_config(argc, argv);
    std::vector<const char*> ptrs{argc > 0 ? argv[0] : "convnext_cli"};
    for (const auto& a : args) ptrs.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(ptrs.size()), ptrs.data());
    } catch (const CLI::CallForHelp&) {
        const CLI::App* target = &app;
        for (const auto& e : entries)
            if (e.app->parsed()) target = e.app;
        out << target->help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const CLI::App* target = &app;
        for (const auto& e2 : entries)
            if (e2.app->parsed()) target = e2.app;
        err << "error: " << e.what() << "\n\n" << target->help();
        return 1;
    }

    for (const auto& e : entries) {
        if (!e.app->parsed()) continue;
        try {
            return e.run(e.app, out);
        } catch (const std::invalid_argument& ex) {
            err << "error: " << ex.what() << "\n";
            return 1;
        } catch (const std::exception& ex) {
            err << "failed: " << ex.what() << "\n";
            return 2;
        }
    }
    return 1;
}

}  // namespace cnx
