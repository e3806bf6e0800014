#include "convnext/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "convnext/mask.hpp"
#include "convnext/ops.hpp"

namespace cnx {

namespace {

// Height, width and channels of an H x W x C or 1 x H x W x C tensor.
template <class T>
std::array<std::size_t, 3> hwc(const Tensor<T>& x, const char* what) {
    const Shape& s = x.shape();
    if (s.size() == 3) return {s[0], s[1], s[2]};
    if (s.size() == 4 && s[0] == 1) return {s[1], s[2], s[3]};
    throw ShapeError(std::string(what) + " expects H x W x C, got " + shape_str(s));
}

}  // namespace

template <class T>
double cosine_distance(const Tensor<T>& x) {
    const auto [h, w, c] = hwc(x, "cosine_distance");
    if (c == 0) throw ShapeError("cosine_distance needs at least one channel");
    const std::size_t p = h * w;
    // Unit-normalized channel rows; zero channels stay all-zero.
    std::vector<double> rows(c * p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < c; ++k) rows[k * p + i] = static_cast<double>(x[i * c + k]);
    for (std::size_t k = 0; k < c; ++k) {
        double n = 0;
        for (std::size_t i = 0; i < p; ++i) n += rows[k * p + i] * rows[k * p + i];
        n = std::sqrt(n);
        if (n > 0)
            for (std::size_t i = 0; i < p; ++i) rows[k * p + i] /= n;
    }
    double cos_sum = 0;
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
            double d = 0;
            for (std::size_t i = 0; i < p; ++i) d += rows[a * p + i] * rows[b * p + i];
            d = std::clamp(d, -1.0, 1.0);
            cos_sum += a == b ? d : 2 * d;
        }
    const double pairs = static_cast<double>(c) * static_cast<double>(c);
    return (pairs - cos_sum) / (2 * pairs);
}

template <class T>
std::vector<CollapseRow> collapse_profile(ConvNeXt<T>& model, const Tensor<T>& images, CapturePoint point) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[0] == 0) throw ShapeError("collapse_profile expects a non-empty N x H x W x C batch");
    const bool was_training = model.training;
    model.training = false;
    std::vector<std::string> order;
    std::map<std::string, double> sums;
    ForwardOptions<T> o;
    o.head = false;
    o.capture = [&](const std::string& block, CapturePoint at, const Tensor<T>& f) {
        if (at != point) return;
        if (!sums.count(block)) order.push_back(block);
        sums[block] += cosine_distance(f);
    };
    ParamBinder<T> bind(nullptr);
    const std::size_t per = s[1] * s[2] * s[3];
    for (std::size_t n = 0; n < s[0]; ++n) {
        Tensor<T> one({1, s[1], s[2], s[3]});
        std::copy(images.data() + n * per, images.data() + (n + 1) * per, one.data());
        model.forward(bind, Var<T>(one), o);
    }
    model.training = was_training;
    std::vector<CollapseRow> rows;
    for (std::size_t i = 0; i < order.size(); ++i)
        rows.push_back({order[i], order.size() > 1 ? static_cast<double>(i) / static_cast<double>(order.size() - 1) : 0.0,
                        sums[order[i]] / static_cast<double>(s[0])});
    return rows;
}

void write_collapse_csv(std::ostream& out, const std::vector<CollapseRow>& rows) {
    out.precision(9);
    out << "layer,normalized_layer_index,mean_distance\n";
    for (const auto& r : rows) out << r.layer << ',' << r.normalized_index << ',' << r.mean_distance << '\n';
}

std::vector<double> class_selectivity(const Tensor<double>& activity, const std::vector<int>& labels, double eps) {
    const Shape& s = activity.shape();
    if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("class_selectivity expects images x units matching labels");
    std::map<int, std::size_t> cls;
    for (int l : labels) cls.emplace(l, cls.size());
    if (cls.size() < 2) throw std::invalid_argument("class_selectivity needs at least two classes");
    const std::size_t k = cls.size(), units = s[1];
    std::vector<double> sums(k * units, 0.0), counts(k, 0.0);
    for (std::size_t n = 0; n < s[0]; ++n) {
        const std::size_t c = cls[labels[n]];
        counts[c] += 1;
        for (std::size_t u = 0; u < units; ++u) sums[c * units + u] += std::max(activity[n * units + u], 0.0);
    }
    std::vector<double> out(units);
    for (std::size_t u = 0; u < units; ++u) {
        std::size_t best = 0;
        double total = 0;
        for (std::size_t c = 0; c < k; ++c) {
            const double m = sums[c * units + u] / counts[c];
            total += m;
            if (m > sums[best * units + u] / counts[best]) best = c;
        }
        const double top = sums[best * units + u] / counts[best];
        const double rest = (total - top) / static_cast<double>(k - 1);
        out[u] = (top - rest) / (top + rest + eps);
    }
    return out;
}

template <class T>
std::vector<SelectivityRow> selectivity_profile(ConvNeXt<T>& model, const Tensor<T>& images,
                                                const std::vector<int>& labels, std::size_t batch_size) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[0] != labels.size()) throw ShapeError("selectivity_profile: images and labels disagree");
    const bool was_training = model.training;
    model.training = false;
    std::vector<std::string> order;
    std::map<std::string, std::vector<double>> act;  // row-major images x units
    std::map<std::string, std::size_t> width;
    ForwardOptions<T> o;
    o.head = false;
    o.capture = [&](const std::string& block, CapturePoint at, const Tensor<T>& f) {
        if (at != CapturePoint::block_output) return;
        if (!act.count(block)) order.push_back(block);
        const Shape& fs = f.shape();
        const std::size_t sites = fs[1] * fs[2], c = fs[3];
        width[block] = c;
        auto& dst = act[block];
        for (std::size_t n = 0; n < fs[0]; ++n)
            for (std::size_t k = 0; k < c; ++k) {
                double m = 0;
                for (std::size_t i = 0; i < sites; ++i) m += static_cast<double>(f[(n * sites + i) * c + k]);
                dst.push_back(m / static_cast<double>(sites));
            }
    };
    ParamBinder<T> bind(nullptr);
    const std::size_t per = s[1] * s[2] * s[3];
    for (std::size_t lo = 0; lo < s[0]; lo += batch_size) {
        const std::size_t hi = std::min(s[0], lo + batch_size);
        Tensor<T> batch({hi - lo, s[1], s[2], s[3]});
        std::copy(images.data() + lo * per, images.data() + hi * per, batch.data());
        model.forward(bind, Var<T>(batch), o);
    }
    model.training = was_training;
    std::vector<SelectivityRow> rows;
    for (const auto& name : order) {
        const std::size_t c = width[name];
        const Tensor<double> a({s[0], c}, std::span<const double>(act[name]));
        const auto sel = class_selectivity(a, labels);
        for (std::size_t u = 0; u < c; ++u) rows.push_back({name, u, sel[u]});
    }
    return rows;
}

void write_selectivity_csv(std::ostream& out, const std::vector<SelectivityRow>& rows) {
    out.precision(9);
    out << "layer,unit,selectivity\n";
    for (const auto& r : rows) out << r.layer << ',' << r.unit << ',' << r.selectivity << '\n';
}

template <class T>
std::string export_activation_grid(const Tensor<T>& x, std::size_t n) {
    const auto [h, w, c] = hwc(x, "export_activation_grid");
    const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (n == 0 || g * g != n) throw std::invalid_argument("activation grid size " + std::to_string(n) + " is not a perfect square");
    if (n > c) throw std::invalid_argument("activation grid asks for " + std::to_string(n) + " of " + std::to_string(c) + " channels");
    const std::size_t width = g * w, height = g * h;
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + width * height, '\0');
    for (std::size_t k = 0; k < n; ++k) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t i = 0; i < h * w; ++i) {
            lo = std::min(lo, static_cast<double>(x[i * c + k]));
            hi = std::max(hi, static_cast<double>(x[i * c + k]));
        }
        const std::size_t ty = k / g, tx = k % g;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                const double v = static_cast<double>(x[(y * w + xx) * c + k]);
                const long b = hi > lo ? std::lround(255.0 * (v - lo) / (hi - lo)) : 0;
                out[header + (ty * h + y) * width + tx * w + xx] = static_cast<char>(static_cast<unsigned char>(b));
            }
    }
    return out;
}

EfficiencyReport efficiency_benchmark(const ModelConfig& cfg, const EfficiencyOptions& opts) {
    if (opts.trials < 3) throw std::invalid_argument("efficiency benchmark needs at least 3 trials");
    const std::size_t stride = cfg.total_stride();
    if (opts.image_size % stride) throw ShapeError("image size must be a multiple of " + std::to_string(stride));
    Rng rng(opts.seed);
    ConvNeXt<float> model(cfg, opts.seed);
    Tensor<float> images({opts.batch_size, opts.image_size, opts.image_size, cfg.in_channels});
    for (std::size_t i = 0; i < images.numel(); ++i) images[i] = static_cast<float>(rng.normal());
    const std::size_t g = opts.image_size / stride;
    const MaskPyramid pyr = model.make_pyramid(generate_mask(opts.batch_size, g, g, opts.mask_ratio, rng));

    EfficiencyReport rep;
    rep.variant = cfg.name;
    rep.mask_ratio = opts.mask_ratio;
    rep.image_size = opts.image_size;
    ParamBinder<float> bind(nullptr);
    std::vector<double> sparse_ms, dense_ms;
    auto run = [&](ForwardPath path, MacLog* log, std::vector<double>& times, std::size_t& peak) {
        ForwardOptions<float> o;
        o.path = path;
        o.mask = &pyr;
        o.head = false;
        o.log = log;
        const std::size_t live = memory::stats().live_bytes;
        memory::reset_peak();
        const auto t0 = std::chrono::steady_clock::now();
        { model.forward(bind, Var<float>(images), o); }
        const auto t1 = std::chrono::steady_clock::now();
        peak = std::max(peak, memory::stats().peak_bytes - live);
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    };
    for (std::size_t t = 0; t < opts.trials; ++t) {
        MacLog sl, dl;
        // Alternate the order so cache warm-up does not favour one path.
        if (t % 2 == 0) {
            run(ForwardPath::sparse, &sl, sparse_ms, rep.sparse_peak_bytes);
            run(ForwardPath::masked_dense, &dl, dense_ms, rep.masked_dense_peak_bytes);
        } else {
            run(ForwardPath::masked_dense, &dl, dense_ms, rep.masked_dense_peak_bytes);
            run(ForwardPath::sparse, &sl, sparse_ms, rep.sparse_peak_bytes);
        }
        if (t == 0) {
            rep.sparse_macs = sl.total_macs();
            rep.dense_macs = dl.total_macs();
            rep.sparse_layers = sl.records();
        }
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        const std::size_t m = v.size() / 2;
        return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    };
    rep.sparse_ms = median(sparse_ms);
    rep.masked_dense_ms = median(dense_ms);
    return rep;
}

void write_efficiency_csv(std::ostream& out, const std::vector<EfficiencyReport>& rows) {
    out.precision(9);
    out << "variant,mask_ratio,image_size,sparse_macs,dense_macs,sparse_ms,masked_dense_ms,sparse_peak_bytes,"
           "masked_dense_peak_bytes\n";
    for (const auto& r : rows)
        out << r.variant << ',' << r.mask_ratio << ',' << r.image_size << ',' << r.sparse_macs << ',' << r.dense_macs
            << ',' << r.sparse_ms << ',' << r.masked_dense_ms << ',' << r.sparse_peak_bytes << ','
            << r.masked_dense_peak_bytes << '\n';
}

bool submanifold_identity_holds(const std::vector<MacRecord>& records) {
    bool any = false;
    for (const auto& r : records) {
        if (r.kind != LayerKind::submanifold) continue;
        any = true;
        if (r.macs * r.total_sites != r.dense_macs * r.active_sites) return false;
    }
    return any;
}

EquivalenceResult equivalence_trial(const ModelConfig& cfg, double ratio, std::size_t image_size, std::size_t batch,
                                    std::uint64_t seed, bool gradients) {
    const std::size_t stride = cfg.total_stride();
    if (image_size % stride) throw ShapeError("image size must be a multiple of " + std::to_string(stride));
    Rng rng(seed);
    ConvNeXt<float> model(cfg, seed);
    for (Param<float>* p : model.params())
        if (p->value.shape().size() == 1)
            for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += static_cast<float>(0.1 * rng.normal());
    Tensor<float> images({batch, image_size, image_size, cfg.in_channels});
    for (std::size_t i = 0; i < images.numel(); ++i) images[i] = static_cast<float>(rng.normal());
    const std::size_t g = image_size / stride;
    const MaskGrid coarse = generate_mask(batch, g, g, ratio, rng);
    const MaskPyramid pyr = model.make_pyramid(coarse);
    EquivalenceResult res;
    res.total_cells = batch * coarse.cells_per_sample();
    for (std::size_t b = 0; b < batch; ++b) res.masked_cells += coarse.masked_count(b);

    const auto last = cfg.stages() - 1;
    Tensor<float> probe({batch, g, g, cfg.width(last)});
    for (std::size_t i = 0; i < probe.numel(); ++i) probe[i] = static_cast<float>(rng.normal());

    std::vector<Tensor<float>> outs[2];
    std::vector<Tensor<float>> grads[2];
    const ForwardPath paths[2] = {ForwardPath::sparse, ForwardPath::masked_dense};
    for (int k = 0; k < 2; ++k) {
        model.zero_grad();
        Tape<float> tape;
        ParamBinder<float> bind(gradients ? &tape : nullptr);
        ForwardOptions<float> o;
        o.path = paths[k];
        o.mask = &pyr;
        o.head = false;
        const auto r = model.forward(bind, Var<float>(images), o);
        for (const auto& st : r.stages) outs[k].push_back(st.value().clone());
        if (gradients) {
            tape.backward(dot(r.stages.back(), probe));
            for (const Param<float>* p : model.params()) grads[k].push_back(p->grad.clone());
        }
    }
    for (std::size_t s = 0; s < outs[0].size(); ++s)
        for (std::size_t i = 0; i < outs[0][s].numel(); ++i)
            res.max_abs_diff = std::max(res.max_abs_diff, std::abs(static_cast<double>(outs[0][s][i]) - outs[1][s][i]));
    for (std::size_t p = 0; p < grads[0].size(); ++p) {
        double diff = 0, scale = 0;
        for (std::size_t i = 0; i < grads[0][p].numel(); ++i) {
            const double a = grads[0][p][i], b = grads[1][p][i];
            diff = std::max(diff, std::abs(a - b));
            scale = std::max({scale, std::abs(a), std::abs(b)});
        }
        if (scale > 0) res.max_grad_rel_diff = std::max(res.max_grad_rel_diff, diff / scale);
    }
    return res;
}

template <class T>
Tensor<double> pooled_features(ConvNeXt<T>& model, const Dataset& data, std::size_t image_size, std::size_t batch_size) {
    const bool was_training = model.training;
    model.training = false;
    const std::size_t c = model.config().width(model.config().stages() - 1);
    Tensor<double> out({data.size(), c});
    ParamBinder<T> bind(nullptr);
    ForwardOptions<T> o;
    o.head = false;
    Rng unused(0);
    for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = lo; i < std::min(data.size(), lo + batch_size); ++i) idx.push_back(i);
        const Tensor<T> batch = make_batch(data, idx, image_size, false, unused).cast<T>();
        const Tensor<T> f = model.forward(bind, Var<T>(batch), o).stages.back().value();
        const std::size_t sites = f.dim(1) * f.dim(2);
        for (std::size_t n = 0; n < idx.size(); ++n)
            for (std::size_t k = 0; k < c; ++k) {
                double m = 0;
                for (std::size_t i = 0; i < sites; ++i) m += static_cast<double>(f[(n * sites + i) * c + k]);
                out[(lo + n) * c + k] = m / static_cast<double>(sites);
            }
    }
    model.training = was_training;
    return out;
}

double linear_probe(const Tensor<double>& train_x, const std::vector<int>& train_y, const Tensor<double>& val_x,
                    const std::vector<int>& val_y, std::size_t num_classes, std::size_t steps, double lr) {
    const std::size_t n = train_x.dim(0), c = train_x.dim(1);
    if (n != train_y.size() || val_x.dim(0) != val_y.size() || val_x.dim(1) != c)
        throw ShapeError("linear_probe: features and labels disagree");
    std::vector<double> mean(c, 0.0), sd(c, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) mean[k] += train_x[i * c + k] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) sd[k] += std::pow(train_x[i * c + k] - mean[k], 2) / static_cast<double>(n);
    for (double& v : sd) v = std::sqrt(v) + 1e-8;
    auto standardize = [&](const Tensor<double>& x) {
        Tensor<double> z(x.shape());
        for (std::size_t i = 0; i < x.dim(0); ++i)
            for (std::size_t k = 0; k < c; ++k) z[i * c + k] = (x[i * c + k] - mean[k]) / sd[k];
        return z;
    };
    const Tensor<double> zt = standardize(train_x), zv = standardize(val_x);
    Param<double> w("probe.weight", Tensor<double>({c, num_classes}));
    Param<double> b("probe.bias", Tensor<double>({num_classes}));
    AdamWConfig cfg;
    cfg.weight_decay = 0;
    AdamW<double> opt({&w, &b}, cfg);
    for (std::size_t t = 0; t < steps; ++t) {
        w.zero_grad();
        b.zero_grad();
        Tape<double> tape;
        ParamBinder<double> bind(&tape);
        const Var<double> loss = cross_entropy(linear(Var<double>(zt), bind(w), bind(b)), train_y);
        tape.backward(loss);
        opt.step(lr);
    }
    ParamBinder<double> bind(nullptr);
    const Tensor<double> logits = linear(Var<double>(zv), bind(w), bind(b)).value();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < val_y.size(); ++i) {
        const double* row = logits.data() + i * num_classes;
        if (std::max_element(row, row + num_classes) - row == val_y[i]) ++correct;
    }
    return val_y.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(val_y.size());
}

std::vector<SweepRow> masking_ratio_sweep(const std::vector<double>& ratios, const SweepOptions& o, const Dataset& train,
                                          const Dataset& val, const std::function<void(const std::string&)>& log) {
    for (double r : ratios)
        if (!(r > 0.0 && r < 1.0))
            throw std::invalid_argument("mask ratio " + std::to_string(r) + " is outside (0, 1); a ratio of 0 leaves no masked patch to score");
    std::vector<SweepRow> rows;
    for (double r : ratios) {
        ConvNeXt<float> enc(o.encoder, o.init_seed);
        FcmaeDecoder<float> dec(o.encoder.width(o.encoder.stages() - 1), o.decoder, o.init_seed + 1);
        auto ps = enc.params();
        for (Param<float>* p : dec.params()) ps.push_back(p);
        AdamW<float> opt(ps, pretrain_adamw());
        PretrainOptions po = o.pretrain;
        po.mask_ratio = r;
        const auto trace = run_pretrain(enc, dec, opt, train, po);
        SweepRow row;
        row.ratio = r;
        const std::size_t tail = std::min<std::size_t>(10, trace.size());
        for (std::size_t i = trace.size() - tail; i < trace.size(); ++i) row.final_loss += trace[i].loss / static_cast<double>(tail);
        const Tensor<double> ft = pooled_features(enc, train, po.image_size), fv = pooled_features(enc, val, po.image_size);
        row.probe_accuracy = linear_probe(ft, train.labels, fv, val.labels, train.num_classes, o.probe_steps);
        if (log) log("ratio " + std::to_string(r) + ": final loss " + std::to_string(row.final_loss) + ", probe accuracy " +
                     std::to_string(row.probe_accuracy));
        rows.push_back(row);
    }
    return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out.precision(9);
    out << "ratio,final_loss,probe_accuracy\n";
    for (const auto& r : rows) out << r.ratio << ',' << r.final_loss << ',' << r.probe_accuracy << '\n';
}

#define CNX_INSTANTIATE(T)                                                                                      \
    template double cosine_distance(const Tensor<T>&);                                                          \
    template std::vector<CollapseRow> collapse_profile(ConvNeXt<T>&, const Tensor<T>&, CapturePoint);           \
    template std::vector<SelectivityRow> selectivity_profile(ConvNeXt<T>&, const Tensor<T>&, const std::vector<int>&, \
                                                             std::size_t);                                      \
    template std::string export_activation_grid(const Tensor<T>&, std::size_t);                                \
    template Tensor<double> pooled_features(ConvNeXt<T>&, const Dataset&, std::size_t, std::size_t);

CNX_INSTANTIATE(float)
CNX_INSTANTIATE(double)

#undef CNX_INSTANTIATE

}  // namespace cnx
