#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "convnext/checkpoint.hpp"
#include "convnext/data.hpp"
#include "convnext/train.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cnx;
using cnx::testing::bit_equal;
using cnx::testing::randn;

namespace {

ModelConfig toy(std::vector<std::size_t> depths = {1, 1}, std::size_t dim = 8) {
    ModelConfig c;
    c.name = "toy";
    c.dim = dim;
    c.depths = std::move(depths);
    c.num_classes = 4;
    return c;
}

DecoderConfig toy_decoder(std::size_t patch) {
    DecoderConfig d;
    d.dim = 16;
    d.patch = patch;
    return d;
}

template <class T>
std::vector<Param<T>*> joined(ConvNeXt<T>& enc, FcmaeDecoder<T>& dec) {
    auto ps = enc.params();
    for (Param<T>* p : dec.params()) ps.push_back(p);
    return ps;
}

}  // namespace

TEST_CASE("adamw update rule") {
    Rng rng(1);
    SUBCASE("zero gradient and zero decay leave params unchanged") {
        Param<double> w("w", randn<double>({3, 4}, rng));
        const auto before = w.value.clone();
        AdamWConfig cfg;
        cfg.weight_decay = 0;
        AdamW<double> opt({&w}, cfg);
        for (int i = 0; i < 3; ++i) opt.step(1e-2);
        CHECK(bit_equal(w.value, before));
    }
    SUBCASE("first step moves each coordinate by about lr") {
        Param<double> w("w", randn<double>({5, 5}, rng));
        const auto before = w.value.clone();
        w.grad = randn<double>({5, 5}, rng, 3.0);
        AdamWConfig cfg;
        cfg.weight_decay = 0;
        AdamW<double> opt({&w}, cfg);
        const double lr = 1e-3;
        opt.step(lr);
        for (std::size_t k = 0; k < 25; ++k) {
            const double g = w.grad[k];
            const double expect = before[k] - lr * g / (std::abs(g) + cfg.eps);
            CHECK(std::abs(w.value[k] - expect) < 1e-15);
            CHECK(std::abs(std::abs(w.value[k] - before[k]) - lr) < 1e-8);
        }
    }
    SUBCASE("zero gradient with decay is a pure shrink on matrices only") {
        Param<double> w("w", randn<double>({2, 3}, rng));
        Param<double> b("b", randn<double>({3}, rng));
        const auto w0 = w.value.clone(), b0 = b.value.clone();
        AdamWConfig cfg;
        cfg.weight_decay = 0.05;
        AdamW<double> opt({&w, &b}, cfg);
        const double lr = 0.1;
        opt.step(lr);
        for (std::size_t k = 0; k < 6; ++k) CHECK(w.value[k] == doctest::Approx(w0[k] * (1 - lr * 0.05)).epsilon(1e-14));
        CHECK(bit_equal(b.value, b0));
        CHECK(opt.decays(0));
        CHECK_FALSE(opt.decays(1));
    }
    SUBCASE("per-parameter lr multipliers scale the step") {
        Param<double> a("a", Tensor<double>({4}, 0.0)), b("b", Tensor<double>({4}, 0.0));
        a.grad.fill(1.0);
        b.grad.fill(1.0);
        AdamW<double> opt({&a, &b}, AdamWConfig{}, {1.0, 0.25});
        opt.step(1e-2);
        CHECK(b.value[0] == doctest::Approx(0.25 * a.value[0]).epsilon(1e-12));
        CHECK_THROWS_AS(AdamW<double>({&a}, AdamWConfig{}, {1.0, 2.0}), std::invalid_argument);
    }
    SUBCASE("non-finite gradients abort before any state changes") {
        Param<double> a("good", Tensor<double>({2}, 1.0)), b("stage0.block0.pwconv1.weight", Tensor<double>({2, 2}, 1.0));
        a.grad.fill(0.5);
        b.grad[3] = std::nan("");
        AdamW<double> opt({&a, &b}, AdamWConfig{});
        try {
            opt.step(1e-2);
            FAIL("expected NonFiniteError");
        } catch (const NonFiniteError& e) {
            CHECK(std::string(e.what()).find("stage0.block0.pwconv1.weight") != std::string::npos);
        }
        CHECK(opt.steps() == 0);
        CHECK(a.value[0] == 1.0);
        CHECK(opt.first_moments()[0][0] == 0.0);
    }
}

TEST_CASE("learning rate schedule") {
    Schedule s;
    s.base_lr = 1.5e-4;
    s.batch_size = 64;
    s.warmup_steps = 10;
    s.total_steps = 100;
    CHECK(s.peak_lr() == doctest::Approx(1.5e-4 * 64 / 256));
    CHECK(lr_at(0, s) == 0.0);
    CHECK(lr_at(5, s) == doctest::Approx(0.5 * s.peak_lr()));
    CHECK(lr_at(10, s) == doctest::Approx(s.peak_lr()).epsilon(1e-14));
    CHECK(lr_at(99, s) <= 1e-8 * s.peak_lr());
    CHECK(lr_at(500, s) == 0.0);
    double prev = lr_at(10, s);
    for (std::size_t t = 11; t < 100; ++t) {
        const double v = lr_at(t, s);
        CHECK(v <= prev);
        CHECK(v >= 0.0);
        prev = v;
    }
    // Midpoint of the cosine phase.
    Schedule m = s;
    m.warmup_steps = 0;
    m.total_steps = 101;
    CHECK(lr_at(50, m) == doctest::Approx(0.5 * m.peak_lr()).epsilon(1e-12));

    const Schedule e = Schedule::from_epochs(1e-3, 256, 2, 40, 50);
    CHECK(e.warmup_steps == 100);
    CHECK(e.total_steps == 2000);
}

TEST_CASE("layer-wise and group-wise lr decay") {
    const ModelConfig cfg = toy({2});
    ConvNeXt<double> m(cfg, 1);
    const auto names = param_names(m.params());
    for (double v : layer_decay_multipliers(names, cfg, 1.0, LayerDecayMode::layer_wise)) CHECK(v == 1.0);

    const auto mult = layer_decay_multipliers(names, cfg, 0.5, LayerDecayMode::layer_wise);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::string& n = names[i];
        double expect = 0;
        if (n.rfind("stem.", 0) == 0) expect = 0.125;
        else if (n.rfind("stage0.block0.", 0) == 0) expect = 0.25;
        else if (n.rfind("stage0.block1.", 0) == 0) expect = 0.5;
        else if (n.rfind("head.", 0) == 0) expect = 1.0;
        CHECK_MESSAGE(mult[i] == expect, n);
    }

    // Layer ids of a four-stage model, then group counting.
    const ModelConfig atto = registry_config("atto", 10);
    ConvNeXt<float> a(atto, 1);
    const auto an = param_names(a.params());
    CHECK(layer_id("stem.conv.weight", atto) == 0);
    CHECK(layer_id("downsample1.conv.weight", atto) == 3);
    CHECK(layer_id("stage1.block0.dwconv.weight", atto) == 3);
    CHECK(layer_id("stage3.block1.grn.gamma", atto) == 12);
    CHECK(layer_id("head.fc.weight", atto) == 13);
    CHECK_THROWS_AS(layer_id("decoder.proj.weight", atto), std::invalid_argument);
    CHECK_THROWS_AS(layer_id("stage4.block0.dwconv.weight", atto), std::invalid_argument);
    for (const ModelConfig& c : {cfg, atto, registry_config("tiny", 10), toy({1, 1, 1})}) {
        ConvNeXt<float> mc(c, 2);
        const auto nm = param_names(mc.params());
        const auto g = layer_decay_multipliers(nm, c, 0.8, LayerDecayMode::group_wise);
        const std::set<double> distinct(g.begin(), g.end());
        const std::size_t L = c.total_blocks() + 1;  // stem and blocks below the head
        CHECK(distinct.size() == (L + 2) / 3 + 1);
        const auto l = layer_decay_multipliers(nm, c, 0.8, LayerDecayMode::layer_wise);
        CHECK(std::set<double>(l.begin(), l.end()).size() == L + 1);
        for (std::size_t i = 0; i < nm.size(); ++i) {
            if (nm[i].rfind("head.", 0) == 0) CHECK(g[i] == 1.0);
            CHECK(g[i] <= 1.0);
        }
        CHECK(*distinct.begin() == doctest::Approx(std::pow(0.8, static_cast<double>((L + 2) / 3))));
    }
    CHECK_THROWS_AS(layer_decay_multipliers(names, cfg, 0.0, LayerDecayMode::layer_wise), std::invalid_argument);
    CHECK(parse_layer_decay_mode("group") == LayerDecayMode::group_wise);
    CHECK_THROWS_AS(parse_layer_decay_mode("block"), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    const ModelConfig cfg = toy();
    ConvNeXt<float> enc(cfg, 3);
    FcmaeDecoder<float> dec(cfg.width(1), toy_decoder(8), 4);
    AdamWConfig oc;
    oc.beta2 = 0.95;
    AdamW<float> opt(joined(enc, dec), oc);
    Rng rng(5);
    const auto imgs = synth_dataset(1, 4, 32).images;
    for (int i = 0; i < 2; ++i) pretrain_step(enc, dec, imgs, 0.6, ForwardPath::sparse, opt, 1e-3, rng);

    Checkpoint ck;
    store_model_config(ck, cfg);
    store_decoder_config(ck, dec.config());
    store_params(ck, enc.params());
    store_params(ck, dec.params());
    store_optimizer(ck, opt);
    ck.meta["step"] = "2";
    Tensor<double> extra({2, 2}, 0.0);
    extra[1] = 1.0 / 3.0;
    ck.put("extra.f64", extra);

    const auto path = (std::filesystem::temp_directory_path() / "cnx_test_round_trip.ckpt").string();
    ck.save(path);
    const Checkpoint back = Checkpoint::load(path);
    std::remove(path.c_str());
    CHECK(back.serialize() == ck.serialize());
    CHECK(back.meta.at("step") == "2");
    CHECK(bit_equal(back.get<double>("extra.f64"), extra));
    CHECK_THROWS_AS(back.get<float>("extra.f64"), CheckpointError);

    const ModelConfig cfg2 = load_model_config(back);
    CHECK(cfg2.depths == cfg.depths);
    CHECK(cfg2.dim == cfg.dim);
    CHECK(cfg2.drop_path_rate == cfg.drop_path_rate);
    CHECK(load_decoder_config(back).patch == 8);

    ConvNeXt<float> enc2(cfg2, 99);
    FcmaeDecoder<float> dec2(cfg2.width(1), load_decoder_config(back), 98);
    AdamW<float> opt2(joined(enc2, dec2), oc);
    restore_params(back, enc2.params());
    restore_params(back, dec2.params());
    restore_optimizer(back, opt2);
    const auto p1 = joined(enc, dec), p2 = joined(enc2, dec2);
    for (std::size_t i = 0; i < p1.size(); ++i) {
        CHECK(bit_equal(p1[i]->value, p2[i]->value));
        CHECK(bit_equal(opt.first_moments()[i], opt2.first_moments()[i]));
        CHECK(bit_equal(opt.second_moments()[i], opt2.second_moments()[i]));
    }
    CHECK(opt2.steps() == 2);

    // Both continue identically.
    Rng r1(7), r2(7);
    const double l1 = pretrain_step(enc, dec, imgs, 0.6, ForwardPath::sparse, opt, 1e-3, r1);
    const double l2 = pretrain_step(enc2, dec2, imgs, 0.6, ForwardPath::sparse, opt2, 1e-3, r2);
    CHECK(l1 == l2);
    for (std::size_t i = 0; i < p1.size(); ++i) CHECK(bit_equal(p1[i]->value, p2[i]->value));

    const std::string bytes = ck.serialize();
    CHECK(bytes.rfind("CNXCKPT1\n", 0) == 0);
    CHECK_THROWS_AS(Checkpoint::deserialize("NOTACKPT\n" + bytes.substr(9)), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, 20)), CheckpointError);
    CHECK_THROWS_AS(Checkpoint::load("/nonexistent/dir/x.ckpt"), CheckpointError);

    ConvNeXt<float> wrong(toy({1, 1}, 4), 1);
    CHECK_THROWS_AS(restore_params(back, wrong.params()), CheckpointError);
}

TEST_CASE("pretrained weights convert to a dense classifier unchanged") {
    const ModelConfig cfg = toy();
    ConvNeXt<float> enc(cfg, 3);
    FcmaeDecoder<float> dec(cfg.width(1), toy_decoder(8), 4);
    AdamW<float> opt(joined(enc, dec), AdamWConfig{});
    Rng rng(6);
    const auto imgs = synth_dataset(2, 4, 32).images;
    for (int i = 0; i < 3; ++i) pretrain_step(enc, dec, imgs, 0.6, ForwardPath::sparse, opt, 1e-2, rng);

    Checkpoint ck;
    store_model_config(ck, cfg);
    store_params(ck, enc.params());
    ConvNeXt<float> cls = model_from_pretrained<float>(ck, 7, 11);
    CHECK(cls.config().num_classes == 7);
    for (Param<float>* p : cls.params())
        if (p->name.rfind("head.fc", 0) != 0) CHECK_MESSAGE(bit_equal(p->value, enc.param(p->name).value), p->name);

    enc.training = cls.training = false;
    ParamBinder<float> bind(nullptr);
    const MaskPyramid pyr = enc.make_pyramid(MaskGrid(4, 4, 4));
    ForwardOptions<float> so;
    so.path = ForwardPath::sparse;
    so.mask = &pyr;
    so.head = false;
    const auto sparse = enc.forward(bind, Var<float>(imgs), so);
    const auto dense = cls.forward(bind, Var<float>(imgs));
    double worst = 0;
    for (std::size_t s = 0; s < cfg.stages(); ++s) {
        const auto& a = sparse.stages[s].value();
        const auto& b = dense.stages[s].value();
        REQUIRE(a.shape() == b.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
    }
    CHECK(worst <= 1e-5);
    CHECK(dense.logits.value().shape() == Shape{4, 7});
}

TEST_CASE("training is reproducible") {
    const ModelConfig cfg = toy();
    const auto imgs = synth_dataset(3, 4, 32).images;
    auto run = [&](ForwardPath path) {
        ConvNeXt<double> enc(cfg, 3);
        FcmaeDecoder<double> dec(cfg.width(1), toy_decoder(8), 4);
        AdamW<double> opt(joined(enc, dec), AdamWConfig{});
        Rng rng(42);
        std::vector<double> losses;
        for (int i = 0; i < 10; ++i)
            losses.push_back(pretrain_step(enc, dec, imgs.cast<double>(), 0.6, path, opt, 2e-3, rng));
        return losses;
    };
    const auto a = run(ForwardPath::sparse), b = run(ForwardPath::sparse), c = run(ForwardPath::masked_dense);
    for (int i = 0; i < 10; ++i) {
        CHECK(std::abs(a[i] - b[i]) <= 1e-6);
        CHECK(std::abs(a[i] - c[i]) <= 1e-6);
    }

    ModelConfig ft = cfg;
    ft.drop_path_rate = 0.1;
    auto tune = [&] {
        ConvNeXt<double> m(ft, 5);
        const auto names = param_names(m.params());
        AdamW<double> opt(m.params(), AdamWConfig{}, layer_decay_multipliers(names, ft, 0.9, LayerDecayMode::layer_wise));
        Rng rng(8);
        std::vector<double> losses;
        for (int i = 0; i < 10; ++i) losses.push_back(finetune_step(m, imgs.cast<double>(), {0, 1, 2, 3}, opt, 1e-3, rng));
        return std::pair(losses, evaluate_accuracy(m, imgs.cast<double>(), {0, 1, 2, 3}, 3));
    };
    const auto [f1, acc1] = tune();
    const auto [f2, acc2] = tune();
    for (int i = 0; i < 10; ++i) CHECK(std::abs(f1[i] - f2[i]) <= 1e-6);
    CHECK(acc1 == acc2);
    CHECK(f1.back() < f1.front());
}
