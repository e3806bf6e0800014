#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "convnext/diagnostics.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cnx;
using cnx::testing::randn;

namespace {

// Direct evaluation of the pairwise formula, one pair at a time.
double cosine_oracle(const Tensor<double>& x) {
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2), p = h * w;
    double total = 0;
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double d = 0, ni = 0, nj = 0;
            for (std::size_t s = 0; s < p; ++s) {
                d += x[s * c + i] * x[s * c + j];
                ni += x[s * c + i] * x[s * c + i];
                nj += x[s * c + j] * x[s * c + j];
            }
            const double cs = ni > 0 && nj > 0 ? d / std::sqrt(ni * nj) : 0.0;
            total += (1 - cs) / 2;
        }
    return total / static_cast<double>(c * c);
}

ModelConfig toy() {
    ModelConfig c;
    c.name = "toy";
    c.dim = 4;
    c.depths = {1, 2};
    c.num_classes = 3;
    return c;
}

template <class T>
void perturb(ConvNeXt<T>& m, std::uint64_t seed) {
    Rng rng(seed);
    for (Param<T>* p : m.params())
        for (std::size_t i = 0; i < p->value.numel(); ++i) p->value[i] += static_cast<T>(0.1 * rng.normal());
}

std::string golden_path(const std::string& name) { return std::string(CNX_GOLDEN_DIR) + "/" + name; }

bool updating_golden() {
    const char* v = std::getenv("CNX_UPDATE_GOLDEN");
    return v && std::string(v) == "1";
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing golden file " << path << " (regenerate with CNX_UPDATE_GOLDEN=1)");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

// Header and text columns must match exactly; numeric columns within tol.
void check_csv_golden(const std::string& name, const std::string& got, const std::vector<bool>& numeric, double tol) {
    if (updating_golden()) {
        std::ofstream(golden_path(name), std::ios::binary) << got;
        return;
    }
    const auto want = parse_csv(read_file(golden_path(name)));
    const auto have = parse_csv(got);
    REQUIRE(have.size() == want.size());
    CHECK(have.front() == want.front());
    for (std::size_t r = 1; r < want.size(); ++r) {
        REQUIRE(have[r].size() == numeric.size());
        REQUIRE(want[r].size() == numeric.size());
        for (std::size_t c = 0; c < numeric.size(); ++c) {
            if (numeric[c]) CHECK(std::abs(std::stod(have[r][c]) - std::stod(want[r][c])) <= tol);
            else CHECK(have[r][c] == want[r][c]);
        }
    }
}

}  // namespace

TEST_CASE("cosine distance") {
    Tensor<double> same({2, 3, 3});
    for (std::size_t s = 0; s < 6; ++s)
        for (std::size_t k = 0; k < 3; ++k) same[s * 3 + k] = static_cast<double>(s) - 2.5;
    CHECK(std::abs(cosine_distance(same)) < 1e-12);

    Tensor<double> ortho({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    CHECK(std::abs(cosine_distance(ortho) - 0.25) < 1e-12);

    Tensor<double> zero({2, 2, 1});
    CHECK(cosine_distance(zero) == 0.5);

    Rng rng(1);
    for (int t = 0; t < 10; ++t) {
        const auto x = randn<double>({std::size_t(3 + t % 3), 4, std::size_t(5 + t)}, rng);
        CHECK(std::abs(cosine_distance(x) - cosine_oracle(x)) < 1e-6);
        const double d = cosine_distance(x);
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
        // Positive per-channel scaling.
        Tensor<double> scaled = x.clone();
        const std::size_t c = x.dim(2);
        for (std::size_t s = 0; s < x.numel(); ++s) scaled[s] *= 0.01 + static_cast<double>(s % c);
        CHECK(std::abs(cosine_distance(scaled) - d) < 1e-12);
        // The same spatial permutation for every channel.
        std::vector<std::size_t> perm(x.dim(0) * x.dim(1));
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Tensor<double> moved(x.shape());
        for (std::size_t s = 0; s < perm.size(); ++s)
            for (std::size_t k = 0; k < c; ++k) moved[perm[s] * c + k] = x[s * c + k];
        CHECK(std::abs(cosine_distance(moved) - d) < 1e-12);
    }
    CHECK(std::abs(cosine_distance(randn<float>({1, 3, 3, 4}, rng)) - 0.5) < 0.5);
    CHECK_THROWS_AS(cosine_distance(Tensor<double>({2, 2, 2, 2})), ShapeError);
}

TEST_CASE("collapse profile") {
    ConvNeXt<double> m(toy(), 2);
    perturb(m, 3);
    Rng rng(4);
    const auto imgs = randn<double>({3, 32, 32, 3}, rng);

    // One image: the profile is that image's captured distances.
    Tensor<double> first({1, 32, 32, 3});
    std::copy(imgs.data(), imgs.data() + first.numel(), first.data());
    std::vector<double> direct;
    ForwardOptions<double> o;
    o.head = false;
    o.capture = [&](const std::string&, CapturePoint at, const Tensor<double>& f) {
        if (at == CapturePoint::expansion) direct.push_back(cosine_distance(f));
    };
    ParamBinder<double> bind(nullptr);
    m.forward(bind, Var<double>(first), o);
    const auto single = collapse_profile(m, first);
    REQUIRE(single.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(single[i].mean_distance == direct[i]);
    CHECK(single[0].layer == "stage0.block0");
    CHECK(single[2].layer == "stage1.block1");
    CHECK(single[0].normalized_index == 0.0);
    CHECK(single[1].normalized_index == 0.5);
    CHECK(single[2].normalized_index == 1.0);

    const auto all = collapse_profile(m, imgs);
    Tensor<double> rev(imgs.shape());
    const std::size_t per = 32 * 32 * 3;
    for (std::size_t n = 0; n < 3; ++n) std::copy(imgs.data() + n * per, imgs.data() + (n + 1) * per, rev.data() + (2 - n) * per);
    const auto back = collapse_profile(m, rev);
    for (std::size_t i = 0; i < all.size(); ++i) {
        CHECK(std::abs(all[i].mean_distance - back[i].mean_distance) < 1e-6);
        CHECK(all[i].mean_distance >= 0.0);
        CHECK(all[i].mean_distance <= 1.0);
    }
    const auto outputs = collapse_profile(m, imgs, CapturePoint::block_output);
    CHECK(outputs.size() == 3);
    CHECK(outputs[0].mean_distance != all[0].mean_distance);

    std::ostringstream csv;
    write_collapse_csv(csv, all);
    check_csv_golden("collapse_profile.csv", csv.str(), {false, true, true}, 1e-6);
}

TEST_CASE("class selectivity") {
    // Unit 0 fires for class 1 only, unit 1 is flat, unit 2 has class means 3, 1, 1.
    Tensor<double> a({6, 3}, {0, 2, 3, 0, 2, 3, 5, 2, 1, 5, 2, 1, 0, 2, 1, 0, 2, 1});
    const std::vector<int> y = {0, 0, 1, 1, 2, 2};
    const auto s = class_selectivity(a, y);
    CHECK(std::abs(s[0] - 1.0) < 1e-6);
    CHECK(std::abs(s[1] - 0.0) < 1e-6);
    CHECK(std::abs(s[2] - 0.5) < 1e-6);

    // Negative activity is rectified; all-negative units score 0.
    Tensor<double> neg({2, 1}, {-3.0, -1.0});
    CHECK(class_selectivity(neg, {0, 1})[0] == 0.0);

    Rng rng(5);
    const auto r = randn<double>({40, 16}, rng);
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(i % 4);
    for (double v : class_selectivity(r, labels)) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(class_selectivity(a, {1, 1, 1, 1, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(class_selectivity(a, {0, 1}), ShapeError);

    ConvNeXt<double> m(toy(), 6);
    perturb(m, 7);
    const auto imgs = randn<double>({6, 32, 32, 3}, rng);
    const auto rows = selectivity_profile(m, imgs, {0, 1, 2, 0, 1, 2}, 4);
    CHECK(rows.size() == 4 + 8 + 8);
    CHECK(rows.front().layer == "stage0.block0");
    CHECK(rows.back().layer == "stage1.block1");
    CHECK(rows.back().unit == 7);
    for (const auto& row : rows) {
        CHECK(row.selectivity >= 0.0);
        CHECK(row.selectivity <= 1.0);
    }
    std::ostringstream csv;
    write_selectivity_csv(csv, rows);
    check_csv_golden("selectivity.csv", csv.str(), {false, false, true}, 1e-6);
}

TEST_CASE("activation grid export") {
    Rng rng(8);
    const auto x = randn<double>({3, 5, 9}, rng);
    const std::string one = export_activation_grid(x, 1);
    CHECK(one.rfind("P5\n5 3\n255\n", 0) == 0);
    CHECK(one.size() == 11 + 15);

    Tensor<double> flat({2, 2, 4}, 1.5);
    const std::string g = export_activation_grid(flat, 4);
    const std::string header = "P5\n4 4\n255\n";
    CHECK(g.substr(0, header.size()) == header);
    for (std::size_t i = header.size(); i < g.size(); ++i) CHECK(g[i] == 0);

    // Tile placement and min-max scaling against direct indexing.
    const std::string grid = export_activation_grid(x, 4);
    const std::string hdr = "P5\n10 6\n255\n";
    REQUIRE(grid.substr(0, hdr.size()) == hdr);
    for (std::size_t k = 0; k < 4; ++k) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t s = 0; s < 15; ++s) {
            lo = std::min(lo, x[s * 9 + k]);
            hi = std::max(hi, x[s * 9 + k]);
        }
        for (std::size_t yy = 0; yy < 3; ++yy)
            for (std::size_t xx = 0; xx < 5; ++xx) {
                const auto want = static_cast<unsigned char>(std::lround(255 * (x[(yy * 5 + xx) * 9 + k] - lo) / (hi - lo)));
                const std::size_t row = (k / 2) * 3 + yy, col = (k % 2) * 5 + xx;
                CHECK(static_cast<unsigned char>(grid[hdr.size() + row * 10 + col]) == want);
            }
    }
    CHECK_THROWS_AS(export_activation_grid(x, 3), std::invalid_argument);
    CHECK_THROWS_AS(export_activation_grid(x, 16), std::invalid_argument);
    CHECK_THROWS_AS(export_activation_grid(x, 0), std::invalid_argument);

    Rng fixed(2024);
    const std::string snap = export_activation_grid(randn<float>({1, 8, 8, 16}, fixed), 16);
    if (updating_golden()) std::ofstream(golden_path("activation_grid.pgm"), std::ios::binary) << snap;
    else CHECK(snap == read_file(golden_path("activation_grid.pgm")));
}

TEST_CASE("efficiency benchmark") {
    ModelConfig cfg = registry_config("atto", 10);
    EfficiencyOptions o;
    o.image_size = 64;
    o.trials = 3;
    o.mask_ratio = 0.6;
    const EfficiencyReport r = efficiency_benchmark(cfg, o);
    CHECK(r.variant == "atto");
    MacLog sl;
    for (const auto& rec : r.sparse_layers) sl.record(rec);
    CHECK(r.dense_macs == sl.total_dense_macs());
    CHECK(r.sparse_macs < r.dense_macs);
    CHECK(r.sparse_ms > 0);
    CHECK(r.masked_dense_ms > 0);
    CHECK(r.sparse_peak_bytes > 0);
    CHECK(r.masked_dense_peak_bytes > 0);
    CHECK(submanifold_identity_holds(r.sparse_layers));
    std::uint64_t dense_sub = 0, sparse_sub = 0;
    for (const auto& rec : r.sparse_layers) {
        if (rec.kind != LayerKind::submanifold) continue;
        dense_sub += rec.dense_macs;
        sparse_sub += rec.macs;
        CHECK(rec.active_sites < rec.total_sites);
    }
    CHECK(sparse_sub < dense_sub);

    o.mask_ratio = 0.0;
    const EfficiencyReport z = efficiency_benchmark(cfg, o);
    for (const auto& rec : z.sparse_layers)
        if (rec.kind == LayerKind::submanifold) CHECK(rec.macs == rec.dense_macs);

    std::ostringstream csv;
    write_efficiency_csv(csv, {r, z});
    const auto rows = parse_csv(csv.str());
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].size() == 9);
    CHECK(rows[1].size() == 9);
    o.trials = 2;
    CHECK_THROWS_AS(efficiency_benchmark(cfg, o), std::invalid_argument);
}

TEST_CASE("linear probe and mask ratio sweep") {
    // Separable clusters.
    Rng rng(9);
    Tensor<double> xt({60, 3}), xv({30, 3});
    std::vector<int> yt, yv;
    for (std::size_t i = 0; i < 90; ++i) {
        const int label = static_cast<int>(i % 3);
        Tensor<double>& x = i < 60 ? xt : xv;
        const std::size_t row = i < 60 ? i : i - 60;
        for (std::size_t k = 0; k < 3; ++k) x[row * 3 + k] = (k == static_cast<std::size_t>(label) ? 3.0 : 0.0) + 0.3 * rng.normal();
        (i < 60 ? yt : yv).push_back(label);
    }
    CHECK(linear_probe(xt, yt, xv, yv, 3) == 1.0);

    SweepOptions so;
    so.encoder = toy();
    so.decoder.dim = 8;
    so.decoder.patch = 8;
    so.pretrain.steps = 3;
    so.pretrain.batch_size = 4;
    so.pretrain.image_size = 32;
    so.pretrain.base_lr = 1e-3;
    so.probe_steps = 20;
    const Dataset train = synth_dataset(1, 12, 32, 3), val = synth_dataset(2, 6, 32, 3);
    const auto a = masking_ratio_sweep({0.6}, so, train, val);
    REQUIRE(a.size() == 1);
    CHECK(a[0].ratio == 0.6);
    CHECK(std::isfinite(a[0].final_loss));
    CHECK(a[0].probe_accuracy >= 0.0);
    const auto b = masking_ratio_sweep({0.6}, so, train, val);
    CHECK(a[0].final_loss == b[0].final_loss);
    CHECK(a[0].probe_accuracy == b[0].probe_accuracy);
    CHECK_THROWS_AS(masking_ratio_sweep({0.0}, so, train, val), std::invalid_argument);
    CHECK_THROWS_AS(masking_ratio_sweep({0.5, 1.0}, so, train, val), std::invalid_argument);
    std::ostringstream csv;
    write_sweep_csv(csv, a);
    CHECK(csv.str().rfind("ratio,final_loss,probe_accuracy\n", 0) == 0);
}
