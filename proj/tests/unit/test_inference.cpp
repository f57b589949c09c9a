#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <numeric>
#include <set>

#include "docmoe/inference.hpp"
#include "docmoe/synth.hpp"
#include "helpers.hpp"

using namespace docmoe;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

ModelBundle<float> trained_like_bundle(std::uint64_t seed) {
    ModelBundle<float> b(ArchConfig::micro(), seed);
    std::mt19937_64 rng(seed + 100);
    jitter(b, rng, 0.2);
    return b;
}

ImageTensor smooth_page(std::size_t h, std::size_t w) {
    auto img = ImageTensor::filled(1, h, w, 0.0f);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            img.at(0, y, x) = static_cast<float>(0.5 + 0.4 * std::sin(0.05 * x) * std::cos(0.03 * y));
    return img;
}

}  // namespace

TEST_CASE("minimal model reproduces the training-time forward pass") {
    auto b = trained_like_bundle(1);
    auto m = export_minimal(b);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) {
        const auto x = random_tensor<float>({1, 8, 8}, rng);
        CHECK(minimal_forward(m, x) == generate_forward(b, x));
    }
    CHECK(m.gate_heads_H.size() == static_cast<std::size_t>(b.config().n_blocks));

    const fs::path root = fs::temp_directory_path() / "docmoe_test_minimal";
    fs::remove_all(root);
    save_minimal(root / "minimal", m);
    save_checkpoint(root / "full", b, 0, nlohmann::json::object());
    CHECK(container_bytes(root / "minimal") < container_bytes(root / "full"));

    const auto manifest = read_manifest(root / "minimal", "minimal");
    std::set<std::string> nets;
    for (const auto& e : manifest["entries"]) nets.insert(e["network"].get<std::string>());
    for (const char* forbidden : {"generator_F", "disc_X", "disc_Y", "classifier"}) CHECK(nets.count(forbidden) == 0);
    std::size_t heads = 0;
    for (const auto& n : nets) heads += n.rfind("gate_head_H", 0) == 0;
    CHECK(heads == m.gate_heads_H.size());
    for (const auto& n : nets) CHECK(n.find("gate_head_F") == std::string::npos);

    auto back = load_minimal(root / "minimal");
    const auto x = random_tensor<float>({1, 8, 8}, rng);
    CHECK(minimal_forward(back, x) == minimal_forward(m, x));
    fs::remove_all(root);
}

TEST_CASE("default architecture exports nine gate heads") {
    ModelBundle<float> b(ArchConfig{}, 3);
    CHECK(export_minimal(b).gate_heads_H.size() == 9);
}

TEST_CASE("the observer sees the gates that were applied") {
    auto b = trained_like_bundle(4);
    auto m = export_minimal(b);
    std::mt19937_64 rng(5);
    const auto x = random_tensor<float>({1, 8, 8}, rng);
    GateSet<float> seen;
    int calls = 0;
    const auto out = minimal_forward(m, x, [&](const GateSet<float>& g) {
        seen = g;
        ++calls;
    });
    CHECK(calls == 1);
    const auto expect = minimal_gates(m, x);
    CHECK(seen.gates == expect.gates);
    CHECK(seen.gates.size() == static_cast<std::size_t>(m.arch.n_blocks));
    for (const auto& g : seen.gates) CHECK(g.size() == static_cast<std::size_t>(m.arch.block_channels()));
    CHECK(out == minimal_forward(m, x));

    // gate vectors computed through the bundle agree
    const auto emb = embed_and_classify(b, x).embedding;
    CHECK(gate_vectors(b, emb, GeneratorId::H).gates == expect.gates);
}

TEST_CASE("stitching examples") {
    SUBCASE("identity on a lattice") {
        std::mt19937_64 rng(6);
        ImageTensor page(random_tensor<float>({1, 16, 24}, rng, 0, 1), RangeTag::Unit);
        const auto plan = StitchPlan::lattice(1, 16, 24, 8, 4);
        std::vector<ImageTensor> patches;
        for (auto [r, c] : plan.origins) {
            auto p = ImageTensor::filled(1, 8, 8, 0.0f);
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x) p.at(0, y, x) = page.at(0, r + y, c + x);
            patches.push_back(p);
        }
        CHECK(stitch_patches(patches, plan) == page);
    }
    SUBCASE("overlap averages") {
        const auto plan = StitchPlan::from_origins(1, 4, 6, 4, {{0, 0}, {0, 2}});
        const auto out = stitch_patches({ImageTensor::filled(1, 4, 4, 0.0f), ImageTensor::filled(1, 4, 4, 1.0f)}, plan);
        for (int y = 0; y < 4; ++y) {
            CHECK(out.at(0, y, 0) == 0.0f);
            CHECK(out.at(0, y, 2) == 0.5f);
            CHECK(out.at(0, y, 3) == 0.5f);
            CHECK(out.at(0, y, 5) == 1.0f);
        }
        CHECK(plan.counts[2] == 2);
    }
    SUBCASE("single patch") {
        const auto plan = StitchPlan::lattice(1, 8, 8, 8, 4);
        CHECK(plan.origins.size() == 1);
        auto p = ImageTensor::filled(1, 8, 8, 0.25f);
        CHECK(stitch_patches({p}, plan) == p);
    }
    SUBCASE("uncovered pixels are rejected") {
        const auto plan = StitchPlan::from_origins(1, 8, 12, 4, {{0, 0}, {4, 0}});
        CHECK_THROWS_AS(plan.validate(), ContractViolation);
        CHECK_THROWS_AS(stitch_patches({ImageTensor::filled(1, 4, 4, 0.f), ImageTensor::filled(1, 4, 4, 0.f)}, plan),
                        ContractViolation);
    }
    SUBCASE("patch count must match the plan") {
        const auto plan = StitchPlan::lattice(1, 8, 8, 4, 4);
        CHECK_THROWS_AS(stitch_patches({ImageTensor::filled(1, 4, 4, 0.f)}, plan), ContractViolation);
    }
}

TEST_CASE("page cleaning with an identity patch function") {
    const PatchFn identity = [](const ImageTensor& p) { return p; };
    for (auto [h, w] : std::vector<std::pair<int, int>>{{64, 64}, {100, 70}, {37, 129}, {8, 8}}) {
        const auto page = smooth_page(h, w);
        const auto out = clean_page_with(identity, page, 8);
        REQUIRE(out.height() == page.height());
        REQUIRE(out.width() == page.width());
        CHECK(out.range == RangeTag::Unit);
        double mae = 0;
        for (std::size_t i = 0; i < out.data.size(); ++i) mae += std::abs(out.data[i] - page.data[i]);
        CHECK(mae / out.data.size() < 1e-2);
        if (h % 8 == 0 && w % 8 == 0) CHECK(out == page);
    }
}

TEST_CASE("page cleaning with a model") {
    auto b = trained_like_bundle(7);
    auto m = export_minimal(b);
    const auto page = synth_clean_page(8, 70, 90);
    const auto a = clean_page(m, page);
    CHECK(a.height() == 70);
    CHECK(a.width() == 90);
    CHECK(a.range == RangeTag::Unit);
    for (float v : a.data.vec()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(clean_page(m, page) == a);
    CHECK(clean_page(m, page, 4) == a);

    // a single patch through clean_patch matches the raw network output mapped to the unit range
    auto patch = ImageTensor::filled(1, 8, 8, 0.0f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) patch.at(0, y, x) = page.at(0, y, x);
    const auto direct = minimal_forward(m, to_signed(patch).data);
    const auto cleaned = clean_patch(m, patch);
    for (std::size_t i = 0; i < direct.size(); ++i) CHECK(cleaned.data[i] == doctest::Approx((direct[i] + 1) / 2).epsilon(1e-6));
    CHECK_THROWS_AS(clean_patch(m, ImageTensor::filled(1, 6, 8, 0.0f)), ContractViolation);
}

TEST_CASE("cleaning time grows linearly with page area") {
    auto b = trained_like_bundle(9);
    auto m = export_minimal(b);
    using clock = std::chrono::steady_clock;
    std::vector<double> per_pixel;
    for (int side : {64, 96, 128, 160}) {
        const auto page = smooth_page(side, side);
        clean_page(m, page);
        std::vector<double> runs;
        for (int r = 0; r < 7; ++r) {
            const auto t0 = clock::now();
            clean_page(m, page);
            runs.push_back(std::chrono::duration<double>(clock::now() - t0).count());
        }
        std::nth_element(runs.begin(), runs.begin() + 3, runs.end());
        per_pixel.push_back(runs[3] / (side * side));
    }
    const double mean = std::accumulate(per_pixel.begin(), per_pixel.end(), 0.0) / per_pixel.size();
    for (double p : per_pixel) CHECK(std::abs(p / mean - 1) < 0.2);
}
