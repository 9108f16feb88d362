#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "misa/attribution.hpp"
#include "misa/datakit.hpp"
#include "misa/nnet.hpp"
#include "support/testnets.hpp"

using namespace misa;

namespace {

Tensor random_image(const std::vector<int>& shape, Rng& rng) {
    Tensor t(shape);
    for (float& v : t.data) v = rng.uniform_f(0.0f, 1.0f);
    return t;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("attribution of the baseline itself is the zero map") {
    Rng rng(101);
    NetworkModel m = testnets::random_small_net(rng);
    const Tensor x = testnets::random_input(m, rng);
    for (int b : m.monitored) {
        const AttributionMap map = integrated_gradients(m, x, 0, b, {x}, 16);
        for (float v : map.values.data) CHECK(v == 0.0f);
        CHECK(completeness_gap(map, m, x, x, 0) == 0.0);
    }
}

TEST_CASE("linear model against a black baseline recovers w_i * x_i") {
    NetworkModel m =
        make_network({1, 4, 4}, 3, {flatten_layer(), dense_layer(16, 3), softmax_layer()});
    init_params(m, 5);
    Rng rng(7);
    const Tensor x = random_image({1, 4, 4}, rng);
    Tensor black({1, 4, 4});

    for (int steps : {1, 3, 64}) {
        for (int target = 0; target < 3; ++target) {
            const AttributionMap map = integrated_gradients(m, x, target, 0, {black}, steps);
            for (int i = 0; i < 16; ++i) {
                const float w = m.params[1].w[static_cast<std::size_t>(target) * 16 +
                                              static_cast<std::size_t>(i)];
                CHECK(map.values.data[static_cast<std::size_t>(i)] ==
                      doctest::Approx(w * x.data[static_cast<std::size_t>(i)]).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("completeness holds at 128 steps on random nets") {
    Rng rng(103);
    for (int trial = 0; trial < 10; ++trial) {
        NetworkModel m = testnets::random_small_net(rng);
        // Moderate weights keep the relu-kink jumps small enough for a fixed
        // 128-point midpoint grid to resolve the path integral.
        testnets::randomize_params(m, rng, 0.25f);
        const Tensor x = testnets::random_input(m, rng);
        const Tensor rand_base = testnets::random_input(m, rng);
        const Tensor black(m.input_shape);
        const int target = predict(m, x);
        for (const Tensor* base : {&black, &rand_base}) {
            for (int b : m.monitored) {
                const AttributionMap map = integrated_gradients(m, x, target, b, {*base}, 128);
                const Tensor fx = suffix_logits(m, b, boundary_activation(m, x, b));
                const Tensor fb = suffix_logits(m, b, boundary_activation(m, *base, b));
                const double span =
                    std::abs(static_cast<double>(fx.data[static_cast<std::size_t>(target)]) -
                             static_cast<double>(fb.data[static_cast<std::size_t>(target)]));
                const double gap = completeness_gap(map, m, x, *base, target);
                CHECK(gap <= 0.01 * span + 1e-4);
            }
        }
    }
}

TEST_CASE("completeness gap shrinks as steps double") {
    Rng rng(104);
    // A conv+relu net makes the suffix genuinely nonlinear, so the midpoint
    // rule has real discretization error to shed. Averaging the gap over a
    // batch of inputs smooths out where individual kinks land on the grid.
    NetworkModel m = make_architecture("cnn_small", {1, 16, 16}, 5);
    init_params(m, 11);
    testnets::randomize_params(m, rng, 0.6f);
    std::vector<Tensor> xs;
    for (int i = 0; i < 8; ++i) xs.push_back(random_image({1, 16, 16}, rng));
    Tensor black({1, 16, 16});

    std::vector<double> avg_gaps;
    for (int steps : {8, 16, 32, 64, 128}) {
        double avg = 0.0;
        for (const Tensor& x : xs) {
            const int t = predict(m, x);
            const AttributionMap map = integrated_gradients(m, x, t, 0, {black}, steps);
            avg += completeness_gap(map, m, x, black, t);
        }
        avg_gaps.push_back(avg / static_cast<double>(xs.size()));
    }
    for (std::size_t i = 1; i < avg_gaps.size(); ++i) CHECK(avg_gaps[i] <= avg_gaps[i - 1] * 1.10);
    CHECK(avg_gaps.back() <= avg_gaps.front() / 4.0);
    CHECK(avg_gaps.front() > 0.0);
}

TEST_CASE("intermediate-boundary attribution equals a standalone suffix network") {
    Rng rng(105);
    for (int trial = 0; trial < 3; ++trial) {
        NetworkModel m = testnets::random_small_net(rng);
        const Tensor x = testnets::random_input(m, rng);
        const Tensor base_img = testnets::random_input(m, rng);
        for (int b : m.monitored) {
            if (b == 0) continue;
            std::vector<LayerSpec> suffix_layers(m.layers.begin() + b, m.layers.end());
            NetworkModel suffix = make_network(m.boundary_shapes[static_cast<std::size_t>(b)],
                                               m.class_count, std::move(suffix_layers));
            for (int li = b; li < m.layer_count(); ++li)
                suffix.params[static_cast<std::size_t>(li - b)] =
                    m.params[static_cast<std::size_t>(li)];

            const Tensor act = boundary_activation(m, x, b);
            const Tensor base_act = boundary_activation(m, base_img, b);
            const AttributionMap via_full = integrated_gradients(m, x, 1, b, {base_img}, 32);
            const AttributionMap via_sub = integrated_gradients(suffix, act, 1, 0, {base_act}, 32);
            REQUIRE(via_full.values.size() == via_sub.values.size());
            for (std::size_t i = 0; i < via_full.values.size(); ++i)
                CHECK(via_full.values.data[i] ==
                      doctest::Approx(via_sub.values.data[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("multi-baseline maps average the per-baseline maps") {
    Rng rng(106);
    NetworkModel m = testnets::random_small_net(rng);
    const Tensor x = testnets::random_input(m, rng);
    const Tensor b1 = testnets::random_input(m, rng);
    const Tensor b2 = testnets::random_input(m, rng);

    const AttributionMap both = integrated_gradients(m, x, 0, 0, {b1, b2}, 24);
    const AttributionMap first = integrated_gradients(m, x, 0, 0, {b1}, 24);
    const AttributionMap second = integrated_gradients(m, x, 0, 0, {b2}, 24);
    for (std::size_t i = 0; i < both.values.size(); ++i)
        CHECK(both.values.data[i] ==
              doctest::Approx(0.5f * (first.values.data[i] + second.values.data[i]))
                  .epsilon(1e-6));
}

TEST_CASE("attribution rejects bad boundaries, steps, and targets") {
    Rng rng(107);
    NetworkModel m = make_architecture("cnn_small", {1, 16, 16}, 4);
    init_params(m, 3);
    const Tensor x = random_image({1, 16, 16}, rng);
    Tensor black({1, 16, 16});

    CHECK_THROWS_WITH_AS(integrated_gradients(m, x, 0, 1, {black}, 8),
                         doctest::Contains("not monitored"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(integrated_gradients(m, x, 0, 0, {black}, 0),
                         doctest::Contains("steps"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(integrated_gradients(m, x, 0, 0, {}, 8), doctest::Contains("baseline"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(integrated_gradients(m, x, 4, 0, {black}, 8),
                         doctest::Contains("target"), std::invalid_argument);
}

TEST_CASE("baseline policies resolve deterministically") {
    const LabeledDataset data = generate_synthetic_dataset(4, 8, 8, 1, 20, 109);

    SUBCASE("black is one all-zero image and needs no source") {
        BaselinePolicy p;
        p.kind = BaselinePolicy::Kind::black;
        const auto b = resolve_baselines(p, {1, 8, 8}, nullptr);
        REQUIRE(b.size() == 1);
        CHECK(std::all_of(b[0].data.begin(), b[0].data.end(), [](float v) { return v == 0.0f; }));
        CHECK(p.id() == "black");
    }

    SUBCASE("dataset_mean matches the datakit mean image") {
        BaselinePolicy p;
        p.kind = BaselinePolicy::Kind::dataset_mean;
        const auto b = resolve_baselines(p, {1, 8, 8}, &data);
        REQUIRE(b.size() == 1);
        CHECK(b[0].data == dataset_mean_image(data).data);
        CHECK_THROWS_WITH_AS(resolve_baselines(p, {1, 8, 8}, nullptr),
                             doctest::Contains("source"), std::invalid_argument);
    }

    SUBCASE("sample_set draws the same images under the same seed") {
        BaselinePolicy p;
        p.kind = BaselinePolicy::Kind::sample_set;
        p.sample_count = 5;
        p.rng_seed = 42;
        const auto b1 = resolve_baselines(p, {1, 8, 8}, &data);
        const auto b2 = resolve_baselines(p, {1, 8, 8}, &data);
        REQUIRE(b1.size() == 5);
        for (std::size_t i = 0; i < 5; ++i) CHECK(b1[i].data == b2[i].data);
        p.rng_seed = 43;
        const auto b3 = resolve_baselines(p, {1, 8, 8}, &data);
        bool differs = false;
        for (std::size_t i = 0; i < 5; ++i)
            if (b3[i].data != b1[i].data) differs = true;
        CHECK(differs);
        p.sample_count = 999;
        CHECK_THROWS_WITH_AS(resolve_baselines(p, {1, 8, 8}, &data), doctest::Contains("holds"),
                             std::invalid_argument);
    }

    SUBCASE("policy JSON round trip") {
        BaselinePolicy p;
        p.kind = BaselinePolicy::Kind::sample_set;
        p.sample_count = 12;
        p.rng_seed = 77;
        p.source_split = "validation";
        const BaselinePolicy q = BaselinePolicy::from_json(p.to_json());
        CHECK(q.id() == p.id());
        CHECK(q.to_json() == p.to_json());
    }
}

TEST_CASE("batch attribution is transparent and indexes its errors") {
    Rng rng(110);
    NetworkModel m = make_architecture("mlp_small", {1, 8, 8}, 3);
    init_params(m, 13);
    testnets::randomize_params(m, rng, 1.0f);
    Tensor black({1, 8, 8});
    const Tensor x0 = random_image({1, 8, 8}, rng);
    const Tensor x1 = random_image({1, 8, 8}, rng);

    SUBCASE("batch of one is bit-exact against the single call") {
        const auto batch = batch_attribute(m, {x0}, {2}, 0, {black}, 32);
        const AttributionMap single = integrated_gradients(m, x0, 2, 0, {black}, 32);
        REQUIRE(batch.size() == 1);
        CHECK(batch[0].values.data == single.values.data);
    }

    SUBCASE("omitted targets fall back to the model's own predictions") {
        const auto batch = batch_attribute(m, {x0, x1}, {}, 0, {black}, 16);
        REQUIRE(batch.size() == 2);
        CHECK(batch[0].target_class == predict(m, x0));
        CHECK(batch[1].target_class == predict(m, x1));
    }

    SUBCASE("errors name the failing item") {
        CHECK_THROWS_WITH_AS(batch_attribute(m, {x0, x1}, {0, 99}, 0, {black}, 16),
                             doctest::Contains("item 1"), std::runtime_error);
        CHECK_THROWS_WITH_AS(batch_attribute(m, {x0}, {0, 1}, 0, {black}, 16),
                             doctest::Contains("targets"), std::invalid_argument);
    }
}

TEST_CASE("attribution maps round-trip through their file format") {
    Rng rng(111);
    NetworkModel m = make_architecture("mlp_small", {1, 8, 8}, 3);
    init_params(m, 17);
    testnets::randomize_params(m, rng, 1.0f);
    Tensor black({1, 8, 8});
    std::vector<Tensor> images;
    for (int i = 0; i < 3; ++i) images.push_back(random_image({1, 8, 8}, rng));

    const auto maps = batch_attribute(m, images, {}, 0, {black}, 8, "black");
    const std::string path = temp_path("attr_roundtrip.bin");
    save_attribution_maps(maps, path);
    const auto back = load_attribution_maps(path);
    REQUIRE(back.size() == maps.size());
    for (std::size_t i = 0; i < maps.size(); ++i) {
        CHECK(back[i].values.data == maps[i].values.data);
        CHECK(back[i].target_class == maps[i].target_class);
        CHECK(back[i].boundary == maps[i].boundary);
        CHECK(back[i].steps == maps[i].steps);
        CHECK(back[i].baseline_id == maps[i].baseline_id);
    }
    std::remove(path.c_str());

    SUBCASE("mixed-boundary saves are rejected") {
        auto mixed = maps;
        mixed[1].boundary = 2;
        CHECK_THROWS_WITH_AS(save_attribution_maps(mixed, path), doctest::Contains("share"),
                             std::invalid_argument);
    }
}
