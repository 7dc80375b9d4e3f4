#include "fec/editing.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace fec;

namespace {

/// Trace at t with every layer carrying `grid` as the attention on token `token` (rest spread evenly).
AttentionTrace trace_with(Timestep t, std::size_t gh, std::size_t gw, const std::vector<double>& grid,
                          std::size_t token, int layers = 2)
{
    AttentionTrace trace;
    for (int l = 0; l < layers; ++l) {
        CrossAttentionMap map{gh, gw, Matrix(gh * gw, 8, 0.0)};
        for (std::size_t i = 0; i < gh * gw; ++i) {
            map.probs(i, token) = grid[i];
            for (std::size_t c = 0; c < 8; ++c) {
                if (c != token) {
                    map.probs(i, c) = (1.0 - grid[i]) / 7.0;
                }
            }
        }
        trace.record(t, l, std::move(map));
    }
    return trace;
}

const ToyDenoiser& edit_net()
{
    static const ToyDenoiser net(DenoiserConfig{.init_seed = 21});
    return net;
}

EditSettings settings(int steps)
{
    EditSettings s;
    s.plan = timestep_plan(steps, 1000);
    return s;
}

}  // namespace

TEST_CASE("derive_mask examples")
{
    const auto prompt = embed_prompt("a photo of a dog", 0);

    SUBCASE("uniform attention is degenerate and all zero")
    {
        const auto trace = trace_with(500, 8, 8, std::vector<double>(64, 0.2), 4);
        const EditMask mask = derive_mask(trace, "dog", prompt, 500, 16, 16);
        CHECK(mask.degenerate);
        CHECK(mask.provenance == MaskProvenance::attention_derived);
        for (double v : mask.values) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("a single hot 2x2 block becomes exactly that block")
    {
        std::vector<double> grid(64, 0.05);
        for (std::size_t y : {3u, 4u}) {
            for (std::size_t x : {5u, 6u}) {
                grid[y * 8 + x] = 0.9;
            }
        }
        const auto trace = trace_with(500, 8, 8, grid, 4);
        const EditMask same_grid = derive_mask(trace, "dog", prompt, 500, 8, 8);
        CHECK_FALSE(same_grid.degenerate);
        for (std::size_t y = 0; y < 8; ++y) {
            for (std::size_t x = 0; x < 8; ++x) {
                const bool hot = (y == 3 || y == 4) && (x == 5 || x == 6);
                CHECK(same_grid.at(y, x) == (hot ? 1.0 : 0.0));
            }
        }
        // Nearest upsampling to the latent grid doubles the block.
        const EditMask upsampled = derive_mask(trace, "dog", prompt, 500, 16, 16);
        CHECK(upsampled.values == EditMask::box(16, 16, 6, 10, 10, 14).values);
    }
    SUBCASE("threshold applies after min-max normalisation")
    {
        std::vector<double> grid(64, 0.0);
        grid[0] = 1.0;
        grid[1] = 0.31;
        grid[2] = 0.29;
        const EditMask mask = derive_mask(trace_with(500, 8, 8, grid, 4), "dog", prompt, 500, 8, 8);
        CHECK(mask.values[0] == 1.0);
        CHECK(mask.values[1] == 1.0);
        CHECK(mask.values[2] == 0.0);
    }
    SUBCASE("errors")
    {
        const auto trace = trace_with(500, 8, 8, std::vector<double>(64, 0.2), 4);
        CHECK_THROWS_AS(derive_mask(trace, "cat", prompt, 500, 16, 16), std::invalid_argument);
        CHECK_THROWS_AS(derive_mask(trace, "dog", prompt, 480, 16, 16), std::invalid_argument);
        CHECK_THROWS_AS(AttentionMaskProvider("cat", prompt, 16, 16), std::invalid_argument);
        const AttentionMaskProvider provider("dog", prompt, 16, 16);
        CHECK(provider.needs_attention());
        CHECK_THROWS_AS(provider.mask_at(500, nullptr), std::logic_error);
    }
}

TEST_CASE("property: derived masks are binary and deterministic")
{
    const auto& net = edit_net();
    const auto prompt = embed_prompt("a photo of a dog on grass", 0);
    for (int trial = 0; trial < 10; ++trial) {
        AttentionTrace trace;
        KVCache cache = net.new_kv_cache();
        const Timestep t = 100 * (trial + 1);
        predict_noise_capture(net, test::random_latent(50 + trial), t, prompt, cache, &trace);
        const EditMask a = derive_mask(trace, "dog", prompt, t, 16, 16);
        const EditMask b = derive_mask(trace, "dog", prompt, t, 16, 16);
        REQUIRE(a.values == b.values);
        for (double v : a.values) {
            REQUIRE((v == 0.0 || v == 1.0));
        }
    }
}

TEST_CASE("edit masks")
{
    const EditMask box = EditMask::box(4, 6, 1, 2, 3, 5);
    CHECK(box.at(0, 2) == 0.0);
    CHECK(box.at(1, 2) == 1.0);
    CHECK(box.at(2, 4) == 1.0);
    CHECK(box.at(3, 4) == 0.0);
    CHECK(box.at(2, 5) == 0.0);
    CHECK_NOTHROW(box.validate(Shape{3, 4, 6}));
    CHECK_THROWS(box.validate(Shape{3, 6, 4}));
    EditMask bad = EditMask::filled(2, 2, 0.5);
    bad.values[3] = 1.5;
    CHECK_THROWS(bad.validate(Shape{1, 2, 2}));

    std::map<Timestep, EditMask> scheduled;
    scheduled.emplace(20, EditMask::filled(2, 2, 1.0));
    const ScheduledMaskProvider provider(std::move(scheduled), EditMask::filled(2, 2, 0.0));
    CHECK(provider.mask_at(20, nullptr).values[0] == 1.0);
    CHECK(provider.mask_at(40, nullptr).values[0] == 0.0);
}

TEST_CASE("edit request validation")
{
    EditRequest req;
    req.source_prompt = "a photo of a cat";
    req.edit_prompt = "a photo of a dog";
    req.blend_word = "dog";
    CHECK_NOTHROW(req.validate());
    req.blend_word = "cat";
    CHECK_THROWS_AS(req.validate(), std::invalid_argument);
    req.blend_word.reset();
    req.method = Method::direct;
    CHECK_THROWS_AS(req.validate(), std::invalid_argument);
    req.method = Method::fec_noise;
    req.guidance = std::nan("");
    CHECK_THROWS_AS(req.validate(), std::invalid_argument);
}

TEST_CASE("identical prompts reduce every edit to its reconstruction")
{
    const auto& net = edit_net();
    const auto sched = build_schedule(ScheduleParams{});
    const Latent z0 = test::random_latent(60);
    EditRequest req;
    req.source_prompt = req.edit_prompt = "a photo of a cat";

    SUBCASE("fec-noise with an all-zero mask")
    {
        req.method = Method::fec_noise;
        req.mask = EditMask::filled(16, 16, 0.0);
        const auto out = run_edit(net, sched, req, z0, settings(10));
        CHECK(max_abs_diff(out.output, *out.reconstruction) < 1e-10);
        CHECK(latent_loss(out.output, z0) < 1e-12);
        CHECK(*out.report.outside_max_abs_diff < 1e-10);
    }
    SUBCASE("fec-kv-reuse over every layer")
    {
        req.method = Method::fec_kv_reuse;
        const auto out = run_edit(net, sched, req, z0, settings(10));
        CHECK(out.output == *out.reconstruction);
        CHECK(*out.report.outside_max_abs_diff == 0.0);
    }
    SUBCASE("fec-v-reuse")
    {
        req.method = Method::fec_v_reuse;
        const auto out = run_edit(net, sched, req, z0, settings(10));
        CHECK(out.output == *out.reconstruction);
    }
    SUBCASE("fec-ref edits by plain sampling from the inverted start")
    {
        req.method = Method::fec_ref;
        req.guidance = 1.0;
        const auto out = run_edit(net, sched, req, z0, settings(10));
        const GuidanceContext ctx{1.0, embed_prompt(req.source_prompt, 0), embed_prompt("", 0)};
        CHECK(out.output == sample_direct(net, out.inversion.trajectory.start(), ctx, settings(10).plan, sched).final);
        CHECK(*out.reconstruction == z0);
    }
}

TEST_CASE("fec-noise box edit is local")
{
    const auto& net = edit_net();
    const auto sched = build_schedule(ScheduleParams{});
    const Latent z0 = test::random_latent(61);
    EditRequest req;
    req.source_prompt = "a photo of a cat";
    req.edit_prompt = "a photo of a dog";
    req.method = Method::fec_noise;
    req.mask = EditMask::box(16, 16, 2, 3, 9, 12);
    for (double w : {1.0, 7.5}) {
        req.guidance = w;
        const auto out = run_edit(net, sched, req, z0, settings(10));
        CAPTURE(w);
        CHECK(*out.report.outside_max_abs_diff < 1e-10);
        CHECK(*out.report.inside_mse > 1e-8);
        REQUIRE(out.report.untouched_region.has_value());
        CHECK(out.report.untouched_region->values[0] == 1.0);
        CHECK(out.report.untouched_region->at(5, 5) == 0.0);
        CHECK(out.report.per_step_losses.size() == 11);
    }
}

TEST_CASE("blend-word masks drive a local fec-noise edit")
{
    const auto& net = edit_net();
    const auto sched = build_schedule(ScheduleParams{});
    const Latent z0 = test::random_latent(62);
    EditRequest req;
    req.source_prompt = "a photo of a cat";
    req.edit_prompt = "a photo of a dog";
    req.blend_word = "dog";
    req.method = Method::fec_noise;
    const auto out = run_edit(net, sched, req, z0, settings(10));
    REQUIRE(out.report.untouched_region.has_value());
    CHECK(*out.report.outside_max_abs_diff < 1e-10);
    std::size_t untouched = 0;
    for (double v : out.report.untouched_region->values) {
        untouched += v == 1.0 ? 1 : 0;
    }
    MESSAGE("untouched positions: " << untouched << " of 256");
}

TEST_CASE("edit call accounting")
{
    const auto& net = edit_net();
    const auto sched = build_schedule(ScheduleParams{});
    EditRequest req;
    req.source_prompt = "a photo of a cat";
    req.edit_prompt = "a photo of a dog";
    req.method = Method::fec_kv_reuse;
    CallLedger ledger;
    EditSettings s = settings(10);
    s.ledger = &ledger;
    s.compare_with_reconstruction = false;
    run_edit(net, sched, req, test::random_latent(63), s);
    CHECK(ledger.count(route::edit) == 20);
    CHECK(ledger.count(route::reconstruction) == 0);
    CHECK(ledger.count(route::inversion) == 20);
    CHECK(ledger.count(route::capture) == 20);
}
