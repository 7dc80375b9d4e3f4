// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include "fec/editing.hpp"
#include "fec/harness.hpp"
#include "fec/metrics.hpp"
#include "fec/sampling.hpp"
#include "support.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace fec;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double value)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, format, value);
    return buf;
}

int worker_count()
{
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

std::vector<std::uint64_t> seed_range(std::uint64_t count)
{
    std::vector<std::uint64_t> seeds(count);
    std::iota(seeds.begin(), seeds.end(), 0);
    return seeds;
}

ExperimentConfig base_config(std::uint64_t seeds = 10)
{
    ExperimentConfig c;
    c.steps = 50;
    c.seeds = seed_range(seeds);
    c.jobs = worker_count();
    return c;
}

const NoiseSchedule& schedule()
{
    static const NoiseSchedule sched = build_schedule(ScheduleParams{});
    return sched;
}

const TimestepPlan& plan50()
{
    static const TimestepPlan plan = timestep_plan(50, 1000);
    return plan;
}

GuidanceContext context_for(const ExperimentConfig& c, double scale)
{
    return {scale, embed_prompt(c.prompts.front(), c.embedder_seed), embed_prompt("", c.embedder_seed)};
}

const SweepRow& find_row(const SweepReport& report, Method method, std::uint64_t seed, double sampling,
                         double inversion, PromptType type = PromptType::non_empty)
{
    for (const SweepRow& r : report.rows) {
        if (r.method == method && r.seed == seed && r.sampling_guidance == sampling &&
            r.inversion_guidance == inversion && r.prompt_type == type) {
            if (!r.ok()) {
                throw std::runtime_error("sweep row failed: " + r.error);
            }
            return r;
        }
    }
    throw std::runtime_error("sweep row missing");
}

bool non_decreasing(const std::vector<double>& values)
{
    return std::is_sorted(values.begin(), values.end());
}

Outcome fec_ref_exactness()
{
    const ExperimentConfig c = base_config();
    Outcome out;
    double worst_loss = 0.0;
    double slowest = 0.0;
    int identical = 0;
    int runs = 0;
    for (double w : {1.0, 5.0, 7.5}) {
        for (std::uint64_t s : c.seeds) {
            const ToyDenoiser net = make_denoiser(c, s);
            const Latent z0 = make_source_latent(c, s);
            const GuidanceContext ctx = context_for(c, w);
            const auto start = Clock::now();
            const InversionResult inv = invert(net, z0, ctx, plan50(), schedule());
            const SampleResult rec = reconstruct(net, Method::fec_ref, inv, ctx, plan50(), schedule());
            slowest = std::max(slowest, seconds_since(start));
            const double loss = latent_loss(rec.final, z0);
            worst_loss = std::max(worst_loss, loss);
            identical += rec.final == z0 ? 1 : 0;
            ++runs;
        }
    }
    out.pass = identical == runs && worst_loss < 1e-12 && slowest < 5.0;
    out.detail = std::to_string(identical) + "/" + std::to_string(runs) + " bit-identical, max loss " +
                 fmt("%.3g", worst_loss) + " (< 1e-12), slowest run " + fmt("%.2f", slowest) + " s (< 5 s)";
    return out;
}

Outcome fec_noise_precision()
{
    const std::vector<std::string> prompts{
        "",
        "a photo of a cat",
        "a red car parked in the street",
        "an oil painting of mountains at dusk",
        "two dogs playing in the snow",
        "a bowl of fruit on a wooden table next to a window",
    };
    const std::array<double, 3> scales{1.0, 5.0, 7.5};
    const std::array<LatentKind, 3> kinds{LatentKind::gaussian, LatentKind::blocks, LatentKind::gradient};
    std::mt19937_64 rng(20240607);
    const auto start = Clock::now();
    int passing = 0;
    double worst = 0.0;
    for (int i = 0; i < 30; ++i) {
        DenoiserConfig cfg;
        cfg.init_seed = rng();
        const ToyDenoiser net(cfg);
        const Latent z0 = generate_synthetic_latent(rng(), kinds[rng() % kinds.size()]);
        const std::uint64_t embedder_seed = rng() % 1000;
        const GuidanceContext ctx{scales[static_cast<std::size_t>(i) % scales.size()],
                                  embed_prompt(prompts[rng() % prompts.size()], embedder_seed),
                                  embed_prompt("", embedder_seed)};
        const InversionResult inv = invert(net, z0, ctx, plan50(), schedule());
        const SampleResult rec = reconstruct(net, Method::fec_noise, inv, ctx, plan50(), schedule());
        const double loss = latent_loss(rec.final, z0);
        worst = std::max(worst, loss);
        passing += loss < 1e-12 ? 1 : 0;
    }
    const double elapsed = seconds_since(start);
    Outcome out;
    out.pass = passing == 30 && elapsed < 120.0;
    out.detail = std::to_string(passing) + "/30 cases below 1e-12, max loss " + fmt("%.3g", worst) + ", suite " +
                 fmt("%.1f", elapsed) + " s (< 120 s)";
    return out;
}

Outcome algebraic_roundtrips()
{
    const NoiseSchedule& sched = schedule();
    const Shape shape{4, 16, 16};
    std::mt19937_64 rng(77);
    double invert_step = 0.0;
    double noise = 0.0;
    double uncond = 0.0;
    bool unit_exact = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const int t_prev = static_cast<int>(rng() % 1000);
        const int t = t_prev + 1 + static_cast<int>(rng() % static_cast<unsigned>(1000 - t_prev));
        const Latent z = test::random_latent(rng(), shape, test::uniform(rng, 0.1, 3.0));
        const Latent eps = test::random_latent(rng(), shape);
        invert_step = std::max(invert_step,
                               max_abs_diff(ddim_step(ddim_invert_step(z, eps, t_prev, t, sched), eps, t, t_prev, sched), z));

        const Latent target = test::random_latent(rng(), shape, 2.0);
        noise = std::max(noise, max_abs_diff(ddim_step(z, desired_noise(z, target, t, t_prev, sched), t, t_prev, sched),
                                             target));

        double scale = test::uniform(rng, -2.0, 15.0);
        if (std::abs(scale - 1.0) < 0.05) {
            scale = 7.5;
        }
        const Latent ec = test::random_latent(rng(), shape);
        uncond = std::max(uncond, max_abs_diff(cfg_combine(ec, desired_uncond(eps, ec, scale), scale), eps));
        unit_exact = unit_exact && cfg_combine(ec, eps, 1.0) == ec;
    }
    Outcome out;
    out.pass = invert_step < 1e-12 && noise < 1e-12 && uncond < 1e-12 && unit_exact;
    out.detail = "1000 trials: invert/step " + fmt("%.2g", invert_step) + ", desired_noise " + fmt("%.2g", noise) +
                 ", desired_uncond " + fmt("%.2g", uncond) + " (all < 1e-12); cfg at scale 1 " +
                 (unit_exact ? "exact" : "NOT exact");
    return out;
}

Outcome guidance_trend()
{
    ExperimentConfig paired = base_config();
    paired.methods = {Method::direct};
    paired.sampling_guidances = {1.0, 5.0, 7.5};
    const SweepReport a = run_sweep(paired);
    int monotone = 0;
    for (std::uint64_t s : paired.seeds) {
        std::vector<double> losses;
        for (double w : paired.sampling_guidances) {
            losses.push_back(find_row(a, Method::direct, s, w, w).metrics.latent_loss);
        }
        monotone += non_decreasing(losses) ? 1 : 0;
    }

    ExperimentConfig crossed = base_config();
    crossed.methods = {Method::direct};
    crossed.sampling_guidances = {7.5};
    crossed.inversion_guidances = {1.0, 5.0, 7.5};
    const SweepReport b = run_sweep(crossed);
    // "Fails badly" is pinned as a mean loss above 0.1, ten times the 0.01 reference level.
    bool large = true;
    std::string means;
    for (double wi : crossed.inversion_guidances) {
        double sum = 0.0;
        for (std::uint64_t s : crossed.seeds) {
            sum += find_row(b, Method::direct, s, 7.5, wi).metrics.latent_loss;
        }
        const double mean = sum / static_cast<double>(crossed.seeds.size());
        large = large && mean > 0.1;
        means += (means.empty() ? "" : ", ") + fmt("%g", wi) + ": " + fmt("%.3g", mean);
    }
    Outcome out;
    out.pass = monotone >= 8 && large;
    out.detail = "loss non-decreasing over guidance 1, 5, 7.5 in " + std::to_string(monotone) +
                 "/10 seeds (>= 8); mean loss at sampling 7.5 by inversion guidance {" + means + "} (each > 0.1)";
    return out;
}

/// One sweep at guidance 7.5 over the methods used by the curve and kv criteria.
const SweepReport& reconstruction_sweep()
{
    static const SweepReport report = [] {
        ExperimentConfig c = base_config();
        c.methods = {Method::direct, Method::fec_ref, Method::fec_noise, Method::fec_kv_reuse, Method::fec_v_reuse};
        return run_sweep(c);
    }();
    return report;
}

Outcome error_growth()
{
    const SweepReport& report = reconstruction_sweep();
    int monotone = 0;
    bool ref_zero = true;
    double noise_max = 0.0;
    for (std::uint64_t s : seed_range(10)) {
        std::vector<double> direct;
        for (const auto& [t, loss] : find_row(report, Method::direct, s, 7.5, 7.5).metrics.per_step_losses) {
            direct.push_back(loss);
        }
        monotone += non_decreasing(direct) ? 1 : 0;
        for (const auto& [t, loss] : find_row(report, Method::fec_ref, s, 7.5, 7.5).metrics.per_step_losses) {
            ref_zero = ref_zero && loss == 0.0;
        }
        for (const auto& [t, loss] : find_row(report, Method::fec_noise, s, 7.5, 7.5).metrics.per_step_losses) {
            noise_max = std::max(noise_max, loss);
        }
    }
    Outcome out;
    out.pass = monotone >= 8 && ref_zero && noise_max < 1e-12;
    out.detail = "direct curve non-decreasing in " + std::to_string(monotone) + "/10 seeds (>= 8); fec-ref curve " +
                 (ref_zero ? "identically 0" : "NOT identically 0") + "; fec-noise max step loss " +
                 fmt("%.3g", noise_max) + " (< 1e-12)";
    return out;
}

Outcome kv_suppression()
{
    const SweepReport& report = reconstruction_sweep();
    int kv_wins = 0;
    int v_wins = 0;
    for (std::uint64_t s : seed_range(10)) {
        const double direct = find_row(report, Method::direct, s, 7.5, 7.5).metrics.latent_loss;
        kv_wins += find_row(report, Method::fec_kv_reuse, s, 7.5, 7.5).metrics.latent_loss < direct ? 1 : 0;
        v_wins += find_row(report, Method::fec_v_reuse, s, 7.5, 7.5).metrics.latent_loss < direct ? 1 : 0;
    }
    Outcome out;
    out.pass = kv_wins >= 9 && v_wins >= 8;
    out.detail = "fec-kv-reuse below direct in " + std::to_string(kv_wins) + "/10 seeds (>= 9); fec-v-reuse in " +
                 std::to_string(v_wins) + "/10 (>= 8)";
    return out;
}

Outcome negative_prompt_equivalence()
{
    const ExperimentConfig c = base_config();
    int identical = 0;
    for (std::uint64_t s : c.seeds) {
        const ToyDenoiser net = make_denoiser(c, s);
        const GuidanceContext ctx = context_for(c, 1.0);
        const InversionResult inv = invert(net, make_source_latent(c, s), ctx, plan50(), schedule());
        const Latent& zT = inv.trajectory.start();
        const Latent neg = sample_neg_prompt_baseline(net, zT, ctx, plan50(), schedule()).final;
        identical += neg == sample_direct(net, zT, ctx, plan50(), schedule()).final ? 1 : 0;
    }
    return {identical == 10, std::to_string(identical) + "/10 seeds bit-identical at guidance 1"};
}

Outcome prompt_type_trend()
{
    ExperimentConfig c = base_config(20);
    c.methods = {Method::direct};
    c.prompt_types = {PromptType::empty, PromptType::non_empty};
    const SweepReport report = run_sweep(c);
    double empty = 0.0;
    double full = 0.0;
    for (std::uint64_t s : c.seeds) {
        empty += find_row(report, Method::direct, s, 7.5, 7.5, PromptType::empty).metrics.latent_loss;
        full += find_row(report, Method::direct, s, 7.5, 7.5, PromptType::non_empty).metrics.latent_loss;
    }
    empty /= static_cast<double>(c.seeds.size());
    full /= static_cast<double>(c.seeds.size());
    return {empty <= full, "20 paired cases at guidance 7.5: mean loss empty " + fmt("%.4g", empty) +
                               " <= non-empty " + fmt("%.4g", full)};
}

Outcome batch_invariance()
{
    ExperimentConfig c = base_config(1);
    const BatchInvarianceReport report = check_batch_invariance(c);
    std::size_t identical = 0;
    double worst = 0.0;
    for (const InvarianceCheck& check : report.checks) {
        identical += check.identical ? 1 : 0;
        worst = std::max(worst, check.max_abs_diff);
    }
    return {report.passed() && identical == report.checks.size(),
            std::to_string(identical) + "/" + std::to_string(report.checks.size()) +
                " checks bit-identical over full 50-step runs, max diff " + fmt("%.3g", worst)};
}

Outcome edit_locality()
{
    const ExperimentConfig c = base_config(5);
    EditSettings settings;
    settings.plan = plan50();
    double outside = 0.0;
    double inside_min = std::numeric_limits<double>::infinity();
    for (std::uint64_t s : c.seeds) {
        const ToyDenoiser net = make_denoiser(c, s);
        EditRequest req;
        req.source_prompt = c.prompts.front();
        req.edit_prompt = c.edit_prompts.front();
        req.method = Method::fec_noise;
        req.mask = EditMask::box(16, 16, 4, 4, 12, 12);
        const EditOutcome edit = run_edit(net, schedule(), req, make_source_latent(c, s), settings);
        outside = std::max(outside, *edit.report.outside_max_abs_diff);
        inside_min = std::min(inside_min, *edit.report.inside_mse);
    }

    // Identical prompts: fec-noise (zero mask) and the kv methods fall back to their reconstruction,
    // fec-ref edits by plain guided sampling from the inverted start.
    bool degenerate = true;
    std::string failures;
    const ToyDenoiser net = make_denoiser(c, 0);
    const Latent z0 = make_source_latent(c, 0);
    for (Method m : {Method::fec_noise, Method::fec_kv_reuse, Method::fec_v_reuse, Method::fec_ref}) {
        EditRequest req;
        req.source_prompt = req.edit_prompt = c.prompts.front();
        req.method = m;
        const EditOutcome edit = run_edit(net, schedule(), req, z0, settings);
        bool ok = false;
        if (m == Method::fec_noise) {
            ok = max_abs_diff(edit.output, *edit.reconstruction) < 1e-10 && latent_loss(edit.output, z0) < 1e-12;
        } else if (m == Method::fec_ref) {
            const GuidanceContext ctx = context_for(c, req.guidance);
            ok = edit.output == sample_direct(net, edit.inversion.trajectory.start(), ctx, plan50(), schedule()).final &&
                 *edit.reconstruction == z0;
        } else {
            ok = edit.output == *edit.reconstruction;
        }
        if (!ok) {
            degenerate = false;
            failures += std::string(" ") + std::string(to_string(m));
        }
    }
    Outcome out;
    out.pass = outside < 1e-10 && inside_min > 0.0 && degenerate;
    out.detail = "box edit: max outside diff " + fmt("%.3g", outside) + " (< 1e-10), min inside mse " +
                 fmt("%.3g", inside_min) + "; identical-prompt edits " +
                 (degenerate ? "reduce to their contracts" : "FAIL for" + failures);
    return out;
}

/// Fourth-order Runge-Kutta on the probability-flow ODE for Gaussian data, written in the scaled
/// coordinates x = z / sqrt(ab), s = sqrt((1 - ab) / ab), where dx/ds = eps = s (x - mean) / (var + s^2).
Latent reference_endpoint(const Latent& zT, double ab_T, double mean, double variance, int steps)
{
    const double s0 = std::sqrt((1.0 - ab_T) / ab_T);
    const double h = -s0 / steps;
    const auto f = [&](double x, double s) { return s * (x - mean) / (variance + s * s); };
    Latent out(zT.shape());
    for (std::size_t i = 0; i < zT.size(); ++i) {
        double x = zT[i] / std::sqrt(ab_T);
        double s = s0;
        for (int k = 0; k < steps; ++k) {
            const double k1 = f(x, s);
            const double k2 = f(x + 0.5 * h * k1, s + 0.5 * h);
            const double k3 = f(x + 0.5 * h * k2, s + 0.5 * h);
            const double k4 = f(x + h * k3, s + h);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            s = s0 + (k + 1) * h;
        }
        out[i] = x;  // ab = 1 at t = 0
    }
    return out;
}

double relative_error(const Latent& value, const Latent& reference)
{
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < value.size(); ++i) {
        num += (value[i] - reference[i]) * (value[i] - reference[i]);
        den += reference[i] * reference[i];
    }
    return std::sqrt(num / den);
}

Outcome analytic_oracle()
{
    const NoiseSchedule& sched = schedule();
    const Latent zT = test::random_latent(11);
    const double ab_T = sched.alpha_bar(1000);
    const GuidanceContext ctx{7.5, embed_prompt("a photo of a cat", 0), embed_prompt("", 0)};
    Outcome out;
    struct Case {
        double mean;
        double variance;
    };
    for (const Case& k : {Case{0.5, 0.25}, Case{0.0, 1.0}}) {
        const GaussianDenoiser oracle(sched, k.mean, k.variance);
        const Latent chain = sample_direct(oracle, zT, ctx, plan50(), sched).final;
        const Latent reference = reference_endpoint(zT, ab_T, k.mean, k.variance, 10000);
        // Closed form of the same ODE: x - mean = C sqrt(var + s^2).
        Latent exact(zT.shape());
        const double s0 = std::sqrt((1.0 - ab_T) / ab_T);
        for (std::size_t i = 0; i < zT.size(); ++i) {
            const double c = (zT[i] / std::sqrt(ab_T) - k.mean) / std::sqrt(k.variance + s0 * s0);
            exact[i] = k.mean + c * std::sqrt(k.variance);
        }
        const double err = relative_error(chain, reference);
        const bool ok = err < 1e-6;
        out.pass = out.pass && ok;
        out.detail += (out.detail.empty() ? "" : "; ") + std::string("variance ") + fmt("%g", k.variance) +
                      ": 50-step chain vs 10000-step reference " + fmt("%.3g", err) + (ok ? " (< 1e-6)" : " (>= 1e-6)") +
                      ", reference vs closed form " + fmt("%.2g", relative_error(reference, exact));
    }
    return out;
}

Outcome metric_units()
{
    const Latent a = test::random_latent(12, Shape{4, 16, 16});
    const bool self_ssim = ssim(a, a, {.dynamic_range = dynamic_range(a)}) == 1.0;
    const bool sentinel = std::isinf(psnr(a, a, dynamic_range(a))) && psnr(a, a, 1.0) > 0.0;

    Latent board(Shape{1, 11, 11});
    Latent inverse(Shape{1, 11, 11});
    for (std::size_t y = 0; y < 11; ++y) {
        for (std::size_t x = 0; x < 11; ++x) {
            board.at(0, y, x) = (x + y) % 2 == 1 ? 1.0 : 0.0;
            inverse.at(0, y, x) = 1.0 - board.at(0, y, x);
        }
    }
    const double tile = ssim(board, inverse, {.dynamic_range = 1.0});
    const double tile_diff = std::abs(tile - test::brute_force_ssim(board, inverse, 1.0));

    const ExperimentConfig c = base_config(1);
    const ToyDenoiser net = make_denoiser(c, 0);
    EditRequest req;
    req.source_prompt = c.prompts.front();
    req.edit_prompt = c.edit_prompts.front();
    req.method = Method::fec_kv_reuse;
    CallLedger ledger;
    EditSettings settings;
    settings.plan = plan50();
    settings.ledger = &ledger;
    settings.compare_with_reconstruction = false;
    run_edit(net, schedule(), req, make_source_latent(c, 0), settings);
    const long long recon = ledger.count(route::reconstruction);
    const long long edit = ledger.count(route::edit);

    Outcome out;
    out.pass = self_ssim && sentinel && tile_diff < 1e-9 && recon == 0 && edit == 100;
    out.detail = std::string("ssim(a, a) ") + (self_ssim ? "= 1" : "!= 1") + ", psnr(a, a) " +
                 (sentinel ? "= inf" : "not inf") + ", 11x11 tile ssim " + fmt("%.12f", tile) + " vs reference diff " +
                 fmt("%.2g", tile_diff) + " (< 1e-9); kv-reuse edit calls: edit " + std::to_string(edit) +
                 ", reconstruction " + std::to_string(recon);
    return out;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria for the exact-inversion toolkit"};
    std::vector<int> only;
    app.add_option("criteria", only, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 12));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"fec-ref exactness", fec_ref_exactness},
        {"fec-noise machine precision", fec_noise_precision},
        {"algebraic roundtrips", algebraic_roundtrips},
        {"guidance-sensitivity trend", guidance_trend},
        {"error-growth curve", error_growth},
        {"kv-reuse suppression", kv_suppression},
        {"negative-prompt equivalence", negative_prompt_equivalence},
        {"prompt-type trend", prompt_type_trend},
        {"batch invariance", batch_invariance},
        {"edit locality", edit_locality},
        {"analytic oracle", analytic_oracle},
        {"metric units", metric_units},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.contains(number)) {
            continue;
        }
        const auto start = Clock::now();
        Outcome outcome;
        try {
            outcome = criteria[i].second();
        } catch (const std::exception& e) {
            outcome = {false, std::string("error: ") + e.what()};
        }
        failed += outcome.pass ? 0 : 1;
        std::printf("%s %2d %s: %s [%.1f s]\n", outcome.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                    outcome.detail.c_str(), seconds_since(start));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
