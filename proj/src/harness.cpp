#include "fec/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>
#include <tuple>

namespace fec {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since)
{
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

int to_int(std::string_view text, const char* what)
{
    int v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size()) {
        throw std::invalid_argument(std::string("bad ") + what + ": '" + std::string(text) + "'");
    }
    return v;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are rethrown after all workers join.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn fn)
{
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

/// Everything one seed needs: its own network, source latent and prompt.
struct Case {
    std::uint64_t seed = 0;
    PromptType prompt_type = PromptType::non_empty;
    std::string prompt;
    std::string edit_prompt;
    ToyDenoiser net;
    Latent z0;
};

Case make_case(const ExperimentConfig& config, std::uint64_t seed, PromptType type)
{
    const std::size_t k = static_cast<std::size_t>(seed % config.prompts.size());
    const bool empty = type == PromptType::empty;
    return Case{seed,
                type,
                empty ? std::string() : config.prompts[k],
                config.edit_prompts.empty() ? std::string() : config.edit_prompts[seed % config.edit_prompts.size()],
                make_denoiser(config, seed),
                make_source_latent(config, seed)};
}

std::vector<std::pair<double, double>> guidance_grid(const ExperimentConfig& config)
{
    std::vector<std::pair<double, double>> grid;  // (inversion, sampling)
    if (config.inversion_guidances.empty()) {
        for (double w : config.sampling_guidances) {
            grid.emplace_back(w, w);
        }
    } else {
        for (double wi : config.inversion_guidances) {
            for (double ws : config.sampling_guidances) {
                grid.emplace_back(wi, ws);
            }
        }
    }
    return grid;
}

/// Inverts once per distinct inversion scale and reconstructs every (guidance pair, method) cell of a case.
std::vector<SweepRow> run_case(const ExperimentConfig& config, const NoiseSchedule& sched, const TimestepPlan& plan,
                               std::uint64_t seed, PromptType type, const std::vector<Method>& methods,
                               const std::vector<std::pair<double, double>>& grid)
{
    const Case c = make_case(config, seed, type);
    const EmbedderConfig emb{.seed = config.embedder_seed};
    const PromptEmbedding cond = embed_prompt(c.prompt, emb);
    const PromptEmbedding null = embed_prompt("", emb);
    const LayerRange layers = parse_layer_range(config.layers, c.net.layer_count());
    const bool want_kv = std::any_of(methods.begin(), methods.end(), needs_kv_cache);

    struct Inverted {
        std::optional<InversionResult> result;
        std::string error;
        double ms = 0.0;
    };
    std::map<double, Inverted> inversions;
    auto inversion_at = [&](double w) -> const Inverted& {
        auto it = inversions.find(w);
        if (it != inversions.end()) {
            return it->second;
        }
        Inverted inv;
        const auto start = Clock::now();
        try {
            InversionOptions opts;
            opts.capture_kv = want_kv;
            opts.aligned_capture = config.aligned_capture;
            opts.seed = seed;
            inv.result = invert(c.net, c.z0, GuidanceContext{w, cond, null}, plan, sched, opts);
        } catch (const std::exception& e) {
            inv.error = std::string("inversion: ") + e.what();
        }
        inv.ms = elapsed_ms(start);
        return inversions.emplace(w, std::move(inv)).first->second;
    };

    std::vector<SweepRow> rows;
    for (const auto& [wi, ws] : grid) {
        for (Method m : methods) {
            SweepRow row;
            row.method = m;
            row.inversion_guidance = wi;
            row.sampling_guidance = ws;
            row.prompt_type = type;
            row.seed = seed;
            row.prompt = c.prompt;
            // Negative-prompt inversion runs the conditional branch alone during inversion.
            const double used = m == Method::neg_prompt ? 1.0 : wi;
            if (used != wi) {
                row.note = "inverted at guidance 1";
            }
            const Inverted& inv = inversion_at(used);
            row.inversion_ms = inv.ms;
            if (!inv.result) {
                row.error = inv.error;
                rows.push_back(std::move(row));
                continue;
            }
            try {
                CallLedger ledger;
                SamplerOptions so;
                so.ledger = &ledger;
                so.route = std::string(route::reconstruction);
                const auto start = Clock::now();
                const SampleResult out =
                    reconstruct(c.net, m, *inv.result, GuidanceContext{ws, cond, null}, plan, sched, layers, so);
                row.sampling_ms = elapsed_ms(start);
                row.network_calls = ledger.total();
                row.metrics = evaluate_reconstruction(c.z0, out.final, &out.path, &inv.result->trajectory);
            } catch (const std::exception& e) {
                row.error = e.what();
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

SweepReport sweep_methods(const ExperimentConfig& config, const std::vector<Method>& methods)
{
    config.validate();
    const NoiseSchedule sched = build_schedule(config.schedule);
    const TimestepPlan plan = timestep_plan(config.steps, sched.train_steps());
    const auto grid = guidance_grid(config);

    std::vector<std::pair<std::uint64_t, PromptType>> cases;
    for (PromptType type : config.prompt_types) {
        for (std::uint64_t s : config.seeds) {
            cases.emplace_back(s, type);
        }
    }
    std::vector<std::vector<SweepRow>> slots(cases.size());
    parallel_for(cases.size(), config.jobs, [&](std::size_t i) {
        slots[i] = run_case(config, sched, plan, cases[i].first, cases[i].second, methods, grid);
    });

    // Deterministic order: prompt type, inversion scale, sampling scale, method, seed.
    SweepReport report;
    for (auto& s : slots) {
        for (auto& r : s) {
            report.rows.push_back(std::move(r));
        }
    }
    auto type_rank = [&](PromptType t) {
        return std::find(config.prompt_types.begin(), config.prompt_types.end(), t) - config.prompt_types.begin();
    };
    auto grid_rank = [&](const SweepRow& r) {
        return std::find(grid.begin(), grid.end(), std::make_pair(r.inversion_guidance, r.sampling_guidance)) -
               grid.begin();
    };
    auto method_rank = [&](Method m) { return std::find(methods.begin(), methods.end(), m) - methods.begin(); };
    auto seed_rank = [&](std::uint64_t s) {
        return std::find(config.seeds.begin(), config.seeds.end(), s) - config.seeds.begin();
    };
    std::stable_sort(report.rows.begin(), report.rows.end(), [&](const SweepRow& a, const SweepRow& b) {
        return std::make_tuple(type_rank(a.prompt_type), grid_rank(a), method_rank(a.method), seed_rank(a.seed)) <
               std::make_tuple(type_rank(b.prompt_type), grid_rank(b), method_rank(b.method), seed_rank(b.seed));
    });
    return report;
}

nlohmann::json metric_json(double v)
{
    if (std::isfinite(v)) {
        return v;
    }
    return format_metric(v);
}

nlohmann::json row_json(const SweepRow& r)
{
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [t, loss] : r.metrics.per_step_losses) {
        curve.push_back({t, loss});
    }
    return {{"method", std::string(to_string(r.method))},
            {"mode", r.mode},
            {"inversion_guidance", r.inversion_guidance},
            {"sampling_guidance", r.sampling_guidance},
            {"prompt_type", std::string(to_string(r.prompt_type))},
            {"seed", r.seed},
            {"prompt", r.prompt},
            {"latent_loss", metric_json(r.metrics.latent_loss)},
            {"psnr", metric_json(r.metrics.psnr)},
            {"ssim", metric_json(r.metrics.ssim)},
            {"per_step_losses", curve},
            {"inversion_ms", r.inversion_ms},
            {"sampling_ms", r.sampling_ms},
            {"network_calls", r.network_calls},
            {"error", r.error},
            {"note", r.note}};
}

std::string csv_field(std::string_view text)
{
    if (text.find_first_of(",\"\n") == std::string_view::npos) {
        return std::string(text);
    }
    std::string out = "\"";
    for (char ch : text) {
        if (ch == '"') {
            out += '"';
        }
        out += ch;
    }
    return out + "\"";
}

}  // namespace

ToyDenoiser make_denoiser(const ExperimentConfig& config, std::uint64_t seed)
{
    DenoiserConfig dc = config.denoiser;
    dc.init_seed = config.denoiser_seed + seed;
    return ToyDenoiser(dc);
}

Latent make_source_latent(const ExperimentConfig& config, std::uint64_t seed)
{
    return generate_synthetic_latent(config.data_seed + seed, config.latent_kind, config.denoiser.latent);
}

LatentKind parse_latent_kind(std::string_view name)
{
    if (name == "gaussian") {
        return LatentKind::gaussian;
    }
    if (name == "blocks") {
        return LatentKind::blocks;
    }
    if (name == "gradient") {
        return LatentKind::gradient;
    }
    throw std::invalid_argument("unknown latent kind '" + std::string(name) + "' (gaussian, blocks, gradient)");
}

std::string_view to_string(LatentKind kind)
{
    switch (kind) {
        case LatentKind::gaussian: return "gaussian";
        case LatentKind::blocks: return "blocks";
        case LatentKind::gradient: return "gradient";
    }
    return "?";
}

Latent generate_synthetic_latent(std::uint64_t seed, LatentKind kind, Shape shape)
{
    std::mt19937_64 rng(seed);
    Latent z(shape);
    switch (kind) {
        case LatentKind::gaussian: {
            std::normal_distribution<double> normal(0.0, 1.0);
            for (double& v : z.values()) {
                v = normal(rng);
            }
            break;
        }
        case LatentKind::blocks: {
            constexpr std::size_t grid = 4;
            std::uniform_real_distribution<double> level(-1.5, 1.5);
            for (std::size_t c = 0; c < shape.channels; ++c) {
                std::array<double, grid * grid> levels{};
                for (std::size_t i = 0; i < levels.size(); ++i) {
                    // Alternate signs so neighbouring regions always differ.
                    const double mag = 0.25 + std::abs(level(rng));
                    levels[i] = ((i / grid + i % grid) % 2 == 0) ? mag : -mag;
                }
                for (std::size_t y = 0; y < shape.height; ++y) {
                    for (std::size_t x = 0; x < shape.width; ++x) {
                        z.at(c, y, x) = levels[(y * grid / shape.height) * grid + (x * grid / shape.width)];
                    }
                }
            }
            break;
        }
        case LatentKind::gradient: {
            std::uniform_real_distribution<double> coef(-1.0, 1.0);
            const double hy = shape.height > 1 ? static_cast<double>(shape.height - 1) : 1.0;
            const double wx = shape.width > 1 ? static_cast<double>(shape.width - 1) : 1.0;
            for (std::size_t c = 0; c < shape.channels; ++c) {
                const double a = 2.0 * coef(rng);
                const double b = 2.0 * coef(rng);
                const double offset = coef(rng);
                for (std::size_t y = 0; y < shape.height; ++y) {
                    for (std::size_t x = 0; x < shape.width; ++x) {
                        z.at(c, y, x) = offset + a * (static_cast<double>(y) / hy - 0.5) +
                                        b * (static_cast<double>(x) / wx - 0.5);
                    }
                }
            }
            break;
        }
    }
    return z;
}

PromptType parse_prompt_type(std::string_view name)
{
    if (name == "empty") {
        return PromptType::empty;
    }
    if (name == "non-empty" || name == "nonempty") {
        return PromptType::non_empty;
    }
    throw std::invalid_argument("unknown prompt type '" + std::string(name) + "' (empty, non-empty)");
}

std::string_view to_string(PromptType type)
{
    return type == PromptType::empty ? "empty" : "non-empty";
}

LayerRange parse_layer_range(std::string_view text, int layer_count)
{
    LayerRange r;
    if (text.empty() || text == "all") {
        r = LayerRange::all(layer_count);
    } else if (text == "none") {
        r = LayerRange::none();
    } else if (const auto colon = text.find(':'); colon != std::string_view::npos) {
        r.start = to_int(text.substr(0, colon), "layer range start");
        r.end = to_int(text.substr(colon + 1), "layer range end");
        if (r.start > r.end) {
            throw std::invalid_argument("layer range '" + std::string(text) + "' is reversed");
        }
    } else {
        r.start = to_int(text, "layer index");
        r.end = r.start + 1;
    }
    r.validate(layer_count);
    return r;
}

std::string to_string(LayerRange range)
{
    return std::to_string(range.start) + ":" + std::to_string(range.end);
}

MaskFile parse_mask_spec(std::string_view spec, const Shape& shape)
{
    constexpr std::string_view box = "box:";
    if (spec.starts_with(box)) {
        std::vector<std::size_t> v;
        std::string_view rest = spec.substr(box.size());
        while (!rest.empty()) {
            const auto comma = rest.find(',');
            const int n = to_int(rest.substr(0, comma), "mask box coordinate");
            if (n < 0) {
                throw std::invalid_argument("mask box coordinates must be non-negative");
            }
            v.push_back(static_cast<std::size_t>(n));
            rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        }
        if (v.size() != 4) {
            throw std::invalid_argument("mask box needs four coordinates: box:y0,x0,y1,x1");
        }
        return MaskFile{{}, EditMask::box(shape.height, shape.width, v[0], v[1], v[2], v[3])};
    }
    MaskFile file = load_mask_file(std::filesystem::path(std::string(spec)));
    file.fallback.validate(shape);
    for (const auto& [t, m] : file.scheduled) {
        m.validate(shape);
    }
    return file;
}

void ExperimentConfig::validate() const
{
    if (methods.empty()) {
        throw std::invalid_argument("at least one method is required");
    }
    if (seeds.empty()) {
        throw std::invalid_argument("the seed list must not be empty");
    }
    if (sampling_guidances.empty()) {
        throw std::invalid_argument("at least one sampling guidance scale is required");
    }
    for (double w : sampling_guidances) {
        if (!std::isfinite(w)) {
            throw std::invalid_argument("guidance scales must be finite");
        }
    }
    for (double w : inversion_guidances) {
        if (!std::isfinite(w)) {
            throw std::invalid_argument("guidance scales must be finite");
        }
    }
    if (steps < 1) {
        throw std::invalid_argument("steps must be at least 1");
    }
    if (prompts.empty()) {
        throw std::invalid_argument("at least one prompt is required");
    }
    if (prompt_types.empty()) {
        throw std::invalid_argument("at least one prompt type is required");
    }
    if (jobs < 1) {
        throw std::invalid_argument("jobs must be at least 1");
    }
    parse_layer_range(layers, denoiser.layer_count);
}

std::vector<SweepAggregate> SweepReport::aggregate() const
{
    std::vector<SweepAggregate> out;
    std::map<std::tuple<int, std::string, double, double, int>, std::size_t> index;
    for (const SweepRow& r : rows) {
        const auto key = std::make_tuple(static_cast<int>(r.method), r.mode, r.inversion_guidance,
                                         r.sampling_guidance, static_cast<int>(r.prompt_type));
        auto [it, inserted] = index.try_emplace(key, out.size());
        if (inserted) {
            SweepAggregate a;
            a.method = r.method;
            a.mode = r.mode;
            a.inversion_guidance = r.inversion_guidance;
            a.sampling_guidance = r.sampling_guidance;
            a.prompt_type = r.prompt_type;
            out.push_back(a);
        }
        SweepAggregate& a = out[it->second];
        ++a.cases;
        if (!r.ok()) {
            ++a.failures;
            continue;
        }
        a.mean_latent_loss += r.metrics.latent_loss;
        a.mean_psnr += r.metrics.psnr;
        a.mean_ssim += r.metrics.ssim;
        a.mean_sampling_ms += r.sampling_ms;
    }
    for (SweepAggregate& a : out) {
        const std::size_t n = a.cases - a.failures;
        if (n == 0) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            a.mean_latent_loss = a.mean_psnr = a.mean_ssim = a.mean_sampling_ms = nan;
            continue;
        }
        const double dn = static_cast<double>(n);
        a.mean_latent_loss /= dn;
        a.mean_psnr /= dn;
        a.mean_ssim /= dn;
        a.mean_sampling_ms /= dn;
    }
    return out;
}

SweepReport run_sweep(const ExperimentConfig& config)
{
    return sweep_methods(config, config.methods);
}

SweepReport run_ablation_v_only(const ExperimentConfig& config)
{
    const std::vector<Method> methods{Method::direct, Method::fec_kv_reuse, Method::fec_v_reuse};
    SweepReport report = sweep_methods(config, methods);

    config.validate();
    const NoiseSchedule sched = build_schedule(config.schedule);
    EditSettings settings{timestep_plan(config.steps, sched.train_steps())};
    settings.embedder.seed = config.embedder_seed;
    settings.aligned_capture = config.aligned_capture;
    settings.compare_with_reconstruction = false;
    const auto grid = guidance_grid(config);

    std::vector<std::pair<std::uint64_t, std::pair<double, double>>> cells;
    for (const auto& g : grid) {
        for (std::uint64_t s : config.seeds) {
            cells.emplace_back(s, g);
        }
    }
    std::vector<SweepRow> edits(cells.size());
    parallel_for(cells.size(), config.jobs, [&](std::size_t i) {
        const auto& [seed, g] = cells[i];
        const Case c = make_case(config, seed, PromptType::non_empty);
        SweepRow& row = edits[i];
        row.method = Method::fec_v_reuse;
        row.mode = "edit";
        row.inversion_guidance = g.first;
        row.sampling_guidance = g.second;
        row.seed = seed;
        row.prompt = c.edit_prompt;
        row.note = "mechanism-only";
        try {
            EditRequest req;
            req.source_prompt = c.prompt;
            req.edit_prompt = c.edit_prompt;
            req.method = Method::fec_v_reuse;
            req.layers = parse_layer_range(config.layers, c.net.layer_count());
            req.guidance = g.second;
            req.inversion_guidance = g.first;
            CallLedger ledger;
            EditSettings s = settings;
            s.ledger = &ledger;
            const auto start = Clock::now();
            const EditOutcome out = run_edit(c.net, sched, req, c.z0, s);
            row.sampling_ms = elapsed_ms(start);
            row.network_calls = ledger.total();
            row.metrics = evaluate_reconstruction(c.z0, out.output);
            row.metrics.per_step_losses = out.report.per_step_losses;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
    });
    for (auto& r : edits) {
        report.rows.push_back(std::move(r));
    }
    return report;
}

bool BatchInvarianceReport::passed() const
{
    return !checks.empty() &&
           std::all_of(checks.begin(), checks.end(), [](const InvarianceCheck& c) { return c.identical; });
}

BatchInvarianceReport check_batch_invariance(const ExperimentConfig& config)
{
    config.validate();
    const NoiseSchedule sched = build_schedule(config.schedule);
    const TimestepPlan plan = timestep_plan(config.steps, sched.train_steps());
    BatchInvarianceReport report;

    auto compare = [&](std::string name, const Latent& a, const Latent& b) {
        InvarianceCheck c{std::move(name), max_abs_diff(a, b), a == b};
        report.checks.push_back(std::move(c));
    };

    const std::uint64_t seed = config.seeds.front();
    const Case c = make_case(config, seed, PromptType::non_empty);
    const EmbedderConfig emb{.seed = config.embedder_seed};
    const PromptEmbedding cond = embed_prompt(c.prompt, emb);
    const PromptEmbedding null = embed_prompt("", emb);
    const Timestep t_mid = plan.steps() > 0 ? plan[plan.steps() / 2] : 1;

    {
        const Latent single = c.net.predict(c.z0, t_mid, cond);
        const std::array<BatchItem, 2> items{BatchItem{&c.z0, &cond}, BatchItem{&c.z0, &cond}};
        const auto rows = c.net.predict_batch(items, t_mid);
        compare("forward batch[0] vs single", rows[0], single);
        compare("forward batch[1] vs single", rows[1], single);
    }
    {
        const Latent other = generate_synthetic_latent(config.data_seed + seed + 1, config.latent_kind, c.z0.shape());
        const std::array<BatchItem, 2> items{BatchItem{&c.z0, &null}, BatchItem{&other, &cond}};
        const auto rows = c.net.predict_batch(items, t_mid);
        compare("mixed batch row 0 vs single", rows[0], c.net.predict(c.z0, t_mid, null));
        compare("mixed batch row 1 vs single", rows[1], c.net.predict(other, t_mid, cond));
    }

    const double w = config.sampling_guidances.front();
    const GuidanceContext ctx{w, cond, null};
    const LayerRange layers = parse_layer_range(config.layers, c.net.layer_count());
    auto session = [&](bool batched) {
        InversionOptions io;
        io.capture_kv = true;
        io.aligned_capture = config.aligned_capture;
        io.batch_branches = batched;
        InversionResult inv = invert(c.net, c.z0, ctx, plan, sched, io);
        SamplerOptions so;
        so.batch_branches = batched;
        SampleResult direct = sample_direct(c.net, inv.trajectory.start(), ctx, plan, sched, so);
        SampleResult kv = sample_fec_kv_reuse(c.net, inv.trajectory.start(), *inv.kv, ctx, plan, sched, layers,
                                              InjectMode::key_value, so);
        return std::make_tuple(std::move(inv), std::move(direct), std::move(kv));
    };
    const auto [inv_b, direct_b, kv_b] = session(true);
    const auto [inv_s, direct_s, kv_s] = session(false);

    compare("inversion z_T batched vs sequential", inv_b.trajectory.start(), inv_s.trajectory.start());
    double traj_diff = 0.0;
    bool traj_same = true;
    for (const auto& [t, z] : inv_b.trajectory.latents) {
        const Latent& other = inv_s.trajectory.at(t);
        traj_diff = std::max(traj_diff, max_abs_diff(z, other));
        traj_same = traj_same && z == other;
    }
    report.checks.push_back({"inversion trajectory batched vs sequential", traj_diff, traj_same});
    report.checks.push_back({"kv cache batched vs sequential", 0.0, *inv_b.kv == *inv_s.kv});
    compare("direct reconstruction batched vs sequential", direct_b.final, direct_s.final);
    compare("kv-reuse reconstruction batched vs sequential", kv_b.final, kv_s.final);
    return report;
}

bool TimingReport::accounting_holds() const
{
    return kv_edit_calls == 2LL * steps && kv_reconstruction_calls == 0 && direct_paired_calls == 2 * kv_edit_calls;
}

TimingReport report_timing(const ExperimentConfig& config)
{
    config.validate();
    const NoiseSchedule sched = build_schedule(config.schedule);
    const TimestepPlan plan = timestep_plan(config.steps, sched.train_steps());
    const std::uint64_t seed = config.seeds.front();
    const Case c = make_case(config, seed, PromptType::non_empty);
    const EmbedderConfig emb{.seed = config.embedder_seed};
    const double w = config.sampling_guidances.front();
    const double wi = config.inversion_guidances.empty() ? w : config.inversion_guidances.front();

    TimingReport report;
    report.steps = static_cast<int>(plan.steps());

    auto edit_phase = [](const CallLedger& l) {
        return l.count(route::edit) + l.count(route::reconstruction) + l.count(route::sampling);
    };

    {
        CallLedger ledger;
        const auto start = Clock::now();
        InversionOptions io;
        io.ledger = &ledger;
        const PromptEmbedding src = embed_prompt(c.prompt, emb);
        const PromptEmbedding dst = embed_prompt(c.edit_prompt, emb);
        const PromptEmbedding null = embed_prompt("", emb);
        const InversionResult inv = invert(c.net, c.z0, GuidanceContext{wi, src, null}, plan, sched, io);
        SamplerOptions edit_opts;
        edit_opts.ledger = &ledger;
        edit_opts.route = std::string(route::edit);
        SamplerOptions recon_opts = edit_opts;
        recon_opts.route = std::string(route::reconstruction);
        sample_direct(c.net, inv.trajectory.start(), GuidanceContext{w, dst, null}, plan, sched, edit_opts);
        sample_direct(c.net, inv.trajectory.start(), GuidanceContext{w, src, null}, plan, sched, recon_opts);
        TimingRow row{"direct+reconstruction", elapsed_ms(start), ledger.counts(), edit_phase(ledger)};
        report.direct_paired_calls = row.edit_phase_calls;
        report.rows.push_back(std::move(row));
    }

    for (Method m : {Method::fec_ref, Method::fec_noise, Method::fec_kv_reuse}) {
        EditRequest req;
        req.source_prompt = c.prompt;
        req.edit_prompt = c.edit_prompt;
        req.method = m;
        req.guidance = w;
        req.inversion_guidance = wi;
        req.layers = parse_layer_range(config.layers, c.net.layer_count());
        if (m == Method::fec_noise) {
            req.mask = config.mask_spec ? parse_mask_spec(*config.mask_spec, c.z0.shape()).fallback
                                        : EditMask::box(c.z0.shape().height, c.z0.shape().width, 0, 0,
                                                        c.z0.shape().height / 2, c.z0.shape().width / 2);
        }
        CallLedger ledger;
        EditSettings settings{plan};
        settings.embedder = emb;
        settings.aligned_capture = config.aligned_capture;
        settings.compare_with_reconstruction = false;
        settings.ledger = &ledger;
        const auto start = Clock::now();
        run_edit(c.net, sched, req, c.z0, settings);
        TimingRow row{std::string(to_string(m)), elapsed_ms(start), ledger.counts(), edit_phase(ledger)};
        if (m == Method::fec_kv_reuse) {
            report.kv_edit_calls = ledger.count(route::edit);
            report.kv_reconstruction_calls = ledger.count(route::reconstruction);
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

void write_csv(std::ostream& out, const SweepReport& report)
{
    out << "method,mode,inversion_guidance,sampling_guidance,prompt_type,seed,prompt,latent_loss,psnr,ssim,"
           "inversion_ms,sampling_ms,network_calls,error,note\n";
    for (const SweepRow& r : report.rows) {
        out << to_string(r.method) << ',' << r.mode << ',' << format_metric(r.inversion_guidance) << ','
            << format_metric(r.sampling_guidance) << ',' << to_string(r.prompt_type) << ',' << r.seed << ','
            << csv_field(r.prompt) << ',' << format_metric(r.metrics.latent_loss) << ','
            << format_metric(r.metrics.psnr) << ',' << format_metric(r.metrics.ssim) << ','
            << format_metric(r.inversion_ms) << ',' << format_metric(r.sampling_ms) << ',' << r.network_calls
            << ',' << csv_field(r.error) << ',' << csv_field(r.note) << '\n';
    }
}

void write_aggregate_csv(std::ostream& out, const SweepReport& report)
{
    out << "method,mode,inversion_guidance,sampling_guidance,prompt_type,cases,failures,mean_latent_loss,"
           "mean_psnr,mean_ssim,mean_sampling_ms\n";
    for (const SweepAggregate& a : report.aggregate()) {
        out << to_string(a.method) << ',' << a.mode << ',' << format_metric(a.inversion_guidance) << ','
            << format_metric(a.sampling_guidance) << ',' << to_string(a.prompt_type) << ',' << a.cases << ','
            << a.failures << ',' << format_metric(a.mean_latent_loss) << ',' << format_metric(a.mean_psnr) << ','
            << format_metric(a.mean_ssim) << ',' << format_metric(a.mean_sampling_ms) << '\n';
    }
}

std::string to_json(const SweepReport& report, int indent)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const SweepRow& r : report.rows) {
        rows.push_back(row_json(r));
    }
    nlohmann::json aggs = nlohmann::json::array();
    for (const SweepAggregate& a : report.aggregate()) {
        aggs.push_back({{"method", std::string(to_string(a.method))},
                        {"mode", a.mode},
                        {"inversion_guidance", a.inversion_guidance},
                        {"sampling_guidance", a.sampling_guidance},
                        {"prompt_type", std::string(to_string(a.prompt_type))},
                        {"cases", a.cases},
                        {"failures", a.failures},
                        {"mean_latent_loss", metric_json(a.mean_latent_loss)},
                        {"mean_psnr", metric_json(a.mean_psnr)},
                        {"mean_ssim", metric_json(a.mean_ssim)},
                        {"mean_sampling_ms", metric_json(a.mean_sampling_ms)}});
    }
    return nlohmann::json{{"rows", rows}, {"aggregates", aggs}}.dump(indent);
}

std::string to_json(const BatchInvarianceReport& report, int indent)
{
    nlohmann::json checks = nlohmann::json::array();
    for (const InvarianceCheck& c : report.checks) {
        checks.push_back({{"name", c.name}, {"max_abs_diff", c.max_abs_diff}, {"identical", c.identical}});
    }
    return nlohmann::json{{"passed", report.passed()},
                          {"reference_threshold", report.reference_threshold},
                          {"checks", checks}}
        .dump(indent);
}

std::string to_json(const TimingReport& report, int indent)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const TimingRow& r : report.rows) {
        nlohmann::json calls = nlohmann::json::object();
        for (const auto& [k, v] : r.calls) {
            calls[k] = v;
        }
        rows.push_back(
            {{"method", r.method}, {"wall_ms", r.wall_ms}, {"calls", calls}, {"edit_phase_calls", r.edit_phase_calls}});
    }
    return nlohmann::json{{"steps", report.steps},
                          {"rows", rows},
                          {"kv_edit_calls", report.kv_edit_calls},
                          {"kv_reconstruction_calls", report.kv_reconstruction_calls},
                          {"direct_paired_calls", report.direct_paired_calls},
                          {"accounting_holds", report.accounting_holds()}}
        .dump(indent);
}

void emit_report(const ExperimentConfig& config, const SweepReport& report)
{
    if (config.csv_out) {
        std::ofstream rows(*config.csv_out);
        if (!rows) {
            throw std::runtime_error("cannot write " + config.csv_out->string());
        }
        write_csv(rows, report);
        std::filesystem::path agg = *config.csv_out;
        agg.replace_extension(".agg.csv");
        std::ofstream aggs(agg);
        if (!aggs) {
            throw std::runtime_error("cannot write " + agg.string());
        }
        write_aggregate_csv(aggs, report);
    }
    if (config.json_out) {
        std::ofstream json(*config.json_out);
        if (!json) {
            throw std::runtime_error("cannot write " + config.json_out->string());
        }
        json << to_json(report) << '\n';
    }
}

}  // namespace fec
