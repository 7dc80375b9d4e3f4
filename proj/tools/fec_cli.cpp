// Command-line front end: inversion, reconstruction and editing of single latents, plus the
// experiment sweeps. Every option can also be set from an INI-style config file (--config).

#include "fec/editing.hpp"
#include "fec/harness.hpp"
#include "fec/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace fec;

struct Options {
    std::vector<std::string> methods;
    std::vector<double> guidance{7.5};
    std::vector<double> inv_guidance;
    int steps = 50;
    std::vector<std::uint64_t> seeds{0};
    std::vector<std::string> prompts;
    std::vector<std::string> edit_prompts;
    std::string blend_word;
    std::string mask;
    std::string layers = "all";
    int precision = 64;
    std::string out;

    std::string input;
    std::string trajectory;
    std::string kv;
    std::string kv_out;
    std::string latent_kind = "gaussian";
    std::vector<std::string> prompt_types{"non-empty"};
    int jobs = 1;
    std::uint64_t denoiser_seed = 0;
    std::uint64_t data_seed = 1000;
    std::uint64_t embedder_seed = 0;
    std::string schedule = "scaled-linear";
    int train_steps = 1000;
    double beta_start = -1.0;
    double beta_end = -1.0;
    double beta = 0.0;
    std::string attention_scale = "sqrt";
    bool single_pass_capture = false;
    double input_gain = DenoiserConfig{}.input_gain;
    double cross_attention_gain = DenoiserConfig{}.cross_attention_gain;
};

void add_shared_options(CLI::App& cmd, Options& o)
{
    cmd.add_option("--method", o.methods,
                   "direct, neg-prompt, fec-ref, fec-noise, fec-kv-reuse, fec-v-reuse (sweep accepts several)");
    cmd.add_option("--guidance", o.guidance, "Sampling guidance scale(s)")->capture_default_str();
    cmd.add_option("--inv-guidance", o.inv_guidance, "Inversion guidance scale(s); defaults to --guidance");
    cmd.add_option("--steps", o.steps, "Sampling steps")->capture_default_str()->check(CLI::PositiveNumber);
    cmd.add_option("--seed", o.seeds, "Case seed(s)")->capture_default_str();
    cmd.add_option("--prompt", o.prompts, "Source prompt(s)");
    cmd.add_option("--edit-prompt", o.edit_prompts, "Edit prompt(s)");
    cmd.add_option("--blend-word", o.blend_word, "Edit-prompt word whose cross-attention defines the mask");
    cmd.add_option("--mask", o.mask, "FECMASK1 file or box:y0,x0,y1,x1");
    cmd.add_option("--layers", o.layers, "Injected layers: all, none, a:b or a single index")->capture_default_str();
    cmd.add_option("--precision", o.precision, "Float width of written files")
        ->check(CLI::IsMember({32, 64}))
        ->capture_default_str();
    cmd.add_option("--out", o.out, "Output path (file, or prefix for sweep reports)");

    cmd.add_option("--input", o.input, "Source latent as a FECTRAJ1 file (its t = 0 record)");
    cmd.add_option("--latent-kind", o.latent_kind, "Synthetic source: gaussian, blocks, gradient")
        ->capture_default_str();
    cmd.add_option("--denoiser-seed", o.denoiser_seed, "Offset added to the case seed for network weights")
        ->capture_default_str();
    cmd.add_option("--data-seed", o.data_seed, "Offset added to the case seed for synthetic latents")
        ->capture_default_str();
    cmd.add_option("--embedder-seed", o.embedder_seed, "Prompt embedder seed")->capture_default_str();
    cmd.add_option("--schedule", o.schedule, "linear, scaled-linear or constant")->capture_default_str();
    cmd.add_option("--train-steps", o.train_steps, "Training timesteps T")->capture_default_str();
    cmd.add_option("--beta-start", o.beta_start, "First beta (default depends on the schedule)");
    cmd.add_option("--beta-end", o.beta_end, "Last beta (default depends on the schedule)");
    cmd.add_option("--beta", o.beta, "Beta of the constant schedule")->capture_default_str();
    cmd.add_option("--attention-scale", o.attention_scale, "Softmax scale: sqrt (1/sqrt(d)) or linear (1/d)")
        ->check(CLI::IsMember({"sqrt", "linear"}))
        ->capture_default_str();
    cmd.add_option("--input-gain", o.input_gain, "Weight scale of the denoiser's patch embedding")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd.add_option("--cross-attention-gain", o.cross_attention_gain,
                   "Weight scale of the denoiser's cross-attention output")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    cmd.add_flag("--single-pass-capture", o.single_pass_capture,
                 "Record K/V from the inversion update itself instead of an extra aligned evaluation");
    cmd.add_option("--jobs", o.jobs, "Worker threads for sweeps")->capture_default_str()->check(CLI::PositiveNumber);
}

ExperimentConfig to_config(const Options& o)
{
    ExperimentConfig c;
    if (!o.methods.empty()) {
        c.methods.clear();
        for (const auto& m : o.methods) {
            c.methods.push_back(parse_method(m));
        }
    }
    c.sampling_guidances = o.guidance;
    c.inversion_guidances = o.inv_guidance;
    c.steps = o.steps;
    c.seeds = o.seeds;
    c.denoiser_seed = o.denoiser_seed;
    c.data_seed = o.data_seed;
    c.embedder_seed = o.embedder_seed;
    if (!o.prompts.empty()) {
        c.prompts = o.prompts;
    }
    if (!o.edit_prompts.empty()) {
        c.edit_prompts = o.edit_prompts;
    }
    c.prompt_types.clear();
    for (const auto& t : o.prompt_types) {
        c.prompt_types.push_back(parse_prompt_type(t));
    }
    if (!o.blend_word.empty()) {
        c.blend_word = o.blend_word;
    }
    if (!o.mask.empty()) {
        c.mask_spec = o.mask;
    }
    c.latent_kind = parse_latent_kind(o.latent_kind);
    c.layers = o.layers;
    c.aligned_capture = !o.single_pass_capture;
    c.denoiser.attention_scale =
        o.attention_scale == "linear" ? AttentionScale::inv_head_dim : AttentionScale::inv_sqrt_head_dim;
    c.denoiser.input_gain = o.input_gain;
    c.denoiser.cross_attention_gain = o.cross_attention_gain;
    c.schedule.kind = parse_schedule_kind(o.schedule);
    c.schedule.train_steps = o.train_steps;
    if (c.schedule.kind == ScheduleKind::linear_beta) {
        c.schedule.beta_start = 1e-4;
        c.schedule.beta_end = 0.02;
    }
    if (o.beta_start >= 0.0) {
        c.schedule.beta_start = o.beta_start;
    }
    if (o.beta_end >= 0.0) {
        c.schedule.beta_end = o.beta_end;
    }
    c.schedule.beta = o.beta;
    c.precision = parse_precision(o.precision);
    c.jobs = o.jobs;
    if (!o.out.empty()) {
        c.csv_out = o.out + ".csv";
        c.json_out = o.out + ".json";
    }
    c.validate();
    return c;
}

Method single_method(const Options& o, Method fallback)
{
    if (o.methods.size() > 1) {
        throw std::invalid_argument("this command takes a single --method");
    }
    return o.methods.empty() ? fallback : parse_method(o.methods.front());
}

double inversion_scale(const Options& o)
{
    return o.inv_guidance.empty() ? o.guidance.front() : o.inv_guidance.front();
}

Latent source_latent(const Options& o, const ExperimentConfig& c)
{
    if (!o.input.empty()) {
        return load_trajectory(o.input).source();
    }
    return make_source_latent(c, c.seeds.front());
}

void write_text(const std::string& path, const std::string& text)
{
    if (path.empty()) {
        return;
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << text << '\n';
}

void save_latent(const std::string& path, const Latent& z, FloatWidth width)
{
    Trajectory t;
    t.latents.emplace(0, z);
    save_trajectory(path, t, width);
}

nlohmann::json metrics_json(const MetricsReport& m)
{
    auto num = [](double v) -> nlohmann::json {
        if (std::isfinite(v)) {
            return v;
        }
        return format_metric(v);
    };
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [t, loss] : m.per_step_losses) {
        curve.push_back({t, loss});
    }
    return {{"latent_loss", num(m.latent_loss)},
            {"psnr", num(m.psnr)},
            {"ssim", num(m.ssim)},
            {"per_step_losses", curve}};
}

int cmd_invert(const Options& o)
{
    const ExperimentConfig c = to_config(o);
    const std::uint64_t seed = c.seeds.front();
    const ToyDenoiser net = make_denoiser(c, seed);
    const NoiseSchedule sched = build_schedule(c.schedule);
    const TimestepPlan plan = timestep_plan(c.steps, sched.train_steps());
    const Latent z0 = source_latent(o, c);
    const EmbedderConfig emb{.seed = c.embedder_seed};

    InversionOptions io;
    io.capture_kv = !o.kv_out.empty();
    io.aligned_capture = c.aligned_capture;
    io.seed = seed;
    CallLedger ledger;
    io.ledger = &ledger;
    const GuidanceContext ctx{inversion_scale(o), embed_prompt(c.prompts.front(), emb), embed_prompt("", emb)};
    const InversionResult inv = invert(net, z0, ctx, plan, sched, io);

    if (!o.out.empty()) {
        save_trajectory(o.out, inv.trajectory, c.precision);
    }
    if (!o.kv_out.empty()) {
        save_kv_cache(o.kv_out, *inv.kv, c.precision);
    }
    nlohmann::json summary{{"steps", plan.steps()},
                           {"guidance", ctx.scale},
                           {"seed", seed},
                           {"network_calls", ledger.total()},
                           {"kv_entries", inv.kv ? inv.kv->entry_count() : 0}};
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_reconstruct(const Options& o)
{
    const ExperimentConfig c = to_config(o);
    const Method method = single_method(o, Method::fec_noise);
    const NoiseSchedule sched = build_schedule(c.schedule);
    const TimestepPlan plan = timestep_plan(c.steps, sched.train_steps());
    const EmbedderConfig emb{.seed = c.embedder_seed};
    const PromptEmbedding cond = embed_prompt(c.prompts.front(), emb);
    const PromptEmbedding null = embed_prompt("", emb);

    InversionResult inv;
    std::uint64_t seed = c.seeds.front();
    if (!o.trajectory.empty()) {
        inv.trajectory = load_trajectory(o.trajectory);
        inv.trajectory.require_covers(plan);
        seed = inv.trajectory.seed;
        if (!o.kv.empty()) {
            inv.kv = load_kv_cache(o.kv);
        } else if (needs_kv_cache(method)) {
            throw std::invalid_argument(std::string(to_string(method)) + " needs --kv alongside --trajectory");
        }
    }
    const ToyDenoiser net = make_denoiser(c, seed);
    if (o.trajectory.empty()) {
        InversionOptions io;
        io.capture_kv = needs_kv_cache(method);
        io.aligned_capture = c.aligned_capture;
        io.seed = seed;
        inv = invert(net, source_latent(o, c), GuidanceContext{inversion_scale(o), cond, null}, plan, sched, io);
    }

    CallLedger ledger;
    SamplerOptions so;
    so.ledger = &ledger;
    so.route = std::string(route::reconstruction);
    const SampleResult out = reconstruct(net, method, inv, GuidanceContext{o.guidance.front(), cond, null}, plan,
                                         sched, parse_layer_range(c.layers, net.layer_count()), so);
    const Latent& z0 = inv.trajectory.source();
    const MetricsReport m = evaluate_reconstruction(z0, out.final, &out.path, &inv.trajectory);
    if (!o.out.empty()) {
        save_latent(o.out, out.final, c.precision);
    }
    nlohmann::json summary{{"method", std::string(to_string(method))},
                           {"guidance", o.guidance.front()},
                           {"inversion_guidance", inv.trajectory.guidance},
                           {"seed", seed},
                           {"network_calls", ledger.total()},
                           {"metrics", metrics_json(m)}};
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_edit(const Options& o)
{
    const ExperimentConfig c = to_config(o);
    const std::uint64_t seed = c.seeds.front();
    const ToyDenoiser net = make_denoiser(c, seed);
    const NoiseSchedule sched = build_schedule(c.schedule);
    const Latent z0 = source_latent(o, c);

    EditRequest req;
    req.source_prompt = c.prompts.front();
    req.edit_prompt = c.edit_prompts.front();
    req.method = single_method(o, Method::fec_noise);
    req.layers = parse_layer_range(c.layers, net.layer_count());
    req.guidance = o.guidance.front();
    req.inversion_guidance = inversion_scale(o);
    if (c.blend_word) {
        req.blend_word = c.blend_word;
    }
    if (c.mask_spec) {
        const MaskFile masks = parse_mask_spec(*c.mask_spec, z0.shape());
        if (!masks.scheduled.empty()) {
            throw std::invalid_argument("edit takes a single fixed mask; per-step mask files are not supported here");
        }
        req.mask = masks.fallback;
    }

    CallLedger ledger;
    EditSettings settings{timestep_plan(c.steps, sched.train_steps())};
    settings.embedder.seed = c.embedder_seed;
    settings.aligned_capture = c.aligned_capture;
    settings.ledger = &ledger;
    const EditOutcome outcome = run_edit(net, sched, req, z0, settings);
    if (!o.out.empty()) {
        save_latent(o.out, outcome.output, c.precision);
    }

    nlohmann::json calls = nlohmann::json::object();
    for (const auto& [k, v] : ledger.counts()) {
        calls[k] = v;
    }
    nlohmann::json report{{"method", std::string(to_string(req.method))},
                          {"source_prompt", req.source_prompt},
                          {"edit_prompt", req.edit_prompt},
                          {"mask_degenerate", outcome.report.mask_degenerate},
                          {"calls", calls},
                          {"source_metrics", metrics_json(evaluate_reconstruction(z0, outcome.output))}};
    if (outcome.report.outside_max_abs_diff) {
        report["outside_max_abs_diff"] = *outcome.report.outside_max_abs_diff;
    }
    if (outcome.report.inside_mse) {
        report["inside_mse"] = *outcome.report.inside_mse;
    }
    std::cout << report.dump(2) << '\n';
    return 0;
}

int cmd_sweep(const Options& o, bool ablation)
{
    const ExperimentConfig c = to_config(o);
    const SweepReport report = ablation ? run_ablation_v_only(c) : run_sweep(c);
    emit_report(c, report);
    write_aggregate_csv(std::cout, report);
    const bool any_failure =
        std::any_of(report.rows.begin(), report.rows.end(), [](const SweepRow& r) { return !r.ok(); });
    if (any_failure) {
        std::cerr << "some cells failed; see the error column\n";
    }
    return 0;
}

int cmd_check_batch(const Options& o)
{
    const BatchInvarianceReport report = check_batch_invariance(to_config(o));
    const std::string json = to_json(report);
    write_text(o.out, json);
    std::cout << json << '\n';
    return report.passed() ? 0 : 1;
}

int cmd_timing(const Options& o)
{
    const TimingReport report = report_timing(to_config(o));
    const std::string json = to_json(report);
    write_text(o.out, json);
    std::cout << json << '\n';
    return report.accounting_holds() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Exact-reconstruction inversion and editing on toy diffusion latents"};
    app.set_config("--config", "", "INI config file; [section] names select subcommands");
    app.require_subcommand(1);

    Options opts;
    struct Command {
        const char* name;
        const char* help;
    };
    const Command commands[] = {
        {"invert", "Invert a latent and write its trajectory (and optionally its K/V cache)"},
        {"reconstruct", "Reconstruct a latent with one method and report metrics"},
        {"edit", "Edit a latent with a second prompt"},
        {"sweep", "Method x guidance x prompt-type reconstruction sweep"},
        {"ablate", "K/V versus V-only reuse ablation"},
        {"check-batch", "Compare batched and sequential evaluation bit for bit"},
        {"timing", "Wall-clock time and network-call accounting per editing method"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& cmd : commands) {
        CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
        add_shared_options(*sub, opts);
        subs[cmd.name] = sub;
    }
    subs["invert"]->add_option("--kv-out", opts.kv_out, "Also capture and write the K/V cache (FECKV1)");
    subs["reconstruct"]->add_option("--trajectory", opts.trajectory, "Reuse an inversion trajectory (FECTRAJ1)");
    subs["reconstruct"]->add_option("--kv", opts.kv, "K/V cache for the kv methods (FECKV1)");
    for (const char* name : {"sweep", "ablate"}) {
        subs[name]
            ->add_option("--prompt-types", opts.prompt_types, "empty and/or non-empty")
            ->capture_default_str();
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (subs["invert"]->parsed()) {
            return cmd_invert(opts);
        }
        if (subs["reconstruct"]->parsed()) {
            return cmd_reconstruct(opts);
        }
        if (subs["edit"]->parsed()) {
            return cmd_edit(opts);
        }
        if (subs["sweep"]->parsed()) {
            return cmd_sweep(opts, false);
        }
        if (subs["ablate"]->parsed()) {
            return cmd_sweep(opts, true);
        }
        if (subs["check-batch"]->parsed()) {
            return cmd_check_batch(opts);
        }
        if (subs["timing"]->parsed()) {
            return cmd_timing(opts);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
