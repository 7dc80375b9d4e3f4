#include "fec/sampling.hpp"

#include <cmath>
#include <string>

namespace fec {

void GuidanceContext::validate() const
{
    if (!std::isfinite(scale)) {
        throw std::invalid_argument("guidance scale must be finite");
    }
    if (cond.tokens.rows != uncond.tokens.rows || cond.tokens.cols != uncond.tokens.cols) {
        throw std::invalid_argument("conditional and unconditional embeddings differ in shape");
    }
}

void CallLedger::add(std::string_view route, long long n)
{
    auto it = counts_.find(route);
    if (it == counts_.end()) {
        it = counts_.emplace(std::string(route), 0).first;
    }
    it->second += n;
}

long long CallLedger::count(std::string_view route) const
{
    const auto it = counts_.find(route);
    return it == counts_.end() ? 0 : it->second;
}

long long CallLedger::total() const
{
    long long sum = 0;
    for (const auto& [name, n] : counts_) {
        sum += n;
    }
    return sum;
}

const Latent& Trajectory::at(Timestep t) const
{
    const auto it = latents.find(t);
    if (it == latents.end()) {
        throw std::out_of_range("trajectory has no latent at t=" + std::to_string(t));
    }
    return it->second;
}

const Latent& Trajectory::start() const
{
    return timesteps.empty() ? source() : at(timesteps.front());
}

void Trajectory::require_covers(const TimestepPlan& plan) const
{
    if (plan.timesteps() != timesteps) {
        throw std::invalid_argument("trajectory was recorded with a different timestep plan");
    }
    if (latents.size() != timesteps.size() + 1 || !latents.contains(0)) {
        throw std::invalid_argument("trajectory is missing latents for its plan");
    }
    for (Timestep t : timesteps) {
        if (!latents.contains(t)) {
            throw std::invalid_argument("trajectory is missing the latent at t=" + std::to_string(t));
        }
    }
}

Latent cfg_combine(const Latent& eps_c, const Latent& eps_u, double scale)
{
    require_same_shape(eps_c, eps_u, "cfg_combine");
    Latent out(eps_c.shape());
    const double rest = 1.0 - scale;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = scale * eps_c[i] + rest * eps_u[i];
    }
    return out;
}

Latent ddim_step(const Latent& z_t, const Latent& eps, Timestep t, Timestep t_prev, const NoiseSchedule& sched)
{
    require_same_shape(z_t, eps, "ddim_step");
    if (t <= t_prev) {
        throw std::invalid_argument("ddim_step needs t > t_prev");
    }
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    const double sqrt_ab = std::sqrt(ab);
    const double sqrt_one_minus_ab = std::sqrt(1.0 - ab);
    const double sqrt_ab_prev = std::sqrt(ab_prev);
    const double sqrt_one_minus_ab_prev = std::sqrt(1.0 - ab_prev);
    Latent out(z_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = (z_t[i] - sqrt_one_minus_ab * eps[i]) / sqrt_ab;
        out[i] = sqrt_ab_prev * x0 + sqrt_one_minus_ab_prev * eps[i];
    }
    return out;
}

Latent ddim_invert_step(const Latent& z_prev, const Latent& eps, Timestep t_prev, Timestep t,
                        const NoiseSchedule& sched)
{
    require_same_shape(z_prev, eps, "ddim_invert_step");
    if (t <= t_prev) {
        throw std::invalid_argument("ddim_invert_step needs t > t_prev");
    }
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    const double sqrt_ab = std::sqrt(ab);
    const double sqrt_one_minus_ab = std::sqrt(1.0 - ab);
    const double sqrt_ab_prev = std::sqrt(ab_prev);
    const double sqrt_one_minus_ab_prev = std::sqrt(1.0 - ab_prev);
    Latent out(z_prev.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x0 = (z_prev[i] - sqrt_one_minus_ab_prev * eps[i]) / sqrt_ab_prev;
        out[i] = sqrt_ab * x0 + sqrt_one_minus_ab * eps[i];
    }
    return out;
}

Latent desired_noise(const Latent& z_tilde_t, const Latent& z_target_prev, Timestep t, Timestep t_prev,
                     const NoiseSchedule& sched)
{
    require_same_shape(z_tilde_t, z_target_prev, "desired_noise");
    if (t <= t_prev) {
        throw std::invalid_argument("desired_noise needs t > t_prev");
    }
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    // ddim_step is z_prev = a * z_t + b * eps.
    const double a = std::sqrt(ab_prev / ab);
    const double b = std::sqrt(1.0 - ab_prev) - std::sqrt(ab_prev * (1.0 - ab) / ab);
    if (b == 0.0) {
        throw std::domain_error("desired_noise: degenerate schedule step (alpha_bar[t] == alpha_bar[t_prev])");
    }
    Latent out(z_tilde_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (z_target_prev[i] - a * z_tilde_t[i]) / b;
    }
    return out;
}

Latent desired_uncond(const Latent& eps_t, const Latent& eps_c, double scale)
{
    require_same_shape(eps_t, eps_c, "desired_uncond");
    if (scale == 1.0) {
        throw std::domain_error("desired_uncond: guidance scale 1 leaves the unconditional noise undetermined");
    }
    const double inv = 1.0 / (1.0 - scale);
    Latent out(eps_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = (eps_t[i] - scale * eps_c[i]) * inv;
    }
    return out;
}

namespace {

struct BranchNoise {
    Latent cond;
    Latent uncond;
};

BranchNoise evaluate_branches(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                              const PromptEmbedding& uncond, AttentionHooks cond_hooks, AttentionHooks uncond_hooks,
                              bool batch, CallLedger* ledger, std::string_view label)
{
    cond_hooks.branch = Branch::cond;
    uncond_hooks.branch = Branch::uncond;
    if (ledger != nullptr) {
        ledger->add(label, 2);
    }
    if (batch) {
        const BatchItem items[2] = {{&z, &uncond, uncond_hooks}, {&z, &cond, cond_hooks}};
        auto out = net.predict_batch(items, t);
        return {std::move(out[1]), std::move(out[0])};
    }
    Latent c = net.predict(z, t, cond, cond_hooks);
    Latent u = net.predict(z, t, uncond, uncond_hooks);
    return {std::move(c), std::move(u)};
}

void require_finite(const Latent& z, Timestep t, const char* stage)
{
    if (!z.all_finite()) {
        throw NumericalError(std::string(stage) + ": latent became non-finite at t=" + std::to_string(t), t);
    }
}

/// out = m * live + (1 - m) * fixed, with the spatial mask broadcast over channels.
Latent blend(const EditMask& mask, const Latent& live, const Latent& fixed)
{
    const std::size_t spatial = live.shape().spatial();
    Latent out(live.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = mask.values[i % spatial];
        out[i] = m * live[i] + (1.0 - m) * fixed[i];
    }
    return out;
}

}  // namespace

InversionResult invert(const NoiseModel& net, const Latent& z0, const GuidanceContext& ctx, const TimestepPlan& plan,
                       const NoiseSchedule& sched, const InversionOptions& options)
{
    ctx.validate();
    require_finite(z0, 0, "invert");

    InversionResult result;
    auto& traj = result.trajectory;
    traj.timesteps = plan.timesteps();
    traj.guidance = ctx.scale;
    traj.seed = options.seed;
    traj.latents.emplace(0, z0);

    if (options.capture_kv) {
        result.kv = net.new_kv_cache();
    }
    if (options.capture_attention) {
        result.attention.emplace();
    }
    const bool observe = options.capture_kv || options.capture_attention;

    auto observing_hooks = [&](Branch branch) {
        AttentionHooks hooks;
        hooks.branch = branch;
        if (result.kv) {
            hooks.capture = &*result.kv;
        }
        if (result.attention && branch == Branch::cond) {
            hooks.trace = &*result.attention;
        }
        return hooks;
    };

    Latent z = z0;
    Timestep t_prev = 0;
    for (Timestep t : plan.inversion_order()) {
        const bool observe_here = observe && !options.aligned_capture;
        const auto noise = evaluate_branches(net, z, t, ctx.cond, ctx.uncond,
                                             observe_here ? observing_hooks(Branch::cond) : AttentionHooks{},
                                             observe_here ? observing_hooks(Branch::uncond) : AttentionHooks{},
                                             options.batch_branches, options.ledger, route::inversion);
        z = ddim_invert_step(z, cfg_combine(noise.cond, noise.uncond, ctx.scale), t_prev, t, sched);
        require_finite(z, t, "invert");
        traj.latents.emplace(t, z);

        if (observe && options.aligned_capture) {
            evaluate_branches(net, z, t, ctx.cond, ctx.uncond, observing_hooks(Branch::cond),
                              observing_hooks(Branch::uncond), options.batch_branches, options.ledger,
                              route::capture);
        }
        t_prev = t;
    }
    return result;
}

SampleResult sample_direct(const NoiseModel& net, const Latent& z_start, const GuidanceContext& ctx,
                           const TimestepPlan& plan, const NoiseSchedule& sched, const SamplerOptions& options)
{
    ctx.validate();
    SampleResult out;
    Latent z = z_start;
    out.path.emplace(plan.empty() ? 0 : plan[0], z);
    for (std::size_t i = 0; i < plan.steps(); ++i) {
        const Timestep t = plan[i];
        const Timestep t_prev = plan.previous(i);
        const auto noise = evaluate_branches(net, z, t, ctx.cond, ctx.uncond, {}, {}, options.batch_branches,
                                             options.ledger, options.route);
        z = ddim_step(z, cfg_combine(noise.cond, noise.uncond, ctx.scale), t, t_prev, sched);
        require_finite(z, t_prev, "sample_direct");
        out.path.emplace(t_prev, z);
    }
    out.final = std::move(z);
    return out;
}

SampleResult sample_fec_ref(const NoiseModel& net, const Trajectory& traj, const GuidanceContext& ctx,
                            const TimestepPlan& plan, const NoiseSchedule& sched, FecMode mode,
                            const SamplerOptions& options)
{
    traj.require_covers(plan);
    if (mode == FecMode::edit) {
        return sample_direct(net, traj.start(), ctx, plan, sched, options);
    }
    // Every step lands on the reference latent, so the live prediction never influences the result.
    SampleResult out;
    out.path.insert(traj.latents.begin(), traj.latents.end());
    out.final = traj.source();
    return out;
}

SampleResult sample_fec_noise(const NoiseModel& net, const Trajectory& traj, const GuidanceContext& ctx,
                              const TimestepPlan& plan, const NoiseSchedule& sched, const MaskProvider* masks,
                              FecMode mode, const SamplerOptions& options)
{
    ctx.validate();
    traj.require_covers(plan);
    const bool editing = mode == FecMode::edit && masks != nullptr;
    const bool degenerate_guidance = ctx.scale == 1.0;

    SampleResult out;
    Latent z = traj.start();
    out.path.emplace(plan.empty() ? 0 : plan[0], z);
    for (std::size_t i = 0; i < plan.steps(); ++i) {
        const Timestep t = plan[i];
        const Timestep t_prev = plan.previous(i);
        const Latent eps_target = desired_noise(z, traj.at(t_prev), t, t_prev, sched);

        Latent eps;
        if (!editing) {
            if (options.ledger != nullptr) {
                options.ledger->add(options.route);
            }
            AttentionHooks hooks;
            const Latent eps_c = net.predict(z, t, ctx.cond, hooks);
            eps = degenerate_guidance ? eps_target
                                      : cfg_combine(eps_c, desired_uncond(eps_target, eps_c, ctx.scale), ctx.scale);
        } else {
            AttentionTrace step_trace;
            AttentionHooks cond_hooks;
            if (masks->needs_attention()) {
                cond_hooks.trace = &step_trace;
            }
            const auto noise = evaluate_branches(net, z, t, ctx.cond, ctx.uncond, cond_hooks, {},
                                                 options.batch_branches, options.ledger, options.route);
            const EditMask mask = masks->mask_at(t, masks->needs_attention() ? &step_trace : nullptr);
            mask.validate(z.shape());
            if (degenerate_guidance) {
                eps = blend(mask, cfg_combine(noise.cond, noise.uncond, ctx.scale), eps_target);
            } else {
                const Latent eps_u = blend(mask, noise.uncond, desired_uncond(eps_target, noise.cond, ctx.scale));
                eps = cfg_combine(noise.cond, eps_u, ctx.scale);
            }
        }
        z = ddim_step(z, eps, t, t_prev, sched);
        require_finite(z, t_prev, "sample_fec_noise");
        out.path.emplace(t_prev, z);
    }
    out.final = std::move(z);
    return out;
}

SampleResult sample_fec_kv_reuse(const NoiseModel& net, const Latent& z_start, const KVCache& cache,
                                 const GuidanceContext& ctx, const TimestepPlan& plan, const NoiseSchedule& sched,
                                 LayerRange layers, InjectMode mode, const SamplerOptions& options)
{
    ctx.validate();
    layers.validate(net.layer_count());
    AttentionHooks hooks;
    hooks.inject = &cache;
    hooks.inject_layers = layers;
    hooks.inject_mode = mode;

    SampleResult out;
    Latent z = z_start;
    out.path.emplace(plan.empty() ? 0 : plan[0], z);
    for (std::size_t i = 0; i < plan.steps(); ++i) {
        const Timestep t = plan[i];
        const Timestep t_prev = plan.previous(i);
        const auto noise = evaluate_branches(net, z, t, ctx.cond, ctx.uncond, hooks, hooks, options.batch_branches,
                                             options.ledger, options.route);
        z = ddim_step(z, cfg_combine(noise.cond, noise.uncond, ctx.scale), t, t_prev, sched);
        require_finite(z, t_prev, "sample_fec_kv_reuse");
        out.path.emplace(t_prev, z);
    }
    out.final = std::move(z);
    return out;
}

SampleResult sample_neg_prompt_baseline(const NoiseModel& net, const Latent& z_start, const GuidanceContext& ctx,
                                        const TimestepPlan& plan, const NoiseSchedule& sched,
                                        const SamplerOptions& options)
{
    // With uncond == cond the guided combination collapses to the conditional prediction at any scale.
    GuidanceContext shared = ctx;
    shared.uncond = ctx.cond;
    shared.scale = 1.0;
    return sample_direct(net, z_start, shared, plan, sched, options);
}

Method parse_method(std::string_view name)
{
    if (name == "direct") {
        return Method::direct;
    }
    if (name == "neg-prompt") {
        return Method::neg_prompt;
    }
    if (name == "fec-ref") {
        return Method::fec_ref;
    }
    if (name == "fec-noise") {
        return Method::fec_noise;
    }
    if (name == "fec-kv-reuse") {
        return Method::fec_kv_reuse;
    }
    if (name == "fec-v-reuse") {
        return Method::fec_v_reuse;
    }
    throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method method)
{
    switch (method) {
        case Method::direct: return "direct";
        case Method::neg_prompt: return "neg-prompt";
        case Method::fec_ref: return "fec-ref";
        case Method::fec_noise: return "fec-noise";
        case Method::fec_kv_reuse: return "fec-kv-reuse";
        case Method::fec_v_reuse: return "fec-v-reuse";
    }
    return "unknown";
}

bool needs_kv_cache(Method method)
{
    return method == Method::fec_kv_reuse || method == Method::fec_v_reuse;
}

SampleResult reconstruct(const NoiseModel& net, Method method, const InversionResult& inversion,
                         const GuidanceContext& ctx, const TimestepPlan& plan, const NoiseSchedule& sched,
                         std::optional<LayerRange> layers, const SamplerOptions& options)
{
    const Trajectory& traj = inversion.trajectory;
    const LayerRange range = layers.value_or(LayerRange::all(net.layer_count()));
    switch (method) {
        case Method::direct:
            return sample_direct(net, traj.start(), ctx, plan, sched, options);
        case Method::neg_prompt:
            return sample_neg_prompt_baseline(net, traj.start(), ctx, plan, sched, options);
        case Method::fec_ref:
            return sample_fec_ref(net, traj, ctx, plan, sched, FecMode::reconstruct, options);
        case Method::fec_noise:
            return sample_fec_noise(net, traj, ctx, plan, sched, nullptr, FecMode::reconstruct, options);
        case Method::fec_kv_reuse:
        case Method::fec_v_reuse:
            if (!inversion.kv) {
                throw std::invalid_argument(std::string(to_string(method)) + " needs an inversion with KV capture");
            }
            return sample_fec_kv_reuse(net, traj.start(), *inversion.kv, ctx, plan, sched, range,
                                       method == Method::fec_kv_reuse ? InjectMode::key_value
                                                                      : InjectMode::value_only,
                                       options);
    }
    throw std::logic_error("unhandled method");
}

}  // namespace fec
