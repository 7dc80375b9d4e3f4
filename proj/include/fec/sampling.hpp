#pragma once

#include "fec/denoiser.hpp"
#include "fec/embedding.hpp"
#include "fec/mask.hpp"
#include "fec/schedule.hpp"
#include "fec/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fec {

/// Guidance scale plus the conditional (C) and unconditional (null) prompt embeddings.
struct GuidanceContext {
    double scale = 7.5;
    PromptEmbedding cond;
    PromptEmbedding uncond;

    void validate() const;
};

/// Network evaluations per labeled route. Every evaluation bumps exactly one label.
class CallLedger {
public:
    void add(std::string_view route, long long n = 1);
    long long count(std::string_view route) const;
    long long total() const;
    const std::map<std::string, long long, std::less<>>& counts() const { return counts_; }

private:
    std::map<std::string, long long, std::less<>> counts_;
};

namespace route {
inline constexpr std::string_view inversion = "inversion";
inline constexpr std::string_view capture = "inversion-capture";
inline constexpr std::string_view sampling = "sampling";
inline constexpr std::string_view edit = "edit";
inline constexpr std::string_view reconstruction = "reconstruction";
}  // namespace route

/// Inversion latents keyed by timestep: every planned timestep plus t = 0 (the source latent).
struct Trajectory {
    std::vector<Timestep> timesteps;  // the sampling plan, descending
    std::map<Timestep, Latent, std::greater<>> latents;
    double guidance = 1.0;
    std::uint64_t seed = 0;

    const Latent& at(Timestep t) const;
    const Latent& source() const { return at(0); }
    /// z_T: the latent at the first planned timestep, or the source for an empty plan.
    const Latent& start() const;
    /// Throws unless the trajectory holds exactly `plan` plus t = 0.
    void require_covers(const TimestepPlan& plan) const;
};

/// Raised when a latent stops being finite; carries the timestep the step was heading to.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, Timestep t) : std::runtime_error(what), timestep_(t) {}
    Timestep timestep() const { return timestep_; }

private:
    Timestep timestep_;
};

// Single-step algebra. All of these are elementwise.

/// scale * eps_c + (1 - scale) * eps_u
Latent cfg_combine(const Latent& eps_c, const Latent& eps_u, double scale);

/// Deterministic DDIM update from t down to t_prev.
Latent ddim_step(const Latent& z_t, const Latent& eps, Timestep t, Timestep t_prev, const NoiseSchedule& sched);

/// DDIM update run upward from t_prev to t with a given noise estimate.
Latent ddim_invert_step(const Latent& z_prev, const Latent& eps, Timestep t_prev, Timestep t,
                        const NoiseSchedule& sched);

/// The unique eps with ddim_step(z_tilde_t, eps, t, t_prev) == z_target_prev.
Latent desired_noise(const Latent& z_tilde_t, const Latent& z_target_prev, Timestep t, Timestep t_prev,
                     const NoiseSchedule& sched);

/// Unconditional noise that makes cfg_combine(eps_c, result, scale) equal eps_t. Undefined for scale == 1.
Latent desired_uncond(const Latent& eps_t, const Latent& eps_c, double scale);

struct InversionOptions {
    bool capture_kv = false;
    /// Record K/V from an extra evaluation at (z_t, t) after each step. When false, K/V come from the
    /// inversion update's own evaluation at (z_{t_prev}, t).
    bool aligned_capture = true;
    bool capture_attention = false;
    std::uint64_t seed = 0;
    CallLedger* ledger = nullptr;
    /// Evaluate the cond and uncond branches as one batch of two.
    bool batch_branches = false;
};

struct InversionResult {
    Trajectory trajectory;
    std::optional<KVCache> kv;
    std::optional<AttentionTrace> attention;
};

InversionResult invert(const NoiseModel& net, const Latent& z0, const GuidanceContext& ctx, const TimestepPlan& plan,
                       const NoiseSchedule& sched, const InversionOptions& options = {});

struct SamplerOptions {
    CallLedger* ledger = nullptr;
    std::string route = std::string(route::sampling);
    bool batch_branches = false;
};

/// Final latent plus every intermediate latent of the descent, keyed by timestep (includes the start and 0).
struct SampleResult {
    Latent final;
    std::map<Timestep, Latent, std::greater<>> path;
};

enum class FecMode { reconstruct, edit };

/// Plain guided DDIM descent from z_T.
SampleResult sample_direct(const NoiseModel& net, const Latent& z_start, const GuidanceContext& ctx,
                           const TimestepPlan& plan, const NoiseSchedule& sched, const SamplerOptions& options = {});

/// Reconstruct: overwrite every sampled latent with the reference latent. Edit: guided descent with
/// `ctx` (carrying the edit prompt) from the trajectory's start latent.
SampleResult sample_fec_ref(const NoiseModel& net, const Trajectory& traj, const GuidanceContext& ctx,
                            const TimestepPlan& plan, const NoiseSchedule& sched, FecMode mode,
                            const SamplerOptions& options = {});

/// Desired-noise correction. Outside the mask the unconditional noise is replaced by the value that lands
/// exactly on the reference trajectory; reconstruct mode uses a zero mask everywhere.
SampleResult sample_fec_noise(const NoiseModel& net, const Trajectory& traj, const GuidanceContext& ctx,
                              const TimestepPlan& plan, const NoiseSchedule& sched, const MaskProvider* masks,
                              FecMode mode, const SamplerOptions& options = {});

/// Guided descent where every evaluation swaps in the cached self-attention K/V (or V only) over `layers`.
SampleResult sample_fec_kv_reuse(const NoiseModel& net, const Latent& z_start, const KVCache& cache,
                                 const GuidanceContext& ctx, const TimestepPlan& plan, const NoiseSchedule& sched,
                                 LayerRange layers, InjectMode mode = InjectMode::key_value,
                                 const SamplerOptions& options = {});

/// sample_direct with the unconditional embedding replaced by the conditional one (so the scale drops out).
SampleResult sample_neg_prompt_baseline(const NoiseModel& net, const Latent& z_start, const GuidanceContext& ctx,
                                        const TimestepPlan& plan, const NoiseSchedule& sched,
                                        const SamplerOptions& options = {});

enum class Method { direct, neg_prompt, fec_ref, fec_noise, fec_kv_reuse, fec_v_reuse };

Method parse_method(std::string_view name);
std::string_view to_string(Method method);
bool needs_kv_cache(Method method);

/// Reconstruct the inverted source with one method. `inversion` must carry a KV cache for the kv methods.
/// `layers` is only read by the kv methods and defaults to every layer.
SampleResult reconstruct(const NoiseModel& net, Method method, const InversionResult& inversion,
                         const GuidanceContext& ctx, const TimestepPlan& plan, const NoiseSchedule& sched,
                         std::optional<LayerRange> layers = std::nullopt, const SamplerOptions& options = {});

}  // namespace fec
