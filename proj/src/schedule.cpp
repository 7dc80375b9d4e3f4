#include "fec/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fec {

ScheduleKind parse_schedule_kind(std::string_view name)
{
    if (name == "linear-beta" || name == "linear") {
        return ScheduleKind::linear_beta;
    }
    if (name == "scaled-linear-beta" || name == "scaled-linear") {
        return ScheduleKind::scaled_linear_beta;
    }
    if (name == "constant-beta" || name == "constant") {
        return ScheduleKind::constant_beta;
    }
    throw std::invalid_argument("unknown schedule kind '" + std::string(name) + "'");
}

std::string_view to_string(ScheduleKind kind)
{
    switch (kind) {
        case ScheduleKind::linear_beta: return "linear-beta";
        case ScheduleKind::scaled_linear_beta: return "scaled-linear-beta";
        case ScheduleKind::constant_beta: return "constant-beta";
    }
    return "unknown";
}

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar))
{
    if (alpha_bar_.size() < 2) {
        throw std::invalid_argument("noise schedule needs at least one training step");
    }
    if (alpha_bar_[0] != 1.0) {
        throw std::invalid_argument("alpha_bar[0] must be exactly 1");
    }
    for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
        if (!(alpha_bar_[t] > 0.0) || alpha_bar_[t] > alpha_bar_[t - 1]) {
            throw std::invalid_argument("alpha_bar must be positive and non-increasing (violated at t=" +
                                        std::to_string(t) + ")");
        }
    }
}

double NoiseSchedule::alpha_bar(Timestep t) const
{
    if (t < 0 || t > train_steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(train_steps()) +
                                "]");
    }
    return alpha_bar_[static_cast<std::size_t>(t)];
}

NoiseSchedule build_schedule(const ScheduleParams& params)
{
    const int T = params.train_steps;
    if (T < 1) {
        throw std::invalid_argument("schedule needs T >= 1");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        switch (params.kind) {
            case ScheduleKind::linear_beta:
                betas[i] = params.beta_start + frac * (params.beta_end - params.beta_start);
                break;
            case ScheduleKind::scaled_linear_beta: {
                const double lo = std::sqrt(params.beta_start);
                const double hi = std::sqrt(params.beta_end);
                const double r = lo + frac * (hi - lo);
                betas[i] = r * r;
                break;
            }
            case ScheduleKind::constant_beta:
                betas[i] = params.beta;
                break;
        }
        if (!(betas[i] >= 0.0 && betas[i] < 1.0)) {
            throw std::invalid_argument("beta values must lie in [0, 1)");
        }
    }

    std::vector<double> alpha_bar(static_cast<std::size_t>(T) + 1);
    alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t - 1]);
    }
    return NoiseSchedule(std::move(alpha_bar));
}

NoiseSchedule build_schedule(ScheduleKind kind, int train_steps)
{
    ScheduleParams params;
    params.kind = kind;
    params.train_steps = train_steps;
    if (kind == ScheduleKind::linear_beta) {
        params.beta_start = 1e-4;
        params.beta_end = 0.02;
    }
    return build_schedule(params);
}

Latent add_noise(const Latent& z0, const Latent& eps, Timestep t, const NoiseSchedule& sched)
{
    require_same_shape(z0, eps, "add_noise");
    if (t < 1 || t > sched.train_steps()) {
        throw std::out_of_range("add_noise: timestep " + std::to_string(t) + " outside [1, T]");
    }
    const double ab = sched.alpha_bar(t);
    const double signal = std::sqrt(ab);
    const double noise = std::sqrt(1.0 - ab);
    Latent out(z0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = signal * z0[i] + noise * eps[i];
    }
    return out;
}

TimestepPlan::TimestepPlan(std::vector<Timestep> timesteps, int train_steps)
    : timesteps_(std::move(timesteps)), train_steps_(train_steps)
{
    for (std::size_t i = 0; i < timesteps_.size(); ++i) {
        if (timesteps_[i] < 1 || timesteps_[i] > train_steps_) {
            throw std::invalid_argument("plan timestep " + std::to_string(timesteps_[i]) + " outside [1, T]");
        }
        if (i > 0 && timesteps_[i] >= timesteps_[i - 1]) {
            throw std::invalid_argument("plan timesteps must be strictly decreasing");
        }
    }
}

TimestepPlan timestep_plan(int steps, int train_steps)
{
    if (steps < 1) {
        throw std::invalid_argument("timestep plan needs at least one step");
    }
    if (steps > train_steps) {
        throw std::invalid_argument("steps (" + std::to_string(steps) + ") exceed training steps (" +
                                    std::to_string(train_steps) + ")");
    }
    const int stride = train_steps / steps;
    std::vector<Timestep> ts(static_cast<std::size_t>(steps));
    for (int i = 0; i < steps; ++i) {
        ts[i] = train_steps - i * stride;
    }
    return TimestepPlan(std::move(ts), train_steps);
}

}  // namespace fec
