#pragma once

#include "fec/tensor.hpp"

#include <string_view>
#include <vector>

namespace fec {

enum class ScheduleKind { linear_beta, scaled_linear_beta, constant_beta };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view to_string(ScheduleKind kind);

struct ScheduleParams {
    ScheduleKind kind = ScheduleKind::scaled_linear_beta;
    int train_steps = 1000;
    double beta_start = 0.00085;
    double beta_end = 0.012;
    /// Used only by constant_beta.
    double beta = 0.0;
};

/// Cumulative signal coefficients alpha_bar[0..T]; alpha_bar[0] == 1.
/// Immutable once built, so one instance can back any number of sessions.
class NoiseSchedule {
public:
    explicit NoiseSchedule(std::vector<double> alpha_bar);

    int train_steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
    double alpha_bar(Timestep t) const;
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    std::vector<double> alpha_bar_;
};

NoiseSchedule build_schedule(const ScheduleParams& params);
NoiseSchedule build_schedule(ScheduleKind kind, int train_steps);

/// sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps
Latent add_noise(const Latent& z0, const Latent& eps, Timestep t, const NoiseSchedule& sched);

/// Strictly decreasing sampling timesteps; inversion walks them in reverse.
class TimestepPlan {
public:
    TimestepPlan() = default;
    /// Validates that `timesteps` is strictly decreasing inside [1, train_steps]. May be empty.
    TimestepPlan(std::vector<Timestep> timesteps, int train_steps);

    std::size_t steps() const { return timesteps_.size(); }
    bool empty() const { return timesteps_.empty(); }
    int train_steps() const { return train_steps_; }
    const std::vector<Timestep>& timesteps() const { return timesteps_; }
    Timestep operator[](std::size_t i) const { return timesteps_[i]; }
    /// Timestep reached after sampling step i (0 after the last one).
    Timestep previous(std::size_t i) const { return i + 1 < timesteps_.size() ? timesteps_[i + 1] : 0; }
    std::vector<Timestep> inversion_order() const { return {timesteps_.rbegin(), timesteps_.rend()}; }

    friend bool operator==(const TimestepPlan&, const TimestepPlan&) = default;

private:
    std::vector<Timestep> timesteps_;
    int train_steps_ = 0;
};

/// Even spacing from T downward with stride floor(T / steps); the remainder is left at the low-t end.
TimestepPlan timestep_plan(int steps, int train_steps);

}  // namespace fec
