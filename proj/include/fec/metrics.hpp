#pragma once

#include "fec/sampling.hpp"
#include "fec/tensor.hpp"

#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace fec {

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

struct MetricsReport {
    double latent_loss = 0.0;
    double psnr = kPsnrIdentical;
    double ssim = 1.0;
    std::vector<std::pair<Timestep, double>> per_step_losses;
};

/// Mean of squared element differences.
double latent_loss(const Latent& a, const Latent& b);

/// 10 log10(peak^2 / MSE); +inf when the inputs are identical.
double psnr(const Latent& a, const Latent& b, double peak);

struct SsimParams {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

/// Mean SSIM over all fully contained windows, averaged over channels. Gaussian-weighted local
/// statistics without sample-size correction.
double ssim(const Latent& a, const Latent& b, const SsimParams& params = {});

/// Peak used for image metrics on latents: max - min of the source latent.
double dynamic_range(const Latent& source);

using LatentPath = std::map<Timestep, Latent, std::greater<>>;

/// latent_loss(sampled[t], reference[t]) for every reference timestep, descending t.
std::vector<std::pair<Timestep, double>> trajectory_loss_curve(const LatentPath& sampled, const Trajectory& reference);

/// Loss, PSNR and SSIM of `output` against `source`, plus the per-step curve when a path is given.
MetricsReport evaluate_reconstruction(const Latent& source, const Latent& output, const LatentPath* path = nullptr,
                                      const Trajectory* reference = nullptr);

/// Formats a value the way reports store it: "inf" for +infinity.
std::string format_metric(double value);

}  // namespace fec
