#include "fec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace fec {

double latent_loss(const Latent& a, const Latent& b)
{
    require_same_shape(a, b, "latent_loss");
    if (a.empty()) {
        return 0.0;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.size());
}

double psnr(const Latent& a, const Latent& b, double peak)
{
    if (!(peak > 0.0)) {
        throw std::invalid_argument("psnr needs a positive peak");
    }
    const double mse = latent_loss(a, b);
    if (mse == 0.0) {
        return kPsnrIdentical;
    }
    return 10.0 * std::log10(peak * peak / mse);
}

namespace {

std::vector<double> gaussian_kernel(std::size_t size, double sigma)
{
    std::vector<double> k(size);
    const double centre = (static_cast<double>(size) - 1.0) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double x = static_cast<double>(i) - centre;
        k[i] = std::exp(-x * x / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (double& v : k) {
        v /= total;
    }
    return k;
}

/// Separable 'valid' filtering of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& k)
{
    const std::size_t n = k.size();
    const std::size_t ow = w - n + 1;
    const std::size_t oh = h - n + 1;
    std::vector<double> rows(h * ow, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += k[i] * plane[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += k[i] * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    return out;
}

}  // namespace

double ssim(const Latent& a, const Latent& b, const SsimParams& params)
{
    require_same_shape(a, b, "ssim");
    const Shape& s = a.shape();
    if (s.height < params.window || s.width < params.window) {
        throw std::invalid_argument("ssim: image " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                                    " is smaller than the " + std::to_string(params.window) + "px window");
    }
    const auto kernel = gaussian_kernel(params.window, params.sigma);
    const double c1 = (params.k1 * params.dynamic_range) * (params.k1 * params.dynamic_range);
    const double c2 = (params.k2 * params.dynamic_range) * (params.k2 * params.dynamic_range);
    const std::size_t plane = s.spatial();

    double channel_sum = 0.0;
    for (std::size_t c = 0; c < s.channels; ++c) {
        std::vector<double> x(a.raw().begin() + static_cast<std::ptrdiff_t>(c * plane),
                              a.raw().begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
        std::vector<double> y(b.raw().begin() + static_cast<std::ptrdiff_t>(c * plane),
                              b.raw().begin() + static_cast<std::ptrdiff_t>((c + 1) * plane));
        std::vector<double> xx(plane), yy(plane), xy(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mu_x = filter_valid(x, s.height, s.width, kernel);
        const auto mu_y = filter_valid(y, s.height, s.width, kernel);
        const auto e_xx = filter_valid(xx, s.height, s.width, kernel);
        const auto e_yy = filter_valid(yy, s.height, s.width, kernel);
        const auto e_xy = filter_valid(xy, s.height, s.width, kernel);

        double sum = 0.0;
        for (std::size_t i = 0; i < mu_x.size(); ++i) {
            const double mx = mu_x[i];
            const double my = mu_y[i];
            const double vx = e_xx[i] - mx * mx;
            const double vy = e_yy[i] - my * my;
            const double cov = e_xy[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        channel_sum += sum / static_cast<double>(mu_x.size());
    }
    return channel_sum / static_cast<double>(s.channels);
}

double dynamic_range(const Latent& source)
{
    if (source.empty()) {
        return 1.0;
    }
    const auto [lo, hi] = std::minmax_element(source.raw().begin(), source.raw().end());
    const double range = *hi - *lo;
    return range > 0.0 ? range : 1.0;
}

std::vector<std::pair<Timestep, double>> trajectory_loss_curve(const LatentPath& sampled, const Trajectory& reference)
{
    std::vector<std::pair<Timestep, double>> out;
    out.reserve(reference.latents.size());
    for (const auto& [t, z] : reference.latents) {
        const auto it = sampled.find(t);
        if (it == sampled.end()) {
            throw std::invalid_argument("sampled path has no latent at t=" + std::to_string(t));
        }
        out.emplace_back(t, latent_loss(it->second, z));
    }
    if (sampled.size() != reference.latents.size()) {
        throw std::invalid_argument("sampled path and reference trajectory cover different timesteps");
    }
    return out;
}

MetricsReport evaluate_reconstruction(const Latent& source, const Latent& output, const LatentPath* path,
                                      const Trajectory* reference)
{
    MetricsReport r;
    r.latent_loss = latent_loss(source, output);
    const double peak = dynamic_range(source);
    r.psnr = psnr(source, output, peak);
    SsimParams params;
    params.dynamic_range = peak;
    const Shape& s = source.shape();
    if (s.height >= params.window && s.width >= params.window) {
        r.ssim = ssim(source, output, params);
    } else {
        r.ssim = std::numeric_limits<double>::quiet_NaN();
    }
    if (path != nullptr && reference != nullptr) {
        r.per_step_losses = trajectory_loss_curve(*path, *reference);
    }
    return r;
}

std::string format_metric(double value)
{
    if (std::isinf(value) && value > 0) {
        return "inf";
    }
    if (std::isnan(value)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

}  // namespace fec
