#pragma once

#include "fec/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace fec::test {

inline Latent random_latent(std::uint64_t seed, Shape shape = {}, double scale = 1.0)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    Latent z(shape);
    for (double& v : z.values()) {
        v = normal(rng);
    }
    return z;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Per-window SSIM straight from the definition: 2-D Gaussian weights, every window evaluated on its own.
inline double brute_force_ssim(const Latent& a, const Latent& b, double range)
{
    const int n = 11;
    const double sigma = 1.5;
    double w[11][11];
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * sigma * sigma));
            total += w[i][j];
        }
    }
    const double c1 = (0.01 * range) * (0.01 * range);
    const double c2 = (0.03 * range) * (0.03 * range);
    const Shape& s = a.shape();
    double channels = 0.0;
    for (std::size_t c = 0; c < s.channels; ++c) {
        double acc = 0.0;
        int windows = 0;
        for (std::size_t y0 = 0; y0 + n <= s.height; ++y0) {
            for (std::size_t x0 = 0; x0 + n <= s.width; ++x0) {
                double mx = 0, my = 0;
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) {
                        mx += w[i][j] / total * a.at(c, y0 + i, x0 + j);
                        my += w[i][j] / total * b.at(c, y0 + i, x0 + j);
                    }
                }
                double vx = 0, vy = 0, cov = 0;
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) {
                        const double dx = a.at(c, y0 + i, x0 + j) - mx;
                        const double dy = b.at(c, y0 + i, x0 + j) - my;
                        vx += w[i][j] / total * dx * dx;
                        vy += w[i][j] / total * dy * dy;
                        cov += w[i][j] / total * dx * dy;
                    }
                }
                acc += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++windows;
            }
        }
        channels += acc / windows;
    }
    return channels / static_cast<double>(s.channels);
}

}  // namespace fec::test
