#include "fec/mask.hpp"

#include <stdexcept>
#include <string>

namespace fec {

EditMask EditMask::filled(std::size_t height, std::size_t width, double value, MaskProvenance provenance)
{
    EditMask m;
    m.height = height;
    m.width = width;
    m.values.assign(height * width, value);
    m.provenance = provenance;
    return m;
}

EditMask EditMask::box(std::size_t height, std::size_t width, std::size_t y0, std::size_t x0, std::size_t y1,
                       std::size_t x1)
{
    if (y0 > y1 || x0 > x1 || y1 > height || x1 > width) {
        throw std::invalid_argument("mask box outside the grid");
    }
    EditMask m = filled(height, width, 0.0);
    for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
            m.values[y * width + x] = 1.0;
        }
    }
    return m;
}

void EditMask::validate(const Shape& latent) const
{
    if (height != latent.height || width != latent.width || values.size() != height * width) {
        throw std::invalid_argument("mask is " + std::to_string(height) + "x" + std::to_string(width) +
                                    " but the latent grid is " + std::to_string(latent.height) + "x" +
                                    std::to_string(latent.width));
    }
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument("mask values must lie in [0, 1]");
        }
    }
}

EditMask ScheduledMaskProvider::mask_at(Timestep t, const AttentionTrace*) const
{
    const auto it = masks_.find(t);
    return it == masks_.end() ? fallback_ : it->second;
}

}  // namespace fec
