#pragma once

#include "fec/denoiser.hpp"
#include "fec/tensor.hpp"

#include <map>

namespace fec {

enum class MaskProvenance { attention_derived, user_supplied };

/// Edit region M_t over the latent's spatial grid; 1 marks positions that follow the live prediction.
struct EditMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;
    MaskProvenance provenance = MaskProvenance::user_supplied;
    /// Set when the mask had to fall back to all-zero (e.g. a constant attention map).
    bool degenerate = false;

    static EditMask filled(std::size_t height, std::size_t width, double value,
                           MaskProvenance provenance = MaskProvenance::user_supplied);
    /// Ones inside [y0, y1) x [x0, x1), zeros elsewhere.
    static EditMask box(std::size_t height, std::size_t width, std::size_t y0, std::size_t x0, std::size_t y1,
                        std::size_t x1);

    double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    /// Checks [0, 1] bounds and geometry against a latent.
    void validate(const Shape& latent) const;
};

/// Supplies M_t during edit-mode sampling.
class MaskProvider {
public:
    virtual ~MaskProvider() = default;
    /// `step_trace` holds the cross-attention maps of the current step's conditional evaluation when
    /// needs_attention() is true, and is null otherwise.
    virtual EditMask mask_at(Timestep t, const AttentionTrace* step_trace) const = 0;
    virtual bool needs_attention() const { return false; }
};

/// The same mask at every step.
class FixedMaskProvider final : public MaskProvider {
public:
    explicit FixedMaskProvider(EditMask mask) : mask_(std::move(mask)) {}
    EditMask mask_at(Timestep, const AttentionTrace*) const override { return mask_; }

private:
    EditMask mask_;
};

/// Per-timestep masks loaded from a file; timesteps without an entry fall back to `fallback`.
class ScheduledMaskProvider final : public MaskProvider {
public:
    ScheduledMaskProvider(std::map<Timestep, EditMask> masks, EditMask fallback)
        : masks_(std::move(masks)), fallback_(std::move(fallback))
    {
    }
    EditMask mask_at(Timestep t, const AttentionTrace*) const override;

private:
    std::map<Timestep, EditMask> masks_;
    EditMask fallback_;
};

}  // namespace fec
