#pragma once

#include "fec/denoiser.hpp"
#include "fec/embedding.hpp"
#include "fec/mask.hpp"
#include "fec/metrics.hpp"
#include "fec/sampling.hpp"

#include <memory>
#include <optional>
#include <string>

namespace fec {

inline constexpr double kMaskThreshold = 0.3;

/// Binary edit mask from the blend word's cross-attention at step t: mean over recorded layers
/// (heads are already averaged), nearest-neighbour upsampling to the latent grid, min-max
/// normalisation, then threshold. A constant map yields an all-zero mask flagged degenerate.
EditMask derive_mask(const AttentionTrace& trace, std::string_view blend_word, const PromptEmbedding& embedding,
                     Timestep t, std::size_t height, std::size_t width, double threshold = kMaskThreshold);

/// Derives M_t from the current step's conditional cross-attention.
class AttentionMaskProvider final : public MaskProvider {
public:
    AttentionMaskProvider(std::string blend_word, PromptEmbedding embedding, std::size_t height, std::size_t width,
                          double threshold = kMaskThreshold);
    EditMask mask_at(Timestep t, const AttentionTrace* step_trace) const override;
    bool needs_attention() const override { return true; }

private:
    std::string blend_word_;
    PromptEmbedding embedding_;
    std::size_t height_;
    std::size_t width_;
    double threshold_;
};

struct EditRequest {
    std::string source_prompt;
    std::string edit_prompt;
    std::optional<std::string> blend_word;
    Method method = Method::fec_noise;
    /// Injected layers for the kv methods; every layer when unset.
    std::optional<LayerRange> layers;
    double guidance = 7.5;
    /// Inversion guidance; defaults to `guidance`.
    std::optional<double> inversion_guidance;
    /// Fixed mask for fec-noise; takes precedence over the blend word.
    std::optional<EditMask> mask;

    void validate() const;
};

struct EditSettings {
    TimestepPlan plan;
    EmbedderConfig embedder{};
    bool aligned_capture = true;
    /// Also run the method's reconstruct mode and report the edit's locality against it.
    bool compare_with_reconstruction = true;
    CallLedger* ledger = nullptr;
};

struct EditReport {
    /// Latent loss per step between the edit path and the inversion trajectory, descending t.
    std::vector<std::pair<Timestep, double>> per_step_losses;
    /// Positions where every applied mask was zero (fec-noise only; otherwise empty).
    std::optional<EditMask> untouched_region;
    /// Largest |edit - reconstruction| over the untouched region (all positions when no mask applies).
    std::optional<double> outside_max_abs_diff;
    /// Mean squared difference between edit and reconstruction inside the edited region.
    std::optional<double> inside_mse;
    bool mask_degenerate = false;
};

struct EditOutcome {
    Latent output;
    std::optional<Latent> reconstruction;
    InversionResult inversion;
    EditReport report;
};

/// Inverts `z0` with the source prompt (capturing what the method needs) and samples in edit mode.
EditOutcome run_edit(const NoiseModel& net, const NoiseSchedule& sched, const EditRequest& request, const Latent& z0,
                     const EditSettings& settings);

}  // namespace fec
