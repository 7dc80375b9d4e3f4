#include "fec/editing.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fec {

EditMask derive_mask(const AttentionTrace& trace, std::string_view blend_word, const PromptEmbedding& embedding,
                     Timestep t, std::size_t height, std::size_t width, double threshold)
{
    const auto token = token_index(embedding, blend_word);
    if (!token) {
        throw std::invalid_argument("blend word '" + std::string(blend_word) + "' does not occur in prompt '" +
                                    embedding.source_text + "'");
    }
    const auto maps = trace.at(t);
    if (maps.empty()) {
        throw std::invalid_argument("no cross-attention recorded at t=" + std::to_string(t));
    }
    const std::size_t gh = maps.front()->height;
    const std::size_t gw = maps.front()->width;
    std::vector<double> grid(gh * gw, 0.0);
    for (const auto* m : maps) {
        if (m->height != gh || m->width != gw || m->probs.rows != gh * gw || *token >= m->probs.cols) {
            throw std::invalid_argument("cross-attention maps at t=" + std::to_string(t) + " disagree in geometry");
        }
        for (std::size_t i = 0; i < grid.size(); ++i) {
            grid[i] += m->probs(i, *token);
        }
    }
    for (double& v : grid) {
        v /= static_cast<double>(maps.size());
    }

    EditMask mask = EditMask::filled(height, width, 0.0, MaskProvenance::attention_derived);
    std::vector<double> up(height * width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            up[y * width + x] = grid[(y * gh / height) * gw + (x * gw / width)];
        }
    }
    const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
    const double span = *hi - *lo;
    if (!(span > 0.0)) {
        mask.degenerate = true;
        return mask;
    }
    for (std::size_t i = 0; i < up.size(); ++i) {
        mask.values[i] = (up[i] - *lo) / span >= threshold ? 1.0 : 0.0;
    }
    return mask;
}

AttentionMaskProvider::AttentionMaskProvider(std::string blend_word, PromptEmbedding embedding, std::size_t height,
                                             std::size_t width, double threshold)
    : blend_word_(std::move(blend_word)),
      embedding_(std::move(embedding)),
      height_(height),
      width_(width),
      threshold_(threshold)
{
    if (!token_index(embedding_, blend_word_)) {
        throw std::invalid_argument("blend word '" + blend_word_ + "' does not occur in prompt '" +
                                    embedding_.source_text + "'");
    }
}

EditMask AttentionMaskProvider::mask_at(Timestep t, const AttentionTrace* step_trace) const
{
    if (step_trace == nullptr) {
        throw std::logic_error("attention mask provider called without a cross-attention trace");
    }
    return derive_mask(*step_trace, blend_word_, embedding_, t, height_, width_, threshold_);
}

void EditRequest::validate() const
{
    if (method != Method::fec_ref && method != Method::fec_noise && method != Method::fec_kv_reuse &&
        method != Method::fec_v_reuse) {
        throw std::invalid_argument("edit method must be fec-ref, fec-noise, fec-kv-reuse or fec-v-reuse");
    }
    if (blend_word) {
        const auto words = split_words(edit_prompt);
        if (std::find(words.begin(), words.end(), *blend_word) == words.end()) {
            throw std::invalid_argument("blend word '" + *blend_word + "' does not occur in the edit prompt");
        }
    }
    if (!std::isfinite(guidance) || (inversion_guidance && !std::isfinite(*inversion_guidance))) {
        throw std::invalid_argument("guidance scales must be finite");
    }
}

namespace {

/// Forwards to another provider and remembers the largest mask value seen per position.
class RecordingMaskProvider final : public MaskProvider {
public:
    RecordingMaskProvider(const MaskProvider& inner, std::size_t height, std::size_t width)
        : inner_(inner), union_(EditMask::filled(height, width, 0.0))
    {
    }

    EditMask mask_at(Timestep t, const AttentionTrace* step_trace) const override
    {
        EditMask m = inner_.mask_at(t, step_trace);
        if (m.values.size() == union_.values.size()) {
            for (std::size_t i = 0; i < m.values.size(); ++i) {
                union_.values[i] = std::max(union_.values[i], m.values[i]);
            }
        }
        degenerate_ = degenerate_ || m.degenerate;
        return m;
    }
    bool needs_attention() const override { return inner_.needs_attention(); }

    const EditMask& coverage() const { return union_; }
    bool any_degenerate() const { return degenerate_; }

private:
    const MaskProvider& inner_;
    mutable EditMask union_;
    mutable bool degenerate_ = false;
};

}  // namespace

EditOutcome run_edit(const NoiseModel& net, const NoiseSchedule& sched, const EditRequest& request, const Latent& z0,
                     const EditSettings& settings)
{
    request.validate();
    const PromptEmbedding source = embed_prompt(request.source_prompt, settings.embedder);
    const PromptEmbedding target = embed_prompt(request.edit_prompt, settings.embedder);
    const PromptEmbedding null = embed_prompt("", settings.embedder);
    const TimestepPlan& plan = settings.plan;

    GuidanceContext inv_ctx{request.inversion_guidance.value_or(request.guidance), source, null};
    GuidanceContext recon_ctx{request.guidance, source, null};
    GuidanceContext edit_ctx{request.guidance, target, null};

    InversionOptions inv_opts;
    inv_opts.capture_kv = needs_kv_cache(request.method);
    inv_opts.aligned_capture = settings.aligned_capture;
    inv_opts.ledger = settings.ledger;

    EditOutcome outcome;
    outcome.inversion = invert(net, z0, inv_ctx, plan, sched, inv_opts);
    const Trajectory& traj = outcome.inversion.trajectory;

    SamplerOptions edit_opts;
    edit_opts.ledger = settings.ledger;
    edit_opts.route = std::string(route::edit);
    SamplerOptions recon_opts = edit_opts;
    recon_opts.route = std::string(route::reconstruction);

    const LayerRange layers = request.layers.value_or(LayerRange::all(net.layer_count()));
    const Shape& shape = z0.shape();

    std::unique_ptr<MaskProvider> base_masks;
    if (request.mask) {
        base_masks = std::make_unique<FixedMaskProvider>(*request.mask);
    } else if (request.blend_word) {
        base_masks = std::make_unique<AttentionMaskProvider>(*request.blend_word, target, shape.height, shape.width);
    } else {
        base_masks = std::make_unique<FixedMaskProvider>(EditMask::filled(shape.height, shape.width, 0.0));
    }
    RecordingMaskProvider masks(*base_masks, shape.height, shape.width);

    SampleResult edited;
    switch (request.method) {
        case Method::fec_ref:
            edited = sample_fec_ref(net, traj, edit_ctx, plan, sched, FecMode::edit, edit_opts);
            break;
        case Method::fec_noise:
            edited = sample_fec_noise(net, traj, edit_ctx, plan, sched, &masks, FecMode::edit, edit_opts);
            break;
        case Method::fec_kv_reuse:
        case Method::fec_v_reuse:
            edited = sample_fec_kv_reuse(net, traj.start(), *outcome.inversion.kv, edit_ctx, plan, sched, layers,
                                         request.method == Method::fec_kv_reuse ? InjectMode::key_value
                                                                                : InjectMode::value_only,
                                         edit_opts);
            break;
        default:
            throw std::logic_error("unsupported edit method");
    }
    outcome.output = edited.final;
    outcome.report.per_step_losses = trajectory_loss_curve(edited.path, traj);
    outcome.report.mask_degenerate = masks.any_degenerate();

    if (settings.compare_with_reconstruction) {
        const SampleResult recon =
            reconstruct(net, request.method, outcome.inversion, recon_ctx, plan, sched, layers, recon_opts);
        outcome.reconstruction = recon.final;

        const std::size_t spatial = shape.spatial();
        const bool masked = request.method == Method::fec_noise;
        double outside = 0.0;
        double inside_sq = 0.0;
        std::size_t inside_n = 0;
        for (std::size_t i = 0; i < outcome.output.size(); ++i) {
            const double d = outcome.output[i] - recon.final[i];
            const bool untouched = !masked || masks.coverage().values[i % spatial] == 0.0;
            if (untouched) {
                outside = std::max(outside, std::abs(d));
            } else {
                inside_sq += d * d;
                ++inside_n;
            }
        }
        outcome.report.outside_max_abs_diff = outside;
        if (inside_n > 0) {
            outcome.report.inside_mse = inside_sq / static_cast<double>(inside_n);
        }
        if (masked) {
            EditMask untouched = masks.coverage();
            for (double& v : untouched.values) {
                v = v == 0.0 ? 1.0 : 0.0;
            }
            outcome.report.untouched_region = std::move(untouched);
        }
    }
    return outcome;
}

}  // namespace fec
