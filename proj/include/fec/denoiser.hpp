#pragma once

#include "fec/embedding.hpp"
#include "fec/schedule.hpp"
#include "fec/tensor.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace fec {

/// Which half of a guided evaluation pair an evaluation belongs to.
enum class Branch : std::uint8_t { uncond = 0, cond = 1 };
inline constexpr std::size_t kBranchCount = 2;

/// Half-open range [start, end) of transformer blocks.
struct LayerRange {
    int start = 0;
    int end = 0;

    static LayerRange none() { return {}; }
    static LayerRange all(int layer_count) { return {0, layer_count}; }
    bool empty() const { return start >= end; }
    bool contains(int layer) const { return layer >= start && layer < end; }
    void validate(int layer_count) const;
    friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// Self-attention keys/values per (timestep, layer), each entry holding one slot per guidance branch.
/// Iteration order is t descending, then layer ascending.
class KVCache {
public:
    struct Slot {
        Matrix keys;    // tokens x model_dim
        Matrix values;  // tokens x model_dim
        friend bool operator==(const Slot&, const Slot&) = default;
    };
    struct Entry {
        std::array<std::optional<Slot>, kBranchCount> branches;
        friend bool operator==(const Entry&, const Entry&) = default;
    };
    struct Key {
        Timestep t;
        int layer;
        bool operator<(const Key& o) const { return t != o.t ? t > o.t : layer < o.layer; }
        friend bool operator==(const Key&, const Key&) = default;
    };

    KVCache() = default;
    KVCache(int layer_count, std::size_t tokens, std::size_t model_dim);

    int layer_count() const { return layer_count_; }
    std::size_t tokens() const { return tokens_; }
    std::size_t model_dim() const { return model_dim_; }

    /// Throws when the slot is already filled and `overwrite` is false, or on a geometry mismatch.
    void store(Timestep t, int layer, Branch branch, Matrix keys, Matrix values, bool overwrite = false);
    const Slot* find(Timestep t, int layer, Branch branch) const;
    bool contains(Timestep t, int layer, Branch branch) const { return find(t, layer, branch) != nullptr; }

    std::size_t entry_count() const { return entries_.size(); }
    /// Distinct timesteps, descending.
    std::vector<Timestep> timesteps() const;
    const std::map<Key, Entry>& entries() const { return entries_; }

    friend bool operator==(const KVCache&, const KVCache&) = default;

private:
    int layer_count_ = 0;
    std::size_t tokens_ = 0;
    std::size_t model_dim_ = 0;
    std::map<Key, Entry> entries_;
};

/// Head-averaged cross-attention probabilities of one layer: spatial positions x prompt tokens.
struct CrossAttentionMap {
    std::size_t height = 0;
    std::size_t width = 0;
    Matrix probs;
};

/// Cross-attention maps recorded per (timestep, layer).
class AttentionTrace {
public:
    void record(Timestep t, int layer, CrossAttentionMap map);
    /// All layers recorded at t (empty if none).
    std::vector<const CrossAttentionMap*> at(Timestep t) const;
    bool has(Timestep t) const;
    std::size_t size() const { return maps_.size(); }
    void clear() { maps_.clear(); }

private:
    std::map<std::pair<Timestep, int>, CrossAttentionMap> maps_;
};

enum class InjectMode { key_value, value_only };

/// Observation and intervention points of one network evaluation.
struct AttentionHooks {
    Branch branch = Branch::cond;
    KVCache* capture = nullptr;
    bool overwrite = false;
    const KVCache* inject = nullptr;
    LayerRange inject_layers{};
    InjectMode inject_mode = InjectMode::key_value;
    AttentionTrace* trace = nullptr;
};

/// One row of a batched evaluation.
struct BatchItem {
    const Latent* z = nullptr;
    const PromptEmbedding* cond = nullptr;
    AttentionHooks hooks{};
};

/// A noise-prediction network eps_theta(z, t, c). Implementations are immutable and thread-safe;
/// all mutable state travels through the hooks.
class NoiseModel {
public:
    virtual ~NoiseModel() = default;

    virtual Latent predict(const Latent& z, Timestep t, const PromptEmbedding& cond,
                           const AttentionHooks& hooks = {}) const = 0;

    /// Row i of the result must equal predict(items[i]) bit for bit. The default evaluates rows one by one.
    virtual std::vector<Latent> predict_batch(std::span<const BatchItem> items, Timestep t) const;

    /// Number of self-attention layers available to KV hooks (0 when hooks are unsupported).
    virtual int layer_count() const { return 0; }

    /// Empty cache matching this network's self-attention geometry; throws when hooks are unsupported.
    virtual KVCache new_kv_cache() const;
};

enum class AttentionScale { inv_sqrt_head_dim, inv_head_dim };

struct DenoiserConfig {
    Shape latent{};
    int layer_count = 4;
    int head_count = 4;
    /// Square patch edge; tokens are patch_size x patch_size spatial tiles across all channels.
    std::size_t patch_size = 2;
    std::size_t model_dim = 32;
    std::size_t mlp_ratio = 4;
    std::size_t context_dim = 64;
    std::uint64_t init_seed = 0;
    AttentionScale attention_scale = AttentionScale::inv_sqrt_head_dim;
    /// Standard deviation multiplier applied to every weight draw.
    double weight_gain = 1.0;
    /// Extra multipliers for the patch embedding and the cross-attention output projection. The defaults
    /// keep the prompt's pull on the noise estimate moderate so that guidance error grows steadily.
    double input_gain = 0.25;
    double cross_attention_gain = 0.5;
};

/// Pre-norm transformer over spatial tokens with self-attention, cross-attention and an MLP per block.
/// Weights are drawn once from init_seed and never trained.
class ToyDenoiser final : public NoiseModel {
public:
    explicit ToyDenoiser(DenoiserConfig config);
    ~ToyDenoiser() override;
    ToyDenoiser(ToyDenoiser&&) noexcept;
    ToyDenoiser& operator=(ToyDenoiser&&) noexcept;

    Latent predict(const Latent& z, Timestep t, const PromptEmbedding& cond,
                   const AttentionHooks& hooks = {}) const override;
    std::vector<Latent> predict_batch(std::span<const BatchItem> items, Timestep t) const override;
    int layer_count() const override { return config_.layer_count; }
    KVCache new_kv_cache() const override;

    const DenoiserConfig& config() const { return config_; }
    std::size_t token_count() const;
    /// Flattened weights, for determinism checks.
    std::vector<double> weight_snapshot() const;

private:
    struct Weights;
    DenoiserConfig config_;
    std::unique_ptr<Weights> weights_;
};

/// Posterior-mean noise for data z0 ~ N(mean, variance * I):
/// eps = (z - sqrt(ab) * mean) * sqrt(1 - ab) / (ab * variance + 1 - ab).
class GaussianDenoiser final : public NoiseModel {
public:
    GaussianDenoiser(NoiseSchedule sched, double mean, double variance);
    Latent predict(const Latent& z, Timestep t, const PromptEmbedding& cond,
                   const AttentionHooks& hooks = {}) const override;

private:
    NoiseSchedule sched_;
    double mean_;
    double variance_;
};

/// Returns the same noise tensor for every input.
class ConstantDenoiser final : public NoiseModel {
public:
    explicit ConstantDenoiser(Latent eps) : eps_(std::move(eps)) {}
    Latent predict(const Latent& z, Timestep t, const PromptEmbedding& cond,
                   const AttentionHooks& hooks = {}) const override;

private:
    Latent eps_;
};

// Named entry points for the hook combinations used by the samplers.

Latent predict_noise(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond);

Latent predict_noise_capture(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                             KVCache& cache, AttentionTrace* trace = nullptr, Branch branch = Branch::cond,
                             bool overwrite = false);

Latent predict_noise_inject(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                            const KVCache& cache, LayerRange layers, Branch branch = Branch::cond);

Latent predict_noise_inject_v_only(const NoiseModel& net, const Latent& z, Timestep t,
                                   const PromptEmbedding& cond, const KVCache& cache, LayerRange layers,
                                   Branch branch = Branch::cond);

}  // namespace fec
