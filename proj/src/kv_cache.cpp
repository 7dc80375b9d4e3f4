#include "fec/denoiser.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace fec {

void LayerRange::validate(int layer_count) const
{
    if (start < 0 || end < start || end > layer_count) {
        throw std::invalid_argument("layer range [" + std::to_string(start) + ", " + std::to_string(end) +
                                    ") outside [0, " + std::to_string(layer_count) + "]");
    }
}

KVCache::KVCache(int layer_count, std::size_t tokens, std::size_t model_dim)
    : layer_count_(layer_count), tokens_(tokens), model_dim_(model_dim)
{
}

void KVCache::store(Timestep t, int layer, Branch branch, Matrix keys, Matrix values, bool overwrite)
{
    if (layer < 0 || layer >= layer_count_) {
        throw std::out_of_range("kv cache layer " + std::to_string(layer) + " out of range");
    }
    for (const Matrix* m : {&keys, &values}) {
        if (m->rows != tokens_ || m->cols != model_dim_) {
            throw std::invalid_argument("kv cache tensor geometry mismatch");
        }
    }
    auto& slot = entries_[Key{t, layer}].branches[static_cast<std::size_t>(branch)];
    if (slot && !overwrite) {
        throw std::logic_error("kv cache already holds (t=" + std::to_string(t) + ", layer=" + std::to_string(layer) +
                               ") for this branch; pass overwrite to replace it");
    }
    slot = Slot{std::move(keys), std::move(values)};
}

const KVCache::Slot* KVCache::find(Timestep t, int layer, Branch branch) const
{
    const auto it = entries_.find(Key{t, layer});
    if (it == entries_.end()) {
        return nullptr;
    }
    const auto& slot = it->second.branches[static_cast<std::size_t>(branch)];
    return slot ? &*slot : nullptr;
}

std::vector<Timestep> KVCache::timesteps() const
{
    std::vector<Timestep> out;
    for (const auto& [key, entry] : entries_) {
        if (out.empty() || out.back() != key.t) {
            out.push_back(key.t);
        }
    }
    return out;
}

void AttentionTrace::record(Timestep t, int layer, CrossAttentionMap map)
{
    maps_[{t, layer}] = std::move(map);
}

std::vector<const CrossAttentionMap*> AttentionTrace::at(Timestep t) const
{
    std::vector<const CrossAttentionMap*> out;
    for (auto it = maps_.lower_bound({t, std::numeric_limits<int>::min()}); it != maps_.end() && it->first.first == t;
         ++it) {
        out.push_back(&it->second);
    }
    return out;
}

bool AttentionTrace::has(Timestep t) const
{
    return !at(t).empty();
}

std::vector<Latent> NoiseModel::predict_batch(std::span<const BatchItem> items, Timestep t) const
{
    std::vector<Latent> out;
    out.reserve(items.size());
    for (const auto& item : items) {
        out.push_back(predict(*item.z, t, *item.cond, item.hooks));
    }
    return out;
}

KVCache NoiseModel::new_kv_cache() const
{
    throw std::logic_error("this noise model has no self-attention layers to cache");
}

namespace {

void reject_hooks(const AttentionHooks& hooks, const char* model)
{
    if (hooks.capture != nullptr || hooks.inject != nullptr || hooks.trace != nullptr) {
        throw std::logic_error(std::string(model) + " has no attention layers to hook");
    }
}

}  // namespace

GaussianDenoiser::GaussianDenoiser(NoiseSchedule sched, double mean, double variance)
    : sched_(std::move(sched)), mean_(mean), variance_(variance)
{
    if (variance < 0.0) {
        throw std::invalid_argument("gaussian denoiser variance must be non-negative");
    }
}

Latent GaussianDenoiser::predict(const Latent& z, Timestep t, const PromptEmbedding&, const AttentionHooks& hooks) const
{
    reject_hooks(hooks, "GaussianDenoiser");
    if (t < 1 || t > sched_.train_steps()) {
        throw std::out_of_range("gaussian denoiser timestep out of range");
    }
    const double ab = sched_.alpha_bar(t);
    const double shift = std::sqrt(ab) * mean_;
    const double gain = std::sqrt(1.0 - ab) / (ab * variance_ + 1.0 - ab);
    Latent out(z.shape());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = (z[i] - shift) * gain;
    }
    return out;
}

Latent ConstantDenoiser::predict(const Latent& z, Timestep, const PromptEmbedding&, const AttentionHooks& hooks) const
{
    reject_hooks(hooks, "ConstantDenoiser");
    require_same_shape(z, eps_, "ConstantDenoiser");
    return eps_;
}

Latent predict_noise(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond)
{
    return net.predict(z, t, cond);
}

Latent predict_noise_capture(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                             KVCache& cache, AttentionTrace* trace, Branch branch, bool overwrite)
{
    AttentionHooks hooks;
    hooks.branch = branch;
    hooks.capture = &cache;
    hooks.overwrite = overwrite;
    hooks.trace = trace;
    return net.predict(z, t, cond, hooks);
}

Latent predict_noise_inject(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                            const KVCache& cache, LayerRange layers, Branch branch)
{
    AttentionHooks hooks;
    hooks.branch = branch;
    hooks.inject = &cache;
    hooks.inject_layers = layers;
    return net.predict(z, t, cond, hooks);
}

Latent predict_noise_inject_v_only(const NoiseModel& net, const Latent& z, Timestep t, const PromptEmbedding& cond,
                                   const KVCache& cache, LayerRange layers, Branch branch)
{
    AttentionHooks hooks;
    hooks.branch = branch;
    hooks.inject = &cache;
    hooks.inject_layers = layers;
    hooks.inject_mode = InjectMode::value_only;
    return net.predict(z, t, cond, hooks);
}

}  // namespace fec
