#include "fec/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace fec {

namespace {

// Every kernel below produces output row i from input row i alone, with a fixed
// reduction order. That is what makes batched and unbatched evaluation agree bit for bit.

void matmul(const Matrix& a, const Matrix& w, Matrix& out)
{
    out = Matrix(a.rows, w.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* o = out.data.data() + i * w.cols;
        const double* ai = a.data.data() + i * a.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            const double* wk = w.data.data() + k * w.cols;
            for (std::size_t j = 0; j < w.cols; ++j) {
                o[j] += aik * wk[j];
            }
        }
    }
}

void add_bias(Matrix& m, const std::vector<double>& bias)
{
    for (std::size_t i = 0; i < m.rows; ++i) {
        double* r = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) {
            r[j] += bias[j];
        }
    }
}

Matrix layer_norm(const Matrix& x)
{
    constexpr double kEps = 1e-5;
    Matrix out(x.rows, x.cols);
    const double inv_n = 1.0 / static_cast<double>(x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto in = x.row(i);
        double mean = 0.0;
        for (double v : in) {
            mean += v;
        }
        mean *= inv_n;
        double var = 0.0;
        for (double v : in) {
            var += (v - mean) * (v - mean);
        }
        var *= inv_n;
        const double inv_std = 1.0 / std::sqrt(var + kEps);
        auto o = out.row(i);
        for (std::size_t j = 0; j < x.cols; ++j) {
            o[j] = (in[j] - mean) * inv_std;
        }
    }
    return out;
}

double gelu(double x)
{
    return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

Matrix slice_rows(const Matrix& m, std::size_t first, std::size_t count)
{
    Matrix out(count, m.cols);
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(first * m.cols), count * m.cols, out.data.begin());
    return out;
}

/// Multi-head attention of `queries` over (keys, values). When `probs_out` is given, it receives the
/// head-averaged softmax weights (queries x keys).
Matrix attend(const Matrix& queries, const Matrix& keys, const Matrix& values, int heads, double scale,
              Matrix* probs_out)
{
    const std::size_t nq = queries.rows;
    const std::size_t nk = keys.rows;
    const std::size_t dim = queries.cols;
    const std::size_t dh = dim / static_cast<std::size_t>(heads);
    Matrix out(nq, dim);
    if (probs_out != nullptr) {
        *probs_out = Matrix(nq, nk);
    }

    Matrix kt(dh, nk);
    std::vector<double> scores(nk);
    for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * dh;
        for (std::size_t j = 0; j < nk; ++j) {
            for (std::size_t k = 0; k < dh; ++k) {
                kt(k, j) = keys(j, off + k);
            }
        }
        for (std::size_t i = 0; i < nq; ++i) {
            std::fill(scores.begin(), scores.end(), 0.0);
            for (std::size_t k = 0; k < dh; ++k) {
                const double q = queries(i, off + k) * scale;
                const double* kr = kt.data.data() + k * nk;
                for (std::size_t j = 0; j < nk; ++j) {
                    scores[j] += q * kr[j];
                }
            }
            double peak = scores[0];
            for (std::size_t j = 1; j < nk; ++j) {
                peak = std::max(peak, scores[j]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
                scores[j] = std::exp(scores[j] - peak);
                total += scores[j];
            }
            const double inv_total = 1.0 / total;
            double* o = out.data.data() + i * dim + off;
            for (std::size_t j = 0; j < nk; ++j) {
                const double p = scores[j] * inv_total;
                const double* v = values.data.data() + j * dim + off;
                for (std::size_t k = 0; k < dh; ++k) {
                    o[k] += p * v[k];
                }
                if (probs_out != nullptr) {
                    (*probs_out)(i, j) += p / static_cast<double>(heads);
                }
            }
        }
    }
    return out;
}

}  // namespace

struct ToyDenoiser::Weights {
    struct Block {
        Matrix wq, wk, wv, wo;
        Matrix xq, xk, xv, xo;
        Matrix w1, w2;
        std::vector<double> b1, b2;
    };

    Matrix w_in;
    std::vector<double> b_in;
    Matrix w_time;
    Matrix w_out;
    Matrix positions;  // tokens x model_dim, fixed sinusoidal
    std::vector<Block> blocks;
};

namespace {

Matrix draw(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double gain)
{
    std::normal_distribution<double> normal(0.0, gain / std::sqrt(static_cast<double>(rows)));
    Matrix m(rows, cols);
    for (double& v : m.data) {
        v = normal(rng);
    }
    return m;
}

std::vector<double> draw_bias(std::mt19937_64& rng, std::size_t n, double scale)
{
    std::normal_distribution<double> normal(0.0, scale);
    std::vector<double> b(n);
    for (double& v : b) {
        v = normal(rng);
    }
    return b;
}

void sinusoid(std::span<double> out, double position)
{
    const std::size_t n = out.size();
    for (std::size_t i = 0; i + 1 < n; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(n));
        out[i] = std::sin(position * freq);
        out[i + 1] = std::cos(position * freq);
    }
    if (n % 2 == 1) {
        out[n - 1] = std::sin(position);
    }
}

}  // namespace

ToyDenoiser::ToyDenoiser(DenoiserConfig config) : config_(config), weights_(std::make_unique<Weights>())
{
    const auto& c = config_;
    if (c.layer_count < 1 || c.head_count < 1) {
        throw std::invalid_argument("denoiser needs at least one layer and one head");
    }
    if (c.model_dim % static_cast<std::size_t>(c.head_count) != 0) {
        throw std::invalid_argument("model_dim must be divisible by head_count");
    }
    if (c.patch_size == 0 || c.latent.height % c.patch_size != 0 || c.latent.width % c.patch_size != 0) {
        throw std::invalid_argument("latent height/width must be multiples of patch_size");
    }
    for (double gain : {c.weight_gain, c.input_gain, c.cross_attention_gain}) {
        if (!std::isfinite(gain) || gain <= 0.0) {
            throw std::invalid_argument("denoiser weight gains must be positive and finite");
        }
    }

    std::mt19937_64 rng(c.init_seed);
    const std::size_t patch_features = c.latent.channels * c.patch_size * c.patch_size;
    const std::size_t d = c.model_dim;
    auto& w = *weights_;
    w.w_in = draw(rng, patch_features, d, c.weight_gain * c.input_gain);
    w.b_in = draw_bias(rng, d, 0.1);
    w.w_time = draw(rng, d, d, c.weight_gain);
    for (int l = 0; l < c.layer_count; ++l) {
        Weights::Block b;
        b.wq = draw(rng, d, d, c.weight_gain);
        b.wk = draw(rng, d, d, c.weight_gain);
        b.wv = draw(rng, d, d, c.weight_gain);
        b.wo = draw(rng, d, d, c.weight_gain);
        b.xq = draw(rng, d, d, c.weight_gain);
        b.xk = draw(rng, c.context_dim, d, c.weight_gain);
        b.xv = draw(rng, c.context_dim, d, c.weight_gain);
        b.xo = draw(rng, d, d, c.weight_gain * c.cross_attention_gain);
        b.w1 = draw(rng, d, d * c.mlp_ratio, c.weight_gain);
        b.b1 = draw_bias(rng, d * c.mlp_ratio, 0.1);
        b.w2 = draw(rng, d * c.mlp_ratio, d, c.weight_gain);
        b.b2 = draw_bias(rng, d, 0.1);
        w.blocks.push_back(std::move(b));
    }
    w.w_out = draw(rng, d, patch_features, c.weight_gain);

    const std::size_t grid_h = c.latent.height / c.patch_size;
    const std::size_t grid_w = c.latent.width / c.patch_size;
    w.positions = Matrix(grid_h * grid_w, d);
    const std::size_t half = d / 2;
    for (std::size_t gy = 0; gy < grid_h; ++gy) {
        for (std::size_t gx = 0; gx < grid_w; ++gx) {
            auto row = w.positions.row(gy * grid_w + gx);
            sinusoid(row.subspan(0, half), static_cast<double>(gy));
            sinusoid(row.subspan(half), static_cast<double>(gx));
        }
    }
}

ToyDenoiser::~ToyDenoiser() = default;
ToyDenoiser::ToyDenoiser(ToyDenoiser&&) noexcept = default;
ToyDenoiser& ToyDenoiser::operator=(ToyDenoiser&&) noexcept = default;

std::size_t ToyDenoiser::token_count() const
{
    return (config_.latent.height / config_.patch_size) * (config_.latent.width / config_.patch_size);
}

std::vector<double> ToyDenoiser::weight_snapshot() const
{
    std::vector<double> out;
    auto append = [&out](const auto& v) { out.insert(out.end(), v.begin(), v.end()); };
    const auto& w = *weights_;
    append(w.w_in.data);
    append(w.b_in);
    append(w.w_time.data);
    for (const auto& b : w.blocks) {
        for (const Matrix* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.xq, &b.xk, &b.xv, &b.xo, &b.w1, &b.w2}) {
            append(m->data);
        }
        append(b.b1);
        append(b.b2);
    }
    append(w.w_out.data);
    return out;
}

Latent ToyDenoiser::predict(const Latent& z, Timestep t, const PromptEmbedding& cond, const AttentionHooks& hooks) const
{
    const BatchItem item{&z, &cond, hooks};
    return std::move(predict_batch(std::span<const BatchItem>(&item, 1), t).front());
}

std::vector<Latent> ToyDenoiser::predict_batch(std::span<const BatchItem> items, Timestep t) const
{
    const auto& c = config_;
    const auto& w = *weights_;
    const std::size_t n = token_count();
    const std::size_t d = c.model_dim;
    const std::size_t p = c.patch_size;
    const std::size_t grid_w = c.latent.width / p;
    const std::size_t patch_features = c.latent.channels * p * p;
    const std::size_t batch = items.size();
    const double dh = static_cast<double>(d / static_cast<std::size_t>(c.head_count));
    const double scale = c.attention_scale == AttentionScale::inv_sqrt_head_dim ? 1.0 / std::sqrt(dh) : 1.0 / dh;

    for (const auto& item : items) {
        if (item.z == nullptr || item.cond == nullptr) {
            throw std::invalid_argument("batch item without latent or prompt");
        }
        if (item.z->shape() != c.latent) {
            throw std::invalid_argument("denoiser expects latent " + c.latent.to_string() + ", got " +
                                        item.z->shape().to_string());
        }
        if (item.cond->tokens.cols != c.context_dim) {
            throw std::invalid_argument("prompt embedding width does not match denoiser context_dim");
        }
        if (item.hooks.inject != nullptr) {
            item.hooks.inject_layers.validate(c.layer_count);
            for (int l = item.hooks.inject_layers.start; l < item.hooks.inject_layers.end; ++l) {
                if (!item.hooks.inject->contains(t, l, item.hooks.branch)) {
                    throw std::out_of_range("kv cache has no entry for (t=" + std::to_string(t) +
                                            ", layer=" + std::to_string(l) + ")");
                }
            }
        }
    }

    // Patchify: token (gy, gx) gathers a p x p tile across channels.
    Matrix x(batch * n, patch_features);
    for (std::size_t b = 0; b < batch; ++b) {
        const Latent& z = *items[b].z;
        for (std::size_t tok = 0; tok < n; ++tok) {
            const std::size_t gy = tok / grid_w;
            const std::size_t gx = tok % grid_w;
            auto row = x.row(b * n + tok);
            std::size_t f = 0;
            for (std::size_t ch = 0; ch < c.latent.channels; ++ch) {
                for (std::size_t dy = 0; dy < p; ++dy) {
                    for (std::size_t dx = 0; dx < p; ++dx) {
                        row[f++] = z.at(ch, gy * p + dy, gx * p + dx);
                    }
                }
            }
        }
    }

    Matrix time_in(1, d);
    sinusoid(time_in.row(0), static_cast<double>(t));
    Matrix time_emb;
    matmul(time_in, w.w_time, time_emb);

    Matrix h;
    matmul(x, w.w_in, h);
    add_bias(h, w.b_in);
    for (std::size_t r = 0; r < h.rows; ++r) {
        auto hr = h.row(r);
        const auto pos = w.positions.row(r % n);
        const auto te = time_emb.row(0);
        for (std::size_t j = 0; j < d; ++j) {
            hr[j] += pos[j] + te[j];
        }
    }

    for (int l = 0; l < c.layer_count; ++l) {
        const auto& blk = w.blocks[static_cast<std::size_t>(l)];

        // Self-attention.
        {
            const Matrix a = layer_norm(h);
            Matrix q, k, v;
            matmul(a, blk.wq, q);
            matmul(a, blk.wk, k);
            matmul(a, blk.wv, v);
            Matrix mixed(batch * n, d);
            for (std::size_t b = 0; b < batch; ++b) {
                const auto& hooks = items[b].hooks;
                Matrix kb = slice_rows(k, b * n, n);
                Matrix vb = slice_rows(v, b * n, n);
                if (hooks.capture != nullptr) {
                    hooks.capture->store(t, l, hooks.branch, kb, vb, hooks.overwrite);
                }
                if (hooks.inject != nullptr && hooks.inject_layers.contains(l)) {
                    const auto* slot = hooks.inject->find(t, l, hooks.branch);
                    if (hooks.inject_mode == InjectMode::key_value) {
                        kb = slot->keys;
                    }
                    vb = slot->values;
                }
                const Matrix out = attend(slice_rows(q, b * n, n), kb, vb, c.head_count, scale, nullptr);
                std::copy(out.data.begin(), out.data.end(),
                          mixed.data.begin() + static_cast<std::ptrdiff_t>(b * n * d));
            }
            Matrix proj;
            matmul(mixed, blk.wo, proj);
            for (std::size_t i = 0; i < h.data.size(); ++i) {
                h.data[i] += proj.data[i];
            }
        }

        // Cross-attention over prompt tokens.
        {
            const Matrix a = layer_norm(h);
            Matrix q;
            matmul(a, blk.xq, q);
            Matrix mixed(batch * n, d);
            for (std::size_t b = 0; b < batch; ++b) {
                const auto& hooks = items[b].hooks;
                Matrix kx, vx;
                matmul(items[b].cond->tokens, blk.xk, kx);
                matmul(items[b].cond->tokens, blk.xv, vx);
                Matrix probs;
                const Matrix out = attend(slice_rows(q, b * n, n), kx, vx, c.head_count, scale,
                                          hooks.trace != nullptr ? &probs : nullptr);
                if (hooks.trace != nullptr) {
                    hooks.trace->record(t, l,
                                        CrossAttentionMap{c.latent.height / p, c.latent.width / p, std::move(probs)});
                }
                std::copy(out.data.begin(), out.data.end(),
                          mixed.data.begin() + static_cast<std::ptrdiff_t>(b * n * d));
            }
            Matrix proj;
            matmul(mixed, blk.xo, proj);
            for (std::size_t i = 0; i < h.data.size(); ++i) {
                h.data[i] += proj.data[i];
            }
        }

        // MLP.
        {
            const Matrix a = layer_norm(h);
            Matrix hidden;
            matmul(a, blk.w1, hidden);
            add_bias(hidden, blk.b1);
            for (double& val : hidden.data) {
                val = gelu(val);
            }
            Matrix proj;
            matmul(hidden, blk.w2, proj);
            add_bias(proj, blk.b2);
            for (std::size_t i = 0; i < h.data.size(); ++i) {
                h.data[i] += proj.data[i];
            }
        }
    }

    Matrix y;
    matmul(layer_norm(h), w.w_out, y);

    std::vector<Latent> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        Latent eps(c.latent);
        for (std::size_t tok = 0; tok < n; ++tok) {
            const std::size_t gy = tok / grid_w;
            const std::size_t gx = tok % grid_w;
            const auto row = y.row(b * n + tok);
            std::size_t f = 0;
            for (std::size_t ch = 0; ch < c.latent.channels; ++ch) {
                for (std::size_t dy = 0; dy < p; ++dy) {
                    for (std::size_t dx = 0; dx < p; ++dx) {
                        eps.at(ch, gy * p + dy, gx * p + dx) = row[f++];
                    }
                }
            }
        }
        out.push_back(std::move(eps));
    }
    return out;
}

KVCache ToyDenoiser::new_kv_cache() const
{
    return KVCache(config_.layer_count, token_count(), config_.model_dim);
}

}  // namespace fec
