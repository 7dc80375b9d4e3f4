#include "fec/embedding.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace fec {
namespace {

constexpr std::uint64_t kPaddingTag = 0x9e3779b97f4a7c15ULL;

std::uint64_t fnv1a(std::string_view text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    std::uint64_t out = 0;
    std::uint32_t words[2];
    seq.generate(words, words + 2);
    out = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
    return out;
}

void fill_vector(std::span<double> row, std::uint64_t key)
{
    std::mt19937_64 rng(key);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : row) {
        v = normal(rng);
    }
}

}  // namespace

std::vector<std::string> split_words(std::string_view text)
{
    std::vector<std::string> out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        out.push_back(word);
    }
    return out;
}

PromptEmbedding embed_prompt(std::string_view text, const EmbedderConfig& config)
{
    PromptEmbedding emb;
    emb.source_text = std::string(text);
    emb.words = split_words(text);
    if (emb.words.size() > config.token_count) {
        emb.words.resize(config.token_count);
    }
    emb.tokens = Matrix(config.token_count, config.dim);
    for (std::size_t slot = 0; slot < config.token_count; ++slot) {
        const std::uint64_t key = slot < emb.words.size()
                                      ? mix(config.seed, fnv1a(emb.words[slot]))
                                      : mix(config.seed ^ kPaddingTag, static_cast<std::uint64_t>(slot));
        fill_vector(emb.tokens.row(slot), key);
    }
    return emb;
}

std::optional<std::size_t> token_index(const PromptEmbedding& embedding, std::string_view word)
{
    for (std::size_t i = 0; i < embedding.words.size(); ++i) {
        if (embedding.words[i] == word) {
            return i;
        }
    }
    return std::nullopt;
}

}  // namespace fec
