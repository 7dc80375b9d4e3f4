#pragma once

#include "fec/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fec {

struct EmbedderConfig {
    std::size_t token_count = 8;
    std::size_t dim = 64;
    std::uint64_t seed = 0;
};

/// Pseudo text embedding standing in for a real text encoder: one seeded vector per word,
/// padded with fixed per-slot vectors. The empty prompt is all padding (the null embedding).
struct PromptEmbedding {
    std::string source_text;
    std::vector<std::string> words;
    Matrix tokens;  // token_count x dim

    bool is_null() const { return words.empty(); }
    friend bool operator==(const PromptEmbedding&, const PromptEmbedding&) = default;
};

std::vector<std::string> split_words(std::string_view text);

PromptEmbedding embed_prompt(std::string_view text, const EmbedderConfig& config = {});
inline PromptEmbedding embed_prompt(std::string_view text, std::uint64_t seed)
{
    return embed_prompt(text, EmbedderConfig{.seed = seed});
}

/// Token slot holding `word`, if the word made it into the (truncated) prompt.
std::optional<std::size_t> token_index(const PromptEmbedding& embedding, std::string_view word);

}  // namespace fec
