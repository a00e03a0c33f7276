#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "attnreg/phantom.hpp"

namespace attnreg {

// Fixed vocabulary. Pathology words are `lesion` and `clear`.
enum class Token : std::size_t { pad = 0, lesion, clear, left, right, both, upper, lower, whole };
inline constexpr std::size_t kVocabSize = 9;
inline constexpr std::size_t kDefaultMaxTokens = 8;

const char* token_name(Token t);
bool is_pathology_token(std::size_t id);

enum class Pathology { lesion, clear };

/// Structured counterfactual condition.
///
/// Tokens are laid out as [pathology, laterality?, region?, pad...]; the
/// sequence is always padded to `max_tokens`. The null prompt (all padding) is
/// the unconditional branch for classifier-free guidance.
struct Prompt {
  std::vector<std::size_t> token_ids;
  std::vector<std::size_t> k_path;  // positions of pathology tokens
  std::optional<Pathology> pathology;
  std::optional<Laterality> laterality;
  std::optional<Region> region;

  static Prompt make(Pathology pathology, std::optional<Laterality> laterality = std::nullopt,
                     std::optional<Region> region = std::nullopt,
                     std::size_t max_tokens = kDefaultMaxTokens);
  static Prompt null_prompt(std::size_t max_tokens = kDefaultMaxTokens);

  // {"pathology": "lesion"|"clear", "laterality": ..., "region": ...}
  static Prompt from_json(const std::string& text, std::size_t max_tokens = kDefaultMaxTokens);
  std::string to_json() const;

  std::size_t size() const { return token_ids.size(); }
  void validate(std::size_t max_tokens) const;
};

}  // namespace attnreg
