#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace attnbench::scoring {

// How generations and gold answers are canonicalized before containment.
// `strip_punctuation` only trims punctuation at the ends of the text; internal
// punctuation ("U.S.", "AC/DC") is kept.
struct NormalizationPolicy {
  bool lowercase = true;
  bool strip_punctuation = true;
  bool collapse_whitespace = true;

  bool operator==(const NormalizationPolicy&) const = default;
};

std::string normalize(std::string_view text, const NormalizationPolicy& policy = {});

// True iff some normalized gold answer occurs in the normalized generation.
// Answers that normalize to the empty string never match.
bool is_correct(std::string_view generated, const std::vector<std::string>& gold_answers,
                const NormalizationPolicy& policy = {});

nlohmann::json to_json(const NormalizationPolicy& policy);
NormalizationPolicy policy_from_json(const nlohmann::json& j);

}  // namespace attnbench::scoring
