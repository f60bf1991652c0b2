#include "attnbench/scoring.hpp"

#include "attnbench/errors.hpp"
#include "attnbench/text.hpp"

namespace attnbench::scoring {

namespace {

std::u32string decode(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  std::size_t pos = 0;
  while (pos < s.size()) out.push_back(text::decode_utf8(s, pos));
  return out;
}

std::string encode(const std::u32string& s) {
  std::string out;
  out.reserve(s.size());
  for (const char32_t cp : s) text::append_utf8(out, cp);
  return out;
}

}  // namespace

std::string normalize(std::string_view input, const NormalizationPolicy& policy) {
  std::u32string s = decode(input);

  if (policy.lowercase) {
    for (auto& cp : s) cp = text::to_lower(cp);
  }

  if (policy.collapse_whitespace) {
    std::u32string collapsed;
    collapsed.reserve(s.size());
    bool pending_space = false;
    for (const char32_t cp : s) {
      if (text::is_space(cp)) {
        pending_space = !collapsed.empty();
        continue;
      }
      if (pending_space) collapsed.push_back(U' ');
      pending_space = false;
      collapsed.push_back(cp);
    }
    s = std::move(collapsed);
  }

  if (policy.strip_punctuation) {
    // With whitespace collapsing on, trim whitespace together with the
    // punctuation so that "  ( x ) " reaches a fixed point in one pass.
    const auto trimmable = [&](char32_t cp) {
      return text::is_punctuation(cp) || (policy.collapse_whitespace && text::is_space(cp));
    };
    std::size_t begin = 0;
    std::size_t end = s.size();
    while (begin < end && trimmable(s[begin])) ++begin;
    while (end > begin && trimmable(s[end - 1])) --end;
    s = s.substr(begin, end - begin);
  }

  return encode(s);
}

bool is_correct(std::string_view generated, const std::vector<std::string>& gold_answers,
                const NormalizationPolicy& policy) {
  const std::string haystack = normalize(generated, policy);
  for (const auto& answer : gold_answers) {
    const std::string needle = normalize(answer, policy);
    if (!needle.empty() && haystack.find(needle) != std::string::npos) return true;
  }
  return false;
}

nlohmann::json to_json(const NormalizationPolicy& policy) {
  return {{"lowercase", policy.lowercase},
          {"strip_punctuation", policy.strip_punctuation},
          {"collapse_whitespace", policy.collapse_whitespace}};
}

NormalizationPolicy policy_from_json(const nlohmann::json& j) {
  NormalizationPolicy p;
  if (!j.is_object()) throw SpecError("scoring: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!value.is_boolean()) throw SpecError("scoring." + key + ": expected a boolean");
    if (key == "lowercase") {
      p.lowercase = value.get<bool>();
    } else if (key == "strip_punctuation") {
      p.strip_punctuation = value.get<bool>();
    } else if (key == "collapse_whitespace") {
      p.collapse_whitespace = value.get<bool>();
    } else {
      throw SpecError("unknown key: scoring." + key);
    }
  }
  return p;
}

}  // namespace attnbench::scoring
