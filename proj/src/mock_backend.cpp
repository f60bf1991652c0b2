#include <algorithm>
#include <charconv>
#include <sstream>

#include "attnbench/errors.hpp"
#include "attnbench/inference.hpp"
#include "attnbench/scoring.hpp"
#include "attnbench/text.hpp"

namespace attnbench::inference {

void validate(const MockProfile& p) {
  const auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  for (const auto& [pos, a] : p.base_accuracy) {
    if (!in_unit(a)) throw SpecError("mock.base_accuracy[" + std::to_string(pos) + "] outside [0, 1]");
  }
  if (!in_unit(p.follow)) throw SpecError("mock.follow outside [0, 1]");
  if (p.boost < 0.0) throw SpecError("mock.boost must be nonnegative");
  if (p.penalty < 0.0) throw SpecError("mock.penalty must be nonnegative");
  if (p.closed_book_accuracy && !in_unit(*p.closed_book_accuracy)) {
    throw SpecError("mock.closed_book_accuracy outside [0, 1]");
  }
  if (p.oracle_accuracy && !in_unit(*p.oracle_accuracy)) throw SpecError("mock.oracle_accuracy outside [0, 1]");
}

std::uint64_t mock_hash(std::uint64_t seed, const std::string& instance_id, std::size_t n,
                        std::size_t gold_position) {
  std::string key = instance_id;
  key.push_back('\x1f');
  key += std::to_string(n);
  key.push_back('\x1f');
  key += std::to_string(gold_position);
  return text::splitmix64(seed ^ text::fnv1a64(key));
}

double mock_probability(const MockCell& cell, const MockProfile& profile) {
  if (cell.n == 0) {
    if (!profile.closed_book_accuracy) throw SpecError("mock profile has no closed_book_accuracy");
    return *profile.closed_book_accuracy;
  }
  double q = 0.0;
  if (cell.oracle) {
    if (!profile.oracle_accuracy) throw SpecError("mock profile has no oracle_accuracy");
    q = *profile.oracle_accuracy;
  } else {
    auto it = profile.base_accuracy.find(cell.gold_position);
    if (it == profile.base_accuracy.end()) {
      throw SpecError("mock profile has no base accuracy for gold position " + std::to_string(cell.gold_position));
    }
    q = it->second;
  }
  if (cell.segment) {
    if (promptkit::segment_matches_gold(*cell.segment, cell.gold_position, cell.n, cell.scheme)) {
      q += profile.follow * profile.boost;
    } else {
      q -= profile.follow * profile.penalty;
    }
  }
  return std::clamp(q, 0.0, 1.0);
}

std::string mock_generate(const corpus::QAInstance& instance, const MockCell& cell, const MockProfile& profile) {
  const double q = mock_probability(cell, profile);
  const std::uint64_t h = mock_hash(profile.seed, instance.id, cell.n, cell.gold_position);
  if (static_cast<double>(h % kMockBuckets) < q * static_cast<double>(kMockBuckets)) {
    return instance.gold_answers.front();
  }
  if (scoring::is_correct(kMockDecoy, instance.gold_answers)) return "";
  return kMockDecoy;
}

namespace {

std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

MockBackend::MockBackend(MockProfile profile, std::size_t max_in_flight)
    : profile_(std::move(profile)), max_in_flight_(std::max<std::size_t>(1, max_in_flight)) {
  validate(profile_);
}

std::string MockBackend::id() const {
  std::ostringstream ss;
  ss << "mock(seed=" << profile_.seed << ",f=" << shortest(profile_.follow) << ",b=" << shortest(profile_.boost)
     << ",p=" << shortest(profile_.penalty) << ",a=[";
  bool first = true;
  for (const auto& [pos, a] : profile_.base_accuracy) {
    ss << (first ? "" : ",") << pos << ":" << shortest(a);
    first = false;
  }
  ss << "])";
  return ss.str();
}

GenerationResult MockBackend::generate(const BackendCall& call) {
  GenerationResult r;
  r.text = mock_generate(call.instance, call.cell, profile_);
  r.latency_ms = 0.0;
  return r;
}

}  // namespace attnbench::inference
