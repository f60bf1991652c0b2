#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbench/corpus.hpp"
#include "attnbench/promptkit.hpp"

namespace attnbench::inference {

// Environment variable that overrides the configured bearer token.
inline constexpr const char* kTokenEnvVar = "ATTNBENCH_API_TOKEN";

struct GenerationRequest {
  std::string prompt;
  int max_new_tokens = 100;
  double temperature = 0.0;  // greedy
  std::vector<std::string> stop_sequences;
};

struct RetryPolicy {
  int max_retries = 2;
  std::chrono::milliseconds backoff{500};  // doubled after every failed attempt
};

enum class EndpointShape { completions, chat };

struct EndpointConfig {
  std::string base_url;  // e.g. http://localhost:8000/v1
  std::string model_name;
  std::optional<std::string> auth_token;
  std::size_t max_in_flight = 4;
  std::chrono::milliseconds request_timeout{120000};
  RetryPolicy retry;
  EndpointShape shape = EndpointShape::completions;
};

struct GenerationResult {
  std::string text;
  std::optional<long long> prompt_tokens;
  std::optional<long long> completion_tokens;
  double latency_ms = 0.0;
  int attempts = 1;
};

void validate(const GenerationRequest& req);
void validate(const EndpointConfig& cfg);

// Environment override first, then the configured token.
std::optional<std::string> resolve_auth_token(const EndpointConfig& cfg);

// Blocking call against an OpenAI-style completions or chat endpoint.
// Throws TransportError, HttpStatusError or ProtocolError once retries are
// exhausted (protocol errors and 4xx other than 429 are not retried).
GenerationResult generate(const EndpointConfig& cfg, const GenerationRequest& req);

// Request body and response extraction, separated from the transport so they
// can be checked without a server.
nlohmann::json build_request_body(const EndpointConfig& cfg, const GenerationRequest& req);
GenerationResult parse_response_body(const EndpointConfig& cfg, const std::string& body);

// ---------------------------------------------------------------------------
// Mock model

// Correctness probability per cell:
//   a_g + f*b  when the segment points at the gold document,
//   a_g - f*p  when it points elsewhere,
//   a_g        with no segment,
// clamped to [0, 1].
struct MockProfile {
  std::map<std::size_t, double> base_accuracy;  // gold position -> a_g
  double follow = 0.0;
  double boost = 0.0;
  double penalty = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> closed_book_accuracy;
  std::optional<double> oracle_accuracy;
};

void validate(const MockProfile& profile);

// gold_position 0 and n 0 denote the closed-book setting.
struct MockCell {
  std::size_t gold_position = 0;
  std::optional<promptkit::SegmentPhrase> segment;
  std::size_t n = 0;
  promptkit::IndexScheme scheme = promptkit::IndexScheme::id_ascending;
  bool oracle = false;
};

inline constexpr std::uint64_t kMockBuckets = 1000000;
inline constexpr const char* kMockDecoy = "I don't know.";

// Hash of (seed, instance, n, gold position). The segment is deliberately
// not an input: every cell of a row draws the same number, so an instance
// correct at probability q stays correct at any q' >= q.
std::uint64_t mock_hash(std::uint64_t seed, const std::string& instance_id, std::size_t n,
                        std::size_t gold_position);

double mock_probability(const MockCell& cell, const MockProfile& profile);

std::string mock_generate(const corpus::QAInstance& instance, const MockCell& cell, const MockProfile& profile);

// ---------------------------------------------------------------------------
// Backends

struct BackendCall {
  const corpus::QAInstance& instance;
  const MockCell& cell;
  const GenerationRequest& request;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual std::size_t max_in_flight() const = 0;
  // False when the output does not depend on the prompt text.
  virtual bool reads_prompt() const = 0;
  virtual GenerationResult generate(const BackendCall& call) = 0;
};

class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockProfile profile, std::size_t max_in_flight = 4);
  std::string id() const override;
  std::size_t max_in_flight() const override { return max_in_flight_; }
  bool reads_prompt() const override { return false; }
  GenerationResult generate(const BackendCall& call) override;
  const MockProfile& profile() const { return profile_; }

 private:
  MockProfile profile_;
  std::size_t max_in_flight_;
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(EndpointConfig cfg);
  std::string id() const override;
  std::size_t max_in_flight() const override { return cfg_.max_in_flight; }
  bool reads_prompt() const override { return true; }
  GenerationResult generate(const BackendCall& call) override;

 private:
  EndpointConfig cfg_;
};

}  // namespace attnbench::inference
