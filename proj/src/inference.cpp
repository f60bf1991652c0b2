#include "attnbench/inference.hpp"

#include <cstdlib>

#include "attnbench/errors.hpp"

namespace attnbench::inference {

using nlohmann::json;

void validate(const GenerationRequest& req) {
  if (req.max_new_tokens < 1) throw SpecError("generation.max_new_tokens must be at least 1");
  if (req.temperature < 0.0) throw SpecError("generation.temperature must be nonnegative");
}

void validate(const EndpointConfig& cfg) {
  if (cfg.base_url.empty()) throw SpecError("endpoint.base_url is required");
  if (cfg.model_name.empty()) throw SpecError("endpoint.model is required");
  if (cfg.max_in_flight < 1) throw SpecError("endpoint.max_in_flight must be at least 1");
  if (cfg.retry.max_retries < 0) throw SpecError("endpoint.max_retries must be nonnegative");
}

std::optional<std::string> resolve_auth_token(const EndpointConfig& cfg) {
  if (const char* env = std::getenv(kTokenEnvVar); env != nullptr && *env != '\0') return std::string(env);
  return cfg.auth_token;
}

json build_request_body(const EndpointConfig& cfg, const GenerationRequest& req) {
  json body = {{"model", cfg.model_name}, {"max_tokens", req.max_new_tokens}, {"temperature", req.temperature}};
  if (cfg.shape == EndpointShape::chat) {
    body["messages"] = json::array({{{"role", "user"}, {"content", req.prompt}}});
  } else {
    body["prompt"] = req.prompt;
  }
  if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
  return body;
}

GenerationResult parse_response_body(const EndpointConfig& cfg, const std::string& raw) {
  json body;
  try {
    body = json::parse(raw);
  } catch (const json::parse_error&) {
    throw ProtocolError("body", "is not JSON");
  }
  if (!body.is_object()) throw ProtocolError("body", "is not an object");
  auto choices = body.find("choices");
  if (choices == body.end() || !choices->is_array()) throw ProtocolError("choices", "missing or not an array");
  if (choices->empty()) throw ProtocolError("choices", "is empty");
  const json& first = (*choices)[0];

  GenerationResult r;
  if (cfg.shape == EndpointShape::chat) {
    auto msg = first.find("message");
    if (msg == first.end() || !msg->is_object()) throw ProtocolError("choices[0].message", "missing");
    auto content = msg->find("content");
    if (content == msg->end() || !content->is_string()) {
      throw ProtocolError("choices[0].message.content", "missing or not a string");
    }
    r.text = content->get<std::string>();
  } else {
    auto text = first.find("text");
    if (text == first.end() || !text->is_string()) throw ProtocolError("choices[0].text", "missing or not a string");
    r.text = text->get<std::string>();
  }
  if (auto usage = body.find("usage"); usage != body.end() && usage->is_object()) {
    if (usage->contains("prompt_tokens") && (*usage)["prompt_tokens"].is_number_integer()) {
      r.prompt_tokens = (*usage)["prompt_tokens"].get<long long>();
    }
    if (usage->contains("completion_tokens") && (*usage)["completion_tokens"].is_number_integer()) {
      r.completion_tokens = (*usage)["completion_tokens"].get<long long>();
    }
  }
  return r;
}

}  // namespace attnbench::inference
