#include <httplib.h>

#include <regex>
#include <thread>

#include "attnbench/errors.hpp"
#include "attnbench/inference.hpp"

namespace attnbench::inference {

namespace {

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path_prefix;
};

ParsedUrl parse_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/\s]+)(/[^\s]*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw SpecError("endpoint.base_url is not an http(s) URL: " + url);
  ParsedUrl p{m[1].str(), m[2].matched ? m[2].str() : ""};
  while (!p.path_prefix.empty() && p.path_prefix.back() == '/') p.path_prefix.pop_back();
  return p;
}

bool retryable_status(int status) { return status == 429 || status >= 500; }

}  // namespace

GenerationResult generate(const EndpointConfig& cfg, const GenerationRequest& req) {
  validate(cfg);
  validate(req);
  const ParsedUrl url = parse_url(cfg.base_url);
  const std::string path =
      url.path_prefix + (cfg.shape == EndpointShape::chat ? "/chat/completions" : "/completions");
  const std::string body = build_request_body(cfg, req).dump();

  httplib::Client client(url.scheme_host_port);
  const auto timeout_s = std::chrono::duration_cast<std::chrono::seconds>(cfg.request_timeout);
  const auto timeout_us = std::chrono::duration_cast<std::chrono::microseconds>(cfg.request_timeout - timeout_s);
  client.set_connection_timeout(timeout_s.count(), timeout_us.count());
  client.set_read_timeout(timeout_s.count(), timeout_us.count());
  client.set_write_timeout(timeout_s.count(), timeout_us.count());
  if (auto token = resolve_auth_token(cfg)) client.set_bearer_token_auth(*token);

  const int attempts_allowed = cfg.retry.max_retries + 1;
  std::string last_error;
  auto backoff = cfg.retry.backoff;
  for (int attempt = 1; attempt <= attempts_allowed; ++attempt) {
    const auto t0 = std::chrono::steady_clock::now();
    auto res = client.Post(path, body, "application/json");
    const double latency =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!res) {
      last_error = httplib::to_string(res.error());
      if (attempt == attempts_allowed) {
        throw TransportError("transport error after " + std::to_string(attempt) + " attempts: " + last_error);
      }
    } else if (res->status != 200) {
      if (!retryable_status(res->status) || attempt == attempts_allowed) {
        throw HttpStatusError(res->status, res->body.substr(0, 512));
      }
    } else {
      GenerationResult r = parse_response_body(cfg, res->body);
      r.latency_ms = latency;
      r.attempts = attempt;
      return r;
    }
    std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
  throw TransportError("unreachable");
}

HttpBackend::HttpBackend(EndpointConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  parse_url(cfg_.base_url);
}

std::string HttpBackend::id() const { return cfg_.model_name + "@" + cfg_.base_url; }

GenerationResult HttpBackend::generate(const BackendCall& call) { return inference::generate(cfg_, call.request); }

}  // namespace attnbench::inference
