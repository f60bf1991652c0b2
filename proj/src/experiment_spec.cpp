#include "attnbench/experiment_spec.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "attnbench/errors.hpp"
#include "attnbench/text.hpp"

namespace attnbench::grid {

using nlohmann::json;
using promptkit::IndexScheme;
using promptkit::InstructionKind;
using promptkit::SegmentPhrase;

namespace {

// Walks an object and rejects keys outside `allowed`.
void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw SpecError((where.empty() ? "spec" : where) + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw SpecError("unknown key: " + (where.empty() ? key : where + "." + key));
    }
  }
}

template <typename T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw SpecError("bad value for " + key + ": " + j.dump());
  }
}

std::size_t get_count(const json& j, const std::string& key) {
  if (!j.is_number_integer() || j.get<long long>() < 0) throw SpecError(key + ": expected a nonnegative integer");
  return j.get<std::size_t>();
}

std::filesystem::path resolve_path(const std::string& p, const std::filesystem::path& base) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal();
}

inference::MockProfile parse_mock(const json& j, std::uint64_t default_seed,
                                  const std::vector<std::size_t>& positions, std::size_t& max_in_flight) {
  check_keys(j, "backend.mock",
             {"base_accuracy", "follow", "boost", "penalty", "seed", "closed_book_accuracy", "oracle_accuracy",
              "max_in_flight"});
  inference::MockProfile p;
  p.seed = default_seed;
  if (j.contains("base_accuracy")) {
    const json& a = j["base_accuracy"];
    if (a.is_array()) {
      if (a.size() != positions.size()) {
        throw SpecError("backend.mock.base_accuracy: list needs one value per gold position (" +
                        std::to_string(positions.size()) + ")");
      }
      for (std::size_t i = 0; i < a.size(); ++i) {
        p.base_accuracy[positions[i]] = get_as<double>(a[i], "backend.mock.base_accuracy");
      }
    } else if (a.is_object()) {
      for (const auto& [k, v] : a.items()) {
        std::size_t pos = 0;
        try {
          pos = std::stoul(k);
        } catch (const std::exception&) {
          throw SpecError("backend.mock.base_accuracy: bad position " + k);
        }
        p.base_accuracy[pos] = get_as<double>(v, "backend.mock.base_accuracy." + k);
      }
    } else {
      throw SpecError("backend.mock.base_accuracy: expected a list or an object");
    }
  }
  if (j.contains("follow")) p.follow = get_as<double>(j["follow"], "backend.mock.follow");
  if (j.contains("boost")) p.boost = get_as<double>(j["boost"], "backend.mock.boost");
  if (j.contains("penalty")) p.penalty = get_as<double>(j["penalty"], "backend.mock.penalty");
  if (j.contains("seed")) p.seed = get_as<std::uint64_t>(j["seed"], "backend.mock.seed");
  if (j.contains("closed_book_accuracy")) {
    p.closed_book_accuracy = get_as<double>(j["closed_book_accuracy"], "backend.mock.closed_book_accuracy");
  }
  if (j.contains("oracle_accuracy")) {
    p.oracle_accuracy = get_as<double>(j["oracle_accuracy"], "backend.mock.oracle_accuracy");
  }
  if (j.contains("max_in_flight")) max_in_flight = get_count(j["max_in_flight"], "backend.mock.max_in_flight");
  inference::validate(p);
  return p;
}

inference::EndpointConfig parse_endpoint(const json& j) {
  check_keys(j, "backend.endpoint",
             {"base_url", "model", "auth_token", "max_in_flight", "timeout_ms", "max_retries", "backoff_ms", "shape"});
  inference::EndpointConfig e;
  if (j.contains("base_url")) e.base_url = get_as<std::string>(j["base_url"], "backend.endpoint.base_url");
  if (j.contains("model")) e.model_name = get_as<std::string>(j["model"], "backend.endpoint.model");
  if (j.contains("auth_token")) e.auth_token = get_as<std::string>(j["auth_token"], "backend.endpoint.auth_token");
  if (j.contains("max_in_flight")) e.max_in_flight = get_count(j["max_in_flight"], "backend.endpoint.max_in_flight");
  if (j.contains("timeout_ms")) {
    e.request_timeout = std::chrono::milliseconds(get_count(j["timeout_ms"], "backend.endpoint.timeout_ms"));
  }
  if (j.contains("max_retries")) {
    e.retry.max_retries = static_cast<int>(get_count(j["max_retries"], "backend.endpoint.max_retries"));
  }
  if (j.contains("backoff_ms")) {
    e.retry.backoff = std::chrono::milliseconds(get_count(j["backoff_ms"], "backend.endpoint.backoff_ms"));
  }
  if (j.contains("shape")) {
    const auto s = get_as<std::string>(j["shape"], "backend.endpoint.shape");
    if (s == "completions") {
      e.shape = inference::EndpointShape::completions;
    } else if (s == "chat") {
      e.shape = inference::EndpointShape::chat;
    } else {
      throw SpecError("backend.endpoint.shape: expected completions or chat, got " + s);
    }
  }
  return e;
}

}  // namespace

std::string to_string(Mode m) {
  switch (m) {
    case Mode::grid:
      return "grid";
    case Mode::baseline_no_instruction:
      return "baseline_no_instruction";
    case Mode::closed_book:
      return "closed_book";
    case Mode::oracle:
      return "oracle";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  for (auto m : {Mode::grid, Mode::baseline_no_instruction, Mode::closed_book, Mode::oracle}) {
    if (s == to_string(m)) return m;
  }
  throw SpecError("unknown mode: " + s);
}

std::vector<std::size_t> default_gold_positions(std::size_t n) {
  if (n == 0) return {};
  if (n % 3 != 0) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i + 1;
    return all;
  }
  const std::size_t k = n / 3;
  return {(k + 1) / 2, k + (k + 1) / 2, 2 * k + (k + 1) / 2};
}

std::vector<SegmentPhrase> default_segments(InstructionKind kind, IndexScheme scheme, std::size_t n,
                                            const std::vector<std::size_t>& gold_positions) {
  using promptkit::PositionWord;
  if (kind == InstructionKind::none) return {};
  const std::vector<SegmentPhrase> thirds = {SegmentPhrase::position(PositionWord::beginning),
                                             SegmentPhrase::position(PositionWord::midsection),
                                             SegmentPhrase::position(PositionWord::tail)};
  if (kind == InstructionKind::relative) return thirds;
  if (scheme == IndexScheme::position) return thirds;
  if (scheme == IndexScheme::id_ascending || scheme == IndexScheme::id_reversed) {
    std::set<std::size_t> ids;
    for (std::size_t g : gold_positions) ids.insert(promptkit::label_id(scheme, g, n));
    std::vector<SegmentPhrase> out;
    for (std::size_t id : ids) out.push_back(SegmentPhrase::document(id));
    return out;
  }
  throw SpecError("absolute instruction needs an ID or position index");
}

void apply_overrides(json& doc, const Overrides& o) {
  if (!doc.is_object()) throw SpecError("spec: expected an object");
  if (o.dataset) doc["dataset"]["path"] = *o.dataset;
  if (o.format) doc["dataset"]["format"] = *o.format;
  if (o.out) doc["output"] = *o.out;
  if (o.seed) doc["seed"] = *o.seed;
  if (o.sample_size) {
    if (*o.sample_size == "all") {
      doc["sample_size"] = "all";
    } else {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(*o.sample_size, &used);
        if (used != o.sample_size->size()) throw std::invalid_argument("trailing");
        doc["sample_size"] = v;
      } catch (const std::exception&) {
        throw SpecError("--sample-size: expected an integer or \"all\", got " + *o.sample_size);
      }
    }
  }
  if (o.backend) {
    if (*o.backend == "mock") {
      doc["backend"]["type"] = "mock";
    } else if (o.backend->rfind("http://", 0) == 0 || o.backend->rfind("https://", 0) == 0) {
      doc["backend"]["type"] = "endpoint";
      doc["backend"]["endpoint"]["base_url"] = *o.backend;
    } else {
      throw SpecError("--backend: expected \"mock\" or an http(s) URL, got " + *o.backend);
    }
  }
}

ExperimentSpec parse_spec(const json& doc, const std::filesystem::path& base_dir) {
  check_keys(doc, "",
             {"dataset", "n", "gold_positions", "instruction", "index", "segments", "sample_size", "seed", "mode",
              "templates", "generation", "scoring", "backend", "max_failure_fraction", "output", "probe_model"});
  ExperimentSpec s;

  if (!doc.contains("dataset")) throw SpecError("missing key: dataset");
  const json& ds = doc["dataset"];
  check_keys(ds, "dataset", {"path", "format", "contamination", "max_tokens"});
  if (!ds.contains("path")) throw SpecError("missing key: dataset.path");
  s.dataset.path = resolve_path(get_as<std::string>(ds["path"], "dataset.path"), base_dir);
  if (ds.contains("format")) s.dataset.format = corpus::format_from_string(get_as<std::string>(ds["format"], "dataset.format"));
  if (ds.contains("contamination")) {
    s.dataset.contamination =
        corpus::contamination_from_string(get_as<std::string>(ds["contamination"], "dataset.contamination"));
  }
  if (ds.contains("max_tokens") && !ds["max_tokens"].is_null()) {
    s.dataset.max_tokens = get_count(ds["max_tokens"], "dataset.max_tokens");
    if (*s.dataset.max_tokens == 0) throw SpecError("dataset.max_tokens must be at least 1");
  }

  if (doc.contains("mode")) s.mode = mode_from_string(get_as<std::string>(doc["mode"], "mode"));
  if (doc.contains("n")) s.n = get_count(doc["n"], "n");
  if (doc.contains("instruction")) {
    s.kind = promptkit::instruction_kind_from_string(get_as<std::string>(doc["instruction"], "instruction"));
  }
  if (doc.contains("index")) s.scheme = promptkit::index_scheme_from_string(get_as<std::string>(doc["index"], "index"));

  switch (s.mode) {
    case Mode::grid:
      break;
    case Mode::baseline_no_instruction:
      if (s.kind != InstructionKind::none) throw SpecError("mode baseline_no_instruction requires instruction none");
      break;
    case Mode::closed_book:
      if (s.kind != InstructionKind::none) throw SpecError("mode closed_book requires instruction none");
      s.n = 0;
      break;
    case Mode::oracle:
      if (s.kind != InstructionKind::none) throw SpecError("mode oracle requires instruction none");
      if (doc.contains("n") && s.n != 1) throw SpecError("mode oracle uses n = 1");
      s.n = 1;
      break;
  }
  if (s.mode != Mode::closed_book && s.n == 0) throw SpecError("n must be at least 1");

  if (doc.contains("gold_positions")) {
    if (s.mode == Mode::closed_book) throw SpecError("gold_positions: closed_book mode has no documents");
    for (const auto& g : doc["gold_positions"]) s.gold_positions.push_back(get_count(g, "gold_positions"));
    if (s.gold_positions.empty()) throw SpecError("gold_positions must not be empty");
  } else {
    s.gold_positions = default_gold_positions(s.n);
  }
  for (std::size_t g : s.gold_positions) {
    if (g < 1 || g > s.n) throw SpecError("gold_positions: " + std::to_string(g) + " outside 1.." + std::to_string(s.n));
  }

  if (doc.contains("segments")) {
    if (!doc["segments"].is_array()) throw SpecError("segments: expected a list");
    for (const auto& k : doc["segments"]) s.segments.push_back(SegmentPhrase::from_key(get_as<std::string>(k, "segments")));
  } else if (s.mode != Mode::closed_book) {
    s.segments = default_segments(s.kind, s.scheme, s.n, s.gold_positions);
  }
  if (s.kind == InstructionKind::none && !s.segments.empty()) {
    throw SpecError("segments: instruction none takes no segments");
  }
  if (s.kind != InstructionKind::none && s.segments.empty()) {
    throw SpecError("segments: instruction " + promptkit::to_string(s.kind) + " needs at least one segment");
  }
  if (s.mode != Mode::closed_book) {
    try {
      if (s.segments.empty()) {
        promptkit::check_combination(s.kind, s.scheme, std::nullopt, s.n);
      }
      for (const auto& seg : s.segments) promptkit::check_combination(s.kind, s.scheme, seg, s.n);
    } catch (const PromptError& e) {
      throw SpecError(e.what());
    }
  }

  if (doc.contains("sample_size")) {
    const json& v = doc["sample_size"];
    if (v.is_string() && v.get<std::string>() == "all") {
      s.sample_size.reset();
    } else {
      s.sample_size = get_count(v, "sample_size");
      if (*s.sample_size == 0) throw SpecError("sample_size must be at least 1 or \"all\"");
    }
  } else {
    s.sample_size = 200;
  }
  if (doc.contains("seed")) s.seed = get_as<std::uint64_t>(doc["seed"], "seed");
  if (doc.contains("templates")) {
    s.templates = get_as<std::string>(doc["templates"], "templates");
    if (s.templates != "builtin") s.templates = resolve_path(s.templates, base_dir).string();
  }
  if (doc.contains("generation")) {
    const json& g = doc["generation"];
    check_keys(g, "generation", {"max_new_tokens", "temperature", "stop"});
    if (g.contains("max_new_tokens")) {
      s.generation.max_new_tokens = static_cast<int>(get_count(g["max_new_tokens"], "generation.max_new_tokens"));
    }
    if (g.contains("temperature")) s.generation.temperature = get_as<double>(g["temperature"], "generation.temperature");
    if (g.contains("stop")) s.generation.stop_sequences = get_as<std::vector<std::string>>(g["stop"], "generation.stop");
  }
  inference::validate(s.generation);
  if (doc.contains("scoring")) s.policy = scoring::policy_from_json(doc["scoring"]);

  if (doc.contains("backend")) {
    const json& b = doc["backend"];
    check_keys(b, "backend", {"type", "mock", "endpoint"});
    const std::string type = b.contains("type") ? get_as<std::string>(b["type"], "backend.type") : "mock";
    if (type == "mock") {
      s.backend.kind = BackendKind::mock;
    } else if (type == "endpoint") {
      s.backend.kind = BackendKind::endpoint;
    } else {
      throw SpecError("backend.type: expected mock or endpoint, got " + type);
    }
    if (b.contains("mock")) {
      s.backend.mock = parse_mock(b["mock"], s.seed, s.gold_positions, s.backend.mock_max_in_flight);
    } else {
      s.backend.mock.seed = s.seed;
    }
    if (b.contains("endpoint")) s.backend.endpoint = parse_endpoint(b["endpoint"]);
    if (s.backend.kind == BackendKind::endpoint) inference::validate(s.backend.endpoint);
  } else {
    s.backend.mock.seed = s.seed;
  }

  if (doc.contains("max_failure_fraction")) {
    s.max_failure_fraction = get_as<double>(doc["max_failure_fraction"], "max_failure_fraction");
    if (s.max_failure_fraction < 0.0 || s.max_failure_fraction > 1.0) {
      throw SpecError("max_failure_fraction outside [0, 1]");
    }
  }
  if (doc.contains("output")) s.output = resolve_path(get_as<std::string>(doc["output"], "output"), base_dir);
  if (doc.contains("probe_model")) s.probe_model = get_as<std::string>(doc["probe_model"], "probe_model");
  return s;
}

ExperimentSpec load_spec(const std::filesystem::path& file, const Overrides& overrides) {
  std::ifstream in(file);
  if (!in) throw SpecError("cannot open spec file: " + file.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw SpecError("spec file " + file.string() + " is not valid JSON: " + e.what());
  }
  apply_overrides(doc, overrides);
  return parse_spec(doc, file.parent_path());
}

promptkit::TemplateSet resolve_templates(const ExperimentSpec& spec) {
  if (spec.templates == "builtin") return promptkit::TemplateSet::builtin();
  return promptkit::TemplateSet::load(spec.templates);
}

std::string backend_id(const ExperimentSpec& spec) {
  if (spec.backend.kind == BackendKind::mock) return inference::MockBackend(spec.backend.mock).id();
  return inference::HttpBackend(spec.backend.endpoint).id();
}

json semantic_json(const ExperimentSpec& s, const std::string& dataset_digest, const std::string& template_version) {
  json segments = json::array();
  for (const auto& seg : s.segments) segments.push_back(seg.key());
  json backend;
  if (s.backend.kind == BackendKind::mock) {
    json base = json::object();
    for (const auto& [pos, a] : s.backend.mock.base_accuracy) base[std::to_string(pos)] = a;
    backend = {{"type", "mock"},
               {"base_accuracy", base},
               {"follow", s.backend.mock.follow},
               {"boost", s.backend.mock.boost},
               {"penalty", s.backend.mock.penalty},
               {"seed", s.backend.mock.seed},
               {"closed_book_accuracy", s.backend.mock.closed_book_accuracy ? json(*s.backend.mock.closed_book_accuracy) : json()},
               {"oracle_accuracy", s.backend.mock.oracle_accuracy ? json(*s.backend.mock.oracle_accuracy) : json()}};
  } else {
    backend = {{"type", "endpoint"},
               {"base_url", s.backend.endpoint.base_url},
               {"model", s.backend.endpoint.model_name},
               {"shape", s.backend.endpoint.shape == inference::EndpointShape::chat ? "chat" : "completions"}};
  }
  return {{"dataset",
           {{"digest", dataset_digest},
            {"format", corpus::to_string(s.dataset.format)},
            {"contamination", corpus::to_string(s.dataset.contamination)},
            {"max_tokens", s.dataset.max_tokens ? json(*s.dataset.max_tokens) : json()}}},
          {"n", s.n},
          {"gold_positions", s.gold_positions},
          {"instruction", promptkit::to_string(s.kind)},
          {"index", promptkit::to_string(s.scheme)},
          {"segments", segments},
          {"sample_size", s.sample_size ? json(*s.sample_size) : json("all")},
          {"seed", s.seed},
          {"mode", to_string(s.mode)},
          {"template_version", template_version},
          {"generation",
           {{"max_new_tokens", s.generation.max_new_tokens},
            {"temperature", s.generation.temperature},
            {"stop", s.generation.stop_sequences}}},
          {"scoring", scoring::to_json(s.policy)},
          {"backend", backend},
          {"max_failure_fraction", s.max_failure_fraction}};
}

std::string spec_hash(const ExperimentSpec& spec, const std::string& dataset_digest,
                      const std::string& template_version) {
  return text::sha256_hex(semantic_json(spec, dataset_digest, template_version).dump());
}

}  // namespace attnbench::grid
