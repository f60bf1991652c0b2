#include "attnbench/grid.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "attnbench/errors.hpp"
#include "attnbench/text.hpp"

namespace attnbench::grid {

using nlohmann::json;
using promptkit::SegmentPhrase;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    out.flush();
    if (!out) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string pair_key(const std::string& id, const CellKey& cell) {
  return std::to_string(cell.gold_position) + '\x1f' + cell.segment_key() + '\x1f' + id;
}

struct Prepared {
  promptkit::TemplateSet templates;
  std::vector<corpus::QAInstance> sample;
  std::string dataset_digest;
  std::string spec_hash;
  ResultMeta meta;
};

Prepared prepare(const ExperimentSpec& spec, const std::string& backend_label) {
  corpus::IngestOptions io;
  io.contamination = spec.dataset.contamination;
  io.max_tokens = spec.dataset.max_tokens;
  io.policy = spec.policy;
  auto ingested = corpus::ingest(spec.dataset.path, spec.dataset.format, io);

  Prepared p{resolve_templates(spec), {}, file_digest(spec.dataset.path), "", {}};
  for (std::size_t idx : sample_indices(ingested.instances.size(), spec.sample_size, spec.seed)) {
    p.sample.push_back(std::move(ingested.instances[idx]));
  }
  if (spec.n > 0) {
    for (const auto& inst : p.sample) {
      if (inst.distractors.size() + 1 < spec.n) {
        throw ArrangeError("instance " + inst.id + " has " + std::to_string(inst.distractors.size()) +
                           " distractors; n = " + std::to_string(spec.n) + " needs " + std::to_string(spec.n - 1));
      }
    }
  }
  p.spec_hash = spec_hash(spec, p.dataset_digest, p.templates.version());

  ResultMeta& m = p.meta;
  m.spec_hash = p.spec_hash;
  m.template_version = p.templates.version();
  m.policy = spec.policy;
  m.backend_id = backend_label;
  m.dataset_digest = p.dataset_digest;
  std::string ids;
  for (const auto& inst : p.sample) {
    m.sample_ids.push_back(inst.id);
    ids += inst.id;
    ids.push_back('\n');
  }
  m.sample_digest = text::sha256_hex(ids);
  m.n = spec.n;
  m.kind = spec.kind;
  m.scheme = spec.scheme;
  m.mode = spec.mode;
  m.gold_positions = spec.mode == Mode::closed_book ? std::vector<std::size_t>{0} : spec.gold_positions;
  if (spec.segments.empty()) {
    m.segments = {std::nullopt};
  } else {
    for (const auto& s : spec.segments) m.segments.emplace_back(s);
  }
  m.max_failure_fraction = spec.max_failure_fraction;
  m.spec = semantic_json(spec, p.dataset_digest, p.templates.version());
  return p;
}

promptkit::PromptLayout build_layout(const ExperimentSpec& spec, const promptkit::TemplateSet& templates,
                                     const corpus::QAInstance& inst, const CellKey& cell) {
  if (spec.mode == Mode::closed_book) return promptkit::assemble_closed_book_prompt(inst.question, templates);
  const auto ctx = corpus::arrange(inst, spec.n, cell.gold_position);
  return promptkit::assemble_prompt(inst.question, ctx, spec.scheme, spec.kind, cell.segment, templates);
}

struct WorkItem {
  std::size_t instance;
  CellKey cell;
};

class Executor {
 public:
  Executor(const ExperimentSpec& spec, const Prepared& prep, inference::Backend& backend)
      : spec_(spec), prep_(prep), backend_(backend) {}

  InstanceRecord execute(const WorkItem& item) {
    const corpus::QAInstance& inst = prep_.sample[item.instance];
    InstanceRecord rec;
    rec.instance_id = inst.id;
    rec.cell = item.cell;

    inference::GenerationRequest req = spec_.generation;
    inference::MockCell mcell;
    mcell.gold_position = item.cell.gold_position;
    mcell.segment = item.cell.segment;
    mcell.n = spec_.n;
    mcell.scheme = spec_.scheme;
    mcell.oracle = spec_.mode == Mode::oracle;

    req.prompt = build_layout(spec_, prep_.templates, inst, item.cell).text;

    try {
      const inference::BackendCall call{inst, mcell, req};
      const inference::GenerationResult out = backend_.reads_prompt() ? cached(call) : direct(call);
      rec.correct = scoring::is_correct(out.text, inst.gold_answers, spec_.policy);
      rec.generation_digest = text::sha256_hex(out.text);
      rec.latency_ms = out.latency_ms;
      rec.attempts = out.attempts;
    } catch (const Error& e) {
      rec.error = e.what();
      rec.attempts = spec_.backend.kind == BackendKind::endpoint ? spec_.backend.endpoint.retry.max_retries + 1 : 1;
    }
    return rec;
  }

  RunStats stats() const {
    RunStats s;
    s.backend_calls = calls_.load();
    s.cache_hits = hits_.load();
    return s;
  }

 private:
  inference::GenerationResult direct(const inference::BackendCall& call) {
    ++calls_;
    return backend_.generate(call);
  }

  // Greedy generations of identical prompts are shared.
  inference::GenerationResult cached(const inference::BackendCall& call) {
    const std::string key = text::sha256_hex(call.request.prompt);
    std::shared_future<inference::GenerationResult> fut;
    std::promise<inference::GenerationResult> promise;
    bool owner = false;
    {
      std::lock_guard lock(cache_mu_);
      auto it = cache_.find(key);
      if (it == cache_.end()) {
        fut = promise.get_future().share();
        cache_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(direct(call));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    } else {
      ++hits_;
    }
    return fut.get();
  }

  const ExperimentSpec& spec_;
  const Prepared& prep_;
  inference::Backend& backend_;
  std::mutex cache_mu_;
  std::unordered_map<std::string, std::shared_future<inference::GenerationResult>> cache_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> hits_{0};
};

class RecordWriter {
 public:
  explicit RecordWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw Error("cannot open result file " + path.string());
  }
  void append(const InstanceRecord& rec) {
    const std::string line = to_json(rec).dump() + "\n";
    std::lock_guard lock(mu_);
    out_ << line;
    out_.flush();
  }

 private:
  std::mutex mu_;
  std::ofstream out_;
};

void write_manifest(const std::filesystem::path& result_path, const ResultMeta& meta, const std::string& started,
                    const std::string& finished) {
  json m = {{"spec_hash", meta.spec_hash},
            {"template_version", meta.template_version},
            {"dataset_digest", meta.dataset_digest},
            {"backend_id", meta.backend_id},
            {"outputs", json::array({result_path.filename().string()})},
            {"started", started},
            {"finished", finished}};
  write_atomically(manifest_path(result_path), m.dump(2) + "\n");
}

RunOutcome execute(const ExperimentSpec& spec, const Prepared& prep, const std::filesystem::path& path,
                   std::string meta_line, std::vector<InstanceRecord> existing, const RunOptions& options,
                   inference::Backend& backend) {
  std::map<std::string, bool> done;
  for (const auto& r : existing) {
    if (r.ok()) done[pair_key(r.instance_id, r.cell)] = true;
  }
  std::vector<WorkItem> items;
  for (const auto& cell : prep.meta.cells()) {
    for (std::size_t i = 0; i < prep.sample.size(); ++i) {
      if (!done.count(pair_key(prep.sample[i].id, cell))) items.push_back({i, cell});
    }
  }

  Executor exec(spec, prep, backend);
  RecordWriter writer(path);
  std::mutex mu;
  std::vector<InstanceRecord> fresh;
  std::atomic<std::size_t> next{0};
  const std::size_t limit = options.stop_after ? std::min(*options.stop_after, items.size()) : items.size();

  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= limit) return;
      InstanceRecord rec = exec.execute(items[i]);
      writer.append(rec);
      std::lock_guard lock(mu);
      fresh.push_back(std::move(rec));
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(backend.max_in_flight(), limit));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  existing.insert(existing.end(), std::make_move_iterator(fresh.begin()), std::make_move_iterator(fresh.end()));
  RunOutcome outcome;
  outcome.stats = exec.stats();
  outcome.stats.executed = limit;
  outcome.results = aggregate(prep.meta, meta_line, existing);
  outcome.finished = limit == items.size();
  if (outcome.finished) {
    // Re-fold the canonical records so the returned set equals a reload.
    std::vector<InstanceRecord> canonical;
    for (const auto& c : outcome.results.cells) canonical.insert(canonical.end(), c.records.begin(), c.records.end());
    outcome.results = aggregate(prep.meta, meta_line, canonical);
    write_atomically(path, outcome.results.serialize());
    const std::string now = options.clock ? options.clock() : utc_now();
    write_manifest(path, outcome.results.meta, outcome.results.meta.timestamp, now);
  }
  return outcome;
}

}  // namespace

// ---------------------------------------------------------------------------
// Serialization

json to_json(const InstanceRecord& r) {
  json j = {{"instance_id", r.instance_id},
            {"gold_position", r.cell.gold_position},
            {"segment", r.cell.segment ? json(r.cell.segment->key()) : json()},
            {"correct", r.correct},
            {"generation_digest", r.generation_digest},
            {"latency_ms", r.latency_ms},
            {"attempts", r.attempts}};
  if (r.error) j["error"] = *r.error;
  return j;
}

InstanceRecord record_from_json(const json& j) {
  try {
    InstanceRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.cell.gold_position = j.at("gold_position").get<std::size_t>();
    if (!j.at("segment").is_null()) r.cell.segment = SegmentPhrase::from_key(j["segment"].get<std::string>());
    r.correct = j.at("correct").get<bool>();
    r.generation_digest = j.at("generation_digest").get<std::string>();
    r.latency_ms = j.at("latency_ms").get<double>();
    r.attempts = j.at("attempts").get<int>();
    if (j.contains("error")) r.error = j["error"].get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw Error(std::string("bad result record: ") + e.what());
  }
}

std::vector<CellKey> ResultMeta::cells() const {
  std::vector<CellKey> out;
  for (std::size_t g : gold_positions) {
    for (const auto& s : segments) out.push_back(CellKey{g, s});
  }
  return out;
}

json to_json(const ResultMeta& m) {
  json segments = json::array();
  for (const auto& s : m.segments) segments.push_back(s ? json(s->key()) : json());
  return {{"type", "meta"},
          {"spec_hash", m.spec_hash},
          {"template_version", m.template_version},
          {"policy", scoring::to_json(m.policy)},
          {"normalization_note", "upstream answer normalization is unspecified; containment uses this policy"},
          {"backend_id", m.backend_id},
          {"timestamp", m.timestamp},
          {"dataset_digest", m.dataset_digest},
          {"sample_digest", m.sample_digest},
          {"sample_ids", m.sample_ids},
          {"n", m.n},
          {"instruction", promptkit::to_string(m.kind)},
          {"index", promptkit::to_string(m.scheme)},
          {"mode", to_string(m.mode)},
          {"gold_positions", m.gold_positions},
          {"segments", segments},
          {"max_failure_fraction", m.max_failure_fraction},
          {"manifest", m.manifest},
          {"spec", m.spec}};
}

ResultMeta meta_from_json(const json& j) {
  try {
    if (j.value("type", "") != "meta") throw Error("first line is not a metadata object");
    ResultMeta m;
    m.spec_hash = j.at("spec_hash").get<std::string>();
    m.template_version = j.at("template_version").get<std::string>();
    m.policy = scoring::policy_from_json(j.at("policy"));
    m.backend_id = j.at("backend_id").get<std::string>();
    m.timestamp = j.at("timestamp").get<std::string>();
    m.dataset_digest = j.at("dataset_digest").get<std::string>();
    m.sample_digest = j.at("sample_digest").get<std::string>();
    m.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
    m.n = j.at("n").get<std::size_t>();
    m.kind = promptkit::instruction_kind_from_string(j.at("instruction").get<std::string>());
    m.scheme = promptkit::index_scheme_from_string(j.at("index").get<std::string>());
    m.mode = mode_from_string(j.at("mode").get<std::string>());
    m.gold_positions = j.at("gold_positions").get<std::vector<std::size_t>>();
    for (const auto& s : j.at("segments")) {
      if (s.is_null()) {
        m.segments.emplace_back(std::nullopt);
      } else {
        m.segments.emplace_back(SegmentPhrase::from_key(s.get<std::string>()));
      }
    }
    m.max_failure_fraction = j.at("max_failure_fraction").get<double>();
    m.manifest = j.value("manifest", "");
    m.spec = j.value("spec", json::object());
    return m;
  } catch (const json::exception& e) {
    throw Error(std::string("bad result metadata: ") + e.what());
  }
}

bool ResultSet::complete() const {
  return !cells.empty() && std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.complete; });
}

const CellResult& ResultSet::cell(const CellKey& key) const {
  for (const auto& c : cells) {
    if (c.key == key) return c;
  }
  throw Error("no cell g=" + std::to_string(key.gold_position) + " segment=" + key.segment_key());
}

std::string ResultSet::serialize() const {
  std::string out = meta_line;
  out.push_back('\n');
  for (const auto& c : cells) {
    for (const auto& r : c.records) {
      out += to_json(r).dump();
      out.push_back('\n');
    }
  }
  return out;
}

ResultSet aggregate(ResultMeta meta, std::string meta_line, const std::vector<InstanceRecord>& records) {
  std::unordered_map<std::string, std::size_t> index_of;
  for (std::size_t i = 0; i < meta.sample_ids.size(); ++i) index_of.emplace(meta.sample_ids[i], i);

  // Per (cell, instance) the successful record wins over failures.
  std::map<CellKey, std::vector<const InstanceRecord*>> slots;
  for (const auto& key : meta.cells()) slots[key].assign(meta.sample_ids.size(), nullptr);

  for (const auto& r : records) {
    auto cell_it = slots.find(r.cell);
    if (cell_it == slots.end()) {
      throw Error("record for unknown cell g=" + std::to_string(r.cell.gold_position) + " segment=" + r.cell.segment_key());
    }
    auto idx_it = index_of.find(r.instance_id);
    if (idx_it == index_of.end()) throw Error("record for unsampled instance " + r.instance_id);
    const InstanceRecord*& best = cell_it->second[idx_it->second];
    if (best == nullptr || (!best->ok() && r.ok())) best = &r;
  }

  ResultSet rs;
  rs.meta = std::move(meta);
  rs.meta_line = std::move(meta_line);
  for (const auto& key : rs.meta.cells()) {
    CellResult c;
    c.key = key;
    c.n_expected = rs.meta.sample_ids.size();
    bool all_present = true;
    for (const InstanceRecord* r : slots[key]) {
      if (r == nullptr) {
        all_present = false;
        continue;
      }
      c.records.push_back(*r);
      if (!r->ok()) {
        ++c.n_failed;
        continue;
      }
      ++c.n_evaluated;
      if (r->correct) ++c.n_correct;
    }
    c.accuracy = c.n_evaluated ? static_cast<double>(c.n_correct) / static_cast<double>(c.n_evaluated) : 0.0;
    const double failure_rate =
        c.n_expected ? static_cast<double>(c.n_failed) / static_cast<double>(c.n_expected) : 0.0;
    c.complete = all_present && c.n_expected > 0 && c.n_evaluated > 0 && failure_rate <= rs.meta.max_failure_fraction;
    rs.cells.push_back(std::move(c));
  }
  return rs;
}

namespace {

struct ParsedFile {
  std::string meta_line;
  ResultMeta meta;
  std::vector<InstanceRecord> records;
};

ParsedFile parse_result_file(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  ParsedFile f;
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos < data.size()) {
    std::size_t eol = data.find('\n', pos);
    const bool terminated = eol != std::string::npos;
    if (!terminated) eol = data.size();
    lines.push_back(data.substr(pos, eol - pos));
    pos = eol + 1;
  }
  if (lines.empty()) throw Error("empty result file " + path.string());
  f.meta_line = lines.front();
  try {
    f.meta = meta_from_json(json::parse(f.meta_line));
  } catch (const json::parse_error& e) {
    throw Error("bad result metadata in " + path.string() + ": " + e.what());
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error&) {
      // A torn final line is what an interrupted append leaves behind.
      if (i + 1 == lines.size()) break;
      throw Error("corrupt record at line " + std::to_string(i + 1) + " of " + path.string());
    }
    f.records.push_back(record_from_json(j));
  }
  return f;
}

}  // namespace

ResultSet load_results(const std::filesystem::path& path) {
  ParsedFile f = parse_result_file(path);
  return aggregate(std::move(f.meta), std::move(f.meta_line), f.records);
}

std::vector<std::size_t> sample_indices(std::size_t population, std::optional<std::size_t> sample_size,
                                        std::uint64_t seed) {
  std::vector<std::size_t> idx(population);
  for (std::size_t i = 0; i < population; ++i) idx[i] = i;
  if (!sample_size || *sample_size >= population) return idx;

  // Fisher-Yates with an explicitly defined draw, so the selection does not
  // depend on the standard library's distribution implementation.
  std::mt19937_64 rng(seed);
  const auto draw = [&](std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = 0;
    do {
      x = rng();
    } while (x >= limit);
    return x % bound;
  };
  for (std::size_t i = population; i > 1; --i) {
    std::swap(idx[i - 1], idx[draw(i)]);
  }
  idx.resize(*sample_size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string file_digest(const std::filesystem::path& path) { return text::sha256_hex(read_file(path)); }

std::vector<CellPrompt> cell_prompts(const ExperimentSpec& spec, const std::optional<std::string>& instance_id) {
  const Prepared prep = prepare(spec, backend_id(spec));
  if (prep.sample.empty()) throw Error("the sample is empty");
  const corpus::QAInstance* inst = &prep.sample.front();
  if (instance_id) {
    const auto it = std::find_if(prep.sample.begin(), prep.sample.end(),
                                 [&](const corpus::QAInstance& q) { return q.id == *instance_id; });
    if (it == prep.sample.end()) throw Error("instance " + *instance_id + " is not in the sample");
    inst = &*it;
  }
  std::vector<CellPrompt> out;
  for (const auto& cell : prep.meta.cells()) out.push_back({inst->id, cell, build_layout(spec, prep.templates, *inst, cell)});
  return out;
}

std::filesystem::path manifest_path(const std::filesystem::path& result_path) {
  auto p = result_path;
  p += ".manifest.json";
  return p;
}

std::shared_ptr<inference::Backend> make_backend(const ExperimentSpec& spec) {
  if (spec.backend.kind == BackendKind::mock) {
    return std::make_shared<inference::MockBackend>(spec.backend.mock, spec.backend.mock_max_in_flight);
  }
  return std::make_shared<inference::HttpBackend>(spec.backend.endpoint);
}

RunOutcome run(const ExperimentSpec& spec, const RunOptions& options) {
  if (spec.output.empty()) throw SpecError("missing key: output");
  if (std::filesystem::exists(spec.output)) {
    throw Error("result file " + spec.output.string() + " exists; resume it instead");
  }
  auto backend = options.backend ? options.backend : make_backend(spec);
  Prepared prep = prepare(spec, backend->id());
  prep.meta.timestamp = options.clock ? options.clock() : utc_now();
  prep.meta.manifest = manifest_path(spec.output).filename().string();
  const std::string meta_line = to_json(prep.meta).dump();

  if (spec.output.has_parent_path()) std::filesystem::create_directories(spec.output.parent_path());
  write_atomically(spec.output, meta_line + "\n");
  return execute(spec, prep, spec.output, meta_line, {}, options, *backend);
}

RunOutcome resume(const std::filesystem::path& result_path, const ExperimentSpec& spec, const RunOptions& options) {
  if (!std::filesystem::exists(result_path)) throw ResumeError("no result file to resume: " + result_path.string());
  ParsedFile f = parse_result_file(result_path);
  auto backend = options.backend ? options.backend : make_backend(spec);
  Prepared prep = prepare(spec, backend->id());
  if (f.meta.spec_hash != prep.spec_hash) {
    throw ResumeError("spec hash mismatch: " + result_path.string() + " was produced by spec " + f.meta.spec_hash +
                      ", current spec is " + prep.spec_hash);
  }
  // Keep the original metadata (timestamp, backend label) verbatim.
  prep.meta = f.meta;

  // Rewrite without any torn tail so appends start on a fresh line.
  std::string clean = f.meta_line + "\n";
  for (const auto& r : f.records) clean += to_json(r).dump() + "\n";
  write_atomically(result_path, clean);
  return execute(spec, prep, result_path, f.meta_line, std::move(f.records), options, *backend);
}

}  // namespace attnbench::grid
