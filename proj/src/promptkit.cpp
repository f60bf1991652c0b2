#include "attnbench/promptkit.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "attnbench/errors.hpp"
#include "attnbench/text.hpp"

namespace attnbench::promptkit {

namespace detail {
const std::map<std::string, std::string>& builtin_template_files();
}

namespace {

const char* const kSep = "\n\n";

// Single-pass substitution of {name} placeholders. Unknown names and stray
// braces are copied through. `offsets` receives the output offset of each
// substituted placeholder.
std::string substitute(std::string_view tpl, const std::map<std::string, std::string>& vars,
                       std::map<std::string, std::vector<std::size_t>>* offsets = nullptr) {
  std::string out;
  out.reserve(tpl.size() + 64);
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] == '{') {
      const std::size_t close = tpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const std::string name(tpl.substr(i + 1, close - i - 1));
        auto it = vars.find(name);
        if (it != vars.end()) {
          if (offsets) (*offsets)[name].push_back(out.size());
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(tpl[i++]);
  }
  return out;
}

std::size_t count_placeholder(std::string_view tpl, std::string_view name) {
  const std::string needle = "{" + std::string(name) + "}";
  std::size_t count = 0;
  for (std::size_t p = tpl.find(needle); p != std::string_view::npos; p = tpl.find(needle, p + needle.size())) {
    ++count;
  }
  return count;
}

void require(const TemplateSet& t, const char* file, std::initializer_list<const char*> names) {
  const std::string body = t.get(file);
  for (const char* n : names) {
    if (count_placeholder(body, n) == 0) {
      throw TemplateError(std::string("template ") + file + " is missing placeholder {" + n + "}");
    }
  }
}

const std::vector<const char*>& required_files() {
  static const std::vector<const char*> files = {
      TemplateSet::kTask,           TemplateSet::kTaskClosedBook,      TemplateSet::kAttentionRelative,
      TemplateSet::kAttentionAbsoluteId, TemplateSet::kAttentionAbsolutePosition, TemplateSet::kSearchResults,
      TemplateSet::kDocumentId,     TemplateSet::kDocumentPosition,    TemplateSet::kDocumentPlain,
      TemplateSet::kQuestion};
  return files;
}

}  // namespace

std::string to_string(IndexScheme s) {
  switch (s) {
    case IndexScheme::none:
      return "none";
    case IndexScheme::id_ascending:
      return "id_ascending";
    case IndexScheme::id_reversed:
      return "id_reversed";
    case IndexScheme::position:
      return "position";
  }
  return "?";
}

std::string to_string(InstructionKind k) {
  switch (k) {
    case InstructionKind::none:
      return "none";
    case InstructionKind::relative:
      return "relative";
    case InstructionKind::absolute:
      return "absolute";
  }
  return "?";
}

std::string to_string(PositionWord w) {
  switch (w) {
    case PositionWord::beginning:
      return "beginning";
    case PositionWord::midsection:
      return "midsection";
    case PositionWord::tail:
      return "tail";
  }
  return "?";
}

std::string to_string(Part p) {
  switch (p) {
    case Part::task_instruction:
      return "task_instruction";
    case Part::attention_instruction:
      return "attention_instruction";
    case Part::search_results:
      return "search_results";
    case Part::question:
      return "question";
  }
  return "?";
}

IndexScheme index_scheme_from_string(std::string_view s) {
  for (auto v : {IndexScheme::none, IndexScheme::id_ascending, IndexScheme::id_reversed, IndexScheme::position}) {
    if (s == to_string(v)) return v;
  }
  throw SpecError("unknown index scheme: " + std::string(s));
}

InstructionKind instruction_kind_from_string(std::string_view s) {
  for (auto v : {InstructionKind::none, InstructionKind::relative, InstructionKind::absolute}) {
    if (s == to_string(v)) return v;
  }
  throw SpecError("unknown instruction kind: " + std::string(s));
}

PositionWord position_word_from_string(std::string_view s) {
  for (auto v : {PositionWord::beginning, PositionWord::midsection, PositionWord::tail}) {
    if (s == to_string(v)) return v;
  }
  throw SpecError("unknown position word: " + std::string(s));
}

PositionWord third_of(std::size_t slot, std::size_t n) {
  if (n == 0 || slot < 1 || slot > n) throw PromptError("slot outside 1..n");
  return static_cast<PositionWord>((slot - 1) * 3 / n);
}

SegmentPhrase SegmentPhrase::from_key(std::string_view key) {
  if (key.rfind("doc_", 0) == 0) {
    const std::string digits(key.substr(4));
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos || digits.size() > 9) {
      throw SpecError("bad segment key: " + std::string(key));
    }
    const auto id = static_cast<std::size_t>(std::stoul(digits));
    if (id == 0) throw SpecError("bad segment key: " + std::string(key));
    return document(id);
  }
  try {
    return position(position_word_from_string(key));
  } catch (const SpecError&) {
    throw SpecError("bad segment key: " + std::string(key));
  }
}

std::string SegmentPhrase::key() const {
  if (is_position_word()) return to_string(position_word());
  return "doc_" + std::to_string(document_id());
}

// ---------------------------------------------------------------------------
// TemplateSet

TemplateSet TemplateSet::from_files(std::map<std::string, std::string> files) {
  TemplateSet t;
  t.files_ = std::move(files);
  for (const char* f : required_files()) {
    if (!t.files_.count(f)) throw TemplateError(std::string("template set is missing ") + f);
  }
  std::string digest_input;
  for (const auto& [name, content] : t.files_) {
    digest_input += name;
    digest_input.push_back('\0');
    digest_input += content;
    digest_input.push_back('\0');
  }
  t.version_ = text::sha256_hex(digest_input);
  t.name_ = "unnamed";
  if (auto it = t.files_.find(kManifest); it != t.files_.end()) {
    try {
      const auto m = nlohmann::json::parse(it->second);
      t.name_ = m.value("name", t.name_);
      t.reconstructed_ = m.value("reconstructed", false);
    } catch (const nlohmann::json::exception& e) {
      throw TemplateError(std::string("bad template manifest: ") + e.what());
    }
  }
  require(t, kAttentionRelative, {"segment"});
  require(t, kAttentionAbsoluteId, {"segment"});
  require(t, kAttentionAbsolutePosition, {"segment"});
  require(t, kSearchResults, {"search_results"});
  require(t, kDocumentId, {"label", "title", "body"});
  require(t, kDocumentPosition, {"label", "title", "body"});
  require(t, kDocumentPlain, {"title", "body"});
  require(t, kQuestion, {"question"});
  if (count_placeholder(t.get(kSearchResults), "search_results") != 1) {
    throw TemplateError("template search_results.txt must contain {search_results} exactly once");
  }
  return t;
}

const TemplateSet& TemplateSet::builtin() {
  static const TemplateSet set = from_files(detail::builtin_template_files());
  return set;
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw TemplateError("not a template directory: " + dir.string());
  std::map<std::string, std::string> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[entry.path().filename().string()] = ss.str();
  }
  return from_files(std::move(files));
}

std::string TemplateSet::get(const std::string& name) const {
  auto it = files_.find(name);
  if (it == files_.end()) throw TemplateError("no template named " + name);
  std::string s = it->second;
  if (!s.empty() && s.back() == '\n') s.pop_back();
  return s;
}

void TemplateSet::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : files_) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    if (!out) throw TemplateError("cannot write " + (dir / name).string());
  }
}

// ---------------------------------------------------------------------------
// Rendering

std::string_view PromptLayout::part_text(Part p) const {
  const auto& s = part_spans[static_cast<std::size_t>(p)];
  return std::string_view(text).substr(s.char_start, s.char_end - s.char_start);
}

std::string_view PromptLayout::doc_text(std::size_t slot) const {
  for (const auto& d : doc_spans) {
    if (d.slot == slot) return std::string_view(text).substr(d.char_start, d.char_end - d.char_start);
  }
  throw PromptError("no document in slot " + std::to_string(slot));
}

nlohmann::ordered_json layout_to_json(const PromptLayout& layout) {
  const std::string_view text = layout.text;
  const auto cp = [&](std::size_t byte) { return text::code_point_count(text.substr(0, byte)); };
  nlohmann::ordered_json j;
  j["text"] = layout.text;
  j["prompt_digest"] = text::sha256_hex(layout.text);
  j["part_spans"] = nlohmann::ordered_json::array();
  for (const auto& p : layout.part_spans) {
    j["part_spans"].push_back({{"name", to_string(p.name)},
                               {"char_start", p.char_start},
                               {"char_end", p.char_end},
                               {"cp_start", cp(p.char_start)},
                               {"cp_end", cp(p.char_end)}});
  }
  j["doc_spans"] = nlohmann::ordered_json::array();
  for (const auto& d : layout.doc_spans) {
    j["doc_spans"].push_back({{"slot", d.slot},
                              {"char_start", d.char_start},
                              {"char_end", d.char_end},
                              {"cp_start", cp(d.char_start)},
                              {"cp_end", cp(d.char_end)}});
  }
  return j;
}

PromptLayout layout_from_json(const nlohmann::json& j) {
  try {
    PromptLayout layout;
    layout.text = j.at("text").get<std::string>();
    const auto& parts = j.at("part_spans");
    if (!parts.is_array() || parts.size() != layout.part_spans.size()) throw PromptError("layout needs four part spans");
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const auto name = static_cast<Part>(i);
      if (parts[i].at("name").get<std::string>() != to_string(name)) {
        throw PromptError("layout part " + std::to_string(i) + " must be " + to_string(name));
      }
      PartSpan span{name, parts[i].at("char_start").get<std::size_t>(), parts[i].at("char_end").get<std::size_t>()};
      if (span.char_start != cursor || span.char_end < span.char_start || span.char_end > layout.text.size()) {
        throw PromptError("part spans must tile the prompt text");
      }
      cursor = span.char_end;
      layout.part_spans[i] = span;
    }
    if (cursor != layout.text.size()) throw PromptError("part spans must tile the prompt text");
    const auto& search = layout.part_spans[static_cast<std::size_t>(Part::search_results)];
    for (const auto& d : j.at("doc_spans")) {
      DocSpan span{d.at("slot").get<std::size_t>(), d.at("char_start").get<std::size_t>(),
                   d.at("char_end").get<std::size_t>()};
      if (span.char_start < search.char_start || span.char_end > search.char_end || span.char_end < span.char_start) {
        throw PromptError("document span outside the search results");
      }
      layout.doc_spans.push_back(span);
    }
    return layout;
  } catch (const nlohmann::json::exception& e) {
    throw PromptError(std::string("malformed layout: ") + e.what());
  }
}

std::size_t label_id(IndexScheme scheme, std::size_t slot, std::size_t n) {
  switch (scheme) {
    case IndexScheme::id_ascending:
      return slot;
    case IndexScheme::id_reversed:
      return n + 1 - slot;
    default:
      throw PromptError("scheme " + to_string(scheme) + " carries no document IDs");
  }
}

std::optional<std::string> render_index_label(IndexScheme scheme, std::size_t slot, std::size_t n) {
  if (slot < 1 || slot > n) throw PromptError("slot " + std::to_string(slot) + " outside 1.." + std::to_string(n));
  switch (scheme) {
    case IndexScheme::none:
      return std::nullopt;
    case IndexScheme::id_ascending:
    case IndexScheme::id_reversed:
      return "Document " + std::to_string(label_id(scheme, slot, n));
    case IndexScheme::position:
      if (n % 3 != 0) throw PromptError("position index needs n divisible by 3, got " + std::to_string(n));
      return to_string(third_of(slot, n));
  }
  return std::nullopt;
}

std::string render_segment_phrase(InstructionKind kind, const SegmentPhrase& phrase) {
  if (phrase.is_document_id()) return "document " + std::to_string(phrase.document_id());
  if (kind == InstructionKind::relative) return to_string(phrase.position_word()) + " part";
  return to_string(phrase.position_word());
}

std::string render_attention_instruction(InstructionKind kind, const std::optional<SegmentPhrase>& phrase,
                                         const TemplateSet& templates) {
  if (kind == InstructionKind::none) {
    if (phrase) throw PromptError("no-instruction prompts take no segment phrase");
    return "";
  }
  if (!phrase) throw PromptError(to_string(kind) + " instruction needs a segment phrase");
  const char* file = nullptr;
  if (kind == InstructionKind::relative) {
    if (!phrase->is_position_word()) throw PromptError("relative instruction needs a position word");
    file = TemplateSet::kAttentionRelative;
  } else {
    file = phrase->is_document_id() ? TemplateSet::kAttentionAbsoluteId : TemplateSet::kAttentionAbsolutePosition;
  }
  return substitute(templates.get(file), {{"segment", render_segment_phrase(kind, *phrase)}});
}

void check_combination(InstructionKind kind, IndexScheme scheme, const std::optional<SegmentPhrase>& phrase,
                       std::size_t n) {
  if (scheme == IndexScheme::position && n % 3 != 0) {
    throw PromptError("position index needs n divisible by 3, got " + std::to_string(n));
  }
  if (kind == InstructionKind::none) {
    if (phrase) throw PromptError("no-instruction prompts take no segment phrase");
    return;
  }
  if (!phrase) throw PromptError(to_string(kind) + " instruction needs a segment phrase");
  if (kind == InstructionKind::relative) {
    if (!phrase->is_position_word()) throw PromptError("relative instruction needs a position word");
    return;
  }
  switch (scheme) {
    case IndexScheme::none:
      throw PromptError("absolute instruction needs indexed documents");
    case IndexScheme::position:
      if (!phrase->is_position_word()) throw PromptError("absolute instruction over position index needs a position word");
      return;
    case IndexScheme::id_ascending:
    case IndexScheme::id_reversed:
      if (!phrase->is_document_id()) throw PromptError("absolute instruction over ID index needs a document ID");
      if (phrase->document_id() < 1 || phrase->document_id() > n) {
        throw PromptError("document ID " + std::to_string(phrase->document_id()) + " outside 1.." + std::to_string(n));
      }
      return;
  }
}

namespace {

struct Builder {
  PromptLayout layout;
  std::size_t index = 0;

  // Appends one part. Every part but the question carries a trailing
  // separator when non-empty.
  std::size_t add(Part p, const std::string& body, bool last = false) {
    const std::size_t start = layout.text.size();
    if (!body.empty()) {
      layout.text += body;
      if (!last) layout.text += kSep;
    }
    layout.part_spans[index++] = PartSpan{p, start, layout.text.size()};
    return start;
  }
};

}  // namespace

PromptLayout assemble_prompt(std::string_view question, const corpus::ArrangedContext& ctx, IndexScheme scheme,
                             InstructionKind kind, const std::optional<SegmentPhrase>& phrase,
                             const TemplateSet& templates) {
  if (ctx.n == 0 || ctx.docs.size() != ctx.n) throw PromptError("arranged context is inconsistent");
  check_combination(kind, scheme, phrase, ctx.n);

  const char* doc_file = scheme == IndexScheme::none       ? TemplateSet::kDocumentPlain
                         : scheme == IndexScheme::position ? TemplateSet::kDocumentPosition
                                                           : TemplateSet::kDocumentId;
  const std::string doc_tpl = templates.get(doc_file);

  std::string docs_text;
  std::vector<std::pair<std::size_t, std::size_t>> doc_ranges;
  for (std::size_t slot = 1; slot <= ctx.n; ++slot) {
    const auto& d = ctx.at_slot(slot);
    std::map<std::string, std::string> vars = {{"title", d.title}, {"body", d.body}};
    if (auto label = render_index_label(scheme, slot, ctx.n)) vars["label"] = *label;
    if (slot > 1) docs_text += "\n";
    const std::size_t start = docs_text.size();
    docs_text += substitute(doc_tpl, vars);
    doc_ranges.emplace_back(start, docs_text.size());
  }

  std::map<std::string, std::vector<std::size_t>> offsets;
  const std::string search =
      substitute(templates.get(TemplateSet::kSearchResults), {{"search_results", docs_text}}, &offsets);
  const std::size_t docs_offset = offsets.at("search_results").front();

  Builder b;
  b.add(Part::task_instruction, templates.get(TemplateSet::kTask));
  b.add(Part::attention_instruction, render_attention_instruction(kind, phrase, templates));
  const std::size_t search_start = b.add(Part::search_results, search);
  b.add(Part::question, substitute(templates.get(TemplateSet::kQuestion), {{"question", std::string(question)}}),
        true);

  for (std::size_t i = 0; i < doc_ranges.size(); ++i) {
    b.layout.doc_spans.push_back(DocSpan{i + 1, search_start + docs_offset + doc_ranges[i].first,
                                         search_start + docs_offset + doc_ranges[i].second});
  }
  return std::move(b.layout);
}

PromptLayout assemble_closed_book_prompt(std::string_view question, const TemplateSet& templates) {
  Builder b;
  b.add(Part::task_instruction, templates.get(TemplateSet::kTaskClosedBook));
  b.add(Part::attention_instruction, "");
  b.add(Part::search_results, "");
  b.add(Part::question, substitute(templates.get(TemplateSet::kQuestion), {{"question", std::string(question)}}),
        true);
  return std::move(b.layout);
}

SegmentPhrase target_segment(std::size_t gold_position, std::size_t n, SegmentAxis axis) {
  if (gold_position < 1 || gold_position > n) throw PromptError("gold position outside 1..n");
  if (axis == SegmentAxis::thirds) return SegmentPhrase::position(third_of(gold_position, n));
  return SegmentPhrase::document(gold_position);
}

bool segment_matches_gold(const SegmentPhrase& phrase, std::size_t gold_position, std::size_t n,
                          IndexScheme scheme) {
  if (phrase.is_position_word()) return third_of(gold_position, n) == phrase.position_word();
  if (scheme == IndexScheme::id_ascending || scheme == IndexScheme::id_reversed) {
    return label_id(scheme, gold_position, n) == phrase.document_id();
  }
  return phrase.document_id() == gold_position;
}

}  // namespace attnbench::promptkit
