#include "attnbench/attnlens.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench::attnlens {

using nlohmann::ordered_json;

namespace {

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

void check_same_shape(const SegmentProfile& a, const SegmentProfile& b, const char* what) {
  if (a.names != b.names || a.num_layers() != b.num_layers() || a.values.size() != b.values.size()) {
    throw ShapeError(std::string(what) + ": profiles differ in segments or layers");
  }
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    if (a.values[i].size() != b.values[i].size()) throw ShapeError(std::string(what) + ": ragged profile");
  }
}

}  // namespace

void validate(const AttentionTrace& t, double tolerance) {
  if (t.num_layers == 0 || t.num_heads == 0 || t.seq_len == 0) throw TraceError("trace has an empty dimension");
  if (t.scores.size() != t.num_layers * t.num_heads * t.seq_len) {
    throw ShapeError("trace holds " + std::to_string(t.scores.size()) + " scores, header implies " +
                     std::to_string(t.num_layers * t.num_heads * t.seq_len));
  }
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    for (std::size_t h = 0; h < t.num_heads; ++h) {
      double sum = 0.0;
      for (std::size_t s = 0; s < t.seq_len; ++s) {
        const float v = t.at(l, h, s);
        if (!(v >= 0.0f) || !std::isfinite(v)) {
          throw TraceError("negative or non-finite score at layer " + std::to_string(l) + " head " + std::to_string(h));
        }
        sum += v;
      }
      if (std::abs(sum - 1.0) > tolerance) {
        throw TraceError("row at layer " + std::to_string(l) + " head " + std::to_string(h) + " sums to " +
                         std::to_string(sum));
      }
    }
  }
  std::size_t expect = 0;
  for (const auto& seg : t.segments) {
    if (seg.tok_start != expect || seg.tok_end < seg.tok_start) {
      throw TraceError("segment " + seg.name + " breaks the partition at token " + std::to_string(expect));
    }
    expect = seg.tok_end;
  }
  if (expect != t.seq_len) throw TraceError("segments cover [0, " + std::to_string(expect) + "), not [0, S)");
}

std::string serialize_trace(const AttentionTrace& t) {
  ordered_json segments = ordered_json::array();
  for (const auto& s : t.segments) {
    ordered_json seg;
    seg["name"] = s.name;
    seg["start"] = s.tok_start;
    seg["end"] = s.tok_end;
    segments.push_back(std::move(seg));
  }
  ordered_json header;
  header["version"] = 1;
  header["layers"] = t.num_layers;
  header["heads"] = t.num_heads;
  header["seq_len"] = t.seq_len;
  header["dtype"] = "f32le";
  header["segments"] = std::move(segments);
  header["meta"] = t.meta.is_object() ? t.meta : ordered_json::object();

  std::string out = header.dump();
  out.push_back('\n');
  const std::size_t offset = out.size();
  out.resize(offset + t.scores.size() * 4);
  for (std::size_t i = 0; i < t.scores.size(); ++i) {
    const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(t.scores[i]));
    std::memcpy(out.data() + offset + i * 4, &bits, 4);
  }
  return out;
}

AttentionTrace parse_trace(std::string_view bytes) {
  const std::size_t eol = bytes.find('\n');
  if (eol == std::string_view::npos) throw TraceError("trace has no header line");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.substr(0, eol));
  } catch (const ordered_json::parse_error& e) {
    throw TraceError(std::string("trace header is not JSON: ") + e.what());
  }
  AttentionTrace t;
  try {
    if (header.at("version").get<int>() != 1) throw TraceError("unsupported trace version");
    if (header.at("dtype").get<std::string>() != "f32le") throw TraceError("unsupported trace dtype");
    t.num_layers = header.at("layers").get<std::size_t>();
    t.num_heads = header.at("heads").get<std::size_t>();
    t.seq_len = header.at("seq_len").get<std::size_t>();
    for (const auto& s : header.at("segments")) {
      t.segments.push_back(
          {s.at("name").get<std::string>(), s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
    }
    if (header.contains("meta")) t.meta = header["meta"];
  } catch (const ordered_json::exception& e) {
    throw TraceError(std::string("bad trace header: ") + e.what());
  }
  const std::size_t count = t.num_layers * t.num_heads * t.seq_len;
  const std::string_view payload = bytes.substr(eol + 1);
  if (payload.size() != count * 4) {
    throw ShapeError("trace payload has " + std::to_string(payload.size()) + " bytes, header implies " +
                     std::to_string(count * 4));
  }
  t.scores.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, payload.data() + i * 4, 4);
    t.scores[i] = std::bit_cast<float>(to_little_endian(bits));
  }
  return t;
}

void write_trace(const std::filesystem::path& path, const AttentionTrace& trace) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << serialize_trace(trace);
  if (!out) throw TraceError("cannot write " + path.string());
}

AttentionTrace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TraceError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_trace(ss.str());
  } catch (const Error& e) {
    throw TraceError(path.string() + ": " + e.what());
  }
}

std::vector<std::filesystem::path> list_traces(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw TraceError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".trace") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Matrix head_average(const AttentionTrace& t) {
  if (t.scores.size() != t.num_layers * t.num_heads * t.seq_len || t.num_heads == 0) {
    throw ShapeError("trace scores do not match L x H x S");
  }
  Matrix out(t.seq_len, t.num_layers);
  const double inv_heads = 1.0 / static_cast<double>(t.num_heads);
  for (std::size_t l = 0; l < t.num_layers; ++l) {
    for (std::size_t h = 0; h < t.num_heads; ++h) {
      for (std::size_t s = 0; s < t.seq_len; ++s) out(s, l) += t.at(l, h, s);
    }
    for (std::size_t s = 0; s < t.seq_len; ++s) out(s, l) *= inv_heads;
  }
  return out;
}

SegmentProfile segment_means(const Matrix& m, const std::vector<TokenSegment>& ranges) {
  SegmentProfile p;
  p.example_count = 1;
  for (const auto& r : ranges) {
    if (r.tok_end <= r.tok_start) throw ShapeError("segment " + r.name + " is empty");
    if (r.tok_end > m.rows()) {
      throw ShapeError("segment " + r.name + " ends at " + std::to_string(r.tok_end) + " past " +
                       std::to_string(m.rows()) + " tokens");
    }
    std::vector<double> means(m.cols(), 0.0);
    for (std::size_t s = r.tok_start; s < r.tok_end; ++s) {
      for (std::size_t l = 0; l < m.cols(); ++l) means[l] += m(s, l);
    }
    const double len = static_cast<double>(r.tok_end - r.tok_start);
    for (auto& v : means) v /= len;
    p.names.push_back(r.name);
    p.values.push_back(std::move(means));
    p.token_counts.push_back(r.tok_end - r.tok_start);
  }
  return p;
}

SegmentProfile aggregate(const std::vector<SegmentProfile>& profiles) {
  if (profiles.empty()) throw ShapeError("aggregate: no profiles");
  SegmentProfile out = profiles.front();
  for (auto& row : out.values) std::fill(row.begin(), row.end(), 0.0);
  out.example_count = 0;
  for (const auto& p : profiles) {
    check_same_shape(out, p, "aggregate");
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      for (std::size_t l = 0; l < p.values[i].size(); ++l) out.values[i][l] += p.values[i][l];
    }
    out.example_count += p.example_count;
    if (p.token_counts != out.token_counts) out.token_counts.clear();
  }
  const double inv = 1.0 / static_cast<double>(profiles.size());
  for (auto& row : out.values) {
    for (auto& v : row) v *= inv;
  }
  return out;
}

SegmentProfile profile_delta(const SegmentProfile& a, const SegmentProfile& b) {
  check_same_shape(a, b, "profile_delta");
  SegmentProfile out = a;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    for (std::size_t l = 0; l < a.values[i].size(); ++l) out.values[i][l] = a.values[i][l] - b.values[i][l];
  }
  out.example_count = std::min(a.example_count, b.example_count);
  if (a.token_counts != b.token_counts) out.token_counts.clear();
  return out;
}

SegmentProfile select_segments(const SegmentProfile& p, const std::vector<std::string>& names) {
  SegmentProfile out;
  out.example_count = p.example_count;
  for (const auto& n : names) {
    auto it = std::find(p.names.begin(), p.names.end(), n);
    if (it == p.names.end()) throw ShapeError("profile has no segment " + n);
    const auto i = static_cast<std::size_t>(it - p.names.begin());
    out.names.push_back(n);
    out.values.push_back(p.values[i]);
    if (!p.token_counts.empty()) out.token_counts.push_back(p.token_counts[i]);
  }
  return out;
}

std::vector<TokenSegment> merge_document_segments(const std::vector<TokenSegment>& segments) {
  std::vector<TokenSegment> out;
  for (const auto& s : segments) {
    const bool is_doc = s.name.rfind("doc_", 0) == 0;
    if (is_doc && !out.empty() && out.back().name == "documents" && out.back().tok_end == s.tok_start) {
      out.back().tok_end = s.tok_end;
    } else if (is_doc) {
      out.push_back({"documents", s.tok_start, s.tok_end});
    } else {
      out.push_back(s);
    }
  }
  return out;
}

SegmentProfile trace_profile(const AttentionTrace& trace, bool coarse) {
  std::vector<TokenSegment> ranges = coarse ? merge_document_segments(trace.segments) : trace.segments;
  std::erase_if(ranges, [](const TokenSegment& s) { return s.tok_end <= s.tok_start; });
  return segment_means(head_average(trace), ranges);
}

}  // namespace attnbench::attnlens
