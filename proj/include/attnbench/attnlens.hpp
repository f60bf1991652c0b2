#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace attnbench::attnlens {

struct TokenSegment {
  std::string name;
  std::size_t tok_start = 0;
  std::size_t tok_end = 0;  // exclusive
  bool operator==(const TokenSegment&) const = default;
};

// Last-position attention rows of one prompt: `scores` holds L*H*S floats in
// layer-major, then head-major, then token order.
struct AttentionTrace {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t seq_len = 0;
  std::vector<float> scores;
  std::vector<TokenSegment> segments;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  float at(std::size_t layer, std::size_t head, std::size_t token) const {
    return scores[(layer * num_heads + head) * seq_len + token];
  }
  bool operator==(const AttentionTrace&) const = default;
};

inline constexpr double kRowSumTolerance = 1e-4;

// Checks shape, nonnegative rows summing to 1 and that segments partition
// [0, S). Throws TraceError.
void validate(const AttentionTrace& trace, double tolerance = kRowSumTolerance);

// Binary trace format: one JSON header line, then little-endian f32 scores.
std::string serialize_trace(const AttentionTrace& trace);
AttentionTrace parse_trace(std::string_view bytes);
void write_trace(const std::filesystem::path& path, const AttentionTrace& trace);
AttentionTrace read_trace(const std::filesystem::path& path);

// Trace files (*.trace) in `dir`, sorted by name.
std::vector<std::filesystem::path> list_traces(const std::filesystem::path& dir);

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// [S][L]: mean over heads of each layer's last-position row.
Matrix head_average(const AttentionTrace& trace);

struct SegmentProfile {
  std::vector<std::string> names;
  std::vector<std::vector<double>> values;  // [segment][layer]
  std::size_t example_count = 0;
  // Tokens per segment; empty once profiles over different token counts are
  // averaged.
  std::vector<std::size_t> token_counts;

  std::size_t num_layers() const { return values.empty() ? 0 : values.front().size(); }
  bool operator==(const SegmentProfile&) const = default;
};

// Mean of `matrix` rows over each token range, per layer column.
SegmentProfile segment_means(const Matrix& matrix, const std::vector<TokenSegment>& ranges);

// Per (segment, layer) arithmetic mean; example counts add up.
SegmentProfile aggregate(const std::vector<SegmentProfile>& profiles);

SegmentProfile profile_delta(const SegmentProfile& with_instruction, const SegmentProfile& baseline);

// Keeps the named segments, in the given order.
SegmentProfile select_segments(const SegmentProfile& profile, const std::vector<std::string>& names);

// Collapses consecutive doc_* segments into one "documents" segment.
std::vector<TokenSegment> merge_document_segments(const std::vector<TokenSegment>& segments);

// Profile of one trace; without `coarse` every document is its own segment.
// Empty segments are skipped.
SegmentProfile trace_profile(const AttentionTrace& trace, bool coarse = false);

}  // namespace attnbench::attnlens
