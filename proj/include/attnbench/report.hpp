#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnbench/attnlens.hpp"
#include "attnbench/grid.hpp"

namespace attnbench::report {

struct HeatmapCell {
  std::size_t gold_position = 0;
  std::string segment;  // segment key, "none" for the baseline column
  double accuracy = 0.0;
  double delta = 0.0;  // accuracy minus baseline accuracy at the same gold position
  std::size_t n_correct = 0;
  std::size_t n_evaluated = 0;
  bool matched = false;  // the segment points at the gold document
};

struct HeatmapMeta {
  std::string model_id;
  std::size_t n = 0;
  std::string kind;
  std::string scheme;
  std::string spec_hash;
};

// Rows are gold positions, columns attention segments.
struct Heatmap {
  std::vector<std::size_t> rows;
  std::vector<std::string> cols;
  std::vector<HeatmapCell> cells;  // row-major
  HeatmapMeta meta;
  // Accuracy references drawn as lines on the colour scale.
  std::optional<double> closed_book;
  std::optional<double> oracle;

  const HeatmapCell& at(std::size_t row, std::size_t col) const { return cells[row * cols.size() + col]; }
};

// Accuracy and delta per cell; the comparable part of a heatmap.
bool same_values(const Heatmap& a, const Heatmap& b);

struct DiagonalEffect {
  double mean_diag_delta = 0.0;
  double mean_offdiag_delta = 0.0;
  double effect = 0.0;
};

// `baseline` must be a no-instruction run over the same n, index scheme and
// sample. Throws ReportError on axis mismatch or incomplete cells.
Heatmap build_heatmap(const grid::ResultSet& results, const grid::ResultSet& baseline);

// Single-cell accuracy of a closed-book or oracle run.
double reference_accuracy(const grid::ResultSet& results);

// Needs a square heatmap where every row and column holds exactly one matched
// cell.
DiagonalEffect diagonal_effect(const Heatmap& h);

enum class Format { csv, svg, text };
Format format_from_string(const std::string& s);
std::string extension(Format f);

std::string render_csv(const Heatmap& h);
Heatmap parse_csv(const std::string& csv);
std::string render_svg(const Heatmap& h);
std::string render_text(const Heatmap& h);

void emit(const Heatmap& h, Format format, const std::filesystem::path& path);

// Per-layer attention curves, one per segment. A delta profile is drawn the
// same way around a zero line.
std::string render_profile_csv(const attnlens::SegmentProfile& profile,
                               const attnlens::SegmentProfile* baseline = nullptr);
std::string render_profile_svg(const attnlens::SegmentProfile& profile, const std::string& title);

}  // namespace attnbench::report
