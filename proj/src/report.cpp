#include "attnbench/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "attnbench/errors.hpp"

namespace attnbench::report {

namespace {

// Shortest decimal form that parses back to the same double.
std::string exact(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw ReportError("cannot format number");
  return std::string(buf, end);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ReportError("bad number in CSV: " + s);
  return v;
}

std::string fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

std::string signed_fixed(double v, int digits) {
  // Rounds first so that -0.00 prints as +0.00.
  const double scale = std::pow(10.0, digits);
  double r = std::round(v * scale) / scale;
  if (r == 0.0) r = 0.0;
  return (r >= 0 ? "+" : "") + fixed(r, digits);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out.push_back(c);
    }
  }
  return out;
}

std::string segment_label(const std::string& key) {
  if (key.rfind("doc_", 0) == 0) return "document " + key.substr(4);
  return key;
}

// Light-to-dark blue ramp.
std::string fill_for(double accuracy) {
  const double t = std::clamp(accuracy, 0.0, 1.0);
  const auto mix = [&](int lo, int hi) { return static_cast<int>(std::lround(lo + (hi - lo) * t)); };
  std::ostringstream ss;
  ss << "rgb(" << mix(247, 8) << "," << mix(251, 48) << "," << mix(255, 107) << ")";
  return ss.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  out.flush();
  if (!out) throw ReportError("cannot write " + path.string());
}

}  // namespace

bool same_values(const Heatmap& a, const Heatmap& b) {
  if (a.rows != b.rows || a.cols != b.cols || a.cells.size() != b.cells.size()) return false;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const auto& x = a.cells[i];
    const auto& y = b.cells[i];
    if (x.gold_position != y.gold_position || x.segment != y.segment || x.accuracy != y.accuracy ||
        x.delta != y.delta) {
      return false;
    }
  }
  return true;
}

Heatmap build_heatmap(const grid::ResultSet& results, const grid::ResultSet& baseline) {
  const auto& rm = results.meta;
  const auto& bm = baseline.meta;
  if (!results.complete()) throw ReportError("results have incomplete cells");
  if (!baseline.complete()) throw ReportError("baseline has incomplete cells");
  if (bm.kind != promptkit::InstructionKind::none) throw ReportError("baseline must be a no-instruction run");
  if (rm.mode == grid::Mode::closed_book || rm.mode == grid::Mode::oracle || bm.mode == grid::Mode::closed_book ||
      bm.mode == grid::Mode::oracle) {
    throw ReportError("closed-book and oracle runs are references, not heatmaps");
  }
  if (rm.n != bm.n) throw ReportError("axis mismatch: n " + std::to_string(rm.n) + " vs " + std::to_string(bm.n));
  if (rm.scheme != bm.scheme) {
    throw ReportError("axis mismatch: index " + promptkit::to_string(rm.scheme) + " vs " + promptkit::to_string(bm.scheme));
  }
  if (rm.sample_digest != bm.sample_digest || rm.dataset_digest != bm.dataset_digest) {
    throw ReportError("baseline was evaluated on a different sample");
  }
  for (std::size_t g : rm.gold_positions) {
    if (std::find(bm.gold_positions.begin(), bm.gold_positions.end(), g) == bm.gold_positions.end()) {
      throw ReportError("axis mismatch: baseline lacks gold position " + std::to_string(g));
    }
  }

  Heatmap h;
  h.rows = rm.gold_positions;
  for (const auto& s : rm.segments) h.cols.push_back(s ? s->key() : "none");
  h.meta = {rm.backend_id, rm.n, promptkit::to_string(rm.kind), promptkit::to_string(rm.scheme), rm.spec_hash};
  for (std::size_t g : rm.gold_positions) {
    const double base = baseline.cell({g, std::nullopt}).accuracy;
    for (const auto& s : rm.segments) {
      const auto& c = results.cell({g, s});
      HeatmapCell cell;
      cell.gold_position = g;
      cell.segment = s ? s->key() : "none";
      cell.accuracy = c.accuracy;
      cell.delta = c.accuracy - base;
      cell.n_correct = c.n_correct;
      cell.n_evaluated = c.n_evaluated;
      cell.matched = s && promptkit::segment_matches_gold(*s, g, rm.n, rm.scheme);
      h.cells.push_back(cell);
    }
  }
  return h;
}

double reference_accuracy(const grid::ResultSet& results) {
  if (!results.complete()) throw ReportError("reference run has incomplete cells");
  if (results.cells.size() != 1) throw ReportError("reference run must have a single cell");
  return results.cells.front().accuracy;
}

DiagonalEffect diagonal_effect(const Heatmap& h) {
  if (h.rows.size() != h.cols.size() || h.rows.empty()) {
    throw ReportError("diagonal effect needs a square heatmap, got " + std::to_string(h.rows.size()) + "x" +
                      std::to_string(h.cols.size()));
  }
  std::vector<int> per_col(h.cols.size(), 0);
  double diag = 0.0;
  double off = 0.0;
  std::size_t n_off = 0;
  for (std::size_t r = 0; r < h.rows.size(); ++r) {
    int per_row = 0;
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
      const auto& cell = h.at(r, c);
      if (cell.matched) {
        ++per_row;
        ++per_col[c];
        diag += cell.delta;
      } else {
        off += cell.delta;
        ++n_off;
      }
    }
    if (per_row != 1) throw ReportError("row " + std::to_string(h.rows[r]) + " has no unique matching segment");
  }
  for (std::size_t c = 0; c < per_col.size(); ++c) {
    if (per_col[c] != 1) throw ReportError("column " + h.cols[c] + " has no unique matching gold position");
  }
  DiagonalEffect e;
  e.mean_diag_delta = diag / static_cast<double>(h.rows.size());
  e.mean_offdiag_delta = n_off ? off / static_cast<double>(n_off) : 0.0;
  e.effect = e.mean_diag_delta - e.mean_offdiag_delta;
  return e;
}

Format format_from_string(const std::string& s) {
  if (s == "csv") return Format::csv;
  if (s == "svg") return Format::svg;
  if (s == "text") return Format::text;
  throw ReportError("unknown report format: " + s);
}

std::string extension(Format f) {
  switch (f) {
    case Format::csv:
      return ".csv";
    case Format::svg:
      return ".svg";
    case Format::text:
      return ".txt";
  }
  return "";
}

std::string render_csv(const Heatmap& h) {
  std::string out = "gold_position,segment,accuracy,delta\n";
  for (const auto& c : h.cells) {
    out += std::to_string(c.gold_position) + "," + c.segment + "," + exact(c.accuracy) + "," + exact(c.delta) + "\n";
  }
  return out;
}

Heatmap parse_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "gold_position,segment,accuracy,delta") {
    throw ReportError("CSV header must be gold_position,segment,accuracy,delta");
  }
  Heatmap h;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 4) throw ReportError("CSV line " + std::to_string(line_no) + ": expected 4 fields");
    HeatmapCell c;
    try {
      c.gold_position = std::stoul(fields[0]);
    } catch (const std::exception&) {
      throw ReportError("CSV line " + std::to_string(line_no) + ": bad gold position");
    }
    c.segment = fields[1];
    c.accuracy = parse_double(fields[2]);
    c.delta = parse_double(fields[3]);
    if (std::find(h.rows.begin(), h.rows.end(), c.gold_position) == h.rows.end()) h.rows.push_back(c.gold_position);
    if (std::find(h.cols.begin(), h.cols.end(), c.segment) == h.cols.end()) h.cols.push_back(c.segment);
    h.cells.push_back(std::move(c));
  }
  if (h.cells.size() != h.rows.size() * h.cols.size()) throw ReportError("CSV does not describe a full grid");
  for (std::size_t r = 0; r < h.rows.size(); ++r) {
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
      const auto& cell = h.at(r, c);
      if (cell.gold_position != h.rows[r] || cell.segment != h.cols[c]) {
        throw ReportError("CSV rows are not in gold-position-major order");
      }
    }
  }
  return h;
}

std::string render_svg(const Heatmap& h) {
  constexpr int cell_w = 120, cell_h = 80, left = 130, top = 70, bar_w = 24, bar_gap = 40;
  const int grid_w = cell_w * static_cast<int>(h.cols.size());
  const int grid_h = cell_h * static_cast<int>(h.rows.size());
  const int width = left + grid_w + bar_gap + bar_w + 110;
  const int height = top + grid_h + 70;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << " " << height << "\" font-family=\"sans-serif\">\n";
  s << "<!-- spec " << xml_escape(h.meta.spec_hash) << " -->\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << xml_escape(h.meta.model_id) << "</text>\n";
  s << "<text x=\"" << left << "\" y=\"44\" font-size=\"12\">n=" << h.meta.n << ", instruction=" << xml_escape(h.meta.kind)
    << ", index=" << xml_escape(h.meta.scheme) << "</text>\n";

  for (std::size_t r = 0; r < h.rows.size(); ++r) {
    const int y = top + static_cast<int>(r) * cell_h;
    s << "<text x=\"" << left - 10 << "\" y=\"" << y + cell_h / 2 + 5 << "\" font-size=\"13\" text-anchor=\"end\">"
      << h.rows[r] << "</text>\n";
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
      const auto& cell = h.at(r, c);
      const int x = left + static_cast<int>(c) * cell_w;
      const char* ink = cell.accuracy > 0.5 ? "white" : "black";
      s << "<g class=\"cell\" data-gold=\"" << cell.gold_position << "\" data-segment=\"" << xml_escape(cell.segment)
        << "\">";
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w << "\" height=\"" << cell_h << "\" fill=\""
        << fill_for(cell.accuracy) << "\" stroke=\"" << (cell.matched ? "black" : "white") << "\" stroke-width=\""
        << (cell.matched ? 3 : 1) << "\"/>";
      s << "<text x=\"" << x + cell_w / 2 << "\" y=\"" << y + cell_h / 2 - 2 << "\" font-size=\"18\" fill=\"" << ink
        << "\" text-anchor=\"middle\">" << fixed(cell.accuracy * 100.0, 1) << "</text>";
      s << "<text x=\"" << x + cell_w / 2 << "\" y=\"" << y + cell_h / 2 + 20 << "\" font-size=\"13\" fill=\"" << ink
        << "\" text-anchor=\"middle\">" << signed_fixed(cell.delta * 100.0, 1) << "</text>";
      s << "</g>\n";
    }
  }
  for (std::size_t c = 0; c < h.cols.size(); ++c) {
    s << "<text x=\"" << left + static_cast<int>(c) * cell_w + cell_w / 2 << "\" y=\"" << top + grid_h + 22
      << "\" font-size=\"13\" text-anchor=\"middle\">" << xml_escape(segment_label(h.cols[c])) << "</text>\n";
  }
  s << "<text x=\"" << left + grid_w / 2 << "\" y=\"" << top + grid_h + 50
    << "\" font-size=\"13\" text-anchor=\"middle\">attention segment</text>\n";
  s << "<text x=\"24\" y=\"" << top + grid_h / 2 << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 24 "
    << top + grid_h / 2 << ")\">gold document position</text>\n";

  // Colour scale, 0% at the bottom.
  const int bx = left + grid_w + bar_gap;
  constexpr int steps = 20;
  for (int i = 0; i < steps; ++i) {
    const double acc = (steps - 1 - i + 0.5) / steps;
    s << "<rect x=\"" << bx << "\" y=\"" << top + i * grid_h / steps << "\" width=\"" << bar_w << "\" height=\""
      << grid_h / steps + 1 << "\" fill=\"" << fill_for(acc) << "\"/>\n";
  }
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + 10 << "\" font-size=\"11\">100%</text>\n";
  s << "<text x=\"" << bx + bar_w + 4 << "\" y=\"" << top + grid_h << "\" font-size=\"11\">0%</text>\n";
  const auto ref_line = [&](double acc, const char* label, const char* colour) {
    const int y = top + static_cast<int>(std::lround((1.0 - std::clamp(acc, 0.0, 1.0)) * grid_h));
    s << "<line class=\"reference\" x1=\"" << bx - 6 << "\" x2=\"" << bx + bar_w + 6 << "\" y1=\"" << y << "\" y2=\"" << y
      << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>";
    s << "<text x=\"" << bx + bar_w + 8 << "\" y=\"" << y + 4 << "\" font-size=\"11\" fill=\"" << colour << "\">" << label
      << " " << fixed(acc * 100.0, 1) << "</text>\n";
  };
  if (h.closed_book) ref_line(*h.closed_book, "closed-book", "#b2182b");
  if (h.oracle) ref_line(*h.oracle, "oracle", "#1b7837");
  s << "</svg>\n";
  return s.str();
}

std::string render_text(const Heatmap& h) {
  std::ostringstream s;
  s << "model: " << h.meta.model_id << "\n";
  s << "n=" << h.meta.n << " instruction=" << h.meta.kind << " index=" << h.meta.scheme << "\n";
  s << "accuracy % (delta vs no instruction); * marks the segment holding the gold document\n";
  constexpr int w = 18;
  s << std::left << std::setw(8) << "gold";
  for (const auto& c : h.cols) s << std::setw(w) << c;
  s << "\n";
  for (std::size_t r = 0; r < h.rows.size(); ++r) {
    s << std::setw(8) << h.rows[r];
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
      const auto& cell = h.at(r, c);
      s << std::setw(w)
        << (fixed(cell.accuracy * 100.0, 2) + " (" + signed_fixed(cell.delta * 100.0, 2) + ")" + (cell.matched ? "*" : ""));
    }
    s << "\n";
  }
  if (h.rows.size() == h.cols.size()) {
    try {
      const auto e = diagonal_effect(h);
      s << "diagonal effect: " << signed_fixed(e.effect * 100.0, 2) << " (diag " << signed_fixed(e.mean_diag_delta * 100.0, 2)
        << ", off-diag " << signed_fixed(e.mean_offdiag_delta * 100.0, 2) << ")\n";
    } catch (const ReportError&) {
    }
  }
  if (h.closed_book) s << "closed-book: " << fixed(*h.closed_book * 100.0, 2) << "\n";
  if (h.oracle) s << "oracle: " << fixed(*h.oracle * 100.0, 2) << "\n";
  return s.str();
}

void emit(const Heatmap& h, Format format, const std::filesystem::path& path) {
  switch (format) {
    case Format::csv:
      write_file(path, render_csv(h));
      return;
    case Format::svg:
      write_file(path, render_svg(h));
      return;
    case Format::text:
      write_file(path, render_text(h));
      return;
  }
}

std::string render_profile_csv(const attnlens::SegmentProfile& p, const attnlens::SegmentProfile* baseline) {
  std::string out = baseline ? "segment,layer,mean,baseline,delta\n" : "segment,layer,mean\n";
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    for (std::size_t l = 0; l < p.values[i].size(); ++l) {
      out += p.names[i] + "," + std::to_string(l) + "," + exact(p.values[i][l]);
      if (baseline) {
        const double b = baseline->values.at(i).at(l);
        out += "," + exact(b) + "," + exact(p.values[i][l] - b);
      }
      out += "\n";
    }
  }
  return out;
}

std::string render_profile_svg(const attnlens::SegmentProfile& p, const std::string& title) {
  static const char* const palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                        "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  constexpr int left = 70, top = 40, plot_w = 560, plot_h = 300, legend_w = 190;
  const std::size_t layers = p.num_layers();
  double lo = 0.0, hi = 0.0;
  for (const auto& row : p.values) {
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const auto xpos = [&](std::size_t l) {
    return left + (layers > 1 ? static_cast<double>(l) * plot_w / static_cast<double>(layers - 1) : plot_w / 2.0);
  };
  const auto ypos = [&](double v) { return top + (hi - v) / (hi - lo) * plot_h; };

  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + plot_w + legend_w << "\" height=\""
    << top + plot_h + 60 << "\" font-family=\"sans-serif\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << xml_escape(title) << " (" << p.example_count
    << " examples)</text>\n";
  s << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  if (lo < 0.0) {
    s << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << ypos(0.0) << "\" y2=\"" << ypos(0.0)
      << "\" stroke=\"#444\" stroke-dasharray=\"4 3\"/>\n";
  }
  s << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << std::setprecision(4)
    << hi << "</text>\n";
  s << "<text x=\"" << left - 6 << "\" y=\"" << top + plot_h << "\" font-size=\"11\" text-anchor=\"end\">" << lo
    << "</text>\n"
    << std::setprecision(2);
  s << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << top + plot_h + 40
    << "\" font-size=\"13\" text-anchor=\"middle\">layer</text>\n";
  for (std::size_t i = 0; i < p.names.size(); ++i) {
    const char* colour = palette[i % std::size(palette)];
    s << "<polyline class=\"segment\" data-segment=\"" << xml_escape(p.names[i]) << "\" fill=\"none\" stroke=\"" << colour
      << "\" stroke-width=\"2\" points=\"";
    for (std::size_t l = 0; l < layers; ++l) s << (l ? " " : "") << xpos(l) << "," << ypos(p.values[i][l]);
    s << "\"/>\n";
    const int ly = top + 14 + static_cast<int>(i) * 18;
    s << "<line x1=\"" << left + plot_w + 16 << "\" x2=\"" << left + plot_w + 36 << "\" y1=\"" << ly - 4 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"3\"/>";
    s << "<text x=\"" << left + plot_w + 42 << "\" y=\"" << ly << "\" font-size=\"12\">" << xml_escape(p.names[i])
      << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace attnbench::report
