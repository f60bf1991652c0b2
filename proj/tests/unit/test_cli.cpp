#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "attnbench/attnlens.hpp"
#include "attnbench/grid.hpp"
#include "attnbench/promptkit.hpp"
#include "cli.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace attnbench;
using nlohmann::json;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "attnbench");
  std::ostringstream out, err;
  const int code = cli::main(args, out, err);
  return {code, out.str(), err.str()};
}

const char* kAbsolute = R"({
  "n": 3, "instruction": "absolute", "index": "id_ascending", "sample_size": 40, "seed": 7,
  "backend": {"type": "mock", "mock": {"base_accuracy": [0.6, 0.5, 0.55], "follow": 1.0, "boost": 0.1,
              "penalty": 0.25, "closed_book_accuracy": 0.3, "oracle_accuracy": 0.85}}
})";

const char* kBaseline = R"({
  "n": 3, "mode": "baseline_no_instruction", "index": "id_ascending", "sample_size": 40, "seed": 7,
  "backend": {"type": "mock", "mock": {"base_accuracy": [0.6, 0.5, 0.55], "follow": 1.0, "boost": 0.1,
              "penalty": 0.25}}
})";

std::filesystem::path synthetic() { return testsupport::fixture("synthetic_200.jsonl"); }

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Cli, HelpAndVersion) {
  EXPECT_EQ(invoke({"--help"}).code, cli::kOk);
  const auto v = invoke({"--version"});
  EXPECT_EQ(v.code, cli::kOk);
  EXPECT_EQ(v.out, "attnbench 0.1.0\n");
}

TEST(Cli, UsageErrors) {
  auto r = invoke({});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("usage error"), std::string::npos);
  EXPECT_EQ(invoke({"frobnicate"}).code, cli::kFailure);
  EXPECT_EQ(invoke({"run"}).code, cli::kFailure);
}

TEST(CliValidate, CleanDatasetExitsZero) {
  const auto r = invoke({"validate", "--dataset", synthetic().string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("records=200 accepted=200 flagged=0 dropped=0"), std::string::npos) << r.out;
}

TEST(CliValidate, ContaminationExitsOne) {
  const auto r = invoke({"validate", "--dataset", testsupport::fixture("contamination_5.jsonl").string()});
  EXPECT_EQ(r.code, cli::kFlagged);
  EXPECT_NE(r.out.find("records=5 accepted=4 flagged=1 dropped=1"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("line 2: c2:"), std::string::npos) << r.out;
  const auto kept = invoke({"validate", "--dataset", testsupport::fixture("contamination_5.jsonl").string(), "--keep-flagged"});
  EXPECT_NE(kept.out.find("accepted=5 flagged=1 dropped=0"), std::string::npos) << kept.out;
}

TEST(CliValidate, MissingOrMalformedFileExitsTwo) {
  testsupport::ScratchDir dir;
  auto r = invoke({"validate", "--dataset", (dir / "missing.jsonl").string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("not found"), std::string::npos);
  testsupport::write_file(dir / "bad.jsonl", "{\"id\":\"a\"}\nnot json\n");
  r = invoke({"validate", "--dataset", (dir / "bad.jsonl").string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("line 1"), std::string::npos) << r.err;
}

TEST(CliValidate, LiuFormat) {
  const auto r = invoke({"validate", "--dataset", testsupport::fixture("liu_ctxs_3.jsonl").string(), "--format", "liu_ctxs"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("records=3"), std::string::npos);
}

TEST(CliRun, WritesThenResumesAsNoOp) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "abs.json", kAbsolute, synthetic(), "abs.jsonl");
  ::setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  auto r = invoke({"run", "--spec", spec.string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("wrote "), std::string::npos);
  EXPECT_NE(r.out.find("(360 new records, 360 backend calls)"), std::string::npos) << r.out;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 10);
  const auto first = testsupport::read_file(dir / "abs.jsonl");
  EXPECT_NE(first.find("\"timestamp\":\"2023-11-14T22:13:20Z\""), std::string::npos);

  r = invoke({"run", "--spec", spec.string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("resumed "), std::string::npos);
  EXPECT_NE(r.out.find("(0 new records, 0 backend calls)"), std::string::npos) << r.out;
  EXPECT_EQ(testsupport::read_file(dir / "abs.jsonl"), first);
  ::unsetenv("SOURCE_DATE_EPOCH");
}

TEST(CliRun, StopAfterThenResume) {
  testsupport::ScratchDir a, b;
  ::setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
  const auto spec_a = testsupport::write_spec(a.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  const auto spec_b = testsupport::write_spec(b.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  EXPECT_EQ(invoke({"run", "--spec", spec_a.string()}).code, cli::kOk);
  auto r = invoke({"run", "--spec", spec_b.string(), "--stop-after", "50"});
  EXPECT_EQ(r.code, cli::kFlagged);
  EXPECT_NE(r.out.find("stopped early"), std::string::npos);
  r = invoke({"run", "--spec", spec_b.string(), "--resume"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("(310 new records"), std::string::npos) << r.out;
  EXPECT_EQ(testsupport::read_file(a / "r.jsonl"), testsupport::read_file(b / "r.jsonl"));
  ::unsetenv("SOURCE_DATE_EPOCH");
}

TEST(CliRun, ResumeWithoutFileIsAnError) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  const auto r = invoke({"run", "--spec", spec.string(), "--resume"});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("no result file"), std::string::npos);
}

TEST(CliRun, ChangedSpecRefusesToResume) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  EXPECT_EQ(invoke({"run", "--spec", spec.string()}).code, cli::kOk);
  const auto r = invoke({"run", "--spec", spec.string(), "--seed", "8"});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("spec hash mismatch"), std::string::npos) << r.err;
}

TEST(CliRun, BadSpecKeyIsNamed) {
  testsupport::ScratchDir dir;
  auto body = json::parse(kAbsolute);
  body["sample_sise"] = 3;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", body.dump(), synthetic(), "r.jsonl");
  const auto r = invoke({"run", "--spec", spec.string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("unknown key: sample_sise"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "r.jsonl"));
}

TEST(CliRun, OverridesApply) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  const auto r = invoke({"run", "--spec", spec.string(), "--out", (dir / "other.jsonl").string(), "--sample-size", "5"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "other.jsonl"));
  EXPECT_EQ(grid::load_results(dir / "other.jsonl").meta.sample_ids.size(), 5u);
  EXPECT_EQ(invoke({"run", "--spec", spec.string(), "--backend", "telnet://x"}).code, cli::kFailure);
}

TEST(CliRun, SpecCommentsAreAllowed) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", kAbsolute, synthetic(), "r.jsonl");
  testsupport::write_file(spec, "// three documents\n" + testsupport::read_file(spec));
  EXPECT_EQ(invoke({"run", "--spec", spec.string(), "--sample-size", "3"}).code, cli::kOk);
}

TEST(CliReport, WritesCsvSvgAndText) {
  testsupport::ScratchDir dir;
  const auto abs = testsupport::write_spec(dir.path(), "abs.json", kAbsolute, synthetic(), "abs.jsonl");
  const auto base = testsupport::write_spec(dir.path(), "base.json", kBaseline, synthetic(), "base.jsonl");
  ASSERT_EQ(invoke({"run", "--spec", abs.string()}).code, cli::kOk);
  ASSERT_EQ(invoke({"run", "--spec", base.string()}).code, cli::kOk);
  const auto r = invoke({"report", "--results", (dir / "abs.jsonl").string(), "--baseline", (dir / "base.jsonl").string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("diagonal effect: +"), std::string::npos) << r.out;
  const auto csv = testsupport::read_file(dir / "abs.csv");
  EXPECT_EQ(count_lines(csv), 10u);
  EXPECT_NE(testsupport::read_file(dir / "abs.svg").find("<svg"), std::string::npos);

  const auto text = invoke({"report", "--results", (dir / "abs.jsonl").string(), "--baseline",
                         (dir / "base.jsonl").string(), "--format", "text", "--out", (dir / "t/heat").string()});
  EXPECT_EQ(text.code, cli::kOk) << text.err;
  EXPECT_EQ(testsupport::read_file(dir / "t/heat.txt").substr(0, 7), "model: ");
}

TEST(CliReport, ReferenceLines) {
  testsupport::ScratchDir dir;
  const auto abs = testsupport::write_spec(dir.path(), "abs.json", kAbsolute, synthetic(), "abs.jsonl");
  const auto base = testsupport::write_spec(dir.path(), "base.json", kBaseline, synthetic(), "base.jsonl");
  auto cb_body = json::parse(kAbsolute);
  cb_body["mode"] = "closed_book";
  cb_body["instruction"] = "none";
  cb_body["index"] = "none";
  cb_body.erase("n");
  cb_body["backend"]["mock"].erase("base_accuracy");
  const auto cb = testsupport::write_spec(dir.path(), "cb.json", cb_body.dump(), synthetic(), "cb.jsonl");
  for (const auto& s : {abs, base, cb}) ASSERT_EQ(invoke({"run", "--spec", s.string()}).code, cli::kOk) << s;
  const auto r = invoke({"report", "--results", (dir / "abs.jsonl").string(), "--baseline", (dir / "base.jsonl").string(),
                      "--closed-book", (dir / "cb.jsonl").string(), "--format", "svg"});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("closed-book: "), std::string::npos);
  EXPECT_NE(testsupport::read_file(dir / "abs.svg").find("class=\"reference\""), std::string::npos);
}

TEST(CliReport, MismatchedAxesAreAnError) {
  testsupport::ScratchDir dir;
  const auto abs = testsupport::write_spec(dir.path(), "abs.json", kAbsolute, synthetic(), "abs.jsonl");
  auto body = json::parse(kBaseline);
  body["index"] = "position";
  const auto base = testsupport::write_spec(dir.path(), "base.json", body.dump(), synthetic(), "base.jsonl");
  ASSERT_EQ(invoke({"run", "--spec", abs.string()}).code, cli::kOk);
  ASSERT_EQ(invoke({"run", "--spec", base.string()}).code, cli::kOk);
  const auto r = invoke({"report", "--results", (dir / "abs.jsonl").string(), "--baseline", (dir / "base.jsonl").string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("axis mismatch"), std::string::npos) << r.err;
  EXPECT_FALSE(std::filesystem::exists(dir / "abs.csv"));
}

TEST(CliAttn, MatchesBruteForceAverage) {
  testsupport::ScratchDir dir;
  std::mt19937_64 rng(12);
  std::vector<testsupport::Grid2> per_trace;
  std::vector<attnlens::TokenSegment> segments;
  for (int i = 0; i < 10; ++i) {
    auto t = testsupport::random_trace(rng, 4, 3, 30, 1);
    t.segments = {{"task_instruction", 0, 5}, {"attention_instruction", 5, 9}, {"doc_1", 9, 15},
                  {"doc_2", 15, 22},          {"doc_3", 22, 26},              {"question", 26, 30}};
    segments = t.segments;
    per_trace.push_back(testsupport::brute_segment_means(testsupport::brute_head_average(t), t.segments));
    attnlens::write_trace(dir / ("t" + std::to_string(i) + ".trace"), t);
  }
  const auto r = invoke({"attn", "--traces", dir.path().string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("10 traces, 6 segments, 4 layers"), std::string::npos) << r.out;

  const auto csv = testsupport::read_file(dir / "profile.csv");
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "segment,layer,mean");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    const auto c1 = line.find(','), c2 = line.rfind(',');
    const std::string name = line.substr(0, c1);
    const std::size_t layer = std::stoul(line.substr(c1 + 1, c2 - c1 - 1));
    const double got = std::stod(line.substr(c2 + 1));
    const auto k = static_cast<std::size_t>(
        std::find_if(segments.begin(), segments.end(), [&](const auto& s) { return s.name == name; }) - segments.begin());
    double want = 0.0;
    for (const auto& g : per_trace) want += g[k][layer];
    want /= 10.0;
    EXPECT_NEAR(got, want, 1e-12) << name << " " << layer;
    ++rows;
  }
  EXPECT_EQ(rows, 24u);
  EXPECT_TRUE(std::filesystem::exists(dir / "profile.svg"));

  const auto coarse = invoke({"attn", "--traces", dir.path().string(), "--coarse", "--out", (dir / "c").string()});
  EXPECT_NE(coarse.out.find("10 traces, 4 segments"), std::string::npos) << coarse.out;
}

TEST(CliAttn, BaselineDeltaUsesCommonSegments) {
  testsupport::ScratchDir with, without;
  std::mt19937_64 rng(13);
  for (int i = 0; i < 3; ++i) {
    auto t = testsupport::random_trace(rng, 2, 2, 12, 1);
    t.segments = {{"task_instruction", 0, 3}, {"attention_instruction", 3, 5}, {"doc_1", 5, 9}, {"question", 9, 12}};
    attnlens::write_trace(with / ("t" + std::to_string(i) + ".trace"), t);
    auto b = testsupport::random_trace(rng, 2, 2, 10, 1);
    b.segments = {{"task_instruction", 0, 3}, {"doc_1", 3, 7}, {"question", 7, 10}};
    attnlens::write_trace(without / ("t" + std::to_string(i) + ".trace"), b);
  }
  const auto r = invoke({"attn", "--traces", with.path().string(), "--baseline", without.path().string()});
  EXPECT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("3 traces, 3 segments"), std::string::npos) << r.out;
  EXPECT_TRUE(std::filesystem::exists(with / "profile.delta.svg"));
  EXPECT_EQ(testsupport::read_file(with / "profile.csv").substr(0, 33), "segment,layer,mean,baseline,delta");
}

TEST(CliAttn, EmptyOrBadDirectoryIsAnError) {
  testsupport::ScratchDir dir;
  auto r = invoke({"attn", "--traces", dir.path().string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("no .trace files"), std::string::npos);
  r = invoke({"attn", "--traces", (dir / "missing").string()});
  EXPECT_EQ(r.code, cli::kFailure);
  testsupport::write_file(dir / "x.trace", "junk");
  r = invoke({"attn", "--traces", dir.path().string()});
  EXPECT_EQ(r.code, cli::kFailure);
  EXPECT_NE(r.err.find("x.trace"), std::string::npos) << r.err;
}

TEST(CliPrompts, NineCellsWithLayoutsAndJobs) {
  testsupport::ScratchDir dir;
  auto body = json::parse(kAbsolute);
  body["probe_model"] = "tiny-open-model";
  const auto spec = testsupport::write_spec(dir.path(), "s.json", body.dump(), synthetic(), "r.jsonl");
  const auto r = invoke({"prompts", "--spec", spec.string(), "--out", (dir / "p").string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  std::size_t txt = 0, layouts = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "p")) {
    const auto name = e.path().filename().string();
    if (name.size() > 12 && name.substr(name.size() - 12) == ".layout.json") {
      ++layouts;
    } else if (e.path().extension() == ".txt") {
      ++txt;
    }
  }
  EXPECT_EQ(txt, 9u);
  EXPECT_EQ(layouts, 9u);

  const auto jobs = testsupport::read_file(dir / "p/jobs.jsonl");
  ASSERT_EQ(count_lines(jobs), 9u);
  std::istringstream in(jobs);
  std::string line;
  std::getline(in, line);
  const auto job = nlohmann::ordered_json::parse(line);
  std::vector<std::string> keys;
  for (const auto& [k, _] : job.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"model_id", "layout", "generation", "trace", "instance_id", "cell"}));
  EXPECT_EQ(job["model_id"], "tiny-open-model");
  EXPECT_EQ(job["layout"], "g1_doc_1.layout.json");
  EXPECT_EQ(job["trace"], "traces/g1_doc_1.trace");
  EXPECT_EQ(job["generation"]["max_new_tokens"], 100);

  // The layout reproduces the prompt text and the spans tile it.
  const auto layout_json = json::parse(testsupport::read_file(dir / "p" / job["layout"].get<std::string>()));
  const auto layout = promptkit::layout_from_json(layout_json);
  EXPECT_EQ(layout.text, testsupport::read_file(dir / "p/g1_doc_1.txt"));
  EXPECT_EQ(layout_json["instance_id"].get<std::string>(), job["instance_id"].get<std::string>());
  EXPECT_EQ(layout_json["cell"]["segment"], "doc_1");
}

TEST(CliPrompts, BaselineHasThreeCells) {
  testsupport::ScratchDir dir;
  const auto spec = testsupport::write_spec(dir.path(), "s.json", kBaseline, synthetic(), "r.jsonl");
  const auto r = invoke({"prompts", "--spec", spec.string(), "--out", (dir / "p").string(), "--instance", "syn-010"});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  EXPECT_NE(r.out.find("wrote 3 prompts for instance syn-010"), std::string::npos) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir / "p/g2_none.txt"));
  const auto job = json::parse(testsupport::read_file(dir / "p/jobs.jsonl").substr(0, testsupport::read_file(dir / "p/jobs.jsonl").find('\n')));
  EXPECT_NE(job["model_id"].get<std::string>().find("mock("), std::string::npos);
  EXPECT_EQ(invoke({"prompts", "--spec", spec.string(), "--out", (dir / "q").string(), "--instance", "nope"}).code,
            cli::kFailure);
}

TEST(CliTemplates, WritesBuiltinSet) {
  testsupport::ScratchDir dir;
  const auto r = invoke({"templates", "--out", (dir / "t").string()});
  ASSERT_EQ(r.code, cli::kOk) << r.err;
  const auto loaded = promptkit::TemplateSet::load(dir / "t");
  EXPECT_EQ(loaded.version(), promptkit::TemplateSet::builtin().version());
}

TEST(CheckedInSpecs, AllParse) {
  const std::filesystem::path specs = ATTNBENCH_SPECS;
  std::size_t count = 0;
  for (const auto& e : std::filesystem::directory_iterator(specs)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(grid::load_spec(e.path())) << e.path();
    ++count;
  }
  EXPECT_GE(count, 6u);
}
