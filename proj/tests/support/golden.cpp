#include "golden.hpp"

#include "scratch.hpp"

namespace testsupport {

using namespace attnbench::promptkit;

std::vector<GoldenCase> golden_cases() {
  const auto scheme_tag = [](IndexScheme s) {
    switch (s) {
      case IndexScheme::none:
        return "noidx";
      case IndexScheme::id_ascending:
        return "id";
      case IndexScheme::id_reversed:
        return "rid";
      case IndexScheme::position:
        return "pos";
    }
    return "?";
  };
  std::vector<GoldenCase> out;
  for (std::size_t n : {3, 9}) {
    const std::size_t gold = n == 3 ? 2 : 5;
    for (auto scheme : {IndexScheme::none, IndexScheme::id_ascending, IndexScheme::id_reversed, IndexScheme::position}) {
      const std::string stem = "prompt_" + std::to_string(n) + "_" + scheme_tag(scheme) + "_";
      out.push_back({stem + "none", n, gold, scheme, InstructionKind::none, std::nullopt});
      out.push_back({stem + "relmid", n, gold, scheme, InstructionKind::relative,
                     SegmentPhrase::position(PositionWord::midsection)});
      if (scheme == IndexScheme::id_ascending || scheme == IndexScheme::id_reversed) {
        const std::size_t id = label_id(scheme, gold, n);
        out.push_back({stem + "abs" + std::to_string(id), n, gold, scheme, InstructionKind::absolute,
                       SegmentPhrase::document(id)});
      } else if (scheme == IndexScheme::position) {
        out.push_back({stem + "absmid", n, gold, scheme, InstructionKind::absolute,
                       SegmentPhrase::position(PositionWord::midsection)});
      }
    }
  }
  return out;
}

attnbench::corpus::QAInstance golden_instance() {
  std::string line = read_file(fixture("golden_instance.json"));
  while (!line.empty() && line.back() == '\n') line.pop_back();
  return attnbench::corpus::parse_record(line, attnbench::corpus::Format::native, 1);
}

PromptLayout render(const GoldenCase& c) {
  const auto inst = golden_instance();
  const auto ctx = attnbench::corpus::arrange(inst, c.n, c.gold_position);
  return assemble_prompt(inst.question, ctx, c.scheme, c.kind, c.phrase);
}

}  // namespace testsupport
