#include <catch2/catch_amalgamated.hpp>

#include "vqforge/mcq.hpp"

#include "support.hpp"

using namespace vqforge;

namespace {

std::string canonical_block() {
  std::vector<McqItem> items;
  for (int i = 0; i < 4; ++i) {
    auto item = testsupport::make_item("x/q" + std::to_string(i),
                                       static_cast<char>('A' + i % 4));
    item.question = "What is the dominant color of the object near marker " +
                    std::to_string(i + 1) + "?";
    items.push_back(item);
  }
  return serialize_stage1(items);
}

// Random-but-parseable item generator for round-trip properties.
McqItem random_item(Rng& rng, McqStage stage) {
  static const std::vector<std::string> words{
      "color",  "texture", "shape",    "corner", "shadow", "surface",
      "object", "region",  "material", "edge",   "light",  "pattern"};
  auto sentence = [&](std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(rng.pick(words));
    return join(out, " ");
  };
  McqItem item;
  item.question = "What about the " + sentence(3 + rng.below(5)) + "?";
  for (int c = 0; c < 4; ++c) {
    item.choices[static_cast<std::size_t>(c)] =
        sentence(1 + rng.below(3)) + " " + std::to_string(c);
  }
  const char gold = static_cast<char>('A' + rng.below(4));
  item.answer.letter = gold;
  item.answer.answer_text = item.answer_choice_text();
  item.question_type = rng.pick(words);
  item.stage = stage;
  if (stage == McqStage::stage1) {
    item.answer.object_label = rng.pick(words);
    for (int i = 0; i < 4; ++i)
      item.answer.bbox_px[static_cast<std::size_t>(i)] = static_cast<long>(rng.below(2000));
  }
  return item;
}

}  // namespace

TEST_CASE("stage1 parser reads the canonical 4-question block") {
  const auto result = parse_stage1_output(canonical_block(), 4);
  REQUIRE(result.ok);
  REQUIRE(result.items.size() == 4);
  CHECK(result.items[0].answer.letter == 'A');
  CHECK(result.items[1].answer.letter == 'B');
  CHECK(result.items[0].answer.object_label == "bag");
  CHECK(result.items[0].answer.bbox_px == std::array<long, 4>{100, 50, 300, 150});
}

TEST_CASE("stage1 parser flags unbalanced tags with the block index") {
  std::string text = canonical_block();
  const auto pos = text.find("</answer>");
  text.erase(pos, 9);  // first block loses its closing answer tag
  const auto result = parse_stage1_output(text, 4);
  REQUIRE_FALSE(result.ok);
  CHECK(result.error.code == "tag_unbalanced");
  CHECK(result.error.block_index == 0);
}

TEST_CASE("stage1 parser reports count mismatches") {
  const auto result = parse_stage1_output(canonical_block(), 5);
  REQUIRE_FALSE(result.ok);
  CHECK(result.error.code == "count_mismatch");
}

TEST_CASE("the documented answer field shape parses exactly") {
  const std::string text =
      "1. <question> What color is the item by the door? </question>\n"
      "   <choices> (A) black (B) brown leather (C) red (D) gray </choices>\n"
      "   <answer> bag, [29, 11, 39, 32], brown leather </answer>\n"
      "   <type> Specific Region Analysis </type>\n";
  const auto result = parse_stage1_output(text, 1);
  REQUIRE(result.ok);
  const AnswerRecord& a = result.items[0].answer;
  CHECK(a.object_label == "bag");
  CHECK(a.bbox_px == std::array<long, 4>{29, 11, 39, 32});
  CHECK(a.answer_text == "brown leather");
  CHECK(a.letter == 'B');
}

TEST_CASE("stage1 parser rejects malformed answers and unmatched answer text") {
  std::string text = canonical_block();
  auto broken = text;
  broken.replace(broken.find("[100, 50, 300, 150]"), 19, "[100, 50, 300]");
  auto r1 = parse_stage1_output(broken, 4);
  REQUIRE_FALSE(r1.ok);
  CHECK(r1.error.code == "answer_malformed");

  auto unmatched = text;
  const auto apos = unmatched.find("], ");
  unmatched.replace(apos + 3, unmatched.find(" </answer>") - apos - 3, "no such choice");
  auto r2 = parse_stage1_output(unmatched, 4);
  REQUIRE_FALSE(r2.ok);
  CHECK(r2.error.code == "answer_unmatched");
}

TEST_CASE("stage2 parser reads the canonical skeleton") {
  const std::string text =
      "Hard problem\n"
      "Considering every observation, which statement holds?\n"
      "(A) The red element sits left.\n"
      "(B) The blue element sits right.\n"
      "(C) The green element sits behind.\n"
      "(D) The white element sits ahead.\n"
      "Correct answer: (B)\n";
  const auto result = parse_stage2_output(text);
  REQUIRE(result.ok);
  CHECK(result.item.answer.letter == 'B');
  CHECK(result.item.stage == McqStage::stage2);
  CHECK(result.item.question == "Considering every observation, which statement holds?");
}

TEST_CASE("stage2 answer resolution matches option text after normalization") {
  const std::string text =
      "Hard problem\n"
      "Which statement holds?\n"
      "(A) The red element sits left.\n"
      "(B) The blue element sits right.\n"
      "(C) The GREEN element sits behind.\n"
      "(D) The white element sits ahead.\n"
      "Correct answer: the green element sits behind.\n";
  const auto result = parse_stage2_output(text);
  REQUIRE(result.ok);
  CHECK(result.item.answer.letter == 'C');
}

TEST_CASE("stage2 parser rejects three options or a missing answer line") {
  const std::string three =
      "Hard problem\nQ?\n(A) a\n(B) b\n(C) c\nCorrect answer: (A)\n";
  CHECK_FALSE(parse_stage2_output(three).ok);
  CHECK(parse_stage2_output(three).error.code == "options_malformed");

  const std::string no_answer = "Hard problem\nQ?\n(A) a\n(B) b\n(C) c\n(D) d\n";
  CHECK(parse_stage2_output(no_answer).error.code == "missing_answer");
}

TEST_CASE("stage2 explicit letter beats text matching") {
  const std::string text =
      "Hard problem\nQ?\n(A) alpha\n(B) beta\n(C) gamma\n(D) delta\n"
      "Correct answer: (D) alpha\n";
  const auto result = parse_stage2_output(text);
  REQUIRE(result.ok);
  CHECK(result.item.answer.letter == 'D');
}

TEST_CASE("serialize-parse round-trips hold across random items") {
  Rng rng(2024);
  for (int i = 0; i < 300; ++i) {
    McqItem item = random_item(rng, McqStage::stage1);
    const auto parsed = parse_stage1_output(serialize_stage1({item}), 1);
    REQUIRE(parsed.ok);
    CHECK(parsed.items[0].question == item.question);
    CHECK(parsed.items[0].choices == item.choices);
    CHECK(parsed.items[0].answer.letter == item.answer.letter);
    CHECK(parsed.items[0].answer.object_label == item.answer.object_label);
    CHECK(parsed.items[0].answer.bbox_px == item.answer.bbox_px);
    CHECK(parsed.items[0].question_type == item.question_type);

    McqItem item2 = random_item(rng, McqStage::stage2);
    const auto parsed2 = parse_stage2_output(serialize_stage2(item2));
    REQUIRE(parsed2.ok);
    CHECK(parsed2.item.question == item2.question);
    CHECK(parsed2.item.choices == item2.choices);
    CHECK(parsed2.item.answer.letter == item2.answer.letter);
  }
}

TEST_CASE("validate_mcq passes a conforming stage1 item") {
  const auto item = testsupport::make_item();
  const auto ann = testsupport::make_ann();
  const auto report = validate_mcq(item, &ann);
  CHECK(report.ok);
  CHECK(report.violations.empty());
}

TEST_CASE("validate_mcq flags coordinate leaks") {
  auto item = testsupport::make_item();
  item.question = "Is the object at [29, 11, 39, 32] red or green in this view?";
  const auto ann = testsupport::make_ann();
  const auto report = validate_mcq(item, &ann);
  REQUIRE_FALSE(report.ok);
  CHECK(report.violations[0].rule_id == "coordinate_leak");

  item.question = "Is the region (0.29, 0.11, 0.39, 0.32) darker than the rest of it?";
  CHECK_FALSE(validate_mcq(item, &ann).ok);
}

TEST_CASE("validate_mcq flags literal label leaks, whole-word and phrase") {
  auto item = testsupport::make_item();
  item.question = "What color is the bag near the fence?";
  const auto ann = testsupport::make_ann("bag");
  const auto report = validate_mcq(item, &ann);
  REQUIRE_FALSE(report.ok);
  CHECK(report.violations[0].rule_id == "label_leak");

  // Substring inside a longer word is not a leak.
  item.question = "What color is the baggage cart by the gate area?";
  CHECK(validate_mcq(item, &ann).ok);

  // Multiword labels match as phrases, case-insensitive.
  auto ann2 = testsupport::make_ann("Picnic Table");
  auto item2 = testsupport::make_item();
  item2.answer.object_label = "Picnic Table";
  item2.question = "Who sits at the picnic table in the shade there?";
  const auto report2 = validate_mcq(item2, &ann2);
  REQUIRE_FALSE(report2.ok);
  CHECK(report2.violations[0].rule_id == "label_leak");
}

TEST_CASE("validate_mcq checks answer label and box against the annotation") {
  auto item = testsupport::make_item();
  item.answer.object_label = "cart";
  const auto ann = testsupport::make_ann("bag");
  auto report = validate_mcq(item, &ann);
  REQUIRE_FALSE(report.ok);
  CHECK(report.violations[0].rule_id == "answer_label_mismatch");

  auto item2 = testsupport::make_item();
  item2.answer.bbox_px[2] += 5;
  const auto report2 = validate_mcq(item2, &ann);
  REQUIRE_FALSE(report2.ok);
  CHECK(report2.violations[0].rule_id == "answer_bbox_mismatch");
}

TEST_CASE("validate_mcq flags duplicate or empty choices and bad letters") {
  auto item = testsupport::make_item();
  item.choices[2] = item.choices[1];
  CHECK_FALSE(validate_mcq(item, nullptr).ok);

  auto item2 = testsupport::make_item();
  item2.choices[3] = "  ";
  CHECK_FALSE(validate_mcq(item2, nullptr).ok);

  auto item3 = testsupport::make_item();
  item3.answer.letter = 'E';
  CHECK_FALSE(validate_mcq(item3, nullptr).ok);

  auto item4 = testsupport::make_item();
  item4.answer.answer_text = "not the keyed choice";
  auto report = validate_mcq(item4, nullptr);
  REQUIRE_FALSE(report.ok);
  CHECK(report.violations[0].rule_id == "answer_text_mismatch");
}

TEST_CASE("validate_mcq enforces question length bounds") {
  auto item = testsupport::make_item();
  item.question = "Short?";
  CHECK_FALSE(validate_mcq(item, nullptr).ok);

  auto item2 = testsupport::make_item();
  item2.question = std::string(700, 'q') + "?";
  CHECK_FALSE(validate_mcq(item2, nullptr).ok);
}

TEST_CASE("ok reports imply zero violations") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto item = random_item(rng, McqStage::stage2);
    const auto report = validate_mcq(item, nullptr);
    CHECK(report.ok == report.violations.empty());
  }
}

TEST_CASE("answer letters are extracted from the documented forms") {
  CHECK(extract_answer_letter("(A)") == 'A');
  CHECK(extract_answer_letter("B") == 'B');
  CHECK(extract_answer_letter("(C) the red car") == 'C');
  CHECK(extract_answer_letter("\\boxed{D}") == 'D');
  CHECK(extract_answer_letter("Answer: A") == 'A');
  CHECK(extract_answer_letter("The final answer is (B).") == 'B');
  CHECK(extract_answer_letter("some reasoning...</think> The answer is (C) the red car.") ==
        'C');
}

TEST_CASE("ambiguous or absent letters yield nothing") {
  CHECK_FALSE(extract_answer_letter("A or B").has_value());
  CHECK_FALSE(extract_answer_letter("no letter here").has_value());
  CHECK_FALSE(extract_answer_letter("(A) first but also (B) second").has_value());
  CHECK_FALSE(extract_answer_letter("").has_value());
}

TEST_CASE("extraction scans only the tail after </think>") {
  // The think body names (A); the tail commits to (D).
  const std::string text = "<think>Maybe (A)? not sure</think>\nAnswer: D";
  CHECK(extract_answer_letter(text) == 'D');
}

TEST_CASE("extracted letters never leave A-D") {
  Rng rng(77);
  const std::string alphabet = "ABCDEFGH() \\boxed{}answer:.";
  for (int i = 0; i < 500; ++i) {
    std::string text;
    const std::size_t len = rng.below(40);
    for (std::size_t k = 0; k < len; ++k)
      text += alphabet[static_cast<std::size_t>(rng.below(alphabet.size()))];
    if (auto letter = extract_answer_letter(text)) {
      CHECK(*letter >= 'A');
      CHECK(*letter <= 'D');
    }
  }
}

TEST_CASE("verdict parsing keys on the last boxed token") {
  CHECK(parse_verdict("thinking... \\boxed{Yes}") == Verdict::consistent);
  CHECK(parse_verdict("nope \\boxed{No}") == Verdict::inconsistent);
  CHECK(parse_verdict("\\boxed{YES} then \\boxed{no}") == Verdict::inconsistent);
  CHECK_FALSE(parse_verdict("no verdict at all").has_value());
}

TEST_CASE("think format requires an ordered tag pair") {
  CHECK(check_think_format("<think>x</think>y"));
  CHECK_FALSE(check_think_format("<think>x"));
  CHECK_FALSE(check_think_format(""));
  CHECK_FALSE(check_think_format("</think>first<think>later"));
}
