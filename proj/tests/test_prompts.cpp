#include <catch2/catch_amalgamated.hpp>

#include "vqforge/prompts.hpp"

#include "support.hpp"

using namespace vqforge;

namespace {

const TemplateStore& store() {
  static TemplateStore s(testsupport::template_dir());
  return s;
}

void check_against_golden(const std::string& name, const std::string& rendered) {
  const auto path = testsupport::golden_dir() / (name + ".golden.txt");
  INFO("golden file: " << path);
  REQUIRE(std::filesystem::exists(path));
  CHECK(rendered == testsupport::read_file(path));
}

std::vector<SubProblem> sample_subproblems(std::size_t k) {
  std::vector<SubProblem> subs;
  for (std::size_t i = 0; i < k; ++i) {
    SubProblem p;
    p.question = "What material is the item near marker " + std::to_string(i + 1) + "?";
    p.choices = {"wood", "metal", "glass", "stone"};
    p.answer_letter = static_cast<char>('A' + i % 4);
    p.answer_text = p.choices[i % 4];
    subs.push_back(p);
  }
  return subs;
}

}  // namespace

TEST_CASE("category quotas follow round-half-up of n*0.25") {
  CHECK(category_quota(4) == std::array<int, 4>{1, 1, 1, 1});
  CHECK(category_quota(8) == std::array<int, 4>{2, 2, 2, 2});
  // 6*0.25 = 1.5 rounds up; the quota sum (8) intentionally disagrees with
  // the enforced total (6).
  CHECK(category_quota(6) == std::array<int, 4>{2, 2, 2, 2});
  CHECK(category_quota(1) == std::array<int, 4>{0, 0, 0, 0});
  CHECK_THROWS_AS(category_quota(0), std::invalid_argument);
}

TEST_CASE("quota entries are equal and sum to n when divisible by 4") {
  for (int n = 1; n <= 64; ++n) {
    const auto q = category_quota(n);
    CHECK(q[0] == q[1]);
    CHECK(q[1] == q[2]);
    CHECK(q[2] == q[3]);
    CHECK(q[0] >= 0);
    if (n % 4 == 0) CHECK(q[0] + q[1] + q[2] + q[3] == n);
  }
}

TEST_CASE("stage1 prompt carries the task, reminders and metadata") {
  const auto record = testsupport::make_record();
  const auto ann = testsupport::make_ann();
  const auto prompt = render_stage1_prompt(store(), record, ann, 4);

  CHECK(prompt.user.find("Generate exactly 4 multiple-choice questions") != std::string::npos);
  CHECK(prompt.user.find("MUST NOT disclose bounding box coordinates") != std::string::npos);
  CHECK(prompt.user.find("computer vision expert") != std::string::npos);
  CHECK(prompt.user.find(record.caption) != std::string::npos);
  CHECK(prompt.user.find("- Object: bag") != std::string::npos);
  CHECK(prompt.user.find("1000 x 500 pixels") != std::string::npos);
  // Integer coordinates appear exactly once: in the answer-format reminder.
  CHECK(prompt.user.find("\"bag, [100, 50, 300, 150], [specific answer]\"") !=
        std::string::npos);
  CHECK(count_occurrences(prompt.user, "[100, 50, 300, 150]") == 1);
  CHECK(prompt.user.find("{{") == std::string::npos);
}

TEST_CASE("stage1 prompt quota text varies with n") {
  const auto record = testsupport::make_record();
  const auto ann = testsupport::make_ann();
  const auto p4 = render_stage1_prompt(store(), record, ann, 4);
  CHECK(p4.user.find("(1 question):") != std::string::npos);
  const auto p8 = render_stage1_prompt(store(), record, ann, 8);
  CHECK(p8.user.find("(2 questions):") != std::string::npos);
}

TEST_CASE("stage1 prompt requires a caption") {
  auto record = testsupport::make_record();
  record.caption.clear();
  CHECK_THROWS_AS(render_stage1_prompt(store(), record, testsupport::make_ann(), 4),
                  TemplateError);
}

TEST_CASE("stage1 prompt matches its golden file") {
  const auto prompt = render_stage1_prompt(store(), testsupport::make_record(),
                                           testsupport::make_ann(), 4);
  check_against_golden("stage1_n4", prompt.user);
}

TEST_CASE("stage2 prompt lists exactly K sub-problems and the output skeleton") {
  const auto prompt = render_stage2_prompt(store(), "A busy plaza.", sample_subproblems(5));
  CHECK(count_occurrences(prompt.user, "Problem ") == 5);
  CHECK(prompt.user.find("Correct answer:") != std::string::npos);
  CHECK(prompt.user.find("A busy plaza.") != std::string::npos);
  CHECK(prompt.user.find("{{") == std::string::npos);
}

TEST_CASE("stage2 prompt rejects K outside [2,5]") {
  CHECK_THROWS_AS(render_stage2_prompt(store(), "c", sample_subproblems(1)), TemplateError);
  CHECK_THROWS_AS(render_stage2_prompt(store(), "c", sample_subproblems(6)), TemplateError);
}

TEST_CASE("stage2 prompt matches its golden file") {
  const auto prompt = render_stage2_prompt(store(), "A busy plaza with a fountain.",
                                           sample_subproblems(3));
  check_against_golden("stage2_k3", prompt.user);
}

TEST_CASE("expansion prompt primes the assistant with <think> + z1") {
  const auto msgs = render_expansion_prompt("A dog.", "Q?", "I see a dog near the gate.");
  REQUIRE(msgs.assistant_prefix.has_value());
  CHECK(*msgs.assistant_prefix == "<think>I see a dog near the gate.");
  REQUIRE(msgs.messages.size() == 1);
  CHECK(msgs.messages[0].role == "user");
  CHECK(msgs.messages[0].content.find("A dog.") == 0);
  CHECK(msgs.messages[0].content.find("Q?") != std::string::npos);
}

TEST_CASE("expansion prompt rejects an empty rationale") {
  CHECK_THROWS_AS(render_expansion_prompt("c", "q", ""), TemplateError);
}

TEST_CASE("verification prompt elides long reflections to the last 30 words") {
  std::vector<std::string> words;
  for (int i = 1; i <= 100; ++i) words.push_back("w" + std::to_string(i));
  const std::string reflection = join(words, " ");
  const auto prompt = render_verification_prompt(store(), "Q?", "(B) brown", reflection);

  std::vector<std::string> tail(words.end() - 30, words.end());
  const std::string expected = "... " + join(tail, " ");
  CHECK(prompt.user.find(expected) != std::string::npos);
  CHECK(prompt.user.find("w70 ") == std::string::npos);  // w70 is before the window
  CHECK(prompt.user.find("\\boxed{Yes}") != std::string::npos);
}

TEST_CASE("verification prompt embeds short reflections whole, without ellipsis") {
  const std::string reflection = "one two three four five six seven eight nine ten";
  const auto prompt = render_verification_prompt(store(), "Q?", "(B) brown", reflection);
  CHECK(prompt.user.find("Reflection: " + reflection) != std::string::npos);
  CHECK(prompt.user.find("Reflection: ...") == std::string::npos);
}

TEST_CASE("verification prompt matches its golden file") {
  const auto prompt = render_verification_prompt(
      store(), "What color is the bag?", "(B) brown",
      "The strap detail suggests leather and the tone reads as brown overall.");
  check_against_golden("cot_verify_short", prompt.user);
}

TEST_CASE("solve and verifier prompts render cleanly") {
  const auto item = testsupport::make_item();
  const auto solve = render_solve_prompt(store(), item.question, item.choices, "A caption.");
  CHECK(solve.user.find("Image description: A caption.") == 0);
  CHECK(solve.user.find("(A) red") != std::string::npos);
  CHECK(solve.user.find("Answer: (X)") != std::string::npos);

  const auto solve_img = render_solve_prompt(store(), item.question, item.choices);
  CHECK(solve_img.user.find("Image description") == std::string::npos);

  const auto verify = render_mcq_verifier_prompt(store(), "A caption.", item.question,
                                                 item.choices, 'B', "brown");
  CHECK(verify.user.find("Keyed answer: (B) brown") != std::string::npos);
  CHECK(verify.user.find("\\boxed{Yes}") != std::string::npos);
  check_against_golden("mcq_verify", verify.user);
  check_against_golden("solve_with_caption", solve.user);
}

TEST_CASE("behavior prompt embeds the trace") {
  const auto prompt = render_behavior_prompt(store(), "First, locate. Wait, revise.");
  CHECK(prompt.user.find("First, locate. Wait, revise.") != std::string::npos);
  CHECK(prompt.user.find("single JSON object") != std::string::npos);
  check_against_golden("behavior_count", prompt.user);
}

TEST_CASE("rendering is pure: identical inputs give identical bytes") {
  const auto a = render_stage1_prompt(store(), testsupport::make_record(),
                                      testsupport::make_ann(), 6);
  const auto b = render_stage1_prompt(store(), testsupport::make_record(),
                                      testsupport::make_ann(), 6);
  CHECK(a.user == b.user);
}

TEST_CASE("unresolved placeholders are an error") {
  CHECK_THROWS_AS(store().render("stage1_mcq", {}), TemplateError);
}

TEST_CASE("missing template directory is an error") {
  CHECK_THROWS_AS(TemplateStore("/nonexistent/tpl"), TemplateError);
}
