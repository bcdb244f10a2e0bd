#include <catch2/catch_amalgamated.hpp>

#include "vqforge/traces.hpp"
#include "vqforge/stub_server.hpp"

#include "support.hpp"

using namespace vqforge;

namespace {

struct Rig {
  stub::StubServer server;
  std::unique_ptr<ModelGateway> gateway;
  TemplateStore store{testsupport::template_dir()};

  explicit Rig(stub::StubConfig cfg = {}) : server(std::move(cfg)) {
    server.start();
    std::vector<ModelRole> roles;
    for (const auto& name : role_names()) {
      ModelRole r = default_role(name, server.url());
      r.retry = {3, 2};
      roles.push_back(r);
    }
    gateway = std::make_unique<ModelGateway>(roles);
  }
};

stub::StubRule text_rule(const std::string& marker, const std::string& text) {
  return {marker, "", "", text, {}, "", 0, 0};
}

}  // namespace

TEST_CASE("distillation splits rationale from the final answer and grades it") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("multiple-choice question",
                                "The strap and tone suggest leather.\nAnswer: (B)"));
  Rig rig(std::move(cfg));
  const auto item = testsupport::make_item("img001/o00/q0", 'B');

  const auto result = distill_simple_cot(*rig.gateway, rig.store, item, "img://001", 0, 7);
  REQUIRE(result.ok);
  CHECK(result.trace.z1 == "The strap and tone suggest leather.");
  CHECK(result.trace.a1 == 'B');
  CHECK(result.trace.z1_correct);
  CHECK(result.trace.trace_id == "img001/o00/q0/t0");
}

TEST_CASE("incorrect distilled answers are kept as negatives") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("multiple-choice question",
                                "The hue reads as red to me.\nAnswer: (C)"));
  Rig rig(std::move(cfg));
  const auto item = testsupport::make_item("img001/o00/q0", 'B');
  const auto result = distill_simple_cot(*rig.gateway, rig.store, item, "img://001", 1, 7);
  REQUIRE(result.ok);
  CHECK_FALSE(result.trace.z1_correct);
}

TEST_CASE("rollouts with no extractable answer are dropped with a reason") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("multiple-choice question", "hard to say anything useful"));
  Rig rig(std::move(cfg));
  const auto result = distill_simple_cot(*rig.gateway, rig.store, testsupport::make_item(),
                                         "img://001", 0, 7);
  CHECK_FALSE(result.ok);
  CHECK(result.drop_reason == "no_answer");
}

TEST_CASE("expansion parses the continuation, grades a2, and keeps z1 as prefix") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("continue_final_message",
                                " Wait, let me re-check the region. The tone is leather-brown. "
                                "</think>\n\nThe answer is (B)."));
  Rig rig(std::move(cfg));
  const auto item = testsupport::make_item("img001/o00/q0", 'B');
  ReasoningTrace trace;
  trace.item_id = item.item_id;
  trace.trace_id = item.item_id + "/t0";
  trace.z1 = "The strap suggests leather.";
  trace.a1 = 'C';
  trace.z1_correct = false;

  SynthConfig synth;
  expand_thought(*rig.gateway, item, "A courtyard.", trace, synth, 9);
  REQUIRE(trace.z2.has_value());
  CHECK(*trace.a2 == 'B');
  CHECK(*trace.a2_correct);
  CHECK_FALSE(trace.expansion_format_incomplete);
  // extend-not-rewrite: the full thought is literally z1 followed by z2
  const std::string thought = trace.z1 + *trace.z2;
  CHECK(thought.rfind(trace.z1, 0) == 0);
  CHECK(trace.z2->find("</think>") == std::string::npos);
}

TEST_CASE("banned continuations exhaust regenerations and leave the trace z1-only") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("continue_final_message",
                                "the image description says it is blue </think> (B)."));
  Rig rig(std::move(cfg));
  const auto item = testsupport::make_item();
  ReasoningTrace trace;
  trace.z1 = "Initial thought.";
  SynthConfig synth;
  synth.max_regens = 2;

  const long before = rig.server.stats().requests;
  expand_thought(*rig.gateway, item, "cap", trace, synth, 9);
  CHECK_FALSE(trace.z2.has_value());
  CHECK(trace.expansion_filter_reason.rfind("banned_pattern:", 0) == 0);
  CHECK(rig.server.stats().requests - before == 3);  // initial + 2 regens
}

TEST_CASE("a continuation without the closing tag is flagged format_incomplete") {
  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("continue_final_message",
                                " More thinking without an end.\n\nThe answer is (B)."));
  Rig rig(std::move(cfg));
  const auto item = testsupport::make_item("img001/o00/q0", 'B');
  ReasoningTrace trace;
  trace.z1 = "Initial thought.";
  SynthConfig synth;
  expand_thought(*rig.gateway, item, "cap", trace, synth, 9);
  REQUIRE(trace.z2.has_value());  // taken to end of text
  CHECK(trace.expansion_format_incomplete);
  CHECK(*trace.a2 == 'B');
}

TEST_CASE("verification marks expansions by the boxed verdict") {
  Rig rig;  // synthetic verifier answers Yes by default
  const auto item = testsupport::make_item("img001/o00/q0", 'B');
  ReasoningTrace trace;
  trace.z1 = "z1 text.";
  trace.z2 = " continued reasoning that supports brown.";
  trace.a2 = 'B';
  trace.a2_correct = true;
  verify_trace(*rig.gateway, rig.store, item, trace, 4);
  REQUIRE(trace.expansion_verified.has_value());
  CHECK(*trace.expansion_verified);

  stub::StubConfig cfg;
  cfg.rules.push_back(text_rule("\\boxed{Yes}", "counter-evidence \\boxed{No}"));
  Rig rig_no(std::move(cfg));
  ReasoningTrace trace2 = trace;
  trace2.expansion_verified.reset();
  verify_trace(*rig_no.gateway, rig_no.store, item, trace2, 4);
  CHECK_FALSE(*trace2.expansion_verified);
}

TEST_CASE("incorrect expansions are not submitted for verification") {
  Rig rig;
  const auto item = testsupport::make_item();
  ReasoningTrace trace;
  trace.z1 = "z1";
  trace.z2 = "z2";
  trace.a2 = 'A';
  trace.a2_correct = false;
  const long before = rig.server.stats().requests;
  verify_trace(*rig.gateway, rig.store, item, trace, 4);
  CHECK(rig.server.stats().requests == before);
  CHECK_FALSE(trace.expansion_verified.has_value());
}

TEST_CASE("classification is total and matches the trace flags") {
  std::vector<std::regex> banned{std::regex("image description", std::regex::icase)};

  ReasoningTrace correct;
  correct.z1 = "clean rationale";
  correct.z1_correct = true;
  classify_trace(correct, banned);
  CHECK(correct.outcome == TraceOutcome::sft_ready);

  ReasoningTrace negative;
  negative.z1 = "clean but wrong";
  negative.z1_correct = false;
  classify_trace(negative, banned);
  CHECK(negative.outcome == TraceOutcome::negative_pool);

  ReasoningTrace recovered;
  recovered.z1 = "wrong start";
  recovered.z1_correct = false;
  recovered.z2 = " but corrected";
  recovered.a2 = 'B';
  recovered.a2_correct = true;
  recovered.expansion_verified = true;
  classify_trace(recovered, banned);
  CHECK(recovered.outcome == TraceOutcome::sft_ready);
  CHECK(sft_thought(recovered) == "wrong start but corrected");

  ReasoningTrace unverified = recovered;
  unverified.expansion_verified = false;
  classify_trace(unverified, banned);
  CHECK(unverified.outcome == TraceOutcome::negative_pool);
  CHECK(sft_thought(unverified) == "wrong start");

  ReasoningTrace leaky;
  leaky.z1 = "as the image description says, it is blue";
  leaky.z1_correct = true;
  classify_trace(leaky, banned);
  CHECK(leaky.outcome == TraceOutcome::filtered);
  CHECK(leaky.filter_reason == "banned_leak");
}

TEST_CASE("trace JSON round-trips") {
  ReasoningTrace t;
  t.item_id = "img001/o00/q0";
  t.trace_id = t.item_id + "/t1";
  t.rollout = 1;
  t.z1 = "first";
  t.a1 = 'C';
  t.z1_correct = false;
  t.z2 = " second";
  t.a2 = 'B';
  t.a2_correct = true;
  t.expansion_verified = true;
  t.outcome = TraceOutcome::sft_ready;
  const nlohmann::json j = t;
  const ReasoningTrace back = j.get<ReasoningTrace>();
  CHECK(nlohmann::json(back) == j);
}
