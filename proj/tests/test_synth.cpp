#include <catch2/catch_amalgamated.hpp>

#include "vqforge/synth.hpp"
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

std::vector<McqItem> make_pool(std::size_t n) {
  std::vector<McqItem> pool;
  for (std::size_t i = 0; i < n; ++i) {
    auto item = testsupport::make_item("img001/o0" + std::to_string(i) + "/q0");
    item.question = "What material is the item near marker " + std::to_string(i) + "?";
    item.answer.answer_text = item.answer_choice_text();
    pool.push_back(item);
  }
  return pool;
}

}  // namespace

TEST_CASE("stage1 generation returns validated candidates on the happy path") {
  Rig rig;
  const auto record = testsupport::make_record();
  const auto ann = testsupport::make_ann();
  SynthConfig cfg;
  cfg.verifier_enabled = false;

  const auto result = generate_stage1(*rig.gateway, rig.store, record, ann, cfg,
                                      "img001/o00", 42);
  CHECK_FALSE(result.batch_error.has_value());
  CHECK(result.generation_calls >= 1);
  CHECK(result.candidates.size() + result.dropped.size() >= 4);
  for (const auto& item : result.candidates) {
    CHECK(item.item_id.rfind("img001/o00/", 0) == 0);
    CHECK(item.image_id == "img001");
    CHECK(item.status == McqStatus::candidate);
    CHECK(validate_mcq(item, &ann, cfg.limits).ok);
  }
}

TEST_CASE("a short batch earns one regeneration then a count_mismatch drop") {
  // Scripted completion always returns 3 blocks when 4 are expected.
  auto items = make_pool(3);
  for (auto& m : items) m.answer.object_label = "bag";
  stub::StubConfig cfg;
  cfg.rules.push_back({"Structured Output Example", "", "", serialize_stage1(items), {}, "", 0, 0});
  Rig rig(std::move(cfg));

  SynthConfig synth;
  const auto result = generate_stage1(*rig.gateway, rig.store, testsupport::make_record(),
                                      testsupport::make_ann(), synth, "img001/o00", 42);
  REQUIRE(result.batch_error.has_value());
  CHECK(result.batch_error->code == "count_mismatch");
  CHECK(result.generation_calls == 2);
  CHECK(result.candidates.empty());
}

TEST_CASE("items failing validation are regenerated once, rest dropped with reasons") {
  // First valid block, but with label leaks in every question; regeneration
  // returns the same text, so every slot drops with its rule id.
  std::vector<McqItem> leaky;
  for (int i = 0; i < 4; ++i) {
    auto item = testsupport::make_item();
    item.question = "What color is the bag near position " + std::to_string(i) + "?";
    leaky.push_back(item);
  }
  stub::StubConfig cfg;
  cfg.rules.push_back({"Structured Output Example", "", "", serialize_stage1(leaky), {}, "", 0, 0});
  Rig rig(std::move(cfg));

  SynthConfig synth;
  const auto result = generate_stage1(*rig.gateway, rig.store, testsupport::make_record(),
                                      testsupport::make_ann("bag"), synth, "img001/o00", 42);
  CHECK(result.generation_calls == 2);  // initial + one regeneration
  CHECK(result.candidates.empty());
  REQUIRE(result.dropped.size() == 4);
  for (const auto& d : result.dropped) {
    CHECK(d.item.status == McqStatus::rejected);
    CHECK(d.violations.front().rule_id == "label_leak");
  }
}

TEST_CASE("verifier passes when the stub says yes and fails on no") {
  Rig rig;
  const auto item = testsupport::make_item();
  const auto pass = verify_mcq_llm(*rig.gateway, rig.store, item, "caption", 1);
  CHECK(pass.pass);

  stub::StubConfig cfg;
  cfg.rules.push_back({"\\boxed{Yes}", "", "",
                       std::string("the keyed answer is unsupported \\boxed{No}"), {}, "", 0, 0});
  Rig rig_no(std::move(cfg));
  const auto fail = verify_mcq_llm(*rig_no.gateway, rig_no.store, item, "caption", 1);
  CHECK_FALSE(fail.pass);
  CHECK(fail.reason == "verifier_no");
}

TEST_CASE("a garbled verdict is retried once then fails as unparseable") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"\\boxed{Yes}", "", "", std::string("cannot say"), {}, "", 0, 0});
  Rig rig(std::move(cfg));
  const long before = rig.server.stats().requests;
  const auto out = verify_mcq_llm(*rig.gateway, rig.store, testsupport::make_item(), "cap", 1);
  CHECK_FALSE(out.pass);
  CHECK(out.reason == "verdict_unparseable");
  CHECK(rig.server.stats().requests - before == 2);
}

TEST_CASE("composition samples K in [2,5] without replacement and records provenance") {
  Rig rig;
  SynthConfig cfg;
  const auto record = testsupport::make_record();

  const auto pool = make_pool(7);
  const auto result = compose_stage2(*rig.gateway, rig.store, record, pool, cfg, 0, 99);
  REQUIRE_FALSE(result.skipped);
  CHECK(result.k >= 2);
  CHECK(result.k <= 5);
  CHECK(result.item.source_item_ids.size() == static_cast<std::size_t>(result.k));
  std::set<std::string> seen(result.item.source_item_ids.begin(),
                             result.item.source_item_ids.end());
  CHECK(seen.size() == result.item.source_item_ids.size());  // no replacement
  for (const auto& id : result.item.source_item_ids) {
    CHECK(std::any_of(pool.begin(), pool.end(),
                      [&](const McqItem& m) { return m.item_id == id; }));
  }
  CHECK(result.item.stage == McqStage::stage2);
  CHECK(result.item.item_id == "img001/c0");
}

TEST_CASE("composition skips pools smaller than two") {
  Rig rig;
  SynthConfig cfg;
  const auto result = compose_stage2(*rig.gateway, rig.store, testsupport::make_record(),
                                     make_pool(1), cfg, 0, 99);
  CHECK(result.skipped);
  CHECK(result.skip_reason == "pool_too_small");
}

TEST_CASE("composition is deterministic under a fixed seed") {
  Rig rig;
  SynthConfig cfg;
  const auto pool = make_pool(7);
  const auto a = compose_stage2(*rig.gateway, rig.store, testsupport::make_record(), pool, cfg,
                                0, 1234);
  const auto b = compose_stage2(*rig.gateway, rig.store, testsupport::make_record(), pool, cfg,
                                0, 1234);
  REQUIRE_FALSE(a.skipped);
  CHECK(a.item.source_item_ids == b.item.source_item_ids);
  CHECK(a.item.question == b.item.question);
}

TEST_CASE("consistency filter applies tau to the rollout agreement") {
  auto item = testsupport::make_item("img001/c0", 'A');
  item.question = "CONSISTENCY CASE ONE which statement holds overall?";
  item.answer.answer_text = item.answer_choice_text();
  item.stage = McqStage::stage2;

  stub::StubConfig cfg;
  cfg.rules.push_back({"CONSISTENCY CASE ONE", "", "", std::nullopt,
                       {"Answer: (A)", "Answer: (A)", "Answer: (A)", "Answer: (A)",
                        "Answer: (B)"},
                       "", 0, 0});
  Rig rig(std::move(cfg));
  SynthConfig synth;  // N = 5, tau = 0.8

  const auto result = consistency_filter(*rig.gateway, rig.store, item, "caption", synth, 5);
  CHECK(result.matches == 4);
  CHECK(result.consistency == Catch::Approx(0.8));
  CHECK(result.retained);  // 0.8 >= 0.8
}

TEST_CASE("low-agreement compositions are dropped") {
  auto item = testsupport::make_item("img001/c0", 'A');
  item.question = "CONSISTENCY CASE TWO which statement holds overall?";
  item.answer.answer_text = item.answer_choice_text();

  stub::StubConfig cfg;
  cfg.rules.push_back({"CONSISTENCY CASE TWO", "", "", std::nullopt,
                       {"Answer: (A)", "Answer: (B)", "Answer: (C)", "Answer: (A)",
                        "Answer: (B)"},
                       "", 0, 0});
  Rig rig(std::move(cfg));
  SynthConfig synth;

  const auto result = consistency_filter(*rig.gateway, rig.store, item, "caption", synth, 5);
  CHECK(result.matches == 2);
  CHECK(result.consistency == Catch::Approx(0.4));
  CHECK_FALSE(result.retained);
}

TEST_CASE("full agreement is retained and unreadable rollouts count as misses") {
  auto item = testsupport::make_item("img001/c0", 'A');
  item.question = "CONSISTENCY CASE THREE which statement holds overall?";
  item.answer.answer_text = item.answer_choice_text();

  stub::StubConfig cfg;
  cfg.rules.push_back({"CONSISTENCY CASE THREE", "", "",
                       std::string("Answer: (A)"), {}, "", 0, 0});
  Rig rig(std::move(cfg));
  SynthConfig synth;
  const auto all = consistency_filter(*rig.gateway, rig.store, item, "caption", synth, 5);
  CHECK(all.consistency == 1.0);
  CHECK(all.retained);

  stub::StubConfig cfg2;
  cfg2.rules.push_back({"CONSISTENCY CASE THREE", "", "", std::nullopt,
                        {"Answer: (A)", "mumble", "Answer: (A)", "Answer: (A)", "Answer: (A)"},
                        "", 0, 0});
  Rig rig2(std::move(cfg2));
  const auto partial = consistency_filter(*rig2.gateway, rig2.store, item, "caption", synth, 5);
  CHECK(partial.matches == 4);
  REQUIRE(partial.letters.size() == 5);
  CHECK(std::count_if(partial.letters.begin(), partial.letters.end(),
                      [](const std::optional<char>& l) { return !l.has_value(); }) == 1);
}

TEST_CASE("synth config invariants are enforced") {
  SynthConfig bad;
  bad.consistency_tau = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  SynthConfig bad2;
  bad2.consistency_rollouts = 1;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
  SynthConfig bad3;
  bad3.compose_k_max = 6;
  CHECK_THROWS_AS(bad3.validate(), std::invalid_argument);
  CHECK_NOTHROW(SynthConfig{}.validate());
}
