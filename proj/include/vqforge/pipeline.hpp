#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vqforge/analytics.hpp"
#include "vqforge/config.hpp"
#include "vqforge/corpus.hpp"
#include "vqforge/dedup.hpp"
#include "vqforge/exporter.hpp"
#include "vqforge/gateway.hpp"
#include "vqforge/manifest.hpp"
#include "vqforge/mcq.hpp"
#include "vqforge/prompts.hpp"
#include "vqforge/synth.hpp"
#include "vqforge/traces.hpp"

namespace vqforge {

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageResult {
  std::string stage;
  std::size_t units_total = 0;      // workload size after stage_limit
  std::size_t units_processed = 0;  // committed by this run
  std::size_t appended = 0;         // manifest records written by this run
  std::size_t errors = 0;           // recoverable: deferred units, malformed corpus lines
  bool aborted = false;             // abort_after_units fired
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"ingest", "stage1", "dedup", "stage2",
                                              "traces", "pairs",  "export", "analyze"};
  return names;
}

// ---------------------------------------------------------------------------
// Replayed state
// ---------------------------------------------------------------------------

struct DedupEmbedding {
  std::vector<double> q_vec;
  std::vector<double> a_vec;
  std::set<std::string> tags;
};

// Everything the stages need, reconstructed from the manifest log. Replay is
// keyed by (kind, item_id): a rerun of an interrupted unit rewrites identical
// records, so last-wins keeps the state convergent.
struct PipelineState {
  std::map<std::string, CorpusEntry> images;  // kept annotations only
  std::set<std::string> ingest_errors;        // "line:<n>"
  std::map<std::string, nlohmann::json> stage1_units;
  std::map<std::string, McqItem> candidates;
  std::map<std::string, nlohmann::json> verifies;
  std::map<std::string, DedupEmbedding> embeddings;
  std::map<std::string, nlohmann::json> dedup_decisions;
  std::map<std::string, nlohmann::json> stage2_units;
  std::map<std::string, nlohmann::json> consistency;
  std::map<std::string, ReasoningTrace> traces;
  std::map<std::string, nlohmann::json> trace_drops;
  std::set<std::string> traces_units;
  std::map<std::string, PreferencePair> pairs;
  std::set<std::string> pairs_units;
  std::map<std::string, nlohmann::json> export_files;
  std::map<std::string, nlohmann::json> complexity;
  std::map<std::string, nlohmann::json> behaviors;
  std::optional<nlohmann::json> analytics_summary;
  std::map<std::string, nlohmann::json> capabilities;
  std::map<std::string, nlohmann::json> budgets;
  std::string first_fingerprint;
  std::size_t record_count = 0;

  void apply(const ManifestRecord& rec) {
    ++record_count;
    if (first_fingerprint.empty()) first_fingerprint = rec.fp;
    const auto& p = rec.payload;
    if (rec.kind == "ingest_image") {
      CorpusEntry e;
      e.record = p.at("record").get<ImageRecord>();
      e.annotations = p.at("annotations").get<std::vector<ObjectAnnotation>>();
      images[rec.item_id] = std::move(e);
    } else if (rec.kind == "ingest_error") {
      ingest_errors.insert(rec.item_id);
    } else if (rec.kind == "stage1_unit") {
      stage1_units[rec.item_id] = p;
    } else if (rec.kind == "mcq_candidate") {
      candidates[rec.item_id] = p.get<McqItem>();
    } else if (rec.kind == "mcq_verify") {
      verifies[rec.item_id] = p;
    } else if (rec.kind == "dedup_embed") {
      DedupEmbedding e;
      e.q_vec = p.at("q_vec").get<std::vector<double>>();
      e.a_vec = p.at("a_vec").get<std::vector<double>>();
      for (const auto& t : p.at("tags")) e.tags.insert(t.get<std::string>());
      embeddings[rec.item_id] = std::move(e);
    } else if (rec.kind == "dedup_decision") {
      dedup_decisions[rec.item_id] = p;
    } else if (rec.kind == "stage2_unit") {
      stage2_units[rec.item_id] = p;
    } else if (rec.kind == "consistency") {
      consistency[rec.item_id] = p;
    } else if (rec.kind == "trace") {
      traces[rec.item_id] = p.get<ReasoningTrace>();
    } else if (rec.kind == "trace_drop") {
      trace_drops[rec.item_id] = p;
    } else if (rec.kind == "traces_unit") {
      traces_units.insert(rec.item_id);
    } else if (rec.kind == "pair") {
      PreferencePair pair;
      pair.pair_id = rec.item_id;
      pair.item_id = p.at("item_id").get<std::string>();
      pair.stage = p.at("stage").get<std::string>() == "stage2" ? McqStage::stage2
                                                                : McqStage::stage1;
      pair.prompt = p.at("prompt").get<std::string>();
      pair.image_uri = p.at("image_uri").get<std::string>();
      pair.pair_kind = p.at("pair_kind").get<std::string>();
      pair.chosen = {p.at("chosen").at("thought").get<std::string>(),
                     p.at("chosen").at("letter").get<std::string>().at(0),
                     p.at("chosen").at("answer_text").get<std::string>()};
      pair.rejected = {p.at("rejected").at("thought").get<std::string>(),
                       p.at("rejected").at("letter").get<std::string>().at(0),
                       p.at("rejected").at("answer_text").get<std::string>()};
      pairs[rec.item_id] = std::move(pair);
    } else if (rec.kind == "pairs_unit") {
      pairs_units.insert(rec.item_id);
    } else if (rec.kind == "export_file") {
      export_files[rec.item_id] = p;
    } else if (rec.kind == "complexity") {
      complexity[rec.item_id] = p;
    } else if (rec.kind == "behavior") {
      behaviors[rec.item_id] = p;
    } else if (rec.kind == "analytics_summary") {
      analytics_summary = p;
    } else if (rec.kind == "capability") {
      capabilities[rec.item_id] = p;
    } else if (rec.kind == "budget") {
      budgets[rec.item_id] = p;
    }
    // "defer" records are observability only; they never gate replay.
  }
};

inline nlohmann::json pair_payload(const PreferencePair& p) {
  return {{"item_id", p.item_id},
          {"stage", to_string(p.stage)},
          {"prompt", p.prompt},
          {"image_uri", p.image_uri},
          {"pair_kind", p.pair_kind},
          {"chosen",
           {{"thought", p.chosen.thought},
            {"letter", std::string(1, p.chosen.letter)},
            {"answer_text", p.chosen.answer_text}}},
          {"rejected",
           {{"thought", p.rejected.thought},
            {"letter", std::string(1, p.rejected.letter)},
            {"answer_text", p.rejected.answer_text}}}};
}

namespace detail {

/// Runs `work` over units on a small pool, committing results strictly in
/// unit order so the manifest layout is independent of thread scheduling.
template <typename Unit, typename Result>
struct OrderedRunner {
  using WorkFn = std::function<Result(const Unit&)>;
  using CommitFn = std::function<void(const Unit&, Result&)>;

  // Returns the number of committed units.
  static std::size_t run(const std::vector<Unit>& units, int workers, WorkFn work,
                         CommitFn commit, int abort_after, bool& aborted) {
    const std::size_t n = units.size();
    if (n == 0) return 0;
    std::vector<std::optional<Result>> results(n);
    std::vector<std::exception_ptr> errors(n);
    std::mutex mu;
    std::condition_variable cv;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> stop{false};
    const int pool = std::max(1, std::min<int>(workers, static_cast<int>(n)));

    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(pool));
    for (int t = 0; t < pool; ++t) {
      threads.emplace_back([&] {
        while (!stop.load()) {
          const std::size_t i = next.fetch_add(1);
          if (i >= n) break;
          std::optional<Result> r;
          std::exception_ptr err;
          try {
            r = work(units[i]);
          } catch (...) {
            err = std::current_exception();
          }
          {
            std::lock_guard<std::mutex> lk(mu);
            results[i] = std::move(r);
            errors[i] = err;
          }
          cv.notify_all();
        }
      });
    }

    std::size_t committed = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::unique_lock<std::mutex> lk(mu);
      cv.wait(lk, [&] { return results[i].has_value() || errors[i] != nullptr; });
      if (errors[i]) {
        stop = true;
        lk.unlock();
        for (auto& th : threads) th.join();
        std::rethrow_exception(errors[i]);
      }
      Result r = std::move(*results[i]);
      lk.unlock();
      commit(units[i], r);
      ++committed;
      if (abort_after > 0 && committed >= static_cast<std::size_t>(abort_after)) {
        aborted = true;
        break;
      }
    }
    stop = true;
    cv.notify_all();
    for (auto& th : threads) th.join();
    return committed;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg)
      : cfg_(std::move(cfg)), store_(cfg_.template_dir) {
    cfg_.validate();
    fp_ = cfg_.fingerprint();
    std::vector<ModelRole> roles;
    for (const auto& [name, role] : cfg_.roles) roles.push_back(role);
    gateway_ = std::make_unique<ModelGateway>(roles);

    const auto loaded = load_manifest(cfg_.resolved_manifest_path());
    for (const auto& rec : loaded.records) {
      if (rec.fp != fp_)
        throw StageError("manifest was written with a different config (fingerprint " +
                         rec.fp + " vs " + fp_ + "); refusing to mix runs");
      state_.apply(rec);
    }
    writer_ = std::make_unique<ManifestWriter>(
        cfg_.resolved_manifest_path(), fp_, cfg_.logical_clock, state_.record_count,
        loaded.clean_bytes, loaded.torn_tail_discarded);
  }

  const PipelineState& state() const { return state_; }
  const PipelineConfig& config() const { return cfg_; }
  ModelGateway& gateway() { return *gateway_; }

  StageResult run_stage(const std::string& stage) {
    check_prerequisite(stage);
    const std::int64_t before = writer_->appended();
    StageResult result;
    if (stage == "ingest") result = run_ingest();
    else if (stage == "stage1") result = run_stage1();
    else if (stage == "dedup") result = run_dedup();
    else if (stage == "stage2") result = run_stage2();
    else if (stage == "traces") result = run_traces();
    else if (stage == "pairs") result = run_pairs();
    else if (stage == "export") result = run_export();
    else if (stage == "analyze") result = run_analyze();
    else throw StageError("unknown stage: " + stage);
    result.stage = stage;
    result.appended = static_cast<std::size_t>(writer_->appended() - before);
    return result;
  }

  /// Runs every stage in order, completing whatever is pending.
  std::vector<StageResult> resume() {
    std::vector<StageResult> results;
    for (const auto& stage : stage_names()) {
      results.push_back(run_stage(stage));
      if (results.back().aborted) break;
    }
    return results;
  }

  bool stage_complete(const std::string& stage) {
    if (stage.empty()) return true;
    if (stage == "ingest") {
      auto [pending_images, error_lines] = ingest_pending();
      return pending_images.empty();
    }
    if (!stage_complete(prerequisite(stage))) return false;
    if (stage == "stage1") return stage1_pending().empty();
    if (stage == "dedup") {
      auto [embed_pending, screen_pending] = dedup_pending();
      return embed_pending.empty() && screen_pending.empty();
    }
    if (stage == "stage2") return stage2_pending().empty();
    if (stage == "traces") return traces_pending().empty();
    if (stage == "pairs") return pairs_pending().empty();
    if (stage == "export") return export_pending().empty();
    if (stage == "analyze") return analyze_is_complete();
    throw StageError("unknown stage: " + stage);
  }

  /// Terminally accepted item ids across both stages, sorted.
  std::vector<std::string> accepted_items() const { return accepted_for_traces(); }

  /// Stats report over the replayed manifest: stage funnel, drop-reason
  /// histogram, medians, budgets, behavior presence.
  nlohmann::json summarize() const { return build_summary(); }

 private:
  static std::string prerequisite(const std::string& stage) {
    if (stage == "ingest") return "";
    if (stage == "stage1") return "ingest";
    if (stage == "dedup") return "stage1";
    if (stage == "stage2") return "dedup";
    if (stage == "traces") return "stage2";
    if (stage == "pairs") return "traces";
    if (stage == "export") return "pairs";
    if (stage == "analyze") return "traces";
    throw StageError("unknown stage: " + stage);
  }

  void check_prerequisite(const std::string& stage) {
    const std::string pre = prerequisite(stage);
    if (!pre.empty() && !stage_complete(pre))
      throw StageError("stage `" + stage + "` requires completed `" + pre + "` first");
  }

  std::uint64_t seed_for(const std::string& purpose, const std::string& id) const {
    return mix_hash(cfg_.seed, fnv1a64(purpose + "|" + id));
  }

  template <typename T>
  std::vector<T> limited(std::vector<T> v) const {
    if (cfg_.stage_limit > 0 && v.size() > static_cast<std::size_t>(cfg_.stage_limit))
      v.resize(static_cast<std::size_t>(cfg_.stage_limit));
    return v;
  }

  void append(const std::string& kind, const std::string& item_id, const std::string& stage,
              nlohmann::json payload) {
    const ManifestRecord rec = writer_->append(kind, item_id, stage, std::move(payload));
    state_.apply(rec);
  }

  void append_budget_delta(const std::string& stage,
                           const std::map<std::string, RoleBudget>& before) {
    const auto after = gateway_->budgets();
    for (const auto& [role, b] : after) {
      const auto& a = before.count(role) ? before.at(role) : RoleBudget{};
      const RoleBudget delta{b.requests - a.requests, b.attempts - a.attempts,
                             b.prompt_tokens - a.prompt_tokens,
                             b.completion_tokens - a.completion_tokens};
      if (delta.requests == 0 && delta.attempts == 0) continue;
      append("budget", stage + ":" + role, stage,
             {{"role", role},
              {"requests", delta.requests},
              {"attempts", delta.attempts},
              {"prompt_tokens", delta.prompt_tokens},
              {"completion_tokens", delta.completion_tokens}});
    }
  }

  // --- ingest --------------------------------------------------------------

  std::pair<std::vector<CorpusEntry>, std::vector<CorpusError>> ingest_pending() {
    const CorpusLoadResult corpus = load_corpus(cfg_.corpus_path);
    std::vector<CorpusEntry> pending;
    std::vector<CorpusEntry> all = corpus.batch.records;
    all = limited(std::move(all));
    for (const auto& e : all)
      if (!state_.images.count(e.record.image_id)) pending.push_back(e);
    return {std::move(pending), corpus.errors};
  }

  StageResult run_ingest() {
    StageResult result;
    auto [pending, errors] = ingest_pending();
    result.errors = errors.size();
    for (const auto& err : errors) {
      const std::string key = "line:" + std::to_string(err.line_no);
      if (state_.ingest_errors.count(key)) continue;
      append("ingest_error", key, "ingest", {{"message", err.message}});
    }
    result.units_total = pending.size();
    for (const auto& entry : pending) {
      const auto kept = filter_annotations(entry.annotations, cfg_.corpus_filter.confidence_cutoff,
                                           cfg_.corpus_filter.per_label_cap);
      append("ingest_image", entry.record.image_id, "ingest",
             {{"record", entry.record},
              {"annotations", kept},
              {"annotations_total", entry.annotations.size()}});
      ++result.units_processed;
      if (cfg_.abort_after_units > 0 &&
          result.units_processed >= static_cast<std::size_t>(cfg_.abort_after_units)) {
        result.aborted = true;
        break;
      }
    }
    return result;
  }

  // --- stage1 ---------------------------------------------------------------

  struct Stage1Unit {
    std::string unit_id;
    std::string image_id;
    std::size_t ann_idx = 0;
  };

  std::vector<Stage1Unit> stage1_workload() const {
    std::vector<Stage1Unit> units;
    for (const auto& [image_id, entry] : state_.images) {
      for (std::size_t i = 0; i < entry.annotations.size(); ++i) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "o%02zu", i);
        units.push_back({image_id + "/" + buf, image_id, i});
      }
    }
    return limited(std::move(units));
  }

  std::vector<Stage1Unit> stage1_pending() const {
    std::vector<Stage1Unit> pending;
    for (auto& u : stage1_workload())
      if (!state_.stage1_units.count(u.unit_id)) pending.push_back(u);
    return pending;
  }

  struct Stage1WorkResult {
    bool deferred = false;
    std::string defer_reason;
    Stage1UnitResult gen;
    std::vector<std::pair<std::string, VerifyOutcome>> verifies;  // item_id -> outcome
  };

  StageResult run_stage1() {
    StageResult result;
    const auto budget_before = gateway_->budgets();
    const auto pending = stage1_pending();
    result.units_total = stage1_workload().size();

    auto work = [&](const Stage1Unit& u) -> Stage1WorkResult {
      Stage1WorkResult r;
      const CorpusEntry& entry = state_.images.at(u.image_id);
      const ObjectAnnotation& ann = entry.annotations.at(u.ann_idx);
      try {
        r.gen = generate_stage1(*gateway_, store_, entry.record, ann, cfg_.synth, u.unit_id,
                                seed_for("stage1", u.unit_id));
        if (cfg_.synth.verifier_enabled) {
          for (const auto& item : r.gen.candidates) {
            r.verifies.emplace_back(
                item.item_id, verify_mcq_llm(*gateway_, store_, item, entry.record.caption,
                                             seed_for("mcq_verify", item.item_id)));
          }
        }
      } catch (const GatewayError& e) {
        r.deferred = true;
        r.defer_reason = e.what();
      }
      return r;
    };

    auto commit = [&](const Stage1Unit& u, Stage1WorkResult& r) {
      if (r.deferred) {
        append("defer", u.unit_id, "stage1", {{"reason", r.defer_reason}});
        ++result.errors;
        return;
      }
      std::vector<std::string> candidate_ids, dropped_ids;
      for (const auto& item : r.gen.candidates) {
        append("mcq_candidate", item.item_id, "stage1", item);
        candidate_ids.push_back(item.item_id);
      }
      for (const auto& d : r.gen.dropped) {
        append("mcq_candidate", d.item.item_id, "stage1", d.item);
        dropped_ids.push_back(d.item.item_id);
      }
      for (const auto& [item_id, outcome] : r.verifies) {
        append("mcq_verify", item_id, "stage1",
               {{"pass", outcome.pass}, {"reason", outcome.reason}});
      }
      nlohmann::json unit_payload{{"candidates", candidate_ids},
                                  {"dropped", dropped_ids},
                                  {"generation_calls", r.gen.generation_calls}};
      if (r.gen.batch_error)
        unit_payload["batch_error"] = {{"code", r.gen.batch_error->code},
                                       {"message", r.gen.batch_error->message}};
      append("stage1_unit", u.unit_id, "stage1", unit_payload);
    };

    result.units_processed = detail::OrderedRunner<Stage1Unit, Stage1WorkResult>::run(
        pending, cfg_.workers, work, commit, cfg_.abort_after_units, result.aborted);
    append_budget_delta("stage1", budget_before);
    return result;
  }

  // --- dedup -----------------------------------------------------------------

  std::vector<std::string> dedup_eligible() const {
    std::vector<std::string> out;
    for (const auto& [id, item] : state_.candidates) {
      if (item.stage != McqStage::stage1 || item.status == McqStatus::rejected) continue;
      if (cfg_.synth.verifier_enabled) {
        auto v = state_.verifies.find(id);
        if (v == state_.verifies.end() || !v->second.value("pass", false)) continue;
      }
      out.push_back(id);
    }
    return limited(std::move(out));  // already sorted: map iteration order
  }

  std::pair<std::vector<std::string>, std::vector<std::string>> dedup_pending() const {
    std::vector<std::string> embed_pending, screen_pending;
    for (const auto& id : dedup_eligible()) {
      if (!state_.embeddings.count(id)) embed_pending.push_back(id);
      if (!state_.dedup_decisions.count(id)) screen_pending.push_back(id);
    }
    return {std::move(embed_pending), std::move(screen_pending)};
  }

  StageResult run_dedup() {
    StageResult result;
    const auto budget_before = gateway_->budgets();
    auto [embed_pending, screen_pending] = dedup_pending();
    result.units_total = dedup_eligible().size();

    // Phase A: embeddings, batched.
    constexpr std::size_t kBatch = 64;
    for (std::size_t begin = 0; begin < embed_pending.size(); begin += kBatch) {
      const std::size_t end = std::min(embed_pending.size(), begin + kBatch);
      std::vector<std::string> q_texts, a_texts;
      for (std::size_t i = begin; i < end; ++i) {
        const McqItem& item = state_.candidates.at(embed_pending[i]);
        q_texts.push_back(normalize_text(item.question));
        a_texts.push_back(normalize_text(item.answer.answer_text));
      }
      std::vector<std::vector<double>> q_vecs, a_vecs;
      try {
        q_vecs = gateway_->embed("embedder", q_texts);
        a_vecs = gateway_->embed("embedder", a_texts);
      } catch (const GatewayError& e) {
        append("defer", "embed_batch:" + std::to_string(begin), "dedup",
               {{"reason", e.what()}});
        ++result.errors;
        continue;
      }
      for (std::size_t i = begin; i < end; ++i) {
        const McqItem& item = state_.candidates.at(embed_pending[i]);
        std::set<std::string> tags{normalize_text(item.question_type)};
        if (item.source_annotation) tags.insert(normalize_text(item.source_annotation->label));
        append("dedup_embed", embed_pending[i], "dedup",
               {{"q_vec", q_vecs[i - begin]}, {"a_vec", a_vecs[i - begin]}, {"tags", tags}});
      }
    }

    // Phase B: serialized screening in item order against the accepted index.
    Screener screener(cfg_.dedup);
    for (const auto& [id, decision] : state_.dedup_decisions) {
      if (decision.value("decision", "") != "accepted") continue;
      auto e = state_.embeddings.find(id);
      if (e == state_.embeddings.end()) continue;
      screener.preload({id, e->second.q_vec, e->second.a_vec, e->second.tags});
    }
    std::size_t committed = 0;
    for (const auto& id : screen_pending) {
      auto e = state_.embeddings.find(id);
      if (e == state_.embeddings.end()) {
        ++result.errors;  // embedding deferred above; decision stays pending
        continue;
      }
      const ScreenDecision d =
          screener.screen({id, e->second.q_vec, e->second.a_vec, e->second.tags});
      nlohmann::json payload{{"decision", d.accepted ? "accepted" : "rejected"},
                             {"tau_dup", cfg_.dedup.tau_dup},
                             {"weights",
                              {{"lambda_s", cfg_.dedup.weights.lambda_s},
                               {"lambda_a", cfg_.dedup.weights.lambda_a},
                               {"lambda_c", cfg_.dedup.weights.lambda_c}}}};
      if (!d.nearest_id.empty()) {
        payload["nearest_id"] = d.nearest_id;
        payload["score"] = d.score;
      }
      append("dedup_decision", id, "dedup", payload);
      ++committed;
      ++result.units_processed;
      if (cfg_.abort_after_units > 0 && committed >= static_cast<std::size_t>(cfg_.abort_after_units)) {
        result.aborted = true;
        break;
      }
    }
    append_budget_delta("dedup", budget_before);
    return result;
  }

  // --- stage2 ----------------------------------------------------------------

  struct Stage2Unit {
    std::string unit_id;
    std::string image_id;
    int comp_idx = 0;
  };

  std::vector<Stage2Unit> stage2_workload() const {
    std::vector<Stage2Unit> units;
    for (const auto& [image_id, entry] : state_.images) {
      for (int c = 0; c < cfg_.synth.compositions_per_image; ++c) {
        units.push_back({image_id + "/c" + std::to_string(c), image_id, c});
      }
    }
    return limited(std::move(units));
  }

  std::vector<Stage2Unit> stage2_pending() const {
    std::vector<Stage2Unit> pending;
    for (auto& u : stage2_workload())
      if (!state_.stage2_units.count(u.unit_id)) pending.push_back(u);
    return pending;
  }

  std::vector<McqItem> stage1_accepted_pool(const std::string& image_id) const {
    std::vector<McqItem> pool;
    for (const auto& [id, item] : state_.candidates) {
      if (item.stage != McqStage::stage1 || item.image_id != image_id) continue;
      if (item.status == McqStatus::rejected) continue;
      if (cfg_.synth.verifier_enabled) {
        auto v = state_.verifies.find(id);
        if (v == state_.verifies.end() || !v->second.value("pass", false)) continue;
      }
      auto d = state_.dedup_decisions.find(id);
      if (d == state_.dedup_decisions.end() || d->second.value("decision", "") != "accepted")
        continue;
      pool.push_back(item);
    }
    return pool;  // map order keeps this sorted by item_id
  }

  struct Stage2WorkResult {
    bool deferred = false;
    std::string defer_reason;
    ComposeResult compose;
    std::optional<ConsistencyResult> consistency;
  };

  StageResult run_stage2() {
    StageResult result;
    const auto budget_before = gateway_->budgets();
    const auto pending = stage2_pending();
    result.units_total = stage2_workload().size();

    // Snapshot pools up front: the commit path inserts composed items into
    // state_.candidates, which workers must not be reading concurrently.
    std::map<std::string, std::vector<McqItem>> pools;
    for (const auto& u : pending)
      if (!pools.count(u.image_id)) pools[u.image_id] = stage1_accepted_pool(u.image_id);

    auto work = [&](const Stage2Unit& u) -> Stage2WorkResult {
      Stage2WorkResult r;
      const CorpusEntry& entry = state_.images.at(u.image_id);
      const auto& pool = pools.at(u.image_id);
      try {
        r.compose = compose_stage2(*gateway_, store_, entry.record, pool, cfg_.synth, u.comp_idx,
                                   seed_for("stage2", u.unit_id));
        if (!r.compose.skipped) {
          r.consistency =
              consistency_filter(*gateway_, store_, r.compose.item, entry.record.caption,
                                 cfg_.synth, seed_for("consistency", r.compose.item.item_id));
        }
      } catch (const GatewayError& e) {
        r.deferred = true;
        r.defer_reason = e.what();
      }
      return r;
    };

    auto commit = [&](const Stage2Unit& u, Stage2WorkResult& r) {
      if (r.deferred) {
        append("defer", u.unit_id, "stage2", {{"reason", r.defer_reason}});
        ++result.errors;
        return;
      }
      nlohmann::json unit_payload{{"k", r.compose.k}};
      if (r.compose.skipped) {
        unit_payload["skip_reason"] = r.compose.skip_reason;
      } else {
        append("mcq_candidate", r.compose.item.item_id, "stage2", r.compose.item);
        std::string letters;
        for (const auto& l : r.consistency->letters) letters += l ? *l : '-';
        append("consistency", r.compose.item.item_id, "stage2",
               {{"letters", letters},
                {"matches", r.consistency->matches},
                {"consistency", r.consistency->consistency},
                {"retained", r.consistency->retained}});
        unit_payload["item_id"] = r.compose.item.item_id;
      }
      append("stage2_unit", u.unit_id, "stage2", unit_payload);
    };

    result.units_processed = detail::OrderedRunner<Stage2Unit, Stage2WorkResult>::run(
        pending, cfg_.workers, work, commit, cfg_.abort_after_units, result.aborted);
    append_budget_delta("stage2", budget_before);
    return result;
  }

  // --- traces ----------------------------------------------------------------

  std::vector<std::string> traces_pending() const {
    std::vector<std::string> pending;
    for (const auto& id : accepted_for_traces())
      if (!state_.traces_units.count(id)) pending.push_back(id);
    return pending;
  }

  std::vector<std::string> accepted_for_traces() const {
    std::vector<std::string> out;
    for (const auto& [id, item] : state_.candidates) {
      if (item.status == McqStatus::rejected) continue;
      if (item.stage == McqStage::stage1) {
        if (cfg_.synth.verifier_enabled) {
          auto v = state_.verifies.find(id);
          if (v == state_.verifies.end() || !v->second.value("pass", false)) continue;
        }
        auto d = state_.dedup_decisions.find(id);
        if (d == state_.dedup_decisions.end() || d->second.value("decision", "") != "accepted")
          continue;
      } else {
        auto c = state_.consistency.find(id);
        if (c == state_.consistency.end() || !c->second.value("retained", false)) continue;
      }
      out.push_back(id);
    }
    return limited(std::move(out));
  }

  struct TraceWorkResult {
    bool deferred = false;
    std::string defer_reason;
    std::vector<ReasoningTrace> traces;
    std::vector<std::pair<std::string, std::string>> drops;  // trace_id -> reason
  };

  StageResult run_traces() {
    StageResult result;
    const auto budget_before = gateway_->budgets();

    if (!state_.capabilities.count("reasoner")) {
      const bool ok = gateway_->probe_prefix_continuation("reasoner");
      append("capability", "reasoner", "traces", {{"prefix_continuation", ok}});
      if (!ok)
        throw StageError("reasoner endpoint does not support prefix continuation; "
                         "thought expansion cannot run");
    }

    std::vector<std::regex> banned;
    for (const auto& p : cfg_.roles.at("reasoner").banned_patterns)
      banned.emplace_back(p, std::regex::icase);

    const auto pending = traces_pending();
    result.units_total = accepted_for_traces().size();

    auto work = [&](const std::string& item_id) -> TraceWorkResult {
      TraceWorkResult r;
      const McqItem& item = state_.candidates.at(item_id);
      const CorpusEntry& entry = state_.images.at(item.image_id);
      try {
        for (int rollout = 0; rollout < cfg_.synth.vlm_rollouts; ++rollout) {
          const std::string trace_id = item_id + "/t" + std::to_string(rollout);
          DistillResult d = distill_simple_cot(*gateway_, store_, item, entry.record.image_uri,
                                               rollout, seed_for("distill", trace_id));
          if (!d.ok) {
            r.drops.emplace_back(trace_id, d.drop_reason);
            continue;
          }
          expand_thought(*gateway_, item, entry.record.caption, d.trace, cfg_.synth,
                         seed_for("expand", trace_id));
          verify_trace(*gateway_, store_, item, d.trace, seed_for("trace_verify", trace_id));
          classify_trace(d.trace, banned);
          r.traces.push_back(std::move(d.trace));
        }
      } catch (const GatewayError& e) {
        r.deferred = true;
        r.defer_reason = e.what();
      }
      return r;
    };

    auto commit = [&](const std::string& item_id, TraceWorkResult& r) {
      if (r.deferred) {
        append("defer", item_id, "traces", {{"reason", r.defer_reason}});
        ++result.errors;
        return;
      }
      for (const auto& t : r.traces) append("trace", t.trace_id, "traces", t);
      for (const auto& [trace_id, reason] : r.drops)
        append("trace_drop", trace_id, "traces", {{"reason", reason}});
      append("traces_unit", item_id, "traces",
             {{"traces", r.traces.size()}, {"drops", r.drops.size()}});
    };

    result.units_processed = detail::OrderedRunner<std::string, TraceWorkResult>::run(
        pending, cfg_.workers, work, commit, cfg_.abort_after_units, result.aborted);
    append_budget_delta("traces", budget_before);
    return result;
  }

  // --- pairs -----------------------------------------------------------------

  std::vector<std::string> pairs_pending() const {
    std::vector<std::string> pending;
    for (const auto& id : accepted_for_traces())
      if (!state_.pairs_units.count(id)) pending.push_back(id);
    return pending;
  }

  StageResult run_pairs() {
    StageResult result;
    const auto pending = pairs_pending();
    result.units_total = accepted_for_traces().size();
    std::size_t committed = 0;
    for (const auto& item_id : pending) {
      const McqItem& item = state_.candidates.at(item_id);
      const CorpusEntry& entry = state_.images.at(item.image_id);
      std::vector<ReasoningTrace> traces;
      for (const auto& [tid, t] : state_.traces)
        if (t.item_id == item_id) traces.push_back(t);
      const std::string prompt =
          render_solve_prompt(store_, item.question, item.choices, "").user;
      const auto pairs = build_preference_pairs(item, traces, prompt, entry.record.image_uri,
                                                cfg_.exports.pair_cap_per_kind);
      for (const auto& p : pairs) append("pair", p.pair_id, "pairs", pair_payload(p));
      append("pairs_unit", item_id, "pairs", {{"pairs", pairs.size()}});
      ++result.units_processed;
      ++committed;
      if (cfg_.abort_after_units > 0 && committed >= static_cast<std::size_t>(cfg_.abort_after_units)) {
        result.aborted = true;
        break;
      }
    }
    return result;
  }

  // --- export ------------------------------------------------------------------

  struct ExportFile {
    std::string name;
    std::vector<nlohmann::json> records;
  };

  std::vector<ExportFile> build_exports() const {
    std::vector<ExportFile> files(6);
    files[0].name = "sft.stage1.jsonl";
    files[1].name = "sft.stage2.jsonl";
    files[2].name = "dpo.stage1.jsonl";
    files[3].name = "dpo.stage2.jsonl";
    files[4].name = "rl.stage1.jsonl";
    files[5].name = "rl.stage2.jsonl";

    for (const auto& item_id : accepted_for_traces()) {
      const McqItem& item = state_.candidates.at(item_id);
      const CorpusEntry& entry = state_.images.at(item.image_id);
      const std::string prompt =
          render_solve_prompt(store_, item.question, item.choices, "").user;
      const std::size_t sft_slot = item.stage == McqStage::stage1 ? 0 : 1;
      for (const auto& [tid, t] : state_.traces) {
        if (t.item_id != item_id || t.outcome != TraceOutcome::sft_ready) continue;
        files[sft_slot].records.push_back(
            sft_record(make_sft_example(item, t, prompt, entry.record.image_uri)));
      }
      files[item.stage == McqStage::stage1 ? 4 : 5].records.push_back(
          rl_record(make_rl_prompt(item, prompt, entry.record.image_uri)));
    }
    for (const auto& [pid, pair] : state_.pairs) {
      files[pair.stage == McqStage::stage1 ? 2 : 3].records.push_back(dpo_record(pair));
    }
    return files;
  }

  static std::string serialize_records(const std::vector<nlohmann::json>& records) {
    std::string out;
    for (const auto& r : records) out += r.dump() + "\n";
    return out;
  }

  std::vector<std::string> export_pending() const {
    std::vector<std::string> pending;
    for (const auto& f : build_exports()) {
      const std::string content = serialize_records(f.records);
      const std::string want = to_hex(fnv1a64(content));
      const std::filesystem::path path =
          std::filesystem::path(cfg_.out_dir) / "export" / f.name;
      auto rec = state_.export_files.find(f.name);
      const bool recorded = rec != state_.export_files.end() &&
                            rec->second.value("fnv", "") == want;
      const bool on_disk = std::filesystem::exists(path) &&
                           to_hex(file_fingerprint(path)) == want;
      if (!recorded || !on_disk) pending.push_back(f.name);
    }
    return pending;
  }

  StageResult run_export() {
    StageResult result;
    const auto files = build_exports();
    const auto pending = export_pending();
    result.units_total = files.size();
    for (const auto& f : files) {
      if (std::find(pending.begin(), pending.end(), f.name) == pending.end()) continue;
      // Schema self-check before anything hits disk.
      for (const auto& r : f.records) {
        std::vector<std::string> problems;
        if (f.name.rfind("sft.", 0) == 0) problems = validate_sft_record(r);
        else if (f.name.rfind("dpo.", 0) == 0) problems = validate_dpo_record(r);
        else problems = validate_rl_record(r);
        if (!problems.empty())
          throw StageError("export record failed schema check (" + f.name +
                           "): " + join(problems, "; "));
      }
      const std::string content = serialize_records(f.records);
      const std::filesystem::path path =
          std::filesystem::path(cfg_.out_dir) / "export" / f.name;
      std::filesystem::create_directories(path.parent_path());
      const std::filesystem::path tmp = path.string() + ".tmp";
      {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << content;
      }
      std::filesystem::rename(tmp, path);
      append("export_file", f.name, "export",
             {{"count", f.records.size()}, {"fnv", to_hex(fnv1a64(content))}});
      ++result.units_processed;
    }
    return result;
  }

  // --- analyze -----------------------------------------------------------------

  std::vector<std::string> behavior_sample_ids() const {
    std::vector<std::string> ids;
    for (const auto& [tid, t] : state_.traces)
      if (t.outcome == TraceOutcome::sft_ready) ids.push_back(tid);
    if (ids.size() > static_cast<std::size_t>(cfg_.analytics.behavior_sample))
      ids.resize(static_cast<std::size_t>(cfg_.analytics.behavior_sample));
    return ids;
  }

  bool analyze_is_complete() const {
    for (const auto& id : accepted_for_traces())
      if (!state_.complexity.count(id)) return false;
    for (const auto& id : behavior_sample_ids())
      if (!state_.behaviors.count(id)) return false;
    return state_.analytics_summary.has_value();
  }

  StageResult run_analyze() {
    StageResult result;
    const auto budget_before = gateway_->budgets();

    std::vector<std::string> cplx_pending;
    for (const auto& id : accepted_for_traces())
      if (!state_.complexity.count(id)) cplx_pending.push_back(id);
    result.units_total = accepted_for_traces().size();

    auto work = [&](const std::string& item_id) -> std::optional<ComplexityEstimate> {
      const McqItem& item = state_.candidates.at(item_id);
      const CorpusEntry& entry = state_.images.at(item.image_id);
      try {
        return estimate_complexity(*gateway_, store_, item, entry.record.image_uri,
                                   cfg_.analytics.policy_role,
                                   cfg_.analytics.complexity_rollouts,
                                   seed_for("complexity", item_id));
      } catch (const GatewayError&) {
        return std::nullopt;
      }
    };
    auto commit = [&](const std::string& item_id, std::optional<ComplexityEstimate>& est) {
      if (!est) {
        append("defer", item_id, "analyze", {{"reason", "gateway failure"}});
        ++result.errors;
        return;
      }
      append("complexity", item_id, "analyze", *est);
      ++result.units_processed;
    };
    detail::OrderedRunner<std::string, std::optional<ComplexityEstimate>>::run(
        cplx_pending, cfg_.workers, work, commit, cfg_.abort_after_units, result.aborted);
    if (result.aborted) {
      append_budget_delta("analyze", budget_before);
      return result;
    }

    for (const auto& tid : behavior_sample_ids()) {
      if (state_.behaviors.count(tid)) continue;
      const ReasoningTrace& t = state_.traces.at(tid);
      const BehaviorResult br = count_cognitive_behaviors(
          *gateway_, store_, sft_thought(t), cfg_.analytics.cues, seed_for("behavior", tid));
      append("behavior", tid, "analyze",
             {{"counts", br.counts}, {"estimator", br.estimator}});
    }

    // Budgets land before the summary so the stored summary reflects them
    // and an idle rerun recomputes the same bytes.
    append_budget_delta("analyze", budget_before);
    const nlohmann::json summary = build_summary();
    if (!state_.analytics_summary || *state_.analytics_summary != summary) {
      write_analysis_files(summary);
      append("analytics_summary", "summary", "analyze", summary);
    }
    return result;
  }

  nlohmann::json build_summary() const {
    std::map<std::string, std::size_t> drop_reasons;
    std::size_t candidates_ok = 0, candidates_rejected = 0;
    for (const auto& [id, item] : state_.candidates) {
      if (item.status == McqStatus::rejected) {
        ++candidates_rejected;
        ++drop_reasons["stage1_validation:" + item.status_reason];
      } else {
        ++candidates_ok;
      }
    }
    std::size_t verify_pass = 0, verify_fail = 0;
    for (const auto& [id, v] : state_.verifies)
      v.value("pass", false) ? ++verify_pass : ++verify_fail;
    std::size_t dedup_accepted = 0, dedup_rejected = 0;
    for (const auto& [id, d] : state_.dedup_decisions)
      d.value("decision", "") == "accepted" ? ++dedup_accepted : ++dedup_rejected;
    std::size_t stage2_retained = 0, stage2_dropped = 0, stage2_skipped = 0;
    for (const auto& [id, u] : state_.stage2_units)
      if (u.contains("skip_reason")) ++stage2_skipped;
    for (const auto& [id, c] : state_.consistency)
      c.value("retained", false) ? ++stage2_retained : ++stage2_dropped;
    std::map<std::string, std::size_t> trace_outcomes;
    for (const auto& [tid, t] : state_.traces) ++trace_outcomes[to_string(t.outcome)];
    for (const auto& [tid, d] : state_.trace_drops)
      ++drop_reasons["trace:" + d.value("reason", "unknown")];
    std::map<std::string, std::size_t> pair_kinds;
    for (const auto& [pid, p] : state_.pairs) ++pair_kinds[p.pair_kind];

    std::vector<std::size_t> ann_counts;
    for (const auto& [id, e] : state_.images) ann_counts.push_back(e.annotations.size());

    std::map<std::string, std::size_t> bands;
    for (const auto& [id, c] : state_.complexity) ++bands[c.value("band", "unknown")];

    std::vector<BehaviorCounts> samples;
    for (const auto& [tid, b] : state_.behaviors)
      samples.push_back(b.at("counts").get<BehaviorCounts>());

    nlohmann::json j{
        {"images", state_.images.size()},
        {"corpus_errors", state_.ingest_errors.size()},
        {"median_annotations_per_image", median_of(std::move(ann_counts))},
        {"stage1_units", state_.stage1_units.size()},
        {"candidates", candidates_ok},
        {"candidates_rejected", candidates_rejected},
        {"verifier", {{"pass", verify_pass}, {"fail", verify_fail}}},
        {"dedup", {{"accepted", dedup_accepted}, {"rejected", dedup_rejected}}},
        {"stage2",
         {{"retained", stage2_retained},
          {"dropped", stage2_dropped},
          {"skipped", stage2_skipped}}},
        {"traces", trace_outcomes},
        {"trace_drops", state_.trace_drops.size()},
        {"pairs", pair_kinds},
        {"drop_reasons", drop_reasons},
        {"complexity_bands", bands},
        {"budgets", nlohmann::json::object()}};
    for (const auto& [key, b] : state_.budgets) j["budgets"][key] = b;
    if (!samples.empty()) j["behavior_presence"] = dataset_behavior_presence(samples);
    return j;
  }

  void write_analysis_files(const nlohmann::json& summary) const {
    const std::filesystem::path dir = std::filesystem::path(cfg_.out_dir) / "analytics";
    std::filesystem::create_directories(dir);
    {
      std::ofstream out(dir / "summary.json", std::ios::trunc);
      out << summary.dump(2) << '\n';
    }
    {
      std::ofstream out(dir / "summary.txt", std::ios::trunc);
      out << render_summary_text(summary);
    }
    // Plot data: pass-rate histogram plus behavior means, for external tools.
    nlohmann::json plot{{"pass_rate_histogram", nlohmann::json::array()},
                        {"behavior_means", nlohmann::json::object()}};
    std::map<std::string, std::size_t> hist;
    for (const auto& [id, c] : state_.complexity) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.1f", c.value("pass_rate", 0.0));
      ++hist[buf];
    }
    for (const auto& [bucket, count] : hist)
      plot["pass_rate_histogram"].push_back({{"bucket", bucket}, {"count", count}});
    if (summary.contains("behavior_presence")) {
      for (const auto& b : {"subgoal", "backtrack", "verify"})
        plot["behavior_means"][b] = summary["behavior_presence"][b]["mean"];
    }
    std::ofstream out(dir / "plot_data.json", std::ios::trunc);
    out << plot.dump(2) << '\n';
  }

 public:
  static std::string render_summary_text(const nlohmann::json& s) {
    std::ostringstream out;
    out << "pipeline summary\n";
    out << "  images                 " << s.value("images", 0) << "\n";
    out << "  corpus errors          " << s.value("corpus_errors", 0) << "\n";
    out << "  median annotations     " << s.value("median_annotations_per_image", 0.0) << "\n";
    out << "  stage1 units           " << s.value("stage1_units", 0) << "\n";
    out << "  candidates ok/rejected " << s.value("candidates", 0) << "/"
        << s.value("candidates_rejected", 0) << "\n";
    if (s.contains("verifier"))
      out << "  verifier pass/fail     " << s["verifier"].value("pass", 0) << "/"
          << s["verifier"].value("fail", 0) << "\n";
    if (s.contains("dedup"))
      out << "  dedup accept/reject    " << s["dedup"].value("accepted", 0) << "/"
          << s["dedup"].value("rejected", 0) << "\n";
    if (s.contains("stage2"))
      out << "  stage2 retain/drop/skip " << s["stage2"].value("retained", 0) << "/"
          << s["stage2"].value("dropped", 0) << "/" << s["stage2"].value("skipped", 0) << "\n";
    if (s.contains("traces")) {
      out << "  traces";
      for (auto it = s["traces"].begin(); it != s["traces"].end(); ++it)
        out << " " << it.key() << "=" << it.value().get<std::size_t>();
      out << "\n";
    }
    if (s.contains("pairs")) {
      out << "  pairs";
      for (auto it = s["pairs"].begin(); it != s["pairs"].end(); ++it)
        out << " " << it.key() << "=" << it.value().get<std::size_t>();
      out << "\n";
    }
    if (s.contains("complexity_bands")) {
      out << "  complexity";
      for (auto it = s["complexity_bands"].begin(); it != s["complexity_bands"].end(); ++it)
        out << " " << it.key() << "=" << it.value().get<std::size_t>();
      out << "\n";
    }
    if (s.contains("behavior_presence")) {
      for (const auto& b : {"subgoal", "backtrack", "verify"}) {
        const auto& row = s["behavior_presence"][b];
        out << "  behavior " << b << "  mean=" << row.value("mean", 0.0)
            << (row.value("present", false) ? " present" : " absent") << "\n";
      }
    }
    return out.str();
  }

 private:
  PipelineConfig cfg_;
  TemplateStore store_;
  std::unique_ptr<ModelGateway> gateway_;
  std::unique_ptr<ManifestWriter> writer_;
  PipelineState state_;
  std::string fp_;
};

}  // namespace vqforge
