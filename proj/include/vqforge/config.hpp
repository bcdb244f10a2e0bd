#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/analytics.hpp"
#include "vqforge/dedup.hpp"
#include "vqforge/exporter.hpp"
#include "vqforge/gateway.hpp"
#include "vqforge/synth.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CorpusFilterConfig {
  double confidence_cutoff = 0.9;
  int per_label_cap = 9;
};

struct AnalyticsConfig {
  int complexity_rollouts = 8;
  int behavior_sample = 1000;
  std::string policy_role = "vlm";
  BehaviorCues cues;
};

inline const std::vector<std::string>& role_names() {
  static const std::vector<std::string> names{"generator", "vlm",   "reasoner",
                                              "verifier",  "judge", "embedder"};
  return names;
}

// Caption-reference patterns suppressed during thought expansion. Matched
// case-insensitively; configuration, not code.
inline std::vector<std::string> default_banned_patterns() {
  return {"image description", "the description (says|states|mentions)", "the caption"};
}

/// Per-role defaults; temperatures are artifact defaults, not sourced values.
inline ModelRole default_role(const std::string& name, const std::string& endpoint_url) {
  ModelRole r;
  r.role_name = name;
  r.endpoint_url = endpoint_url;
  r.model_name = "stub-" + name;
  r.max_in_flight = 4;
  r.retry = {3, 100};
  if (name == "generator") r.sampling.temperature = 0.8;
  if (name == "vlm") r.sampling.temperature = 0.7;
  if (name == "reasoner") {
    r.sampling.temperature = 0.6;
    r.banned_patterns = default_banned_patterns();
  }
  if (name == "verifier" || name == "judge") r.sampling.temperature = 0.0;
  return r;
}

struct PipelineConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;

  std::string corpus_path;
  std::string template_dir = "templates";
  std::string out_dir = "out";
  std::string manifest_path;  // defaults to <out_dir>/manifest.jsonl

  int workers = 4;
  bool logical_clock = false;
  int stage_limit = 0;       // 0 = unlimited; truncates each stage's workload
  int abort_after_units = 0; // testing knob: abort the stage after N units

  std::map<std::string, ModelRole> roles;
  CorpusFilterConfig corpus_filter;
  DedupConfig dedup;
  SynthConfig synth;
  ExportConfig exports;
  AnalyticsConfig analytics;

  std::string resolved_manifest_path() const {
    return manifest_path.empty() ? out_dir + "/manifest.jsonl" : manifest_path;
  }

  void validate() const {
    std::vector<std::string> problems;
    if (!seed_set) problems.push_back("seed is mandatory (config field `seed` or --seed)");
    if (corpus_path.empty())
      problems.push_back("corpus_path is required");
    else if (!std::filesystem::exists(corpus_path))
      problems.push_back("corpus_path does not exist: " + corpus_path);
    if (!std::filesystem::is_directory(template_dir))
      problems.push_back("template_dir does not exist: " + template_dir);
    for (const auto& name : role_names()) {
      auto it = roles.find(name);
      if (it == roles.end()) {
        problems.push_back("missing role config: " + name);
        continue;
      }
      const ModelRole& r = it->second;
      if (r.endpoint_url.empty()) problems.push_back("role " + name + ": endpoint_url empty");
      if (r.max_in_flight < 1) problems.push_back("role " + name + ": max_in_flight < 1");
      if (r.sampling.temperature < 0) problems.push_back("role " + name + ": temperature < 0");
      if (r.retry.max_attempts < 1) problems.push_back("role " + name + ": max_attempts < 1");
      for (const auto& p : r.banned_patterns) {
        try {
          std::regex re(p, std::regex::icase);
        } catch (const std::regex_error& e) {
          problems.push_back("role " + name + ": banned pattern `" + p +
                             "` does not compile: " + e.what());
        }
      }
    }
    if (corpus_filter.confidence_cutoff < 0 || corpus_filter.confidence_cutoff > 1)
      problems.push_back("corpus_filter.confidence_cutoff outside [0,1]");
    if (corpus_filter.per_label_cap < 1) problems.push_back("corpus_filter.per_label_cap < 1");
    try {
      dedup.validate();
    } catch (const std::exception& e) {
      problems.push_back(std::string("dedup: ") + e.what());
    }
    try {
      synth.validate();
    } catch (const std::exception& e) {
      problems.push_back(std::string("synth: ") + e.what());
    }
    if (analytics.complexity_rollouts < 1) problems.push_back("analytics.complexity_rollouts < 1");
    if (analytics.behavior_sample < 1) problems.push_back("analytics.behavior_sample < 1");
    if (!problems.empty()) throw ConfigError("invalid configuration:\n  - " + join(problems, "\n  - "));
  }

  /// Hash of the canonicalized config with path-like and per-machine fields
  /// removed, so a manifest can be resumed from another checkout or host.
  std::string fingerprint() const;
};

inline void to_json(nlohmann::json& j, const ModelRole& r) {
  j = {{"endpoint_url", r.endpoint_url},
       {"model_name", r.model_name},
       {"temperature", r.sampling.temperature},
       {"top_p", r.sampling.top_p},
       {"max_tokens", r.sampling.max_tokens},
       {"stop", r.sampling.stop},
       {"banned_patterns", r.banned_patterns},
       {"supports_server_constraints", r.supports_server_constraints},
       {"supports_prefix_continuation", r.supports_prefix_continuation},
       {"max_in_flight", r.max_in_flight},
       {"max_attempts", r.retry.max_attempts},
       {"base_backoff_ms", r.retry.base_backoff_ms},
       {"timeout_ms", r.timeout_ms},
       {"api_key_env", r.api_key_env}};
}

inline void role_from_json(const nlohmann::json& j, ModelRole& r) {
  r.endpoint_url = j.value("endpoint_url", r.endpoint_url);
  r.model_name = j.value("model_name", r.model_name);
  r.sampling.temperature = j.value("temperature", r.sampling.temperature);
  r.sampling.top_p = j.value("top_p", r.sampling.top_p);
  r.sampling.max_tokens = j.value("max_tokens", r.sampling.max_tokens);
  if (j.contains("stop")) j.at("stop").get_to(r.sampling.stop);
  if (j.contains("banned_patterns")) j.at("banned_patterns").get_to(r.banned_patterns);
  r.supports_server_constraints =
      j.value("supports_server_constraints", r.supports_server_constraints);
  r.supports_prefix_continuation =
      j.value("supports_prefix_continuation", r.supports_prefix_continuation);
  r.max_in_flight = j.value("max_in_flight", r.max_in_flight);
  r.retry.max_attempts = j.value("max_attempts", r.retry.max_attempts);
  r.retry.base_backoff_ms = j.value("base_backoff_ms", r.retry.base_backoff_ms);
  r.timeout_ms = j.value("timeout_ms", r.timeout_ms);
  r.api_key_env = j.value("api_key_env", r.api_key_env);
}

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  nlohmann::json roles = nlohmann::json::object();
  for (const auto& [name, role] : c.roles) roles[name] = role;
  j = {{"seed", c.seed},
       {"corpus_path", c.corpus_path},
       {"template_dir", c.template_dir},
       {"out_dir", c.out_dir},
       {"manifest_path", c.manifest_path},
       {"workers", c.workers},
       {"logical_clock", c.logical_clock},
       {"stage_limit", c.stage_limit},
       {"roles", roles},
       {"corpus_filter",
        {{"confidence_cutoff", c.corpus_filter.confidence_cutoff},
         {"per_label_cap", c.corpus_filter.per_label_cap}}},
       {"dedup",
        {{"lambda_s", c.dedup.weights.lambda_s},
         {"lambda_a", c.dedup.weights.lambda_a},
         {"lambda_c", c.dedup.weights.lambda_c},
         {"tau_dup", c.dedup.tau_dup},
         {"k_neighbors", c.dedup.k_neighbors},
         {"exact_scan_limit", c.dedup.exact_scan_limit}}},
       {"synth",
        {{"num_questions_per_object", c.synth.num_questions_per_object},
         {"compose_k_min", c.synth.compose_k_min},
         {"compose_k_max", c.synth.compose_k_max},
         {"compositions_per_image", c.synth.compositions_per_image},
         {"consistency_rollouts", c.synth.consistency_rollouts},
         {"consistency_tau", c.synth.consistency_tau},
         {"verifier_enabled", c.synth.verifier_enabled},
         {"vlm_rollouts", c.synth.vlm_rollouts},
         {"max_regens", c.synth.max_regens},
         {"question_min_chars", c.synth.limits.question_min_chars},
         {"question_max_chars", c.synth.limits.question_max_chars}}},
       {"export", {{"pair_cap_per_kind", c.exports.pair_cap_per_kind}}},
       {"analytics",
        {{"complexity_rollouts", c.analytics.complexity_rollouts},
         {"behavior_sample", c.analytics.behavior_sample},
         {"policy_role", c.analytics.policy_role},
         {"behavior_cues",
          {{"subgoal", c.analytics.cues.subgoal},
           {"backtrack", c.analytics.cues.backtrack},
           {"verify", c.analytics.cues.verify}}}}}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("seed")) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.seed_set = true;
  }
  c.corpus_path = j.value("corpus_path", c.corpus_path);
  c.template_dir = j.value("template_dir", c.template_dir);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.manifest_path = j.value("manifest_path", c.manifest_path);
  c.workers = j.value("workers", c.workers);
  c.logical_clock = j.value("logical_clock", c.logical_clock);
  c.stage_limit = j.value("stage_limit", c.stage_limit);
  if (j.contains("roles")) {
    for (const auto& name : role_names()) {
      ModelRole role = default_role(name, "");
      if (c.roles.count(name)) role = c.roles.at(name);
      if (j["roles"].contains(name)) role_from_json(j["roles"][name], role);
      c.roles[name] = std::move(role);
    }
  }
  if (j.contains("corpus_filter")) {
    const auto& f = j["corpus_filter"];
    c.corpus_filter.confidence_cutoff =
        f.value("confidence_cutoff", c.corpus_filter.confidence_cutoff);
    c.corpus_filter.per_label_cap = f.value("per_label_cap", c.corpus_filter.per_label_cap);
  }
  if (j.contains("dedup")) {
    const auto& d = j["dedup"];
    c.dedup.weights.lambda_s = d.value("lambda_s", c.dedup.weights.lambda_s);
    c.dedup.weights.lambda_a = d.value("lambda_a", c.dedup.weights.lambda_a);
    c.dedup.weights.lambda_c = d.value("lambda_c", c.dedup.weights.lambda_c);
    c.dedup.tau_dup = d.value("tau_dup", c.dedup.tau_dup);
    c.dedup.k_neighbors = d.value("k_neighbors", c.dedup.k_neighbors);
    c.dedup.exact_scan_limit = d.value("exact_scan_limit", c.dedup.exact_scan_limit);
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    c.synth.num_questions_per_object =
        s.value("num_questions_per_object", c.synth.num_questions_per_object);
    c.synth.compose_k_min = s.value("compose_k_min", c.synth.compose_k_min);
    c.synth.compose_k_max = s.value("compose_k_max", c.synth.compose_k_max);
    c.synth.compositions_per_image =
        s.value("compositions_per_image", c.synth.compositions_per_image);
    c.synth.consistency_rollouts =
        s.value("consistency_rollouts", c.synth.consistency_rollouts);
    c.synth.consistency_tau = s.value("consistency_tau", c.synth.consistency_tau);
    c.synth.verifier_enabled = s.value("verifier_enabled", c.synth.verifier_enabled);
    c.synth.vlm_rollouts = s.value("vlm_rollouts", c.synth.vlm_rollouts);
    c.synth.max_regens = s.value("max_regens", c.synth.max_regens);
    c.synth.limits.question_min_chars =
        s.value("question_min_chars", c.synth.limits.question_min_chars);
    c.synth.limits.question_max_chars =
        s.value("question_max_chars", c.synth.limits.question_max_chars);
  }
  if (j.contains("export"))
    c.exports.pair_cap_per_kind = j["export"].value("pair_cap_per_kind", c.exports.pair_cap_per_kind);
  if (j.contains("analytics")) {
    const auto& a = j["analytics"];
    c.analytics.complexity_rollouts =
        a.value("complexity_rollouts", c.analytics.complexity_rollouts);
    c.analytics.behavior_sample = a.value("behavior_sample", c.analytics.behavior_sample);
    c.analytics.policy_role = a.value("policy_role", c.analytics.policy_role);
    if (a.contains("behavior_cues")) {
      const auto& cues = a["behavior_cues"];
      if (cues.contains("subgoal")) cues.at("subgoal").get_to(c.analytics.cues.subgoal);
      if (cues.contains("backtrack")) cues.at("backtrack").get_to(c.analytics.cues.backtrack);
      if (cues.contains("verify")) cues.at("verify").get_to(c.analytics.cues.verify);
    }
  }
}

inline std::string PipelineConfig::fingerprint() const {
  nlohmann::json j = *this;
  // Path-like and per-machine fields stay out of the fingerprint.
  for (const char* key : {"corpus_path", "template_dir", "out_dir", "manifest_path", "workers"})
    j.erase(key);
  if (j.contains("roles")) {
    for (auto& [name, role] : j["roles"].items()) {
      role.erase("endpoint_url");
      role.erase("api_key_env");
      role.erase("timeout_ms");
      role.erase("max_in_flight");
      role.erase("max_attempts");
      role.erase("base_backoff_ms");
    }
  }
  return to_hex(fnv1a64(j.dump()));
}

/// Loads a config file, materializing role defaults for any role the file
/// does not mention.
inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in.good()) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  PipelineConfig cfg;
  if (!j.contains("roles")) j["roles"] = nlohmann::json::object();
  from_json(j, cfg);
  if (j.contains("default_endpoint")) {
    const std::string url = j["default_endpoint"].get<std::string>();
    for (auto& [name, role] : cfg.roles)
      if (role.endpoint_url.empty()) role.endpoint_url = url;
  }
  return cfg;
}

}  // namespace vqforge
