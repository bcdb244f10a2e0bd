#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "vqforge/config.hpp"
#include "vqforge/pipeline.hpp"
#include "vqforge/stub_server.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string manifest_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> stage_limit;
  std::optional<int> workers;
  int abort_after = 0;
};

vqforge::PipelineConfig load(const GlobalOpts& g) {
  vqforge::PipelineConfig cfg = vqforge::load_config(g.config_path);
  if (!g.manifest_path.empty()) cfg.manifest_path = g.manifest_path;
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.seed_set = true;
  }
  if (g.stage_limit) cfg.stage_limit = *g.stage_limit;
  if (g.workers) cfg.workers = *g.workers;
  cfg.abort_after_units = g.abort_after;
  return cfg;
}

void print_result(const vqforge::StageResult& r) {
  std::printf("%-8s units=%zu processed=%zu appended=%zu errors=%zu%s\n", r.stage.c_str(),
              r.units_total, r.units_processed, r.appended, r.errors,
              r.aborted ? " (aborted)" : "");
}

int exit_code(const std::vector<vqforge::StageResult>& results) {
  std::size_t errors = 0;
  for (const auto& r : results) {
    errors += r.errors;
    if (r.aborted) return 3;
  }
  return errors > 0 ? 2 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grounded visual-question synthesis pipeline"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "pipeline config file (JSON)");
  app.add_option("--manifest", g.manifest_path, "manifest path override");
  app.add_option("--seed", g.seed, "seed override (mandatory if absent from config)");
  app.add_option("--stage-limit", g.stage_limit, "truncate each stage to N work units");
  app.add_option("--workers", g.workers, "worker thread count override");
  app.add_option("--abort-after", g.abort_after,
                 "testing aid: abort the stage after N committed units")
      ->group("");  // hidden

  std::vector<std::string> stage_cmds = vqforge::stage_names();
  std::string chosen_stage;
  for (const auto& name : stage_cmds) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->callback([&chosen_stage, name] { chosen_stage = name; });
  }
  auto* resume_cmd = app.add_subcommand("resume", "complete all pending work across stages");
  resume_cmd->callback([&chosen_stage] { chosen_stage = "resume"; });
  auto* compact_cmd =
      app.add_subcommand("compact", "rewrite the manifest keeping the latest record per key");
  compact_cmd->callback([&chosen_stage] { chosen_stage = "compact"; });

  auto* serve = app.add_subcommand("serve-stub", "run the deterministic stub model server");
  int stub_port = 8700;
  std::string stub_script;
  std::uint64_t stub_seed = 1;
  serve->add_option("--port", stub_port, "listen port");
  serve->add_option("--script", stub_script, "stub script file (JSON)");
  serve->add_option("--stub-seed", stub_seed, "stub seed (overrides script)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve->parsed()) {
      vqforge::stub::StubConfig cfg;
      if (!stub_script.empty()) cfg = vqforge::stub::StubConfig::from_script_file(stub_script);
      if (serve->count("--stub-seed")) cfg.seed = stub_seed;
      vqforge::stub::StubServer server(cfg);
      std::printf("stub server listening on 127.0.0.1:%d\n", stub_port);
      std::fflush(stdout);
      server.run_blocking(stub_port);
      return 0;
    }
    if (g.config_path.empty()) {
      std::fprintf(stderr, "--config is required\n");
      return 1;
    }
    if (chosen_stage == "compact") {
      const auto cfg = load(g);
      const std::size_t removed = vqforge::compact_manifest(cfg.resolved_manifest_path());
      std::printf("compact  removed=%zu superseded records\n", removed);
      return 0;
    }
    vqforge::Pipeline pipeline(load(g));
    std::vector<vqforge::StageResult> results;
    if (chosen_stage == "resume") {
      results = pipeline.resume();
    } else {
      results.push_back(pipeline.run_stage(chosen_stage));
    }
    for (const auto& r : results) print_result(r);
    return exit_code(results);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fatal: %s\n", e.what());
    return 1;
  }
}
