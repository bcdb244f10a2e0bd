#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "vqforge/config.hpp"
#include "vqforge/stub_server.hpp"

namespace testsupport {

inline std::filesystem::path source_dir() { return VQFORGE_SOURCE_DIR; }
inline std::filesystem::path template_dir() { return source_dir() / "templates"; }
inline std::filesystem::path fixture_dir() { return source_dir() / "tests" / "fixtures"; }
inline std::filesystem::path golden_dir() { return source_dir() / "tests" / "golden"; }

struct TempDir {
  std::filesystem::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("vqforge_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream body;
  body << in.rdbuf();
  return body.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

inline vqforge::stub::StubConfig e2e_stub_config() {
  return vqforge::stub::StubConfig::from_script_file(
      (fixture_dir() / "stub_e2e.json").string());
}

// A pipeline config pointed at an in-process stub, tuned for fast tests.
inline vqforge::PipelineConfig make_config(const std::string& stub_url,
                                           const std::filesystem::path& corpus,
                                           const std::filesystem::path& out_dir,
                                           std::uint64_t seed = 42) {
  vqforge::PipelineConfig cfg;
  cfg.seed = seed;
  cfg.seed_set = true;
  cfg.corpus_path = corpus.string();
  cfg.template_dir = template_dir().string();
  cfg.out_dir = out_dir.string();
  cfg.workers = 4;
  cfg.logical_clock = true;
  for (const auto& name : vqforge::role_names()) {
    vqforge::ModelRole role = vqforge::default_role(name, stub_url);
    role.retry = {3, 2};
    role.timeout_ms = 10000;
    cfg.roles[name] = role;
  }
  return cfg;
}

inline vqforge::ObjectAnnotation make_ann(const std::string& label = "bag",
                                          double confidence = 0.95) {
  vqforge::ObjectAnnotation ann;
  ann.label = label;
  ann.bbox_px = {100, 50, 300, 150};
  ann.confidence = confidence;
  ann.source_detector = "florence2";
  return ann;
}

inline vqforge::ImageRecord make_record(const std::string& id = "img001") {
  vqforge::ImageRecord r;
  r.image_id = id;
  r.image_uri = "img://" + id;
  r.caption = "The photo shows a quiet courtyard with stone tiles. A worn leather satchel "
              "rests against the left post. Two metal chairs sit near a small round table.";
  r.width_px = 1000;
  r.height_px = 500;
  return r;
}

inline vqforge::McqItem make_item(const std::string& item_id = "img001/o00/q0",
                                  char gold = 'B') {
  vqforge::McqItem item;
  item.item_id = item_id;
  item.image_id = "img001";
  item.question = "What is the dominant color of the object near the fence?";
  item.choices = {"red", "brown", "green", "white"};
  item.answer.letter = gold;
  item.answer.object_label = "bag";
  item.answer.bbox_px = {100, 50, 300, 150};
  item.answer.answer_text = item.choices[static_cast<std::size_t>(gold - 'A')];
  item.question_type = "Specific Region Analysis";
  item.stage = vqforge::McqStage::stage1;
  item.source_annotation = make_ann();
  return item;
}

}  // namespace testsupport
