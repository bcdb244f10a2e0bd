#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/util.hpp"

namespace vqforge {

struct ObjectAnnotation {
  std::string label;
  std::array<double, 4> bbox_px{};  // x1, y1, x2, y2
  double confidence = 0.0;
  std::string source_detector;
};

struct ImageRecord {
  std::string image_id;
  std::string image_uri;
  std::string caption;
  int width_px = 0;
  int height_px = 0;
};

struct CorpusEntry {
  ImageRecord record;
  std::vector<ObjectAnnotation> annotations;
};

struct CorpusBatch {
  std::vector<CorpusEntry> records;  // sorted by image_id
};

struct CorpusError {
  std::size_t line_no = 0;  // 1-based
  std::string message;
};

struct CorpusLoadResult {
  CorpusBatch batch;
  std::vector<CorpusError> errors;
};

inline void to_json(nlohmann::json& j, const ObjectAnnotation& a) {
  j = {{"label", a.label},
       {"bbox_px", a.bbox_px},
       {"confidence", a.confidence},
       {"source_detector", a.source_detector}};
}

inline void from_json(const nlohmann::json& j, ObjectAnnotation& a) {
  j.at("label").get_to(a.label);
  j.at("bbox_px").get_to(a.bbox_px);
  j.at("confidence").get_to(a.confidence);
  a.source_detector = j.value("source_detector", "");
}

inline void to_json(nlohmann::json& j, const ImageRecord& r) {
  j = {{"image_id", r.image_id},
       {"image_uri", r.image_uri},
       {"caption", r.caption},
       {"width_px", r.width_px},
       {"height_px", r.height_px}};
}

inline void from_json(const nlohmann::json& j, ImageRecord& r) {
  j.at("image_id").get_to(r.image_id);
  j.at("image_uri").get_to(r.image_uri);
  j.at("caption").get_to(r.caption);
  j.at("width_px").get_to(r.width_px);
  j.at("height_px").get_to(r.height_px);
}

namespace detail {

inline void validate_entry(const CorpusEntry& e) {
  if (e.record.image_id.empty()) throw std::runtime_error("image_id empty");
  if (e.record.caption.empty()) throw std::runtime_error("caption empty");
  if (e.record.width_px <= 0 || e.record.height_px <= 0)
    throw std::runtime_error("non-positive image dimensions");
  for (const auto& a : e.annotations) {
    if (a.label.empty()) throw std::runtime_error("annotation label empty");
    if (!(a.bbox_px[0] < a.bbox_px[2]) || !(a.bbox_px[1] < a.bbox_px[3]))
      throw std::runtime_error("degenerate bbox for label '" + a.label + "'");
    if (a.bbox_px[0] < 0 || a.bbox_px[1] < 0 || a.bbox_px[2] > e.record.width_px ||
        a.bbox_px[3] > e.record.height_px)
      throw std::runtime_error("bbox outside image bounds for label '" + a.label + "'");
    if (a.confidence < 0.0 || a.confidence > 1.0)
      throw std::runtime_error("confidence outside [0,1] for label '" + a.label + "'");
  }
}

}  // namespace detail

/// Loads a line-delimited corpus manifest. Malformed lines are collected as
/// per-line errors; well-formed records are returned sorted by image_id.
inline CorpusLoadResult load_corpus(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in.good())
    throw std::runtime_error("corpus manifest not found: " + manifest_path.string());

  CorpusLoadResult result;
  std::map<std::string, std::size_t> seen_ids;  // image_id -> first line
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      CorpusEntry entry;
      entry.record = j.get<ImageRecord>();
      if (j.contains("annotations"))
        entry.annotations = j.at("annotations").get<std::vector<ObjectAnnotation>>();
      detail::validate_entry(entry);
      auto [it, inserted] = seen_ids.emplace(entry.record.image_id, line_no);
      if (!inserted)
        throw std::runtime_error("duplicate image_id '" + entry.record.image_id +
                                 "' (first seen at line " + std::to_string(it->second) + ")");
      result.batch.records.push_back(std::move(entry));
    } catch (const std::exception& e) {
      result.errors.push_back({line_no, e.what()});
    }
  }
  std::sort(result.batch.records.begin(), result.batch.records.end(),
            [](const CorpusEntry& a, const CorpusEntry& b) {
              return a.record.image_id < b.record.image_id;
            });
  return result;
}

/// Confidence cutoff plus per-label instance cap. Within a label the
/// highest-confidence instances are kept (ties broken by input order);
/// the output preserves input order.
inline std::vector<ObjectAnnotation> filter_annotations(
    const std::vector<ObjectAnnotation>& annotations, double cutoff, int cap) {
  if (cutoff < 0.0 || cutoff > 1.0) throw std::invalid_argument("cutoff outside [0,1]");
  if (cap < 1) throw std::invalid_argument("cap must be >= 1");

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    if (annotations[i].confidence >= cutoff) by_label[annotations[i].label].push_back(i);
  }
  std::vector<bool> keep(annotations.size(), false);
  for (auto& [label, idxs] : by_label) {
    std::stable_sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      return annotations[a].confidence > annotations[b].confidence;
    });
    const std::size_t n = std::min<std::size_t>(idxs.size(), static_cast<std::size_t>(cap));
    for (std::size_t k = 0; k < n; ++k) keep[idxs[k]] = true;
  }
  std::vector<ObjectAnnotation> out;
  for (std::size_t i = 0; i < annotations.size(); ++i)
    if (keep[i]) out.push_back(annotations[i]);
  return out;
}

/// Full-precision normalized coordinates in [0,1].
inline std::array<double, 4> normalize_bbox(const std::array<double, 4>& bbox_px, int width_px,
                                            int height_px) {
  if (width_px <= 0 || height_px <= 0)
    throw std::invalid_argument("zero-sized image dimensions");
  if (bbox_px[0] < 0 || bbox_px[1] < 0 || bbox_px[2] > width_px || bbox_px[3] > height_px ||
      !(bbox_px[0] < bbox_px[2]) || !(bbox_px[1] < bbox_px[3]))
    throw std::invalid_argument("bbox outside image bounds");
  return {bbox_px[0] / width_px, bbox_px[1] / height_px, bbox_px[2] / width_px,
          bbox_px[3] / height_px};
}

inline std::array<double, 4> denormalize_bbox(const std::array<double, 4>& bbox_norm,
                                              int width_px, int height_px) {
  return {bbox_norm[0] * width_px, bbox_norm[1] * height_px, bbox_norm[2] * width_px,
          bbox_norm[3] * height_px};
}

/// Prompt-facing metadata line, e.g. `bag (0.29, 0.11, 0.39, 0.32)`.
/// Coordinates rendered at 2 decimals; full precision stays internal.
inline std::string render_metadata_tag(const std::string& label,
                                       const std::array<double, 4>& bbox_norm) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), " (%.2f, %.2f, %.2f, %.2f)", bbox_norm[0], bbox_norm[1],
                bbox_norm[2], bbox_norm[3]);
  return label + buf;
}

struct CorpusSummary {
  std::size_t images = 0;
  std::size_t annotations_total = 0;
  std::size_t annotations_kept = 0;
  double median_kept_per_image = 0.0;
};

inline double median_of(std::vector<std::size_t> counts) {
  if (counts.empty()) return 0.0;
  std::sort(counts.begin(), counts.end());
  const std::size_t n = counts.size();
  if (n % 2 == 1) return static_cast<double>(counts[n / 2]);
  return (static_cast<double>(counts[n / 2 - 1]) + static_cast<double>(counts[n / 2])) / 2.0;
}

inline CorpusSummary summarize_corpus(const CorpusBatch& batch, double cutoff, int cap) {
  CorpusSummary s;
  s.images = batch.records.size();
  std::vector<std::size_t> kept_counts;
  for (const auto& entry : batch.records) {
    s.annotations_total += entry.annotations.size();
    const auto kept = filter_annotations(entry.annotations, cutoff, cap);
    s.annotations_kept += kept.size();
    kept_counts.push_back(kept.size());
  }
  s.median_kept_per_image = median_of(std::move(kept_counts));
  return s;
}

}  // namespace vqforge
