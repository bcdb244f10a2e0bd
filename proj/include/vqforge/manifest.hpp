#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/util.hpp"

namespace vqforge {

struct ManifestRecord {
  std::string kind;
  std::string item_id;
  std::string stage;
  std::int64_t ts = 0;
  std::string fp;  // config fingerprint
  nlohmann::json payload;
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = {{"kind", r.kind}, {"item_id", r.item_id}, {"stage", r.stage},
       {"ts", r.ts},     {"fp", r.fp},           {"payload", r.payload}};
}

inline void from_json(const nlohmann::json& j, ManifestRecord& r) {
  j.at("kind").get_to(r.kind);
  j.at("item_id").get_to(r.item_id);
  j.at("stage").get_to(r.stage);
  j.at("ts").get_to(r.ts);
  j.at("fp").get_to(r.fp);
  r.payload = j.value("payload", nlohmann::json::object());
}

struct LoadedManifest {
  std::vector<ManifestRecord> records;
  bool torn_tail_discarded = false;
  std::uintmax_t clean_bytes = 0;  // file size up to the last intact record
};

/// Reads a manifest log. A torn final line (crash mid-append) is detected and
/// discarded; corruption anywhere else is an error.
inline LoadedManifest load_manifest(const std::filesystem::path& path) {
  LoadedManifest out;
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) return out;  // absent manifest is an empty manifest

  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  while (pos < content.size()) {
    const std::size_t nl = content.find('\n', pos);
    const bool has_newline = nl != std::string::npos;
    const std::string line = content.substr(pos, has_newline ? nl - pos : std::string::npos);
    const bool is_last = !has_newline || nl + 1 >= content.size();
    if (trim(line).empty()) {
      pos = has_newline ? nl + 1 : content.size();
      continue;
    }
    try {
      ManifestRecord rec = nlohmann::json::parse(line).get<ManifestRecord>();
      if (!has_newline) {
        // Intact JSON but no terminator: the append was cut before the
        // newline; treat as torn.
        out.torn_tail_discarded = true;
        break;
      }
      out.records.push_back(std::move(rec));
      out.clean_bytes = nl + 1;
    } catch (const nlohmann::json::exception& e) {
      if (is_last) {
        out.torn_tail_discarded = true;
        break;
      }
      throw std::runtime_error("manifest corrupt at byte " + std::to_string(pos) + ": " +
                               e.what());
    }
    pos = nl + 1;
  }
  return out;
}

/// Rewrites the log keeping only the last record per (kind, item_id), in the
/// order of those surviving records. Replay is last-wins, so compaction
/// preserves the replayed state exactly. Returns records removed.
inline std::size_t compact_manifest(const std::filesystem::path& path) {
  const LoadedManifest loaded = load_manifest(path);
  std::map<std::string, std::size_t> last;  // key -> index of last occurrence
  for (std::size_t i = 0; i < loaded.records.size(); ++i) {
    const auto& r = loaded.records[i];
    last[r.kind + "\x1f" + r.item_id] = i;
  }
  const std::filesystem::path tmp = path.string() + ".compact";
  std::size_t kept = 0;
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out.good()) throw std::runtime_error("cannot write " + tmp.string());
    for (std::size_t i = 0; i < loaded.records.size(); ++i) {
      const auto& r = loaded.records[i];
      if (last[r.kind + "\x1f" + r.item_id] != i) continue;
      out << nlohmann::json(r).dump() << '\n';
      ++kept;
    }
  }
  std::filesystem::rename(tmp, path);
  return loaded.records.size() - kept;
}

/// Single-writer append log. Each record goes out as one write(2) of a full
/// line, so a crash can tear at most the final line. An advisory flock
/// guards against concurrent writers; a torn tail found on open is truncated
/// away before new appends.
class ManifestWriter {
 public:
  ManifestWriter(const std::filesystem::path& path, std::string config_fingerprint,
                 bool logical_clock, std::size_t existing_records,
                 std::uintmax_t clean_bytes, bool truncate_torn_tail)
      : path_(path), fp_(std::move(config_fingerprint)), logical_clock_(logical_clock),
        counter_(static_cast<std::int64_t>(existing_records)) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd_ < 0) throw std::runtime_error("cannot open manifest for append: " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw std::runtime_error("manifest is locked by another pipeline process: " +
                               path.string());
    }
    if (truncate_torn_tail) {
      if (::ftruncate(fd_, static_cast<off_t>(clean_bytes)) != 0)
        throw std::runtime_error("cannot repair torn manifest tail: " + path.string());
    }
  }

  ~ManifestWriter() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

  ManifestWriter(const ManifestWriter&) = delete;
  ManifestWriter& operator=(const ManifestWriter&) = delete;

  ManifestRecord append(const std::string& kind, const std::string& item_id,
                        const std::string& stage, nlohmann::json payload) {
    ManifestRecord rec;
    rec.kind = kind;
    rec.item_id = item_id;
    rec.stage = stage;
    rec.ts = logical_clock_ ? counter_ : epoch_ms();
    rec.fp = fp_;
    rec.payload = std::move(payload);
    const std::string line = nlohmann::json(rec).dump() + "\n";
    const ssize_t n = ::write(fd_, line.data(), line.size());
    if (n != static_cast<ssize_t>(line.size()))
      throw std::runtime_error("manifest append failed: " + path_.string());
    ++counter_;
    ++appended_;
    return rec;
  }

  std::int64_t appended() const { return appended_; }
  const std::string& fingerprint() const { return fp_; }

 private:
  std::filesystem::path path_;
  std::string fp_;
  bool logical_clock_;
  std::int64_t counter_ = 0;
  std::int64_t appended_ = 0;
  int fd_ = -1;
};

}  // namespace vqforge
