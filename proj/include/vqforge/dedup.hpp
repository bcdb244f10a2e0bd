#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqforge/util.hpp"

namespace vqforge {

struct SimilarityWeights {
  double lambda_s = 0.5;  // question stem
  double lambda_a = 0.3;  // selected answer
  double lambda_c = 0.2;  // category tags

  void validate() const {
    if (lambda_s < 0 || lambda_a < 0 || lambda_c < 0)
      throw std::invalid_argument("similarity weights must be nonnegative");
    if (std::abs(lambda_s + lambda_a + lambda_c - 1.0) > 1e-9)
      throw std::invalid_argument("similarity weights must sum to 1");
  }
};

struct DedupEntry {
  std::string item_id;
  std::vector<double> q_vec;  // unit norm
  std::vector<double> a_vec;  // unit norm
  std::set<std::string> tags;
};

struct DedupConfig {
  SimilarityWeights weights;
  double tau_dup = 0.82;
  int k_neighbors = 8;
  std::size_t exact_scan_limit = 100000;  // beyond this the index goes approximate

  void validate() const {
    weights.validate();
    if (tau_dup <= 0.0 || tau_dup > 1.0) throw std::invalid_argument("tau_dup outside (0,1]");
    if (k_neighbors < 1) throw std::invalid_argument("k_neighbors must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Text normalization
// ---------------------------------------------------------------------------

namespace detail {

// Unicode codepoints treated as punctuation beyond the ASCII range: general
// punctuation block, quotes, dashes, and a few stray symbols. Canonical
// (de)composition is intentionally not applied.
inline bool is_unicode_punct(char32_t cp) {
  if (cp >= 0x2000 && cp <= 0x206F) return true;  // general punctuation
  if (cp >= 0x2E00 && cp <= 0x2E7F) return true;  // supplemental punctuation
  if (cp == 0x00A1 || cp == 0x00BF || cp == 0x00AB || cp == 0x00BB) return true;
  if (cp == 0x00D7 || cp == 0x00F7) return true;
  return false;
}

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

}  // namespace detail

/// Standard text normalization ahead of embedding and tag comparison:
/// lowercase, punctuation to spaces, whitespace collapsed, trimmed.
/// UTF-8 aware; Latin-1 letters are lowercased, common Unicode punctuation
/// is stripped like ASCII punctuation.
inline std::string normalize_text(const std::string& raw) {
  std::string mapped;
  mapped.reserve(raw.size());
  std::size_t i = 0;
  const auto n = raw.size();
  while (i < n) {
    const unsigned char b = static_cast<unsigned char>(raw[i]);
    char32_t cp = 0;
    std::size_t len = 1;
    if (b < 0x80) {
      cp = b;
    } else if ((b >> 5) == 0x6 && i + 1 < n) {
      cp = static_cast<char32_t>((b & 0x1F) << 6 | (raw[i + 1] & 0x3F));
      len = 2;
    } else if ((b >> 4) == 0xE && i + 2 < n) {
      cp = static_cast<char32_t>((b & 0x0F) << 12 | (raw[i + 1] & 0x3F) << 6 |
                                 (raw[i + 2] & 0x3F));
      len = 3;
    } else if ((b >> 3) == 0x1E && i + 3 < n) {
      cp = static_cast<char32_t>((b & 0x07) << 18 | (raw[i + 1] & 0x3F) << 12 |
                                 (raw[i + 2] & 0x3F) << 6 | (raw[i + 3] & 0x3F));
      len = 4;
    } else {
      cp = 0xFFFD;
    }
    i += len;

    if (cp < 0x80) {
      const auto c = static_cast<unsigned char>(cp);
      if (std::isalnum(c)) {
        mapped += static_cast<char>(std::tolower(c));
      } else {
        mapped += ' ';
      }
    } else if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) {
      detail::append_utf8(mapped, cp + 0x20);  // Latin-1 uppercase -> lowercase
    } else if (detail::is_unicode_punct(cp) || cp == 0xFFFD) {
      mapped += ' ';
    } else {
      detail::append_utf8(mapped, cp);
    }
  }
  return collapse_whitespace(mapped);
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

/// Jaccard index over tag sets; two empty sets score 0 so untagged items are
/// never pushed toward duplication.
inline double jaccard(const std::set<std::string>& a, const std::set<std::string>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& t : a) inter += b.count(t);
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("vector dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Weighted combination of question-stem cosine, answer cosine and tag
/// Jaccard. Vectors are unit norm, so cosine is the dot product.
inline double composite_similarity(const DedupEntry& ei, const DedupEntry& ej,
                                   const SimilarityWeights& w) {
  return w.lambda_s * dot(ei.q_vec, ej.q_vec) + w.lambda_a * dot(ei.a_vec, ej.a_vec) +
         w.lambda_c * jaccard(ei.tags, ej.tags);
}

// ---------------------------------------------------------------------------
// Neighbor indexes
// ---------------------------------------------------------------------------

/// Retrieval interface keyed on the question-stem vector; the composite score
/// re-ranks whatever comes back.
class NeighborIndex {
 public:
  virtual ~NeighborIndex() = default;
  virtual void insert(const DedupEntry& entry) = 0;
  virtual std::vector<const DedupEntry*> top_k(const std::vector<double>& q_vec,
                                               std::size_t k) const = 0;
  virtual std::size_t size() const = 0;
};

class ExactIndex final : public NeighborIndex {
 public:
  void insert(const DedupEntry& entry) override { entries_.push_back(std::make_unique<DedupEntry>(entry)); }

  std::vector<const DedupEntry*> top_k(const std::vector<double>& q_vec,
                                       std::size_t k) const override {
    std::vector<std::pair<double, const DedupEntry*>> scored;
    scored.reserve(entries_.size());
    for (const auto& e : entries_) scored.emplace_back(dot(q_vec, e->q_vec), e.get());
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take),
                      scored.end(), [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second->item_id < b.second->item_id;
                      });
    std::vector<const DedupEntry*> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i) out.push_back(scored[i].second);
    return out;
  }

  std::size_t size() const override { return entries_.size(); }

  const std::vector<std::unique_ptr<DedupEntry>>& entries() const { return entries_; }

 private:
  std::vector<std::unique_ptr<DedupEntry>> entries_;
};

/// Greedy small-world graph. Inserted nodes link to their M nearest known
/// nodes; queries run a best-first beam search of width ef. Approximate:
/// used once the exact scan stops being affordable.
class SmallWorldIndex final : public NeighborIndex {
 public:
  explicit SmallWorldIndex(std::size_t m = 12, std::size_t ef = 48) : m_(m), ef_(ef) {}

  void insert(const DedupEntry& entry) override {
    auto node = std::make_unique<Node>();
    node->entry = entry;
    const std::size_t id = nodes_.size();
    if (id > 0) {
      auto near = search(entry.q_vec, m_);
      for (const auto& [d, nid] : near) {
        node->links.push_back(nid);
        nodes_[nid]->links.push_back(id);
      }
    }
    nodes_.push_back(std::move(node));
  }

  std::vector<const DedupEntry*> top_k(const std::vector<double>& q_vec,
                                       std::size_t k) const override {
    auto near = search(q_vec, std::max(k, ef_));
    std::vector<const DedupEntry*> out;
    for (std::size_t i = 0; i < near.size() && i < k; ++i)
      out.push_back(&nodes_[near[i].second]->entry);
    return out;
  }

  std::size_t size() const override { return nodes_.size(); }

 private:
  struct Node {
    DedupEntry entry;
    std::vector<std::size_t> links;
  };

  // Returns (similarity, node) pairs sorted best-first.
  std::vector<std::pair<double, std::size_t>> search(const std::vector<double>& q,
                                                     std::size_t width) const {
    std::vector<std::pair<double, std::size_t>> best;
    if (nodes_.empty()) return best;
    std::vector<bool> visited(nodes_.size(), false);
    auto sim = [&](std::size_t id) { return dot(q, nodes_[id]->entry.q_vec); };

    std::vector<std::pair<double, std::size_t>> frontier{{sim(0), 0}};
    visited[0] = true;
    best = frontier;
    while (!frontier.empty()) {
      // Expand the current best unexpanded candidate.
      std::sort(frontier.begin(), frontier.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      const auto [d, id] = frontier.front();
      frontier.erase(frontier.begin());
      double worst_kept = best.size() >= width ? best.back().first
                                               : -std::numeric_limits<double>::infinity();
      if (d < worst_kept && best.size() >= width) break;
      for (const std::size_t nb : nodes_[id]->links) {
        if (visited[nb]) continue;
        visited[nb] = true;
        const double nd = sim(nb);
        frontier.emplace_back(nd, nb);
        best.emplace_back(nd, nb);
        std::sort(best.begin(), best.end(), [](const auto& a, const auto& b) {
          if (a.first != b.first) return a.first > b.first;
          return a.second < b.second;
        });
        if (best.size() > width) best.resize(width);
      }
    }
    return best;
  }

  std::size_t m_;
  std::size_t ef_;
  std::vector<std::unique_ptr<Node>> nodes_;
};

// ---------------------------------------------------------------------------
// Screening
// ---------------------------------------------------------------------------

struct ScreenDecision {
  bool accepted = false;
  std::string nearest_id;  // empty when the index was empty
  double score = -std::numeric_limits<double>::infinity();
};

/// Brute-force maximum composite similarity over previously accepted entries;
/// ground truth for the index-backed screen.
inline std::pair<double, std::string> oracle_max_similarity(
    const DedupEntry& item, const std::vector<DedupEntry>& accepted,
    const SimilarityWeights& w) {
  double best = -std::numeric_limits<double>::infinity();
  std::string best_id;
  for (const auto& e : accepted) {
    const double s = composite_similarity(item, e, w);
    if (s > best) {
      best = s;
      best_id = e.item_id;
    }
  }
  return {best, best_id};
}

/// Order-sensitive duplicate screen: an item is rejected when its maximum
/// composite similarity against the already-accepted set reaches tau_dup;
/// otherwise it joins the index. Retrieval uses the stem vector; the
/// composite score re-ranks the k retrieved neighbors. Single-writer.
class Screener {
 public:
  explicit Screener(DedupConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    index_ = std::make_unique<ExactIndex>();
  }

  ScreenDecision screen(const DedupEntry& item) {
    maybe_migrate();
    ScreenDecision d;
    const auto neighbors =
        index_->top_k(item.q_vec, static_cast<std::size_t>(cfg_.k_neighbors));
    for (const auto* e : neighbors) {
      const double s = composite_similarity(item, *e, cfg_.weights);
      if (s > d.score) {
        d.score = s;
        d.nearest_id = e->item_id;
      }
    }
    d.accepted = neighbors.empty() || d.score < cfg_.tau_dup;
    if (d.accepted) index_->insert(item);
    return d;
  }

  std::size_t accepted_count() const { return index_->size(); }
  const DedupConfig& config() const { return cfg_; }

  /// Preloads previously accepted entries (replay path); no screening.
  void preload(const DedupEntry& entry) {
    maybe_migrate();
    index_->insert(entry);
  }

 private:
  void maybe_migrate() {
    if (migrated_ || index_->size() < cfg_.exact_scan_limit) return;
    auto* exact = dynamic_cast<ExactIndex*>(index_.get());
    if (!exact) return;
    auto approx = std::make_unique<SmallWorldIndex>();
    for (const auto& e : exact->entries()) approx->insert(*e);
    index_ = std::move(approx);
    migrated_ = true;
  }

  DedupConfig cfg_;
  std::unique_ptr<NeighborIndex> index_;
  bool migrated_ = false;
};

}  // namespace vqforge
