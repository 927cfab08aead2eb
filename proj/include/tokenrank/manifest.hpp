#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace tokenrank {

enum class Role { kQuery, kGallery };

struct ManifestEntry {
  std::string image_id;
  Role role = Role::kGallery;
  std::vector<std::string> crater_ids;  // sorted, unique
  std::optional<std::string> view;
  std::optional<std::string> context;
};

/// Queries, gallery and cluster-tolerant relevance: a gallery image g is
/// relevant to query q iff crater_ids(g) intersects crater_ids(q).
class RelevanceManifest {
 public:
  /// Validates and inserts. Throws kValidation on duplicate ids, empty
  /// crater sets, or gallery entries with more than one crater id.
  void add(ManifestEntry entry);

  const ManifestEntry* find(const std::string& image_id) const;
  const std::vector<ManifestEntry>& entries() const noexcept { return entries_; }

  /// Query ids in insertion order.
  std::vector<std::string> query_ids() const;
  /// Gallery ids sorted ascending.
  std::vector<std::string> gallery_ids() const;
  std::size_t gallery_size() const noexcept { return gallery_count_; }

  bool is_gallery(const std::string& image_id) const;
  bool relevant(const std::string& query_id, const std::string& gallery_id) const;
  /// R(q): gallery ids sharing a crater id with the query, sorted ascending.
  std::vector<std::string> relevant_set(const std::string& query_id) const;

 private:
  std::vector<ManifestEntry> entries_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::unordered_map<std::string, std::vector<std::string>> gallery_by_crater_;
  std::size_t gallery_count_ = 0;
};

/// JSON Lines: {"image_id", "role": "query"|"gallery", "crater_ids": [...],
/// "view"?, "context"?}. Errors carry the 1-based line number.
RelevanceManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const RelevanceManifest& manifest,
                   const std::filesystem::path& path);

}  // namespace tokenrank
