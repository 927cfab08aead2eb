#include "tokenrank/manifest.hpp"

#include <algorithm>
#include <fstream>

#include "tokenrank/binary_io.hpp"
#include "tokenrank/core.hpp"

namespace tokenrank {

void RelevanceManifest::add(ManifestEntry entry) {
  require(!entry.image_id.empty(), ErrorKind::kValidation, "empty image_id");
  require(!by_id_.contains(entry.image_id), ErrorKind::kValidation,
          "duplicate image_id '" + entry.image_id + "'");
  std::sort(entry.crater_ids.begin(), entry.crater_ids.end());
  entry.crater_ids.erase(std::unique(entry.crater_ids.begin(), entry.crater_ids.end()),
                         entry.crater_ids.end());
  require(!entry.crater_ids.empty(), ErrorKind::kValidation,
          "'" + entry.image_id + "' has no crater_ids");
  if (entry.role == Role::kGallery) {
    require(entry.crater_ids.size() == 1, ErrorKind::kValidation,
            "gallery image '" + entry.image_id + "' must carry exactly one crater id");
    gallery_by_crater_[entry.crater_ids.front()].push_back(entry.image_id);
    ++gallery_count_;
  }
  by_id_.emplace(entry.image_id, entries_.size());
  entries_.push_back(std::move(entry));
}

const ManifestEntry* RelevanceManifest::find(const std::string& image_id) const {
  const auto it = by_id_.find(image_id);
  return it == by_id_.end() ? nullptr : &entries_[it->second];
}

std::vector<std::string> RelevanceManifest::query_ids() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (e.role == Role::kQuery) out.push_back(e.image_id);
  }
  return out;
}

std::vector<std::string> RelevanceManifest::gallery_ids() const {
  std::vector<std::string> out;
  out.reserve(gallery_count_);
  for (const auto& e : entries_) {
    if (e.role == Role::kGallery) out.push_back(e.image_id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool RelevanceManifest::is_gallery(const std::string& image_id) const {
  const auto* e = find(image_id);
  return e != nullptr && e->role == Role::kGallery;
}

bool RelevanceManifest::relevant(const std::string& query_id,
                                 const std::string& gallery_id) const {
  const auto* q = find(query_id);
  const auto* g = find(gallery_id);
  if (q == nullptr || g == nullptr || g->role != Role::kGallery) return false;
  return std::binary_search(q->crater_ids.begin(), q->crater_ids.end(),
                            g->crater_ids.front());
}

std::vector<std::string> RelevanceManifest::relevant_set(const std::string& query_id) const {
  const auto* q = find(query_id);
  require(q != nullptr, ErrorKind::kProtocol, "query '" + query_id + "' not in manifest");
  require(q->role == Role::kQuery, ErrorKind::kProtocol, "'" + query_id + "' is not a query");
  std::vector<std::string> out;
  for (const auto& crater : q->crater_ids) {
    const auto it = gallery_by_crater_.find(crater);
    if (it != gallery_by_crater_.end()) out.insert(out.end(), it->second.begin(), it->second.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

RelevanceManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::kValidation, "cannot open manifest " + path.string());
  RelevanceManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    try {
      const auto j = Json::parse(line);
      ManifestEntry e;
      e.image_id = j.at("image_id").get<std::string>();
      const auto role = j.at("role").get<std::string>();
      if (role == "query") {
        e.role = Role::kQuery;
      } else if (role == "gallery") {
        e.role = Role::kGallery;
      } else {
        fail(ErrorKind::kValidation, "unknown role '" + role + "'");
      }
      e.crater_ids = j.at("crater_ids").get<std::vector<std::string>>();
      if (j.contains("view")) e.view = j["view"].get<std::string>();
      if (j.contains("context")) e.context = j["context"].get<std::string>();
      manifest.add(std::move(e));
    } catch (const Json::exception& ex) {
      fail(ErrorKind::kValidation, where + ex.what());
    } catch (const Error& ex) {
      fail(ErrorKind::kValidation, where + ex.what());
    }
  }
  return manifest;
}

void save_manifest(const RelevanceManifest& manifest,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::kValidation, "cannot create " + path.string());
  for (const auto& e : manifest.entries()) {
    Json j;
    j["image_id"] = e.image_id;
    j["role"] = e.role == Role::kQuery ? "query" : "gallery";
    j["crater_ids"] = e.crater_ids;
    if (e.view) j["view"] = *e.view;
    if (e.context) j["context"] = *e.context;
    out << j.dump() << '\n';
  }
  require(out.good(), ErrorKind::kValidation, "write failed on " + path.string());
}

}  // namespace tokenrank
