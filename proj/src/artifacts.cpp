#include "perpcs/artifacts.hpp"

#include <json.hpp>

#include "perpcs/binary_io.hpp"

namespace perpcs {

namespace {

constexpr const char* kManifestName = "manifest.json";

}  // namespace

ArtifactManifest::ArtifactManifest(std::filesystem::path root) : root_(std::move(root)) {
  const auto path = root_ / kManifestName;
  if (!std::filesystem::exists(path)) return;
  try {
    const auto j = nlohmann::json::parse(read_file_text(path));
    for (const auto& [name, r] : j.at("artifacts").items())
      records_[name] = {r.at("path"), r.at("kind"), r.at("sha256"), r.at("command"), r.at("config_hash")};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
}

const ArtifactRecord* ArtifactManifest::find(const std::string& name) const {
  auto it = records_.find(name);
  return it == records_.end() ? nullptr : &it->second;
}

bool ArtifactManifest::fresh(const std::string& name, const std::string& key) const {
  const auto* r = find(name);
  if (!r || r->config_hash != key) return false;
  const auto path = root_ / r->path;
  return std::filesystem::exists(path) && file_sha256_hex(path) == r->sha256;
}

void ArtifactManifest::record(const std::string& name, const std::string& relpath, const std::string& kind,
                              const std::string& command, const std::string& key) {
  records_[name] = {relpath, kind, file_sha256_hex(root_ / relpath), command, key};
}

std::filesystem::path ArtifactManifest::verify(const std::string& name) const {
  const auto* r = find(name);
  if (!r) throw MissingPrerequisite("artifact '" + name + "' has not been produced in " + root_.string());
  const auto path = root_ / r->path;
  if (!std::filesystem::exists(path)) throw MissingPrerequisite("artifact file missing: " + path.string());
  if (file_sha256_hex(path) != r->sha256)
    throw HashMismatchError("artifact '" + name + "' (" + path.string() + ") does not match its recorded hash");
  return path;
}

void ArtifactManifest::save() const {
  nlohmann::ordered_json arts = nlohmann::ordered_json::object();
  for (const auto& [name, r] : records_)
    arts[name] = {{"path", r.path}, {"kind", r.kind}, {"sha256", r.sha256}, {"command", r.command},
                  {"config_hash", r.config_hash}};
  nlohmann::ordered_json j{{"version", 1}, {"artifacts", arts}};
  write_file_text(root_ / kManifestName, j.dump(1) + "\n");
}

}  // namespace perpcs
