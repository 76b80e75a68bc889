#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace perpcs {

// Process exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitMissingPrerequisite = 3,
  kExitHashMismatch = 4,
  kExitTrainingFailure = 5,
};

class MissingPrerequisite : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArtifactRecord {
  std::string path;  // relative to the run directory
  std::string kind;
  std::string sha256;
  std::string command;
  std::string config_hash;  // key of the producing stage's inputs
};

// manifest.json in a run directory: every artifact with its content hash and
// the key of the inputs that produced it.
class ArtifactManifest {
 public:
  explicit ArtifactManifest(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  const ArtifactRecord* find(const std::string& name) const;
  const std::map<std::string, ArtifactRecord>& records() const { return records_; }

  // True when the artifact exists, its bytes match the recorded hash and it
  // was produced under `key`.
  bool fresh(const std::string& name, const std::string& key) const;
  // Hashes the file now on disk and records it.
  void record(const std::string& name, const std::string& relpath, const std::string& kind, const std::string& command,
              const std::string& key);
  // Absolute path of a recorded artifact after checking its bytes.
  // Throws MissingPrerequisite or HashMismatchError.
  std::filesystem::path verify(const std::string& name) const;
  void save() const;

 private:
  std::filesystem::path root_;
  std::map<std::string, ArtifactRecord> records_;
};

}  // namespace perpcs
