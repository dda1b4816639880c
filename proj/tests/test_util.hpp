#pragma once

// Shared fixtures: scratch directories and tiny on-disk datasets.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "vtalign/dataset.hpp"

namespace testutil {

class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 gen(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() /
            ("vtalign_test_" + std::to_string(gen()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str(const std::string& rel = "") const { return (path_ / rel).string(); }

 private:
  std::filesystem::path path_;
};

inline vtalign::SyntheticSpec tiny_spec(std::uint64_t seed = 7) {
  vtalign::SyntheticSpec spec;
  spec.videos = 6;
  spec.videos_test = 0;
  spec.captions_per_video = 2;
  spec.vocab_verbs = 4;
  spec.vocab_nouns = 4;
  spec.vocab_others = 6;
  spec.filler_tokens = 2;
  spec.c_slow = 3;
  spec.c_fast = 3;
  spec.t_slow = 2;
  spec.t_fast = 4;
  spec.height = 3;
  spec.width = 3;
  spec.noise = 0.05;
  spec.seed = seed;
  return spec;
}

// Generates a tiny dataset under dir and loads it back.
inline vtalign::Dataset tiny_dataset(const TempDir& dir, std::uint64_t seed = 7) {
  generate_synthetic(tiny_spec(seed), dir.str());
  return vtalign::Dataset::load(dir.str("manifest_train.tsv"));
}

inline std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace testutil
