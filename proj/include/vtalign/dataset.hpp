#pragma once

// Dataset manifest, the synthetic planted-correspondence generator, and
// epoch/batch assembly.
//
// Manifest: one tab-separated line per caption,
//   video_id  caption_id  slow_path  fast_path  tokens  [mask_fast  mask_slow]
// where tokens is a space-separated list of text/POS items. Paths are
// resolved relative to the manifest's directory. The two mask columns appear
// together or not at all (synthetic data only).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vtalign/rng.hpp"
#include "vtalign/tensor.hpp"
#include "vtalign/tensor_io.hpp"
#include "vtalign/vocab.hpp"

namespace vtalign {

enum class Branch { slow, fast };

struct FeatureVolume {
  Branch branch = Branch::slow;
  Tensor data;  // [C, T, H, W]
  std::string video_id;

  std::size_t channels() const { return data.shape()[0]; }
  std::size_t frames() const { return data.shape()[1]; }
  std::size_t height() const { return data.shape()[2]; }
  std::size_t width() const { return data.shape()[3]; }
};

struct CaptionRecord {
  std::string video_id;
  std::string caption_id;
  std::vector<std::size_t> token_ids;  // all tokens, in order
  std::vector<Pos> token_pos;

  std::vector<std::size_t> ids_with_pos(Pos p) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
      if (token_pos[i] == p) out.push_back(token_ids[i]);
    }
    return out;
  }
};

struct VideoEntry {
  std::string video_id;
  std::string slow_path, fast_path;            // resolved absolute-ish paths
  std::string mask_fast_path, mask_slow_path;  // empty when absent
  std::vector<std::size_t> caption_indices;
  std::size_t first_line = 0;  // manifest line that introduced the video
};

class Dataset {
 public:
  Vocabulary vocab;
  std::vector<CaptionRecord> captions;
  std::vector<VideoEntry> videos;
  std::string manifest_path;

  static Dataset load(const std::string& manifest_path, const std::string& vocab_path = "") {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.manifest_path = manifest_path;
    const fs::path mpath(manifest_path);
    const fs::path root = mpath.parent_path();
    const std::string vpath =
        vocab_path.empty() ? (root / "vocab.tsv").string() : vocab_path;
    ds.vocab = Vocabulary::load(vpath);

    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error(manifest_path + ": cannot open");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> cols;
      {
        std::istringstream is(line);
        std::string col;
        while (std::getline(is, col, '\t')) cols.push_back(col);
      }
      const std::string where = manifest_path + ":" + std::to_string(lineno);
      if (cols.size() != 5 && cols.size() != 7) {
        throw std::runtime_error(where + ": expected 5 or 7 tab-separated columns, got " +
                                 std::to_string(cols.size()));
      }
      CaptionRecord rec;
      rec.video_id = cols[0];
      rec.caption_id = cols[1];
      std::istringstream toks(cols[4]);
      std::string item;
      while (toks >> item) {
        const auto slash = item.rfind('/');
        if (slash == std::string::npos) {
          throw std::runtime_error(where + ": token item '" + item + "' is not text/POS");
        }
        const std::string text = item.substr(0, slash);
        const auto pos = parse_pos(item.substr(slash + 1));
        if (!pos) {
          throw std::runtime_error(where + ": unknown pos in '" + item + "'");
        }
        const auto id = ds.vocab.lookup(text);
        if (!id) {
          throw std::runtime_error(where + ": token '" + text + "' not in vocabulary");
        }
        rec.token_ids.push_back(*id);
        rec.token_pos.push_back(*pos);
      }
      if (rec.token_ids.empty()) {
        throw std::runtime_error(where + ": caption has no tokens");
      }

      const std::string slow = (root / cols[2]).string();
      const std::string fast = (root / cols[3]).string();
      std::string mask_fast, mask_slow;
      if (cols.size() == 7) {
        mask_fast = (root / cols[5]).string();
        mask_slow = (root / cols[6]).string();
      }

      auto it = ds.video_index_.find(rec.video_id);
      std::size_t vidx;
      if (it == ds.video_index_.end()) {
        vidx = ds.videos.size();
        ds.video_index_[rec.video_id] = vidx;
        ds.videos.push_back({rec.video_id, slow, fast, mask_fast, mask_slow, {}, lineno});
      } else {
        vidx = it->second;
        if (ds.videos[vidx].slow_path != slow || ds.videos[vidx].fast_path != fast) {
          throw std::runtime_error(where + ": video '" + rec.video_id +
                                   "' references different feature files than an earlier line");
        }
      }
      ds.videos[vidx].caption_indices.push_back(ds.captions.size());
      ds.captions.push_back(std::move(rec));
    }
    if (ds.videos.empty()) throw std::runtime_error(manifest_path + ": no records");
    return ds;
  }

  std::size_t video_index(const std::string& video_id) const {
    auto it = video_index_.find(video_id);
    if (it == video_index_.end()) {
      throw std::invalid_argument("dataset: unknown video '" + video_id + "'");
    }
    return it->second;
  }

  FeatureVolume slow_volume(std::size_t vidx) const {
    return {Branch::slow, cached(videos.at(vidx).slow_path), videos[vidx].video_id};
  }
  FeatureVolume fast_volume(std::size_t vidx) const {
    return {Branch::fast, cached(videos.at(vidx).fast_path), videos[vidx].video_id};
  }
  Tensor mask_fast(std::size_t vidx) const { return cached(videos.at(vidx).mask_fast_path); }
  Tensor mask_slow(std::size_t vidx) const { return cached(videos.at(vidx).mask_slow_path); }
  bool has_masks(std::size_t vidx) const { return !videos.at(vidx).mask_fast_path.empty(); }

  // Tokens of the given POS appearing in ANY caption of the video.
  std::vector<std::size_t> used_tokens(std::size_t vidx, Pos p) const {
    std::unordered_set<std::size_t> set;
    for (auto ci : videos.at(vidx).caption_indices) {
      for (auto id : captions[ci].ids_with_pos(p)) set.insert(id);
    }
    std::vector<std::size_t> out(set.begin(), set.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  // Full structural validation; rethrows parse-level problems and checks the
  // referenced files. Errors name the manifest line that introduced the
  // offending record. Returns the number of checked feature files.
  std::size_t validate() const {
    std::size_t checked = 0;
    for (const auto& v : videos) {
      const std::string where =
          manifest_path + ":" + std::to_string(v.first_line) + ": video '" + v.video_id + "'";
      Tensor slow, fast;
      try {
        slow = read_tensor(v.slow_path);
        fast = read_tensor(v.fast_path);
      } catch (const std::exception& e) {
        throw std::runtime_error(where + ": " + e.what());
      }
      ++checked;
      if (slow.rank() != 4 || fast.rank() != 4) {
        throw std::runtime_error(where + ": feature volumes must be rank 4");
      }
      if (slow.shape()[2] != fast.shape()[2] || slow.shape()[3] != fast.shape()[3]) {
        throw std::runtime_error(where + ": slow/fast spatial extents disagree");
      }
      if (!v.mask_fast_path.empty()) {
        const Tensor mf = read_tensor(v.mask_fast_path);
        const Tensor ms = read_tensor(v.mask_slow_path);
        if (mf.shape() != Shape{fast.shape()[1], fast.shape()[2], fast.shape()[3]} ||
            ms.shape() != Shape{slow.shape()[1], slow.shape()[2], slow.shape()[3]}) {
          throw std::runtime_error(where + ": mask dims do not match volume");
        }
      }
      if (v.caption_indices.empty()) {
        throw std::runtime_error(where + ": no captions");
      }
    }
    return checked;
  }

 private:
  std::unordered_map<std::string, std::size_t> video_index_;
  mutable std::unordered_map<std::string, Tensor> cache_;

  const Tensor& cached(const std::string& path) const {
    if (path.empty()) throw std::invalid_argument("dataset: video has no mask files");
    auto it = cache_.find(path);
    if (it == cache_.end()) it = cache_.emplace(path, read_tensor(path)).first;
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

struct BatchItem {
  std::size_t video_idx;
  std::size_t caption_idx;
};

struct Batch {
  std::vector<BatchItem> items;
  std::size_t size() const { return items.size(); }
};

// One epoch: shuffled video order, one caption sampled per video, consecutive
// chunks of batch_size. A trailing chunk with at least two videos is kept;
// a singleton is dropped.
inline std::vector<Batch> assemble_batches(const Dataset& ds, std::size_t batch_size, Rng& rng) {
  if (batch_size < 2) {
    throw std::invalid_argument("assemble_batches: batch size must be >= 2, got " +
                                std::to_string(batch_size));
  }
  std::vector<std::size_t> order(ds.videos.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;  // dropped singleton
    Batch b;
    for (std::size_t i = start; i < end; ++i) {
      const auto& caps = ds.videos[order[i]].caption_indices;
      const std::size_t pick = caps[rng.uniform_int(caps.size())];
      b.items.push_back({order[i], pick});
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// Every in-batch caption belonging to a different video serves as a negative.
inline std::vector<std::size_t> in_batch_negative_captions(const Batch& batch, const Dataset& ds,
                                                           const std::string& video_id) {
  std::size_t distinct = 0;
  std::unordered_set<std::string> seen;
  for (const auto& item : batch.items) {
    if (seen.insert(ds.videos[item.video_idx].video_id).second) ++distinct;
  }
  if (distinct < 2) {
    throw std::invalid_argument("negative captions: batch contains a single video");
  }
  std::vector<std::size_t> out;
  for (const auto& item : batch.items) {
    if (ds.videos[item.video_idx].video_id != video_id) out.push_back(item.caption_idx);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic planted-correspondence data
// ---------------------------------------------------------------------------

// Every video gets one verb and one noun. A contiguous axis-aligned blob in
// the fast volume carries the verb's pattern vector, one in the slow volume
// carries the noun's; everything else is zero-mean noise. Captions list
// filler tokens, then the noun, then the verb.
struct SyntheticSpec {
  std::size_t videos = 20;
  std::size_t videos_test = 0;  // last N videos go to manifest_test.tsv
  std::size_t captions_per_video = 2;
  std::size_t vocab_verbs = 5;
  std::size_t vocab_nouns = 5;
  std::size_t vocab_others = 10;
  std::size_t filler_tokens = 2;
  std::size_t c_slow = 4, c_fast = 4;
  std::size_t t_slow = 2, t_fast = 4;
  std::size_t height = 3, width = 3;
  double blob_t = 0.5, blob_h = 0.4, blob_w = 0.4;
  double noise = 0.1;
  std::uint64_t seed = 1;

  void check() const {
    auto frac_ok = [](double f) { return f > 0.0 && f <= 1.0; };
    if (!frac_ok(blob_t) || !frac_ok(blob_h) || !frac_ok(blob_w)) {
      throw std::invalid_argument("synthetic spec: blob fractions must lie in (0,1]");
    }
    if (videos < 1 || captions_per_video < 1 || vocab_verbs < 1 || vocab_nouns < 1 ||
        vocab_others < filler_tokens) {
      throw std::invalid_argument("synthetic spec: counts out of range");
    }
    if (videos_test >= videos) {
      throw std::invalid_argument("synthetic spec: videos_test must be < videos");
    }
    if (c_slow < 1 || c_fast < 1 || t_slow < 1 || t_fast < 1 || height < 1 || width < 1) {
      throw std::invalid_argument("synthetic spec: volume dims must be positive");
    }
  }

  static SyntheticSpec load(const std::string& path);
  void save(const std::string& path) const;
};

namespace detail {

inline std::size_t blob_extent(double frac, std::size_t dim) {
  const auto e = static_cast<std::size_t>(std::llround(frac * static_cast<double>(dim)));
  return std::max<std::size_t>(1, std::min(e, dim));
}

// Mutually distinct unit pattern vectors: re-draw while any pair has
// |cosine| >= 0.99.
inline std::vector<std::vector<double>> draw_patterns(std::size_t count, std::size_t dim,
                                                      Rng& rng) {
  std::vector<std::vector<double>> out;
  out.reserve(count);
  while (out.size() < count) {
    std::vector<double> v(dim);
    double ss = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      ss += x * x;
    }
    const double n = std::sqrt(ss);
    if (n < 1e-9) continue;
    for (auto& x : v) x /= n;
    bool ok = true;
    for (const auto& u : out) {
      double dot = 0.0;
      for (std::size_t i = 0; i < dim; ++i) dot += u[i] * v[i];
      if (std::abs(dot) >= 0.99) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(std::move(v));
  }
  return out;
}

struct PlantedBlob {
  std::size_t t0, h0, w0, et, eh, ew;
};

inline PlantedBlob place_blob(const SyntheticSpec& spec, std::size_t t_dim, Rng& rng) {
  PlantedBlob b;
  b.et = blob_extent(spec.blob_t, t_dim);
  b.eh = blob_extent(spec.blob_h, spec.height);
  b.ew = blob_extent(spec.blob_w, spec.width);
  b.t0 = rng.uniform_int(t_dim - b.et + 1);
  b.h0 = rng.uniform_int(spec.height - b.eh + 1);
  b.w0 = rng.uniform_int(spec.width - b.ew + 1);
  return b;
}

}  // namespace detail

inline void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  spec.check();
  fs::create_directories(fs::path(out_dir) / "features");
  fs::create_directories(fs::path(out_dir) / "masks");

  Rng rng(spec.seed);

  // vocabulary: verbs, then nouns, then fillers; ids dense in that order
  Vocabulary vocab;
  char buf[32];
  for (std::size_t i = 0; i < spec.vocab_verbs; ++i) {
    std::snprintf(buf, sizeof buf, "verb%03zu", i);
    vocab.add(buf, Pos::verb);
  }
  for (std::size_t i = 0; i < spec.vocab_nouns; ++i) {
    std::snprintf(buf, sizeof buf, "noun%03zu", i);
    vocab.add(buf, Pos::noun);
  }
  for (std::size_t i = 0; i < spec.vocab_others; ++i) {
    std::snprintf(buf, sizeof buf, "filler%03zu", i);
    vocab.add(buf, Pos::other);
  }
  vocab.save((fs::path(out_dir) / "vocab.tsv").string());

  const auto verb_patterns = detail::draw_patterns(spec.vocab_verbs, spec.c_fast, rng);
  const auto noun_patterns = detail::draw_patterns(spec.vocab_nouns, spec.c_slow, rng);

  auto fill_volume = [&](std::size_t c_dim, std::size_t t_dim,
                         const std::vector<double>& pattern,
                         const detail::PlantedBlob& blob) {
    const std::size_t hw = spec.height * spec.width;
    std::vector<double> data(c_dim * t_dim * hw);
    for (auto& v : data) v = spec.noise * rng.normal();
    for (std::size_t c = 0; c < c_dim; ++c) {
      for (std::size_t t = blob.t0; t < blob.t0 + blob.et; ++t) {
        for (std::size_t h = blob.h0; h < blob.h0 + blob.eh; ++h) {
          for (std::size_t w = blob.w0; w < blob.w0 + blob.ew; ++w) {
            data[((c * t_dim + t) * spec.height + h) * spec.width + w] += pattern[c];
          }
        }
      }
    }
    return Tensor::from_data({c_dim, t_dim, spec.height, spec.width}, std::move(data));
  };

  auto mask_volume = [&](std::size_t t_dim, const detail::PlantedBlob& blob) {
    std::vector<double> data(t_dim * spec.height * spec.width, 0.0);
    for (std::size_t t = blob.t0; t < blob.t0 + blob.et; ++t) {
      for (std::size_t h = blob.h0; h < blob.h0 + blob.eh; ++h) {
        for (std::size_t w = blob.w0; w < blob.w0 + blob.ew; ++w) {
          data[(t * spec.height + h) * spec.width + w] = 1.0;
        }
      }
    }
    return Tensor::from_data({t_dim, spec.height, spec.width}, std::move(data));
  };

  std::ostringstream train_manifest, test_manifest;
  const std::size_t first_test = spec.videos - spec.videos_test;

  for (std::size_t vi = 0; vi < spec.videos; ++vi) {
    std::snprintf(buf, sizeof buf, "v%04zu", vi);
    const std::string vid = buf;
    const std::size_t verb_id = rng.uniform_int(spec.vocab_verbs);
    const std::size_t noun_id = spec.vocab_verbs + rng.uniform_int(spec.vocab_nouns);

    const auto fast_blob = detail::place_blob(spec, spec.t_fast, rng);
    const auto slow_blob = detail::place_blob(spec, spec.t_slow, rng);
    const Tensor fast =
        fill_volume(spec.c_fast, spec.t_fast, verb_patterns[verb_id], fast_blob);
    const Tensor slow = fill_volume(spec.c_slow, spec.t_slow,
                                    noun_patterns[noun_id - spec.vocab_verbs], slow_blob);

    const std::string slow_rel = "features/" + vid + "_slow.vten";
    const std::string fast_rel = "features/" + vid + "_fast.vten";
    const std::string mask_fast_rel = "masks/" + vid + "_fast.vten";
    const std::string mask_slow_rel = "masks/" + vid + "_slow.vten";
    write_tensor((fs::path(out_dir) / slow_rel).string(), slow);
    write_tensor((fs::path(out_dir) / fast_rel).string(), fast);
    write_tensor((fs::path(out_dir) / mask_fast_rel).string(),
                 mask_volume(spec.t_fast, fast_blob));
    write_tensor((fs::path(out_dir) / mask_slow_rel).string(),
                 mask_volume(spec.t_slow, slow_blob));

    std::ostringstream& manifest = (vi >= first_test) ? test_manifest : train_manifest;
    for (std::size_t ci = 0; ci < spec.captions_per_video; ++ci) {
      std::ostringstream tokens;
      for (std::size_t k = 0; k < spec.filler_tokens; ++k) {
        const std::size_t fid = spec.vocab_verbs + spec.vocab_nouns +
                                rng.uniform_int(spec.vocab_others);
        tokens << vocab.token(fid) << "/OTHER ";
      }
      tokens << vocab.token(noun_id) << "/NOUN " << vocab.token(verb_id) << "/VERB";
      manifest << vid << '\t' << vid << "_c" << ci << '\t' << slow_rel << '\t' << fast_rel
               << '\t' << tokens.str() << '\t' << mask_fast_rel << '\t' << mask_slow_rel
               << '\n';
    }
  }

  auto write_text = [](const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error(path + ": cannot open for writing");
    f << text;
  };
  write_text((fs::path(out_dir) / "manifest_train.tsv").string(), train_manifest.str());
  if (spec.videos_test > 0) {
    write_text((fs::path(out_dir) / "manifest_test.tsv").string(), test_manifest.str());
  }
  spec.save((fs::path(out_dir) / "synthetic_spec.txt").string());
}

// key=value serialization of the generator spec (same format the CLI reads).
inline void SyntheticSpec::save(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  char num[64];
  auto put_f = [&](const char* key, double v) {
    std::snprintf(num, sizeof num, "%.17g", v);
    f << key << '=' << num << '\n';
  };
  f << "videos=" << videos << '\n';
  f << "videos_test=" << videos_test << '\n';
  f << "captions_per_video=" << captions_per_video << '\n';
  f << "vocab_verbs=" << vocab_verbs << '\n';
  f << "vocab_nouns=" << vocab_nouns << '\n';
  f << "vocab_others=" << vocab_others << '\n';
  f << "filler_tokens=" << filler_tokens << '\n';
  f << "c_slow=" << c_slow << '\n';
  f << "c_fast=" << c_fast << '\n';
  f << "t_slow=" << t_slow << '\n';
  f << "t_fast=" << t_fast << '\n';
  f << "height=" << height << '\n';
  f << "width=" << width << '\n';
  put_f("blob_t", blob_t);
  put_f("blob_h", blob_h);
  put_f("blob_w", blob_w);
  put_f("noise", noise);
  f << "seed=" << seed << '\n';
}

inline SyntheticSpec SyntheticSpec::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(path + ": cannot open");
  SyntheticSpec spec;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto as_u = [&]() { return std::stoull(val); };
    auto as_f = [&]() { return std::stod(val); };
    if (key == "videos") spec.videos = as_u();
    else if (key == "videos_test") spec.videos_test = as_u();
    else if (key == "captions_per_video") spec.captions_per_video = as_u();
    else if (key == "vocab_verbs") spec.vocab_verbs = as_u();
    else if (key == "vocab_nouns") spec.vocab_nouns = as_u();
    else if (key == "vocab_others") spec.vocab_others = as_u();
    else if (key == "filler_tokens") spec.filler_tokens = as_u();
    else if (key == "c_slow") spec.c_slow = as_u();
    else if (key == "c_fast") spec.c_fast = as_u();
    else if (key == "t_slow") spec.t_slow = as_u();
    else if (key == "t_fast") spec.t_fast = as_u();
    else if (key == "height") spec.height = as_u();
    else if (key == "width") spec.width = as_u();
    else if (key == "blob_t") spec.blob_t = as_f();
    else if (key == "blob_h") spec.blob_h = as_f();
    else if (key == "blob_w") spec.blob_w = as_f();
    else if (key == "noise") spec.noise = as_f();
    else if (key == "seed") spec.seed = as_u();
    else {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unknown key '" + key +
                               "'");
    }
  }
  spec.check();
  return spec;
}

}  // namespace vtalign
