#pragma once

// Cross-modal ranking over joint-space embeddings, reranking with pooled
// motion/visual similarities, and the retrieval metrics.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/encoders.hpp"
#include "vtalign/model.hpp"
#include "vtalign/tensor.hpp"
#include "vtalign/video_heads.hpp"

namespace vtalign {

enum class Direction { caption_to_video, video_to_caption };

struct RankedQuery {
  std::vector<std::size_t> candidate_order;  // permutation of all candidate ids
  std::vector<double> scores;                // aligned, non-increasing
};

struct RankingTable {
  Direction direction = Direction::caption_to_video;
  std::vector<RankedQuery> queries;
};

namespace detail {

inline double cosine_values(const std::vector<double>& a, const std::vector<double>& b,
                            double eps = 1e-12) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
}

// descending score, ties by ascending candidate id
inline RankedQuery sort_candidates(std::vector<double> scores) {
  RankedQuery q;
  q.candidate_order.resize(scores.size());
  std::iota(q.candidate_order.begin(), q.candidate_order.end(), 0);
  std::sort(q.candidate_order.begin(), q.candidate_order.end(),
            [&](std::size_t a, std::size_t b) {
              if (scores[a] != scores[b]) return scores[a] > scores[b];
              return a < b;
            });
  q.scores.reserve(scores.size());
  for (auto c : q.candidate_order) q.scores.push_back(scores[c]);
  return q;
}

}  // namespace detail

// Full pairwise cosine scores between joint video and caption embeddings.
inline RankingTable rank(const std::vector<Tensor>& video_joint,
                         const std::vector<Tensor>& caption_joint, Direction direction) {
  if (video_joint.empty() || caption_joint.empty()) {
    throw std::invalid_argument("rank: empty embedding set");
  }
  const std::size_t dim = video_joint.front().size();
  for (const auto& t : video_joint) {
    if (t.size() != dim) throw std::invalid_argument("rank: video embedding width mismatch");
  }
  for (const auto& t : caption_joint) {
    if (t.size() != dim) throw std::invalid_argument("rank: caption embedding width mismatch");
  }
  const bool c2v = direction == Direction::caption_to_video;
  const auto& queries = c2v ? caption_joint : video_joint;
  const auto& candidates = c2v ? video_joint : caption_joint;
  RankingTable table;
  table.direction = direction;
  for (const auto& q : queries) {
    std::vector<double> scores(candidates.size());
    for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
      scores[ci] = detail::cosine_values(q.values(), candidates[ci].values());
    }
    table.queries.push_back(detail::sort_candidates(std::move(scores)));
  }
  return table;
}

// Per-caption token summaries for reranking: the L2-normalized mean of the
// caption's same-POS token embeddings; undefined when the POS is absent.
struct CaptionTokenSummary {
  Tensor mot;  // from verb tokens
  Tensor vis;  // from noun tokens
};

// final score = s_joi + s(pooled_mot, caption_mot) + s(pooled_vis, caption_vis);
// a missing POS contributes 0. Candidate lists are re-sorted with the same
// tie rule.
inline RankingTable rerank(const RankingTable& base,
                           const std::vector<PooledEmbedding>& video_mot,
                           const std::vector<PooledEmbedding>& video_vis,
                           const std::vector<CaptionTokenSummary>& captions) {
  const bool c2v = base.direction == Direction::caption_to_video;
  RankingTable out;
  out.direction = base.direction;
  for (std::size_t qi = 0; qi < base.queries.size(); ++qi) {
    const RankedQuery& bq = base.queries[qi];
    std::vector<double> scores(bq.candidate_order.size());
    for (std::size_t k = 0; k < bq.candidate_order.size(); ++k) {
      const std::size_t ci = bq.candidate_order[k];
      const std::size_t video_idx = c2v ? ci : qi;
      const std::size_t caption_idx = c2v ? qi : ci;
      double s = bq.scores[k];
      const CaptionTokenSummary& cts = captions.at(caption_idx);
      if (cts.mot.defined()) {
        s += detail::cosine_values(video_mot.at(video_idx).vec.values(), cts.mot.values());
      }
      if (cts.vis.defined()) {
        s += detail::cosine_values(video_vis.at(video_idx).vec.values(), cts.vis.values());
      }
      scores[ci] = s;
    }
    out.queries.push_back(detail::sort_candidates(std::move(scores)));
  }
  return out;
}

enum class MedianRule { lower, midpoint };

struct MetricsReport {
  double r1 = 0, r5 = 0, r10 = 0;  // fractions
  double med_r = 0;                // median rank of the best positive
};

inline MetricsReport metrics(const RankingTable& table,
                             const std::vector<std::vector<std::size_t>>& positives,
                             MedianRule rule = MedianRule::lower) {
  if (positives.size() != table.queries.size()) {
    throw std::invalid_argument("metrics: positives list does not match query count");
  }
  std::vector<std::size_t> best_ranks;
  std::size_t r1 = 0, r5 = 0, r10 = 0;
  for (std::size_t qi = 0; qi < table.queries.size(); ++qi) {
    const auto& pos = positives[qi];
    if (pos.empty()) {
      throw std::invalid_argument("metrics: query " + std::to_string(qi) + " has no positives");
    }
    const auto& order = table.queries[qi].candidate_order;
    std::size_t best = 0;
    bool found = false;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (std::find(pos.begin(), pos.end(), order[k]) != pos.end()) {
        best = k + 1;
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::invalid_argument("metrics: query " + std::to_string(qi) +
                                  " lists positives absent from the candidate set");
    }
    best_ranks.push_back(best);
    if (best <= 1) ++r1;
    if (best <= 5) ++r5;
    if (best <= 10) ++r10;
  }
  std::sort(best_ranks.begin(), best_ranks.end());
  const std::size_t n = best_ranks.size();
  MetricsReport rep;
  rep.r1 = static_cast<double>(r1) / static_cast<double>(n);
  rep.r5 = static_cast<double>(r5) / static_cast<double>(n);
  rep.r10 = static_cast<double>(r10) / static_cast<double>(n);
  if (n % 2 == 1) {
    rep.med_r = static_cast<double>(best_ranks[n / 2]);
  } else if (rule == MedianRule::lower) {
    rep.med_r = static_cast<double>(best_ranks[(n - 1) / 2]);
  } else {
    rep.med_r =
        (static_cast<double>(best_ranks[n / 2 - 1]) + static_cast<double>(best_ranks[n / 2])) /
        2.0;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Whole-dataset embedding extraction (inference; results are detached)
// ---------------------------------------------------------------------------

struct VideoEmbeddings {
  std::vector<Tensor> joint;
  std::vector<PooledEmbedding> mot;
  std::vector<PooledEmbedding> vis;
};

struct CaptionEmbeddings {
  std::vector<Tensor> joint;
  std::vector<CaptionTokenSummary> tokens;
  std::vector<std::string> video_ids;
};

inline VideoEmbeddings embed_videos(const Dataset& ds, Model& model) {
  VideoEmbeddings out;
  for (std::size_t vi = 0; vi < ds.videos.size(); ++vi) {
    ProjectedVolume vm = project(ds.fast_volume(vi), model.proj_mot);
    ProjectedVolume vv = project(ds.slow_volume(vi), model.proj_vis);
    out.joint.push_back(detach(fuse_joint(vm, vv, model.joint)));
    PooledEmbedding pm = pool(vm);
    PooledEmbedding pv = pool(vv);
    out.mot.push_back({pm.space, detach(pm.vec)});
    out.vis.push_back({pv.space, detach(pv.vec)});
  }
  return out;
}

inline CaptionTokenSummary summarize_caption_tokens(const CaptionRecord& cap, Model& model) {
  CaptionTokenSummary out;
  auto mean_embedding = [&](Pos pos) -> Tensor {
    const auto ids = cap.ids_with_pos(pos);
    if (ids.empty()) return Tensor();
    std::vector<Tensor> embs;
    for (auto id : ids) embs.push_back(encode_token(id, pos, model.tok, model.embedding).vec);
    Tensor acc = embs.front();
    for (std::size_t i = 1; i < embs.size(); ++i) acc = add(acc, embs[i]);
    return detach(l2_normalize(scale(acc, 1.0 / static_cast<double>(embs.size())), 0));
  };
  out.mot = mean_embedding(Pos::verb);
  out.vis = mean_embedding(Pos::noun);
  return out;
}

inline CaptionEmbeddings embed_captions(const Dataset& ds, Model& model) {
  CaptionEmbeddings out;
  for (const auto& cap : ds.captions) {
    out.joint.push_back(detach(encode_caption(cap.token_ids, model.cap, model.embedding).vec));
    out.tokens.push_back(summarize_caption_tokens(cap, model));
    out.video_ids.push_back(cap.video_id);
  }
  return out;
}

// Ground-truth positive sets for both directions.
inline std::vector<std::vector<std::size_t>> caption_to_video_positives(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& cap : ds.captions) out.push_back({ds.video_index(cap.video_id)});
  return out;
}

inline std::vector<std::vector<std::size_t>> video_to_caption_positives(const Dataset& ds) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& v : ds.videos) out.push_back(v.caption_indices);
  return out;
}

}  // namespace vtalign
