#pragma once

// Loss terms: voxel relevance maps, the relevance-weighted unidirectional
// alignment loss, the bidirectional in-batch joint triplet loss, and their
// combination. Every term is a rank-0 tensor so gradients flow end to end,
// including through the relevance map.

#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/encoders.hpp"
#include "vtalign/model.hpp"
#include "vtalign/tensor.hpp"
#include "vtalign/video_heads.hpp"

namespace vtalign {

struct RelevanceMap {
  Space space = Space::motion;
  long token_id = -1;
  Tensor data;  // [T, H, W], nonnegative, sums to 1
  double beta_used = 0.0;
};

struct LossBreakdown {
  Tensor l_joint, l_mot, l_vis, l_total;  // rank-0
  double lambda_m = 0.0, lambda_s = 0.0, alpha = 0.0;
  bool no_alignment_tokens = false;
};

namespace detail {

inline Tensor sum_scalars(const std::vector<Tensor>& terms) {
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

inline Tensor mean_scalars(const std::vector<Tensor>& terms) {
  return scale(sum_scalars(terms), 1.0 / static_cast<double>(terms.size()));
}

}  // namespace detail

// Per-voxel cosine scores against the positive token embedding, softmaxed
// over all positions with temperature beta.
inline RelevanceMap relevance_map(const ProjectedVolume& v, const TextEmbedding& c_pos,
                                  double beta, long token_id = -1) {
  if (v.space != c_pos.space) {
    throw std::invalid_argument(std::string("relevance_map: volume is ") + space_name(v.space) +
                                "-space but token embedding is " + space_name(c_pos.space));
  }
  Tensor scores = cosine_rows(v.data, c_pos.vec);
  Tensor map = softmax_positions(scores, beta);
  return {v.space, token_id, reshape(map, {v.t, v.h, v.w}), beta};
}

// L = sum_ijk m_ijk * max(0, alpha - s(v_ijk, c+) + s(v_ijk, c-)).
// Only the caption side carries a negative; the map weights are the training
// relevance map and are not detached.
inline Tensor alignment_loss(const ProjectedVolume& v, const TextEmbedding& c_pos,
                             const TextEmbedding& c_neg, double beta, double alpha) {
  if (v.space != c_pos.space || v.space != c_neg.space) {
    throw std::invalid_argument("alignment_loss: spaces of volume and embeddings disagree");
  }
  if (alpha < 0.0) throw std::invalid_argument("alignment_loss: alpha must be >= 0");
  Tensor s_pos = cosine_rows(v.data, c_pos.vec);
  Tensor s_neg = cosine_rows(v.data, c_neg.vec);
  Tensor map = softmax_positions(s_pos, beta);
  Tensor hinge = relu(add_const(sub(s_neg, s_pos), alpha));
  return reduce_sum(mul(map, hinge));
}

struct JointPair {
  Tensor video;    // v_joi [C]
  Tensor caption;  // c_joi [C]
  std::string video_id;
};

// Both hinge directions over all in-batch negatives from other videos; each
// direction is averaged over (positive pair, negative) combinations, then the
// directions are summed.
inline Tensor joint_loss(std::span<const JointPair> batch, double alpha) {
  std::unordered_set<std::string> distinct;
  for (const auto& p : batch) distinct.insert(p.video_id);
  if (distinct.size() < 2) {
    throw std::invalid_argument("joint_loss: batch must contain >= 2 distinct videos, got " +
                                std::to_string(distinct.size()));
  }
  std::vector<Tensor> pos(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    pos[i] = cosine_similarity(batch[i].video, batch[i].caption);
  }
  std::vector<Tensor> cap_dir, vid_dir;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < batch.size(); ++j) {
      if (batch[j].video_id == batch[i].video_id) continue;
      Tensor neg_c = cosine_similarity(batch[i].video, batch[j].caption);
      Tensor neg_v = cosine_similarity(batch[j].video, batch[i].caption);
      cap_dir.push_back(relu(add_const(sub(neg_c, pos[i]), alpha)));
      vid_dir.push_back(relu(add_const(sub(neg_v, pos[i]), alpha)));
    }
  }
  return add(detail::mean_scalars(cap_dir), detail::mean_scalars(vid_dir));
}

struct LossHyper {
  double alpha = 0.2;
  double beta_train = 0.1;
  double lambda_m = 1.0;
  double lambda_s = 1.0;
};

// Forward pass for one batch: project both branches, fuse, encode captions,
// and combine L_joi + lambda_m * L_mot + lambda_s * L_vis. Alignment terms
// average per caption over tokens of the POS, then over captions that have
// such tokens. With lambda_m = lambda_s = 0 the result node IS the joint
// loss node.
inline LossBreakdown total_loss(const Batch& batch, const Dataset& ds, Model& model,
                                const LossHyper& hyper, Rng& neg_rng) {
  LossBreakdown out;
  out.lambda_m = hyper.lambda_m;
  out.lambda_s = hyper.lambda_s;
  out.alpha = hyper.alpha;

  std::vector<ProjectedVolume> mot_vols, vis_vols;
  std::vector<JointPair> pairs;
  for (const auto& item : batch.items) {
    const FeatureVolume fast = ds.fast_volume(item.video_idx);
    const FeatureVolume slow = ds.slow_volume(item.video_idx);
    ProjectedVolume vm = project(fast, model.proj_mot);
    ProjectedVolume vv = project(slow, model.proj_vis);
    Tensor v_joi = fuse_joint(vm, vv, model.joint);
    const CaptionRecord& cap = ds.captions[item.caption_idx];
    TextEmbedding c_joi = encode_caption(cap.token_ids, model.cap, model.embedding);
    pairs.push_back({std::move(v_joi), c_joi.vec, cap.video_id});
    mot_vols.push_back(std::move(vm));
    vis_vols.push_back(std::move(vv));
  }
  out.l_joint = joint_loss(pairs, hyper.alpha);

  auto alignment_term = [&](Pos pos, const std::vector<ProjectedVolume>& vols) -> Tensor {
    std::vector<Tensor> caption_terms;
    for (std::size_t i = 0; i < batch.items.size(); ++i) {
      const CaptionRecord& cap = ds.captions[batch.items[i].caption_idx];
      const auto ids = cap.ids_with_pos(pos);
      if (ids.empty()) continue;
      std::vector<Tensor> token_terms;
      for (const auto id : ids) {
        TextEmbedding c_pos = encode_token(id, pos, model.tok, model.embedding);
        const std::size_t neg_id =
            sample_negative_token(pos, batch.items[i].video_idx, ds, neg_rng);
        TextEmbedding c_neg =
            encode_token(neg_id, pos, model.tok, model.embedding, 1e-12, Polarity::negative);
        token_terms.push_back(
            alignment_loss(vols[i], c_pos, c_neg, hyper.beta_train, hyper.alpha));
      }
      caption_terms.push_back(detail::mean_scalars(token_terms));
    }
    if (caption_terms.empty()) return Tensor::scalar(0.0);
    return detail::mean_scalars(caption_terms);
  };

  bool any_tokens = false;
  Tensor total = out.l_joint;
  if (hyper.lambda_m != 0.0) {
    out.l_mot = alignment_term(Pos::verb, mot_vols);
    if (out.l_mot.requires_grad()) any_tokens = true;
    total = add(total, scale(out.l_mot, hyper.lambda_m));
  } else {
    out.l_mot = Tensor::scalar(0.0);
  }
  if (hyper.lambda_s != 0.0) {
    out.l_vis = alignment_term(Pos::noun, vis_vols);
    if (out.l_vis.requires_grad()) any_tokens = true;
    total = add(total, scale(out.l_vis, hyper.lambda_s));
  } else {
    out.l_vis = Tensor::scalar(0.0);
  }
  if ((hyper.lambda_m != 0.0 || hyper.lambda_s != 0.0) && !any_tokens) {
    out.no_alignment_tokens = true;
    std::cerr << "warning: batch has no verb or noun tokens; alignment terms are 0\n";
  }
  out.l_total = total;
  return out;
}

}  // namespace vtalign
