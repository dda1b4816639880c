#pragma once

// Text side of the model: the shared embedding table, the gated token encoder
// producing motion/visual-space embeddings for verbs/nouns, and the recurrent
// caption encoder producing joint-space embeddings.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/rng.hpp"
#include "vtalign/tensor.hpp"
#include "vtalign/vocab.hpp"

namespace vtalign {

enum class Space { motion, visual, joint };

inline const char* space_name(Space s) {
  switch (s) {
    case Space::motion: return "motion";
    case Space::visual: return "visual";
    case Space::joint: return "joint";
  }
  return "?";
}

enum class Polarity { positive, negative };

struct TextEmbedding {
  Space space = Space::joint;
  Tensor vec;  // [C], unit norm after the encoder's final normalization
  Polarity polarity = Polarity::positive;
};

// Verb branch (W1,b1,W2,b2) feeds the motion space, noun branch (W3,b3,W4,b4)
// the visual space. All four weight matrices are [E,C], biases [C].
struct TokenEncoderParams {
  Tensor w1, b1, w2, b2;
  Tensor w3, b3, w4, b4;
};

// Three-gate recurrence; input matrices [E,C], hidden matrices [C,C].
struct CaptionEncoderParams {
  Tensor wz, uz, bz;
  Tensor wr, ur, br;
  Tensor wn, un, bn;

  std::size_t hidden_width() const { return bz.shape()[0]; }
};

namespace detail {

inline Tensor matvec(const Tensor& v, const Tensor& m) {
  return reshape(matmul(reshape(v, {1, v.size()}), m), {m.shape()[1]});
}

}  // namespace detail

// c = l2norm( sigmoid(W_a t + b_a) * tanh(W_b t + b_b) ), t the embedding row.
inline TextEmbedding encode_token(std::size_t token_id, Pos pos, const TokenEncoderParams& p,
                                  const Tensor& table, double eps = 1e-12,
                                  Polarity polarity = Polarity::positive) {
  if (pos == Pos::other) {
    throw std::invalid_argument("encode_token: OTHER-tagged token " + std::to_string(token_id) +
                                " has no embedding space");
  }
  const Tensor t = embed_lookup(table, token_id);
  const bool verb = pos == Pos::verb;
  const Tensor& wa = verb ? p.w1 : p.w3;
  const Tensor& ba = verb ? p.b1 : p.b3;
  const Tensor& wb = verb ? p.w2 : p.w4;
  const Tensor& bb = verb ? p.b2 : p.b4;
  Tensor gate = sigmoid(affine(t, wa, ba));
  Tensor cand = vtalign::tanh(affine(t, wb, bb));
  Tensor vec = l2_normalize(mul(gate, cand), 0, eps);
  return {verb ? Space::motion : Space::visual, std::move(vec), polarity};
}

// Runs the recurrence left to right from a zero state; the final hidden
// state, L2-normalized, is the joint-space caption embedding.
inline TextEmbedding encode_caption(std::span<const std::size_t> token_ids,
                                    const CaptionEncoderParams& p, const Tensor& table,
                                    double eps = 1e-12,
                                    Polarity polarity = Polarity::positive) {
  if (token_ids.empty()) {
    throw std::invalid_argument("encode_caption: empty token sequence");
  }
  const std::size_t c = p.hidden_width();
  Tensor h = Tensor::zeros({c});
  for (const std::size_t id : token_ids) {
    const Tensor x = embed_lookup(table, id);
    const Tensor z = sigmoid(add(affine(x, p.wz, p.bz), detail::matvec(h, p.uz)));
    const Tensor r = sigmoid(add(affine(x, p.wr, p.br), detail::matvec(h, p.ur)));
    const Tensor n = vtalign::tanh(add(affine(x, p.wn, p.bn), detail::matvec(mul(r, h), p.un)));
    const Tensor keep = mul(z, h);
    const Tensor update = mul(add_const(scale(z, -1.0), 1.0), n);
    h = add(update, keep);
  }
  return {Space::joint, l2_normalize(h, 0, eps), polarity};
}

// Uniform draw from the POS-tagged vocabulary minus every token of that POS
// used by any caption of the video.
inline std::size_t sample_negative_token(Pos pos, std::size_t video_idx, const Dataset& ds,
                                         Rng& rng) {
  const auto all = ds.vocab.ids_with_pos(pos);
  const auto used = ds.used_tokens(video_idx, pos);
  std::vector<std::size_t> complement;
  complement.reserve(all.size());
  std::set_difference(all.begin(), all.end(), used.begin(), used.end(),
                      std::back_inserter(complement));
  if (complement.empty()) {
    throw std::runtime_error("sample_negative_token: video '" +
                             ds.videos.at(video_idx).video_id + "' uses every " +
                             std::string(pos_name(pos)) + " token in the vocabulary");
  }
  return complement[rng.uniform_int(complement.size())];
}

}  // namespace vtalign
