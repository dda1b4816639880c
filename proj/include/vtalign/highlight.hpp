#pragma once

// Token-conditioned action-highlight export: relevance maps at an inference
// temperature, optional resampling to an arbitrary display grid, and
// per-frame grayscale image output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/model.hpp"
#include "vtalign/objectives.hpp"
#include "vtalign/tensor_io.hpp"

namespace vtalign {

enum class Interp { trilinear, nearest };

namespace detail {

struct AxisSample {
  std::size_t lo, hi;
  double frac;
};

inline AxisSample axis_sample(std::size_t i, std::size_t in, std::size_t out) {
  double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                   static_cast<double>(out) -
               0.5;
  if (src < 0.0) src = 0.0;
  const double max_src = static_cast<double>(in - 1);
  if (src > max_src) src = max_src;
  AxisSample s;
  s.lo = static_cast<std::size_t>(src);
  s.hi = std::min(s.lo + 1, in - 1);
  s.frac = src - static_cast<double>(s.lo);
  return s;
}

}  // namespace detail

// Resample a [T,H,W] map to a new grid. At identical resolution this is the
// identity; convex interpolation keeps entries nonnegative.
inline Tensor resize_map(const Tensor& map, std::size_t t_out, std::size_t h_out,
                         std::size_t w_out, Interp interp = Interp::trilinear) {
  if (map.rank() != 3) {
    throw std::invalid_argument("resize_map: expected [T,H,W], got " + shape_str(map.shape()));
  }
  if (t_out == 0 || h_out == 0 || w_out == 0) {
    throw std::invalid_argument("resize_map: target extents must be positive");
  }
  const std::size_t t_in = map.shape()[0], h_in = map.shape()[1], w_in = map.shape()[2];
  const auto& src = map.values();
  auto at = [&](std::size_t t, std::size_t h, std::size_t w) {
    return src[(t * h_in + h) * w_in + w];
  };
  std::vector<double> out(t_out * h_out * w_out);
  std::size_t idx = 0;
  for (std::size_t t = 0; t < t_out; ++t) {
    const auto ts = detail::axis_sample(t, t_in, t_out);
    for (std::size_t h = 0; h < h_out; ++h) {
      const auto hs = detail::axis_sample(h, h_in, h_out);
      for (std::size_t w = 0; w < w_out; ++w) {
        const auto ws = detail::axis_sample(w, w_in, w_out);
        if (interp == Interp::nearest) {
          const std::size_t tn = ts.frac < 0.5 ? ts.lo : ts.hi;
          const std::size_t hn = hs.frac < 0.5 ? hs.lo : hs.hi;
          const std::size_t wn = ws.frac < 0.5 ? ws.lo : ws.hi;
          out[idx++] = at(tn, hn, wn);
        } else {
          double acc = 0.0;
          for (int dt = 0; dt < 2; ++dt) {
            const double wt = dt ? ts.frac : 1.0 - ts.frac;
            if (wt == 0.0) continue;
            for (int dh = 0; dh < 2; ++dh) {
              const double wh = dh ? hs.frac : 1.0 - hs.frac;
              if (wh == 0.0) continue;
              for (int dw = 0; dw < 2; ++dw) {
                const double ww = dw ? ws.frac : 1.0 - ws.frac;
                if (ww == 0.0) continue;
                acc += wt * wh * ww *
                       at(dt ? ts.hi : ts.lo, dh ? hs.hi : hs.lo, dw ? ws.hi : ws.lo);
              }
            }
          }
          out[idx++] = acc;
        }
      }
    }
  }
  return Tensor::from_data({t_out, h_out, w_out}, std::move(out));
}

// Binary 8-bit portable graymap.
inline void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
                      const std::vector<unsigned char>& pixels) {
  if (pixels.size() != rows * cols) {
    throw std::invalid_argument("write_pgm: pixel count does not match dims");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open for writing");
  f << "P5\n" << cols << ' ' << rows << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error(path + ": write failed");
}

struct HighlightExport {
  std::string video_id;
  std::string token;
  Pos pos = Pos::verb;
  Space space = Space::motion;
  double beta_inference = 0.0;
  Tensor raw_map;        // [T,H,W] at the feature grid
  Tensor upsampled_map;  // defined only when a display grid was requested
};

// Projects the branch matching the token's POS, scores the token against it,
// and softmaxes at the inference temperature. Vocabulary lookup is exact
// match only.
inline HighlightExport make_highlight(Model& model, const Dataset& ds,
                                      const std::string& video_id, const std::string& token,
                                      Pos pos, double beta_inference, std::size_t out_t = 0,
                                      std::size_t out_h = 0, std::size_t out_w = 0,
                                      Interp interp = Interp::trilinear) {
  if (beta_inference <= 0.0) {
    throw std::invalid_argument("highlight: beta must be positive");
  }
  const auto token_id = ds.vocab.lookup(token);
  if (!token_id) {
    throw std::invalid_argument("highlight: token '" + token + "' not in vocabulary");
  }
  if (ds.vocab.pos(*token_id) != pos) {
    throw std::invalid_argument("highlight: token '" + token + "' is tagged " +
                                pos_name(ds.vocab.pos(*token_id)) + ", not " + pos_name(pos));
  }
  const std::size_t vidx = ds.video_index(video_id);
  const bool verb = pos == Pos::verb;
  ProjectedVolume vol = verb ? project(ds.fast_volume(vidx), model.proj_mot)
                             : project(ds.slow_volume(vidx), model.proj_vis);
  TextEmbedding emb = encode_token(*token_id, pos, model.tok, model.embedding);
  RelevanceMap map = relevance_map(vol, emb, beta_inference, static_cast<long>(*token_id));

  HighlightExport out;
  out.video_id = video_id;
  out.token = token;
  out.pos = pos;
  out.space = vol.space;
  out.beta_inference = beta_inference;
  out.raw_map = detach(map.data);
  const bool want_resize = out_t != 0 || out_h != 0 || out_w != 0;
  if (want_resize) {
    if (out_t == 0 || out_h == 0 || out_w == 0) {
      throw std::invalid_argument("highlight: frames, height and width must all be given");
    }
    out.upsampled_map = resize_map(out.raw_map, out_t, out_h, out_w, interp);
  }
  return out;
}

// Writes map.vten (and map_upsampled.vten when present) plus one frame_NNN.pgm
// per frame, min-max scaled over the whole exported map.
inline void write_highlight(const HighlightExport& hl, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  write_tensor((fs::path(out_dir) / "map.vten").string(), hl.raw_map);
  const Tensor& display = hl.upsampled_map.defined() ? hl.upsampled_map : hl.raw_map;
  if (hl.upsampled_map.defined()) {
    write_tensor((fs::path(out_dir) / "map_upsampled.vten").string(), hl.upsampled_map);
  }
  const auto& vals = display.values();
  const double lo = *std::min_element(vals.begin(), vals.end());
  const double hi = *std::max_element(vals.begin(), vals.end());
  const double span = hi - lo;
  const std::size_t t = display.shape()[0], h = display.shape()[1], w = display.shape()[2];
  for (std::size_t frame = 0; frame < t; ++frame) {
    std::vector<unsigned char> pixels(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      const double v = vals[frame * h * w + i];
      const double scaled = span > 0.0 ? (v - lo) / span : 0.0;
      pixels[i] = static_cast<unsigned char>(std::lround(scaled * 255.0));
    }
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.pgm", frame);
    write_pgm((fs::path(out_dir) / name).string(), h, w, pixels);
  }
}

}  // namespace vtalign
