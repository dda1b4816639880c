#pragma once

// Video side of the model: per-voxel projection of slow/fast feature volumes
// into the visual/motion spaces, joint fusion into one vector per video, and
// mean pooling for reranking.
//
// Projected volumes are held voxel-major as [P, C] with P = T*H*W and row
// p = (t*H + h)*W + w; every head is a per-voxel affine map, so any (T,H,W)
// works with the same parameters.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "vtalign/dataset.hpp"
#include "vtalign/encoders.hpp"
#include "vtalign/tensor.hpp"

namespace vtalign {

struct ProjectedVolume {
  Space space = Space::motion;
  Tensor data;  // [P, C]
  std::size_t t = 0, h = 0, w = 0;

  std::size_t positions() const { return t * h * w; }
  std::size_t channels() const { return data.shape()[1]; }
};

// Kernel-size-one convolution head: W [C_in, C], b [C].
struct ProjectionHead {
  Tensor w, b;
};

struct JointFusionParams {
  Tensor w;  // [2C, C]
  Tensor b;  // [C]
};

struct PooledEmbedding {
  Space space = Space::motion;
  Tensor vec;  // [C]; deliberately not re-normalized, cosine handles scale
};

// fast branch -> motion space, slow branch -> visual space.
inline ProjectedVolume project(const FeatureVolume& fv, const ProjectionHead& head) {
  if (fv.data.rank() != 4) {
    throw std::invalid_argument("project: feature volume must be rank 4, got " +
                                shape_str(fv.data.shape()));
  }
  const std::size_t c_in = fv.channels();
  if (head.w.shape()[0] != c_in) {
    throw std::invalid_argument("project: head expects " + std::to_string(head.w.shape()[0]) +
                                " input channels, volume has " + std::to_string(c_in));
  }
  const std::size_t p = fv.frames() * fv.height() * fv.width();
  Tensor voxels = transpose2d(reshape(fv.data, {c_in, p}));  // [P, C_in]
  Tensor projected = add_rowvec(matmul(voxels, head.w), head.b);
  return {fv.branch == Branch::fast ? Space::motion : Space::visual, std::move(projected),
          fv.frames(), fv.height(), fv.width()};
}

namespace detail {

// Row indices that resample the time axis to t_out by nearest neighbor.
inline std::vector<std::size_t> resample_rows(std::size_t t_in, std::size_t t_out, std::size_t h,
                                              std::size_t w) {
  std::vector<std::size_t> rows;
  rows.reserve(t_out * h * w);
  for (std::size_t t = 0; t < t_out; ++t) {
    const double center = (static_cast<double>(t) + 0.5) * static_cast<double>(t_in) /
                          static_cast<double>(t_out);
    std::size_t src = static_cast<std::size_t>(center);
    if (src >= t_in) src = t_in - 1;
    for (std::size_t i = 0; i < h * w; ++i) rows.push_back(src * h * w + i);
  }
  return rows;
}

}  // namespace detail

// Nearest-neighbor temporal resampling of a projected volume (identity when
// the frame counts already agree).
inline ProjectedVolume resample_time(const ProjectedVolume& v, std::size_t t_out) {
  if (v.t == t_out) return v;
  ProjectedVolume out;
  out.space = v.space;
  out.t = t_out;
  out.h = v.h;
  out.w = v.w;
  out.data = gather_rows(v.data, detail::resample_rows(v.t, t_out, v.h, v.w));
  return out;
}

// Per-voxel concat of motion and visual channels -> affine -> sigmoid, then
// mean over voxels and L2-normalize: the joint video embedding. The visual
// volume is resampled to the motion volume's frame count first.
inline Tensor fuse_joint(const ProjectedVolume& v_mot, const ProjectedVolume& v_vis,
                         const JointFusionParams& params, double eps = 1e-12) {
  if (v_mot.space != Space::motion || v_vis.space != Space::visual) {
    throw std::invalid_argument("fuse_joint: expected (motion, visual) volumes");
  }
  if (v_mot.h != v_vis.h || v_mot.w != v_vis.w) {
    throw std::logic_error("fuse_joint: spatial extents disagree after projection");
  }
  const ProjectedVolume vis = resample_time(v_vis, v_mot.t);
  Tensor cat = concat(v_mot.data, vis.data, 1);  // [P, 2C]
  Tensor z = sigmoid(add_rowvec(matmul(cat, params.w), params.b));
  Tensor pooled = reduce(z, Reduce::mean, {0});
  return l2_normalize(pooled, 0, eps);
}

// Mean over all voxel vectors, divided by the volume's own position count.
// Channel sums are accumulated in sorted order, so any permutation of voxel
// order produces the identical vector.
inline PooledEmbedding pool(const ProjectedVolume& v) {
  const std::size_t p = v.data.shape()[0], c = v.data.shape()[1];
  const auto& vals = v.data.values();
  std::vector<double> mean(c);
  std::vector<double> column(p);
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t r = 0; r < p; ++r) column[r] = vals[r * c + j];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double x : column) acc += x;
    mean[j] = acc / static_cast<double>(p);
  }
  return {v.space, Tensor::from_data({c}, std::move(mean))};
}

}  // namespace vtalign
