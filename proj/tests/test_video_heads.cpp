#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vtalign/rng.hpp"
#include "vtalign/video_heads.hpp"

using namespace vtalign;

namespace {

FeatureVolume make_volume(Branch branch, std::size_t c, std::size_t t, std::size_t h,
                          std::size_t w, Rng& rng) {
  return {branch, random_uniform({c, t, h, w}, -1, 1, rng), "vid"};
}

// voxel vector at (t,h,w) of a [C,T,H,W] volume
oracle::Vec voxel_of(const FeatureVolume& fv, std::size_t t, std::size_t h, std::size_t w) {
  oracle::Vec out(fv.channels());
  const std::size_t thw = fv.frames() * fv.height() * fv.width();
  (void)thw;
  for (std::size_t c = 0; c < fv.channels(); ++c) {
    out[c] = fv.data[((c * fv.frames() + t) * fv.height() + h) * fv.width() + w];
  }
  return out;
}

}  // namespace

TEST_CASE("project: identity head keeps voxel vectors") {
  Rng rng(3);
  FeatureVolume fv = make_volume(Branch::fast, 3, 2, 2, 2, rng);
  ProjectionHead head;
  head.w = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  head.b = Tensor::zeros({3});
  auto pv = project(fv, head);
  CHECK(pv.space == Space::motion);
  REQUIRE(pv.data.shape() == Shape{8, 3});
  std::size_t p = 0;
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t w = 0; w < 2; ++w, ++p) {
        auto vox = voxel_of(fv, t, h, w);
        for (std::size_t c = 0; c < 3; ++c) CHECK(pv.data[p * 3 + c] == vox[c]);
      }
    }
  }
}

TEST_CASE("project: zero weights give the bias at every voxel") {
  Rng rng(5);
  FeatureVolume fv = make_volume(Branch::slow, 4, 2, 3, 3, rng);
  ProjectionHead head;
  head.w = Tensor::zeros({4, 2});
  head.b = Tensor::from_data({2}, {0.25, -1.5});
  auto pv = project(fv, head);
  CHECK(pv.space == Space::visual);
  for (std::size_t p = 0; p < pv.positions(); ++p) {
    CHECK(pv.data[p * 2 + 0] == 0.25);
    CHECK(pv.data[p * 2 + 1] == -1.5);
  }
}

TEST_CASE("project: the same head accepts any spatial extent") {
  Rng rng(7);
  ProjectionHead head;
  head.w = random_uniform({3, 5}, -1, 1, rng);
  head.b = random_uniform({5}, -1, 1, rng);
  auto a = project(make_volume(Branch::fast, 3, 2, 3, 3, rng), head);
  auto b = project(make_volume(Branch::fast, 3, 4, 5, 7, rng), head);
  CHECK(a.data.shape() == Shape{18, 5});
  CHECK(b.data.shape() == Shape{140, 5});
}

TEST_CASE("project: channel mismatch rejected") {
  Rng rng(9);
  ProjectionHead head;
  head.w = random_uniform({4, 2}, -1, 1, rng);
  head.b = random_uniform({2}, -1, 1, rng);
  FeatureVolume fv = make_volume(Branch::fast, 3, 2, 2, 2, rng);
  CHECK_THROWS_AS(project(fv, head), std::invalid_argument);
}

TEST_CASE("project: equivariant to spatiotemporal permutation") {
  Rng rng(11);
  const std::size_t c = 3, t = 2, h = 2, w = 3, p = t * h * w;
  FeatureVolume fv = make_volume(Branch::fast, c, t, h, w, rng);
  std::vector<std::size_t> perm(p);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  // permuted volume: position i holds what was at perm[i]
  std::vector<double> data(c * p);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < p; ++i) data[ch * p + i] = fv.data[ch * p + perm[i]];
  }
  FeatureVolume permuted{Branch::fast, Tensor::from_data({c, t, h, w}, std::move(data)), "vid"};

  ProjectionHead head;
  head.w = random_uniform({c, 4}, -1, 1, rng);
  head.b = random_uniform({4}, -1, 1, rng);
  auto out = project(fv, head);
  auto out_p = project(permuted, head);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(out_p.data[i * 4 + j] == out.data[perm[i] * 4 + j]);  // exact
    }
  }
}

TEST_CASE("resample_time: identity at equal frame counts, nearest otherwise") {
  Rng rng(13);
  ProjectionHead head;
  head.w = random_uniform({3, 2}, -1, 1, rng);
  head.b = random_uniform({2}, -1, 1, rng);
  auto pv = project(make_volume(Branch::slow, 3, 2, 2, 2, rng), head);

  auto same = resample_time(pv, 2);
  CHECK(same.data.values() == pv.data.values());

  auto up = resample_time(pv, 4);
  CHECK(up.t == 4);
  REQUIRE(up.data.shape() == Shape{16, 2});
  // centers 0.5,1.5,2.5,3.5 scaled by 2/4 -> sources 0,0,1,1
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t src = t / 2;
    for (std::size_t i = 0; i < 4 * 2; ++i) {
      CHECK(up.data[t * 8 + i] == pv.data[src * 8 + i]);
    }
  }
}

TEST_CASE("fuse_joint: zero parameters give the uniform direction") {
  Rng rng(15);
  const std::size_t c = 4;
  ProjectionHead head;
  head.w = random_uniform({3, c}, -1, 1, rng);
  head.b = random_uniform({c}, -1, 1, rng);
  auto vm = project(make_volume(Branch::fast, 3, 4, 2, 2, rng), head);
  auto vv = project(make_volume(Branch::slow, 3, 2, 2, 2, rng), head);
  vv.space = Space::visual;
  vm.space = Space::motion;

  JointFusionParams params;
  params.w = Tensor::zeros({2 * c, c});
  params.b = Tensor::zeros({c});
  auto v_joi = fuse_joint(vm, vv, params);
  // every voxel channel is sigmoid(0)=0.5; normalized -> 1/sqrt(C)
  for (std::size_t i = 0; i < c; ++i) {
    CHECK(v_joi[i] == Catch::Approx(1.0 / std::sqrt(double(c))).margin(1e-12));
  }
}

TEST_CASE("fuse_joint: constant volumes make pooling the per-voxel identity") {
  const std::size_t c = 3;
  ProjectedVolume vm{Space::motion, Tensor::full({8, c}, 0.3), 2, 2, 2};
  ProjectedVolume vv{Space::visual, Tensor::full({8, c}, -0.4), 2, 2, 2};
  Rng rng(17);
  JointFusionParams params{random_uniform({2 * c, c}, -1, 1, rng),
                           random_uniform({c}, -1, 1, rng)};
  auto v_joi = fuse_joint(vm, vv, params);

  // single-voxel oracle: constant volume means mean == per-voxel value
  oracle::Vec vox(2 * c);
  for (std::size_t i = 0; i < c; ++i) vox[i] = 0.3;
  for (std::size_t i = 0; i < c; ++i) vox[c + i] = -0.4;
  oracle::Mat w(2 * c, oracle::Vec(c));
  for (std::size_t i = 0; i < 2 * c; ++i)
    for (std::size_t j = 0; j < c; ++j) w[i][j] = params.w[i * c + j];
  auto expect = oracle::fuse_joint({vox}, w, params.b.values());
  for (std::size_t i = 0; i < c; ++i) {
    CHECK(v_joi[i] == Catch::Approx(expect[i]).margin(1e-12));
  }
}

TEST_CASE("fuse_joint: random volumes match the voxel-loop oracle") {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 1 + rng.uniform_int(4);
    const std::size_t t = 1 + rng.uniform_int(3);
    const std::size_t h = 1 + rng.uniform_int(3);
    const std::size_t w = 1 + rng.uniform_int(3);
    const std::size_t p = t * h * w;
    ProjectedVolume vm{Space::motion, random_uniform({p, c}, -1, 1, rng), t, h, w};
    ProjectedVolume vv{Space::visual, random_uniform({p, c}, -1, 1, rng), t, h, w};
    JointFusionParams params{random_uniform({2 * c, c}, -1, 1, rng),
                             random_uniform({c}, -1, 1, rng)};
    auto v_joi = fuse_joint(vm, vv, params);

    std::vector<oracle::Vec> voxels;
    for (std::size_t i = 0; i < p; ++i) {
      oracle::Vec vox(2 * c);
      for (std::size_t j = 0; j < c; ++j) vox[j] = vm.data[i * c + j];
      for (std::size_t j = 0; j < c; ++j) vox[c + j] = vv.data[i * c + j];
      voxels.push_back(std::move(vox));
    }
    oracle::Mat wm(2 * c, oracle::Vec(c));
    for (std::size_t i = 0; i < 2 * c; ++i)
      for (std::size_t j = 0; j < c; ++j) wm[i][j] = params.w[i * c + j];
    auto expect = oracle::fuse_joint(voxels, wm, params.b.values());
    for (std::size_t i = 0; i < c; ++i) {
      CHECK(v_joi[i] == Catch::Approx(expect[i]).margin(1e-10));
    }
    // unit norm: sigmoid output is strictly positive
    double ss = 0;
    for (std::size_t i = 0; i < c; ++i) ss += v_joi[i] * v_joi[i];
    CHECK(std::abs(std::sqrt(ss) - 1.0) < 1e-6);
  }
}

TEST_CASE("pool: constant, two-voxel and random cases") {
  ProjectedVolume constant{Space::motion, Tensor::full({6, 3}, 1.25), 1, 2, 3};
  auto pooled = pool(constant);
  for (std::size_t i = 0; i < 3; ++i) CHECK(pooled.vec[i] == 1.25);

  ProjectedVolume two{Space::visual,
                      Tensor::from_data({2, 2}, {1.0, -2.0, 3.0, 7.0}), 2, 1, 1};
  auto p2 = pool(two);
  CHECK(p2.vec[0] == 2.0);
  CHECK(p2.vec[1] == 2.5);

  Rng rng(21);
  ProjectedVolume rv{Space::motion, random_uniform({12, 4}, -2, 2, rng), 3, 2, 2};
  auto pr = pool(rv);
  std::vector<oracle::Vec> voxels;
  for (std::size_t i = 0; i < 12; ++i) {
    oracle::Vec vox(4);
    for (std::size_t j = 0; j < 4; ++j) vox[j] = rv.data[i * 4 + j];
    voxels.push_back(vox);
  }
  auto expect = oracle::pool(voxels);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(pr.vec[j] == Catch::Approx(expect[j]).margin(1e-12));
  }
}

TEST_CASE("pool commutes with voxel permutation, exactly") {
  Rng rng(23);
  ProjectedVolume rv{Space::motion, random_uniform({10, 3}, -1, 1, rng), 10, 1, 1};
  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  std::vector<double> data(30);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 3; ++j) data[i * 3 + j] = rv.data[perm[i] * 3 + j];
  ProjectedVolume shuffled{Space::motion, Tensor::from_data({10, 3}, std::move(data)), 10, 1, 1};
  auto a = pool(rv);
  auto b = pool(shuffled);
  CHECK(a.vec.values() == b.vec.values());  // bitwise
}
