#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vtalign/grad_check.hpp"
#include "vtalign/objectives.hpp"
#include "vtalign/training.hpp"

using namespace vtalign;

namespace {

ProjectedVolume volume_from_rows(Space space, std::vector<std::vector<double>> rows,
                                 std::size_t t, std::size_t h, std::size_t w,
                                 bool requires_grad = false) {
  const std::size_t c = rows.front().size();
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return {space, Tensor::from_data({rows.size(), c}, std::move(flat), requires_grad), t, h, w};
}

TextEmbedding embedding_of(Space space, std::vector<double> v,
                           Polarity pol = Polarity::positive) {
  Shape s{v.size()};
  return {space, Tensor::from_data(s, std::move(v)), pol};
}

}  // namespace

TEST_CASE("relevance_map: equal voxels give the uniform map") {
  ProjectedVolume v{Space::motion, Tensor::full({12, 3}, 0.4), 3, 2, 2};
  auto m = relevance_map(v, embedding_of(Space::motion, {1, 0, 0}), 0.8, 5);
  REQUIRE(m.data.shape() == Shape{3, 2, 2});
  CHECK(m.token_id == 5);
  CHECK(m.beta_used == 0.8);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(m.data[i] == Catch::Approx(1.0 / 12).margin(1e-12));
  }
}

TEST_CASE("relevance_map: two-voxel direct evaluation") {
  auto v = volume_from_rows(Space::motion, {{1, 0}, {0, 1}}, 2, 1, 1);
  auto m = relevance_map(v, embedding_of(Space::motion, {1, 0}), 1.0);
  // oracle route: cosine scores are (1, 0); softmax at beta 1
  auto expect = oracle::softmax({1.0, 0.0}, 1.0);
  CHECK(m.data[0] == Catch::Approx(expect[0]).margin(1e-12));
  CHECK(m.data[1] == Catch::Approx(expect[1]).margin(1e-12));
  CHECK(m.data[0] == Catch::Approx(0.7310585786).margin(1e-9));
  CHECK(m.data[1] == Catch::Approx(0.2689414214).margin(1e-9));
}

TEST_CASE("relevance_map: small beta concentrates mass on the argmax voxel") {
  Rng rng(3);
  auto v = ProjectedVolume{Space::visual, random_uniform({9, 4}, -1, 1, rng), 1, 3, 3};
  auto c = embedding_of(Space::visual, {0.2, -0.4, 0.8, 0.1});
  auto coarse = relevance_map(v, c, 1.0);
  auto sharp = relevance_map(v, c, 0.005);
  const auto& vals = sharp.data.values();
  CHECK(*std::max_element(vals.begin(), vals.end()) > 0.999);
  CHECK(*std::max_element(coarse.data.values().begin(), coarse.data.values().end()) < 0.9);
}

TEST_CASE("relevance_map: space mismatch rejected") {
  ProjectedVolume v{Space::motion, Tensor::full({4, 2}, 0.1), 1, 2, 2};
  CHECK_THROWS_AS(relevance_map(v, embedding_of(Space::visual, {1, 0}), 1.0),
                  std::invalid_argument);
}

TEST_CASE("alignment_loss: degenerate negative equals alpha") {
  Rng rng(5);
  auto v = ProjectedVolume{Space::motion, random_uniform({8, 3}, -1, 1, rng), 2, 2, 2};
  auto c = embedding_of(Space::motion, {0.3, -0.5, 0.2});
  auto c_neg = embedding_of(Space::motion, {0.3, -0.5, 0.2}, Polarity::negative);
  auto loss = alignment_loss(v, c, c_neg, 0.7, 0.25);
  CHECK(loss.item() == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("alignment_loss: hand-evaluated two-voxel case") {
  auto v = volume_from_rows(Space::motion, {{1, 0}, {0, 1}}, 2, 1, 1);
  auto c_pos = embedding_of(Space::motion, {1, 0});
  auto c_neg = embedding_of(Space::motion, {0, 1}, Polarity::negative);
  auto loss = alignment_loss(v, c_pos, c_neg, 1.0, 0.2);
  // oracle: map = softmax(1,0); hinges (0, 1.2)
  const double expect = oracle::alignment_loss({{1, 0}, {0, 1}}, {1, 0}, {0, 1}, 1.0, 0.2);
  CHECK(loss.item() == Catch::Approx(expect).margin(1e-12));
  CHECK(expect == Catch::Approx(0.3227297).margin(1e-6));
}

TEST_CASE("alignment_loss: satisfied margin gives zero") {
  // every voxel equals the positive direction; negative orthogonal
  auto v = volume_from_rows(Space::visual, {{2, 0}, {0.5, 0}, {1, 0}}, 3, 1, 1);
  auto loss = alignment_loss(v, embedding_of(Space::visual, {1, 0}),
                             embedding_of(Space::visual, {0, 1}, Polarity::negative), 0.5, 0.2);
  CHECK(loss.item() == 0.0);
}

TEST_CASE("alignment_loss: bounded by alpha + 2 and nonnegative") {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const std::size_t p = 1 + rng.uniform_int(6);
    const std::size_t c = 2 + rng.uniform_int(3);
    ProjectedVolume v{Space::motion, random_uniform({p, c}, -2, 2, rng),
                      p, 1, 1};
    auto cp = embedding_of(Space::motion, random_uniform({c}, -1, 1, rng).values());
    auto cn = embedding_of(Space::motion, random_uniform({c}, -1, 1, rng).values(),
                           Polarity::negative);
    const double alpha = rng.uniform(0, 0.5);
    const double loss = alignment_loss(v, cp, cn, 0.5, alpha).item();
    CHECK(loss >= 0.0);
    CHECK(loss <= alpha + 2.0 + 1e-12);
  }
}

TEST_CASE("alignment_loss matches the oracle on random instances") {
  Rng rng(9);
  for (int t = 0; t < 30; ++t) {
    const std::size_t p = 1 + rng.uniform_int(5);
    const std::size_t c = 2 + rng.uniform_int(3);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < p; ++i) rows.push_back(random_uniform({c}, -1, 1, rng).values());
    auto cp = random_uniform({c}, -1, 1, rng).values();
    auto cn = random_uniform({c}, -1, 1, rng).values();
    const double beta = 0.3 + rng.uniform01();
    const double alpha = rng.uniform(0, 0.4);
    auto v = volume_from_rows(Space::motion, rows, p, 1, 1);
    const double got = alignment_loss(v, embedding_of(Space::motion, cp),
                                      embedding_of(Space::motion, cn, Polarity::negative), beta,
                                      alpha)
                           .item();
    const double expect = oracle::alignment_loss(rows, cp, cn, beta, alpha);
    CHECK(got == Catch::Approx(expect).margin(1e-10));
  }
}

TEST_CASE("alignment_loss gradient reaches voxels and both embeddings") {
  Rng rng(11);
  ProjectedVolume v{Space::motion, random_uniform({6, 3}, -1, 1, rng, true), 6, 1, 1};
  Tensor cp = random_uniform({3}, -1, 1, rng, true);
  Tensor cn = random_uniform({3}, -1, 1, rng, true);
  auto fn = [&]() {
    return alignment_loss(v, {Space::motion, cp, Polarity::positive},
                          {Space::motion, cn, Polarity::negative}, 0.6, 0.3);
  };
  auto report = grad_check(fn, {v.data, cp, cn});
  CHECK_FALSE(report.at_kink);
  CHECK(report.max_rel_err < 1e-4);

  v.data.zero_grad();
  backward(fn());
  double gsum = 0;
  for (double g : v.data.grad_or_zeros()) gsum += std::abs(g);
  CHECK(gsum > 1e-8);  // gradient flows through the map into the voxels
}

TEST_CASE("joint_loss: perfectly separated batch of two is zero") {
  std::vector<JointPair> batch{
      {Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {1, 0}), "a"},
      {Tensor::from_data({2}, {-1, 0}), Tensor::from_data({2}, {-1, 0}), "b"},
  };
  CHECK(joint_loss(batch, 0.2).item() == 0.0);
}

TEST_CASE("joint_loss: identical embeddings give two alpha") {
  std::vector<JointPair> batch{
      {Tensor::from_data({2}, {0.6, 0.8}), Tensor::from_data({2}, {0.6, 0.8}), "a"},
      {Tensor::from_data({2}, {0.6, 0.8}), Tensor::from_data({2}, {0.6, 0.8}), "b"},
      {Tensor::from_data({2}, {0.6, 0.8}), Tensor::from_data({2}, {0.6, 0.8}), "c"},
  };
  CHECK(joint_loss(batch, 0.15).item() == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("joint_loss: single-video batch rejected") {
  std::vector<JointPair> batch{
      {Tensor::from_data({2}, {1, 0}), Tensor::from_data({2}, {1, 0}), "a"},
      {Tensor::from_data({2}, {0, 1}), Tensor::from_data({2}, {0, 1}), "a"},
  };
  CHECK_THROWS_AS(joint_loss(batch, 0.2), std::invalid_argument);
}

TEST_CASE("joint_loss matches the brute-force oracle and is relabel-symmetric") {
  Rng rng(13);
  for (int t = 0; t < 30; ++t) {
    const std::size_t b = 2 + rng.uniform_int(3);
    const std::size_t c = 2 + rng.uniform_int(4);
    std::vector<JointPair> batch;
    std::vector<oracle::Vec> vids, caps;
    for (std::size_t i = 0; i < b; ++i) {
      auto v = random_uniform({c}, -1, 1, rng);
      auto cc = random_uniform({c}, -1, 1, rng);
      vids.push_back(v.values());
      caps.push_back(cc.values());
      batch.push_back({v, cc, "vid" + std::to_string(i)});
    }
    const double alpha = rng.uniform(0.05, 0.4);
    const double got = joint_loss(batch, alpha).item();
    CHECK(got == Catch::Approx(oracle::joint_loss(vids, caps, alpha)).margin(1e-10));

    std::vector<JointPair> rotated(batch.begin() + 1, batch.end());
    rotated.push_back(batch.front());
    CHECK(joint_loss(rotated, alpha).item() == Catch::Approx(got).margin(1e-12));
  }
}

TEST_CASE("total_loss: lambda zero is bit-identical to the joint loss") {
  testutil::TempDir dir;
  Dataset ds = testutil::tiny_dataset(dir);
  Rng mrng(31);
  Model model = Model::init(4, 4, ds.vocab.size(), 3, 3, mrng);

  Batch batch;
  batch.items = {{0, 0}, {1, 2}, {2, 4}};

  Rng neg1(7);
  auto lb = total_loss(batch, ds, model, {0.2, 0.1, 0.0, 0.0}, neg1);
  CHECK(lb.l_mot.item() == 0.0);
  CHECK(lb.l_vis.item() == 0.0);
  CHECK(lb.l_total.item() == lb.l_joint.item());  // same node, bitwise

  // identical joint term when alignment terms are enabled
  Rng neg2(7);
  auto full = total_loss(batch, ds, model, {0.2, 0.1, 1.0, 1.0}, neg2);
  CHECK(full.l_joint.item() == lb.l_joint.item());
  CHECK(full.l_total.item() ==
        full.l_joint.item() + 1.0 * full.l_mot.item() + 1.0 * full.l_vis.item());
}

TEST_CASE("total_loss: breakdown combines exactly as stated") {
  testutil::TempDir dir;
  Dataset ds = testutil::tiny_dataset(dir, 19);
  Rng mrng(33);
  Model model = Model::init(5, 4, ds.vocab.size(), 3, 3, mrng);
  Batch batch;
  batch.items = {{0, 1}, {3, 6}};
  const double lm = 0.7, ls = 1.3;
  Rng neg(11);
  auto lb = total_loss(batch, ds, model, {0.2, 0.1, lm, ls}, neg);
  CHECK(lb.l_total.item() ==
        Catch::Approx(lb.l_joint.item() + lm * lb.l_mot.item() + ls * lb.l_vis.item())
            .margin(1e-15));
  CHECK(lb.l_mot.item() >= 0.0);
  CHECK(lb.l_vis.item() >= 0.0);
}

TEST_CASE("total_loss gradients match central finite differences (Eq. 7 route)") {
  testutil::TempDir dir;
  auto spec = testutil::tiny_spec(23);
  spec.videos = 3;
  spec.t_fast = 2;
  spec.t_slow = 2;
  spec.height = 2;
  spec.width = 2;
  generate_synthetic(spec, dir.str());
  Dataset ds = Dataset::load(dir.str("manifest_train.tsv"));

  Rng mrng(41);
  Model model = Model::init(3, 3, ds.vocab.size(), spec.c_slow, spec.c_fast, mrng);
  Batch batch;
  batch.items = {{0, 0}, {1, 2}, {2, 4}};

  auto fn = [&]() {
    Rng neg(97);  // fixed negatives: the loss must be a pure function of params
    return total_loss(batch, ds, model, {0.2, 0.5, 1.0, 1.0}, neg).l_total;
  };
  auto report = grad_check(fn, model.parameter_tensors());
  CHECK_FALSE(report.at_kink);
  CHECK(report.max_rel_err < 1e-4);
}
