#include <gtest/gtest.h>

#include <cmath>

#include "fusionformer/error.hpp"
#include "fusionformer/metrics.hpp"
#include "fusionformer/model.hpp"
#include "fusionformer/train.hpp"
#include "helpers.hpp"

namespace ff {
namespace {

using test::random_tensor;
using test::same_bits;
using test::toy_config;

ModelConfig small_config(std::size_t frames = 9, std::size_t joints = 17) {
  ModelConfig c;
  c.frames = frames;
  c.joints = joints;
  c.dim = 8;
  c.heads = 2;
  c.cte_heads = 2;
  c.spatial_layers = c.temporal_layers = c.ste_layers = c.cte_layers = 1;
  c.refine_hidden = 8;
  return c;
}

void zero_sublayers(std::vector<BlockParams>& blocks) {
  for (auto& b : blocks) {
    b.attention.output.weight = Tensor::zeros(b.attention.output.weight.shape());
    b.fc2.weight = Tensor::zeros(b.fc2.weight.shape());
  }
}

Tensor final_norm(const Tensor& x, const BlockParams& b) {
  return layer_norm(x, b.norm_final.gamma, b.norm_final.beta);
}

TEST(Config, DefaultsValidateAndRoundTripJson) {
  const ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.frames, 9u);
  EXPECT_EQ(c.joints, 17u);
  const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
  EXPECT_EQ(back, c);
  nlohmann::json j = c;
  j["bogus"] = 1;
  EXPECT_THROW(j.get<ModelConfig>(), FormatError);
}

TEST(Config, FramePolicy) {
  for (std::size_t t : {3u, 5u, 7u, 9u}) EXPECT_NO_THROW(small_config(t).validate()) << t;
  for (std::size_t t : {1u, 2u, 4u, 8u, 11u}) EXPECT_THROW(small_config(t).validate(), ConfigError) << t;
  ModelConfig relaxed = small_config(11);
  relaxed.frame_policy = FramePolicy::any_odd;
  EXPECT_NO_THROW(relaxed.validate());
  relaxed.frames = 10;
  EXPECT_THROW(relaxed.validate(), ConfigError);
}

TEST(Config, IndivisibleHeadsRejected) {
  ModelConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Trajectories, IndexSweepAndRoundTrip) {
  const Tensor x = random_tensor({2, 3, 2}, 1);
  const Tensor y = reconstruct_trajectories(x);
  EXPECT_EQ(y.shape(), (Shape{3, 2, 2}));
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(x.at({t, j, c}), y.at({j, t, c}));
    }
  }
  const Tensor big = random_tensor({9, 17, 2}, 2);
  EXPECT_EQ(reconstruct_trajectories(big).shape(), (Shape{17, 9, 2}));
  EXPECT_TRUE(same_bits(reconstruct_trajectories(reconstruct_trajectories(big)), big));
}

TEST(Gim, OutputShape) {
  const ModelConfig c = small_config();
  const ModelParams p = init_params(c, 3);
  EXPECT_EQ(gim_forward(random_tensor({9, 17, 2}, 4), p, c).shape(), (Shape{9, 17, 8}));
  EXPECT_THROW(gim_forward(random_tensor({9, 16, 2}, 4), p, c), ShapeError);
}

TEST(Gim, ZeroedBlocksLeaveNormalisedEmbedding) {
  const ModelConfig c = small_config(3, 4);
  ModelParams p = init_params(c, 5);
  zero_sublayers(p.spatial_blocks);
  zero_sublayers(p.temporal_blocks);
  const Tensor x = random_tensor({3, 4, 2}, 6);
  Tensor expected = final_norm(embed(x, p.spatial_embed, p.spatial_pos), p.spatial_blocks[0]);
  expected = add_positional(reshape(expected, {3, 32}), p.temporal_pos);
  expected = reshape(final_norm(expected, p.temporal_blocks[0]), {3, 4, 8});
  EXPECT_TRUE(same_bits(gim_forward(x, p, c), expected));
}

TEST(Gim, SpatialStagePermutesWithJoints) {
  const ModelConfig c = small_config(3, 3);
  const ModelParams p = init_params(c, 7);
  const Tensor x = random_tensor({3, 3, 2}, 8);
  const std::vector<std::size_t> perm{2, 0, 1};
  auto spatial = [&](const Tensor& input, const PositionalEncoding& pe) {
    Tensor h = embed(input, p.spatial_embed, pe);
    for (const auto& b : p.spatial_blocks) h = encoder_block(h, b);
    return h;
  };
  std::vector<Tensor> xs, rows;
  for (std::size_t j : perm) {
    xs.push_back(slice(x, 1, j, 1));
    rows.push_back(slice(p.spatial_pos.table, 0, j, 1));
  }
  const Tensor y = spatial(x, p.spatial_pos);
  const Tensor yp = spatial(concat(xs, 1), {concat(rows, 0)});
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(yp.at({t, j, d}), y.at({t, perm[j], d}), 1e-13);
    }
  }
}

TEST(Ste, JointsAreIsolated) {
  const ModelConfig c = small_config(5, 4);
  const ModelParams p = init_params(c, 9);
  const Tensor traj = random_tensor({4, 5, 8}, 10);
  std::vector<double> v(traj.data().begin(), traj.data().end());
  for (std::size_t i = 2 * 40; i < 3 * 40; ++i) v[i] += 0.5;  // joint 2 only
  const Tensor a = ste_forward(traj, p, c);
  const Tensor b = ste_forward(Tensor::from({4, 5, 8}, v), p, c);
  for (std::size_t j = 0; j < 4; ++j) {
    const bool same = same_bits(slice(a, 0, j, 1), slice(b, 0, j, 1));
    EXPECT_EQ(same, j != 2) << "joint " << j;
  }
}

TEST(Ste, SingleJointEqualsPlainStack) {
  const ModelConfig c = small_config(5, 1);
  const ModelParams p = init_params(c, 11);
  const Tensor traj = random_tensor({1, 5, 8}, 12);
  Tensor h = add(reshape(traj, {5, 8}), p.ste_pos.table);
  for (const auto& b : p.ste_blocks) h = encoder_block(h, b);
  const Tensor y = ste_forward(traj, p, c);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(y.data()[i], h.data()[i], 1e-14);
}

TEST(Cte, AttentionRowsAndSingleJoint) {
  const ModelConfig c = small_config(3, 5);
  const ModelParams p = init_params(c, 13);
  ForwardTrace trace;
  const Tensor y = cte_forward(random_tensor({5, 3, 8}, 14), p, c, &trace);
  EXPECT_EQ(y.shape(), (Shape{5, 3, 8}));
  const AttentionMap* m = trace.find("cte", 0);
  ASSERT_NE(m, nullptr);
  EXPECT_EQ(m->weights.shape(), (Shape{2, 5, 5}));
  for (std::size_t r = 0; r < 10; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += m->weights.data()[r * 5 + k];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }

  const ModelConfig one = small_config(3, 1);
  ForwardTrace t1;
  cte_forward(random_tensor({1, 3, 8}, 15), init_params(one, 16), one, &t1);
  for (double w : t1.find("cte", 0)->weights.data()) EXPECT_EQ(w, 1.0);
}

TEST(Cte, IdenticalTrajectoriesGiveUniformRows) {
  const ModelConfig c = small_config(3, 4);
  ModelParams p = init_params(c, 17);
  // Identical positions too, so all tokens are exactly equal.
  p.cte_pos.table = Tensor::zeros(p.cte_pos.table.shape());
  const Tensor one = random_tensor({1, 3, 8}, 18);
  const Tensor traj = concat({one, one, one, one}, 0);
  ForwardTrace trace;
  cte_forward(traj, p, c, &trace);
  for (double w : trace.find("cte", 0)->weights.data()) EXPECT_NEAR(w, 0.25, 1e-15);
}

TEST(Lim, ShapeAndZeroedBlocks) {
  const ModelConfig c = small_config(3, 4);
  ModelParams p = init_params(c, 19);
  const Tensor x = random_tensor({3, 4, 2}, 20);
  EXPECT_EQ(lim_forward(x, p, c).shape(), (Shape{3, 4, 8}));
  zero_sublayers(p.ste_blocks);
  zero_sublayers(p.cte_blocks);
  Tensor h = linear(reconstruct_trajectories(x), p.traj_embed);
  h = final_norm(add_positional(h, p.ste_pos), p.ste_blocks[0]);
  h = add_positional(reshape(h, {4, 24}), p.cte_pos);
  h = reshape(final_norm(h, p.cte_blocks[0]), {4, 3, 8});
  EXPECT_TRUE(same_bits(lim_forward(x, p, c), reconstruct_trajectories(h)));
}

TEST(Lim, GradientThroughBranch) {
  const ModelConfig c = toy_config();
  const ModelParams p = init_params(c, 21);
  const Tensor x = random_tensor({3, 3, 2}, 22);
  const Tensor w = random_tensor({3, 3, 4}, 23);
  std::vector<NamedTensor> leaves;
  for (auto& nt : p.named(c)) {
    if (nt.first.rfind("lim.", 0) == 0) leaves.push_back(nt);
  }
  const GradCheckResult r =
      finite_diff_check([&] { return sum(mul(lim_forward(x, p, c), w)); }, leaves, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(Head, IdentityConvPassesGlobalBranchOnly) {
  const ModelConfig c = small_config(3, 4);
  ModelParams p = init_params(c, 24);
  std::vector<double> w(3 * 6, 0.0);
  for (std::size_t t = 0; t < 3; ++t) w[t * 6 + t] = 1.0;
  p.head_conv.weight = Tensor::from({3, 6}, w);
  p.head_conv.bias = Tensor::zeros({3});
  const Tensor g = random_tensor({3, 4, 8}, 25);
  const Tensor y = regression_head(g, random_tensor({3, 4, 8}, 26), p, c);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 3}));
  const Tensor expected = linear(layer_norm(g, p.head_norm.gamma, p.head_norm.beta), p.head_proj);
  EXPECT_TRUE(same_bits(y, expected));
  EXPECT_THROW(regression_head(g, random_tensor({3, 4, 7}, 27), p, c), ShapeError);
}

TEST(Head, GradientCheck) {
  const ModelConfig c = toy_config();
  const ModelParams p = init_params(c, 28);
  const Tensor g = random_tensor({3, 3, 4}, 29, true);
  const Tensor l = random_tensor({3, 3, 4}, 30, true);
  const Tensor w = random_tensor({3, 3, 3}, 31);
  const GradCheckResult r = finite_diff_check(
      [&] { return sum(mul(regression_head(g, l, p, c), w)); },
      {{"g", g}, {"l", l}, {"conv", p.head_conv.weight}, {"proj", p.head_proj.weight}}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(GimOnly, AblationIsConfiguration) {
  ModelConfig c = small_config(3, 4);
  c.lim_enabled = false;
  const ModelParams p = init_params(c, 32);
  for (const auto& [name, t] : p.named(c)) EXPECT_NE(name.rfind("lim.", 0), 0u) << name;
  const Tensor x = random_tensor({3, 4, 2}, 33);
  const ForwardResult r = model_forward(x, p, c);
  const Tensor expected = regression_head(gim_forward(x, p, c), Tensor::zeros({3, 4, 8}), p, c);
  EXPECT_TRUE(same_bits(r.sequence, expected));
  EXPECT_FALSE(r.trace.local_features.defined());
}

class RefineFixture : public ::testing::Test {
 protected:
  ModelConfig c = small_config(3, 4);
  ModelParams p = init_params(c, 34);
  Tensor seq = random_tensor({3, 4, 3}, 35);
  Tensor ref = random_tensor({3, 4, 2}, 36);
  Tensor a = reshape(slice(seq, 0, 1, 1), {4, 3});

  void set_logits(double la, double lb) {
    p.refine_fc2.weight = Tensor::zeros(p.refine_fc2.weight.shape());
    p.refine_fc2.bias = Tensor::from({2}, {la, lb});
  }
};

TEST_F(RefineFixture, SaturatedLogitsReturnPrediction) {
  set_logits(1e3, -1e3);
  EXPECT_TRUE(same_bits(pose_refine(seq, ref, p, c), a));
}

TEST_F(RefineFixture, EqualLogitsGiveMidpoint) {
  set_logits(0.0, 0.0);
  const Tensor y = pose_refine(seq, ref, p, c);
  for (std::size_t j = 0; j < 4; ++j) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double b = k < 2 ? ref.at({1, j, k}) : a.at({j, 2});
      EXPECT_EQ(y.at({j, k}), 0.5 * a.at({j, k}) + 0.5 * b);
    }
  }
}

TEST_F(RefineFixture, EqualCandidatesAreAFixedPoint) {
  std::vector<double> r(ref.data().begin(), ref.data().end());
  for (std::size_t j = 0; j < 4; ++j) {
    r[(4 + j) * 2] = a.at({j, 0});
    r[(4 + j) * 2 + 1] = a.at({j, 1});
  }
  const Tensor y = pose_refine(seq, Tensor::from({3, 4, 2}, r), p, c);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(y.data()[i], a.data()[i], 1e-15);
  EXPECT_THROW(pose_refine(seq, Tensor(), p, c), ShapeError);
}

TEST(Model, ShapesAndDeterminism) {
  const ModelConfig c = small_config();
  const ModelParams p = init_params(c, 37);
  const Tensor x = random_tensor({9, 17, 2}, 38);
  const ForwardResult a = model_forward(x, p, c);
  const ForwardResult b = model_forward(x, p, c);
  EXPECT_EQ(a.sequence.shape(), (Shape{9, 17, 3}));
  EXPECT_EQ(a.center.shape(), (Shape{17, 3}));
  EXPECT_TRUE(same_bits(a.sequence, b.sequence));
  EXPECT_TRUE(same_bits(a.center, b.center));
  EXPECT_TRUE(same_bits(init_params(c, 37).named(c)[5].second, p.named(c)[5].second));
}

TEST(Model, RefineOffUsesCentreFrame) {
  ModelConfig c = small_config(5, 4);
  c.refine_enabled = false;
  const ModelParams p = init_params(c, 39);
  const ForwardResult r = model_forward(random_tensor({5, 4, 2}, 40), p, c);
  EXPECT_TRUE(same_bits(r.center, reshape(slice(r.sequence, 0, 2, 1), {4, 3})));
}

TEST(Model, EndToEndGradientOnToyConfig) {
  const GradCheckResult r = check_model_gradients(toy_config(), 41, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst << "[" << r.worst_index << "]";
  EXPECT_EQ(r.coordinates, param_count(toy_config()));
}

TEST(ParamCount, MatchesTensorsAndHandTally) {
  const ModelConfig c = toy_config();
  std::size_t n = 0;
  for (const auto& [name, t] : init_params(c, 42).named(c)) n += t.numel();
  EXPECT_EQ(n, param_count(c));

  // T=3, J=3, D=4, mlp ratio 2, refine hidden 4; a block of width C holds
  // three norms (6C), four projections 4(C^2 + C) and a 2C-hidden MLP.
  auto block = [](std::size_t C) { return 6 * C + 4 * (C * C + C) + C * 2 * C + 2 * C + 2 * C * C + C; };
  const std::size_t gim = (2 * 4 + 4) + 3 * 4 + block(4) + 3 * 12 + block(12);
  const std::size_t lim = (2 * 4 + 4) + 3 * 4 + block(4) + 3 * 12 + block(12);
  const std::size_t head = (3 * 6 + 3) + 2 * 4 + (4 * 3 + 3);
  const std::size_t refine = (18 * 4 + 4) + (4 * 2 + 2);
  EXPECT_EQ(param_count(c), gim + lim + head + refine);
  EXPECT_EQ(param_count(c), 3226u);
}

TEST(ParamCount, Monotone) {
  ModelConfig c = small_config();
  const std::size_t base = param_count(c);
  c.spatial_layers = 2;
  EXPECT_GT(param_count(c), base);
  ModelConfig wide = small_config();
  wide.dim = 16;
  EXPECT_GT(param_count(wide), 2 * base);
}

TEST(Params, NamedRoundTripAndShapeMismatch) {
  const ModelConfig c = toy_config();
  const ModelParams p = init_params(c, 43);
  const auto named = p.named(c);
  const ModelParams q = params_from_named(c, named);
  const auto back = q.named(c);
  ASSERT_EQ(back.size(), named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    EXPECT_EQ(back[i].first, named[i].first);
    EXPECT_TRUE(same_bits(back[i].second, named[i].second));
  }
  auto bad = named;
  bad[0].second = Tensor::zeros({1});
  EXPECT_THROW(params_from_named(c, bad), CheckpointError);
  bad = named;
  bad.pop_back();
  EXPECT_THROW(params_from_named(c, bad), CheckpointError);
}

TEST(Params, SharedEmbeddingHasNoTrajectoryCopy) {
  ModelConfig c = toy_config();
  c.share_embedding = true;
  const ModelParams p = init_params(c, 44);
  for (const auto& [name, t] : p.named(c)) EXPECT_NE(name.rfind("lim.traj_embed", 0), 0u);
  EXPECT_EQ(p.traj_embed.weight.node(), p.spatial_embed.weight.node());
  ModelConfig own = toy_config();
  EXPECT_EQ(param_count(own) - param_count(c), 12u);
}

}  // namespace
}  // namespace ff
