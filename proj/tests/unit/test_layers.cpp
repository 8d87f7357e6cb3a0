// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "../support/gradcheck.hpp"
#include "refusion/nn/layers.hpp"
#include "refusion/nn/noise_net.hpp"
#include "refusion/rng.hpp"

using namespace refusion;
using namespace refusion::nn;
using refusion::testing::check_gradients;
using refusion::testing::GradCheckOptions;

namespace {

Tensor randn(Shape s, Rng& rng) { return normal_like(s, rng); }

void randomize(const ParamList& ps, Rng& rng, double scale = 0.5) {
  for (Param* p : ps) {
    for (double& v : p->value.values()) v = scale * rng.normal();
  }
}

constexpr double kGradTol = 1e-3;

}  // namespace

// ---- SimpleGate ----

TEST(SimpleGate, OnesStayOnes) {
  SimpleGate g;
  const Tensor out = g.forward(Tensor({1, 4, 2, 2}, 1.0));
  EXPECT_EQ(out.shape(), (Shape{1, 2, 2, 2}));
  for (double v : out.values()) EXPECT_EQ(v, 1.0);
}

TEST(SimpleGate, ZeroFirstHalfAnnihilates) {
  Rng rng(1);
  Tensor x = randn({2, 6, 3, 3}, rng);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 3; ++c) std::fill_n(x.plane(n, c), 9, 0.0);
  }
  SimpleGate g;
  const Tensor out = g.forward(x);
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(SimpleGate, MatchesIndexedOracle) {
  Rng rng(2);
  const Tensor x = randn({2, 8, 4, 4}, rng);
  SimpleGate g;
  const Tensor out = g.forward(x);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 4; ++c) {
      for (int y = 0; y < 4; ++y) {
        for (int xx = 0; xx < 4; ++xx) {
          EXPECT_EQ(out.at(n, c, y, xx), x.at(n, c, y, xx) * x.at(n, c + 4, y, xx));
        }
      }
    }
  }
}

TEST(SimpleGate, RejectsOddChannels) {
  SimpleGate g;
  EXPECT_THROW(g.forward(Tensor({1, 3, 2, 2})), std::invalid_argument);
}

// ---- Channel attention ----

TEST(ChannelScale, IdentityMapOnUnitMeanInput) {
  Rng rng(3);
  const int c = 4;
  ChannelScale sca("sca", c);
  sca.weight.value.fill(0.0);
  for (int i = 0; i < c; ++i) sca.weight.value[static_cast<std::size_t>(i * c + i)] = 1.0;
  sca.bias.value.fill(0.0);
  // Each plane has mean exactly 1: alternating 1 +/- a.
  Tensor x({2, c, 4, 4});
  for (int n = 0; n < 2; ++n) {
    for (int ch = 0; ch < c; ++ch) {
      const double a = rng.uniform(0.0, 0.5);
      for (int i = 0; i < 16; ++i) x.plane(n, ch)[i] = 1.0 + (i % 2 == 0 ? a : -a);
    }
  }
  const Tensor out = sca.forward(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(out[i], x[i], 1e-15);
}

TEST(ChannelScale, ZeroMapGivesZeros) {
  Rng rng(4);
  ChannelScale sca("sca", 6);
  sca.weight.value.fill(0.0);
  sca.bias.value.fill(0.0);
  const Tensor out = sca.forward(randn({2, 6, 5, 5}, rng));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(ChannelScale, MatchesPoolThenScaleOracle) {
  Rng rng(5);
  const int c = 6;
  ChannelScale sca("sca", c);
  sca.init(rng);
  randomize({&sca.bias}, rng);
  const Tensor x = randn({2, c, 5, 7}, rng);
  const Tensor out = sca.forward(x);
  for (int n = 0; n < 2; ++n) {
    std::vector<double> pooled(c, 0.0);
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < 5; ++y) {
        for (int xx = 0; xx < 7; ++xx) pooled[ch] += x.at(n, ch, y, xx) / 35.0;
      }
    }
    for (int o = 0; o < c; ++o) {
      double gain = sca.bias.value[static_cast<std::size_t>(o)];
      for (int i = 0; i < c; ++i) gain += sca.weight.value[static_cast<std::size_t>(o * c + i)] * pooled[i];
      for (int y = 0; y < 5; ++y) {
        for (int xx = 0; xx < 7; ++xx) {
          EXPECT_NEAR(out.at(n, o, y, xx), gain * x.at(n, o, y, xx), 1e-12);
        }
      }
    }
  }
}

// ---- Convolution against a direct oracle ----

TEST(Conv2d, MatchesDirectConvolution) {
  Rng rng(6);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{2, 2, 0}, std::tuple{1, 1, 0},
                                std::tuple{3, 2, 1}}) {
    Conv2d conv("c", 3, 5, k, stride, pad);
    conv.init(rng);
    randomize({&conv.bias}, rng);
    const Tensor x = randn({2, 3, 8, 6}, rng);
    const Tensor out = conv.forward(x);
    const Shape os = conv.out_shape(x.shape());
    ASSERT_EQ(out.shape(), os);
    for (int n = 0; n < 2; ++n) {
      for (int o = 0; o < 5; ++o) {
        for (int y = 0; y < os.h; ++y) {
          for (int xx = 0; xx < os.w; ++xx) {
            double acc = conv.bias.value[static_cast<std::size_t>(o)];
            for (int i = 0; i < 3; ++i) {
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  const int iy = y * stride - pad + ky, ix = xx * stride - pad + kx;
                  if (iy < 0 || iy >= 8 || ix < 0 || ix >= 6) continue;
                  acc += conv.weight.value[static_cast<std::size_t>(((o * 3 + i) * k + ky) * k + kx)] *
                         x.at(n, i, iy, ix);
                }
              }
            }
            EXPECT_NEAR(out.at(n, o, y, xx), acc, 1e-12);
          }
        }
      }
    }
  }
}

// ---- Finite-difference gradient checks per layer ----

TEST(GradCheck, Conv2dVariants) {
  Rng rng(7);
  for (auto [k, stride, pad, bias] : {std::tuple{3, 1, 1, true}, std::tuple{2, 2, 0, true},
                                      std::tuple{1, 1, 0, false}, std::tuple{3, 2, 1, true}}) {
    Conv2d conv("conv", 3, 4, k, stride, pad, bias);
    conv.init(rng);
    ParamList ps;
    conv.collect(ps);
    const auto rep = check_gradients(
        randn({2, 3, 6, 6}, rng), [&](const Tensor& x) { return conv.forward(x); },
        [&](const Tensor& g) { return conv.backward(g); }, ps, rng);
    EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
  }
}

TEST(GradCheck, DepthwiseConv) {
  Rng rng(8);
  DepthwiseConv3x3 dw("dw", 4);
  dw.init(rng);
  ParamList ps;
  dw.collect(ps);
  const auto rep = check_gradients(
      randn({2, 4, 5, 6}, rng), [&](const Tensor& x) { return dw.forward(x); },
      [&](const Tensor& g) { return dw.backward(g); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(GradCheck, LayerNorm) {
  Rng rng(9);
  LayerNorm2d ln("ln", 5);
  ParamList ps;
  ln.collect(ps);
  randomize(ps, rng);
  const auto rep = check_gradients(
      randn({2, 5, 3, 4}, rng), [&](const Tensor& x) { return ln.forward(x); },
      [&](const Tensor& g) { return ln.backward(g); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(GradCheck, ChannelAttentions) {
  Rng rng(10);
  ChannelScale sca("sca", 4);
  sca.init(rng);
  ParamList ps;
  sca.collect(ps);
  auto rep = check_gradients(
      randn({2, 4, 3, 3}, rng), [&](const Tensor& x) { return sca.forward(x); },
      [&](const Tensor& g) { return sca.backward(g); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;

  SigmoidChannelAttention att("att", 4);
  att.init(rng);
  ParamList ps2;
  att.collect(ps2);
  rep = check_gradients(
      randn({2, 4, 3, 3}, rng), [&](const Tensor& x) { return att.forward(x); },
      [&](const Tensor& g) { return att.backward(g); }, ps2, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(GradCheck, LinearGateSiluShuffle) {
  Rng rng(11);
  Linear lin("lin", 6, 5);
  lin.init(rng);
  ParamList ps;
  lin.collect(ps);
  auto rep = check_gradients(
      randn({3, 6, 1, 1}, rng), [&](const Tensor& x) { return lin.forward(x); },
      [&](const Tensor& g) { return lin.backward(g); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;

  SimpleGate gate;
  rep = check_gradients(
      randn({2, 6, 3, 3}, rng), [&](const Tensor& x) { return gate.forward(x); },
      [&](const Tensor& g) { return gate.backward(g); }, {}, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;

  SiLU act;
  rep = check_gradients(
      randn({2, 3, 3, 3}, rng), [&](const Tensor& x) { return act.forward(x); },
      [&](const Tensor& g) { return act.backward(g); }, {}, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;

  rep = check_gradients(
      randn({2, 8, 3, 2}, rng), [&](const Tensor& x) { return PixelShuffle2::forward(x); },
      [&](const Tensor& g) { return PixelShuffle2::backward(g); }, {}, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(GradCheck, ModulateInputAndCondition) {
  Rng rng(12);
  Modulate mod;
  Tensor cond = randn({2, 12, 1, 1}, rng);  // 4 blocks of 3 channels
  Tensor grad_cond = Tensor::like(cond);
  auto rep = check_gradients(
      randn({2, 3, 4, 4}, rng), [&](const Tensor& h) { return mod.forward(h, cond, 2, 1); },
      [&](const Tensor& g) {
        grad_cond.fill(0.0);
        return mod.backward(g, grad_cond);
      },
      {}, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;

  // Gradient with respect to the conditioning vector.
  const Tensor h = randn({2, 3, 4, 4}, rng);
  Param cp("cond", cond.shape());
  cp.value = cond;
  rep = check_gradients(
      h,
      [&](const Tensor& hh) { return mod.forward(hh, cp.value, 2, 1); },
      [&](const Tensor& g) { return mod.backward(g, cp.grad); }, {&cp}, rng,
      GradCheckOptions{.check_input = false});
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(Modulate, ZeroScaleShiftIsIdentity) {
  Rng rng(13);
  Modulate mod;
  const Tensor h = randn({2, 3, 4, 4}, rng);
  EXPECT_EQ(mod.forward(h, Tensor({2, 12, 1, 1}), 0, 1), h);
}

// ---- Time embedding ----

TEST(TimeEmbedding, StepZeroPattern) {
  const auto e = sinusoidal_embedding(0, 16);
  ASSERT_EQ(e.size(), 16u);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(e[i], 0.0);
    EXPECT_EQ(e[i + 8], 1.0);
  }
}

TEST(TimeEmbedding, DeterministicAndInjective) {
  EXPECT_EQ(sinusoidal_embedding(37, 32), sinusoidal_embedding(37, 32));
  std::set<std::vector<double>> seen;
  for (int t = 0; t <= 100; ++t) seen.insert(sinusoidal_embedding(t, 32));
  EXPECT_EQ(seen.size(), 101u);
  // Pairwise distinct by a clear margin, not just in the last bit.
  double min_dist = 1e9;
  for (int a = 0; a <= 100; ++a) {
    const auto ea = sinusoidal_embedding(a, 32);
    for (int b = a + 1; b <= 100; ++b) {
      const auto eb = sinusoidal_embedding(b, 32);
      double d = 0.0;
      for (int i = 0; i < 32; ++i) d += (ea[i] - eb[i]) * (ea[i] - eb[i]);
      min_dist = std::min(min_dist, std::sqrt(d));
    }
  }
  EXPECT_GT(min_dist, 1e-3);
}

// ---- NAFBlock ----

TEST(NafBlock, ZeroedBranchOutputsGiveIdentity) {
  Rng rng(14);
  NafBlock blk("b", 8, 16);
  blk.init(rng);
  for (Param* p : {&blk.conv3.weight, &blk.conv3.bias, &blk.conv5.weight, &blk.conv5.bias}) {
    p->value.fill(0.0);
  }
  const Tensor x = randn({2, 8, 6, 6}, rng);
  const Tensor temb = randn({2, 16, 1, 1}, rng);
  EXPECT_EQ(blk.forward(x, &temb), x);
  EXPECT_EQ(blk.forward(x, nullptr), x);
}

TEST(NafBlock, ZeroModulationMatchesUnmodulated) {
  Rng rng(15);
  NafBlock blk("b", 8, 16);
  blk.init(rng);
  blk.time_proj.weight.value.fill(0.0);
  blk.time_proj.bias.value.fill(0.0);
  const Tensor x = randn({2, 8, 6, 6}, rng);
  const Tensor temb = randn({2, 16, 1, 1}, rng);
  EXPECT_EQ(blk.forward(x, &temb), blk.forward(x, nullptr));
}

TEST(NafBlock, GradientsMatchFiniteDifferences) {
  Rng rng(16);
  NafBlock blk("b", 8, 16);
  blk.init(rng);
  ParamList ps;
  blk.collect(ps);
  // Give every parameter (including zero-initialised ones) a generic value.
  randomize(ps, rng, 0.3);
  Param temb("temb", {2, 16, 1, 1});
  temb.value = randn(temb.value.shape(), rng);
  ps.push_back(&temb);
  const auto rep = check_gradients(
      randn({2, 8, 6, 6}, rng), [&](const Tensor& x) { return blk.forward(x, &temb.value); },
      [&](const Tensor& g) { return blk.backward(g, &temb.grad); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(NafBlock, PlainBlockGradients) {
  Rng rng(17);
  NafBlock blk("b", 6, 0);
  blk.init(rng);
  ParamList ps;
  blk.collect(ps);
  randomize(ps, rng, 0.3);
  const auto rep = check_gradients(
      randn({1, 6, 5, 5}, rng), [&](const Tensor& x) { return blk.forward(x, nullptr); },
      [&](const Tensor& g) { return blk.backward(g, nullptr); }, ps, rng);
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

// ---- Full networks ----

namespace {

NoiseNetConfig tiny_config(Backbone b, int width = 8) {
  NoiseNetConfig cfg;
  cfg.backbone = b;
  cfg.width = width;
  cfg.enc_blocks = {1, 1};
  cfg.mid_blocks = 1;
  cfg.dec_blocks = {1, 1};
  cfg.time_dim = 16;
  return cfg;
}

}  // namespace

TEST(NoiseNetConfig, Validation) {
  NoiseNetConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.width = 7;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = NoiseNetConfig{};
  cfg.dec_blocks = {1, 1};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = NoiseNetConfig{};
  cfg.enc_blocks = {1, 0, 1};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(NoiseNet, OutputShapeMatchesInput) {
  for (Backbone b : {Backbone::nafnet, Backbone::unet}) {
    NoiseNetConfig cfg;
    cfg.backbone = b;
    cfg.width = 8;
    auto net = make_noise_network(cfg, 1);
    Rng rng(18);
    const Tensor xt = randn({2, 3, 64, 64}, rng), mu = randn({2, 3, 64, 64}, rng);
    EXPECT_EQ(net->predict(xt, mu, 5).shape(), (Shape{2, 3, 64, 64})) << to_string(b);
  }
}

TEST(NoiseNet, RejectsIndivisibleSizeWithPadding) {
  NoiseNetConfig cfg;
  cfg.width = 8;
  auto net = make_noise_network(cfg, 1);
  const Tensor x({1, 3, 20, 16});
  try {
    net->predict(x, x, 1);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("4"), std::string::npos) << e.what();
  }
}

TEST(NoiseNet, BatchPermutationEquivariance) {
  for (Backbone b : {Backbone::nafnet, Backbone::unet}) {
    auto net = make_noise_network(tiny_config(b), 2);
    Rng rng(19);
    const Tensor xt = randn({3, 3, 8, 8}, rng), mu = randn({3, 3, 8, 8}, rng);
    const std::vector<int> steps{4, 9, 1};
    const Tensor out = net->forward(xt, mu, steps);
    const std::vector<int> perm{2, 0, 1};
    Tensor pxt(xt.shape()), pmu(mu.shape());
    std::vector<int> psteps(3);
    for (int i = 0; i < 3; ++i) {
      pxt.set_sample(i, xt, perm[i]);
      pmu.set_sample(i, mu, perm[i]);
      psteps[i] = steps[perm[i]];
    }
    const Tensor pout = net->forward(pxt, pmu, psteps);
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(pout.batch_slice(i, 1), out.batch_slice(perm[i], 1)) << to_string(b);
    }
  }
}

TEST(NoiseNet, TimeSensitivity) {
  for (Backbone b : {Backbone::nafnet, Backbone::unet}) {
    auto net = make_noise_network(tiny_config(b), 3);
    Rng rng(20);
    const Tensor xt = randn({1, 3, 8, 8}, rng), mu = randn({1, 3, 8, 8}, rng);
    const Tensor a = net->predict(xt, mu, 1), c = net->predict(xt, mu, 100);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - c[i]));
    EXPECT_GT(diff, 0.0) << to_string(b);
  }
}

TEST(NoiseNet, NafNetFullGradientCheck) {
  NoiseNetConfig cfg = tiny_config(Backbone::nafnet);
  auto net = make_noise_network(cfg, 4);
  Rng rng(21);
  randomize(net->params(), rng, 0.3);
  const Tensor mu = randn({2, 3, 16, 16}, rng);
  const std::vector<int> steps{3, 17};
  const auto rep = check_gradients(
      randn({2, 3, 16, 16}, rng),
      [&](const Tensor& x) { return net->forward(x, mu, steps); },
      [&](const Tensor& g) {
        net->backward(g);
        return Tensor();
      },
      net->params(), rng, GradCheckOptions{.check_input = false});
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
  EXPECT_GT(rep.checked, 100);
}

TEST(NoiseNet, UNetFullGradientCheck) {
  NoiseNetConfig cfg = tiny_config(Backbone::unet);
  auto net = make_noise_network(cfg, 5);
  Rng rng(22);
  randomize(net->params(), rng, 0.3);
  const Tensor mu = randn({1, 3, 8, 8}, rng);
  const std::vector<int> steps{7};
  const auto rep = check_gradients(
      randn({1, 3, 8, 8}, rng), [&](const Tensor& x) { return net->forward(x, mu, steps); },
      [&](const Tensor& g) {
        net->backward(g);
        return Tensor();
      },
      net->params(), rng, GradCheckOptions{.check_input = false});
  EXPECT_LE(rep.max_rel, kGradTol) << rep.worst;
}

TEST(NoiseNet, ParameterNamesAreUnique) {
  for (Backbone b : {Backbone::nafnet, Backbone::unet}) {
    auto net = make_noise_network(NoiseNetConfig{.backbone = b}, 6);
    std::set<std::string> names;
    for (Param* p : net->params()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  }
}

TEST(NoiseNet, DeterministicInitialisation) {
  auto a = make_noise_network(tiny_config(Backbone::nafnet), 9);
  auto b = make_noise_network(tiny_config(Backbone::nafnet), 9);
  const auto pa = a->params(), pb = b->params();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
}
