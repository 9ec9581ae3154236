#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"
#include "visionlogic/nnforward.hpp"
#include "visionlogic/png_io.hpp"

using namespace visionlogic;

namespace {

struct Builder {
  Model model;
  void input(int c, int h, int w) { model.manifest.input_shape = {c, h, w}; }
  void conv(int out, int k, int pad, std::vector<float> w, std::vector<float> b = {}) {
    LayerDescriptor l;
    l.kind = LayerKind::Conv2d;
    l.out_channels = out;
    l.kernel = k;
    l.padding = pad;
    add_params(l, std::move(w), std::move(b));
  }
  void linear(int out, std::vector<float> w, std::vector<float> b = {}) {
    LayerDescriptor l;
    l.kind = LayerKind::Linear;
    l.out_features = out;
    add_params(l, std::move(w), std::move(b));
  }
  void plain(LayerKind k, int kernel = 0, int stride = 1) {
    LayerDescriptor l;
    l.kind = k;
    l.kernel = kernel;
    l.stride = stride;
    model.manifest.layers.push_back(l);
  }
  void add_params(LayerDescriptor& l, std::vector<float> w, std::vector<float> b) {
    const auto n = std::to_string(model.manifest.layers.size());
    l.weight = "w" + n;
    model.tensors[l.weight] = std::move(w);
    if (!b.empty()) {
      l.bias = "b" + n;
      model.tensors[l.bias] = std::move(b);
    }
    model.manifest.layers.push_back(l);
  }
};

PredicateSpec spec(int channel, double T, Branch b = Branch::Plain) {
  PredicateSpec p;
  p.channel = channel;
  p.T = T;
  p.branch = b;
  return p;
}

}  // namespace

TEST(NnForward, IdentityConvThenPoolReturnsConstant) {
  Builder b;
  b.input(3, 5, 5);
  b.conv(3, 1, 0, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  b.plain(LayerKind::GlobalAvgPool);
  b.linear(2, std::vector<float>(6, 0.0f));
  const Engine e(b.model);
  const auto t = e.forward(Image(3, 5, 5, 0.37f));
  ASSERT_EQ(t.z.size(), 3u);
  for (float v : t.z) EXPECT_FLOAT_EQ(v, 0.37f);
  ASSERT_TRUE(t.feature_maps.has_value());
  EXPECT_EQ(t.feature_maps->h, 5);
}

TEST(NnForward, LinearLayerArithmetic) {
  Builder b;
  b.input(2, 1, 1);
  b.linear(2, {2, 0, 0, 3}, {1, -1});
  const Engine e(b.model);
  Image x(2, 1, 1, 1.0f);
  const auto t = e.forward(x);
  EXPECT_EQ(t.logits, (std::vector<float>{3.0f, 2.0f}));
  EXPECT_FALSE(t.feature_maps.has_value());
}

TEST(NnForward, PaddedConvAndMaxPoolByHand) {
  Builder b;
  b.input(1, 3, 3);
  b.conv(1, 3, 1, std::vector<float>(9, 1.0f), {0.5f});
  b.plain(LayerKind::MaxPool, 2, 1);
  b.plain(LayerKind::GlobalAvgPool);
  b.linear(1, {1});
  const Engine e(b.model);
  Image x(1, 3, 3);
  for (int i = 0; i < 9; ++i) x.data[static_cast<std::size_t>(i)] = static_cast<float>(i) / 10.0f;
  // 3x3 box sums with zero padding, plus bias
  const float s[3][3] = {{0.8f, 1.5f, 1.2f}, {2.1f, 3.6f, 2.7f}, {2.0f, 3.3f, 2.4f}};
  float expect = 0.0f;
  for (int y = 0; y < 2; ++y)
    for (int xx = 0; xx < 2; ++xx)
      expect += std::max({s[y][xx], s[y][xx + 1], s[y + 1][xx], s[y + 1][xx + 1]}) + 0.5f;
  EXPECT_NEAR(e.forward(x).z[0], expect / 4.0f, 1e-6);
}

TEST(NnForward, GeluValues) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_LT(std::abs(gelu(10.0) - 10.0), 1e-6);
  EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
  EXPECT_NEAR(gelu(-1.0), -0.158655, 1e-6);
}

TEST(NnForward, GeluOfZeroActivationsIsZero) {
  Builder b;
  b.input(1, 4, 4);
  b.conv(2, 1, 0, {0, 0});
  b.plain(LayerKind::Gelu);
  b.plain(LayerKind::GlobalAvgPool);
  b.linear(1, {1, 1});
  const auto t = Engine(b.model).forward(Image(1, 4, 4, 0.9f));
  EXPECT_EQ(t.z, (std::vector<float>{0.0f, 0.0f}));
}

TEST(NnForward, WrongImageSizeIsShapeMismatch) {
  Builder b;
  b.input(2, 1, 1);
  b.linear(1, {1, 1});
  try {
    (void)Engine(b.model).forward(Image(3, 1, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
  }
}

TEST(NnForward, HardGateConventions) {
  ForwardTrace t{{0.5f, 0.3f, -1.2f}, {}, std::nullopt};
  EXPECT_TRUE(evaluate_predicate(t, spec(0, 0.3)));
  EXPECT_TRUE(evaluate_predicate(t, spec(1, static_cast<double>(0.3f))));
  EXPECT_FALSE(evaluate_predicate(t, spec(1, 0.31)));
  EXPECT_TRUE(evaluate_predicate(t, spec(2, -1.0, Branch::Negative)));
  EXPECT_FALSE(evaluate_predicate(t, spec(2, -1.3, Branch::Negative)));
  try {
    (void)evaluate_predicate(t, spec(3, 0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ChannelOutOfRange);
  }
}

TEST(NnForward, FixtureReplayMatchesDumpAndIsDeterministic) {
  const auto& b = vltest::relu();
  const Engine e(b.model);
  for (int i : {0, 1, 2, 300, 749}) {
    const auto img = png::read_rgb(b.dataset.image(static_cast<std::size_t>(i)));
    const auto t1 = e.forward(img);
    const auto t2 = e.forward(img);
    EXPECT_EQ(t1.z, t2.z);
    EXPECT_EQ(t1.logits, t2.logits);
    for (int j = 0; j < b.dump.d; ++j) EXPECT_NEAR(t1.z[static_cast<std::size_t>(j)], b.dump.z(i, j), 1e-4);
    const auto head = apply_head(b.head, t1.z);
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(t1.logits[static_cast<std::size_t>(c)], head[static_cast<std::size_t>(c)]);
      EXPECT_NEAR(t1.logits[static_cast<std::size_t>(c)], b.dump.logit(i, c), 1e-4);
    }
    ASSERT_TRUE(t1.feature_maps.has_value());
    const auto& fm = *t1.feature_maps;
    for (int j = 0; j < fm.c; ++j) {
      double s = 0.0;
      for (int k = 0; k < fm.h * fm.w; ++k) s += fm.plane(j)[k];
      const double mean = s / (fm.h * fm.w), z = t1.z[static_cast<std::size_t>(j)];
      EXPECT_LE(std::abs(mean - z), 1e-5 * std::max(1.0, std::abs(z)));
    }
  }
}

TEST(NnForward, GeluFixtureReplayMatchesDump) {
  const auto& b = vltest::gelu();
  const Engine e(b.model);
  for (int i : {5, 77, 610}) {
    const auto t = e.forward(png::read_rgb(b.dataset.image(static_cast<std::size_t>(i))));
    for (int j = 0; j < b.dump.d; ++j) EXPECT_NEAR(t.z[static_cast<std::size_t>(j)], b.dump.z(i, j), 1e-4);
  }
}
