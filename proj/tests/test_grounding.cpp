#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "support.hpp"
#include "visionlogic/grounding.hpp"
#include "visionlogic/png_io.hpp"

using namespace visionlogic;

namespace {

Image random_image(Rng& rng, int c, int h, int w) {
  Image img(c, h, w);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

struct Oracle {
  const TeacherBundle* b;
  Engine engine;
  PredicateSpec p;
  std::vector<int> images;
};

/// Channel 6 fires on white-filled squares; threshold halfway between
/// the quietest firing image and the loudest other image.
const Oracle& oracle() {
  static const Oracle o = [] {
    const auto& b = vltest::relu();
    const auto info = parse_json_file(vltest::fixture_dir() / "fixture_info.json");
    const int ch = info.at("oracle_channel").get<int>();
    std::vector<int> ws = info.at("white_square_images").get<std::vector<int>>();
    double lo_on = INFINITY, hi_off = -INFINITY;
    for (int i = 0; i < b.dump.n_examples; ++i) {
      const bool on = std::binary_search(ws.begin(), ws.end(), i);
      const double z = b.dump.z(i, ch);
      if (on) lo_on = std::min(lo_on, z);
      else hi_off = std::max(hi_off, z);
    }
    PredicateSpec p;
    p.id = 0;
    p.channel = ch;
    p.T = 0.5 * (lo_on + std::max(hi_off, 0.0));
    p.valid = true;
    return Oracle{&b, Engine(b.model), p, ws};
  }();
  return o;
}

Image load_image(int i) { return png::read_rgb(oracle().b->dataset.image(static_cast<std::size_t>(i))); }
Mask load_mask(int i) { return png::read_mask(*oracle().b->dataset.mask(static_cast<std::size_t>(i))); }

}  // namespace

TEST(Grounding, MaskingLeavesOutsidePixelsBitIdentical) {
  Rng rng(1);
  const Image img = random_image(rng, 3, 32, 40);
  const BBox box{5, 7, 12, 9};
  for (auto k : {MaskKind::Noise, MaskKind::Blur, MaskKind::Mean, MaskKind::Black, MaskKind::White}) {
    Rng r(2);
    const Image out = mask_region(img, box, k, r);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
          if (box.contains(x, y)) {
            EXPECT_GE(out.at(c, y, x), 0.0f);
            EXPECT_LE(out.at(c, y, x), 1.0f);
            if (k == MaskKind::Black) EXPECT_EQ(out.at(c, y, x), 0.0f);
            if (k == MaskKind::White) EXPECT_EQ(out.at(c, y, x), 1.0f);
          } else {
            EXPECT_EQ(out.at(c, y, x), img.at(c, y, x)) << to_string(k);
          }
        }
  }
  Rng r(3);
  EXPECT_THROW((void)mask_region(img, BBox{30, 0, 20, 5}, MaskKind::Black, r), Error);
}

TEST(Grounding, BlurAndMeanOfConstantImageAreUnchanged) {
  const Image img(3, 20, 20, 0.25f);
  Rng rng(0);
  for (auto k : {MaskKind::Blur, MaskKind::Mean}) {
    const Image out = mask_region(img, BBox{2, 2, 10, 10}, k, rng);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(out.data[i], 0.25f, 1e-6);
  }
}

TEST(Grounding, PasteOnNoiseKeepsBoxContent) {
  Rng rng(4);
  const Image img = random_image(rng, 3, 16, 16);
  const BBox box{3, 4, 5, 6};
  const Image out = paste_on_noise(img, box, rng);
  for (int c = 0; c < 3; ++c)
    for (int y = box.y; y < box.y + box.h; ++y)
      for (int x = box.x; x < box.x + box.w; ++x) EXPECT_EQ(out.at(c, y, x), img.at(c, y, x));
}

TEST(Grounding, ProposeShrinkRespectsAreaBandAndContainment) {
  Rng rng(5);
  const BBox box{0, 0, 100, 100};
  for (int t = 0; t < 500; ++t) {
    const BBox b = propose_shrink(box, 0.9, rng);
    EXPECT_GE(b.area(), 8100);
    EXPECT_LE(b.area(), 9900);
    EXPECT_TRUE(b.inside(box));
    EXPECT_GE(std::min(b.w, b.h), kMinBoxSide);
  }
  Rng a(9), b(9);
  for (int t = 0; t < 20; ++t) EXPECT_EQ(propose_shrink(BBox{3, 5, 40, 30}, 0.7, a), propose_shrink(BBox{3, 5, 40, 30}, 0.7, b));
  try {
    (void)propose_shrink(BBox{0, 0, 4, 4}, 0.9, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::TooSmall);
  }
}

TEST(Grounding, InitialGuessFromMapExamples) {
  Tensor3 fm(1, 8, 8);
  fm.at(0, 2, 3) = fm.at(0, 2, 4) = fm.at(0, 3, 3) = fm.at(0, 3, 4) = 1.0f;
  fm.at(0, 7, 0) = 0.9f;
  PredicateSpec p;
  p.channel = 0;
  GroundingConfig cfg;
  // 8x8 map over 64x64 pixels: 2x2 cells at (3,2) cover x 24..39, y 16..31
  EXPECT_EQ(initial_guess_from_map(fm, p, 64, 64, cfg), (BBox{24, 16, 16, 16}));

  const BBox central = central_box(64, 64, 0.9);
  EXPECT_EQ(initial_guess_from_map(Tensor3(1, 8, 8), p, 64, 64, cfg), central);
  EXPECT_EQ(initial_guess_from_map(std::nullopt, p, 64, 64, cfg), central);
  EXPECT_NEAR(static_cast<double>(central.area()) / (64 * 64), 0.9, 0.02);

  // the negative branch looks at the most negative cells
  Tensor3 neg(1, 8, 8);
  neg.at(0, 6, 6) = -2.0f;
  p.branch = Branch::Negative;
  EXPECT_EQ(initial_guess_from_map(neg, p, 64, 64, cfg), (BBox{48, 48, 8, 8}));
}

TEST(Grounding, LargestComponentTieGoesToRasterOrder) {
  std::vector<float> m{1, 0, 1, 0, 0, 0, 0, 0, 0};
  EXPECT_EQ(largest_component(m, 3, 3, 0.5f), (BBox{0, 0, 1, 1}));
  EXPECT_FALSE(largest_component(std::vector<float>(9, 0.0f), 3, 3, 0.5f).has_value());
}

TEST(Grounding, SufficiencyOfWholeImageEqualsPredicateValue) {
  const auto& o = oracle();
  for (int i : {o.images[0], 1, 2}) {
    const Image img = load_image(i);
    Rng rng(1);
    EXPECT_EQ(sufficiency_check(o.engine, img, BBox{0, 0, img.w, img.h}, o.p, rng),
              evaluate_predicate_on_image(o.engine, o.p, img));
  }
}

TEST(Grounding, InactivePredicateIsRejected) {
  const auto& o = oracle();
  int off = 0;
  while (std::binary_search(o.images.begin(), o.images.end(), off)) ++off;
  ASSERT_FALSE(evaluate_predicate_on_image(o.engine, o.p, load_image(off)));
  try {
    (void)locate_critical_region(o.engine, load_image(off), o.p, GroundingConfig{}, off);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::PredicateInactive);
  }
}

TEST(Grounding, OracleChannelFollowsTheSquare) {
  const auto& o = oracle();
  const int i = o.images[0];
  const Image img = load_image(i);
  const BBox sq = *tight_box(load_mask(i));
  ASSERT_TRUE(evaluate_predicate_on_image(o.engine, o.p, img));
  Rng rng(3);
  EXPECT_TRUE(necessity_check(o.engine, img, sq, o.p, MaskKind::Black, rng));
  EXPECT_TRUE(sufficiency_check(o.engine, img, sq, o.p, rng));
  // a box disjoint from the square changes nothing about it
  BBox away{0, 0, 8, 8};
  if (iou(away, sq) > 0) away = BBox{img.w - 8, img.h - 8, 8, 8};
  ASSERT_EQ(iou(away, sq), 0.0);
  EXPECT_FALSE(necessity_check(o.engine, img, away, o.p, MaskKind::Black, rng));
}

TEST(Grounding, SearchIsMonotoneAndDeterministic) {
  const auto& o = oracle();
  GroundingConfig cfg;
  cfg.rng_seed = 17;
  cfg.trials = 2;
  cfg.strategy = MaskKind::Black;
  for (int n = 0; n < 2; ++n) {
    const int i = o.images[static_cast<std::size_t>(n)];
    const Image img = load_image(i);
    const auto r = locate_critical_region(o.engine, img, o.p, cfg, i);
    ASSERT_EQ(r.status, GroundingStatus::Ok);
    EXPECT_LE(r.final_box.area(), r.initial_box.area());
    EXPECT_TRUE(r.final_box.inside(r.initial_box));
    for (const auto& t : r.trials) {
      BBox cur = r.initial_box;
      for (const auto& pr : t.proposals) {
        EXPECT_TRUE(pr.box.inside(cur));
        EXPECT_LT(pr.box.area(), cur.area());
        if (pr.accepted) cur = pr.box;
      }
      EXPECT_EQ(cur, t.final_box);
      EXPECT_GE(t.final_box.area(), r.final_box.area());
    }
    EXPECT_TRUE(r.necessity);
    EXPECT_TRUE(r.sufficiency);
    const auto [nec, suf] = replay_checks(o.engine, img, r.final_box, o.p, r.strategy, r.necessity_seed, r.sufficiency_seed);
    EXPECT_TRUE(nec);
    EXPECT_TRUE(suf);
    EXPECT_EQ(locate_critical_region(o.engine, img, o.p, cfg, i), r);
  }
}

TEST(Grounding, SegmentationRefineExamples) {
  const auto& o = oracle();
  const int i = o.images[0];
  const Image img = load_image(i);
  const Mask sq = load_mask(i);
  const BBox tight = *tight_box(sq);

  Mask full{img.h, img.w, std::vector<std::uint8_t>(static_cast<std::size_t>(img.h * img.w), 1)};
  const auto same = segmentation_refine(o.engine, img, tight, full, o.p, MaskKind::Black, 1, 2);
  ASSERT_TRUE(same.has_value());
  EXPECT_EQ(*same, tight);

  Mask empty{img.h, img.w, std::vector<std::uint8_t>(static_cast<std::size_t>(img.h * img.w), 0)};
  EXPECT_FALSE(segmentation_refine(o.engine, img, tight, empty, o.p, MaskKind::Black, 1, 2).has_value());

  const auto refined = segmentation_refine(o.engine, img, BBox{0, 0, img.w, img.h}, sq, o.p, MaskKind::Black, 3, 4);
  ASSERT_TRUE(refined.has_value());
  EXPECT_EQ(*refined, tight);
  const auto [nec, suf] = replay_checks(o.engine, img, *refined, o.p, MaskKind::Black, 3, 4);
  EXPECT_TRUE(nec && suf);

  Mask wrong{8, 8, std::vector<std::uint8_t>(64, 1)};
  EXPECT_THROW((void)segmentation_refine(o.engine, img, tight, wrong, o.p, MaskKind::Black, 1, 2), Error);
}

TEST(Grounding, OverlayTouchesOnlyTheBoxes) {
  Rng rng(6);
  const Image img = random_image(rng, 3, 24, 24);
  GroundingResult r;
  r.final_box = {4, 5, 10, 8};
  r.refined_box = BBox{6, 7, 3, 3};
  const Image out = render_overlay(img, r);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x) {
      const bool touched = r.final_box.contains(x, y);
      for (int c = 0; c < 3; ++c)
        if (!touched) EXPECT_EQ(out.at(c, y, x), img.at(c, y, x));
    }
  EXPECT_EQ(out.at(0, 5, 4), 1.0f);
  EXPECT_EQ(out.at(1, 5, 4), 0.0f);
  EXPECT_EQ(render_overlay(img, r), out);

  r.final_box = {20, 20, 10, 10};
  r.refined_box.reset();
  const Image clipped = render_overlay(img, r);
  EXPECT_EQ(clipped.at(0, 23, 23), img.at(0, 23, 23));
  EXPECT_EQ(clipped.at(0, 20, 22), 1.0f);
}
