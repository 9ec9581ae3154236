#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"
#include "visionlogic/predicates.hpp"

using namespace visionlogic;

namespace {

struct Micro {
  ActivationDump dump;
  HeadWeights head;
};

/// One class, `rows` examples; every example is labeled 0 and teacher-correct.
Micro micro(int d, const std::vector<std::vector<float>>& rows, std::vector<float> w) {
  Micro m;
  m.dump.n_examples = static_cast<int>(rows.size());
  m.dump.d = d;
  m.dump.n_classes = 1;
  for (const auto& r : rows) {
    m.dump.Z.insert(m.dump.Z.end(), r.begin(), r.end());
    m.dump.teacher_logits.push_back(0.0f);
    m.dump.labels.push_back(0);
    m.dump.teacher_correct.push_back(true);
  }
  m.head.n_classes = 1;
  m.head.d = d;
  m.head.W = std::move(w);
  m.head.b = {0.0f};
  return m;
}

Micro random_micro(Rng& rng, int n, int d, int C) {
  Micro m;
  m.dump.n_examples = n;
  m.dump.d = d;
  m.dump.n_classes = C;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m.dump.Z.push_back(static_cast<float>(rng.uniform(0.0, 3.0)));
    for (int c = 0; c < C; ++c) m.dump.teacher_logits.push_back(static_cast<float>(rng.normal()));
    m.dump.labels.push_back(i % C);
  }
  for (int i = 0; i < n; ++i) m.dump.teacher_correct.push_back(m.dump.teacher_pred(i) == m.dump.labels[static_cast<std::size_t>(i)] || i < C);
  m.head.n_classes = C;
  m.head.d = d;
  for (int k = 0; k < C * d; ++k) m.head.W.push_back(static_cast<float>(rng.normal()));
  m.head.b.assign(static_cast<std::size_t>(C), 0.0f);
  return m;
}

const TrainResult& relu_run() {
  static const TrainResult r = [] {
    const auto& b = vltest::relu();
    return train_thresholds(b.dump, b.head, b.dataset.indices(Split::Train), signed_head(b.model.manifest), TrainConfig{});
  }();
  return r;
}

}  // namespace

TEST(Predicates, MostRepresentativeChannelExamples) {
  auto a = micro(2, {{5, 3}}, {1, 1});
  EXPECT_EQ(most_representative_channel(a.dump, a.head, 0), 0);
  auto b = micro(2, {{1, 4}, {0.5f, 2}}, {1, 1});
  EXPECT_EQ(most_representative_channel(b.dump, b.head, 0), 1);
  auto tie = micro(2, {{1, 2}, {2, 1}}, {1, 1});
  EXPECT_EQ(most_representative_channel(tie.dump, tie.head, 0), 0);
}

TEST(Predicates, MostRepresentativeChannelMatchesBruteForce) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    std::vector<std::vector<float>> rows(4, std::vector<float>(3));
    for (auto& r : rows)
      for (auto& v : r) v = static_cast<float>(rng.uniform(-2, 2));
    std::vector<float> w{static_cast<float>(rng.normal()), static_cast<float>(rng.normal()), static_cast<float>(rng.normal())};
    auto m = micro(3, rows, w);
    // brute force: count, for each channel, how many channels beat it per example
    std::vector<int> total(3, 0);
    for (const auto& r : rows)
      for (int j = 0; j < 3; ++j) {
        int rank = 1;
        for (int l = 0; l < 3; ++l) {
          const double ul = w[static_cast<std::size_t>(l)] * r[static_cast<std::size_t>(l)];
          const double uj = w[static_cast<std::size_t>(j)] * r[static_cast<std::size_t>(j)];
          if (ul > uj || (ul == uj && l < j)) ++rank;
        }
        total[static_cast<std::size_t>(j)] += rank;
      }
    const int expect = static_cast<int>(std::min_element(total.begin(), total.end()) - total.begin());
    EXPECT_EQ(most_representative_channel(m.dump, m.head, 0), expect);
  }
}

TEST(Predicates, EmptyClassIsReported) {
  auto m = micro(2, {{1, 2}}, {1, 1});
  m.dump.teacher_correct[0] = false;
  try {
    (void)most_representative_channel(m.dump, m.head, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyClass);
  }
}

TEST(Predicates, RankingIsBiasInvariant) {
  const auto& b = vltest::relu();
  HeadWeights shifted = b.head;
  for (auto& v : shifted.b) v += 17.5f;
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(most_representative_channel(b.dump, b.head, c), most_representative_channel(b.dump, shifted, c));
    EXPECT_EQ(optim::within_example_rank(contributions(b.dump, b.head, 3, c)),
              optim::within_example_rank(contributions(b.dump, shifted, 3, c)));
  }
}

TEST(Predicates, InfluentialSelectionExamples) {
  auto top = micro(3, {{9, 1, 2}}, {1, 1, 1});
  EXPECT_EQ(select_influential(top.dump, top.head, 0, 3, {0}), std::vector<int>{0});
  std::vector<float> row(32);
  for (int j = 0; j < 32; ++j) row[static_cast<std::size_t>(j)] = static_cast<float>(32 - j);
  auto last = micro(32, {row}, std::vector<float>(32, 1.0f));
  EXPECT_TRUE(select_influential(last.dump, last.head, 31, 3, {0}, 1e-4).empty());
}

TEST(Predicates, InfluentialSelectionMatchesHardTopK) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    auto m = random_micro(rng, 12, 8, 2);
    std::vector<int> all(12);
    std::iota(all.begin(), all.end(), 0);
    const auto sets = influential_sets(m.dump, m.head, all, 3, 1e-4);
    for (int j = 0; j < 8; ++j) {
      std::vector<int> expect;
      for (int i : all) {
        if (!m.dump.teacher_correct[static_cast<std::size_t>(i)]) continue;
        const int c = m.dump.labels[static_cast<std::size_t>(i)];
        const double uj = m.head.w(c, j) * m.dump.z(i, j);
        int above = 0;
        for (int l = 0; l < 8; ++l) {
          const double ul = m.head.w(c, l) * m.dump.z(i, l);
          if (ul > uj || (ul == uj && l < j)) ++above;
        }
        if (above < 3) expect.push_back(i);
      }
      EXPECT_EQ(sets[static_cast<std::size_t>(j)], expect);
    }
  }
}

TEST(Predicates, QuantileRule) {
  EXPECT_NEAR(quantile({5, 3, 1, 4, 2}, 0.8), 4.2, 1e-12);
  EXPECT_EQ(quantile({7}, 0.8), 7.0);
  EXPECT_THROW((void)quantile({}, 0.5), Error);
}

TEST(Predicates, SeedsFallBackToGlobalQuantile) {
  // channel 2 is never among the top-1 contributions, so it has no influential examples
  auto m = micro(3, {{5, 1, 0.1f}, {1, 6, 0.2f}, {4, 2, 0.3f}, {2, 5, 0.4f}, {3, 3, 0.5f}}, {1, 1, 1});
  TrainConfig cfg;
  cfg.influential_k = 1;
  const std::vector<int> train{0, 1, 2, 3, 4};
  const auto voc = build_vocabulary(m.dump, train, false);
  const auto seeds = seed_thresholds(m.dump, m.head, voc, train, cfg);
  ASSERT_TRUE(seeds.influential[2].empty());
  EXPECT_NEAR(seeds.T0[2], quantile({0.1, 0.2, 0.3, 0.4, 0.5}, 0.8), 1e-7);
  EXPECT_NEAR(seeds.T0[0], quantile({5, 4, 3}, 0.8), 1e-7);
}

TEST(Predicates, VocabularyBranchesFollowHeadActivation) {
  const auto& r = vltest::relu();
  const auto rv = build_vocabulary(r.dump, r.dataset.indices(Split::Train), signed_head(r.model.manifest));
  EXPECT_TRUE(std::none_of(rv.gates.begin(), rv.gates.end(), [](const optim::GateSlot& g) { return g.negative; }));
  const auto& g = vltest::gelu();
  EXPECT_TRUE(signed_head(g.model.manifest));
  const auto gv = build_vocabulary(g.dump, g.dataset.indices(Split::Train), true);
  EXPECT_TRUE(std::any_of(gv.gates.begin(), gv.gates.end(), [](const optim::GateSlot& s) { return s.negative; }));
}

TEST(Predicates, RankWindowAndValidity) {
  EXPECT_EQ(pick_rank_window({0.9, 0.1, 0.0}, 1e-3), 1);
  EXPECT_EQ(pick_rank_window({0.1, 0.2, 0.3}, 1e-3), 3);
  EXPECT_EQ(pick_rank_window({5e-4, 1e-4, 0.0}, 1e-3), std::nullopt);

  auto m = micro(2, {{1, 0}, {2, 0}, {3, 0}}, {1, 1});
  PredicateSet ps;
  ps.predicates.resize(3);
  ps.predicates[0].channel = 0;
  ps.predicates[0].T = 10.0;  // never fires
  ps.predicates[1].channel = 0;
  ps.predicates[1].T = 0.5;  // always fires
  ps.predicates[2].channel = 0;
  ps.predicates[2].T = 2.0;  // fires on two of three
  harden(ps, m.dump, {0, 1, 2});
  EXPECT_FALSE(ps.predicates[0].valid);
  EXPECT_FALSE(ps.predicates[1].valid);
  EXPECT_TRUE(ps.predicates[2].valid);
}

TEST(Predicates, TrainingOnReluFixture) {
  const auto& b = vltest::relu();
  const auto& r = relu_run();
  ASSERT_FALSE(r.log.empty());
  double best = INFINITY;
  for (const auto& e : r.log) {
    EXPECT_LE(e.best_val_kl, best);
    best = e.best_val_kl;
    EXPECT_TRUE(std::isfinite(e.train_kl));
  }
  EXPECT_GE(r.predicates.n_valid(), 1);
  const auto train = b.dataset.indices(Split::Train);
  for (const auto& p : r.predicates.predicates) {
    EXPECT_EQ(p.branch, Branch::Plain);
    const auto v = channel_values(b.dump, p.channel, train);
    EXPECT_GE(p.T, *std::min_element(v.begin(), v.end()));
    EXPECT_LE(p.T, *std::max_element(v.begin(), v.end()));
    EXPECT_GE(p.s, optim::kSharpMin);
    EXPECT_LE(p.s, optim::kSharpMax);
  }
  EXPECT_EQ(r.rule_head.m, r.vocabulary.n_features());
  EXPECT_EQ(static_cast<int>(r.rule_head.W.size()), 3 * r.rule_head.m);
}

TEST(Predicates, TrainingIsDeterministic) {
  const auto& b = vltest::relu();
  const auto again = train_thresholds(b.dump, b.head, b.dataset.indices(Split::Train), false, TrainConfig{});
  EXPECT_EQ(again.predicates, relu_run().predicates);
  EXPECT_EQ(again.rule_head, relu_run().rule_head);
}

TEST(Predicates, HeavyUsagePenaltyShrinksRankUsage) {
  const auto& b = vltest::relu();
  TrainConfig cfg;
  cfg.lambda_use = 50.0;
  cfg.max_epochs = 10;
  cfg.patience = 10;
  const auto heavy = train_thresholds(b.dump, b.head, b.dataset.indices(Split::Train), false, cfg);
  cfg.lambda_use = 0.0;
  const auto none = train_thresholds(b.dump, b.head, b.dataset.indices(Split::Train), false, cfg);
  auto total = [](const TrainResult& r) {
    double s = 0.0;
    for (const auto& p : r.predicates.predicates)
      for (double u : p.usage) s += std::abs(u);
    return s;
  };
  EXPECT_LT(total(heavy), total(none));
}

TEST(Predicates, GeluFixtureHasValidNegativePredicate) {
  const auto& b = vltest::gelu();
  const auto r = train_thresholds(b.dump, b.head, b.dataset.indices(Split::Train), true, TrainConfig{});
  EXPECT_EQ(r.predicates.head_activation, "gelu");
  EXPECT_TRUE(std::any_of(r.predicates.predicates.begin(), r.predicates.predicates.end(),
                          [](const PredicateSpec& p) { return p.branch == Branch::Negative && p.valid; }));
}

TEST(Predicates, InvalidConfigIsRejected) {
  TrainConfig cfg;
  cfg.patience = 40;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.lr_gates = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
}
