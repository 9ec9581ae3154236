#include <gtest/gtest.h>

#include <algorithm>
#include <map>

#include "support.hpp"
#include "visionlogic/predicates.hpp"
#include "visionlogic/rules.hpp"

using namespace visionlogic;

namespace {

PredicateVector bits(const std::string& s) { return bits_to_vector(s); }

/// Profile with explicit ranks; every predicate valid.
ClassProfile profile_from(const std::vector<std::vector<int>>& ranks) {
  ClassProfile p;
  p.n_classes = static_cast<int>(ranks.size());
  p.m = static_cast<int>(ranks.front().size());
  for (int i = 0; i < p.m; ++i) p.valid_ids.push_back(i);
  p.rank = ranks;
  return p;
}

ClassProfile random_profile(Rng& rng, int C, int m) {
  std::vector<PredicateVector> vecs;
  std::vector<int> labels;
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < 8; ++n) {
      PredicateVector v(static_cast<std::size_t>(m));
      for (auto& x : v) x = rng.uniform() < 0.3;
      vecs.push_back(v);
      labels.push_back(c);
    }
  const auto cs = extract_clauses(vecs, labels, std::vector<bool>(vecs.size(), true), C);
  return build_profiles(cs, std::vector<bool>(static_cast<std::size_t>(m), true));
}

}  // namespace

TEST(Rules, ExtractClausesExamples) {
  auto cs = extract_clauses({bits("101"), bits("101"), bits("101")}, {0, 0, 0}, {true, true, true}, 1);
  ASSERT_EQ(cs.clauses[0].size(), 1u);
  EXPECT_EQ(cs.clauses[0].at(bits("101")), 3);

  cs = extract_clauses({bits("10"), bits("01")}, {0, 0}, {true, true}, 1);
  EXPECT_EQ(cs.clauses[0].size(), 2u);
  EXPECT_EQ(cs.clauses[0].at(bits("10")), 1);
  EXPECT_EQ(cs.clauses[0].at(bits("01")), 1);

  cs = extract_clauses({bits("10"), bits("01")}, {0, 1}, {true, false}, 2);
  EXPECT_EQ(cs.clauses[0].size(), 1u);
  EXPECT_TRUE(cs.clauses[1].empty());
}

TEST(Rules, ProfileExamples) {
  // a = id 0 appears 5 times, b = id 1 twice, id 2 never
  ClauseSet cs;
  cs.n_classes = 1;
  cs.m = 3;
  cs.clauses = {{{bits("110"), 2}, {bits("100"), 3}}};
  auto p = build_profiles(cs, {true, true, true});
  EXPECT_EQ(p.rank_of(0, 0), 1);
  EXPECT_EQ(p.rank_of(0, 1), 2);
  EXPECT_EQ(p.rank_of(0, 2), 4);

  cs.clauses = {{{bits("011"), 3}}};
  p = build_profiles(cs, {true, true, true});
  EXPECT_EQ(p.rank_of(0, 1), 1);
  EXPECT_EQ(p.rank_of(0, 2), 2);

  cs.clauses = {{}};
  EXPECT_THROW((void)build_profiles(cs, {true, true, true}), Error);
}

TEST(Rules, ProfileMatchesRecount) {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    const int C = 1 + static_cast<int>(rng.below(4)), m = 2 + static_cast<int>(rng.below(10));
    ClauseSet cs;
    cs.n_classes = C;
    cs.m = m;
    cs.clauses.resize(static_cast<std::size_t>(C));
    for (auto& cl : cs.clauses)
      while (cl.size() < 4) {
        PredicateVector v(static_cast<std::size_t>(m));
        for (auto& x : v) x = rng.uniform() < 0.4;
        cl[v] = 1 + static_cast<long long>(rng.below(5));
      }
    std::vector<bool> valid(static_cast<std::size_t>(m));
    for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = rng.uniform() < 0.8;
    const auto p = build_profiles(cs, valid);
    int m_valid = static_cast<int>(std::count(valid.begin(), valid.end(), true));
    for (int c = 0; c < C; ++c) {
      std::vector<std::pair<long long, int>> order;  // (-count, id)
      for (int id = 0; id < m; ++id) {
        if (!valid[static_cast<std::size_t>(id)]) continue;
        long long n = 0;
        for (const auto& [v, k] : cs.clauses[static_cast<std::size_t>(c)])
          if (v[static_cast<std::size_t>(id)]) n += k;
        if (n > 0) order.push_back({-n, id});
        else EXPECT_EQ(p.rank_of(c, id), m_valid + 1);
      }
      std::sort(order.begin(), order.end());
      for (std::size_t r = 0; r < order.size(); ++r) EXPECT_EQ(p.rank_of(c, order[r].second), static_cast<int>(r) + 1);
    }
    // scaling every count of a class leaves its profile unchanged
    ClauseSet scaled = cs;
    for (auto& cl : scaled.clauses)
      for (auto& kv : cl) kv.second *= 7;
    EXPECT_EQ(build_profiles(scaled, valid), p);
  }
}

TEST(Rules, ScoreExamples) {
  const auto p = profile_from({{1, 3, 7}});
  EXPECT_DOUBLE_EQ(score({0, 1}, p, 0), 2.0);
  EXPECT_DOUBLE_EQ(score({2}, p, 0), 7.0);
  try {
    (void)score({}, p, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyActiveSet);
  }
  ClauseSet cs;
  cs.n_classes = 2;
  cs.m = 3;
  cs.clauses = {{{bits("100"), 1}}, {{bits("010"), 1}}};
  const auto q = build_profiles(cs, {true, true, true});
  EXPECT_DOUBLE_EQ(score({2}, q, 0), 4.0);
  EXPECT_DOUBLE_EQ(score({1, 2}, q, 0), 4.0);
}

TEST(Rules, PredictExamplesAndTies) {
  EXPECT_EQ(topk({2.0, 5.0, 3.0}, 1).front(), 0);
  EXPECT_EQ(topk({2.0, 2.0, 9.0}, 1).front(), 0);
  EXPECT_EQ(topk({4.0, 2.0, 2.0}, 3), (std::vector<int>{1, 2, 0}));
  EXPECT_EQ(topk({1.0, 2.0}, 5).size(), 2u);
}

TEST(Rules, PredictMatchesDirectMinimization) {
  Rng rng(41);
  for (int t = 0; t < 200; ++t) {
    const auto p = random_profile(rng, 4, 9);
    ActiveSet a;
    for (int id = 0; id < 9; ++id)
      if (rng.uniform() < 0.4) a.push_back(id);
    if (a.empty()) a.push_back(0);
    int best = 0;
    long long best_num = -1;
    for (int c = 0; c < 4; ++c) {
      long long num = 0;
      for (int id : a) num += p.rank_of(c, id);
      if (best_num < 0 || num < best_num) {
        best_num = num;
        best = c;
      }
    }
    EXPECT_EQ(predict(a, p).cls, best);
  }
}

TEST(Rules, ScoreBoundsAndMonotonicity) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto p = random_profile(rng, 3, 8);
    ActiveSet a;
    for (int id = 0; id < 8; ++id)
      if (rng.uniform() < 0.5) a.push_back(id);
    if (a.empty()) continue;
    for (int c = 0; c < 3; ++c) {
      const double s = score(a, p, c);
      EXPECT_GE(s, 1.0);
      EXPECT_LE(s, p.m_valid() + 1.0);
      for (std::size_t k = 0; k < a.size(); ++k)
        for (int repl = 0; repl < 8; ++repl) {
          if (std::count(a.begin(), a.end(), repl) || p.rank_of(c, repl) >= p.rank_of(c, a[k])) continue;
          ActiveSet b = a;
          b[k] = repl;
          std::sort(b.begin(), b.end());
          EXPECT_LT(score(b, p, c), s);
        }
    }
  }
}

TEST(Rules, ClaimA1Examples) {
  Rng rng(5);
  const auto p = random_profile(rng, 3, 10);
  EXPECT_TRUE(check_claim_a1(p, 500, 0.0, 1.0, 1));
  EXPECT_TRUE(check_claim_a1(p, 500, 0.0, 2.0, 2));
  EXPECT_TRUE(check_claim_a1(p, 500, 3.25, 0.5, 3));
  const auto big = random_profile(rng, 5, 20);
  const auto r = check_claim_a1(big, 1000, std::vector<double>(5, -1.5), 1.0, 4);
  EXPECT_EQ(r.instances, 1000);
  EXPECT_EQ(r.disagreements, 0);
  EXPECT_THROW((void)check_claim_a1(big, 10, 0.0, 0.0, 1), Error);
}

TEST(Rules, ClaimA1CanFailWithClassDependentAlpha) {
  // class 1 has strictly worse ranks, but a large alpha_1 lets its logit win
  const auto p = profile_from({{1, 2}, {2, 3}});
  const auto r = check_claim_a1(p, 200, {0.0, 10.0}, 1.0, 9);
  EXPECT_GT(r.disagreements, 0);
}

TEST(Rules, MetricsHandTable) {
  const auto p = profile_from({{1, 2}, {2, 1}});
  // five images: one uncovered, four covered; rule predictions 0,1,0,1
  const std::vector<PredicateVector> vecs{bits("00"), bits("10"), bits("01"), bits("10"), bits("01")};
  const std::vector<int> teacher{0, 0, 1, 1, 1};
  const std::vector<int> labels{0, 0, 1, 0, 0};
  const auto m = compute_metrics(vecs, p, teacher, labels);
  EXPECT_DOUBLE_EQ(m.coverage, 0.8);
  EXPECT_DOUBLE_EQ(m.fidelity, 0.75);
  EXPECT_DOUBLE_EQ(m.top1, 0.75);
  EXPECT_DOUBLE_EQ(m.top5, 1.0);
  EXPECT_EQ(m.n_covered, 4);
  EXPECT_EQ(metrics_line(m), "2 0.8000 0.7500 0.7500 1.0000");

  const auto full = compute_metrics({bits("10"), bits("01")}, p, {0, 1}, {0, 1});
  EXPECT_DOUBLE_EQ(full.coverage, 1.0);
  EXPECT_DOUBLE_EQ(full.fidelity, 1.0);
}

TEST(Rules, DnfExactnessOnFixture) {
  const auto& b = vltest::relu();
  const auto train = b.dataset.indices(Split::Train);
  const auto r = train_thresholds(b.dump, b.head, train, false, TrainConfig{});
  std::vector<PredicateVector> vecs;
  std::vector<int> labels;
  std::vector<bool> correct;
  for (int i : train) {
    vecs.push_back(predicate_vector(r.predicates.predicates, b.dump, i));
    labels.push_back(b.dump.labels[static_cast<std::size_t>(i)]);
    correct.push_back(b.dump.teacher_correct[static_cast<std::size_t>(i)]);
  }
  const auto cs = extract_clauses(vecs, labels, correct, 3);
  for (std::size_t k = 0; k < vecs.size(); ++k)
    if (correct[k]) EXPECT_TRUE(satisfies_clause(cs, labels[k], vecs[k]));
  long long total = 0;
  for (const auto& cl : cs.clauses)
    for (const auto& kv : cl) total += kv.second;
  EXPECT_EQ(total, std::count(correct.begin(), correct.end(), true));
}
