#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/predicate_spec.hpp"
#include "visionlogic/rng.hpp"

namespace visionlogic {

using PredicateVector = std::vector<std::uint8_t>;
using ActiveSet = std::vector<int>;  // ascending predicate ids

struct ClauseSet {
  int n_classes = 0;
  int m = 0;
  std::vector<std::map<PredicateVector, long long>> clauses;  // per class: vector -> count

  bool operator==(const ClauseSet&) const = default;
};

/// Distinct predicate vectors per class with occurrence counts. Only
/// teacher-correct examples contribute.
[[nodiscard]] inline ClauseSet extract_clauses(const std::vector<PredicateVector>& vectors, const std::vector<int>& labels,
                                               const std::vector<bool>& teacher_correct, int n_classes) {
  if (vectors.size() != labels.size() || vectors.size() != teacher_correct.size())
    fail(ErrorKind::LengthMismatch, "extract_clauses: vectors, labels and teacher_correct differ in length");
  ClauseSet cs;
  cs.n_classes = n_classes;
  cs.m = vectors.empty() ? 0 : static_cast<int>(vectors.front().size());
  cs.clauses.resize(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (static_cast<int>(vectors[i].size()) != cs.m) fail(ErrorKind::LengthMismatch, "extract_clauses: ragged vectors");
    const int c = labels[i];
    if (c < 0 || c >= n_classes) fail(ErrorKind::InvalidArgument, "extract_clauses: label out of range");
    if (!teacher_correct[i]) continue;
    ++cs.clauses[static_cast<std::size_t>(c)][vectors[i]];
  }
  return cs;
}

/// True when `v` equals one of the stored clauses of class c.
[[nodiscard]] inline bool satisfies_clause(const ClauseSet& cs, int c, const PredicateVector& v) {
  return cs.clauses.at(static_cast<std::size_t>(c)).count(v) > 0;
}

struct ClassProfile {
  int n_classes = 0;
  int m = 0;
  std::vector<int> valid_ids;
  std::vector<std::vector<int>> rank;  // [class][predicate id], 0 for invalid predicates

  [[nodiscard]] int m_valid() const { return static_cast<int>(valid_ids.size()); }
  [[nodiscard]] int unseen_rank() const { return m_valid() + 1; }
  [[nodiscard]] int rank_of(int c, int id) const {
    const int r = rank.at(static_cast<std::size_t>(c)).at(static_cast<std::size_t>(id));
    if (r == 0) fail(ErrorKind::InvalidArgument, "predicate " + std::to_string(id) + " is not valid");
    return r;
  }
  bool operator==(const ClassProfile&) const = default;
};

/// Appearance counts weighted by clause occurrence, sorted descending with
/// ties by ascending id; valid predicates never seen in c get m_valid + 1.
[[nodiscard]] inline ClassProfile build_profiles(const ClauseSet& cs, const std::vector<bool>& valid) {
  if (static_cast<int>(valid.size()) != cs.m) fail(ErrorKind::LengthMismatch, "build_profiles: validity mask length");
  ClassProfile p;
  p.n_classes = cs.n_classes;
  p.m = cs.m;
  for (int i = 0; i < cs.m; ++i)
    if (valid[static_cast<std::size_t>(i)]) p.valid_ids.push_back(i);
  p.rank.assign(static_cast<std::size_t>(cs.n_classes), std::vector<int>(static_cast<std::size_t>(cs.m), 0));
  for (int c = 0; c < cs.n_classes; ++c) {
    const auto& cl = cs.clauses[static_cast<std::size_t>(c)];
    if (cl.empty()) fail(ErrorKind::EmptyClass, "class " + std::to_string(c) + " has no clauses");
    std::vector<long long> count(static_cast<std::size_t>(cs.m), 0);
    for (const auto& [vec, n] : cl)
      for (int i = 0; i < cs.m; ++i)
        if (vec[static_cast<std::size_t>(i)]) count[static_cast<std::size_t>(i)] += n;
    std::vector<int> seen;
    for (int id : p.valid_ids)
      if (count[static_cast<std::size_t>(id)] > 0) seen.push_back(id);
    std::stable_sort(seen.begin(), seen.end(), [&](int a, int b) {
      return count[static_cast<std::size_t>(a)] > count[static_cast<std::size_t>(b)];
    });
    auto& r = p.rank[static_cast<std::size_t>(c)];
    for (int id : p.valid_ids) r[static_cast<std::size_t>(id)] = p.unseen_rank();
    for (std::size_t k = 0; k < seen.size(); ++k) r[static_cast<std::size_t>(seen[k])] = static_cast<int>(k) + 1;
  }
  return p;
}

/// Valid predicates that fire in `v`.
[[nodiscard]] inline ActiveSet active_set(const ClassProfile& prof, const PredicateVector& v) {
  if (static_cast<int>(v.size()) != prof.m) fail(ErrorKind::LengthMismatch, "active_set: vector length differs from profile");
  ActiveSet a;
  for (int id : prof.valid_ids)
    if (v[static_cast<std::size_t>(id)]) a.push_back(id);
  return a;
}

[[nodiscard]] inline double score(const ActiveSet& active, const ClassProfile& prof, int c) {
  if (active.empty()) fail(ErrorKind::EmptyActiveSet, "no active valid predicate");
  long long sum = 0;
  for (int id : active) sum += prof.rank_of(c, id);
  return static_cast<double>(sum) / static_cast<double>(active.size());
}

[[nodiscard]] inline std::vector<double> scores(const ActiveSet& active, const ClassProfile& prof) {
  std::vector<double> s(static_cast<std::size_t>(prof.n_classes));
  for (int c = 0; c < prof.n_classes; ++c) s[static_cast<std::size_t>(c)] = score(active, prof, c);
  return s;
}

/// Classes ordered by ascending score, ties to the lower index; first k kept.
[[nodiscard]] inline std::vector<int> topk(const std::vector<double>& s, int k) {
  std::vector<int> idx(s.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[static_cast<std::size_t>(a)] < s[static_cast<std::size_t>(b)]; });
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

struct Prediction {
  int cls = 0;
  std::vector<double> scores;
};

[[nodiscard]] inline Prediction predict(const ActiveSet& active, const ClassProfile& prof) {
  Prediction p;
  p.scores = scores(active, prof);
  p.cls = topk(p.scores, 1).front();
  return p;
}

/// Rule-head logits f^c = b + sum over active of W[c][i].
[[nodiscard]] inline std::vector<double> rule_head_logits(const std::vector<std::vector<double>>& W, const std::vector<double>& b,
                                                          const ActiveSet& active) {
  std::vector<double> f(b);
  for (std::size_t c = 0; c < W.size(); ++c)
    for (int id : active) f[c] += W[c][static_cast<std::size_t>(id)];
  return f;
}

/// argmax with ties to the lower index.
[[nodiscard]] inline int argmax_low(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

/// W_rule[c][i] = alpha_c - beta R^c(p_i) over the valid predicates.
[[nodiscard]] inline std::vector<std::vector<double>> affine_rule_weights(const ClassProfile& prof, const std::vector<double>& alpha,
                                                                          double beta) {
  std::vector<std::vector<double>> W(static_cast<std::size_t>(prof.n_classes), std::vector<double>(static_cast<std::size_t>(prof.m), 0.0));
  for (int c = 0; c < prof.n_classes; ++c)
    for (int id : prof.valid_ids)
      W[static_cast<std::size_t>(c)][static_cast<std::size_t>(id)] =
          alpha[static_cast<std::size_t>(c)] - beta * prof.rank_of(c, id);
  return W;
}

struct ClaimA1Result {
  int instances = 0;
  int disagreements = 0;
  [[nodiscard]] bool holds() const { return disagreements == 0; }
};

/// Samples random non-empty active sets and compares the affine rule head's
/// argmax with the rank-score argmin under the shared lowest-index tie rule.
[[nodiscard]] inline ClaimA1Result check_claim_a1(const ClassProfile& prof, int n_instances, const std::vector<double>& alpha,
                                                  double beta, std::uint64_t seed) {
  if (!(beta > 0)) fail(ErrorKind::InvalidArgument, "check_claim_a1: beta must be positive");
  if (static_cast<int>(alpha.size()) != prof.n_classes) fail(ErrorKind::LengthMismatch, "check_claim_a1: alpha per class");
  if (prof.valid_ids.empty()) fail(ErrorKind::EmptyVector, "check_claim_a1: no valid predicates");
  const auto W = affine_rule_weights(prof, alpha, beta);
  const std::vector<double> b(static_cast<std::size_t>(prof.n_classes), 0.0);
  Rng rng(seed);
  ClaimA1Result r;
  for (int t = 0; t < n_instances; ++t) {
    ActiveSet a;
    while (a.empty())
      for (int id : prof.valid_ids)
        if (rng.uniform() < 0.5) a.push_back(id);
    const int rule = argmax_low(rule_head_logits(W, b, a));
    const int rank = predict(a, prof).cls;
    ++r.instances;
    if (rule != rank) ++r.disagreements;
  }
  return r;
}

[[nodiscard]] inline bool check_claim_a1(const ClassProfile& prof, int n_instances, double alpha, double beta, std::uint64_t seed) {
  return check_claim_a1(prof, n_instances, std::vector<double>(static_cast<std::size_t>(prof.n_classes), alpha), beta, seed).holds();
}

struct MetricsReport {
  int n_valid = 0;
  int n_valid_eval = 0;
  int n_total = 0;
  int n_images = 0;
  int n_covered = 0;
  double coverage = 0.0;
  double fidelity = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  bool operator==(const MetricsReport&) const = default;
};

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"n_valid", r.n_valid},     {"n_valid_eval", r.n_valid_eval}, {"n_total", r.n_total},
                     {"n_images", r.n_images},   {"n_covered", r.n_covered},       {"coverage", r.coverage},
                     {"fidelity", r.fidelity},   {"top1", r.top1},                 {"top5", r.top5}};
}
inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.n_valid = j.at("n_valid").get<int>();
  r.n_valid_eval = j.value("n_valid_eval", 0);
  r.n_total = j.at("n_total").get<int>();
  r.n_images = j.value("n_images", 0);
  r.n_covered = j.value("n_covered", 0);
  r.coverage = j.at("coverage").get<double>();
  r.fidelity = j.at("fidelity").get<double>();
  r.top1 = j.at("top1").get<double>();
  r.top5 = j.at("top5").get<double>();
}

/// Coverage, fidelity and top-k accuracy over one split. An image is covered
/// when at least one valid predicate fires; the other fractions are taken over
/// covered images. `n_valid_eval` counts valid predicates that fire on some
/// but not all of these images.
[[nodiscard]] inline MetricsReport compute_metrics(const std::vector<PredicateVector>& vectors, const ClassProfile& prof,
                                                   const std::vector<int>& teacher_pred, const std::vector<int>& labels) {
  if (vectors.size() != teacher_pred.size() || vectors.size() != labels.size())
    fail(ErrorKind::LengthMismatch, "compute_metrics: table columns differ in length");
  MetricsReport r;
  r.n_valid = prof.m_valid();
  r.n_total = prof.m;
  r.n_images = static_cast<int>(vectors.size());
  int fid = 0, t1 = 0, t5 = 0;
  std::vector<int> fire(static_cast<std::size_t>(prof.m), 0);
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto a = active_set(prof, vectors[i]);
    for (int id : a) ++fire[static_cast<std::size_t>(id)];
    if (a.empty()) continue;
    ++r.n_covered;
    const auto p = predict(a, prof);
    if (p.cls == teacher_pred[i]) ++fid;
    if (p.cls == labels[i]) ++t1;
    const auto top = topk(p.scores, 5);
    if (std::find(top.begin(), top.end(), labels[i]) != top.end()) ++t5;
  }
  for (int id : prof.valid_ids)
    if (fire[static_cast<std::size_t>(id)] > 0 && fire[static_cast<std::size_t>(id)] < r.n_images) ++r.n_valid_eval;
  if (r.n_images > 0) r.coverage = static_cast<double>(r.n_covered) / r.n_images;
  if (r.n_covered > 0) {
    r.fidelity = static_cast<double>(fid) / r.n_covered;
    r.top1 = static_cast<double>(t1) / r.n_covered;
    r.top5 = static_cast<double>(t5) / r.n_covered;
  }
  return r;
}

/// Five fields in report order: #valid, coverage, fidelity, top-1, top-5.
[[nodiscard]] inline std::string metrics_line(const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d %.4f %.4f %.4f %.4f", r.n_valid, r.coverage, r.fidelity, r.top1, r.top5);
  return buf;
}

struct RuleSet {
  ClauseSet clauses;
  ClassProfile profile;
  std::vector<std::string> class_names;
  bool operator==(const RuleSet&) const = default;
};

[[nodiscard]] inline std::string vector_to_bits(const PredicateVector& v) {
  std::string s(v.size(), '0');
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i]) s[i] = '1';
  return s;
}

[[nodiscard]] inline PredicateVector bits_to_vector(const std::string& s) {
  PredicateVector v(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1') fail(ErrorKind::ParseError, "clause bit string contains '" + std::string(1, s[i]) + "'");
    v[i] = s[i] == '1' ? 1 : 0;
  }
  return v;
}

inline void to_json(nlohmann::json& j, const RuleSet& rs) {
  const auto& p = rs.profile;
  nlohmann::json classes = nlohmann::json::array();
  for (int c = 0; c < p.n_classes; ++c) {
    nlohmann::json prof = nlohmann::json::array();
    std::vector<int> ids = p.valid_ids;
    std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return p.rank_of(c, a) < p.rank_of(c, b); });
    for (int id : ids) prof.push_back({{"id", id}, {"rank", p.rank_of(c, id)}});
    nlohmann::json cl = nlohmann::json::array();
    if (static_cast<std::size_t>(c) < rs.clauses.clauses.size())
      for (const auto& [vec, n] : rs.clauses.clauses[static_cast<std::size_t>(c)])
        cl.push_back({{"vector", vector_to_bits(vec)}, {"count", n}});
    nlohmann::json entry{{"class", c}, {"profile", prof}, {"clauses", cl}};
    if (static_cast<std::size_t>(c) < rs.class_names.size()) entry["name"] = rs.class_names[static_cast<std::size_t>(c)];
    classes.push_back(entry);
  }
  j = nlohmann::json{{"n_classes", p.n_classes}, {"m", p.m}, {"m_valid", p.m_valid()}, {"valid_ids", p.valid_ids}, {"classes", classes}};
}

inline void from_json(const nlohmann::json& j, RuleSet& rs) {
  auto& p = rs.profile;
  p.n_classes = j.at("n_classes").get<int>();
  p.m = j.at("m").get<int>();
  p.valid_ids = j.at("valid_ids").get<std::vector<int>>();
  if (j.at("m_valid").get<int>() != p.m_valid()) fail(ErrorKind::ParseError, "rules: m_valid disagrees with valid_ids");
  p.rank.assign(static_cast<std::size_t>(p.n_classes), std::vector<int>(static_cast<std::size_t>(p.m), 0));
  rs.clauses.n_classes = p.n_classes;
  rs.clauses.m = p.m;
  rs.clauses.clauses.assign(static_cast<std::size_t>(p.n_classes), {});
  rs.class_names.clear();
  const auto& classes = j.at("classes");
  if (static_cast<int>(classes.size()) != p.n_classes) fail(ErrorKind::ParseError, "rules: class count mismatch");
  for (const auto& e : classes) {
    const int c = e.at("class").get<int>();
    if (c < 0 || c >= p.n_classes) fail(ErrorKind::ParseError, "rules: class index out of range");
    auto& r = p.rank[static_cast<std::size_t>(c)];
    for (int id : p.valid_ids) r[static_cast<std::size_t>(id)] = p.unseen_rank();
    for (const auto& pr : e.at("profile")) {
      const int id = pr.at("id").get<int>();
      if (id < 0 || id >= p.m) fail(ErrorKind::ParseError, "rules: predicate id out of range");
      r[static_cast<std::size_t>(id)] = pr.at("rank").get<int>();
    }
    for (const auto& cl : e.at("clauses")) {
      auto v = bits_to_vector(cl.at("vector").get<std::string>());
      if (static_cast<int>(v.size()) != p.m) fail(ErrorKind::ParseError, "rules: clause length differs from m");
      rs.clauses.clauses[static_cast<std::size_t>(c)][std::move(v)] = cl.at("count").get<long long>();
    }
    if (e.contains("name")) rs.class_names.push_back(e.at("name").get<std::string>());
  }
}

}  // namespace visionlogic
