#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/optimcore.hpp"
#include "visionlogic/predicate_spec.hpp"
#include "visionlogic/rng.hpp"
#include "visionlogic/tensorio.hpp"

namespace visionlogic {

struct TrainConfig {
  double lr_gates = 1e-3;
  double lr_head = 5e-4;
  int batch = 512;
  int max_epochs = 30;
  int patience = 5;
  double min_kl_improvement = 1e-4;
  double lambda_T = 1.0;
  double lambda_s = 0.1;
  double lambda_use = 5e-3;
  double seed_quantile = 0.8;
  double negative_seed_quantile = 0.2;
  int influential_k = 3;
  double rank_floor = 1e-3;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(lr_gates > 0 && lr_head > 0 && batch > 0 && max_epochs > 0 && patience > 0 && min_kl_improvement > 0 &&
          lambda_T >= 0 && lambda_s >= 0 && lambda_use >= 0 && influential_k > 0))
      fail(ErrorKind::InvalidArgument, "train config values must be positive");
    if (patience > max_epochs) fail(ErrorKind::InvalidArgument, "patience must not exceed max_epochs");
    if (!(seed_quantile >= 0 && seed_quantile <= 1 && negative_seed_quantile >= 0 && negative_seed_quantile <= 1))
      fail(ErrorKind::InvalidArgument, "seed quantiles must lie in [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_gates", c.lr_gates},
                     {"lr_head", c.lr_head},
                     {"batch", c.batch},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"min_kl_improvement", c.min_kl_improvement},
                     {"lambda_T", c.lambda_T},
                     {"lambda_s", c.lambda_s},
                     {"lambda_use", c.lambda_use},
                     {"seed_quantile", c.seed_quantile},
                     {"negative_seed_quantile", c.negative_seed_quantile},
                     {"influential_k", c.influential_k},
                     {"rank_floor", c.rank_floor},
                     {"rng_seed", c.rng_seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lr_gates = j.value("lr_gates", d.lr_gates);
  c.lr_head = j.value("lr_head", d.lr_head);
  c.batch = j.value("batch", d.batch);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
  c.min_kl_improvement = j.value("min_kl_improvement", d.min_kl_improvement);
  c.lambda_T = j.value("lambda_T", d.lambda_T);
  c.lambda_s = j.value("lambda_s", d.lambda_s);
  c.lambda_use = j.value("lambda_use", d.lambda_use);
  c.seed_quantile = j.value("seed_quantile", d.seed_quantile);
  c.negative_seed_quantile = j.value("negative_seed_quantile", d.negative_seed_quantile);
  c.influential_k = j.value("influential_k", d.influential_k);
  c.rank_floor = j.value("rank_floor", d.rank_floor);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
}

struct RuleHead {
  int n_classes = 0;
  int m = 0;
  std::vector<double> W;  // n_classes x m
  std::vector<double> b;
  bool operator==(const RuleHead&) const = default;
};

inline void to_json(nlohmann::json& j, const RuleHead& h) {
  j = nlohmann::json{{"n_classes", h.n_classes}, {"m", h.m}, {"W_rule", h.W}, {"b_rule", h.b}};
}
inline void from_json(const nlohmann::json& j, RuleHead& h) {
  h.n_classes = j.at("n_classes").get<int>();
  h.m = j.at("m").get<int>();
  h.W = j.at("W_rule").get<std::vector<double>>();
  h.b = j.at("b_rule").get<std::vector<double>>();
}

struct PredicateSet {
  std::string head_activation = "relu";
  int d = 0;
  int n_classes = 0;
  int m_relaxed = 0;
  std::uint64_t rng_seed = 0;
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_kl = 0.0;
  std::vector<PredicateSpec> predicates;

  [[nodiscard]] int n_valid() const {
    return static_cast<int>(std::count_if(predicates.begin(), predicates.end(), [](const PredicateSpec& p) { return p.valid; }));
  }
  bool operator==(const PredicateSet&) const = default;
};

inline void to_json(nlohmann::json& j, const PredicateSet& s) {
  j = nlohmann::json{{"head_activation", s.head_activation},
                     {"d", s.d},
                     {"n_classes", s.n_classes},
                     {"m_relaxed", s.m_relaxed},
                     {"rng_seed", s.rng_seed},
                     {"epochs_run", s.epochs_run},
                     {"best_epoch", s.best_epoch},
                     {"best_val_kl", s.best_val_kl},
                     {"n_valid", s.n_valid()},
                     {"predicates", s.predicates}};
}
inline void from_json(const nlohmann::json& j, PredicateSet& s) {
  s.head_activation = j.at("head_activation").get<std::string>();
  s.d = j.at("d").get<int>();
  s.n_classes = j.at("n_classes").get<int>();
  s.m_relaxed = j.value("m_relaxed", 0);
  s.rng_seed = j.value("rng_seed", std::uint64_t{0});
  s.epochs_run = j.value("epochs_run", 0);
  s.best_epoch = j.value("best_epoch", 0);
  s.best_val_kl = j.value("best_val_kl", 0.0);
  s.predicates = j.at("predicates").get<std::vector<PredicateSpec>>();
}

// ---------------------------------------------------------------------------
// Contributions, representativeness, influential examples
// ---------------------------------------------------------------------------

/// u_j = W[c][j] * z_j for one example.
[[nodiscard]] inline std::vector<double> contributions(const ActivationDump& dump, const HeadWeights& head, int i, int c) {
  std::vector<double> u(static_cast<std::size_t>(dump.d));
  for (int j = 0; j < dump.d; ++j)
    u[static_cast<std::size_t>(j)] = static_cast<double>(head.w(c, j)) * static_cast<double>(dump.z(i, j));
  return u;
}

[[nodiscard]] inline std::vector<int> correct_examples(const ActivationDump& dump, const std::vector<int>& subset) {
  std::vector<int> out;
  for (int i : subset)
    if (dump.teacher_correct[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

[[nodiscard]] inline std::vector<int> all_examples(const ActivationDump& dump) {
  std::vector<int> out(static_cast<std::size_t>(dump.n_examples));
  for (int i = 0; i < dump.n_examples; ++i) out[static_cast<std::size_t>(i)] = i;
  return out;
}

/// Mean within-example rank of every channel over the teacher-correct
/// examples of class c in `subset`.
[[nodiscard]] inline std::vector<double> mean_ranks(const ActivationDump& dump, const HeadWeights& head, int c,
                                                    const std::vector<int>& subset) {
  std::vector<double> sum(static_cast<std::size_t>(dump.d), 0.0);
  int n = 0;
  for (int i : subset) {
    if (!dump.teacher_correct[static_cast<std::size_t>(i)] || dump.labels[static_cast<std::size_t>(i)] != c) continue;
    const auto r = optim::within_example_rank(contributions(dump, head, i, c));
    for (int j = 0; j < dump.d; ++j) sum[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
    ++n;
  }
  if (n == 0) fail(ErrorKind::EmptyClass, "class " + std::to_string(c) + " has no teacher-correct examples");
  for (auto& v : sum) v /= n;
  return sum;
}

[[nodiscard]] inline int most_representative_channel(const ActivationDump& dump, const HeadWeights& head, int c,
                                                     const std::vector<int>& subset) {
  const auto m = mean_ranks(dump, head, c, subset);
  return static_cast<int>(std::min_element(m.begin(), m.end()) - m.begin());
}

[[nodiscard]] inline int most_representative_channel(const ActivationDump& dump, const HeadWeights& head, int c) {
  return most_representative_channel(dump, head, c, all_examples(dump));
}

/// Channels holding the k largest soft top-k weights (ties to the lower index).
[[nodiscard]] inline std::vector<int> soft_topk_members(const std::vector<double>& u, int k,
                                                        std::optional<double> tau = std::nullopt) {
  const auto w = optim::softsort_topk(u, k, tau ? *tau : optim::default_tau(u));
  auto ord = optim::order_desc(w);
  ord.resize(static_cast<std::size_t>(k));
  std::sort(ord.begin(), ord.end());
  return ord;
}

/// Influential example lists for every channel at once: teacher-correct
/// examples of `subset` whose labeled-class contributions put the channel in
/// the soft top-k.
[[nodiscard]] inline std::vector<std::vector<int>> influential_sets(const ActivationDump& dump, const HeadWeights& head,
                                                                    const std::vector<int>& subset, int k,
                                                                    std::optional<double> tau = std::nullopt) {
  if (k > dump.d) fail(ErrorKind::InvalidArgument, "influential_k exceeds channel count");
  std::vector<std::vector<int>> sets(static_cast<std::size_t>(dump.d));
  for (int i : subset) {
    if (!dump.teacher_correct[static_cast<std::size_t>(i)]) continue;
    const auto u = contributions(dump, head, i, dump.labels[static_cast<std::size_t>(i)]);
    for (int j : soft_topk_members(u, k, tau)) sets[static_cast<std::size_t>(j)].push_back(i);
  }
  return sets;
}

[[nodiscard]] inline std::vector<int> select_influential(const ActivationDump& dump, const HeadWeights& head, int j, int k,
                                                         const std::vector<int>& subset,
                                                         std::optional<double> tau = std::nullopt) {
  return influential_sets(dump, head, subset, k, tau)[static_cast<std::size_t>(j)];
}

/// Linear-interpolation quantile at index (n - 1) q of the sorted values.
[[nodiscard]] inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) fail(ErrorKind::EmptyVector, "quantile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

[[nodiscard]] inline std::vector<double> channel_values(const ActivationDump& dump, int j, const std::vector<int>& subset) {
  std::vector<double> v;
  v.reserve(subset.size());
  for (int i : subset) v.push_back(dump.z(i, j));
  return v;
}

/// Gate slots: one positive (or plain) slot per channel, plus a negative slot
/// for channels that take negative values on the training split when the head
/// activation can produce them.
[[nodiscard]] inline optim::Vocabulary build_vocabulary(const ActivationDump& dump, const std::vector<int>& train,
                                                        bool signed_head) {
  optim::Vocabulary voc;
  for (int j = 0; j < dump.d; ++j) {
    voc.ranked.push_back(voc.n_gates());
    voc.gates.push_back({j, false});
    if (signed_head) {
      const bool has_neg = std::any_of(train.begin(), train.end(), [&](int i) { return dump.z(i, j) < 0.0f; });
      if (has_neg) voc.gates.push_back({j, true});
    }
  }
  return voc;
}

struct Seeds {
  std::vector<double> T0;
  std::vector<double> lo, hi;  // empirical channel range per slot
  std::vector<std::vector<int>> influential;
};

[[nodiscard]] inline Seeds seed_thresholds(const ActivationDump& dump, const HeadWeights& head, const optim::Vocabulary& voc,
                                           const std::vector<int>& train, const TrainConfig& cfg) {
  Seeds s;
  s.influential = influential_sets(dump, head, train, cfg.influential_k);
  for (const auto& slot : voc.gates) {
    const auto all = channel_values(dump, slot.channel, train);
    const auto& inf = s.influential[static_cast<std::size_t>(slot.channel)];
    double t0;
    if (!slot.negative) {
      t0 = inf.empty() ? quantile(all, cfg.seed_quantile) : quantile(channel_values(dump, slot.channel, inf), cfg.seed_quantile);
    } else {
      std::vector<double> neg;
      for (double v : channel_values(dump, slot.channel, inf))
        if (v < 0.0) neg.push_back(v);
      if (neg.empty())
        for (double v : all)
          if (v < 0.0) neg.push_back(v);
      t0 = quantile(neg, cfg.negative_seed_quantile);
    }
    s.T0.push_back(t0);
    s.lo.push_back(*std::min_element(all.begin(), all.end()));
    s.hi.push_back(*std::max_element(all.begin(), all.end()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainLogEntry {
  int epoch = 0;
  double train_kl = 0.0;
  double val_kl = 0.0;
  double best_val_kl = 0.0;
  double mean_abs_dT = 0.0;
  double mean_s = 0.0;
  bool operator==(const TrainLogEntry&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainLogEntry& e) {
  j = nlohmann::json{{"epoch", e.epoch},         {"train_kl", e.train_kl},       {"val_kl", e.val_kl},
                     {"best_val_kl", e.best_val_kl}, {"mean_abs_dT", e.mean_abs_dT}, {"mean_s", e.mean_s}};
}

struct TrainResult {
  PredicateSet predicates;
  RuleHead rule_head;
  std::vector<TrainLogEntry> log;
  optim::Vocabulary vocabulary;
};

/// Raised when the loss becomes non-finite; carries the optimizer state.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, nlohmann::json state)
      : Error(ErrorKind::Diverged, what), state_(std::move(state)) {}
  [[nodiscard]] const nlohmann::json& state() const noexcept { return state_; }

 private:
  nlohmann::json state_;
};

[[nodiscard]] inline std::vector<optim::Example> make_examples(const ActivationDump& dump, const HeadWeights& head,
                                                               const std::vector<int>& idx) {
  std::vector<optim::Example> out;
  out.reserve(idx.size());
  for (int i : idx) {
    optim::Example ex;
    ex.z.resize(static_cast<std::size_t>(dump.d));
    for (int j = 0; j < dump.d; ++j) ex.z[static_cast<std::size_t>(j)] = dump.z(i, j);
    ex.teacher.resize(static_cast<std::size_t>(dump.n_classes));
    for (int c = 0; c < dump.n_classes; ++c) ex.teacher[static_cast<std::size_t>(c)] = dump.logit(i, c);
    const auto u = contributions(dump, head, i, dump.labels[static_cast<std::size_t>(i)]);
    const double tau = optim::default_tau(u);
    const int kmax = std::min(3, dump.d);
    for (int k = 1; k <= 3; ++k)
      ex.w[static_cast<std::size_t>(k - 1)] = optim::softsort_topk(u, std::min(k, kmax), tau);
    out.push_back(std::move(ex));
  }
  return out;
}

[[nodiscard]] inline double mean_kl(const optim::Vocabulary& voc, const optim::Layout& L, const std::vector<double>& theta,
                                    const std::vector<optim::Example>& exs) {
  if (exs.empty()) return 0.0;
  std::vector<double> f, q(static_cast<std::size_t>(L.C));
  double sum = 0.0;
  for (const auto& ex : exs) {
    optim::relaxed_features(voc, L, theta, ex, f);
    for (int c = 0; c < L.C; ++c) {
      double acc = theta[L.b(c)];
      for (int i = 0; i < L.m; ++i) acc += theta[L.W(c, i)] * f[static_cast<std::size_t>(i)];
      q[static_cast<std::size_t>(c)] = acc;
    }
    sum += optim::kl_divergence(ex.teacher, q);
  }
  return sum / static_cast<double>(exs.size());
}

/// Warm start: per-class normalized relaxed-feature frequencies minus the
/// normalized global frequency; bias = log class prior.
inline void warm_start_head(const optim::Vocabulary& voc, const optim::Layout& L, std::vector<double>& theta,
                            const std::vector<optim::Example>& exs, const std::vector<int>& labels) {
  std::vector<std::vector<double>> freq(static_cast<std::size_t>(L.C), std::vector<double>(static_cast<std::size_t>(L.m), 0.0));
  std::vector<int> count(static_cast<std::size_t>(L.C), 0);
  std::vector<double> f;
  for (std::size_t e = 0; e < exs.size(); ++e) {
    optim::relaxed_features(voc, L, theta, exs[e], f);
    const auto c = static_cast<std::size_t>(labels[e]);
    for (int i = 0; i < L.m; ++i) freq[c][static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)];
    ++count[c];
  }
  std::vector<double> global(static_cast<std::size_t>(L.m), 0.0);
  double gtotal = 0.0;
  for (int c = 0; c < L.C; ++c)
    for (int i = 0; i < L.m; ++i) {
      global[static_cast<std::size_t>(i)] += freq[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
      gtotal += freq[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)];
    }
  for (int c = 0; c < L.C; ++c) {
    if (count[static_cast<std::size_t>(c)] == 0)
      fail(ErrorKind::EmptyClass, "class " + std::to_string(c) + " has no teacher-correct training examples");
    double total = 0.0;
    for (double v : freq[static_cast<std::size_t>(c)]) total += v;
    for (int i = 0; i < L.m; ++i) {
      const double nf = total > 0 ? freq[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] / total : 0.0;
      const double ng = gtotal > 0 ? global[static_cast<std::size_t>(i)] / gtotal : 0.0;
      theta[L.W(c, i)] = nf - ng;
    }
    theta[L.b(c)] = std::log(static_cast<double>(count[static_cast<std::size_t>(c)]) / static_cast<double>(exs.size()));
  }
}

/// Per-channel diagnostic: T minus the smallest activation among the top-1
/// examples of the channel's most representative class.
[[nodiscard]] inline std::vector<std::optional<double>> alignment_stats(const ActivationDump& dump, const HeadWeights& head,
                                                                        const std::vector<int>& train) {
  std::vector<std::vector<double>> rank_sum(static_cast<std::size_t>(dump.n_classes),
                                            std::vector<double>(static_cast<std::size_t>(dump.d), 0.0));
  std::vector<int> n(static_cast<std::size_t>(dump.n_classes), 0);
  std::vector<std::vector<std::vector<double>>> top1(static_cast<std::size_t>(dump.n_classes),
                                                     std::vector<std::vector<double>>(static_cast<std::size_t>(dump.d)));
  for (int i : train) {
    if (!dump.teacher_correct[static_cast<std::size_t>(i)]) continue;
    const int c = dump.labels[static_cast<std::size_t>(i)];
    const auto r = optim::within_example_rank(contributions(dump, head, i, c));
    for (int j = 0; j < dump.d; ++j) {
      rank_sum[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
      if (r[static_cast<std::size_t>(j)] == 1) top1[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)].push_back(dump.z(i, j));
    }
    ++n[static_cast<std::size_t>(c)];
  }
  std::vector<std::optional<double>> out(static_cast<std::size_t>(dump.d));
  for (int j = 0; j < dump.d; ++j) {
    int best = -1;
    double best_rank = std::numeric_limits<double>::infinity();
    for (int c = 0; c < dump.n_classes; ++c) {
      if (n[static_cast<std::size_t>(c)] == 0) continue;
      const double mr = rank_sum[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] / n[static_cast<std::size_t>(c)];
      if (mr < best_rank) {
        best_rank = mr;
        best = c;
      }
    }
    if (best < 0) continue;
    const auto& v = top1[static_cast<std::size_t>(best)][static_cast<std::size_t>(j)];
    if (!v.empty()) out[static_cast<std::size_t>(j)] = *std::min_element(v.begin(), v.end());
  }
  return out;
}

/// Hard activation vector of every predicate for one activation row.
[[nodiscard]] inline std::vector<std::uint8_t> predicate_vector(const std::vector<PredicateSpec>& preds, const float* z, int d) {
  std::vector<std::uint8_t> v(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int ch = preds[i].channel;
    if (ch < 0 || ch >= d) fail(ErrorKind::ChannelOutOfRange, "predicate " + std::to_string(preds[i].id) + " channel " + std::to_string(ch));
    v[i] = fires(preds[i], static_cast<double>(z[ch])) ? 1 : 0;
  }
  return v;
}

[[nodiscard]] inline std::vector<std::uint8_t> predicate_vector(const std::vector<PredicateSpec>& preds, const std::vector<float>& z) {
  return predicate_vector(preds, z.data(), static_cast<int>(z.size()));
}

[[nodiscard]] inline std::vector<std::uint8_t> predicate_vector(const std::vector<PredicateSpec>& preds, const ActivationDump& dump, int i) {
  return predicate_vector(preds, dump.Z.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dump.d), dump.d);
}

/// Rank window from per-variant strengths: the strongest variant, or none
/// when every strength is below the floor.
[[nodiscard]] inline std::optional<int> pick_rank_window(const std::array<double, 3>& strength, double floor) {
  int best = 0;
  for (int k = 1; k < 3; ++k)
    if (strength[static_cast<std::size_t>(k)] > strength[static_cast<std::size_t>(best)]) best = k;
  if (!(strength[static_cast<std::size_t>(best)] >= floor)) return std::nullopt;
  return best + 1;
}

/// Freezes predicates for test time: threshold-only evaluation, rank window
/// metadata, and validity (fires on some but not all of `train`).
inline void harden(PredicateSet& ps, const ActivationDump& dump, const std::vector<int>& train, double rank_floor = 1e-3) {
  if (train.empty()) fail(ErrorKind::EmptyVector, "harden: empty training split");
  std::vector<int> count(ps.predicates.size(), 0);
  for (int i : train) {
    const auto v = predicate_vector(ps.predicates, dump, i);
    for (std::size_t k = 0; k < v.size(); ++k) count[k] += v[k];
  }
  for (std::size_t k = 0; k < ps.predicates.size(); ++k) {
    auto& p = ps.predicates[k];
    p.rank_window = pick_rank_window(p.usage, rank_floor);
    p.valid = count[k] > 0 && count[k] < static_cast<int>(train.size());
  }
}

[[nodiscard]] inline bool signed_head(const ModelManifest& m) { return pre_pool_activation(m) == LayerKind::Gelu; }

/// Learns thresholds and sharpness against the frozen teacher, then hardens.
/// `train` are dataset indices of the training split.
[[nodiscard]] inline TrainResult train_thresholds(const ActivationDump& dump, const HeadWeights& head,
                                                  const std::vector<int>& train, bool signed_activation,
                                                  const TrainConfig& cfg,
                                                  const std::function<void(const TrainLogEntry&)>& on_epoch = {}) {
  cfg.validate();
  const auto correct = correct_examples(dump, train);
  if (correct.size() < 2) fail(ErrorKind::EmptyClass, "need at least two teacher-correct training examples");

  TrainResult res;
  auto& voc = res.vocabulary;
  voc = build_vocabulary(dump, train, signed_activation);
  const auto seeds = seed_thresholds(dump, head, voc, train, cfg);
  const optim::Layout L{voc.n_gates(), dump.n_classes, voc.n_features()};

  // 90/10 split of the teacher-correct examples for early stopping.
  Rng rng(derive_seed({cfg.rng_seed, 0x7472u}));
  auto shuffled = correct;
  rng.shuffle(shuffled);
  const std::size_t n_val = std::max<std::size_t>(1, shuffled.size() / 10);
  std::vector<int> val_idx(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<int> fit_idx(shuffled.begin() + static_cast<std::ptrdiff_t>(n_val), shuffled.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(fit_idx.begin(), fit_idx.end());
  const auto fit = make_examples(dump, head, fit_idx);
  const auto val = make_examples(dump, head, val_idx);
  std::vector<int> fit_labels;
  for (int i : fit_idx) fit_labels.push_back(dump.labels[static_cast<std::size_t>(i)]);

  std::vector<double> theta(L.size(), 0.0);
  for (int g = 0; g < L.G; ++g) {
    theta[L.T(g)] = seeds.T0[static_cast<std::size_t>(g)];
    theta[L.s(g)] = 1.0;
  }
  warm_start_head(voc, L, theta, fit, fit_labels);

  const std::size_t n_gate_params = static_cast<std::size_t>(2 * L.G);
  optim::Bounds gate_bounds;
  for (int g = 0; g < L.G; ++g) {
    gate_bounds.lo.push_back(seeds.lo[static_cast<std::size_t>(g)]);
    gate_bounds.hi.push_back(seeds.hi[static_cast<std::size_t>(g)]);
  }
  for (int g = 0; g < L.G; ++g) {
    gate_bounds.lo.push_back(optim::kSharpMin);
    gate_bounds.hi.push_back(optim::kSharpMax);
  }
  optim::AdamState gate_state, head_state;
  const optim::Hyper hp{cfg.lambda_T, cfg.lambda_s, cfg.lambda_use};
  const int batch = std::max(1, std::min(cfg.batch, static_cast<int>(fit.size()) / 4));

  auto best_theta = theta;
  double best_val = mean_kl(voc, L, theta, val);
  int best_epoch = 0, since_improve = 0, epochs_run = 0;
  std::vector<int> order(fit.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  auto dump_state = [&](int epoch, double loss) {
    return nlohmann::json{{"epoch", epoch}, {"loss", std::isfinite(loss) ? nlohmann::json(loss) : nlohmann::json("non-finite")},
                          {"theta", theta}, {"T0", seeds.T0}, {"adam_t", gate_state.t}};
  };

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      std::vector<const optim::Example*> mb;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(batch)); ++k)
        mb.push_back(&fit[static_cast<std::size_t>(order[k])]);
      const auto r = optim::objective_with_grad(voc, L, theta, seeds.T0, mb, hp);
      bool finite = std::isfinite(r.loss);
      for (double g : r.grad) finite = finite && std::isfinite(g);
      if (!finite) throw DivergedError("non-finite loss at epoch " + std::to_string(epoch), dump_state(epoch, r.loss));
      std::vector<double> gp(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(n_gate_params));
      std::vector<double> gg(r.grad.begin(), r.grad.begin() + static_cast<std::ptrdiff_t>(n_gate_params));
      std::vector<double> hp_(theta.begin() + static_cast<std::ptrdiff_t>(n_gate_params), theta.end());
      std::vector<double> hg(r.grad.begin() + static_cast<std::ptrdiff_t>(n_gate_params), r.grad.end());
      optim::adam_step(gp, gg, gate_state, cfg.lr_gates, &gate_bounds);
      optim::adam_step(hp_, hg, head_state, cfg.lr_head);
      std::copy(gp.begin(), gp.end(), theta.begin());
      std::copy(hp_.begin(), hp_.end(), theta.begin() + static_cast<std::ptrdiff_t>(n_gate_params));
    }
    epochs_run = epoch;
    TrainLogEntry e;
    e.epoch = epoch;
    e.train_kl = mean_kl(voc, L, theta, fit);
    e.val_kl = mean_kl(voc, L, theta, val);
    if (!std::isfinite(e.train_kl) || !std::isfinite(e.val_kl))
      throw DivergedError("non-finite KL after epoch " + std::to_string(epoch), dump_state(epoch, e.train_kl));
    for (int g = 0; g < L.G; ++g) {
      e.mean_abs_dT += std::abs(theta[L.T(g)] - seeds.T0[static_cast<std::size_t>(g)]);
      e.mean_s += theta[L.s(g)];
    }
    e.mean_abs_dT /= L.G;
    e.mean_s /= L.G;
    const bool improved_enough = e.val_kl < best_val - cfg.min_kl_improvement;
    if (e.val_kl < best_val) {
      best_val = e.val_kl;
      best_theta = theta;
      best_epoch = epoch;
    }
    since_improve = improved_enough ? 0 : since_improve + 1;
    e.best_val_kl = best_val;
    res.log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (since_improve >= cfg.patience) break;
  }
  theta = best_theta;

  // Harden.
  std::vector<std::array<double, 3>> usage(voc.ranked.size(), {0.0, 0.0, 0.0});
  {
    std::vector<double> f;
    for (const auto& ex : fit) {
      optim::relaxed_features(voc, L, theta, ex, f);
      for (std::size_t r = 0; r < voc.ranked.size(); ++r)
        for (int k = 0; k < 3; ++k)
          usage[r][static_cast<std::size_t>(k)] += f[static_cast<std::size_t>(L.G) + 3 * r + static_cast<std::size_t>(k)];
    }
    for (auto& u : usage)
      for (auto& x : u) x /= static_cast<double>(fit.size());
  }
  const auto align = alignment_stats(dump, head, train);
  auto& ps = res.predicates;
  ps.head_activation = signed_activation ? "gelu" : "relu";
  ps.d = dump.d;
  ps.n_classes = dump.n_classes;
  ps.m_relaxed = L.m;
  ps.rng_seed = cfg.rng_seed;
  ps.epochs_run = epochs_run;
  ps.best_epoch = best_epoch;
  ps.best_val_kl = best_val;
  for (int g = 0; g < L.G; ++g) {
    const auto& slot = voc.gates[static_cast<std::size_t>(g)];
    PredicateSpec p;
    p.id = g;
    p.channel = slot.channel;
    p.branch = !signed_activation ? Branch::Plain : (slot.negative ? Branch::Negative : Branch::Positive);
    p.T = theta[L.T(g)];
    p.s = theta[L.s(g)];
    p.T0 = seeds.T0[static_cast<std::size_t>(g)];
    const auto it = std::find(voc.ranked.begin(), voc.ranked.end(), g);
    if (it != voc.ranked.end()) {
      const auto r = static_cast<std::size_t>(it - voc.ranked.begin());
      for (int k = 0; k < 3; ++k) {
        const int col = L.G + 3 * static_cast<int>(r) + k;
        double norm = 0.0;
        for (int c = 0; c < L.C; ++c) norm += theta[L.W(c, col)] * theta[L.W(c, col)];
        p.usage[static_cast<std::size_t>(k)] = usage[r][static_cast<std::size_t>(k)] * std::sqrt(norm);
      }
    }
    const auto& a = align[static_cast<std::size_t>(slot.channel)];
    if (a) p.alignment = p.T - *a;
    ps.predicates.push_back(p);
  }
  harden(ps, dump, train, cfg.rank_floor);

  res.rule_head.n_classes = L.C;
  res.rule_head.m = L.m;
  for (int c = 0; c < L.C; ++c) {
    for (int i = 0; i < L.m; ++i) res.rule_head.W.push_back(theta[L.W(c, i)]);
    res.rule_head.b.push_back(theta[L.b(c)]);
  }
  return res;
}

}  // namespace visionlogic
