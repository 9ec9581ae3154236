#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <vector>

#include "visionlogic/error.hpp"

namespace visionlogic::optim {

inline constexpr double kGateEps = 1e-6;
inline constexpr double kSharpMin = 0.5;
inline constexpr double kSharpMax = 5.0;

template <class Real>
[[nodiscard]] Real sigmoid(Real x) {
  if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

struct GateValue {
  double value = 0.0;
  double d_T = 0.0;
  double d_s = 0.0;
  double d_z = 0.0;
};

/// sigma(s (z - T)) clamped to [eps, 1 - eps]. Derivatives are those of the
/// clamped function (zero where the clamp is active).
template <class Real = double>
[[nodiscard]] Real soft_gate_value(Real z, Real T, Real s) {
  const Real v = sigmoid<Real>(s * (z - T));
  return std::clamp(v, Real(kGateEps), Real(1) - Real(kGateEps));
}

[[nodiscard]] inline GateValue soft_gate(double z, double T, double s) {
  const double sig = sigmoid(s * (z - T));
  GateValue g;
  if (sig < kGateEps || sig > 1.0 - kGateEps) {
    g.value = std::clamp(sig, kGateEps, 1.0 - kGateEps);
    return g;
  }
  const double dsig = sig * (1.0 - sig);
  g.value = sig;
  g.d_T = -s * dsig;
  g.d_s = (z - T) * dsig;
  g.d_z = s * dsig;
  return g;
}

/// Default SoftSort temperature: 0.1 x population std of u, floored at 1e-3.
[[nodiscard]] inline double default_tau(const std::vector<double>& u) {
  if (u.empty()) return 1e-3;
  const double mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
  double ss = 0.0;
  for (double v : u) ss += (v - mean) * (v - mean);
  return std::max(1e-3, 0.1 * std::sqrt(ss / static_cast<double>(u.size())));
}

/// Indices of u sorted by value descending, ties by ascending index.
[[nodiscard]] inline std::vector<int> order_desc(const std::vector<double>& u) {
  std::vector<int> idx(u.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return u[static_cast<std::size_t>(a)] > u[static_cast<std::size_t>(b)]; });
  return idx;
}

/// Soft top-k membership weights. Row i of the relaxed permutation is
/// softmax_j(-|sorted(u)[i] - u[j]| / tau); the result is the column sum of
/// the first k rows.
[[nodiscard]] inline std::vector<double> softsort_topk(const std::vector<double>& u, int k, double tau) {
  if (u.empty()) fail(ErrorKind::EmptyVector, "softsort_topk: empty input");
  if (k < 1 || k > static_cast<int>(u.size()))
    fail(ErrorKind::InvalidArgument, "softsort_topk: k must lie in [1, d]");
  if (!(tau > 0.0)) fail(ErrorKind::InvalidArgument, "softsort_topk: tau must be positive");
  const auto ord = order_desc(u);
  const std::size_t d = u.size();
  std::vector<double> w(d, 0.0), row(d);
  for (int i = 0; i < k; ++i) {
    const double si = u[static_cast<std::size_t>(ord[static_cast<std::size_t>(i)])];
    double mx = -INFINITY;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = -std::abs(si - u[j]) / tau;
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) w[j] += row[j] / sum;
  }
  return w;
}

[[nodiscard]] inline std::vector<double> softsort_topk(const std::vector<double>& u, int k) {
  return softsort_topk(u, k, default_tau(u));
}

/// Rank 1 is the largest entry; ties go to the lower index.
[[nodiscard]] inline std::vector<int> within_example_rank(const std::vector<double>& u) {
  const auto ord = order_desc(u);
  std::vector<int> r(u.size());
  for (std::size_t pos = 0; pos < ord.size(); ++pos) r[static_cast<std::size_t>(ord[pos])] = static_cast<int>(pos) + 1;
  return r;
}

template <class Real>
[[nodiscard]] std::vector<Real> log_softmax(const std::vector<Real>& x) {
  Real mx = x[0];
  for (const auto& v : x) mx = std::max(mx, v);
  Real sum = 0;
  for (const auto& v : x) sum += std::exp(v - mx);
  const Real lse = mx + std::log(sum);
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

/// KL(softmax(p) || softmax(q)).
template <class Real = double>
[[nodiscard]] Real kl_divergence(const std::vector<Real>& p_logits, const std::vector<Real>& q_logits) {
  if (p_logits.size() != q_logits.size()) fail(ErrorKind::LengthMismatch, "kl_divergence: logit lengths differ");
  if (p_logits.empty()) fail(ErrorKind::EmptyVector, "kl_divergence: empty logits");
  const auto lp = log_softmax(p_logits);
  const auto lq = log_softmax(q_logits);
  Real kl = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  return std::max(kl, Real(0));
}

/// Gradient of kl_divergence with respect to q_logits: softmax(q) - softmax(p).
[[nodiscard]] inline std::vector<double> kl_grad_q(const std::vector<double>& p_logits,
                                                   const std::vector<double>& q_logits) {
  const auto lp = log_softmax(p_logits);
  const auto lq = log_softmax(q_logits);
  std::vector<double> g(lp.size());
  for (std::size_t i = 0; i < lp.size(); ++i) g[i] = std::exp(lq[i]) - std::exp(lp[i]);
  return g;
}

template <class Real = double>
[[nodiscard]] Real group_lasso(const std::vector<std::array<Real, 3>>& usages) {
  Real total = 0;
  for (const auto& u : usages) total += std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  return total;
}

/// Subgradient of group_lasso; zero at the origin.
[[nodiscard]] inline std::vector<std::array<double, 3>> group_lasso_grad(const std::vector<std::array<double, 3>>& usages) {
  std::vector<std::array<double, 3>> g(usages.size(), {0.0, 0.0, 0.0});
  for (std::size_t i = 0; i < usages.size(); ++i) {
    const auto& u = usages[i];
    const double n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    if (n > 0.0)
      for (int k = 0; k < 3; ++k) g[i][static_cast<std::size_t>(k)] = u[static_cast<std::size_t>(k)] / n;
  }
  return g;
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long long t = 0;
  bool operator==(const AdamState&) const = default;
};

struct Bounds {
  std::vector<double> lo;
  std::vector<double> hi;
};

/// One Adam step (beta1 0.9, beta2 0.999, eps 1e-8) followed by clipping
/// each parameter into [lo, hi] when bounds are supplied.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& st, double lr,
                      const Bounds* bounds = nullptr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (grads.size() != params.size()) fail(ErrorKind::ShapeMismatch, "adam_step: gradient size differs from parameters");
  if (st.m.empty()) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  if (st.m.size() != params.size() || st.v.size() != params.size())
    fail(ErrorKind::ShapeMismatch, "adam_step: optimizer state size differs from parameters");
  if (bounds && (bounds->lo.size() != params.size() || bounds->hi.size() != params.size()))
    fail(ErrorKind::ShapeMismatch, "adam_step: bounds size differs from parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * grads[i];
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * grads[i] * grads[i];
    const double mh = st.m[i] / c1;
    const double vh = st.v[i] / c2;
    params[i] -= lr * mh / (std::sqrt(vh) + eps);
    if (bounds) params[i] = std::clamp(params[i], bounds->lo[i], bounds->hi[i]);
  }
}

/// Max over coordinates of |analytic - numeric| / max(1e-8, |numeric|), with
/// numeric gradients from central differences of step h.
template <class Real, class LossFn>
[[nodiscard]] double finite_diff_check(LossFn&& loss, const std::vector<double>& params,
                                       const std::vector<double>& analytic, double h) {
  if (!(h > 0.0)) fail(ErrorKind::InvalidArgument, "finite_diff_check: h must be positive");
  if (analytic.size() != params.size()) fail(ErrorKind::ShapeMismatch, "finite_diff_check: gradient size differs");
  std::vector<Real> x(params.begin(), params.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real orig = x[i];
    x[i] = orig + Real(h);
    const Real fp = loss(x);
    x[i] = orig - Real(h);
    const Real fm = loss(x);
    x[i] = orig;
    const double numeric = static_cast<double>((fp - fm) / (Real(2) * Real(h)));
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Distillation objective over relaxed predicates
// ---------------------------------------------------------------------------

struct GateSlot {
  int channel = 0;
  bool negative = false;
  bool operator==(const GateSlot&) const = default;
};

/// Relaxed predicate vocabulary: one gate per slot, plus three rank variants
/// (k = 1, 2, 3) for every non-negative slot. Feature order is
/// [gates..., rank(slot r, k=1), rank(slot r, k=2), rank(slot r, k=3), ...].
struct Vocabulary {
  std::vector<GateSlot> gates;
  std::vector<int> ranked;  // gate slot of each rank-variant group

  [[nodiscard]] int n_gates() const { return static_cast<int>(gates.size()); }
  [[nodiscard]] int n_features() const { return n_gates() + 3 * static_cast<int>(ranked.size()); }
  bool operator==(const Vocabulary&) const = default;
};

struct Example {
  std::vector<double> z;              // d
  std::vector<double> teacher;        // teacher logits, n_classes
  std::array<std::vector<double>, 3> w;  // soft top-k weights for k = 1..3, each d
};

struct Hyper {
  double lambda_T = 1.0;
  double lambda_s = 0.1;
  double lambda_use = 5e-3;
};

/// Flat parameter layout: [T (G), s (G), W_rule (C x m row-major), b_rule (C)].
struct Layout {
  int G = 0;
  int C = 0;
  int m = 0;
  [[nodiscard]] std::size_t size() const { return static_cast<std::size_t>(2 * G + C * m + C); }
  [[nodiscard]] std::size_t T(int g) const { return static_cast<std::size_t>(g); }
  [[nodiscard]] std::size_t s(int g) const { return static_cast<std::size_t>(G + g); }
  [[nodiscard]] std::size_t W(int c, int i) const { return static_cast<std::size_t>(2 * G + c * m + i); }
  [[nodiscard]] std::size_t b(int c) const { return static_cast<std::size_t>(2 * G + C * m + c); }
};

template <class Real>
void relaxed_features(const Vocabulary& voc, const Layout& L, const std::vector<Real>& theta, const Example& ex,
                      std::vector<Real>& f) {
  f.assign(static_cast<std::size_t>(voc.n_features()), Real(0));
  for (int g = 0; g < voc.n_gates(); ++g) {
    const auto& slot = voc.gates[static_cast<std::size_t>(g)];
    const Real z = static_cast<Real>(ex.z[static_cast<std::size_t>(slot.channel)]);
    const Real T = theta[L.T(g)], s = theta[L.s(g)];
    f[static_cast<std::size_t>(g)] = slot.negative ? soft_gate_value<Real>(-z, -T, s) : soft_gate_value<Real>(z, T, s);
  }
  for (std::size_t r = 0; r < voc.ranked.size(); ++r) {
    const int g = voc.ranked[r];
    const int ch = voc.gates[static_cast<std::size_t>(g)].channel;
    for (int k = 0; k < 3; ++k)
      f[static_cast<std::size_t>(voc.n_gates()) + 3 * r + static_cast<std::size_t>(k)] =
          static_cast<Real>(ex.w[static_cast<std::size_t>(k)][static_cast<std::size_t>(ch)]) * f[static_cast<std::size_t>(g)];
  }
}

/// Full objective: mean KL(teacher || rule head) + lambda_T |T - T0|^2 +
/// lambda_s sum (s - 1)^2 + lambda_use * group lasso over batch-mean usages
/// of each slot's rank variants.
template <class Real>
[[nodiscard]] Real objective(const Vocabulary& voc, const Layout& L, const std::vector<Real>& theta,
                             const std::vector<double>& T0, const std::vector<const Example*>& batch, const Hyper& hp) {
  const std::size_t B = batch.size();
  Real kl_sum = 0;
  std::vector<Real> f, q(static_cast<std::size_t>(L.C)), t(static_cast<std::size_t>(L.C));
  std::vector<std::array<Real, 3>> usage(voc.ranked.size(), {Real(0), Real(0), Real(0)});
  for (const auto* ex : batch) {
    relaxed_features(voc, L, theta, *ex, f);
    for (int c = 0; c < L.C; ++c) {
      Real acc = theta[L.b(c)];
      for (int i = 0; i < L.m; ++i) acc += theta[L.W(c, i)] * f[static_cast<std::size_t>(i)];
      q[static_cast<std::size_t>(c)] = acc;
      t[static_cast<std::size_t>(c)] = static_cast<Real>(ex->teacher[static_cast<std::size_t>(c)]);
    }
    kl_sum += kl_divergence(t, q);
    for (std::size_t r = 0; r < voc.ranked.size(); ++r)
      for (int k = 0; k < 3; ++k)
        usage[r][static_cast<std::size_t>(k)] += f[static_cast<std::size_t>(voc.n_gates()) + 3 * r + static_cast<std::size_t>(k)];
  }
  Real loss = B ? kl_sum / static_cast<Real>(B) : Real(0);
  for (auto& u : usage)
    for (auto& x : u) x /= static_cast<Real>(std::max<std::size_t>(B, 1));
  Real reg_T = 0, reg_s = 0;
  for (int g = 0; g < L.G; ++g) {
    const Real dT = theta[L.T(g)] - static_cast<Real>(T0[static_cast<std::size_t>(g)]);
    const Real ds = theta[L.s(g)] - Real(1);
    reg_T += dT * dT;
    reg_s += ds * ds;
  }
  return loss + Real(hp.lambda_T) * reg_T + Real(hp.lambda_s) * reg_s + Real(hp.lambda_use) * group_lasso(usage);
}

struct ObjectiveResult {
  double loss = 0.0;
  double kl = 0.0;
  std::vector<double> grad;
};

/// Objective value and its hand-derived gradient with respect to theta.
[[nodiscard]] inline ObjectiveResult objective_with_grad(const Vocabulary& voc, const Layout& L,
                                                         const std::vector<double>& theta, const std::vector<double>& T0,
                                                         const std::vector<const Example*>& batch, const Hyper& hp) {
  const std::size_t B = batch.size();
  const double invB = B ? 1.0 / static_cast<double>(B) : 0.0;
  const int G = voc.n_gates();
  const auto R = voc.ranked.size();
  ObjectiveResult res;
  res.grad.assign(L.size(), 0.0);

  std::vector<std::vector<double>> feats(B);
  std::vector<std::vector<GateValue>> gates(B, std::vector<GateValue>(static_cast<std::size_t>(G)));
  std::vector<std::array<double, 3>> usage(R, {0.0, 0.0, 0.0});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ex = *batch[b];
    relaxed_features(voc, L, theta, ex, feats[b]);
    for (int g = 0; g < G; ++g) {
      const auto& slot = voc.gates[static_cast<std::size_t>(g)];
      const double z = ex.z[static_cast<std::size_t>(slot.channel)];
      auto gv = slot.negative ? soft_gate(-z, -theta[L.T(g)], theta[L.s(g)]) : soft_gate(z, theta[L.T(g)], theta[L.s(g)]);
      if (slot.negative) gv.d_T = -gv.d_T;
      gates[b][static_cast<std::size_t>(g)] = gv;
    }
    for (std::size_t r = 0; r < R; ++r)
      for (int k = 0; k < 3; ++k) usage[r][static_cast<std::size_t>(k)] += feats[b][static_cast<std::size_t>(G) + 3 * r + static_cast<std::size_t>(k)];
  }
  for (auto& u : usage)
    for (auto& x : u) x *= invB;
  const auto gl_grad = group_lasso_grad(usage);

  std::vector<double> q(static_cast<std::size_t>(L.C)), t(static_cast<std::size_t>(L.C)), df(static_cast<std::size_t>(L.m));
  double kl_sum = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ex = *batch[b];
    const auto& f = feats[b];
    for (int c = 0; c < L.C; ++c) {
      double acc = theta[L.b(c)];
      for (int i = 0; i < L.m; ++i) acc += theta[L.W(c, i)] * f[static_cast<std::size_t>(i)];
      q[static_cast<std::size_t>(c)] = acc;
      t[static_cast<std::size_t>(c)] = ex.teacher[static_cast<std::size_t>(c)];
    }
    kl_sum += kl_divergence(t, q);
    auto dq = kl_grad_q(t, q);
    for (auto& v : dq) v *= invB;
    std::fill(df.begin(), df.end(), 0.0);
    for (int c = 0; c < L.C; ++c) {
      const double g = dq[static_cast<std::size_t>(c)];
      res.grad[L.b(c)] += g;
      for (int i = 0; i < L.m; ++i) {
        res.grad[L.W(c, i)] += g * f[static_cast<std::size_t>(i)];
        df[static_cast<std::size_t>(i)] += g * theta[L.W(c, i)];
      }
    }
    for (std::size_t r = 0; r < R; ++r)
      for (int k = 0; k < 3; ++k)
        df[static_cast<std::size_t>(G) + 3 * r + static_cast<std::size_t>(k)] += hp.lambda_use * gl_grad[r][static_cast<std::size_t>(k)] * invB;
    std::vector<double> dgate(df.begin(), df.begin() + G);
    for (std::size_t r = 0; r < R; ++r) {
      const int g = voc.ranked[r];
      const int ch = voc.gates[static_cast<std::size_t>(g)].channel;
      for (int k = 0; k < 3; ++k)
        dgate[static_cast<std::size_t>(g)] += df[static_cast<std::size_t>(G) + 3 * r + static_cast<std::size_t>(k)] *
                                              ex.w[static_cast<std::size_t>(k)][static_cast<std::size_t>(ch)];
    }
    for (int g = 0; g < G; ++g) {
      const auto& gv = gates[b][static_cast<std::size_t>(g)];
      res.grad[L.T(g)] += dgate[static_cast<std::size_t>(g)] * gv.d_T;
      res.grad[L.s(g)] += dgate[static_cast<std::size_t>(g)] * gv.d_s;
    }
  }
  double reg_T = 0.0, reg_s = 0.0;
  for (int g = 0; g < G; ++g) {
    const double dT = theta[L.T(g)] - T0[static_cast<std::size_t>(g)];
    const double ds = theta[L.s(g)] - 1.0;
    reg_T += dT * dT;
    reg_s += ds * ds;
    res.grad[L.T(g)] += 2.0 * hp.lambda_T * dT;
    res.grad[L.s(g)] += 2.0 * hp.lambda_s * ds;
  }
  res.kl = kl_sum * invB;
  res.loss = res.kl + hp.lambda_T * reg_T + hp.lambda_s * reg_s + hp.lambda_use * group_lasso(usage);
  return res;
}

}  // namespace visionlogic::optim
