#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/grounding.hpp"
#include "visionlogic/image.hpp"
#include "visionlogic/nnforward.hpp"
#include "visionlogic/parallel.hpp"
#include "visionlogic/predicate_spec.hpp"
#include "visionlogic/rng.hpp"
#include "visionlogic/rules.hpp"

namespace visionlogic {

enum class PerturbKind { Gaussian, Pixelate, Occlusion };

NLOHMANN_JSON_SERIALIZE_ENUM(PerturbKind, {
                                              {PerturbKind::Gaussian, "gaussian"},
                                              {PerturbKind::Pixelate, "pixelate"},
                                              {PerturbKind::Occlusion, "occlusion"},
                                          })

struct Perturbation {
  PerturbKind kind = PerturbKind::Gaussian;
  double sigma = 0.1;
  int block = 4;
  BBox box;
  MaskKind mask = MaskKind::Noise;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (kind == PerturbKind::Gaussian && !(sigma > 0)) fail(ErrorKind::InvalidArgument, "gaussian sigma must be positive");
    if (kind == PerturbKind::Pixelate && block < 2) fail(ErrorKind::InvalidArgument, "pixelate block must be at least 2");
  }

  [[nodiscard]] std::string label() const {
    char buf[96];
    switch (kind) {
      case PerturbKind::Gaussian: std::snprintf(buf, sizeof buf, "gaussian(sigma=%.4f)", sigma); break;
      case PerturbKind::Pixelate: std::snprintf(buf, sizeof buf, "pixelate(block=%d)", block); break;
      case PerturbKind::Occlusion:
        std::snprintf(buf, sizeof buf, "occlusion(%d,%d,%d,%d,%s)", box.x, box.y, box.w, box.h, to_string(mask).c_str());
        break;
    }
    return buf;
  }
  bool operator==(const Perturbation&) const = default;
};

inline void to_json(nlohmann::json& j, const Perturbation& p) {
  j = nlohmann::json{{"kind", p.kind}, {"rng_seed", p.rng_seed}};
  if (p.kind == PerturbKind::Gaussian) j["sigma"] = p.sigma;
  if (p.kind == PerturbKind::Pixelate) j["block"] = p.block;
  if (p.kind == PerturbKind::Occlusion) {
    j["box"] = p.box;
    j["mask"] = p.mask;
  }
}
inline void from_json(const nlohmann::json& j, Perturbation& p) {
  p.kind = j.at("kind").get<PerturbKind>();
  p.rng_seed = j.value("rng_seed", std::uint64_t{0});
  if (j.contains("sigma")) p.sigma = j.at("sigma").get<double>();
  if (j.contains("block")) p.block = j.at("block").get<int>();
  if (j.contains("box")) p.box = j.at("box").get<BBox>();
  if (j.contains("mask")) p.mask = parse_mask_kind(j.at("mask").get<std::string>());
}

[[nodiscard]] inline Image pixelate(const Image& img, int block) {
  Image out = img;
  for (int c = 0; c < img.c; ++c)
    for (int by = 0; by < img.h; by += block)
      for (int bx = 0; bx < img.w; bx += block) {
        const int y1 = std::min(img.h, by + block), x1 = std::min(img.w, bx + block);
        double s = 0.0;
        for (int y = by; y < y1; ++y)
          for (int x = bx; x < x1; ++x) s += img.at(c, y, x);
        const auto mean = static_cast<float>(s / ((y1 - by) * (x1 - bx)));
        for (int y = by; y < y1; ++y)
          for (int x = bx; x < x1; ++x) out.at(c, y, x) = mean;
      }
  clamp01(out);
  return out;
}

[[nodiscard]] inline Image perturb(const Image& img, const Perturbation& p) {
  p.validate();
  Rng rng(p.rng_seed);
  switch (p.kind) {
    case PerturbKind::Gaussian: {
      Image out = img;
      for (auto& v : out.data) v = static_cast<float>(static_cast<double>(v) + p.sigma * rng.normal());
      clamp01(out);
      return out;
    }
    case PerturbKind::Pixelate: return pixelate(img, p.block);
    case PerturbKind::Occlusion: return mask_region(img, p.box, p.mask, rng);
  }
  return img;
}

enum class RootCause { None, TypeA, TypeB, Mixed, Uncovered };

NLOHMANN_JSON_SERIALIZE_ENUM(RootCause, {
                                            {RootCause::None, "none"},
                                            {RootCause::TypeA, "type_a"},
                                            {RootCause::TypeB, "type_b"},
                                            {RootCause::Mixed, "mixed"},
                                            {RootCause::Uncovered, "uncovered"},
                                        })

struct RootCauseReport {
  int image_id = 0;
  std::string perturbation;
  int original_prediction = -1;
  int perturbed_prediction = -1;  // -1 when the perturbed image is uncovered
  ActiveSet original_active;
  ActiveSet perturbed_active;
  ActiveSet deactivated;
  ActiveSet activated;
  RootCause cause = RootCause::None;
  bool operator==(const RootCauseReport&) const = default;
};

inline void to_json(nlohmann::json& j, const RootCauseReport& r) {
  j = nlohmann::json{{"image_id", r.image_id},
                     {"perturbation", r.perturbation},
                     {"original_prediction", r.original_prediction},
                     {"perturbed_prediction", r.perturbed_prediction},
                     {"original_active", r.original_active},
                     {"perturbed_active", r.perturbed_active},
                     {"deactivated", r.deactivated},
                     {"activated", r.activated},
                     {"cause", r.cause}};
}
inline void from_json(const nlohmann::json& j, RootCauseReport& r) {
  r.image_id = j.at("image_id").get<int>();
  r.perturbation = j.at("perturbation").get<std::string>();
  r.original_prediction = j.at("original_prediction").get<int>();
  r.perturbed_prediction = j.at("perturbed_prediction").get<int>();
  r.original_active = j.at("original_active").get<ActiveSet>();
  r.perturbed_active = j.at("perturbed_active").get<ActiveSet>();
  r.deactivated = j.at("deactivated").get<ActiveSet>();
  r.activated = j.at("activated").get<ActiveSet>();
  r.cause = j.at("cause").get<RootCause>();
}

[[nodiscard]] inline ActiveSet set_difference(const ActiveSet& a, const ActiveSet& b) {
  ActiveSet out;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}
[[nodiscard]] inline ActiveSet set_union(const ActiveSet& a, const ActiveSet& b) {
  ActiveSet out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

/// Rule prediction, or -1 when nothing is active.
[[nodiscard]] inline int predict_or_uncovered(const ActiveSet& a, const ClassProfile& prof) {
  return a.empty() ? -1 : predict(a, prof).cls;
}

/// Type A: dropping the deactivated predicates alone changes the prediction.
/// Type B: adding the newly active predicates alone changes it. Type A wins
/// when both hold; Mixed when neither does.
[[nodiscard]] inline RootCauseReport classify_root_cause(const ActiveSet& p_orig, const ActiveSet& p_adv, const ClassProfile& prof) {
  RootCauseReport r;
  r.original_active = p_orig;
  r.perturbed_active = p_adv;
  r.deactivated = set_difference(p_orig, p_adv);
  r.activated = set_difference(p_adv, p_orig);
  r.original_prediction = predict_or_uncovered(p_orig, prof);
  r.perturbed_prediction = predict_or_uncovered(p_adv, prof);
  if (p_orig.empty() || p_adv.empty()) {
    r.cause = RootCause::Uncovered;
    return r;
  }
  if (r.perturbed_prediction == r.original_prediction) {
    r.cause = RootCause::None;
    return r;
  }
  const ActiveSet without_d = set_difference(p_orig, r.deactivated);
  const bool type_a = predict_or_uncovered(without_d, prof) != r.original_prediction;
  const bool type_b = predict_or_uncovered(set_union(p_orig, r.activated), prof) != r.original_prediction;
  r.cause = type_a ? RootCause::TypeA : (type_b ? RootCause::TypeB : RootCause::Mixed);
  return r;
}

struct ProbeSummaryRow {
  std::string perturbation;
  int attempts = 0;
  int flips = 0;
  int type_a = 0;
  int type_b = 0;
  int mixed = 0;
  int uncovered = 0;
  bool operator==(const ProbeSummaryRow&) const = default;
};

inline void to_json(nlohmann::json& j, const ProbeSummaryRow& r) {
  j = nlohmann::json{{"perturbation", r.perturbation}, {"attempts", r.attempts}, {"flips", r.flips}, {"type_a", r.type_a},
                     {"type_b", r.type_b},             {"mixed", r.mixed},       {"uncovered", r.uncovered}};
}

struct ProbeReport {
  std::vector<RootCauseReport> reports;
  std::vector<ProbeSummaryRow> summary;
  int images = 0;
  int skipped_uncovered = 0;
};

inline void to_json(nlohmann::json& j, const ProbeReport& r) {
  j = nlohmann::json{{"images", r.images}, {"skipped_uncovered", r.skipped_uncovered}, {"summary", r.summary}, {"reports", r.reports}};
}

struct ProbeImage {
  int image_id = 0;
  Image image;
};

/// Applies every perturbation to every image and keeps flips of the rule
/// prediction (plus perturbed images that lose all active predicates).
[[nodiscard]] inline ProbeReport probe(const std::vector<ProbeImage>& images, const std::vector<PredicateSpec>& preds,
                                       const ClassProfile& prof, const Engine& engine, const std::vector<Perturbation>& grid,
                                       std::uint64_t seed, int jobs = 1) {
  struct Slot {
    bool covered = false;
    std::vector<std::optional<RootCauseReport>> per_attack;
  };
  std::vector<Slot> slots(images.size());
  auto active_on = [&](const Image& img) {
    const auto z = engine.forward(img).z;
    PredicateVector v(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) v[i] = evaluate_predicate(ForwardTrace{z, {}, std::nullopt}, preds[i]) ? 1 : 0;
    return active_set(prof, v);
  };
  parallel_for(images.size(), jobs, [&](std::size_t n) {
    const auto& pi = images[n];
    auto& slot = slots[n];
    const auto orig = active_on(pi.image);
    slot.per_attack.resize(grid.size());
    if (orig.empty()) return;
    slot.covered = true;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      Perturbation p = grid[g];
      p.rng_seed = derive_seed({seed, static_cast<std::uint64_t>(pi.image_id), static_cast<std::uint64_t>(g), grid[g].rng_seed});
      const auto adv = active_on(perturb(pi.image, p));
      auto r = classify_root_cause(orig, adv, prof);
      if (r.cause == RootCause::None) continue;
      r.image_id = pi.image_id;
      r.perturbation = grid[g].label();
      slot.per_attack[g] = std::move(r);
    }
  });
  ProbeReport out;
  out.images = static_cast<int>(images.size());
  for (const auto& p : grid) out.summary.push_back({p.label()});
  for (const auto& slot : slots) {
    if (!slot.covered) {
      ++out.skipped_uncovered;
      continue;
    }
    for (std::size_t g = 0; g < grid.size(); ++g) {
      auto& row = out.summary[g];
      ++row.attempts;
      const auto& r = slot.per_attack[g];
      if (!r) continue;
      if (r->cause != RootCause::Uncovered) ++row.flips;
      switch (r->cause) {
        case RootCause::TypeA: ++row.type_a; break;
        case RootCause::TypeB: ++row.type_b; break;
        case RootCause::Mixed: ++row.mixed; break;
        case RootCause::Uncovered: ++row.uncovered; break;
        case RootCause::None: break;
      }
      out.reports.push_back(*r);
    }
  }
  return out;
}

}  // namespace visionlogic
