#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/image.hpp"
#include "visionlogic/nnforward.hpp"
#include "visionlogic/png_io.hpp"
#include "visionlogic/predicate_spec.hpp"
#include "visionlogic/rng.hpp"

namespace visionlogic {

inline constexpr int kMinBoxSide = 4;

struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  [[nodiscard]] long long area() const { return static_cast<long long>(w) * h; }
  [[nodiscard]] bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  [[nodiscard]] bool inside(const BBox& o) const { return x >= o.x && y >= o.y && x + w <= o.x + o.w && y + h <= o.y + o.h; }
  [[nodiscard]] bool within(int width, int height) const { return x >= 0 && y >= 0 && w > 0 && h > 0 && x + w <= width && y + h <= height; }
  bool operator==(const BBox&) const = default;
};

inline void to_json(nlohmann::json& j, const BBox& b) { j = nlohmann::json{{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }
inline void from_json(const nlohmann::json& j, BBox& b) {
  b.x = j.at("x").get<int>();
  b.y = j.at("y").get<int>();
  b.w = j.at("w").get<int>();
  b.h = j.at("h").get<int>();
}

[[nodiscard]] inline double iou(const BBox& a, const BBox& b) {
  const int x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const long long inter = (x1 > x0 && y1 > y0) ? static_cast<long long>(x1 - x0) * (y1 - y0) : 0;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Tight box around the foreground of a mask, if any.
[[nodiscard]] inline std::optional<BBox> tight_box(const Mask& m) {
  int x0 = m.w, y0 = m.h, x1 = -1, y1 = -1;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) return std::nullopt;
  return BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

enum class MaskKind { Noise, Blur, Mean, Black, White };

NLOHMANN_JSON_SERIALIZE_ENUM(MaskKind, {
                                           {MaskKind::Noise, "noise"},
                                           {MaskKind::Blur, "blur"},
                                           {MaskKind::Mean, "mean"},
                                           {MaskKind::Black, "black"},
                                           {MaskKind::White, "white"},
                                       })

[[nodiscard]] inline std::string to_string(MaskKind k) { return nlohmann::json(k).get<std::string>(); }

[[nodiscard]] inline MaskKind parse_mask_kind(const std::string& s) {
  for (auto k : {MaskKind::Noise, MaskKind::Blur, MaskKind::Mean, MaskKind::Black, MaskKind::White})
    if (to_string(k) == s) return k;
  fail(ErrorKind::InvalidArgument, "unknown masking strategy '" + s + "'");
}

struct GroundingConfig {
  double lambda = 0.9;
  int kappa = 10;
  int trials = 5;
  double heatmap_frac = 0.15;
  double fallback_central_frac = 0.90;
  MaskKind strategy = MaskKind::Blur;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(lambda > 0 && lambda < 1)) fail(ErrorKind::InvalidArgument, "lambda must lie in (0, 1)");
    if (kappa < 1) fail(ErrorKind::InvalidArgument, "kappa must be at least 1");
    if (trials < 1) fail(ErrorKind::InvalidArgument, "trials must be at least 1");
    if (!(heatmap_frac > 0 && heatmap_frac <= 1)) fail(ErrorKind::InvalidArgument, "heatmap_frac must lie in (0, 1]");
    if (!(fallback_central_frac > 0 && fallback_central_frac <= 1))
      fail(ErrorKind::InvalidArgument, "fallback_central_frac must lie in (0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const GroundingConfig& c) {
  j = nlohmann::json{{"lambda", c.lambda},
                     {"kappa", c.kappa},
                     {"trials", c.trials},
                     {"heatmap_frac", c.heatmap_frac},
                     {"fallback_central_frac", c.fallback_central_frac},
                     {"strategy", c.strategy},
                     {"rng_seed", c.rng_seed}};
}
inline void from_json(const nlohmann::json& j, GroundingConfig& c) {
  const GroundingConfig d;
  c.lambda = j.value("lambda", d.lambda);
  c.kappa = j.value("kappa", d.kappa);
  c.trials = j.value("trials", d.trials);
  c.heatmap_frac = j.value("heatmap_frac", d.heatmap_frac);
  c.fallback_central_frac = j.value("fallback_central_frac", d.fallback_central_frac);
  c.strategy = j.contains("strategy") ? parse_mask_kind(j.at("strategy").get<std::string>()) : d.strategy;
  c.rng_seed = j.value("rng_seed", d.rng_seed);
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

/// Separable Gaussian blur (11 taps, sigma 5) with edge clamping.
[[nodiscard]] inline Image gaussian_blur(const Image& img, int taps = 11, double sigma = 5.0) {
  const int r = taps / 2;
  std::vector<double> k(static_cast<std::size_t>(taps));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  for (auto& v : k) v /= sum;
  Image tmp(img.c, img.h, img.w), out(img.c, img.h, img.w);
  for (int c = 0; c < img.c; ++c) {
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * img.at(c, y, std::clamp(x + i, 0, img.w - 1));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, std::clamp(y + i, 0, img.h - 1), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  clamp01(out);
  return out;
}

/// Replaces in-box pixels according to the strategy; everything outside the
/// box is left bit-identical.
[[nodiscard]] inline Image mask_region(const Image& img, const BBox& box, MaskKind kind, Rng& rng) {
  if (!box.within(img.w, img.h)) fail(ErrorKind::InvalidArgument, "mask_region: box outside image");
  Image out = img;
  std::optional<Image> blurred;
  std::vector<float> mean(static_cast<std::size_t>(img.c), 0.0f);
  if (kind == MaskKind::Blur) blurred = gaussian_blur(img);
  if (kind == MaskKind::Mean)
    for (int c = 0; c < img.c; ++c) {
      double s = 0.0;
      const float* p = img.plane(c);
      for (int i = 0; i < img.h * img.w; ++i) s += p[i];
      mean[static_cast<std::size_t>(c)] = static_cast<float>(s / (img.h * img.w));
    }
  for (int c = 0; c < img.c; ++c)
    for (int y = box.y; y < box.y + box.h; ++y)
      for (int x = box.x; x < box.x + box.w; ++x) {
        float v = 0.0f;
        switch (kind) {
          case MaskKind::Noise: v = static_cast<float>(rng.uniform()); break;
          case MaskKind::Blur: v = blurred->at(c, y, x); break;
          case MaskKind::Mean: v = mean[static_cast<std::size_t>(c)]; break;
          case MaskKind::Black: v = 0.0f; break;
          case MaskKind::White: v = 1.0f; break;
        }
        out.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
  return out;
}

/// Uniform-noise canvas with the in-box pixels copied at their original place.
[[nodiscard]] inline Image paste_on_noise(const Image& img, const BBox& box, Rng& rng) {
  if (!box.within(img.w, img.h)) fail(ErrorKind::InvalidArgument, "paste_on_noise: box outside image");
  Image out(img.c, img.h, img.w);
  for (auto& v : out.data) v = static_cast<float>(rng.uniform());
  for (int c = 0; c < img.c; ++c)
    for (int y = box.y; y < box.y + box.h; ++y)
      for (int x = box.x; x < box.x + box.w; ++x) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

// ---------------------------------------------------------------------------
// Initial guess and proposals
// ---------------------------------------------------------------------------

[[nodiscard]] inline BBox central_box(int width, int height, double frac) {
  const double s = std::sqrt(frac);
  const int w = std::clamp(static_cast<int>(std::lround(width * s)), std::min(kMinBoxSide, width), width);
  const int h = std::clamp(static_cast<int>(std::lround(height * s)), std::min(kMinBoxSide, height), height);
  return BBox{(width - w) / 2, (height - h) / 2, w, h};
}

/// Grows a box symmetrically to the minimum side, staying inside the image.
[[nodiscard]] inline BBox enforce_floor(BBox b, int width, int height) {
  auto grow = [](int& pos, int& len, int limit) {
    const int target = std::min(kMinBoxSide, limit);
    if (len >= target) return;
    pos -= (target - len) / 2;
    len = target;
    pos = std::clamp(pos, 0, limit - len);
  };
  grow(b.x, b.w, width);
  grow(b.y, b.h, height);
  return b;
}

/// Largest 4-connected component of the thresholded map (ties to the first
/// found in raster order), as a tight box in map coordinates.
[[nodiscard]] inline std::optional<BBox> largest_component(const std::vector<float>& map, int mh, int mw, float thresh) {
  std::vector<int> label(map.size(), -1);
  std::optional<BBox> best;
  long long best_size = 0;
  std::vector<int> stack;
  for (int start = 0; start < mh * mw; ++start) {
    if (label[static_cast<std::size_t>(start)] >= 0 || !(map[static_cast<std::size_t>(start)] >= thresh)) continue;
    int x0 = mw, y0 = mh, x1 = -1, y1 = -1;
    long long size = 0;
    stack.assign(1, start);
    label[static_cast<std::size_t>(start)] = start;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / mw, x = p % mw;
      ++size;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
      const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= mw || n[1] < 0 || n[1] >= mh) continue;
        const int q = n[1] * mw + n[0];
        if (label[static_cast<std::size_t>(q)] >= 0 || !(map[static_cast<std::size_t>(q)] >= thresh)) continue;
        label[static_cast<std::size_t>(q)] = start;
        stack.push_back(q);
      }
    }
    if (size > best_size) {
      best_size = size;
      best = BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
    }
  }
  return best;
}

/// Pixels whose nearest-neighbour source cell lies in the map box.
[[nodiscard]] inline BBox map_box_to_pixels(const BBox& mb, int mh, int mw, int height, int width) {
  auto lo = [](int cell, int cells, int pixels) {
    return static_cast<int>((static_cast<long long>(cell) * pixels + cells - 1) / cells);
  };
  const int x0 = lo(mb.x, mw, width), x1 = lo(mb.x + mb.w, mw, width);
  const int y0 = lo(mb.y, mh, height), y1 = lo(mb.y + mb.h, mh, height);
  return BBox{x0, y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
}

/// Initial box from the predicate channel's feature map, or a centred
/// fallback when the model has no spatial map or the map is empty.
[[nodiscard]] inline BBox initial_guess_from_map(const std::optional<Tensor3>& fmap, const PredicateSpec& p, int height, int width,
                                                 const GroundingConfig& cfg) {
  const BBox fallback = central_box(width, height, cfg.fallback_central_frac);
  if (!fmap || p.channel < 0 || p.channel >= fmap->c) return fallback;
  std::vector<float> m(fmap->plane(p.channel), fmap->plane(p.channel) + static_cast<std::size_t>(fmap->h) * fmap->w);
  if (p.branch == Branch::Negative)
    for (auto& v : m) v = -v;
  const float mx = *std::max_element(m.begin(), m.end());
  if (!(mx > 0.0f)) return fallback;
  const auto comp = largest_component(m, fmap->h, fmap->w, static_cast<float>(cfg.heatmap_frac) * mx);
  if (!comp) return fallback;
  return enforce_floor(map_box_to_pixels(*comp, fmap->h, fmap->w, height, width), width, height);
}

[[nodiscard]] inline BBox initial_guess(const Engine& engine, const Image& img, const PredicateSpec& p, const GroundingConfig& cfg) {
  const auto trace = engine.forward(img);
  return initial_guess_from_map(trace.feature_maps, p, img.h, img.w, cfg);
}

/// Random sub-box with area in [0.9, 1.1] * lambda * area.
[[nodiscard]] inline BBox propose_shrink(const BBox& box, double lambda, Rng& rng) {
  const double target = lambda * static_cast<double>(box.area());
  const double lo = 0.9 * target, hi = 1.1 * target;
  const long long floor_area = static_cast<long long>(kMinBoxSide) * kMinBoxSide;
  if (box.w <= kMinBoxSide && box.h <= kMinBoxSide) fail(ErrorKind::TooSmall, "box already at the minimum size");
  if (target < static_cast<double>(floor_area)) fail(ErrorKind::TooSmall, "shrunken area below the minimum box");
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double a = rng.uniform(lo, hi);
    const int wmin = std::max(kMinBoxSide, static_cast<int>(std::ceil(a / box.h)));
    const int wmax = std::min(box.w, static_cast<int>(std::floor(a / kMinBoxSide)));
    if (wmin > wmax) continue;
    const int w = static_cast<int>(rng.between(wmin, wmax));
    const int h = std::clamp(static_cast<int>(std::lround(a / w)), kMinBoxSide, box.h);
    const double area = static_cast<double>(w) * h;
    if (area < lo || area > hi) continue;
    const int x = static_cast<int>(rng.between(box.x, box.x + box.w - w));
    const int y = static_cast<int>(rng.between(box.y, box.y + box.h - h));
    return BBox{x, y, w, h};
  }
  fail(ErrorKind::TooSmall, "no feasible shrink proposal");
}

// ---------------------------------------------------------------------------
// Causal checks and the search
// ---------------------------------------------------------------------------

[[nodiscard]] inline bool necessity_check(const Engine& engine, const Image& img, const BBox& box, const PredicateSpec& p,
                                          MaskKind kind, Rng& rng) {
  return !evaluate_predicate_on_image(engine, p, mask_region(img, box, kind, rng));
}

[[nodiscard]] inline bool sufficiency_check(const Engine& engine, const Image& img, const BBox& box, const PredicateSpec& p, Rng& rng) {
  return evaluate_predicate_on_image(engine, p, paste_on_noise(img, box, rng));
}

enum class GroundingStatus { Ok, NeverDeactivates, InitialInsufficient };

NLOHMANN_JSON_SERIALIZE_ENUM(GroundingStatus, {
                                                  {GroundingStatus::Ok, "ok"},
                                                  {GroundingStatus::NeverDeactivates, "never_deactivates"},
                                                  {GroundingStatus::InitialInsufficient, "initial_insufficient"},
                                              })

struct ProposalLog {
  BBox box;
  bool accepted = false;
  std::string reason;  // accepted | still_active | crop_inactive
  bool operator==(const ProposalLog&) const = default;
};

struct TrialLog {
  int trial = 0;
  std::uint64_t seed = 0;
  std::vector<ProposalLog> proposals;
  BBox final_box;
  std::string stop_reason;  // no_acceptance | too_small
  bool operator==(const TrialLog&) const = default;
};

struct GroundingResult {
  int image_id = 0;
  std::string image;
  int predicate_id = 0;
  GroundingStatus status = GroundingStatus::Ok;
  MaskKind strategy = MaskKind::Blur;
  BBox initial_box;
  bool used_fallback = false;
  BBox final_box;
  std::vector<TrialLog> trials;
  bool necessity = false;
  bool sufficiency = false;
  std::uint64_t necessity_seed = 0;
  std::uint64_t sufficiency_seed = 0;
  std::optional<BBox> refined_box;
  std::uint64_t refine_necessity_seed = 0;
  std::uint64_t refine_sufficiency_seed = 0;
  bool operator==(const GroundingResult&) const = default;
};

inline void to_json(nlohmann::json& j, const ProposalLog& p) {
  j = nlohmann::json{{"box", p.box}, {"accepted", p.accepted}, {"reason", p.reason}};
}
inline void from_json(const nlohmann::json& j, ProposalLog& p) {
  p.box = j.at("box").get<BBox>();
  p.accepted = j.at("accepted").get<bool>();
  p.reason = j.at("reason").get<std::string>();
}
inline void to_json(nlohmann::json& j, const TrialLog& t) {
  j = nlohmann::json{{"trial", t.trial}, {"seed", t.seed}, {"proposals", t.proposals}, {"final_box", t.final_box}, {"stop_reason", t.stop_reason}};
}
inline void from_json(const nlohmann::json& j, TrialLog& t) {
  t.trial = j.at("trial").get<int>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.proposals = j.at("proposals").get<std::vector<ProposalLog>>();
  t.final_box = j.at("final_box").get<BBox>();
  t.stop_reason = j.at("stop_reason").get<std::string>();
}
inline void to_json(nlohmann::json& j, const GroundingResult& r) {
  j = nlohmann::json{{"image_id", r.image_id},
                     {"image", r.image},
                     {"predicate_id", r.predicate_id},
                     {"status", r.status},
                     {"strategy", r.strategy},
                     {"initial_box", r.initial_box},
                     {"used_fallback", r.used_fallback},
                     {"final_box", r.final_box},
                     {"necessity", r.necessity},
                     {"sufficiency", r.sufficiency},
                     {"necessity_seed", r.necessity_seed},
                     {"sufficiency_seed", r.sufficiency_seed},
                     {"refined_box", r.refined_box ? nlohmann::json(*r.refined_box) : nlohmann::json(nullptr)},
                     {"refine_necessity_seed", r.refine_necessity_seed},
                     {"refine_sufficiency_seed", r.refine_sufficiency_seed},
                     {"trials", r.trials}};
}
inline void from_json(const nlohmann::json& j, GroundingResult& r) {
  r.image_id = j.at("image_id").get<int>();
  r.image = j.value("image", std::string{});
  r.predicate_id = j.at("predicate_id").get<int>();
  r.status = j.at("status").get<GroundingStatus>();
  r.strategy = parse_mask_kind(j.at("strategy").get<std::string>());
  r.initial_box = j.at("initial_box").get<BBox>();
  r.used_fallback = j.value("used_fallback", false);
  r.final_box = j.at("final_box").get<BBox>();
  r.necessity = j.at("necessity").get<bool>();
  r.sufficiency = j.at("sufficiency").get<bool>();
  r.necessity_seed = j.at("necessity_seed").get<std::uint64_t>();
  r.sufficiency_seed = j.at("sufficiency_seed").get<std::uint64_t>();
  if (j.contains("refined_box") && !j.at("refined_box").is_null()) r.refined_box = j.at("refined_box").get<BBox>();
  r.refine_necessity_seed = j.value("refine_necessity_seed", std::uint64_t{0});
  r.refine_sufficiency_seed = j.value("refine_sufficiency_seed", std::uint64_t{0});
  r.trials = j.at("trials").get<std::vector<TrialLog>>();
}

namespace detail {
enum : std::uint64_t { kStreamInitial = 0x1000, kStreamNecessity = 0x2000, kStreamSufficiency = 0x3000,
                       kStreamRefineNec = 0x4000, kStreamRefineSuf = 0x5000 };
}

[[nodiscard]] inline std::uint64_t grounding_seed(const GroundingConfig& cfg, int image_id, int predicate_id, std::uint64_t stream) {
  return derive_seed({cfg.rng_seed, static_cast<std::uint64_t>(image_id), static_cast<std::uint64_t>(predicate_id), stream});
}

/// Both causal checks for one candidate box: masking deactivates and the box
/// alone keeps the predicate active. Necessity is evaluated first.
[[nodiscard]] inline std::string candidate_verdict(const Engine& engine, const Image& img, const BBox& box, const PredicateSpec& p,
                                                   MaskKind kind, Rng& rng) {
  if (!necessity_check(engine, img, box, p, kind, rng)) return "still_active";
  if (!sufficiency_check(engine, img, box, p, rng)) return "crop_inactive";
  return "accepted";
}

/// Replays necessity and sufficiency of a box with logged seeds.
[[nodiscard]] inline std::pair<bool, bool> replay_checks(const Engine& engine, const Image& img, const BBox& box, const PredicateSpec& p,
                                                         MaskKind kind, std::uint64_t nec_seed, std::uint64_t suf_seed) {
  Rng rn(nec_seed), rs(suf_seed);
  const bool nec = necessity_check(engine, img, box, p, kind, rn);
  const bool suf = sufficiency_check(engine, img, box, p, rs);
  return {nec, suf};
}

/// Stochastic shrink search for the smallest box whose removal switches the
/// predicate off while the box alone keeps it on.
[[nodiscard]] inline GroundingResult locate_critical_region(const Engine& engine, const Image& img, const PredicateSpec& p,
                                                            const GroundingConfig& cfg, int image_id) {
  cfg.validate();
  if (!evaluate_predicate_on_image(engine, p, img))
    fail(ErrorKind::PredicateInactive, "predicate " + std::to_string(p.id) + " is inactive on image " + std::to_string(image_id));
  GroundingResult res;
  res.image_id = image_id;
  res.predicate_id = p.id;
  res.strategy = cfg.strategy;
  res.necessity_seed = grounding_seed(cfg, image_id, p.id, detail::kStreamNecessity);
  res.sufficiency_seed = grounding_seed(cfg, image_id, p.id, detail::kStreamSufficiency);

  Rng init_rng(grounding_seed(cfg, image_id, p.id, detail::kStreamInitial));
  BBox start = initial_guess(engine, img, p, cfg);
  res.initial_box = start;
  std::string verdict = candidate_verdict(engine, img, start, p, cfg.strategy, init_rng);
  if (verdict != "accepted") {
    const BBox central = central_box(img.w, img.h, cfg.fallback_central_frac);
    if (!(central == start)) {
      res.used_fallback = true;
      start = central;
      res.initial_box = start;
      verdict = candidate_verdict(engine, img, start, p, cfg.strategy, init_rng);
    }
  }
  if (verdict != "accepted") {
    res.status = verdict == "still_active" ? GroundingStatus::NeverDeactivates : GroundingStatus::InitialInsufficient;
    res.final_box = start;
    const auto [nec, suf] = replay_checks(engine, img, start, p, cfg.strategy, res.necessity_seed, res.sufficiency_seed);
    res.necessity = nec;
    res.sufficiency = suf;
    return res;
  }

  BBox best = start;
  for (int t = 0; t < cfg.trials; ++t) {
    TrialLog log;
    log.trial = t;
    log.seed = grounding_seed(cfg, image_id, p.id, static_cast<std::uint64_t>(t));
    Rng rng(log.seed);
    BBox cur = start;
    log.stop_reason = "no_acceptance";
    for (bool accepted = true; accepted;) {
      accepted = false;
      for (int k = 0; k < cfg.kappa; ++k) {
        BBox cand;
        try {
          cand = propose_shrink(cur, cfg.lambda, rng);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::TooSmall) throw;
          log.stop_reason = "too_small";
          break;
        }
        const auto v = candidate_verdict(engine, img, cand, p, cfg.strategy, rng);
        log.proposals.push_back({cand, v == "accepted", v});
        if (v == "accepted") {
          cur = cand;
          accepted = true;
          break;
        }
      }
      if (log.stop_reason == "too_small") break;
    }
    log.final_box = cur;
    if (cur.area() < best.area()) best = cur;
    res.trials.push_back(std::move(log));
  }
  res.final_box = best;
  const auto [nec, suf] = replay_checks(engine, img, best, p, cfg.strategy, res.necessity_seed, res.sufficiency_seed);
  res.necessity = nec;
  res.sufficiency = suf;
  return res;
}

/// Intersects the mask with the box and keeps the tight box of the overlap
/// if both causal checks still pass on it.
[[nodiscard]] inline std::optional<BBox> segmentation_refine(const Engine& engine, const Image& img, const BBox& box, const Mask& mask,
                                                             const PredicateSpec& p, MaskKind kind, std::uint64_t nec_seed,
                                                             std::uint64_t suf_seed) {
  if (mask.h != img.h || mask.w != img.w) fail(ErrorKind::ShapeMismatch, "segmentation mask size differs from image");
  Mask inter{mask.h, mask.w, std::vector<std::uint8_t>(mask.fg.size(), 0)};
  for (int y = box.y; y < box.y + box.h; ++y)
    for (int x = box.x; x < box.x + box.w; ++x)
      if (mask.at(y, x)) inter.fg[static_cast<std::size_t>(y) * mask.w + x] = 1;
  const auto tb = tight_box(inter);
  if (!tb) return std::nullopt;
  const BBox refined = enforce_floor(*tb, img.w, img.h);
  const auto [nec, suf] = replay_checks(engine, img, refined, p, kind, nec_seed, suf_seed);
  if (!nec || !suf) return std::nullopt;
  return refined;
}

/// Runs segmentation_refine on a result in place, recording the seeds used.
inline void refine_result(const Engine& engine, const Image& img, const Mask& mask, const PredicateSpec& p, const GroundingConfig& cfg,
                          GroundingResult& r) {
  r.refine_necessity_seed = grounding_seed(cfg, r.image_id, p.id, detail::kStreamRefineNec);
  r.refine_sufficiency_seed = grounding_seed(cfg, r.image_id, p.id, detail::kStreamRefineSuf);
  r.refined_box = segmentation_refine(engine, img, r.final_box, mask, p, r.strategy, r.refine_necessity_seed, r.refine_sufficiency_seed);
}

/// Box outline in red, plus a 40% red tint over the refined box if present.
[[nodiscard]] inline Image render_overlay(const Image& img, const GroundingResult& r) {
  Image out = img;
  const float color[3] = {1.0f, 0.0f, 0.0f};
  if (r.refined_box) {
    const BBox& b = *r.refined_box;
    for (int y = std::max(0, b.y); y < std::min(img.h, b.y + b.h); ++y)
      for (int x = std::max(0, b.x); x < std::min(img.w, b.x + b.w); ++x)
        for (int c = 0; c < std::min(3, img.c); ++c)
          out.at(c, y, x) = 0.6f * img.at(c, y, x) + 0.4f * color[c];
  }
  const BBox& b = r.final_box;
  auto paint = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.w || y >= img.h) return;
    for (int c = 0; c < std::min(3, img.c); ++c) out.at(c, y, x) = color[c];
  };
  for (int x = b.x; x < b.x + b.w; ++x) {
    paint(x, b.y);
    paint(x, b.y + b.h - 1);
  }
  for (int y = b.y; y < b.y + b.h; ++y) {
    paint(b.x, y);
    paint(b.x + b.w - 1, y);
  }
  return out;
}

inline void render_overlay(const Image& img, const GroundingResult& r, const std::filesystem::path& out_path) {
  png::write_rgb(out_path, render_overlay(img, r));
}

}  // namespace visionlogic
