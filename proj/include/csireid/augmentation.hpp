#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "csireid/errors.hpp"
#include "csireid/log.hpp"
#include "csireid/rng.hpp"
#include "csireid/types.hpp"

namespace csireid {

struct AugmentConfig {
  int warp_knots = 4;           // control points including both endpoints
  double warp_strength = 0.2;   // fraction of the knot spacing, < 1
  double noise_sigma_rel = 0.05;
  double erase_max_fraction = 0.15;
  int erase_max_spans = 2;
  double prob_warp = 0.5;
  double prob_noise = 0.5;
  double prob_erase = 0.5;

  void validate() const {
    if (warp_knots < 2) throw ConfigError("warp_knots must be >= 2");
    if (warp_strength < 0.0 || warp_strength >= 1.0)
      throw ConfigError("warp_strength must lie in [0, 1)");
    if (noise_sigma_rel < 0.0) throw ConfigError("noise_sigma_rel must be nonnegative");
    if (erase_max_fraction < 0.0 || erase_max_fraction >= 1.0)
      throw ConfigError("erase_max_fraction must lie in [0, 1)");
    if (erase_max_spans < 0) throw ConfigError("erase_max_spans must be nonnegative");
    for (double p : {prob_warp, prob_noise, prob_erase})
      if (p < 0.0 || p > 1.0) throw ConfigError("apply probabilities must lie in [0, 1]");
  }

  static AugmentConfig disabled() {
    AugmentConfig cfg;
    cfg.prob_warp = cfg.prob_noise = cfg.prob_erase = 0.0;
    return cfg;
  }

  static AugmentConfig from_json(const nlohmann::json& j) {
    AugmentConfig cfg;
    cfg.warp_knots = j.value("warp_knots", cfg.warp_knots);
    cfg.warp_strength = j.value("warp_strength", cfg.warp_strength);
    cfg.noise_sigma_rel = j.value("noise_sigma_rel", cfg.noise_sigma_rel);
    cfg.erase_max_fraction = j.value("erase_max_fraction", cfg.erase_max_fraction);
    cfg.erase_max_spans = j.value("erase_max_spans", cfg.erase_max_spans);
    cfg.prob_warp = j.value("prob_warp", cfg.prob_warp);
    cfg.prob_noise = j.value("prob_noise", cfg.prob_noise);
    cfg.prob_erase = j.value("prob_erase", cfg.prob_erase);
    cfg.validate();
    return cfg;
  }

  nlohmann::json to_json() const {
    return {{"warp_knots", warp_knots},
            {"warp_strength", warp_strength},
            {"noise_sigma_rel", noise_sigma_rel},
            {"erase_max_fraction", erase_max_fraction},
            {"erase_max_spans", erase_max_spans},
            {"prob_warp", prob_warp},
            {"prob_noise", prob_noise},
            {"prob_erase", prob_erase}};
  }
};

namespace detail {

/// Strictly increasing piecewise-linear warp of [0, T-1] onto itself with
/// fixed endpoints. Returns the source coordinate sampled by each output
/// frame.
inline std::vector<double> draw_warp_coordinates(std::size_t t_frames, const AugmentConfig& cfg,
                                                 Rng& rng) {
  const double last = static_cast<double>(t_frames - 1);
  const int knots = std::max(2, cfg.warp_knots);
  std::vector<double> src(static_cast<std::size_t>(knots));
  std::vector<double> dst(static_cast<std::size_t>(knots));
  const double spacing = last / static_cast<double>(knots - 1);
  for (int i = 0; i < knots; ++i) {
    src[static_cast<std::size_t>(i)] = spacing * i;
    dst[static_cast<std::size_t>(i)] = spacing * i;
  }
  // Interior knots move by at most strength * spacing / 2 on each side,
  // which keeps the map strictly increasing for strength < 1.
  for (int i = 1; i + 1 < knots; ++i)
    dst[static_cast<std::size_t>(i)] +=
        cfg.warp_strength * (spacing / 2.0) * rng.uniform(-1.0, 1.0);

  std::vector<double> coords(t_frames);
  std::size_t seg = 0;
  for (std::size_t t = 0; t < t_frames; ++t) {
    const double x = static_cast<double>(t);
    while (seg + 2 < static_cast<std::size_t>(knots) && x > dst[seg + 1]) ++seg;
    const double u = (dst[seg + 1] == dst[seg]) ? 0.0 : (x - dst[seg]) / (dst[seg + 1] - dst[seg]);
    double c = std::clamp(src[seg] + u * (src[seg + 1] - src[seg]), 0.0, last);
    // Snap away float dust so an (almost) unwarped frame is copied exactly.
    const double nearest = std::round(c);
    if (std::abs(c - nearest) < 1e-9) c = nearest;
    coords[t] = c;
  }
  return coords;
}

inline void resample_rows(const RowMatrix& in, RowMatrix& out, const std::vector<double>& coords) {
  const std::size_t cols = in.cols;
  for (std::size_t t = 0; t < coords.size(); ++t) {
    const double x = coords[t];
    const std::size_t lo = static_cast<std::size_t>(std::floor(x));
    const std::size_t hi = std::min(lo + 1, in.rows - 1);
    const double w = x - static_cast<double>(lo);
    const double* a = in.row(lo);
    const double* b = in.row(hi);
    double* o = out.row(t);
    for (std::size_t c = 0; c < cols; ++c) o[c] = a[c] + w * (b[c] - a[c]);
  }
}

inline double amplitude_std(const RowMatrix& m) {
  if (m.data.empty()) return 0.0;
  double mean = 0.0;
  for (double v : m.data) mean += v;
  mean /= static_cast<double>(m.data.size());
  double var = 0.0;
  for (double v : m.data) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(m.data.size()));
}

struct EraseSpan {
  std::size_t start = 0;
  std::size_t length = 0;
};

inline std::vector<EraseSpan> draw_erase_spans(std::size_t t_frames, const AugmentConfig& cfg,
                                               Rng& rng) {
  std::vector<EraseSpan> spans;
  const auto budget = static_cast<std::size_t>(cfg.erase_max_fraction * static_cast<double>(t_frames));
  if (cfg.erase_max_spans == 0 || budget == 0) return spans;
  auto count = static_cast<std::size_t>(rng.uniform_int(1, cfg.erase_max_spans));
  count = std::min(count, budget);
  const std::size_t per_span = budget / count;
  for (std::size_t i = 0; i < count; ++i) {
    EraseSpan span;
    span.length = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(per_span)));
    span.start = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(t_frames - span.length)));
    spans.push_back(span);
  }
  return spans;
}

}  // namespace detail

/// Nonlinear time distortion: output frame t takes the linear
/// interpolation of the input at a random, strictly increasing,
/// endpoint-fixed warp of [0, T-1]. Identity at warp_strength 0.
inline CalibratedSegment time_warp(const CalibratedSegment& seg, const AugmentConfig& cfg,
                                   Rng& rng) {
  cfg.validate();
  if (seg.amplitude.rows < 2) {
    warn("time_warp: segment '" + seg.segment_id + "' has fewer than 2 frames; returned unchanged");
    return seg;
  }
  if (cfg.warp_strength == 0.0) return seg;
  const auto coords = detail::draw_warp_coordinates(seg.amplitude.rows, cfg, rng);
  CalibratedSegment out = seg;
  detail::resample_rows(seg.amplitude, out.amplitude, coords);
  detail::resample_rows(seg.phase, out.phase, coords);
  return out;
}

/// Adds Gaussian noise with std = noise_sigma_rel * std(amplitude plane)
/// to the amplitude and phase planes independently.
inline CalibratedSegment inject_noise(const CalibratedSegment& seg, const AugmentConfig& cfg,
                                      Rng& rng) {
  cfg.validate();
  if (cfg.noise_sigma_rel == 0.0) return seg;
  const double sigma = cfg.noise_sigma_rel * detail::amplitude_std(seg.amplitude);
  CalibratedSegment out = seg;
  for (double& v : out.amplitude.data) v += rng.normal(0.0, sigma);
  for (double& v : out.phase.data) v += rng.normal(0.0, sigma);
  return out;
}

/// Zeroes up to erase_max_spans contiguous time spans, total length at
/// most erase_max_fraction * T, in both planes.
inline CalibratedSegment random_erase(const CalibratedSegment& seg, const AugmentConfig& cfg,
                                      Rng& rng) {
  cfg.validate();
  const auto spans = detail::draw_erase_spans(seg.amplitude.rows, cfg, rng);
  CalibratedSegment out = seg;
  for (const auto& span : spans) {
    for (std::size_t t = span.start; t < span.start + span.length; ++t) {
      std::fill_n(out.amplitude.row(t), out.amplitude.cols, 0.0);
      std::fill_n(out.phase.row(t), out.phase.cols, 0.0);
    }
  }
  return out;
}

/// Training pipeline: each transform fires with its configured
/// probability, in the fixed order warp, noise, erase.
inline CalibratedSegment augment_segment(const CalibratedSegment& seg, const AugmentConfig& cfg,
                                         Rng& rng) {
  cfg.validate();
  CalibratedSegment out = seg;
  if (rng.uniform() < cfg.prob_warp) out = time_warp(out, cfg, rng);
  if (rng.uniform() < cfg.prob_noise) out = inject_noise(out, cfg, rng);
  if (rng.uniform() < cfg.prob_erase) out = random_erase(out, cfg, rng);
  return out;
}

}  // namespace csireid
