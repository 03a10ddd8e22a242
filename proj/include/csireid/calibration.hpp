#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "csireid/errors.hpp"
#include "csireid/types.hpp"

namespace csireid {

/// Parameters of the per-frame phase corruption model: a timing offset
/// delta adding a slope linear in the subcarrier index, a constant offset
/// beta, and Gaussian phase noise with standard deviation noise_sigma.
struct PhaseModelParams {
  double delta = 0.0;
  double beta = 0.0;
  double noise_sigma = 0.0;

  void validate() const {
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be nonnegative");
  }
};

/// Removes artificial 2*pi jumps along the subcarrier axis. The first
/// element is kept; every consecutive difference of the result lies in
/// (-pi, pi] and the result is congruent to the input mod 2*pi.
inline std::vector<double> unwrap_phase(std::span<const double> raw) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> out;
  out.reserve(raw.size());
  for (double v : raw) {
    if (!std::isfinite(v)) throw DataError("unwrap_phase: non-finite input phase");
    if (out.empty()) {
      out.push_back(v);
      continue;
    }
    const double prev_in = raw[out.size() - 1];
    const double delta = v - prev_in;
    // Map the consecutive difference into (-pi, pi].
    const double wrapped = delta + two_pi * std::floor((std::numbers::pi - delta) / two_pi);
    out.push_back(out.back() + wrapped);
  }
  return out;
}

struct LinearFit {
  double slope = 0.0;      // a
  double intercept = 0.0;  // b
};

/// Endpoint slope a = (phi_n - phi_1) / (k_n - k_1) and mean intercept
/// b = mean(phi) over the unwrapped band.
inline LinearFit linear_fit(std::span<const double> unwrapped, const SubcarrierLayout& layout) {
  layout.validate();
  if (static_cast<int>(unwrapped.size()) != layout.count())
    throw GeometryError("linear_fit: vector length does not match layout count");
  const double k_first = layout.indices.front();
  const double k_last = layout.indices.back();
  if (k_last == k_first) throw GeometryError("linear_fit: degenerate index span");
  LinearFit fit;
  fit.slope = (unwrapped.back() - unwrapped.front()) / (k_last - k_first);
  double sum = 0.0;
  for (double v : unwrapped) sum += v;
  fit.intercept = sum / static_cast<double>(unwrapped.size());
  return fit;
}

/// Residual phi_i - a*k_i - b. Requires a symmetric layout (sum k = 0) so
/// that the offsets cancel; center_indices opts in to subtracting the
/// index mean first for non-symmetric layouts.
inline std::vector<double> calibrate_phase(std::span<const double> unwrapped,
                                           const SubcarrierLayout& layout,
                                           bool center_indices = false) {
  layout.validate();
  if (static_cast<int>(unwrapped.size()) != layout.count())
    throw GeometryError("calibrate_phase: vector length does not match layout count");

  std::vector<double> k(layout.indices.begin(), layout.indices.end());
  if (!layout.symmetric_sum()) {
    if (!center_indices)
      throw SymmetryError("calibrate_phase: subcarrier indices do not sum to zero (pass "
                          "center_indices to subtract the index mean)");
    double mean_k = 0.0;
    for (double v : k) mean_k += v;
    mean_k /= static_cast<double>(k.size());
    for (double& v : k) v -= mean_k;
  }

  const LinearFit fit = linear_fit(unwrapped, layout);
  std::vector<double> out(unwrapped.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = unwrapped[i] - fit.slope * k[i] - fit.intercept;
  return out;
}

/// Variance inflation factor c_i = 1 + 2*k_i^2/(k_n - k_1)^2 + 1/n of the
/// calibrated phase at subcarrier position i. Diagnostic only.
inline double variance_factor(const SubcarrierLayout& layout, int position) {
  layout.validate();
  if (position < 0 || position >= layout.count())
    throw GeometryError("variance_factor: position out of range");
  const double k_i = layout.indices[static_cast<std::size_t>(position)];
  const double span = static_cast<double>(layout.indices.back() - layout.indices.front());
  const double n = layout.count();
  return 1.0 + 2.0 * (k_i * k_i) / (span * span) + 1.0 / n;
}

/// Splits raw CSI into an amplitude plane |H| and a calibrated phase
/// plane. Unwrapping and the linear transform run independently per frame
/// and per antenna across that antenna's subcarriers.
inline CalibratedSegment calibrate_segment(const CsiSegment& seg, bool center_indices = false) {
  seg.validate();
  const int n_sub = seg.layout.count();
  const int n_ant = seg.antenna_count;
  const std::size_t d = static_cast<std::size_t>(seg.channels());

  CalibratedSegment out;
  out.segment_id = seg.segment_id;
  out.person_id = seg.person_id;
  out.antenna_count = seg.antenna_count;
  out.layout = seg.layout;
  out.sample_rate_hz = seg.sample_rate_hz;
  out.amplitude = RowMatrix(seg.time_frames, d);
  out.phase = RowMatrix(seg.time_frames, d);

  std::vector<double> raw(static_cast<std::size_t>(n_sub));
  for (std::uint32_t t = 0; t < seg.time_frames; ++t) {
    for (int a = 0; a < n_ant; ++a) {
      const std::size_t base = static_cast<std::size_t>(a) * n_sub;
      for (int s = 0; s < n_sub; ++s) {
        const auto h = seg.at(t, base + s);
        out.amplitude.at(t, base + s) = std::hypot(h.real(), h.imag());
        raw[static_cast<std::size_t>(s)] = std::atan2(h.imag(), h.real());
      }
      const auto unwrapped = unwrap_phase(raw);
      const auto calibrated = calibrate_phase(unwrapped, seg.layout, center_indices);
      for (int s = 0; s < n_sub; ++s)
        out.phase.at(t, base + s) = calibrated[static_cast<std::size_t>(s)];
    }
  }
  return out;
}

}  // namespace csireid
