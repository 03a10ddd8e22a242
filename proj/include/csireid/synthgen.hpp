#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "csireid/calibration.hpp"
#include "csireid/errors.hpp"
#include "csireid/rng.hpp"
#include "csireid/types.hpp"

namespace csireid {

// Nominal channel bandwidth used to convert path delays (seconds) into
// FFT-bin units: a delay tau contributes phase -2*pi*k_i*(tau*B)/N.
inline constexpr double kSynthBandwidthHz = 20e6;

struct PathComponent {
  double gain = 1.0;          // alpha_p > 0
  double delay_s = 100e-9;    // tau_p
  double gait_amp_s = 5e-9;   // delay excursion of the gait sinusoid
  double gait_freq_hz = 1.0;  // walking cadence, [0.5, 2.5]
  double gait_phase = 0.0;
};

/// Per-identity multipath signature: a small set of gait-modulated
/// specular paths. Identity information lives in the delay/gain pattern.
struct IdentityProfile {
  std::string person_id;
  std::uint64_t seed = 0;
  std::vector<PathComponent> paths;

  void validate() const {
    if (paths.size() < 2) throw ConfigError("identity profile needs at least 2 paths");
    for (std::size_t p = 0; p < paths.size(); ++p) {
      if (paths[p].gain <= 0.0) throw ConfigError("path gain must be positive");
      if (paths[p].delay_s <= 0.0) throw ConfigError("path delay must be positive");
      if (paths[p].gait_freq_hz < 0.5 || paths[p].gait_freq_hz > 2.5)
        throw ConfigError("gait frequency must lie in [0.5, 2.5] Hz");
      for (std::size_t q = p + 1; q < paths.size(); ++q)
        if (paths[p].delay_s == paths[q].delay_s)
          throw ConfigError("path delays must be distinct");
    }
  }
};

struct SynthConfig {
  int num_identities = 8;
  int segments_per_identity = 40;
  int min_frames = 96;
  int max_frames = 192;
  double sample_rate_hz = 100.0;
  int antenna_count = 2;
  SubcarrierLayout layout = SubcarrierLayout::symmetric(16, 64);

  int path_count_min = 3;
  int path_count_max = 5;
  double delay_min_s = 60e-9;
  double delay_max_s = 520e-9;
  double delay_separation_s = 50e-9;
  double gait_amp_min_s = 2e-9;
  double gait_amp_max_s = 4e-9;

  double amplitude_noise_std = 0.02;
  double delta_min = -5.0;
  double delta_max = 5.0;
  double beta_min = -std::numbers::pi;
  double beta_max = std::numbers::pi;
  double phase_noise_sigma = 0.05;

  std::uint64_t master_seed = 1;

  void validate() const {
    if (num_identities < 1 || segments_per_identity < 1)
      throw ConfigError("synth: identity and segment counts must be positive");
    if (min_frames < 1 || max_frames < min_frames)
      throw ConfigError("synth: need 1 <= min_frames <= max_frames");
    if (antenna_count < 1) throw ConfigError("synth: antenna_count must be positive");
    if (path_count_min < 2 || path_count_max < path_count_min)
      throw ConfigError("synth: need 2 <= path_count_min <= path_count_max");
    if (delay_min_s <= 0.0 || delay_max_s <= delay_min_s)
      throw ConfigError("synth: need 0 < delay_min_s < delay_max_s");
    if (amplitude_noise_std < 0.0 || phase_noise_sigma < 0.0)
      throw ConfigError("synth: noise levels must be nonnegative");
    if (delta_max < delta_min || beta_max < beta_min)
      throw ConfigError("synth: corruption ranges must be ordered");
    layout.validate();
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig cfg;
    cfg.num_identities = j.value("num_identities", cfg.num_identities);
    cfg.segments_per_identity = j.value("segments_per_identity", cfg.segments_per_identity);
    cfg.min_frames = j.value("min_frames", cfg.min_frames);
    cfg.max_frames = j.value("max_frames", cfg.max_frames);
    cfg.sample_rate_hz = j.value("sample_rate_hz", cfg.sample_rate_hz);
    cfg.antenna_count = j.value("antenna_count", cfg.antenna_count);
    if (j.contains("subcarrier_count"))
      cfg.layout = SubcarrierLayout::symmetric(j.at("subcarrier_count").get<int>(),
                                               j.value("fft_size", 64));
    else if (j.contains("fft_size"))
      cfg.layout.fft_size = j.at("fft_size").get<int>();
    if (j.contains("subcarrier_indices")) {
      cfg.layout.indices = j.at("subcarrier_indices").get<std::vector<int>>();
    }
    cfg.path_count_min = j.value("path_count_min", cfg.path_count_min);
    cfg.path_count_max = j.value("path_count_max", cfg.path_count_max);
    cfg.delay_min_s = j.value("delay_min_s", cfg.delay_min_s);
    cfg.delay_max_s = j.value("delay_max_s", cfg.delay_max_s);
    cfg.delay_separation_s = j.value("delay_separation_s", cfg.delay_separation_s);
    cfg.gait_amp_min_s = j.value("gait_amp_min_s", cfg.gait_amp_min_s);
    cfg.gait_amp_max_s = j.value("gait_amp_max_s", cfg.gait_amp_max_s);
    cfg.amplitude_noise_std = j.value("amplitude_noise_std", cfg.amplitude_noise_std);
    cfg.delta_min = j.value("delta_min", cfg.delta_min);
    cfg.delta_max = j.value("delta_max", cfg.delta_max);
    cfg.beta_min = j.value("beta_min", cfg.beta_min);
    cfg.beta_max = j.value("beta_max", cfg.beta_max);
    cfg.phase_noise_sigma = j.value("phase_noise_sigma", cfg.phase_noise_sigma);
    cfg.master_seed = j.value("master_seed", cfg.master_seed);
    cfg.validate();
    return cfg;
  }

  nlohmann::json to_json() const {
    return {{"num_identities", num_identities},
            {"segments_per_identity", segments_per_identity},
            {"min_frames", min_frames},
            {"max_frames", max_frames},
            {"sample_rate_hz", sample_rate_hz},
            {"antenna_count", antenna_count},
            {"subcarrier_indices", layout.indices},
            {"fft_size", layout.fft_size},
            {"path_count_min", path_count_min},
            {"path_count_max", path_count_max},
            {"delay_min_s", delay_min_s},
            {"delay_max_s", delay_max_s},
            {"delay_separation_s", delay_separation_s},
            {"gait_amp_min_s", gait_amp_min_s},
            {"gait_amp_max_s", gait_amp_max_s},
            {"amplitude_noise_std", amplitude_noise_std},
            {"delta_min", delta_min},
            {"delta_max", delta_max},
            {"beta_min", beta_min},
            {"beta_max", beta_max},
            {"phase_noise_sigma", phase_noise_sigma},
            {"master_seed", master_seed}};
  }
};

namespace detail {

inline constexpr std::uint64_t kProfileStream = 0x1d;
inline constexpr std::uint64_t kSegmentStream = 0x5e;
inline constexpr std::uint64_t kCorruptStream = 0xc0;

inline std::string person_label(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "P%03d", index);
  return buf;
}

}  // namespace detail

/// Draws the multipath signature of one identity from its seed.
inline IdentityProfile make_identity_profile(const SynthConfig& cfg, int identity_index) {
  IdentityProfile profile;
  profile.person_id = detail::person_label(identity_index);
  profile.seed = derive_seed(cfg.master_seed, detail::kProfileStream,
                             static_cast<std::uint64_t>(identity_index));
  Rng rng(profile.seed);

  const int count = static_cast<int>(rng.uniform_int(cfg.path_count_min, cfg.path_count_max));
  const double base_gait = rng.uniform(0.6, 2.4);

  // Calibration removes the linear-in-k phase, so the absolute dominant
  // delay carries little identity information; the surviving signature is
  // the inter-path spacing (the interference ripple). Stratify that
  // spacing by identity index, with the dominant delay a free draw.
  std::vector<double> delays;
  const double dominant = cfg.delay_min_s + rng.uniform(0.0, 60e-9);
  delays.push_back(dominant);
  const double max_spacing = (cfg.delay_max_s - dominant) / std::max(1, count - 1);
  const double min_spacing = cfg.delay_separation_s;
  double spacing = min_spacing;
  if (max_spacing > min_spacing) {
    const double slot =
        (max_spacing - min_spacing) / std::max(1, cfg.num_identities);
    spacing = min_spacing + slot * (identity_index % std::max(1, cfg.num_identities)) +
              rng.uniform(0.2, 0.8) * slot;
  }
  for (int p = 1; p < count; ++p)
    delays.push_back(dominant + p * spacing * (1.0 + rng.uniform(-0.04, 0.04)));

  for (std::size_t p = 0; p < delays.size(); ++p) {
    PathComponent path;
    path.delay_s = delays[p];
    // Dominant first path; longer secondary paths arrive weaker.
    path.gain = p == 0 ? rng.uniform(1.2, 1.5)
                       : std::exp(-delays[p] / 400e-9) * rng.uniform(0.5, 0.9);
    path.gait_amp_s = rng.uniform(cfg.gait_amp_min_s, cfg.gait_amp_max_s);
    path.gait_freq_hz = std::clamp(base_gait + rng.uniform(-0.1, 0.1), 0.5, 2.5);
    path.gait_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    profile.paths.push_back(path);
  }
  profile.validate();
  return profile;
}

/// Rotates every subcarrier phase by -(2*pi*k_i/N)*delta + beta plus
/// Gaussian noise drawn per frame, antenna, and subcarrier. Magnitudes are
/// preserved.
inline CsiSegment corrupt_phase(const CsiSegment& seg, const PhaseModelParams& params,
                                std::uint64_t seed) {
  seg.validate();
  params.validate();
  Rng rng(derive_seed(seed, detail::kCorruptStream));
  CsiSegment out = seg;
  const int n_sub = seg.layout.count();
  const double n_fft = seg.layout.fft_size;
  for (std::uint32_t t = 0; t < seg.time_frames; ++t) {
    for (int a = 0; a < seg.antenna_count; ++a) {
      for (int s = 0; s < n_sub; ++s) {
        const double k = seg.layout.indices[static_cast<std::size_t>(s)];
        double angle = -(2.0 * std::numbers::pi * k / n_fft) * params.delta + params.beta;
        if (params.noise_sigma > 0.0) angle += rng.normal(0.0, params.noise_sigma);
        const std::size_t d = static_cast<std::size_t>(a) * n_sub + s;
        const std::complex<double> h = out.at(t, d);
        const std::complex<double> rot(std::cos(angle), std::sin(angle));
        const std::complex<double> r = h * rot;
        out.at(t, d) = {static_cast<float>(r.real()), static_cast<float>(r.imag())};
      }
    }
  }
  return out;
}

/// Same corruption with (delta, beta) redrawn independently per frame,
/// mirroring per-packet clock error.
inline CsiSegment corrupt_phase_per_frame(const CsiSegment& seg, double delta_min, double delta_max,
                                          double beta_min, double beta_max, double noise_sigma,
                                          std::uint64_t seed) {
  seg.validate();
  Rng rng(derive_seed(seed, detail::kCorruptStream, 1));
  CsiSegment out = seg;
  const int n_sub = seg.layout.count();
  const double n_fft = seg.layout.fft_size;
  for (std::uint32_t t = 0; t < seg.time_frames; ++t) {
    const double delta = rng.uniform(delta_min, delta_max);
    const double beta = rng.uniform(beta_min, beta_max);
    for (int a = 0; a < seg.antenna_count; ++a) {
      for (int s = 0; s < n_sub; ++s) {
        const double k = seg.layout.indices[static_cast<std::size_t>(s)];
        double angle = -(2.0 * std::numbers::pi * k / n_fft) * delta + beta;
        if (noise_sigma > 0.0) angle += rng.normal(0.0, noise_sigma);
        const std::size_t d = static_cast<std::size_t>(a) * n_sub + s;
        const std::complex<double> h = out.at(t, d);
        const std::complex<double> rot(std::cos(angle), std::sin(angle));
        const std::complex<double> r = h * rot;
        out.at(t, d) = {static_cast<float>(r.real()), static_cast<float>(r.imag())};
      }
    }
  }
  return out;
}

/// Renders one clean (uncorrupted) segment of the given identity.
inline CsiSegment render_segment(const SynthConfig& cfg, const IdentityProfile& profile,
                                 int identity_index, int segment_index) {
  Rng rng(derive_seed(cfg.master_seed, detail::kSegmentStream,
                      static_cast<std::uint64_t>(identity_index) * 100003 +
                          static_cast<std::uint64_t>(segment_index)));

  CsiSegment seg;
  seg.person_id = profile.person_id;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s-S%03d", profile.person_id.c_str(), segment_index);
    seg.segment_id = buf;
  }
  seg.antenna_count = cfg.antenna_count;
  seg.layout = cfg.layout;
  seg.sample_rate_hz = cfg.sample_rate_hz;
  seg.time_frames = static_cast<std::uint32_t>(rng.uniform_int(cfg.min_frames, cfg.max_frames));

  const int n_sub = cfg.layout.count();
  const std::size_t d_total = static_cast<std::size_t>(seg.channels());
  seg.frames.resize(static_cast<std::size_t>(seg.time_frames) * d_total);

  // Small per-antenna perturbations of each path.
  const std::size_t n_paths = profile.paths.size();
  std::vector<double> ant_delay_jitter(static_cast<std::size_t>(cfg.antenna_count) * n_paths);
  std::vector<double> ant_gain_factor(ant_delay_jitter.size());
  for (std::size_t i = 0; i < ant_delay_jitter.size(); ++i) {
    ant_delay_jitter[i] = rng.normal(0.0, 2e-9);
    ant_gain_factor[i] = rng.uniform(0.9, 1.1);
  }
  const double segment_gait_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  const double two_pi = 2.0 * std::numbers::pi;
  for (std::uint32_t t = 0; t < seg.time_frames; ++t) {
    const double time_s = static_cast<double>(t) / cfg.sample_rate_hz;
    for (int a = 0; a < cfg.antenna_count; ++a) {
      for (int s = 0; s < n_sub; ++s) {
        const double k = cfg.layout.indices[static_cast<std::size_t>(s)];
        std::complex<double> h(0.0, 0.0);
        for (std::size_t p = 0; p < n_paths; ++p) {
          const auto& path = profile.paths[p];
          const std::size_t ap = static_cast<std::size_t>(a) * n_paths + p;
          const double delay =
              path.delay_s + ant_delay_jitter[ap] +
              path.gait_amp_s *
                  std::sin(two_pi * path.gait_freq_hz * time_s + path.gait_phase +
                           segment_gait_phase);
          const double gain = path.gain * ant_gain_factor[ap];
          const double angle = -two_pi * k * (delay * kSynthBandwidthHz) / cfg.layout.fft_size;
          h += gain * std::complex<double>(std::cos(angle), std::sin(angle));
        }
        if (cfg.amplitude_noise_std > 0.0) {
          const double scale = cfg.amplitude_noise_std / std::numbers::sqrt2;
          h += std::complex<double>(rng.normal(0.0, scale), rng.normal(0.0, scale));
        }
        seg.at(t, static_cast<std::size_t>(a) * n_sub + s) = {static_cast<float>(h.real()),
                                                              static_cast<float>(h.imag())};
      }
    }
  }
  return seg;
}

/// Full synthetic dataset: per-identity profiles, per-segment rendering,
/// then per-frame phase corruption. Deterministic under master_seed.
inline std::vector<CsiSegment> generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<CsiSegment> segments;
  segments.reserve(static_cast<std::size_t>(cfg.num_identities) * cfg.segments_per_identity);
  for (int i = 0; i < cfg.num_identities; ++i) {
    const IdentityProfile profile = make_identity_profile(cfg, i);
    for (int j = 0; j < cfg.segments_per_identity; ++j) {
      CsiSegment seg = render_segment(cfg, profile, i, j);
      const bool corrupt = cfg.delta_max > cfg.delta_min || cfg.beta_max > cfg.beta_min ||
                           cfg.delta_min != 0.0 || cfg.beta_min != 0.0 ||
                           cfg.phase_noise_sigma > 0.0;
      if (corrupt) {
        seg = corrupt_phase_per_frame(
            seg, cfg.delta_min, cfg.delta_max, cfg.beta_min, cfg.beta_max, cfg.phase_noise_sigma,
            derive_seed(cfg.master_seed, detail::kCorruptStream,
                        static_cast<std::uint64_t>(i) * 100003 + static_cast<std::uint64_t>(j)));
      }
      segments.push_back(std::move(seg));
    }
  }
  return segments;
}

}  // namespace csireid
