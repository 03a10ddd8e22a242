#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "csireid/errors.hpp"

namespace csireid {

/// OFDM subcarrier geometry: signed indices k_i relative to the carrier
/// center and the FFT size N.
struct SubcarrierLayout {
  std::vector<int> indices;
  int fft_size = 64;

  int count() const { return static_cast<int>(indices.size()); }

  int index_sum() const { return std::accumulate(indices.begin(), indices.end(), 0); }

  /// True iff sum of indices is zero, the precondition for offset
  /// cancellation in the linear phase transform.
  bool symmetric_sum() const { return index_sum() == 0; }

  void validate() const {
    if (indices.size() < 2) throw GeometryError("subcarrier layout needs at least 2 indices");
    if (fft_size <= 0) throw GeometryError("fft_size must be positive");
    for (std::size_t i = 1; i < indices.size(); ++i) {
      if (indices[i] <= indices[i - 1])
        throw GeometryError("subcarrier indices must be strictly increasing");
    }
  }

  bool operator==(const SubcarrierLayout&) const = default;

  /// Evenly spread symmetric layout: for even n, +-{1..n/2} scaled to span;
  /// used as the default desk-scale geometry.
  static SubcarrierLayout symmetric(int n, int fft_size_ = 64) {
    SubcarrierLayout layout;
    layout.fft_size = fft_size_;
    const int half = n / 2;
    for (int i = -half; i <= half; ++i) {
      if (i == 0 && n % 2 == 0) continue;
      layout.indices.push_back(i);
    }
    return layout;
  }
};

/// One variable-length CSI recording. The antenna and subcarrier axes are
/// merged into a single channel axis of width D = antenna_count * n_sub,
/// antenna-major: channel(a, s) = a * n_sub + s.
struct CsiSegment {
  std::string segment_id;
  std::string person_id;
  int antenna_count = 1;
  SubcarrierLayout layout;
  double sample_rate_hz = 100.0;
  std::uint32_t time_frames = 0;
  std::vector<std::complex<float>> frames;  // row-major (T, D)

  int channels() const { return antenna_count * layout.count(); }

  std::complex<float>& at(std::size_t t, std::size_t d) { return frames[t * channels() + d]; }
  const std::complex<float>& at(std::size_t t, std::size_t d) const {
    return frames[t * channels() + d];
  }

  void validate() const {
    layout.validate();
    if (antenna_count < 1) throw GeometryError("antenna_count must be positive");
    if (time_frames < 1) throw DataError("segment '" + segment_id + "' has no frames");
    if (sample_rate_hz <= 0.0) throw DataError("sample_rate_hz must be positive");
    if (frames.size() != static_cast<std::size_t>(time_frames) * channels())
      throw GeometryError("segment '" + segment_id + "' frame buffer does not match T x D");
    for (const auto& v : frames) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw DataError("segment '" + segment_id + "' contains a non-finite value");
    }
  }
};

/// Dense row-major matrix of doubles; the workhorse container for
/// calibrated amplitude/phase planes.
struct RowMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RowMatrix() = default;
  RowMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }

  bool operator==(const RowMatrix&) const = default;
};

/// Amplitude and calibrated-phase planes of one segment, both (T, D).
struct CalibratedSegment {
  std::string segment_id;
  std::string person_id;
  int antenna_count = 1;
  SubcarrierLayout layout;
  double sample_rate_hz = 100.0;
  RowMatrix amplitude;
  RowMatrix phase;

  std::uint32_t time_frames() const { return static_cast<std::uint32_t>(amplitude.rows); }
  int channels() const { return antenna_count * layout.count(); }

  bool operator==(const CalibratedSegment&) const = default;
};

enum class SplitTag { unsplit, train, test_query, test_gallery };

inline std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::test_query: return "test-query";
    case SplitTag::test_gallery: return "test-gallery";
    default: return "unsplit";
  }
}

inline SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "test-query") return SplitTag::test_query;
  if (s == "test-gallery") return SplitTag::test_gallery;
  if (s == "unsplit") return SplitTag::unsplit;
  throw FormatError("unknown split tag '" + s + "'");
}

struct ManifestEntry {
  std::string segment_id;
  std::string person_id;
  std::uint64_t file_offset = 0;
  std::uint32_t time_frames = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  SplitTag split_tag = SplitTag::unsplit;

  bool contains_person(const std::string& person_id) const {
    for (const auto& e : entries)
      if (e.person_id == person_id) return true;
    return false;
  }

  bool operator==(const DatasetManifest&) const = default;
};

}  // namespace csireid
