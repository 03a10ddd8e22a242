#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "csireid/errors.hpp"
#include "csireid/types.hpp"

namespace csireid {

/// Fixed-shape two-stream batch. The amplitude stream is laid out as time
/// tokens (B, max_time, D) with a validity mask; the phase stream is laid
/// out transposed as channel tokens (B, S = D, max_time), zero-padded in
/// the token (time) dimension with no mask.
struct PaddedBatch {
  std::int64_t batch = 0;
  std::int64_t max_time = 0;
  std::int64_t channels = 0;  // D, also the phase sequence length S

  std::vector<double> amp;    // (B, max_time, D)
  std::vector<double> phase;  // (B, D, max_time)
  std::vector<double> mask;   // (B, max_time), 1 = valid
  std::vector<std::int64_t> lengths;
  std::vector<int> labels;
  std::vector<std::string> segment_ids;

  double amp_at(std::int64_t b, std::int64_t t, std::int64_t d) const {
    return amp[(b * max_time + t) * channels + d];
  }
  double phase_at(std::int64_t b, std::int64_t s, std::int64_t t) const {
    return phase[(b * channels + s) * max_time + t];
  }
  double mask_at(std::int64_t b, std::int64_t t) const { return mask[b * max_time + t]; }
};

using LabelMap = std::unordered_map<std::string, int>;

inline LabelMap build_label_map(const std::vector<std::string>& person_ids) {
  std::vector<std::string> sorted = person_ids;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  LabelMap map;
  for (std::size_t i = 0; i < sorted.size(); ++i) map[sorted[i]] = static_cast<int>(i);
  return map;
}

/// Assembles a uniform-length batch. Segments longer than max_time keep
/// their first max_time frames. Unknown persons get label -1.
inline PaddedBatch make_batch(const std::vector<const CalibratedSegment*>& segments,
                              std::int64_t max_time, const LabelMap& label_map) {
  if (segments.empty()) throw EmptyBatchError("make_batch: empty segment list");
  if (max_time < 1) throw ConfigError("make_batch: max_time must be >= 1");
  const auto d = static_cast<std::int64_t>(segments.front()->channels());
  for (const auto* seg : segments)
    if (seg->channels() != d)
      throw GeometryError("make_batch: segment '" + seg->segment_id +
                          "' has mismatched channel count");

  PaddedBatch out;
  out.batch = static_cast<std::int64_t>(segments.size());
  out.max_time = max_time;
  out.channels = d;
  out.amp.assign(static_cast<std::size_t>(out.batch * max_time * d), 0.0);
  out.phase.assign(static_cast<std::size_t>(out.batch * d * max_time), 0.0);
  out.mask.assign(static_cast<std::size_t>(out.batch * max_time), 0.0);

  for (std::int64_t b = 0; b < out.batch; ++b) {
    const auto& seg = *segments[static_cast<std::size_t>(b)];
    const auto t_full = static_cast<std::int64_t>(seg.amplitude.rows);
    const std::int64_t t_kept = std::min(t_full, max_time);
    out.lengths.push_back(t_kept);
    out.segment_ids.push_back(seg.segment_id);
    const auto it = label_map.find(seg.person_id);
    out.labels.push_back(it == label_map.end() ? -1 : it->second);

    for (std::int64_t t = 0; t < t_kept; ++t) {
      out.mask[static_cast<std::size_t>(b * max_time + t)] = 1.0;
      const double* amp_row = seg.amplitude.row(static_cast<std::size_t>(t));
      const double* phase_row = seg.phase.row(static_cast<std::size_t>(t));
      for (std::int64_t c = 0; c < d; ++c) {
        out.amp[static_cast<std::size_t>((b * max_time + t) * d + c)] = amp_row[c];
        out.phase[static_cast<std::size_t>((b * d + c) * max_time + t)] = phase_row[c];
      }
    }
  }
  return out;
}

inline PaddedBatch make_batch(const std::vector<CalibratedSegment>& segments,
                              std::int64_t max_time, const LabelMap& label_map) {
  std::vector<const CalibratedSegment*> ptrs;
  ptrs.reserve(segments.size());
  for (const auto& s : segments) ptrs.push_back(&s);
  return make_batch(ptrs, max_time, label_map);
}

}  // namespace csireid
