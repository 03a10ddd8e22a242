#pragma once

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "csireid/errors.hpp"
#include "csireid/log.hpp"
#include "csireid/rng.hpp"
#include "csireid/types.hpp"

namespace csireid {

// Binary dataset container, all integers little-endian:
//   magic "CSI1" | version u16 | antenna_count u16 | subcarrier_count u16 |
//   fft_size u16 | sample_rate f32 | indices i16[count] | segment_count u32 |
//   per segment: id_len u16 + id | person_len u16 + person | T u32 | payload.
// Version 1 payload: f32 (re, im) pairs, row-major (time, channel).
// Version 2 payload: f32 (amplitude, phase) pairs, same ordering.
inline constexpr char kDatasetMagic[4] = {'C', 'S', 'I', '1'};
inline constexpr std::uint16_t kRawDatasetVersion = 1;
inline constexpr std::uint16_t kCalibratedDatasetVersion = 2;

struct Dataset {
  int antenna_count = 0;
  SubcarrierLayout layout;
  double sample_rate_hz = 0.0;
  std::vector<CsiSegment> segments;
  DatasetManifest manifest;
};

struct CalibratedDataset {
  int antenna_count = 0;
  SubcarrierLayout layout;
  double sample_rate_hz = 0.0;
  std::vector<CalibratedSegment> segments;
  DatasetManifest manifest;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i16(std::string& out, std::int16_t v) {
  put_u16(out, static_cast<std::uint16_t>(v));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  Reader(const std::string& buf, std::string path) : buf_(buf), path_(std::move(path)) {}

  std::uint64_t offset() const { return pos_; }

  std::uint16_t u16() {
    need(2, "u16");
    std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(buf_[pos_ + static_cast<std::size_t>(i)]);
    pos_ += 4;
    return v;
  }

  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_f32_block(float* dst, std::size_t count, const char* what) {
    need(count * 4, what);
    std::memcpy(dst, buf_.data() + pos_, count * 4);
    pos_ += count * 4;
  }

  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > buf_.size())
      throw TruncationError("'" + path_ + "': truncated while reading " + std::string(what), pos_);
  }

  const std::string& buf_;
  std::string path_;
  std::uint64_t pos_ = 0;
};

inline std::string manifest_sidecar_path(const std::string& path) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + ".manifest.json";
  return path.substr(0, dot) + ".manifest.json";
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"segment_id", e.segment_id},
                       {"person_id", e.person_id},
                       {"file_offset", e.file_offset},
                       {"time_frames", e.time_frames}});
  }
  return {{"split_tag", to_string(m.split_tag)}, {"entries", entries}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.split_tag = split_tag_from_string(j.at("split_tag").get<std::string>());
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("segment_id").get<std::string>(), e.at("person_id").get<std::string>(),
                         e.at("file_offset").get<std::uint64_t>(),
                         e.at("time_frames").get<std::uint32_t>()});
  }
  return m;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

template <typename Segment>
void check_homogeneous(const std::vector<Segment>& segments) {
  for (std::size_t i = 1; i < segments.size(); ++i) {
    if (segments[i].antenna_count != segments[0].antenna_count ||
        !(segments[i].layout == segments[0].layout))
      throw GeometryError("segments '" + segments[0].segment_id + "' and '" +
                          segments[i].segment_id + "' have different geometry");
    if (segments[i].sample_rate_hz != segments[0].sample_rate_hz)
      throw GeometryError("segments with mixed sample rates cannot share a dataset file");
  }
}

template <typename Segment>
std::string encode_header(const std::vector<Segment>& segments, std::uint16_t version) {
  std::string out(kDatasetMagic, 4);
  put_u16(out, version);
  if (segments.empty()) {
    put_u16(out, 0);  // antenna_count
    put_u16(out, 0);  // subcarrier_count
    put_u16(out, 0);  // fft_size
    put_f32(out, 0.0f);
    put_u32(out, 0);  // segment count
    return out;
  }
  const auto& first = segments.front();
  put_u16(out, static_cast<std::uint16_t>(first.antenna_count));
  put_u16(out, static_cast<std::uint16_t>(first.layout.count()));
  put_u16(out, static_cast<std::uint16_t>(first.layout.fft_size));
  put_f32(out, static_cast<float>(first.sample_rate_hz));
  for (int k : first.layout.indices) {
    if (k < -32768 || k > 32767) throw GeometryError("subcarrier index out of i16 range");
    put_i16(out, static_cast<std::int16_t>(k));
  }
  put_u32(out, static_cast<std::uint32_t>(segments.size()));
  return out;
}

inline void encode_segment_prefix(std::string& out, const std::string& segment_id,
                                  const std::string& person_id, std::uint32_t time_frames) {
  if (segment_id.size() > 0xffff || person_id.size() > 0xffff)
    throw DataError("segment/person id longer than 65535 bytes");
  put_u16(out, static_cast<std::uint16_t>(segment_id.size()));
  out.append(segment_id);
  put_u16(out, static_cast<std::uint16_t>(person_id.size()));
  out.append(person_id);
  put_u32(out, time_frames);
}

}  // namespace detail

/// Writes segments plus a JSON manifest sidecar. All segments must share
/// antenna count, layout, and sample rate.
inline DatasetManifest write_dataset(const std::vector<CsiSegment>& segments,
                                     const std::string& path) {
  detail::check_homogeneous(segments);
  for (const auto& s : segments) s.validate();

  std::string out = detail::encode_header(segments, kRawDatasetVersion);
  DatasetManifest manifest;
  for (const auto& s : segments) {
    manifest.entries.push_back({s.segment_id, s.person_id, out.size(), s.time_frames});
    detail::encode_segment_prefix(out, s.segment_id, s.person_id, s.time_frames);
    const std::size_t payload_bytes = s.frames.size() * 2 * 4;
    const std::size_t base = out.size();
    out.resize(base + payload_bytes);
    std::memcpy(out.data() + base, s.frames.data(), payload_bytes);
  }
  detail::write_file(path, out);
  detail::write_file(detail::manifest_sidecar_path(path),
                     detail::manifest_to_json(manifest).dump(2) + "\n");
  return manifest;
}

inline void check_magic_and_version(detail::Reader& r, const std::string& path,
                                    std::uint16_t expected_version) {
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kDatasetMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a CSI dataset (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != expected_version)
    throw FormatError("'" + path + "': expected format version " +
                      std::to_string(expected_version) + ", found " + std::to_string(version));
}

inline Dataset read_dataset(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::Reader r(buf, path);
  check_magic_and_version(r, path, kRawDatasetVersion);

  Dataset ds;
  ds.antenna_count = r.u16();
  const int sub_count = r.u16();
  ds.layout.fft_size = r.u16();
  ds.sample_rate_hz = r.f32();
  for (int i = 0; i < sub_count; ++i) ds.layout.indices.push_back(r.i16());
  const std::uint32_t seg_count = r.u32();

  for (std::uint32_t i = 0; i < seg_count; ++i) {
    const std::uint64_t offset = r.offset();
    CsiSegment seg;
    seg.antenna_count = ds.antenna_count;
    seg.layout = ds.layout;
    seg.sample_rate_hz = ds.sample_rate_hz;
    const std::uint16_t id_len = r.u16();
    seg.segment_id = r.bytes(id_len, "segment id");
    const std::uint16_t person_len = r.u16();
    seg.person_id = r.bytes(person_len, "person id");
    seg.time_frames = r.u32();
    const std::size_t n = static_cast<std::size_t>(seg.time_frames) * seg.channels();
    seg.frames.resize(n);
    r.read_f32_block(reinterpret_cast<float*>(seg.frames.data()), n * 2, "frame payload");
    seg.validate();
    ds.manifest.entries.push_back({seg.segment_id, seg.person_id, offset, seg.time_frames});
    ds.segments.push_back(std::move(seg));
  }
  if (!r.at_end()) throw FormatError("'" + path + "': trailing bytes after last segment");
  return ds;
}

inline DatasetManifest write_calibrated_dataset(const std::vector<CalibratedSegment>& segments,
                                                const std::string& path) {
  detail::check_homogeneous(segments);
  std::string out = detail::encode_header(segments, kCalibratedDatasetVersion);
  DatasetManifest manifest;
  for (const auto& s : segments) {
    manifest.entries.push_back({s.segment_id, s.person_id, out.size(), s.time_frames()});
    detail::encode_segment_prefix(out, s.segment_id, s.person_id, s.time_frames());
    for (std::size_t i = 0; i < s.amplitude.data.size(); ++i) {
      detail::put_f32(out, static_cast<float>(s.amplitude.data[i]));
      detail::put_f32(out, static_cast<float>(s.phase.data[i]));
    }
  }
  detail::write_file(path, out);
  detail::write_file(detail::manifest_sidecar_path(path),
                     detail::manifest_to_json(manifest).dump(2) + "\n");
  return manifest;
}

inline CalibratedDataset read_calibrated_dataset(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::Reader r(buf, path);
  check_magic_and_version(r, path, kCalibratedDatasetVersion);

  CalibratedDataset ds;
  ds.antenna_count = r.u16();
  const int sub_count = r.u16();
  ds.layout.fft_size = r.u16();
  ds.sample_rate_hz = r.f32();
  for (int i = 0; i < sub_count; ++i) ds.layout.indices.push_back(r.i16());
  const std::uint32_t seg_count = r.u32();

  for (std::uint32_t i = 0; i < seg_count; ++i) {
    const std::uint64_t offset = r.offset();
    CalibratedSegment seg;
    seg.antenna_count = ds.antenna_count;
    seg.layout = ds.layout;
    seg.sample_rate_hz = ds.sample_rate_hz;
    const std::uint16_t id_len = r.u16();
    seg.segment_id = r.bytes(id_len, "segment id");
    const std::uint16_t person_len = r.u16();
    seg.person_id = r.bytes(person_len, "person id");
    const std::uint32_t t = r.u32();
    const std::size_t d = static_cast<std::size_t>(seg.channels());
    seg.amplitude = RowMatrix(t, d);
    seg.phase = RowMatrix(t, d);
    for (std::size_t j = 0; j < static_cast<std::size_t>(t) * d; ++j) {
      seg.amplitude.data[j] = r.f32();
      seg.phase.data[j] = r.f32();
      if (!std::isfinite(seg.amplitude.data[j]) || !std::isfinite(seg.phase.data[j]))
        throw DataError("'" + path + "': non-finite calibrated value in '" + seg.segment_id + "'");
    }
    ds.manifest.entries.push_back({seg.segment_id, seg.person_id, offset, t});
    ds.segments.push_back(std::move(seg));
  }
  if (!r.at_end()) throw FormatError("'" + path + "': trailing bytes after last segment");
  return ds;
}

/// Peeks at the header version; 1 = raw complex, 2 = calibrated.
inline std::uint16_t dataset_file_version(const std::string& path) {
  const std::string buf = detail::read_file(path);
  detail::Reader r(buf, path);
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kDatasetMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a CSI dataset (bad magic)");
  return r.u16();
}

inline void write_manifest_json(const DatasetManifest& m, const std::string& path) {
  detail::write_file(path, detail::manifest_to_json(m).dump(2) + "\n");
}

inline DatasetManifest read_manifest_json(const std::string& path) {
  return detail::manifest_from_json(nlohmann::json::parse(detail::read_file(path)));
}

struct SplitResult {
  DatasetManifest train;
  DatasetManifest query;
  DatasetManifest gallery;
};

/// Partitions person identities between train and test, then assigns one
/// seeded query segment per test identity with the remainder as gallery.
/// Identities with a single segment land in the gallery only.
template <typename Segment>
SplitResult split_identity_disjoint(const std::vector<Segment>& segments, double train_fraction,
                                    std::uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw ConfigError("train_fraction must lie in (0, 1)");

  std::map<std::string, std::vector<std::size_t>> by_person;
  for (std::size_t i = 0; i < segments.size(); ++i)
    by_person[segments[i].person_id].push_back(i);
  if (by_person.size() < 2)
    throw InsufficientDataError("identity-disjoint split needs at least 2 distinct person_ids");

  std::vector<std::string> ids;
  for (const auto& [id, _] : by_person) ids.push_back(id);
  Rng rng(derive_seed(seed, 0x5197));
  rng.shuffle(ids);

  const auto total = static_cast<std::int64_t>(ids.size());
  std::int64_t n_train =
      static_cast<std::int64_t>(std::llround(train_fraction * static_cast<double>(total)));
  n_train = std::clamp<std::int64_t>(n_train, 1, total - 1);

  std::set<std::string> train_ids(ids.begin(), ids.begin() + n_train);

  SplitResult result;
  result.train.split_tag = SplitTag::train;
  result.query.split_tag = SplitTag::test_query;
  result.gallery.split_tag = SplitTag::test_gallery;

  auto entry_for = [&](std::size_t i) {
    std::uint32_t frames;
    if constexpr (requires { segments[i].time_frames(); })
      frames = segments[i].time_frames();
    else
      frames = segments[i].time_frames;
    return ManifestEntry{segments[i].segment_id, segments[i].person_id, 0, frames};
  };

  for (const auto& [person, indices] : by_person) {
    if (train_ids.count(person)) {
      for (auto i : indices) result.train.entries.push_back(entry_for(i));
      continue;
    }
    if (indices.size() == 1) {
      warn("test identity '" + person + "' has a single segment; assigned to gallery only");
      result.gallery.entries.push_back(entry_for(indices[0]));
      continue;
    }
    const auto query_pos = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(indices.size()) - 1));
    for (std::size_t j = 0; j < indices.size(); ++j) {
      if (j == query_pos)
        result.query.entries.push_back(entry_for(indices[j]));
      else
        result.gallery.entries.push_back(entry_for(indices[j]));
    }
  }
  return result;
}

}  // namespace csireid
