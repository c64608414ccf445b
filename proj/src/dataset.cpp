#include "bts/dataset.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "bts/kvconfig.hpp"

namespace bts::dataset {

namespace {

std::ofstream open_write(const std::string& path, bool binary) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) fail("cannot open '" + path + "' for writing");
  return out;
}

std::ifstream open_read(const std::string& path, bool binary) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) fail("cannot open '" + path + "' for reading");
  return in;
}

void finish(std::ostream& out, const std::string& path) {
  out.flush();
  if (!out) fail("failed writing '" + path + "'");
}

// Row-major float32 payload, explicitly little-endian.
void write_f32_payload(const std::string& path, const Matrix& m) {
  std::ofstream out = open_write(path, true);
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<size_t>(m.rows * m.cols) * 4);
  for (int64_t r = 0; r < m.rows; ++r) {
    for (int64_t c = 0; c < m.cols; ++c) {
      const uint32_t u = std::bit_cast<uint32_t>(static_cast<float>(m.at(r, c)));
      buf.push_back(static_cast<unsigned char>(u & 0xff));
      buf.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
      buf.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
      buf.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
    }
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  finish(out, path);
}

Matrix read_f32_payload(const std::string& path, int64_t cols) {
  std::ifstream in = open_read(path, true);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (in.bad()) fail("failed reading '" + path + "'");
  const int64_t bytes = static_cast<int64_t>(buf.size());
  if (cols <= 0 || bytes % (4 * cols) != 0)
    fail("'" + path + "' holds " + std::to_string(bytes) +
         " bytes, not a whole number of " + std::to_string(cols) + "-channel float32 rows");
  const int64_t rows = bytes / (4 * cols);
  Matrix m(rows, cols);
  const unsigned char* p = buf.data();
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      const uint32_t u = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
      m.at(r, c) = static_cast<double>(std::bit_cast<float>(u));
      p += 4;
    }
  }
  return m;
}

std::vector<std::string> read_nonempty_lines(const std::string& path) {
  std::ifstream in = open_read(path, false);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::string header_value(const std::string& line, const std::string& key, const std::string& path) {
  const std::string prefix = key + "=";
  if (line.rfind(prefix, 0) != 0)
    fail("'" + path + "': expected '" + key + "=...', got '" + line + "'");
  return line.substr(prefix.size());
}

}  // namespace

// ---------------- recording ----------------

void write_recording(const std::string& path, const signal::RawRecording& rec) {
  rec.validate();
  write_f32_payload(path, rec.samples);
  const std::string hdr_path = path + ".hdr";
  std::ofstream hdr = open_write(hdr_path, false);
  hdr << "sample_rate_hz=" << rec.sample_rate_hz << '\n';
  hdr << "channels=" << rec.samples.cols << '\n';
  hdr << "roles=";
  for (size_t c = 0; c < rec.channel_roles.size(); ++c) {
    if (c > 0) hdr << ',';
    hdr << signal::role_name(rec.channel_roles[c]);
  }
  hdr << '\n';
  for (const signal::TrialMarker& m : rec.trial_markers)
    hdr << m.onset_sample << ' ' << m.offset_sample << ' ' << m.sentence_id << '\n';
  finish(hdr, hdr_path);
}

signal::RawRecording read_recording(const std::string& path) {
  const std::string hdr_path = path + ".hdr";
  const std::vector<std::string> lines = read_nonempty_lines(hdr_path);
  if (lines.size() < 3) fail("'" + hdr_path + "': header needs rate, channels, and roles lines");

  signal::RawRecording rec;
  rec.sample_rate_hz =
      static_cast<int>(kvcfg::parse_int("sample_rate_hz",
                                        header_value(lines[0], "sample_rate_hz", hdr_path)));
  const int64_t channels = kvcfg::parse_int("channels", header_value(lines[1], "channels", hdr_path));
  if (channels <= 0) fail("'" + hdr_path + "': channel count must be positive");

  std::stringstream roles(header_value(lines[2], "roles", hdr_path));
  std::string tag;
  while (std::getline(roles, tag, ',')) rec.channel_roles.push_back(signal::parse_role(tag));
  if (static_cast<int64_t>(rec.channel_roles.size()) != channels)
    fail("'" + hdr_path + "': " + std::to_string(rec.channel_roles.size()) + " role tags for " +
         std::to_string(channels) + " channels");

  for (size_t i = 3; i < lines.size(); ++i) {
    std::stringstream ss(lines[i]);
    signal::TrialMarker m;
    if (!(ss >> m.onset_sample >> m.offset_sample >> m.sentence_id))
      fail("'" + hdr_path + "': malformed trial marker '" + lines[i] + "'");
    std::string extra;
    if (ss >> extra) fail("'" + hdr_path + "': malformed trial marker '" + lines[i] + "'");
    rec.trial_markers.push_back(std::move(m));
  }

  rec.samples = read_f32_payload(path, channels);
  rec.validate();
  return rec;
}

// ---------------- alignment ----------------

void write_alignment(const std::string& path, const std::vector<phoneme::Segment>& segments) {
  std::ofstream out = open_write(path, false);
  for (const phoneme::Segment& seg : segments)
    out << seg.phoneme << ' ' << kvcfg::fmt_double(seg.start_ms) << ' '
        << kvcfg::fmt_double(seg.end_ms) << '\n';
  finish(out, path);
}

std::vector<phoneme::Segment> read_alignment(const std::string& path) {
  std::vector<phoneme::Segment> segments;
  for (const std::string& line : read_nonempty_lines(path)) {
    std::stringstream ss(line);
    phoneme::Segment seg;
    if (!(ss >> seg.phoneme >> seg.start_ms >> seg.end_ms))
      fail("'" + path + "': malformed alignment line '" + line + "'");
    std::string extra;
    if (ss >> extra) fail("'" + path + "': malformed alignment line '" + line + "'");
    if (!segments.empty() && seg.start_ms < segments.back().start_ms)
      fail("'" + path + "': alignment lines are not sorted by start time");
    segments.push_back(std::move(seg));
  }
  return segments;
}

// ---------------- feature cache ----------------

void write_mfcc(const std::string& path, const Matrix& frames, double period_ms) {
  require(frames.cols > 0, "feature cache needs at least one coefficient column");
  require(period_ms > 0.0, "feature frame period must be positive");
  write_f32_payload(path, frames);
  const std::string hdr_path = path + ".hdr";
  std::ofstream hdr = open_write(hdr_path, false);
  hdr << "frames=" << frames.rows << " dim=" << frames.cols
      << " period_ms=" << kvcfg::fmt_double(period_ms) << '\n';
  finish(hdr, hdr_path);
}

MfccCache read_mfcc(const std::string& path) {
  const std::string hdr_path = path + ".hdr";
  const std::vector<std::string> lines = read_nonempty_lines(hdr_path);
  if (lines.size() != 1) fail("'" + hdr_path + "': expected a single header line");
  int64_t frames = -1, dim = -1;
  double period_ms = 0.0;
  bool saw_frames = false, saw_dim = false, saw_period = false;
  kvcfg::for_each_entry(lines[0], [&](const std::string& key, const std::string& val) {
    if (key == "frames") {
      frames = kvcfg::parse_int(key, val);
      saw_frames = true;
    } else if (key == "dim") {
      dim = kvcfg::parse_int(key, val);
      saw_dim = true;
    } else if (key == "period_ms") {
      period_ms = kvcfg::parse_double(key, val);
      saw_period = true;
    } else {
      throw std::invalid_argument("unknown feature header key '" + key + "'");
    }
  });
  if (!saw_frames || !saw_dim || !saw_period)
    fail("'" + hdr_path + "': header must carry frames, dim, and period_ms");
  if (dim <= 0 || frames < 0 || period_ms <= 0.0)
    fail("'" + hdr_path + "': invalid feature header values");

  MfccCache cache;
  cache.period_ms = period_ms;
  cache.frames = read_f32_payload(path, dim);
  if (cache.frames.rows != frames)
    fail("'" + path + "' holds " + std::to_string(cache.frames.rows) +
         " frames but the header declares " + std::to_string(frames));
  return cache;
}

// ---------------- manifest ----------------

namespace {
constexpr const char* kManifestHeader = "sentence_id\ttext\talignment\tmfcc\trecording";
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out = open_write(path, false);
  out << kManifestHeader << '\n';
  for (const ManifestEntry& e : entries) {
    for (const std::string* field :
         {&e.sentence_id, &e.text, &e.alignment_path, &e.mfcc_path, &e.recording_path})
      require(field->find('\t') == std::string::npos && field->find('\n') == std::string::npos,
              "manifest fields must not contain tabs or newlines");
    require(!e.sentence_id.empty(), "manifest entries need a sentence id");
    out << e.sentence_id << '\t' << e.text << '\t' << e.alignment_path << '\t' << e.mfcc_path
        << '\t' << e.recording_path << '\n';
  }
  finish(out, path);
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  const std::vector<std::string> lines = read_nonempty_lines(path);
  if (lines.empty() || lines[0] != kManifestHeader)
    fail("'" + path + "': missing manifest header line");
  std::vector<ManifestEntry> entries;
  for (size_t i = 1; i < lines.size(); ++i) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream ss(lines[i]);
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5)
      fail("'" + path + "': manifest line " + std::to_string(i + 1) + " has " +
           std::to_string(fields.size()) + " fields, expected 5");
    entries.push_back({fields[0], fields[1], fields[2], fields[3], fields[4]});
  }
  return entries;
}

}  // namespace bts::dataset
