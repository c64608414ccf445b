// On-disk formats: float32 payloads with text headers, alignment files,
// feature caches, and the sentence manifest. Round trips are checked for
// exact equality (doubles are pre-quantized to the float grid where the
// payload is float32), and every parser rejection path is exercised.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bts/dataset.hpp"
#include "bts/phoneme.hpp"
#include "bts/rng.hpp"
#include "bts/signal.hpp"

using namespace bts;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void overwrite(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
}

signal::RawRecording small_recording() {
  signal::RawRecording rec;
  rec.sample_rate_hz = 500;
  rec.channel_roles = {signal::Role::EEG, signal::Role::EMG, signal::Role::EEG};
  rec.samples = Matrix(7, 3);
  Rng rng(42);
  for (double& v : rec.samples.data) v = f32(rng.gaussian());
  rec.trial_markers = {{0, 3, "s01"}, {3, 7, "s02"}};
  return rec;
}

}  // namespace

TEST_CASE("recording round trip preserves samples, roles, rate, and markers") {
  TempDir dir("bts_ds_rec");
  const signal::RawRecording rec = small_recording();
  dataset::write_recording(dir.file("rec.f32"), rec);
  const signal::RawRecording back = dataset::read_recording(dir.file("rec.f32"));

  CHECK(back.sample_rate_hz == 500);
  REQUIRE(back.samples.rows == 7);
  REQUIRE(back.samples.cols == 3);
  for (size_t i = 0; i < rec.samples.data.size(); ++i) CHECK(back.samples.data[i] == rec.samples.data[i]);
  REQUIRE(back.channel_roles.size() == 3);
  CHECK(back.channel_roles[0] == signal::Role::EEG);
  CHECK(back.channel_roles[1] == signal::Role::EMG);
  CHECK(back.channel_roles[2] == signal::Role::EEG);
  REQUIRE(back.trial_markers.size() == 2);
  CHECK(back.trial_markers[0].onset_sample == 0);
  CHECK(back.trial_markers[0].offset_sample == 3);
  CHECK(back.trial_markers[0].sentence_id == "s01");
  CHECK(back.trial_markers[1].onset_sample == 3);
  CHECK(back.trial_markers[1].offset_sample == 7);
  CHECK(back.trial_markers[1].sentence_id == "s02");
}

TEST_CASE("recording payload is little-endian float32") {
  TempDir dir("bts_ds_le");
  signal::RawRecording rec;
  rec.sample_rate_hz = 100;
  rec.channel_roles = {signal::Role::EEG};
  rec.samples = Matrix(1, 1, 1.0);
  dataset::write_recording(dir.file("one.f32"), rec);
  const std::string bytes = read_bytes(dir.file("one.f32"));
  REQUIRE(bytes.size() == 4);
  // 1.0f = 0x3f800000, stored least-significant byte first.
  CHECK(static_cast<unsigned char>(bytes[0]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[1]) == 0x00);
  CHECK(static_cast<unsigned char>(bytes[2]) == 0x80);
  CHECK(static_cast<unsigned char>(bytes[3]) == 0x3f);
}

TEST_CASE("recording write rejects inconsistent metadata") {
  TempDir dir("bts_ds_badrec");
  signal::RawRecording rec = small_recording();
  rec.channel_roles.pop_back();
  CHECK_THROWS_WITH_AS(dataset::write_recording(dir.file("r.f32"), rec),
                       doctest::Contains("3 channels but 2 role tags"), std::invalid_argument);
  rec = small_recording();
  rec.trial_markers.push_back({5, 9, "s03"});
  CHECK_THROWS_WITH_AS(dataset::write_recording(dir.file("r.f32"), rec),
                       doctest::Contains("exceeds the recording length"), std::invalid_argument);
}

TEST_CASE("recording read rejects truncated payloads and malformed headers") {
  TempDir dir("bts_ds_corrupt");
  const std::string path = dir.file("rec.f32");
  dataset::write_recording(path, small_recording());

  SUBCASE("payload not a whole number of rows") {
    std::ofstream app(path, std::ios::binary | std::ios::app);
    app << "xy";
    app.close();
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("not a whole number of 3-channel float32 rows"),
                         std::runtime_error);
  }
  SUBCASE("header too short") {
    overwrite(path + ".hdr", "sample_rate_hz=500\nchannels=3\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("header needs rate, channels, and roles lines"),
                         std::runtime_error);
  }
  SUBCASE("wrong key order") {
    overwrite(path + ".hdr", "channels=3\nsample_rate_hz=500\nroles=EEG,EMG,EEG\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("expected 'sample_rate_hz=...'"), std::runtime_error);
  }
  SUBCASE("role count mismatch") {
    overwrite(path + ".hdr", "sample_rate_hz=500\nchannels=3\nroles=EEG,EMG\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("2 role tags for 3 channels"), std::runtime_error);
  }
  SUBCASE("marker with missing fields") {
    overwrite(path + ".hdr", "sample_rate_hz=500\nchannels=3\nroles=EEG,EMG,EEG\n0 3\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("malformed trial marker '0 3'"), std::runtime_error);
  }
  SUBCASE("marker with extra fields") {
    overwrite(path + ".hdr", "sample_rate_hz=500\nchannels=3\nroles=EEG,EMG,EEG\n0 3 s01 junk\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("malformed trial marker"), std::runtime_error);
  }
  SUBCASE("marker beyond the payload") {
    overwrite(path + ".hdr", "sample_rate_hz=500\nchannels=3\nroles=EEG,EMG,EEG\n0 99 s01\n");
    CHECK_THROWS_WITH_AS(dataset::read_recording(path),
                         doctest::Contains("exceeds the recording length"), std::invalid_argument);
  }
}

TEST_CASE("alignment files round trip doubles exactly") {
  TempDir dir("bts_ds_align");
  // Awkward fractions: the shortest-round-trip float formatting must bring
  // every value back bit-identical.
  const std::vector<phoneme::Segment> segments = {
      {"sil", 0.0, 86.4000000000000057}, {"aa", 86.4000000000000057, 131.0 / 3.0 + 100.0},
      {"sil", 131.0 / 3.0 + 100.0, 250.125}};
  dataset::write_alignment(dir.file("a.txt"), segments);
  const std::vector<phoneme::Segment> back = dataset::read_alignment(dir.file("a.txt"));
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].phoneme == segments[i].phoneme);
    CHECK(back[i].start_ms == segments[i].start_ms);
    CHECK(back[i].end_ms == segments[i].end_ms);
  }
}

TEST_CASE("alignment reader rejects malformed and unsorted lines") {
  TempDir dir("bts_ds_badalign");
  const std::string path = dir.file("a.txt");
  SUBCASE("missing field") {
    overwrite(path, "sil 0 50\naa 50\n");
    CHECK_THROWS_WITH_AS(dataset::read_alignment(path),
                         doctest::Contains("malformed alignment line 'aa 50'"), std::runtime_error);
  }
  SUBCASE("extra field") {
    overwrite(path, "sil 0 50 junk\n");
    CHECK_THROWS_WITH_AS(dataset::read_alignment(path),
                         doctest::Contains("malformed alignment line"), std::runtime_error);
  }
  SUBCASE("unsorted starts") {
    overwrite(path, "aa 50 90\nsil 0 50\n");
    CHECK_THROWS_WITH_AS(dataset::read_alignment(path),
                         doctest::Contains("not sorted by start time"), std::runtime_error);
  }
}

TEST_CASE("feature cache round trips frames and period") {
  TempDir dir("bts_ds_mfcc");
  Matrix frames(5, 4);
  Rng rng(7);
  for (double& v : frames.data) v = f32(rng.uniform(-3.0, 3.0));
  dataset::write_mfcc(dir.file("m.f32"), frames, 8.0);
  const dataset::MfccCache back = dataset::read_mfcc(dir.file("m.f32"));
  CHECK(back.period_ms == 8.0);
  REQUIRE(back.frames.rows == 5);
  REQUIRE(back.frames.cols == 4);
  for (size_t i = 0; i < frames.data.size(); ++i) CHECK(back.frames.data[i] == frames.data[i]);

  // Zero frames is a legal (empty) cache.
  dataset::write_mfcc(dir.file("e.f32"), Matrix(0, 4), 8.0);
  CHECK(dataset::read_mfcc(dir.file("e.f32")).frames.rows == 0);
}

TEST_CASE("feature cache validates its header and payload agreement") {
  TempDir dir("bts_ds_badmfcc");
  const std::string path = dir.file("m.f32");
  dataset::write_mfcc(path, Matrix(5, 4, 1.0), 8.0);

  SUBCASE("frame count disagreement") {
    overwrite(path + ".hdr", "frames=6 dim=4 period_ms=8\n");
    CHECK_THROWS_WITH_AS(dataset::read_mfcc(path),
                         doctest::Contains("holds 5 frames but the header declares 6"),
                         std::runtime_error);
  }
  SUBCASE("unknown key") {
    overwrite(path + ".hdr", "frames=5 dim=4 period_ms=8 extra=1\n");
    CHECK_THROWS_WITH_AS(dataset::read_mfcc(path),
                         doctest::Contains("unknown feature header key 'extra'"),
                         std::invalid_argument);
  }
  SUBCASE("missing key") {
    overwrite(path + ".hdr", "frames=5 dim=4\n");
    CHECK_THROWS_WITH_AS(dataset::read_mfcc(path),
                         doctest::Contains("header must carry frames, dim, and period_ms"),
                         std::runtime_error);
  }
  SUBCASE("unusable values") {
    overwrite(path + ".hdr", "frames=5 dim=4 period_ms=0\n");
    CHECK_THROWS_WITH_AS(dataset::read_mfcc(path),
                         doctest::Contains("invalid feature header values"), std::runtime_error);
  }
  SUBCASE("write-side validation") {
    CHECK_THROWS_WITH_AS(dataset::write_mfcc(dir.file("x.f32"), Matrix(3, 0), 8.0),
                         doctest::Contains("at least one coefficient column"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(dataset::write_mfcc(dir.file("x.f32"), Matrix(3, 2), 0.0),
                         doctest::Contains("frame period must be positive"), std::invalid_argument);
  }
}

TEST_CASE("manifest round trips entries including empty optional fields") {
  TempDir dir("bts_ds_manifest");
  const std::vector<dataset::ManifestEntry> entries = {
      {"s0001", "aa b k", "align/s0001.txt", "mfcc/s0001.f32", "recording.f32"},
      {"s0002", "", "align/s0002.txt", "mfcc/s0002.f32", "recording.f32"}};
  dataset::write_manifest(dir.file("manifest.tsv"), entries);
  const std::vector<dataset::ManifestEntry> back = dataset::read_manifest(dir.file("manifest.tsv"));
  REQUIRE(back.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    CHECK(back[i].sentence_id == entries[i].sentence_id);
    CHECK(back[i].text == entries[i].text);
    CHECK(back[i].alignment_path == entries[i].alignment_path);
    CHECK(back[i].mfcc_path == entries[i].mfcc_path);
    CHECK(back[i].recording_path == entries[i].recording_path);
  }

  // Header-only manifest (zero trials) is legal.
  dataset::write_manifest(dir.file("empty.tsv"), {});
  CHECK(dataset::read_manifest(dir.file("empty.tsv")).empty());
}

TEST_CASE("manifest rejects tabs, missing ids, bad headers, and short lines") {
  TempDir dir("bts_ds_badman");
  const std::string path = dir.file("manifest.tsv");
  CHECK_THROWS_WITH_AS(
      dataset::write_manifest(path, {{"s1", "tab\there", "a", "m", "r"}}),
      doctest::Contains("manifest fields must not contain tabs or newlines"),
      std::invalid_argument);
  CHECK_THROWS_WITH_AS(dataset::write_manifest(path, {{"", "text", "a", "m", "r"}}),
                       doctest::Contains("manifest entries need a sentence id"),
                       std::invalid_argument);

  overwrite(path, "wrong header\ns1\tt\ta\tm\tr\n");
  CHECK_THROWS_WITH_AS(dataset::read_manifest(path),
                       doctest::Contains("missing manifest header line"), std::runtime_error);

  overwrite(path, "sentence_id\ttext\talignment\tmfcc\trecording\ns1\tt\ta\n");
  CHECK_THROWS_WITH_AS(dataset::read_manifest(path),
                       doctest::Contains("manifest line 2 has 3 fields, expected 5"),
                       std::runtime_error);
}

TEST_CASE("readers report missing files by path") {
  CHECK_THROWS_WITH_AS(dataset::read_recording("/nonexistent/nope.f32"),
                       doctest::Contains("cannot open"), std::runtime_error);
  CHECK_THROWS_WITH_AS(dataset::read_alignment("/nonexistent/nope.txt"),
                       doctest::Contains("cannot open"), std::runtime_error);
  CHECK_THROWS_WITH_AS(dataset::read_mfcc("/nonexistent/nope.f32"),
                       doctest::Contains("cannot open"), std::runtime_error);
  CHECK_THROWS_WITH_AS(dataset::read_manifest("/nonexistent/nope.tsv"),
                       doctest::Contains("cannot open"), std::runtime_error);
}
