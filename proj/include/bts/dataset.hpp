#pragma once

#include <string>
#include <vector>

#include "bts/common.hpp"
#include "bts/phoneme.hpp"
#include "bts/signal.hpp"

// On-disk corpus layout shared by the recording pipeline and the synthetic
// generator. Binary payloads are little-endian 32-bit floats; every binary
// file at <path> has a text header at <path>.hdr. docs/formats.md documents
// the exact layouts.
namespace bts::dataset {

// Continuous multichannel recording: row-major frames x channels floats, with
// a header carrying the rate, channel roles, and trial markers.
void write_recording(const std::string& path, const signal::RawRecording& rec);
signal::RawRecording read_recording(const std::string& path);

// Alignment text: one "phoneme start_ms end_ms" line per segment, sorted by
// start time.
void write_alignment(const std::string& path, const std::vector<phoneme::Segment>& segments);
std::vector<phoneme::Segment> read_alignment(const std::string& path);

// Feature-frame cache: row-major T x dim floats plus a one-line sidecar with
// the frame count, dimension, and frame period.
struct MfccCache {
  Matrix frames;
  double period_ms = 0.0;
};

void write_mfcc(const std::string& path, const Matrix& frames, double period_ms);
MfccCache read_mfcc(const std::string& path);

// Sentence manifest: one tab-separated record per trial tying the sentence to
// its alignment, feature target, and recording files (paths relative to the
// manifest's directory).
struct ManifestEntry {
  std::string sentence_id;
  std::string text;
  std::string alignment_path;
  std::string mfcc_path;
  std::string recording_path;
};

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

}  // namespace bts::dataset
