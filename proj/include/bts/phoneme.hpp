#pragma once

#include <string>
#include <vector>

namespace bts::phoneme {

// Articulatory groups partitioning the 39 phonemes, plus silence.
enum class Group {
  Vowels,
  Diphthongs,
  Stops,
  Affricates,
  Fricatives,
  Nasals,
  Liquids,
  Semivowels,
  Silence,
};

// The 40-class label space: 39 ARPAbet phonemes in group order plus "sil" as
// the final class. Index order is fixed and load-bearing (confusion matrices,
// CTC labels and checkpoints all use it).
class PhonemeInventory {
 public:
  static const PhonemeInventory& standard();

  int size() const { return static_cast<int>(labels_.size()); }  // M = 40
  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& label(int idx) const;
  // Throws naming the symbol when it is not in the inventory.
  int index_of(const std::string& symbol) const;
  bool contains(const std::string& symbol) const;
  Group group_of(int idx) const;
  std::vector<int> group_members(Group g) const;
  int sil_index() const { return size() - 1; }

  static std::string group_name(Group g);

 private:
  PhonemeInventory();
  std::vector<std::string> labels_;
  std::vector<Group> groups_;
};

struct Segment {
  std::string phoneme;
  double start_ms = 0.0;
  double end_ms = 0.0;
};

// A sentence's phoneme timing: contiguous, non-overlapping segments covering
// [0, last end), silence-delimited at both ends.
struct AlignedTranscript {
  std::string sentence_id;
  std::string text;
  std::vector<Segment> segments;

  double duration_ms() const { return segments.empty() ? 0.0 : segments.back().end_ms; }
  // Checks segment ordering/contiguity, inventory membership, and the
  // silence-delimited convention.
  void validate(const PhonemeInventory& inv) const;
};

// Parses a slash-delimited, comma-separated phoneme string such as
// "/sil, d, ih, d, sil/" into class indices.
std::vector<int> parse_transcription(const std::string& line, const PhonemeInventory& inv);

// Assigns each of n_frames frame centers (t + 0.5) * period the phoneme whose
// segment contains that time; a boundary exactly on a center goes to the
// later segment, and centers past the last segment get sil.
std::vector<int> frame_labels(const AlignedTranscript& transcript, double frame_period_ms,
                              int n_frames, const PhonemeInventory& inv);

// Merges consecutive duplicate labels (frame sequence -> phoneme sequence).
std::vector<int> collapse(const std::vector<int>& frames);

}  // namespace bts::phoneme
