#include "bts/phoneme.hpp"

#include <algorithm>
#include <cmath>

#include "bts/common.hpp"

namespace bts::phoneme {

namespace {

struct GroupBlock {
  Group group;
  std::vector<const char*> symbols;
};

const std::vector<GroupBlock>& group_blocks() {
  static const std::vector<GroupBlock> blocks = {
      {Group::Vowels, {"iy", "ih", "eh", "ae", "aa", "ao", "uh", "uw", "ah", "er"}},
      {Group::Diphthongs, {"ey", "ay", "aw", "oy", "ow"}},
      {Group::Stops, {"p", "b", "t", "d", "k", "g"}},
      {Group::Affricates, {"ch", "jh"}},
      {Group::Fricatives, {"f", "v", "th", "dh", "s", "z", "sh", "zh", "hh"}},
      {Group::Nasals, {"m", "n", "ng"}},
      {Group::Liquids, {"l", "r"}},
      {Group::Semivowels, {"w", "y"}},
      {Group::Silence, {"sil"}},
  };
  return blocks;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

PhonemeInventory::PhonemeInventory() {
  for (const auto& block : group_blocks()) {
    for (const char* sym : block.symbols) {
      labels_.emplace_back(sym);
      groups_.push_back(block.group);
    }
  }
}

const PhonemeInventory& PhonemeInventory::standard() {
  static const PhonemeInventory inv;
  return inv;
}

const std::string& PhonemeInventory::label(int idx) const {
  require(idx >= 0 && idx < size(),
          "phoneme index " + std::to_string(idx) + " out of range [0, " + std::to_string(size()) +
              ")");
  return labels_[static_cast<size_t>(idx)];
}

int PhonemeInventory::index_of(const std::string& symbol) const {
  for (size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == symbol) return static_cast<int>(i);
  }
  throw std::invalid_argument("phoneme symbol '" + symbol + "' is not in the inventory");
}

bool PhonemeInventory::contains(const std::string& symbol) const {
  return std::find(labels_.begin(), labels_.end(), symbol) != labels_.end();
}

Group PhonemeInventory::group_of(int idx) const {
  require(idx >= 0 && idx < size(), "phoneme index " + std::to_string(idx) + " out of range");
  return groups_[static_cast<size_t>(idx)];
}

std::vector<int> PhonemeInventory::group_members(Group g) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i) {
    if (groups_[static_cast<size_t>(i)] == g) out.push_back(i);
  }
  return out;
}

std::string PhonemeInventory::group_name(Group g) {
  switch (g) {
    case Group::Vowels: return "Vowels";
    case Group::Diphthongs: return "Diphthongs";
    case Group::Stops: return "Stops";
    case Group::Affricates: return "Affricates";
    case Group::Fricatives: return "Fricatives";
    case Group::Nasals: return "Nasals";
    case Group::Liquids: return "Liquids";
    case Group::Semivowels: return "Semivowels";
    case Group::Silence: return "Silence";
  }
  return "?";
}

void AlignedTranscript::validate(const PhonemeInventory& inv) const {
  require(!segments.empty(), "transcript '" + sentence_id + "' has no segments");
  const double eps = 1e-6;
  for (size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    (void)inv.index_of(s.phoneme);  // throws on unknown symbol
    require(s.end_ms > s.start_ms, "transcript '" + sentence_id + "' segment " +
                                       std::to_string(i) + " (" + s.phoneme +
                                       ") has non-positive duration");
    if (i > 0) {
      require(std::abs(s.start_ms - segments[i - 1].end_ms) < eps,
              "transcript '" + sentence_id + "' has a gap or overlap before segment " +
                  std::to_string(i) + " (" + s.phoneme + ")");
    }
  }
  require(std::abs(segments.front().start_ms) < eps,
          "transcript '" + sentence_id + "' must start at 0 ms");
  require(segments.front().phoneme == "sil" && segments.back().phoneme == "sil",
          "transcript '" + sentence_id + "' must start and end with sil");
}

std::vector<int> parse_transcription(const std::string& line, const PhonemeInventory& inv) {
  std::string s = trim(line);
  require(s.size() >= 2 && s.front() == '/' && s.back() == '/',
          "transcription must be slash-delimited, got '" + line + "'");
  s = s.substr(1, s.size() - 2);
  std::vector<int> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t comma = s.find(',', pos);
    std::string tok = trim(comma == std::string::npos ? s.substr(pos) : s.substr(pos, comma - pos));
    require(!tok.empty(), "empty phoneme token in transcription '" + line + "'");
    out.push_back(inv.index_of(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<int> frame_labels(const AlignedTranscript& transcript, double frame_period_ms,
                              int n_frames, const PhonemeInventory& inv) {
  require(frame_period_ms > 0.0, "frame period must be positive");
  require(n_frames >= 0, "frame count must be non-negative");
  const auto& segs = transcript.segments;
  for (size_t i = 1; i < segs.size(); ++i) {
    require(segs[i].start_ms >= segs[i - 1].end_ms - 1e-9,
            "transcript '" + transcript.sentence_id + "' segments overlap at index " +
                std::to_string(i));
  }
  const double last_end = segs.empty() ? 0.0 : segs.back().end_ms;
  require(static_cast<double>(n_frames) * frame_period_ms >= last_end - frame_period_ms,
          "transcript '" + transcript.sentence_id + "' extends " + std::to_string(last_end) +
              " ms past the " + std::to_string(n_frames) + "-frame horizon");
  const int sil = inv.sil_index();
  std::vector<int> out(static_cast<size_t>(n_frames), sil);
  size_t seg = 0;
  for (int t = 0; t < n_frames; ++t) {
    const double center = (static_cast<double>(t) + 0.5) * frame_period_ms;
    while (seg < segs.size() && center >= segs[seg].end_ms) ++seg;  // boundary -> later segment
    if (seg >= segs.size()) break;                                  // past the end: stays sil
    if (center >= segs[seg].start_ms) {
      out[static_cast<size_t>(t)] = inv.index_of(segs[seg].phoneme);
    }
  }
  return out;
}

std::vector<int> collapse(const std::vector<int>& frames) {
  std::vector<int> out;
  for (int v : frames) {
    if (out.empty() || out.back() != v) out.push_back(v);
  }
  return out;
}

}  // namespace bts::phoneme
