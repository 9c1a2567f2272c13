/**
 * @file pianoroll.hpp
 * @brief Fixed-grid multitrack pianoroll with per-onset durations.
 *
 * A roll covers N bars of 4 tracks (drums, bass, guitar/piano, strings),
 * 32 timesteps per bar and 128 pitches. Only onsets are stored; sustain is
 * implied by each onset's duration.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace poly {

inline constexpr int kNumTracks = 4;
inline constexpr int kStepsPerBar = 32;
inline constexpr int kNumPitches = 128;
inline constexpr int kMaxDuration = 96;

enum class Track : int { kDrums = 0, kBass = 1, kGuitarPiano = 2, kStrings = 3 };

const char* track_name(int track);

struct Onset {
  int bar = 0;
  int track = 0;
  int step = 0;
  int pitch = 0;
  int duration = 1;

  /// Global timestep within the roll.
  int global_step() const { return bar * kStepsPerBar + step; }

  auto operator<=>(const Onset&) const = default;
};

class Pianoroll {
 public:
  Pianoroll() = default;
  explicit Pianoroll(int n_bars) : n_bars_(n_bars) {}

  int n_bars() const { return n_bars_; }
  const std::vector<Onset>& onsets() const { return onsets_; }
  bool empty() const { return onsets_.empty(); }

  /// Adds an onset after checking bounds and duplicates. Throws
  /// poly::Error("InvalidPianoroll") on violation.
  void add(const Onset& onset);

  /// Adds or, when the cell/pitch is already taken, keeps the longer duration.
  void merge(const Onset& onset);

  /// Sorts onsets by (bar, track, step, pitch). All producers call this so
  /// equality is order-independent.
  void normalize();

  /// Throws poly::Error("InvalidPianoroll") if any invariant is broken.
  void validate() const;

  /// True when no two same-pitch notes of one track are nested in time.
  /// Nested notes cannot be told apart once written as MIDI note on/off pairs.
  bool exportable() const;

  bool operator==(const Pianoroll& other) const;

 private:
  int n_bars_ = 0;
  std::vector<Onset> onsets_;
};

// Fixture / wire JSON:
// {n_bars, tracks:4, steps:32, onsets:[[bar,track,step,pitch,dur],...]}
nlohmann::json to_json(const Pianoroll& roll);
Pianoroll pianoroll_from_json(const nlohmann::json& doc);

/// Compact corpus file: "PCRP", u32 version, u32 count, then per roll
/// u32 n_bars, u32 n_onsets and five u16 fields per onset. Little-endian.
std::vector<std::uint8_t> encode_corpus(const std::vector<Pianoroll>& rolls);
std::vector<Pianoroll> decode_corpus(const std::vector<std::uint8_t>& bytes);

void write_corpus_file(const std::filesystem::path& path, const std::vector<Pianoroll>& rolls);

/// Loads a corpus from a binary corpus file, a single pianoroll JSON file, or
/// a directory of pianoroll JSON files (sorted by filename).
std::vector<Pianoroll> load_corpus(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace poly
