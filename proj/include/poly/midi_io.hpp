/**
 * @file midi_io.hpp
 * @brief Standard MIDI File reading/writing and conversion to 4-track pianorolls.
 */

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "poly/pianoroll.hpp"

namespace poly::midi {

struct NoteOn {
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOn&) const = default;
};

struct NoteOff {
  std::uint8_t channel = 0;
  std::uint8_t pitch = 0;
  std::uint8_t velocity = 0;
  bool operator==(const NoteOff&) const = default;
};

struct ProgramChange {
  std::uint8_t channel = 0;
  std::uint8_t program = 0;
  bool operator==(const ProgramChange&) const = default;
};

/// Set Tempo meta event, microseconds per quarter note.
struct Tempo {
  std::uint32_t us_per_quarter = 500000;
  bool operator==(const Tempo&) const = default;
};

struct TimeSignature {
  std::uint8_t numerator = 4;
  std::uint8_t denominator_pow2 = 2;  // 2 -> quarter note
  std::uint8_t clocks_per_click = 24;
  std::uint8_t thirty_seconds_per_quarter = 8;
  bool operator==(const TimeSignature&) const = default;
};

struct EndOfTrack {
  bool operator==(const EndOfTrack&) const = default;
};

/// Anything else, kept opaque so it can be written back unchanged.
/// status is the channel status byte, 0xFF (meta, with meta_type) or 0xF0/0xF7 (sysex).
struct OtherEvent {
  std::uint8_t status = 0;
  std::uint8_t meta_type = 0;
  std::vector<std::uint8_t> data;
  bool operator==(const OtherEvent&) const = default;
};

using Message = std::variant<NoteOn, NoteOff, ProgramChange, Tempo, TimeSignature, EndOfTrack, OtherEvent>;

struct Event {
  std::uint32_t delta = 0;
  Message message;
  bool operator==(const Event&) const = default;
};

/// Note-on with velocity 0 counts as a note-off.
bool is_note_off(const Message& m);

using TrackEvents = std::vector<Event>;

struct MidiFile {
  int format = 1;
  int division = 480;  ///< ticks per quarter note
  std::vector<TrackEvents> tracks;
  bool operator==(const MidiFile&) const = default;
};

/// Errors: MalformedHeader, TruncatedChunk, BadVlq, UnsupportedDivision.
MidiFile parse_smf(std::span<const std::uint8_t> bytes);

/// Never uses running status. Appends an end-of-track to tracks that lack one.
std::vector<std::uint8_t> write_smf(const MidiFile& file);

/// Reads a variable-length quantity at `pos`, advancing it. Throws BadVlq or TruncatedChunk.
std::uint32_t read_vlq(std::span<const std::uint8_t> bytes, std::size_t& pos);
void write_vlq(std::uint32_t value, std::vector<std::uint8_t>& out);

/// Destination for a (channel, program) pair: one of the 4 tracks or discard.
class TrackMap {
 public:
  static constexpr int kDiscard = -1;

  /// Drum channel (index 9) -> drums; programs 32-39 -> bass; 0-7 and 24-31
  /// -> guitar/piano; 112-127 (percussive, sound effects) discarded; every
  /// other program -> strings.
  static TrackMap standard();

  int resolve(int channel, int program) const;

 private:
  int drum_channel_ = 9;
};

struct ConversionOptions {
  int bars_per_sequence = 2;
  TrackMap map = TrackMap::standard();
};

/// Quantizes 4/4 regions to 32 steps per bar and cuts sequences of
/// `bars_per_sequence` bars with a one-bar stride. Sequences without onsets
/// are dropped. Throws NoQuantizableContent when nothing survives.
std::vector<Pianoroll> to_pianoroll(const MidiFile& file, const ConversionOptions& options = {});

/// Ticks per quarter used by from_pianoroll.
inline constexpr int kExportDivision = 480;

/// Format-1 file: a conductor track (tempo, 4/4) followed by one track per
/// instrument. Drums play on channel 9; bass, guitar/piano and strings use
/// channels 0-2 with programs 33, 0 and 48.
MidiFile from_pianoroll(const Pianoroll& roll, double bpm = 120.0);

}  // namespace poly::midi
