/**
 * @file midi_io.cpp
 * @brief SMF chunk/event codec and quantization to the 32-step grid.
 */

#include "poly/midi_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <map>

#include "poly/error.hpp"

namespace poly::midi {

namespace {

std::uint32_t read_be(std::span<const std::uint8_t> bytes, std::size_t pos, int n) {
  std::uint32_t v = 0;
  for (int i = 0; i < n; ++i) v = (v << 8) | bytes[pos + static_cast<std::size_t>(i)];
  return v;
}

void write_be(std::uint32_t v, int n, std::vector<std::uint8_t>& out) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

int channel_data_length(std::uint8_t status) {
  const auto kind = status & 0xF0;
  return (kind == 0xC0 || kind == 0xD0) ? 1 : 2;
}

TrackEvents parse_track(std::span<const std::uint8_t> chunk) {
  TrackEvents events;
  std::size_t pos = 0;
  std::uint8_t running = 0;
  bool saw_end = false;

  auto need = [&](std::size_t n) {
    if (chunk.size() - pos < n) throw Error("TruncatedChunk", "event runs past end of MTrk chunk");
  };

  while (pos < chunk.size()) {
    Event ev;
    ev.delta = read_vlq(chunk, pos);
    need(1);
    std::uint8_t status = chunk[pos];
    if (status < 0x80) {
      if (running == 0) throw Error("MalformedEvent", "data byte without running status");
      status = running;
    } else {
      ++pos;
    }

    if (status < 0xF0) {
      running = status;
      const int len = channel_data_length(status);
      need(static_cast<std::size_t>(len));
      const std::uint8_t d1 = chunk[pos];
      const std::uint8_t d2 = len == 2 ? chunk[pos + 1] : 0;
      pos += static_cast<std::size_t>(len);
      const std::uint8_t ch = status & 0x0F;
      switch (status & 0xF0) {
        case 0x80: ev.message = NoteOff{ch, d1, d2}; break;
        case 0x90: ev.message = NoteOn{ch, d1, d2}; break;
        case 0xC0: ev.message = ProgramChange{ch, d1}; break;
        default: {
          OtherEvent other{status, 0, {d1}};
          if (len == 2) other.data.push_back(d2);
          ev.message = std::move(other);
        }
      }
    } else if (status == 0xFF) {
      need(1);
      const std::uint8_t type = chunk[pos++];
      const std::uint32_t len = read_vlq(chunk, pos);
      need(len);
      std::vector<std::uint8_t> data(chunk.begin() + static_cast<std::ptrdiff_t>(pos),
                                     chunk.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
      if (type == 0x2F) {
        ev.message = EndOfTrack{};
        events.push_back(std::move(ev));
        saw_end = true;
        break;
      }
      if (type == 0x51 && len == 3) {
        ev.message = Tempo{(std::uint32_t{data[0]} << 16) | (std::uint32_t{data[1]} << 8) | data[2]};
      } else if (type == 0x58 && len == 4) {
        ev.message = TimeSignature{data[0], data[1], data[2], data[3]};
      } else {
        ev.message = OtherEvent{0xFF, type, std::move(data)};
      }
    } else if (status == 0xF0 || status == 0xF7) {
      const std::uint32_t len = read_vlq(chunk, pos);
      need(len);
      ev.message = OtherEvent{status, 0,
                              std::vector<std::uint8_t>(chunk.begin() + static_cast<std::ptrdiff_t>(pos),
                                                        chunk.begin() + static_cast<std::ptrdiff_t>(pos + len))};
      pos += len;
    } else {
      throw Error("MalformedEvent", "system message 0x" + std::to_string(status) + " inside a track");
    }
    events.push_back(std::move(ev));
  }
  if (!saw_end) events.push_back(Event{0, EndOfTrack{}});
  return events;
}

void write_event(const Event& ev, std::vector<std::uint8_t>& out) {
  write_vlq(ev.delta, out);
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, NoteOn>) {
          out.insert(out.end(), {static_cast<std::uint8_t>(0x90 | m.channel), m.pitch, m.velocity});
        } else if constexpr (std::is_same_v<M, NoteOff>) {
          out.insert(out.end(), {static_cast<std::uint8_t>(0x80 | m.channel), m.pitch, m.velocity});
        } else if constexpr (std::is_same_v<M, ProgramChange>) {
          out.insert(out.end(), {static_cast<std::uint8_t>(0xC0 | m.channel), m.program});
        } else if constexpr (std::is_same_v<M, Tempo>) {
          out.insert(out.end(), {0xFF, 0x51, 0x03});
          write_be(m.us_per_quarter, 3, out);
        } else if constexpr (std::is_same_v<M, TimeSignature>) {
          out.insert(out.end(), {0xFF, 0x58, 0x04, m.numerator, m.denominator_pow2, m.clocks_per_click,
                                 m.thirty_seconds_per_quarter});
        } else if constexpr (std::is_same_v<M, EndOfTrack>) {
          out.insert(out.end(), {0xFF, 0x2F, 0x00});
        } else {
          out.push_back(m.status);
          if (m.status == 0xFF) {
            out.push_back(m.meta_type);
            write_vlq(static_cast<std::uint32_t>(m.data.size()), out);
          } else if (m.status == 0xF0 || m.status == 0xF7) {
            write_vlq(static_cast<std::uint32_t>(m.data.size()), out);
          }
          out.insert(out.end(), m.data.begin(), m.data.end());
        }
      },
      ev.message);
}

// Rounds num/den to the nearest integer, ties toward the smaller value.
std::int64_t round_half_down(std::int64_t num, std::int64_t den) {
  std::int64_t q = num / den;
  const std::int64_t r = num % den;
  if (2 * r > den) ++q;
  return q;
}

struct TimedMessage {
  std::int64_t tick;
  std::size_t track;
  std::size_t order;
  const Message* message;
};

}  // namespace

bool is_note_off(const Message& m) {
  if (std::holds_alternative<NoteOff>(m)) return true;
  if (const auto* on = std::get_if<NoteOn>(&m)) return on->velocity == 0;
  return false;
}

std::uint32_t read_vlq(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  std::uint32_t value = 0;
  for (int i = 0; i < 4; ++i) {
    if (pos >= bytes.size()) throw Error("TruncatedChunk", "variable-length quantity runs past end of data");
    const std::uint8_t b = bytes[pos++];
    value = (value << 7) | (b & 0x7F);
    if ((b & 0x80) == 0) return value;
  }
  throw Error("BadVlq", "variable-length quantity longer than 4 bytes");
}

void write_vlq(std::uint32_t value, std::vector<std::uint8_t>& out) {
  if (value > 0x0FFFFFFF) throw Error("BadVlq", "value does not fit in 4 VLQ bytes");
  std::array<std::uint8_t, 4> buf{};
  int n = 0;
  buf[n++] = value & 0x7F;
  while ((value >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>((value & 0x7F) | 0x80);
  while (n > 0) out.push_back(buf[--n]);
}

MidiFile parse_smf(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(bytes.begin(), bytes.begin() + 4, "MThd")) {
    throw Error("MalformedHeader", "missing MThd chunk");
  }
  const std::uint32_t header_len = read_be(bytes, 4, 4);
  if (header_len < 6) throw Error("MalformedHeader", "MThd chunk shorter than 6 bytes");
  if (bytes.size() - 8 < header_len) throw Error("TruncatedChunk", "MThd chunk truncated");

  MidiFile file;
  file.format = static_cast<int>(read_be(bytes, 8, 2));
  const auto n_tracks = read_be(bytes, 10, 2);
  const auto division = read_be(bytes, 12, 2);
  if (file.format > 2) throw Error("MalformedHeader", "unknown SMF format " + std::to_string(file.format));
  if (division & 0x8000) throw Error("UnsupportedDivision", "SMPTE time division is not supported");
  if (division == 0) throw Error("MalformedHeader", "division must be positive");
  file.division = static_cast<int>(division);

  std::size_t pos = 8 + header_len;
  while (file.tracks.size() < n_tracks) {
    if (bytes.size() - pos < 8) throw Error("TruncatedChunk", "missing track chunk header");
    const bool is_track = std::equal(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4), "MTrk");
    const std::uint32_t len = read_be(bytes, pos + 4, 4);
    pos += 8;
    if (bytes.size() - pos < len) throw Error("TruncatedChunk", "chunk length exceeds file size");
    if (is_track) file.tracks.push_back(parse_track(bytes.subspan(pos, len)));
    pos += len;
  }
  return file;
}

std::vector<std::uint8_t> write_smf(const MidiFile& file) {
  std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd', 0, 0, 0, 6};
  write_be(static_cast<std::uint32_t>(file.format), 2, out);
  write_be(static_cast<std::uint32_t>(file.tracks.size()), 2, out);
  write_be(static_cast<std::uint32_t>(file.division), 2, out);
  for (const auto& track : file.tracks) {
    std::vector<std::uint8_t> body;
    for (const auto& ev : track) write_event(ev, body);
    if (track.empty() || !std::holds_alternative<EndOfTrack>(track.back().message)) {
      write_event(Event{0, EndOfTrack{}}, body);
    }
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    write_be(static_cast<std::uint32_t>(body.size()), 4, out);
    out.insert(out.end(), body.begin(), body.end());
  }
  return out;
}

TrackMap TrackMap::standard() { return TrackMap{}; }

int TrackMap::resolve(int channel, int program) const {
  if (channel == drum_channel_) return static_cast<int>(Track::kDrums);
  if (program >= 32 && program <= 39) return static_cast<int>(Track::kBass);
  if ((program >= 0 && program <= 7) || (program >= 24 && program <= 31)) {
    return static_cast<int>(Track::kGuitarPiano);
  }
  if (program >= 112) return kDiscard;
  return static_cast<int>(Track::kStrings);
}

std::vector<Pianoroll> to_pianoroll(const MidiFile& file, const ConversionOptions& options) {
  if (file.format == 2) throw Error("UnsupportedFormat", "format-2 files are not converted");
  if (options.bars_per_sequence < 1) throw Error("InvalidArgument", "bars_per_sequence must be positive");

  std::vector<TimedMessage> timeline;
  std::int64_t first_track_end = 0;
  for (std::size_t t = 0; t < file.tracks.size(); ++t) {
    std::int64_t tick = 0;
    for (std::size_t k = 0; k < file.tracks[t].size(); ++k) {
      tick += file.tracks[t][k].delta;
      timeline.push_back({tick, t, k, &file.tracks[t][k].message});
    }
    if (t == 0) first_track_end = tick;
  }
  std::stable_sort(timeline.begin(), timeline.end(), [](const TimedMessage& a, const TimedMessage& b) {
    return std::tie(a.tick, a.track, a.order) < std::tie(b.tick, b.track, b.order);
  });

  std::int64_t song_end = first_track_end;
  std::int64_t last_tick = 0;
  for (const auto& tm : timeline) {
    last_tick = std::max(last_tick, tm.tick);
    if (std::holds_alternative<NoteOn>(*tm.message) && !is_note_off(*tm.message)) {
      song_end = std::max(song_end, tm.tick + 1);
    }
  }

  // Meter segments: (start tick, is 4/4). Repeated identical signatures are no-ops.
  std::vector<std::pair<std::int64_t, bool>> segments = {{0, true}};
  std::pair<int, int> current = {4, 2};
  for (const auto& tm : timeline) {
    if (const auto* ts = std::get_if<TimeSignature>(tm.message)) {
      const std::pair<int, int> sig = {ts->numerator, ts->denominator_pow2};
      if (sig == current) continue;
      current = sig;
      const bool four_four = sig == std::pair<int, int>{4, 2};
      if (segments.back().first == tm.tick) {
        segments.back().second = four_four;
      } else {
        segments.emplace_back(tm.tick, four_four);
      }
    }
  }

  const std::int64_t bar_ticks = 4LL * file.division;
  struct Run {
    std::int64_t start;
    int n_bars;
  };
  std::vector<Run> runs;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (!segments[s].second) continue;
    const std::int64_t start = segments[s].first;
    const std::int64_t end = s + 1 < segments.size() ? segments[s + 1].first : song_end;
    if (end <= start) continue;
    runs.push_back({start, static_cast<int>((end - start + bar_ticks - 1) / bar_ticks)});
  }

  // Per-run onset lists in run-relative global steps.
  std::vector<std::vector<Onset>> run_onsets(runs.size());
  std::array<int, 16> program{};
  std::map<std::pair<int, int>, std::deque<std::pair<std::int64_t, int>>> open_notes;

  auto emit = [&](std::int64_t start, std::int64_t end, int channel, int prog, int pitch) {
    const int track = options.map.resolve(channel, prog);
    if (track == TrackMap::kDiscard) return;
    for (std::size_t r = 0; r < runs.size(); ++r) {
      const auto& run = runs[r];
      if (start < run.start || start >= run.start + run.n_bars * bar_ticks) continue;
      const auto step = round_half_down((start - run.start) * kStepsPerBar, bar_ticks);
      if (step >= static_cast<std::int64_t>(run.n_bars) * kStepsPerBar) return;
      auto dur = round_half_down((end - start) * kStepsPerBar, bar_ticks);
      dur = std::clamp<std::int64_t>(dur, 1, kMaxDuration);
      run_onsets[r].push_back(Onset{static_cast<int>(step / kStepsPerBar), track,
                                    static_cast<int>(step % kStepsPerBar), pitch, static_cast<int>(dur)});
      return;
    }
  };

  for (const auto& tm : timeline) {
    std::visit(
        [&](const auto& m) {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, ProgramChange>) {
            program[m.channel & 0x0F] = m.program;
          } else if constexpr (std::is_same_v<M, NoteOn> || std::is_same_v<M, NoteOff>) {
            const std::pair<int, int> key = {m.channel & 0x0F, m.pitch};
            if (is_note_off(*tm.message)) {
              auto it = open_notes.find(key);
              if (it == open_notes.end() || it->second.empty()) return;
              const auto [start, prog] = it->second.front();
              it->second.pop_front();
              emit(start, tm.tick, key.first, prog, key.second);
            } else {
              open_notes[key].emplace_back(tm.tick, program[key.first]);
            }
          }
        },
        *tm.message);
  }
  for (auto& [key, queue] : open_notes) {
    for (const auto& [start, prog] : queue) emit(start, std::max(last_tick, start), key.first, prog, key.second);
  }

  std::vector<Pianoroll> rolls;
  const int window = options.bars_per_sequence;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    for (int first = 0; first + window <= runs[r].n_bars; ++first) {
      Pianoroll roll(window);
      for (const auto& o : run_onsets[r]) {
        if (o.bar < first || o.bar >= first + window) continue;
        Onset shifted = o;
        shifted.bar -= first;
        roll.merge(shifted);
      }
      if (roll.empty()) continue;
      roll.normalize();
      rolls.push_back(std::move(roll));
    }
  }
  if (rolls.empty()) throw Error("NoQuantizableContent", "no notes survived quantization and filtering");
  return rolls;
}

MidiFile from_pianoroll(const Pianoroll& roll, double bpm) {
  constexpr int kTicksPerStep = kExportDivision * 4 / kStepsPerBar;
  constexpr std::array<std::uint8_t, kNumTracks> kChannels = {9, 0, 1, 2};
  constexpr std::array<std::uint8_t, kNumTracks> kPrograms = {0, 33, 0, 48};
  constexpr std::uint8_t kVelocity = 100;

  MidiFile file;
  file.format = 1;
  file.division = kExportDivision;

  const auto song_ticks = static_cast<std::uint32_t>(roll.n_bars() * kStepsPerBar * kTicksPerStep);
  const auto us = static_cast<std::uint32_t>(std::lround(60'000'000.0 / bpm));
  file.tracks.push_back({Event{0, TimeSignature{}}, Event{0, Tempo{us}}, Event{song_ticks, EndOfTrack{}}});

  for (int track = 0; track < kNumTracks; ++track) {
    const std::uint8_t ch = kChannels[static_cast<std::size_t>(track)];
    // (tick, is_on, pitch); offs sort before ons at the same tick.
    std::vector<std::tuple<std::uint32_t, int, int>> notes;
    for (const auto& o : roll.onsets()) {
      if (o.track != track) continue;
      const auto on = static_cast<std::uint32_t>(o.global_step() * kTicksPerStep);
      notes.emplace_back(on, 1, o.pitch);
      notes.emplace_back(on + static_cast<std::uint32_t>(o.duration * kTicksPerStep), 0, o.pitch);
    }
    std::sort(notes.begin(), notes.end());

    TrackEvents events = {Event{0, ProgramChange{ch, kPrograms[static_cast<std::size_t>(track)]}}};
    std::uint32_t prev = 0;
    for (const auto& [tick, is_on, pitch] : notes) {
      const auto p = static_cast<std::uint8_t>(pitch);
      Message msg = is_on ? Message{NoteOn{ch, p, kVelocity}} : Message{NoteOff{ch, p, 0}};
      events.push_back(Event{tick - prev, std::move(msg)});
      prev = tick;
    }
    events.push_back(Event{0, EndOfTrack{}});
    file.tracks.push_back(std::move(events));
  }
  return file;
}

}  // namespace poly::midi
