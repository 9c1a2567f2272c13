/**
 * @file pianoroll.cpp
 * @brief Pianoroll invariants, JSON fixture format and compact corpus files.
 */

#include "poly/pianoroll.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <tuple>

#include "poly/bytes.hpp"
#include "poly/error.hpp"

namespace poly {

namespace {

void check_onset(const Onset& o, int n_bars) {
  if (o.bar < 0 || o.bar >= n_bars || o.track < 0 || o.track >= kNumTracks || o.step < 0 ||
      o.step >= kStepsPerBar || o.pitch < 0 || o.pitch >= kNumPitches || o.duration < 1 ||
      o.duration > kMaxDuration) {
    throw Error("InvalidPianoroll",
                "onset out of range: bar=" + std::to_string(o.bar) + " track=" + std::to_string(o.track) +
                    " step=" + std::to_string(o.step) + " pitch=" + std::to_string(o.pitch) +
                    " dur=" + std::to_string(o.duration));
  }
}

bool same_cell(const Onset& a, const Onset& b) {
  return a.bar == b.bar && a.track == b.track && a.step == b.step && a.pitch == b.pitch;
}

}  // namespace

const char* track_name(int track) {
  switch (track) {
    case 0: return "drums";
    case 1: return "bass";
    case 2: return "guitar_piano";
    case 3: return "strings";
    default: return "unknown";
  }
}

void Pianoroll::add(const Onset& onset) {
  check_onset(onset, n_bars_);
  for (const auto& o : onsets_) {
    if (same_cell(o, onset)) throw Error("InvalidPianoroll", "duplicate onset");
  }
  onsets_.push_back(onset);
}

void Pianoroll::merge(const Onset& onset) {
  check_onset(onset, n_bars_);
  for (auto& o : onsets_) {
    if (same_cell(o, onset)) {
      o.duration = std::max(o.duration, onset.duration);
      return;
    }
  }
  onsets_.push_back(onset);
}

void Pianoroll::normalize() { std::sort(onsets_.begin(), onsets_.end()); }

void Pianoroll::validate() const {
  if (n_bars_ < 0) throw Error("InvalidPianoroll", "negative bar count");
  auto sorted = onsets_;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    check_onset(sorted[k], n_bars_);
    if (k > 0 && same_cell(sorted[k - 1], sorted[k])) throw Error("InvalidPianoroll", "duplicate onset");
  }
}

bool Pianoroll::exportable() const {
  std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> spans;
  for (const auto& o : onsets_) {
    spans[{o.track, o.pitch}].emplace_back(o.global_step(), o.global_step() + o.duration);
  }
  for (auto& [key, list] : spans) {
    std::sort(list.begin(), list.end());
    for (std::size_t k = 1; k < list.size(); ++k) {
      if (list[k].second < list[k - 1].second) return false;
    }
  }
  return true;
}

bool Pianoroll::operator==(const Pianoroll& other) const {
  if (n_bars_ != other.n_bars_ || onsets_.size() != other.onsets_.size()) return false;
  auto a = onsets_;
  auto b = other.onsets_;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return a == b;
}

nlohmann::json to_json(const Pianoroll& roll) {
  auto sorted = roll;
  sorted.normalize();
  nlohmann::json onsets = nlohmann::json::array();
  for (const auto& o : sorted.onsets()) {
    onsets.push_back({o.bar, o.track, o.step, o.pitch, o.duration});
  }
  return {{"n_bars", roll.n_bars()}, {"tracks", kNumTracks}, {"steps", kStepsPerBar}, {"onsets", onsets}};
}

Pianoroll pianoroll_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("tracks").get<int>() != kNumTracks || doc.at("steps").get<int>() != kStepsPerBar) {
      throw Error("InvalidPianoroll", "pianoroll must have 4 tracks and 32 steps");
    }
    Pianoroll roll(doc.at("n_bars").get<int>());
    for (const auto& row : doc.at("onsets")) {
      if (!row.is_array() || row.size() != 5) throw Error("InvalidPianoroll", "onset rows have 5 fields");
      roll.add(Onset{row[0].get<int>(), row[1].get<int>(), row[2].get<int>(), row[3].get<int>(),
                     row[4].get<int>()});
    }
    roll.normalize();
    return roll;
  } catch (const nlohmann::json::exception& e) {
    throw Error("InvalidPianoroll", std::string("malformed pianoroll JSON: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_corpus(const std::vector<Pianoroll>& rolls) {
  ByteWriter w;
  w.tag("PCRP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(rolls.size()));
  for (const auto& roll : rolls) {
    auto sorted = roll;
    sorted.normalize();
    w.u32(static_cast<std::uint32_t>(roll.n_bars()));
    w.u32(static_cast<std::uint32_t>(roll.onsets().size()));
    for (const auto& o : sorted.onsets()) {
      w.u16(static_cast<std::uint16_t>(o.bar));
      w.u16(static_cast<std::uint16_t>(o.track));
      w.u16(static_cast<std::uint16_t>(o.step));
      w.u16(static_cast<std::uint16_t>(o.pitch));
      w.u16(static_cast<std::uint16_t>(o.duration));
    }
  }
  return w.take();
}

std::vector<Pianoroll> decode_corpus(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "BadCorpus");
  r.expect_tag("PCRP");
  if (r.u32() != 1) throw Error("BadCorpus", "unsupported corpus version");
  const auto count = r.u32();
  std::vector<Pianoroll> rolls;
  rolls.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    Pianoroll roll(static_cast<int>(r.u32()));
    const auto n = r.u32();
    for (std::uint32_t j = 0; j < n; ++j) {
      Onset o;
      o.bar = r.u16();
      o.track = r.u16();
      o.step = r.u16();
      o.pitch = r.u16();
      o.duration = r.u16();
      roll.add(o);
    }
    rolls.push_back(std::move(roll));
  }
  if (!r.done()) throw Error("BadCorpus", "trailing bytes after corpus");
  return rolls;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("IoError", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_corpus_file(const std::filesystem::path& path, const std::vector<Pianoroll>& rolls) {
  write_file_bytes(path, encode_corpus(rolls));
}

namespace {

Pianoroll load_json_roll(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw Error("InvalidPianoroll", path.string() + ": " + e.what());
  }
  return pianoroll_from_json(doc);
}

}  // namespace

std::vector<Pianoroll> load_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Pianoroll> rolls;
    for (const auto& f : files) rolls.push_back(load_json_roll(f));
    return rolls;
  }
  if (path.extension() == ".json") return {load_json_roll(path)};
  return decode_corpus(read_file_bytes(path));
}

}  // namespace poly
