/**
 * @file metrics.cpp
 * @brief EB, UPC and DP over pianoroll corpora.
 */

#include "poly/metrics.hpp"

#include <bitset>
#include <vector>

#include <fmt/format.h>

#include "poly/error.hpp"

namespace poly {

namespace {

void require_nonempty(std::span<const Pianoroll> corpus) {
  if (corpus.empty()) throw Error("EmptyCorpus", "corpus has no sequences");
}

void require_track(int track) {
  if (track < 0 || track >= kNumTracks) throw Error("InvalidTrack", "track index out of range");
}

}  // namespace

double empty_bars(std::span<const Pianoroll> corpus, int track) {
  require_nonempty(corpus);
  require_track(track);
  long bars = 0, empty = 0;
  for (const auto& roll : corpus) {
    std::vector<bool> played(static_cast<std::size_t>(roll.n_bars()), false);
    for (const auto& o : roll.onsets()) {
      if (o.track == track) played[o.bar] = true;
    }
    bars += roll.n_bars();
    for (bool p : played) empty += p ? 0 : 1;
  }
  if (bars == 0) throw Error("EmptyCorpus", "corpus has no bars");
  return 100.0 * static_cast<double>(empty) / static_cast<double>(bars);
}

double used_pitch_classes(std::span<const Pianoroll> corpus, int track) {
  require_nonempty(corpus);
  require_track(track);
  if (track == static_cast<int>(Track::kDrums)) throw Error("InvalidTrack", "pitch classes are undefined for drums");
  long bars = 0, classes = 0;
  for (const auto& roll : corpus) {
    std::vector<std::bitset<12>> used(static_cast<std::size_t>(roll.n_bars()));
    for (const auto& o : roll.onsets()) {
      if (o.track == track) used[o.bar].set(o.pitch % 12);
    }
    for (const auto& u : used) {
      if (u.none()) continue;
      ++bars;
      classes += static_cast<long>(u.count());
    }
  }
  if (bars == 0) throw Error("NoNonEmptyBars", std::string(track_name(track)) + " never plays");
  return static_cast<double>(classes) / static_cast<double>(bars);
}

double drum_patterns(std::span<const Pianoroll> corpus) {
  require_nonempty(corpus);
  long total = 0, aligned = 0;
  for (const auto& roll : corpus) {
    for (const auto& o : roll.onsets()) {
      if (o.track != static_cast<int>(Track::kDrums)) continue;
      ++total;
      aligned += o.step % 2 == 0 ? 1 : 0;
    }
  }
  if (total == 0) throw Error("NoDrumNotes", "corpus has no drum onsets");
  return 100.0 * static_cast<double>(aligned) / static_cast<double>(total);
}

MetricsReport report(std::span<const Pianoroll> corpus) {
  require_nonempty(corpus);
  MetricsReport r;
  r.n_sequences = static_cast<int>(corpus.size());
  for (const auto& roll : corpus) r.n_bars += roll.n_bars();
  for (int t = 0; t < kNumTracks; ++t) {
    r.eb[t] = empty_bars(corpus, t);
    if (t == static_cast<int>(Track::kDrums)) continue;
    try {
      r.upc[t] = used_pitch_classes(corpus, t);
    } catch (const Error& e) {
      if (e.code() != "NoNonEmptyBars") throw;
    }
  }
  try {
    r.dp = drum_patterns(corpus);
  } catch (const Error& e) {
    if (e.code() != "NoDrumNotes") throw;
  }
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json eb = nlohmann::json::object(), upc = nlohmann::json::object();
  for (int t = 0; t < kNumTracks; ++t) {
    eb[track_name(t)] = r.eb[t];
    if (t == static_cast<int>(Track::kDrums)) continue;
    upc[track_name(t)] = r.upc[t] ? nlohmann::json(*r.upc[t]) : nlohmann::json(nullptr);
  }
  return {{"n_sequences", r.n_sequences},
          {"n_bars", r.n_bars},
          {"eb", eb},
          {"upc", upc},
          {"dp", r.dp ? nlohmann::json(*r.dp) : nlohmann::json(nullptr)}};
}

std::string format_table(const MetricsReport& r) {
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{:>8.2f}", *v) : fmt::format("{:>8}", "-"); };
  std::string out = fmt::format("{:<14}{:>8}{:>8}{:>8}\n", "track", "EB", "UPC", "DP");
  for (int t = 0; t < kNumTracks; ++t) {
    const bool drums = t == static_cast<int>(Track::kDrums);
    out += fmt::format("{:<14}{:>8.2f}{}{}\n", track_name(t), r.eb[t], cell(r.upc[t]),
                       drums ? cell(r.dp) : fmt::format("{:>8}", ""));
  }
  out += fmt::format("{} sequences, {} bars\n", r.n_sequences, r.n_bars);
  return out;
}

}  // namespace poly
