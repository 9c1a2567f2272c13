/**
 * @file metrics.hpp
 * @brief Corpus statistics: empty bars, used pitch classes, drum patterns.
 */

#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>

#include <json.hpp>

#include "poly/pianoroll.hpp"

namespace poly {

/// Percentage of bars in which `track` has no onset. Throws EmptyCorpus.
double empty_bars(std::span<const Pianoroll> corpus, int track);

/// Mean number of distinct pitch classes among onsets, over bars where the
/// track plays. Throws EmptyCorpus, InvalidTrack (drums), NoNonEmptyBars.
double used_pitch_classes(std::span<const Pianoroll> corpus, int track);

/// Percentage of drum onsets on even timesteps (the 16-position grid).
/// Throws NoDrumNotes.
double drum_patterns(std::span<const Pianoroll> corpus);

struct MetricsReport {
  int n_sequences = 0;
  int n_bars = 0;
  std::array<double, kNumTracks> eb{};
  /// Unset for drums and for tracks that never play.
  std::array<std::optional<double>, kNumTracks> upc{};
  /// Unset when the corpus has no drum onsets.
  std::optional<double> dp;
};

/// Throws EmptyCorpus.
MetricsReport report(std::span<const Pianoroll> corpus);

/// {n_sequences, n_bars, eb:{track:..}, upc:{track:..|null}, dp:..|null}.
nlohmann::json to_json(const MetricsReport& r);
/// Aligned text table, one row per track.
std::string format_table(const MetricsReport& r);

}  // namespace poly
