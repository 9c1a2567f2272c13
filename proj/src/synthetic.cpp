/**
 * @file synthetic.cpp
 * @brief Toy corpus generator.
 */

#include "poly/synthetic.hpp"

#include <algorithm>
#include <random>
#include <set>

namespace poly {

namespace {

struct TrackStyle {
  int min_hits;
  int max_hits;
  int low_pitch;
  int high_pitch;
  int max_chord;
};

int uniform(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

std::vector<Pianoroll> synthetic_corpus(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  const int chord = std::max(1, spec.max_chord);
  const TrackStyle styles[kNumTracks] = {
      {3, 6, 35, 51, 2},        // drums: kit pieces
      {2, 4, 28, 52, 1},        // bass
      {2, 3, 48, 84, chord},    // guitar/piano
      {1, 2, 55, 88, chord},    // strings
  };
  const int durations[] = {2, 4, 6, 8, 12, 16};
  std::vector<Pianoroll> corpus;
  for (int s = 0; s < spec.n_sequences; ++s) {
    Pianoroll roll(spec.n_bars);
    for (int bar = 0; bar < spec.n_bars; ++bar) {
      for (int track = 0; track < kNumTracks; ++track) {
        const auto& st = styles[track];
        std::set<int> steps;
        const int hits = uniform(rng, st.min_hits, st.max_hits);
        while (static_cast<int>(steps.size()) < hits) steps.insert(uniform(rng, 0, kStepsPerBar - 1));
        for (int step : steps) {
          const int notes = uniform(rng, 1, st.max_chord);
          std::set<int> pitches;
          while (static_cast<int>(pitches.size()) < notes) pitches.insert(uniform(rng, st.low_pitch, st.high_pitch));
          for (int p : pitches) {
            const int dur = track == 0 ? 1 : durations[uniform(rng, 0, 5)];
            roll.add(Onset{bar, track, step, p, dur});
          }
        }
      }
    }
    roll.normalize();
    corpus.push_back(std::move(roll));
  }
  return corpus;
}

}  // namespace poly
