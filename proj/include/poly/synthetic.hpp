/**
 * @file synthetic.hpp
 * @brief Seeded toy corpora for smoke tests and overfitting checks.
 */

#pragma once

#include <cstdint>
#include <vector>

#include "poly/pianoroll.hpp"

namespace poly {

struct SyntheticSpec {
  int n_sequences = 16;
  int n_bars = 2;
  /// Upper bound on simultaneous notes per track activation.
  int max_chord = 3;
  std::uint64_t seed = 2024;
};

/// Four-track rolls with irregular onset positions: drums hit 3-6 times per
/// bar, bass 2-4, guitar/piano 2-3, strings 1-2; pitched parts stay in a
/// plausible register and durations come from a small set.
std::vector<Pianoroll> synthetic_corpus(const SyntheticSpec& spec);

}  // namespace poly
