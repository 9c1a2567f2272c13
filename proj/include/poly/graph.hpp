/**
 * @file graph.hpp
 * @brief Chord-level graph: structure tensor, typed edges with timestep
 *        distances, and tokenized per-node chord content.
 *
 * Nodes are the (bar, track, step) cells where a track starts at least one
 * note. Edges never leave their bar and are stored in both directions:
 *  - track_i: consecutive activations of track i;
 *  - onset:   activations of different tracks at the same step;
 *  - next:    from each activation to every other track's earliest later
 *             activation.
 */

#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "poly/pianoroll.hpp"

namespace poly {

// Pitch tokens 0..127 are MIDI pitches.
inline constexpr int kPitchVocab = 131;
inline constexpr int kSosPitch = 128;
inline constexpr int kEosPitch = 129;
inline constexpr int kPadPitch = 130;

// Duration tokens 0..95 encode 1..96 timesteps.
inline constexpr int kDurationVocab = 99;
inline constexpr int kSosDuration = 96;
inline constexpr int kEosDuration = 97;
inline constexpr int kPadDuration = 98;

/// Width of one note feature: pitch one-hot followed by duration one-hot.
inline constexpr int kNoteFeatureWidth = kPitchVocab + kDurationVocab;

inline constexpr int kOnsetEdge = kNumTracks;
inline constexpr int kNextEdge = kNumTracks + 1;
inline constexpr int kNumEdgeTypes = kNumTracks + 2;

/// Distances are bucketed as min(delta, steps per bar).
inline constexpr int kNumDistanceBins = kStepsPerBar + 1;
inline int distance_bin(int delta) { return delta < kStepsPerBar ? delta : kStepsPerBar; }

inline int duration_token(int duration) { return duration - 1; }

/// Binary activation grid over (bar, track, step).
class StructureTensor {
 public:
  StructureTensor() = default;
  explicit StructureTensor(int n_bars)
      : n_bars_(n_bars), cells_(static_cast<std::size_t>(n_bars) * kNumTracks * kStepsPerBar, 0) {}

  int n_bars() const { return n_bars_; }
  std::size_t size() const { return cells_.size(); }
  bool at(int bar, int track, int step) const { return cells_[index(bar, track, step)] != 0; }
  void set(int bar, int track, int step, bool value = true) { cells_[index(bar, track, step)] = value ? 1 : 0; }
  const std::vector<std::uint8_t>& cells() const { return cells_; }
  std::size_t count() const;

  static std::size_t index(int bar, int track, int step) {
    return (static_cast<std::size_t>(bar) * kNumTracks + static_cast<std::size_t>(track)) * kStepsPerBar +
           static_cast<std::size_t>(step);
  }

  bool operator==(const StructureTensor&) const = default;

 private:
  int n_bars_ = 0;
  std::vector<std::uint8_t> cells_;
};

/// Nested N x 4 x 32 array of 0/1. Throws InvalidStructure on bad shape or values.
nlohmann::json to_json(const StructureTensor& s);
StructureTensor structure_from_json(const nlohmann::json& doc);

struct NoteToken {
  int pitch = kPadPitch;
  int duration = kPadDuration;
  auto operator<=>(const NoteToken&) const = default;
};

struct GraphNode {
  int bar = 0;
  int track = 0;
  int step = 0;
  /// Sigma slots: notes by ascending pitch, one EOS pair, then PAD pairs.
  /// Empty for topology-only graphs.
  std::vector<NoteToken> slots;

  int global_step() const { return bar * kStepsPerBar + step; }
  bool operator==(const GraphNode&) const = default;
};

struct Edge {
  int src = 0;
  int dst = 0;
  int type = 0;
  int delta = 0;
  auto operator<=>(const Edge&) const = default;
};

struct ChordGraph {
  int n_bars = 0;
  int sigma = 16;
  std::vector<GraphNode> nodes;
  std::vector<Edge> edges;
  /// Notes dropped because a cell held more than sigma-1 of them.
  int truncated_notes = 0;

  bool operator==(const ChordGraph& o) const {
    return n_bars == o.n_bars && sigma == o.sigma && nodes == o.nodes && edges == o.edges;
  }
};

enum class OverflowPolicy { kKeepHighest, kThrow };

struct GraphOptions {
  int sigma = 16;
  OverflowPolicy overflow = OverflowPolicy::kKeepHighest;
};

StructureTensor structure_of(const Pianoroll& roll);
StructureTensor structure_of(const ChordGraph& graph);

/// Nodes and edges for a structure, with empty slot lists.
ChordGraph build_topology(const StructureTensor& s, int sigma);

/// Throws ChordOverflow only under OverflowPolicy::kThrow.
ChordGraph build_graph(const Pianoroll& roll, const GraphOptions& options = {});

/// Row-major |V| x sigma x 230 one-hot tensor.
std::vector<double> content_of(const ChordGraph& graph);

/// Renders slots until the first EOS pitch; slots holding any special token
/// produce no note, and duplicate pitches keep the longest duration.
Pianoroll graph_to_pianoroll(const ChordGraph& graph);

nlohmann::json to_json(const ChordGraph& graph);
ChordGraph graph_from_json(const nlohmann::json& doc);

/// "PGRF", u32 version, u32 n_bars, u32 sigma, u32 |V|, per node u32 bar,
/// track, step and sigma (u32 pitch, u32 duration) pairs, u32 |E|, per edge
/// u32 src, dst, type, delta. Little-endian.
std::vector<std::uint8_t> encode_graph(const ChordGraph& graph);
ChordGraph decode_graph(const std::vector<std::uint8_t>& bytes);

}  // namespace poly
