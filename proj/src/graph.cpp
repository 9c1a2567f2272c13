/**
 * @file graph.cpp
 * @brief Chord-level graph construction, tensorization and serialization.
 */

#include "poly/graph.hpp"

#include <algorithm>
#include <array>
#include <map>

#include "poly/bytes.hpp"
#include "poly/error.hpp"

namespace poly {

std::size_t StructureTensor::count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

nlohmann::json to_json(const StructureTensor& s) {
  nlohmann::json bars = nlohmann::json::array();
  for (int n = 0; n < s.n_bars(); ++n) {
    nlohmann::json tracks = nlohmann::json::array();
    for (int i = 0; i < kNumTracks; ++i) {
      nlohmann::json steps = nlohmann::json::array();
      for (int t = 0; t < kStepsPerBar; ++t) steps.push_back(s.at(n, i, t) ? 1 : 0);
      tracks.push_back(std::move(steps));
    }
    bars.push_back(std::move(tracks));
  }
  return bars;
}

StructureTensor structure_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) throw Error("InvalidStructure", "structure must be an N x 4 x 32 array");
  StructureTensor s(static_cast<int>(doc.size()));
  for (int n = 0; n < s.n_bars(); ++n) {
    const auto& bar = doc[static_cast<std::size_t>(n)];
    if (!bar.is_array() || bar.size() != kNumTracks) throw Error("InvalidStructure", "each bar needs 4 tracks");
    for (int i = 0; i < kNumTracks; ++i) {
      const auto& row = bar[static_cast<std::size_t>(i)];
      if (!row.is_array() || row.size() != kStepsPerBar) {
        throw Error("InvalidStructure", "each track row needs 32 steps");
      }
      for (int t = 0; t < kStepsPerBar; ++t) {
        const auto& cell = row[static_cast<std::size_t>(t)];
        int v = -1;
        if (cell.is_boolean()) {
          v = cell.get<bool>() ? 1 : 0;
        } else if (cell.is_number_integer()) {
          v = cell.get<int>();
        }
        if (v != 0 && v != 1) throw Error("InvalidStructure", "structure cells must be 0 or 1");
        s.set(n, i, t, v == 1);
      }
    }
  }
  return s;
}

StructureTensor structure_of(const Pianoroll& roll) {
  StructureTensor s(roll.n_bars());
  for (const auto& o : roll.onsets()) s.set(o.bar, o.track, o.step);
  return s;
}

StructureTensor structure_of(const ChordGraph& graph) {
  StructureTensor s(graph.n_bars);
  for (const auto& v : graph.nodes) s.set(v.bar, v.track, v.step);
  return s;
}

ChordGraph build_topology(const StructureTensor& s, int sigma) {
  if (sigma < 2) throw Error("InvalidArgument", "sigma must leave room for at least one note and EOS");
  ChordGraph g;
  g.n_bars = s.n_bars();
  g.sigma = sigma;

  for (int n = 0; n < s.n_bars(); ++n) {
    // Node ids of this bar, indexed by [track][step]; -1 when inactive.
    std::array<std::array<int, kStepsPerBar>, kNumTracks> id{};
    for (auto& row : id) row.fill(-1);
    for (int i = 0; i < kNumTracks; ++i) {
      for (int t = 0; t < kStepsPerBar; ++t) {
        if (!s.at(n, i, t)) continue;
        id[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)] = static_cast<int>(g.nodes.size());
        g.nodes.push_back(GraphNode{n, i, t, {}});
      }
    }
    auto both = [&](int u, int v, int type, int delta) {
      g.edges.push_back(Edge{u, v, type, delta});
      g.edges.push_back(Edge{v, u, type, delta});
    };
    for (int i = 0; i < kNumTracks; ++i) {
      const auto& row = id[static_cast<std::size_t>(i)];
      int prev = -1;
      for (int t = 0; t < kStepsPerBar; ++t) {
        if (row[static_cast<std::size_t>(t)] < 0) continue;
        if (prev >= 0) both(row[static_cast<std::size_t>(prev)], row[static_cast<std::size_t>(t)], i, t - prev);
        prev = t;
      }
    }
    for (int t = 0; t < kStepsPerBar; ++t) {
      for (int i = 0; i < kNumTracks; ++i) {
        const int u = id[static_cast<std::size_t>(i)][static_cast<std::size_t>(t)];
        if (u < 0) continue;
        for (int j = i + 1; j < kNumTracks; ++j) {
          const int v = id[static_cast<std::size_t>(j)][static_cast<std::size_t>(t)];
          if (v >= 0) both(u, v, kOnsetEdge, 0);
        }
        for (int j = 0; j < kNumTracks; ++j) {
          if (j == i) continue;
          for (int later = t + 1; later < kStepsPerBar; ++later) {
            const int v = id[static_cast<std::size_t>(j)][static_cast<std::size_t>(later)];
            if (v >= 0) {
              both(u, v, kNextEdge, later - t);
              break;
            }
          }
        }
      }
    }
  }
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

ChordGraph build_graph(const Pianoroll& roll, const GraphOptions& options) {
  ChordGraph g = build_topology(structure_of(roll), options.sigma);

  std::map<std::tuple<int, int, int>, std::vector<NoteToken>> cells;
  for (const auto& o : roll.onsets()) {
    cells[{o.bar, o.track, o.step}].push_back(NoteToken{o.pitch, duration_token(o.duration)});
  }
  const auto capacity = static_cast<std::size_t>(options.sigma - 1);
  for (auto& node : g.nodes) {
    auto notes = cells.at({node.bar, node.track, node.step});
    std::sort(notes.begin(), notes.end());
    if (notes.size() > capacity) {
      if (options.overflow == OverflowPolicy::kThrow) {
        throw Error("ChordOverflow", std::to_string(notes.size()) + " simultaneous notes exceed sigma-1 = " +
                                         std::to_string(capacity));
      }
      g.truncated_notes += static_cast<int>(notes.size() - capacity);
      notes.erase(notes.begin(), notes.end() - static_cast<std::ptrdiff_t>(capacity));
    }
    notes.push_back(NoteToken{kEosPitch, kEosDuration});
    notes.resize(static_cast<std::size_t>(options.sigma), NoteToken{kPadPitch, kPadDuration});
    node.slots = std::move(notes);
  }
  return g;
}

std::vector<double> content_of(const ChordGraph& graph) {
  const auto sigma = static_cast<std::size_t>(graph.sigma);
  std::vector<double> x(graph.nodes.size() * sigma * kNoteFeatureWidth, 0.0);
  for (std::size_t v = 0; v < graph.nodes.size(); ++v) {
    const auto& slots = graph.nodes[v].slots;
    if (slots.size() != sigma) throw Error("ConfigMismatch", "node slot count differs from sigma");
    for (std::size_t s = 0; s < sigma; ++s) {
      const std::size_t base = (v * sigma + s) * kNoteFeatureWidth;
      x[base + static_cast<std::size_t>(slots[s].pitch)] = 1.0;
      x[base + kPitchVocab + static_cast<std::size_t>(slots[s].duration)] = 1.0;
    }
  }
  return x;
}

Pianoroll graph_to_pianoroll(const ChordGraph& graph) {
  Pianoroll roll(graph.n_bars);
  for (const auto& node : graph.nodes) {
    for (const auto& tok : node.slots) {
      if (tok.pitch == kEosPitch) break;
      if (tok.pitch >= kNumPitches || tok.duration >= kMaxDuration) continue;
      roll.merge(Onset{node.bar, node.track, node.step, tok.pitch, tok.duration + 1});
    }
  }
  roll.normalize();
  return roll;
}

nlohmann::json to_json(const ChordGraph& graph) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& v : graph.nodes) {
    nlohmann::json notes = nlohmann::json::array();
    for (const auto& tok : v.slots) notes.push_back({tok.pitch, tok.duration});
    nodes.push_back({{"n", v.bar}, {"i", v.track}, {"t", v.step}, {"notes", notes}});
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : graph.edges) edges.push_back({e.src, e.dst, e.type, e.delta});
  return {{"n_bars", graph.n_bars}, {"sigma", graph.sigma}, {"nodes", nodes}, {"edges", edges}};
}

ChordGraph graph_from_json(const nlohmann::json& doc) {
  try {
    ChordGraph g;
    g.n_bars = doc.at("n_bars").get<int>();
    g.sigma = doc.at("sigma").get<int>();
    for (const auto& v : doc.at("nodes")) {
      GraphNode node{v.at("n").get<int>(), v.at("i").get<int>(), v.at("t").get<int>(), {}};
      for (const auto& tok : v.at("notes")) node.slots.push_back(NoteToken{tok.at(0).get<int>(), tok.at(1).get<int>()});
      g.nodes.push_back(std::move(node));
    }
    for (const auto& e : doc.at("edges")) {
      g.edges.push_back(Edge{e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<int>(), e.at(3).get<int>()});
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw Error("InvalidGraph", std::string("malformed graph JSON: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_graph(const ChordGraph& graph) {
  ByteWriter w;
  w.tag("PGRF");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(graph.n_bars));
  w.u32(static_cast<std::uint32_t>(graph.sigma));
  w.u32(static_cast<std::uint32_t>(graph.nodes.size()));
  for (const auto& v : graph.nodes) {
    w.u32(static_cast<std::uint32_t>(v.bar));
    w.u32(static_cast<std::uint32_t>(v.track));
    w.u32(static_cast<std::uint32_t>(v.step));
    w.u32(static_cast<std::uint32_t>(v.slots.size()));
    for (const auto& tok : v.slots) {
      w.u32(static_cast<std::uint32_t>(tok.pitch));
      w.u32(static_cast<std::uint32_t>(tok.duration));
    }
  }
  w.u32(static_cast<std::uint32_t>(graph.edges.size()));
  for (const auto& e : graph.edges) {
    w.u32(static_cast<std::uint32_t>(e.src));
    w.u32(static_cast<std::uint32_t>(e.dst));
    w.u32(static_cast<std::uint32_t>(e.type));
    w.u32(static_cast<std::uint32_t>(e.delta));
  }
  return w.take();
}

ChordGraph decode_graph(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "InvalidGraph");
  r.expect_tag("PGRF");
  if (r.u32() != 1) throw Error("InvalidGraph", "unsupported graph version");
  ChordGraph g;
  g.n_bars = static_cast<int>(r.u32());
  g.sigma = static_cast<int>(r.u32());
  const auto n_nodes = r.u32();
  for (std::uint32_t k = 0; k < n_nodes; ++k) {
    GraphNode v;
    v.bar = static_cast<int>(r.u32());
    v.track = static_cast<int>(r.u32());
    v.step = static_cast<int>(r.u32());
    const auto n_slots = r.u32();
    for (std::uint32_t s = 0; s < n_slots; ++s) {
      NoteToken tok;
      tok.pitch = static_cast<int>(r.u32());
      tok.duration = static_cast<int>(r.u32());
      v.slots.push_back(tok);
    }
    g.nodes.push_back(std::move(v));
  }
  const auto n_edges = r.u32();
  for (std::uint32_t k = 0; k < n_edges; ++k) {
    Edge e;
    e.src = static_cast<int>(r.u32());
    e.dst = static_cast<int>(r.u32());
    e.type = static_cast<int>(r.u32());
    e.delta = static_cast<int>(r.u32());
    g.edges.push_back(e);
  }
  if (!r.done()) throw Error("InvalidGraph", "trailing bytes after graph");
  return g;
}

}  // namespace poly
