/**
 * @file model_test.cpp
 * @brief Shapes, invariances and persistence of the graph VAE.
 */

#include "poly/model.hpp"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "poly/error.hpp"
#include "poly/synthetic.hpp"

namespace poly {
namespace {

ModelConfig tiny_config(std::uint64_t seed = 3) {
  return {.n_bars = 2, .sigma = 4, .d = 16, .gnn_layers = 2, .gcn_batchnorm = true, .structure_cap_per_bar = 128,
          .init_seed = seed};
}

std::vector<ChordGraph> tiny_graphs(int n, std::uint64_t seed = 11) {
  std::vector<ChordGraph> out;
  for (const auto& roll : synthetic_corpus({.n_sequences = n, .seed = seed})) out.push_back(build_graph(roll, {.sigma = 4}));
  return out;
}

std::vector<double> values_of(const ad::Tensor& t) { return {t.values().begin(), t.values().end()}; }

void zero_param(Model& m, const std::string& name) {
  auto t = m.params().get(name);
  std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
}

TEST(ModelConfigTest, ValidatesFields) {
  EXPECT_NO_THROW(tiny_config().validate());
  auto odd = tiny_config();
  odd.d = 15;
  EXPECT_THROW(odd.validate(), Error);
  auto narrow = tiny_config();
  narrow.sigma = 1;
  EXPECT_THROW(narrow.validate(), Error);
  auto no_layers = tiny_config();
  no_layers.gnn_layers = 0;
  EXPECT_THROW(no_layers.validate(), Error);
}

TEST(ModelConfigTest, FullScaleDefaults) {
  const auto c = ModelConfig::for_bars(2);
  EXPECT_EQ(c.d, 512);
  EXPECT_EQ(c.gnn_layers, 8);
  EXPECT_EQ(c.sigma, 16);
  EXPECT_EQ(ModelConfig::for_bars(16).n_bars, 16);
}

TEST(ModelConfigTest, JsonRoundTripAndFingerprint) {
  const auto c = tiny_config();
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  auto other_seed = c;
  other_seed.init_seed = 99;
  EXPECT_EQ(fingerprint(c), fingerprint(other_seed));
  auto wider = c;
  wider.d = 32;
  EXPECT_NE(fingerprint(c), fingerprint(wider));
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"d", "wide"}}), Error);
}

TEST(GraphBatchTest, RejectsMixedShapes) {
  auto graphs = tiny_graphs(2);
  graphs[1].sigma = 5;
  try {
    make_batch(graphs);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "ConfigMismatch");
  }
}

TEST(GraphBatchTest, IndexesNodesAndEdges) {
  const auto graphs = tiny_graphs(3);
  const auto batch = make_batch(graphs);
  std::size_t nodes = 0, edges = 0;
  for (const auto& g : graphs) {
    nodes += g.nodes.size();
    edges += g.edges.size();
  }
  EXPECT_EQ(batch.n_nodes(), nodes);
  std::size_t batched_edges = 0;
  for (const auto& grp : batch.edges) batched_edges += grp.src.size();
  EXPECT_EQ(batched_edges, edges);
  EXPECT_EQ(batch.pitch.size(), nodes * 4);
  EXPECT_EQ(batch.structure.size(), 3u * 2 * 128);
  EXPECT_EQ(batch.drum_rows.size() + batch.other_rows.size(), nodes * 4);
}

TEST(ModelTest, ForwardShapes) {
  Model m(tiny_config());
  const auto graphs = tiny_graphs(3);
  const auto batch = make_batch(graphs);
  std::mt19937_64 noise(1);
  const auto fp = m.forward(batch, noise, true);
  EXPECT_EQ(fp.mu.shape(), (ad::Shape{3, 16}));
  EXPECT_EQ(fp.logvar.shape(), (ad::Shape{3, 16}));
  EXPECT_EQ(fp.structure_logits.shape(), (ad::Shape{3, 256}));
  EXPECT_EQ(fp.pitch_logits.shape(), (ad::Shape{batch.n_nodes() * 4, 131}));
  EXPECT_EQ(fp.duration_logits.shape(), (ad::Shape{batch.n_nodes() * 4, 99}));
}

TEST(ModelTest, SameSeedSameParameters) {
  Model a(tiny_config(5)), b(tiny_config(5)), c(tiny_config(6));
  const auto& pa = a.params().parameters();
  const auto& pb = b.params().parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(values_of(pa[i].value), values_of(pb[i].value)) << pa[i].name;
    any_diff |= values_of(pa[i].value) != values_of(c.params().parameters()[i].value);
  }
  EXPECT_TRUE(any_diff);
}

TEST(ModelTest, ContentEncodingIgnoresNodeOrder) {
  Model m(tiny_config());
  const auto graph = tiny_graphs(1)[0];
  ChordGraph shuffled = graph;
  std::vector<int> perm(graph.nodes.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(4);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.nodes[perm[i]] = graph.nodes[i];
  for (auto& e : shuffled.edges) {
    e.src = perm[e.src];
    e.dst = perm[e.dst];
  }
  ad::NoGradGuard guard;
  const auto a = values_of(m.encode_content(make_batch(std::span(&graph, 1)), false));
  const auto b = values_of(m.encode_content(make_batch(std::span(&shuffled, 1)), false));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-9);
}

TEST(ModelTest, ZeroWeightsGiveResidualIdentity) {
  auto cfg = tiny_config();
  cfg.gcn_batchnorm = false;
  Model m(cfg);
  for (int l = 0; l < cfg.gnn_layers; ++l) {
    const std::string p = "enc.gcn" + std::to_string(l);
    zero_param(m, p + ".self");
    zero_param(m, p + ".dist");
    for (int r = 0; r < kNumEdgeTypes; ++r) zero_param(m, p + ".type" + std::to_string(r));
  }
  const auto graphs = tiny_graphs(2);
  const auto batch = make_batch(graphs);
  ad::NoGradGuard guard;
  const auto h0 = m.chord_encoding(batch);
  auto h = h0;
  for (int l = 0; l < cfg.gnn_layers; ++l) h = m.gcn_layer(h, batch, "enc", l, false);
  EXPECT_EQ(values_of(h), values_of(h0));
}

TEST(ModelTest, BarEmbeddingsAreLocal) {
  Model m(tiny_config());
  auto roll = synthetic_corpus({.n_sequences = 1, .seed = 8})[0];
  Pianoroll edited(2);
  for (auto o : roll.onsets()) {
    if (o.bar == 1 && o.track != static_cast<int>(Track::kDrums)) o.pitch = std::min(o.pitch + 1, 127);
    edited.merge(o);
  }
  edited.add(Onset{1, static_cast<int>(Track::kStrings), 31, 90, 1});
  edited.normalize();
  const auto a = build_graph(roll, {.sigma = 4});
  const auto b = build_graph(edited, {.sigma = 4});
  ad::NoGradGuard guard;
  const auto ea = m.content_bar_embeddings(make_batch(std::span(&a, 1)), false);
  const auto eb = m.content_bar_embeddings(make_batch(std::span(&b, 1)), false);
  ASSERT_EQ(ea.shape(), (ad::Shape{2, 16}));
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(ea[k], eb[k]);
  double diff = 0;
  for (std::size_t k = 16; k < 32; ++k) diff += std::abs(ea[k] - eb[k]);
  EXPECT_GT(diff, 0.0);
}

TEST(ModelTest, DrumPitchesUseTheirOwnTable) {
  Model m(tiny_config());
  Pianoroll roll(2);
  roll.add(Onset{0, static_cast<int>(Track::kDrums), 0, 36, 1});
  roll.add(Onset{0, static_cast<int>(Track::kGuitarPiano), 0, 36, 8});
  roll.normalize();
  const auto g = build_graph(roll, {.sigma = 4});
  ASSERT_EQ(g.nodes.size(), 2u);
  ASSERT_EQ(g.nodes[0].track, static_cast<int>(Track::kDrums));
  const auto batch = make_batch(std::span(&g, 1));
  ad::NoGradGuard guard;
  const auto before = values_of(m.chord_encoding(batch));
  auto table = m.params().get("enc.pitch_drum");
  const std::size_t half = 8;
  for (std::size_t c = 0; c < half; ++c) table.mutable_values()[36 * half + c] += 1.0;
  const auto after = values_of(m.chord_encoding(batch));
  double drum_change = 0;
  for (std::size_t c = 0; c < 16; ++c) drum_change += std::abs(after[c] - before[c]);
  EXPECT_GT(drum_change, 0.0);
  for (std::size_t c = 16; c < 32; ++c) EXPECT_EQ(after[c], before[c]);
}

TEST(ModelTest, EvalLatentIsMean) {
  Model m(tiny_config());
  const auto graphs = tiny_graphs(2);
  const auto batch = make_batch(graphs);
  std::mt19937_64 noise(3);
  ad::NoGradGuard guard;
  const auto fp = m.forward(batch, noise, false);
  EXPECT_EQ(values_of(fp.z), values_of(fp.mu));
  const auto code = m.encode(graphs[0]);
  EXPECT_EQ(code.z, code.mu);
}

TEST(ModelTest, ReparameterizedNoiseIsStandardNormal) {
  Model m(tiny_config());
  const auto graph = tiny_graphs(1)[0];
  double sum = 0, sq = 0;
  long count = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto code = m.encode(graph, true, seed);
    for (std::size_t k = 0; k < code.z.size(); ++k) {
      const double eps = (code.z[k] - code.mu[k]) / std::exp(0.5 * code.logvar[k]);
      sum += eps;
      sq += eps * eps;
      ++count;
    }
  }
  const double mean = sum / count;
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(sq / count - mean * mean, 1.0, 0.03);
}

TEST(ModelTest, LogVarIsClamped) {
  Model m(tiny_config());
  auto bias = m.params().get("logvar.b");
  std::fill(bias.mutable_values().begin(), bias.mutable_values().end(), 1e3);
  const auto code = m.encode(tiny_graphs(1)[0]);
  for (double v : code.logvar) EXPECT_LE(v, 10.0);
}

TEST(ModelTest, ZeroOutputLayerGivesHalfProbabilities) {
  Model m(tiny_config());
  zero_param(m, "sdec.conv2.k");
  zero_param(m, "sdec.conv2.b");
  const std::vector<double> z_s(16, 0.3);
  const auto probs = m.decode_structure(z_s);
  ASSERT_EQ(probs.size(), 256u);
  for (double p : probs) EXPECT_EQ(p, 0.5);
  EXPECT_EQ(binarize(probs, 2, 0.5).count(), 256u);
  EXPECT_EQ(binarize(probs, 2, 1.0).count(), 0u);
}

TEST(ModelTest, BinarizeRules) {
  std::vector<double> probs(256, 0.2);
  probs[StructureTensor::index(1, 2, 7)] = 0.9;
  const auto s = binarize(probs, 2, 0.5);
  EXPECT_EQ(s.count(), 1u);
  EXPECT_TRUE(s.at(1, 2, 7));
  EXPECT_THROW(binarize(probs, 3, 0.5), Error);
}

TEST(ModelTest, DecodedContentIsNormalized) {
  Model m(tiny_config());
  StructureTensor s(2);
  s.set(0, 0, 0);
  const std::vector<double> z_c(16, -0.2);
  const auto one = m.decode_content(z_c, s);
  ASSERT_EQ(one.topology.nodes.size(), 1u);
  EXPECT_EQ(one.pitch.size(), 4u * 131);
  EXPECT_EQ(one.duration.size(), 4u * 99);
  s.set(1, 3, 20);
  s.set(1, 1, 20);
  const auto probs = m.decode_content(z_c, s);
  const std::size_t rows = probs.topology.nodes.size() * 4;
  for (std::size_t r = 0; r < rows; ++r) {
    EXPECT_NEAR(std::accumulate(probs.pitch.begin() + r * 131, probs.pitch.begin() + (r + 1) * 131, 0.0), 1.0, 1e-12);
    EXPECT_NEAR(std::accumulate(probs.duration.begin() + r * 99, probs.duration.begin() + (r + 1) * 99, 0.0), 1.0,
                1e-12);
  }
  const auto empty = m.decode_content(z_c, StructureTensor(2));
  EXPECT_TRUE(empty.topology.nodes.empty());
  EXPECT_TRUE(empty.pitch.empty());
}

TEST(ModelTest, DecodeFlagsCrowdedStructures) {
  auto cfg = tiny_config();
  cfg.structure_cap_per_bar = 1;
  Model m(cfg);
  zero_param(m, "sdec.conv2.k");
  zero_param(m, "sdec.conv2.b");
  const auto d = m.decode(std::vector<double>(16, 0.0), 0.5);
  EXPECT_TRUE(d.over_cap);
  EXPECT_EQ(d.structure.count(), 256u);
}

TEST(ModelTest, WrongLatentWidthThrows) {
  Model m(tiny_config());
  EXPECT_THROW(m.decode(std::vector<double>(15, 0.0)), Error);
}

TEST(ModelTest, CheckpointRoundTripIsExact) {
  Model m(tiny_config());
  // Move batch-norm statistics away from their defaults first.
  std::mt19937_64 noise(2);
  const auto graphs = tiny_graphs(3);
  m.forward(make_batch(graphs), noise, true);
  const auto path = std::filesystem::temp_directory_path() / "poly_model_test.ckpt";
  save_model(path, m);
  const auto loaded = load_model(path);
  EXPECT_EQ(loaded.config(), m.config());
  const std::vector<double> z(16, 0.7);
  const auto a = m.decode(z);
  const auto b = loaded.decode(z);
  EXPECT_EQ(a.structure_probs, b.structure_probs);
  EXPECT_EQ(a.content.pitch, b.content.pitch);
  for (std::size_t i = 0; i < m.params().batchnorms().size(); ++i) {
    EXPECT_EQ(m.params().batchnorms()[i].second.running_mean, loaded.params().batchnorms()[i].second.running_mean);
  }
  std::filesystem::remove(path);
}

TEST(ModelTest, MismatchedCheckpointIsRejected) {
  Model small(tiny_config());
  ad::Checkpoint ckpt;
  small.save_to(ckpt, false);
  auto wider = tiny_config();
  wider.d = 32;
  Model big(wider);
  try {
    big.load_from(ckpt, false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "CheckpointMismatch");
  }
  ckpt.meta["fingerprint"] = "0000";
  EXPECT_THROW(model_from_checkpoint(ckpt, false), Error);
}

}  // namespace
}  // namespace poly
