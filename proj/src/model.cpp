/**
 * @file model.cpp
 * @brief Graph VAE forward passes, inference helpers and checkpoint glue.
 */

#include "poly/model.hpp"

#include <cstdio>

#include <spdlog/spdlog.h>

#include "poly/error.hpp"

namespace poly {

using ad::Tensor;

namespace {

constexpr int kCnnChannels1 = 16;
constexpr int kCnnChannels2 = 32;
// Structure bar map after two 2x2 poolings: 32 channels x 1 x 8.
constexpr int kCnnFlat = kCnnChannels2 * (kNumTracks / 4) * (kStepsPerBar / 4);

std::string layer_name(const std::string& stack, int layer) { return stack + ".gcn" + std::to_string(layer); }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("InvalidConfig", msg); };
  if (n_bars < 1) fail("n_bars must be >= 1");
  if (sigma < 2) fail("sigma must be >= 2");
  if (d < 2 || d % 2 != 0) fail("d must be even and >= 2");
  if (gnn_layers < 1) fail("gnn_layers must be >= 1");
  if (structure_cap_per_bar < 0) fail("structure_cap_per_bar must be >= 0");
}

ModelConfig ModelConfig::for_bars(int n_bars) {
  ModelConfig c;
  c.n_bars = n_bars;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_bars", c.n_bars},
          {"sigma", c.sigma},
          {"d", c.d},
          {"gnn_layers", c.gnn_layers},
          {"gcn_batchnorm", c.gcn_batchnorm},
          {"structure_cap_per_bar", c.structure_cap_per_bar},
          {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& doc) {
  ModelConfig c;
  try {
    if (!doc.is_object()) throw Error("InvalidConfig", "model config must be an object");
    c.n_bars = doc.value("n_bars", c.n_bars);
    c.sigma = doc.value("sigma", c.sigma);
    c.d = doc.value("d", c.d);
    c.gnn_layers = doc.value("gnn_layers", c.gnn_layers);
    c.gcn_batchnorm = doc.value("gcn_batchnorm", c.gcn_batchnorm);
    c.structure_cap_per_bar = doc.value("structure_cap_per_bar", c.structure_cap_per_bar);
    c.init_seed = doc.value("init_seed", c.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error("InvalidConfig", std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string fingerprint(const ModelConfig& c) {
  const std::string text = "polyvae/1:" + std::to_string(c.n_bars) + ":" + std::to_string(c.sigma) + ":" +
                           std::to_string(c.d) + ":" + std::to_string(c.gnn_layers) + ":" +
                           (c.gcn_batchnorm ? "bn" : "nobn");
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

GraphBatch make_batch(std::span<const ChordGraph> graphs) {
  GraphBatch b;
  if (graphs.empty()) return b;
  b.n_items = static_cast<int>(graphs.size());
  b.n_bars = graphs[0].n_bars;
  b.sigma = graphs[0].sigma;
  bool any_slots = false, any_missing = false;
  for (const auto& g : graphs) {
    if (g.n_bars != b.n_bars || g.sigma != b.sigma) {
      throw Error("ConfigMismatch", "batch mixes graphs with different n_bars or sigma");
    }
    for (const auto& v : g.nodes) {
      (v.slots.empty() ? any_missing : any_slots) = true;
    }
  }
  if (any_slots && any_missing) throw Error("ConfigMismatch", "batch mixes content graphs and bare topologies");
  b.has_content = any_slots;

  const std::size_t cells = static_cast<std::size_t>(b.n_bars) * kNumTracks * kStepsPerBar;
  b.structure.reserve(graphs.size() * cells);
  int offset = 0;
  for (int item = 0; item < b.n_items; ++item) {
    const auto& g = graphs[item];
    std::vector<int> in_degree(g.nodes.size(), 0);
    for (const auto& e : g.edges) ++in_degree[e.dst];
    for (std::size_t v = 0; v < g.nodes.size(); ++v) {
      const auto& node = g.nodes[v];
      b.node_bar.push_back(item * b.n_bars + node.bar);
      b.node_track.push_back(node.track);
      b.inv_degree.push_back(in_degree[v] > 0 ? 1.0 / in_degree[v] : 0.0);
      for (int j = 0; j < b.sigma; ++j) {
        const int row = (offset + static_cast<int>(v)) * b.sigma + j;
        (node.track == static_cast<int>(Track::kDrums) ? b.drum_rows : b.other_rows).push_back(row);
        if (b.has_content) {
          b.pitch.push_back(node.slots[j].pitch);
          b.duration.push_back(node.slots[j].duration);
        }
      }
    }
    for (const auto& e : g.edges) {
      auto& group = b.edges[e.type];
      group.src.push_back(offset + e.src);
      group.dst.push_back(offset + e.dst);
      group.bin.push_back(distance_bin(e.delta));
      group.weight.push_back(b.inv_degree[offset + e.dst]);
    }
    const auto s = structure_of(g);
    for (auto c : s.cells()) b.structure.push_back(c);
    offset += static_cast<int>(g.nodes.size());
  }
  return b;
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  build();
}

void Model::build() {
  std::mt19937_64 rng(config_.init_seed);
  const std::size_t d = static_cast<std::size_t>(config_.d);
  const std::size_t half = d / 2;
  const std::size_t n = static_cast<std::size_t>(config_.n_bars);
  const std::size_t sigma = static_cast<std::size_t>(config_.sigma);

  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    store_.add_glorot(name + ".w", {in, out}, in, out, rng);
    store_.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  };
  auto add_conv = [&](const std::string& name, std::size_t out, std::size_t in) {
    store_.add_glorot(name + ".k", {out, in, 3, 3}, in * 9, out * 9, rng);
    store_.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  };
  auto add_bn = [&](const std::string& name, std::size_t channels) {
    store_.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    store_.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
    store_.add_batchnorm(name, channels);
  };
  auto add_gcn = [&](const std::string& stack) {
    for (int l = 0; l < config_.gnn_layers; ++l) {
      const auto p = layer_name(stack, l);
      store_.add_glorot(p + ".self", {d, d}, d, d, rng);
      for (int r = 0; r < kNumEdgeTypes; ++r) store_.add_glorot(p + ".type" + std::to_string(r), {d, d}, d, d, rng);
      store_.add_glorot(p + ".dist", {kNumDistanceBins, d}, kNumDistanceBins, d, rng);
      if (config_.gcn_batchnorm) add_bn(p + ".bn", d);
    }
  };

  // Content encoder.
  store_.add_glorot("enc.pitch_drum", {kPitchVocab, half}, kPitchVocab, half, rng);
  store_.add_glorot("enc.pitch", {kPitchVocab, half}, kPitchVocab, half, rng);
  store_.add_glorot("enc.duration", {kDurationVocab, half}, kDurationVocab, half, rng);
  add_linear("enc.chord", sigma * d, d);
  add_gcn("enc");
  add_linear("enc.gate", d, d);
  add_linear("enc.value", d, d);
  add_linear("enc.compress", n * d, d);

  // Structure encoder.
  add_conv("senc.conv1", kCnnChannels1, 1);
  add_bn("senc.bn1", kCnnChannels1);
  add_conv("senc.conv2", kCnnChannels2, kCnnChannels1);
  add_bn("senc.bn2", kCnnChannels2);
  add_linear("senc.dense1", kCnnFlat, d);
  add_linear("senc.dense2", d, d);
  add_linear("senc.compress", n * d, d);

  // Latent heads.
  add_linear("combine", 2 * d, d);
  add_linear("mu", d, d);
  add_linear("logvar", d, d);
  add_linear("split", d, 2 * d);

  // Structure decoder.
  add_linear("sdec.decompress", d, n * d);
  add_linear("sdec.dense1", d, d);
  add_linear("sdec.dense2", d, kCnnFlat);
  add_conv("sdec.conv1", kCnnChannels1, kCnnChannels2);
  add_bn("sdec.bn1", kCnnChannels1);
  add_conv("sdec.conv2", 1, kCnnChannels1);

  // Content decoder.
  add_linear("cdec.decompress", d, n * d);
  add_gcn("dec");
  add_linear("cdec.chord", d, sigma * d);
  add_linear("cdec.pitch_drum", half, kPitchVocab);
  add_linear("cdec.pitch", half, kPitchVocab);
  add_linear("cdec.duration", half, kDurationVocab);
}

Tensor Model::linear(const std::string& name, const Tensor& x) const {
  return ad::linear(x, store_.get(name + ".w"), store_.get(name + ".b"));
}

Tensor Model::bn(const std::string& name, const Tensor& x, bool training) const {
  return ad::batchnorm(x, store_.get(name + ".gamma"), store_.get(name + ".beta"), store_.batchnorm(name), training);
}

Tensor Model::chord_encoding(const GraphBatch& batch) const {
  if (!batch.has_content) throw Error("ConfigMismatch", "chord encoder needs graphs with content");
  if (batch.sigma != config_.sigma) throw Error("ConfigMismatch", "graph sigma differs from model sigma");
  const std::size_t rows = batch.pitch.size();
  auto pick = [&](const std::vector<int>& which) {
    std::vector<int> tokens(which.size());
    for (std::size_t k = 0; k < which.size(); ++k) tokens[k] = batch.pitch[which[k]];
    return tokens;
  };
  const auto drum_tokens = pick(batch.drum_rows);
  const auto other_tokens = pick(batch.other_rows);
  const Tensor pitch = ad::add(
      ad::scatter_add_rows(ad::embed(store_.get("enc.pitch_drum"), drum_tokens), batch.drum_rows, rows),
      ad::scatter_add_rows(ad::embed(store_.get("enc.pitch"), other_tokens), batch.other_rows, rows));
  const Tensor notes = ad::concat({pitch, ad::embed(store_.get("enc.duration"), batch.duration)}, 1);
  const std::size_t d = static_cast<std::size_t>(config_.d);
  return linear("enc.chord", ad::reshape(notes, {batch.n_nodes(), static_cast<std::size_t>(batch.sigma) * d}));
}

Tensor Model::gcn_layer(const Tensor& h, const GraphBatch& batch, const std::string& stack, int layer,
                        bool training) const {
  const auto p = layer_name(stack, layer);
  const std::size_t v = batch.n_nodes();
  Tensor out = ad::matmul(h, store_.get(p + ".self"));
  const Tensor dist = store_.get(p + ".dist");
  for (int r = 0; r < kNumEdgeTypes; ++r) {
    const auto& g = batch.edges[r];
    if (g.src.empty()) continue;
    const Tensor source = ad::add(ad::gather_rows(h, g.src), ad::embed(dist, g.bin));
    const Tensor msg = ad::scale_rows(ad::matmul(source, store_.get(p + ".type" + std::to_string(r))), g.weight);
    out = ad::add(out, ad::scatter_add_rows(msg, g.dst, v));
  }
  Tensor act = ad::relu(out);
  if (config_.gcn_batchnorm) act = bn(p + ".bn", act, training);
  return ad::add(act, h);
}

Tensor Model::gcn_stack(Tensor h, const GraphBatch& batch, const std::string& stack, bool training) const {
  for (int l = 0; l < config_.gnn_layers; ++l) h = gcn_layer(h, batch, stack, l, training);
  return h;
}

Tensor Model::content_bar_embeddings(const GraphBatch& batch, bool training) const {
  const std::size_t bars = static_cast<std::size_t>(batch.n_items) * static_cast<std::size_t>(config_.n_bars);
  const std::size_t d = static_cast<std::size_t>(config_.d);
  if (batch.n_nodes() == 0) return Tensor::zeros({bars, d});
  const Tensor h = gcn_stack(chord_encoding(batch), batch, "enc", training);
  const Tensor gated = ad::mul(ad::sigmoid(linear("enc.gate", h)), linear("enc.value", h));
  return ad::scatter_add_rows(gated, batch.node_bar, bars);
}

Tensor Model::encode_content(const GraphBatch& batch, bool training) const {
  const std::size_t per_item = static_cast<std::size_t>(config_.n_bars) * static_cast<std::size_t>(config_.d);
  const Tensor bars = content_bar_embeddings(batch, training);
  return linear("enc.compress", ad::reshape(bars, {static_cast<std::size_t>(batch.n_items), per_item}));
}

Tensor Model::encode_structure(const Tensor& structure, bool training) const {
  const std::size_t bar_cells = kNumTracks * kStepsPerBar;
  const std::size_t per_item = static_cast<std::size_t>(config_.n_bars) * bar_cells;
  if (structure.rank() != 2 || structure.dim(1) != per_item) {
    throw Error("ShapeMismatch", "structure input must be [B, n_bars*4*32], got " + ad::shape_str(structure.shape()));
  }
  const std::size_t items = structure.dim(0);
  const std::size_t bars = items * static_cast<std::size_t>(config_.n_bars);
  Tensor x = ad::reshape(structure, {bars, 1, kNumTracks, kStepsPerBar});
  x = ad::conv2d(x, store_.get("senc.conv1.k"), store_.get("senc.conv1.b"), 1, 1);
  x = ad::maxpool2d(bn("senc.bn1", ad::relu(x), training), 2);
  x = ad::conv2d(x, store_.get("senc.conv2.k"), store_.get("senc.conv2.b"), 1, 1);
  x = ad::maxpool2d(bn("senc.bn2", ad::relu(x), training), 2);
  x = linear("senc.dense2", ad::relu(linear("senc.dense1", ad::reshape(x, {bars, kCnnFlat}))));
  const std::size_t d = static_cast<std::size_t>(config_.d);
  return linear("senc.compress", ad::reshape(x, {items, static_cast<std::size_t>(config_.n_bars) * d}));
}

std::pair<Tensor, Tensor> Model::latent_heads(const GraphBatch& batch, bool training) const {
  if (batch.n_bars != config_.n_bars) throw Error("ConfigMismatch", "graph n_bars differs from model n_bars");
  const std::size_t items = static_cast<std::size_t>(batch.n_items);
  const Tensor s(ad::Shape{items, batch.structure.size() / std::max<std::size_t>(items, 1)}, batch.structure);
  const Tensor z_s = encode_structure(s, training);
  const Tensor z_c = encode_content(batch, training);
  const Tensor z_g = linear("combine", ad::concat({z_s, z_c}, 1));
  return {linear("mu", z_g), ad::clamp(linear("logvar", z_g), -10.0, 10.0)};
}

std::pair<Tensor, Tensor> Model::split(const Tensor& z) const {
  const Tensor both = linear("split", z);
  const std::size_t d = static_cast<std::size_t>(config_.d);
  return {ad::slice(both, 1, 0, d), ad::slice(both, 1, d, d)};
}

Tensor Model::structure_logits(const Tensor& z_s, bool training) const {
  const std::size_t items = z_s.dim(0);
  const std::size_t bars = items * static_cast<std::size_t>(config_.n_bars);
  const std::size_t d = static_cast<std::size_t>(config_.d);
  Tensor x = ad::reshape(linear("sdec.decompress", z_s), {bars, d});
  x = ad::relu(linear("sdec.dense2", ad::relu(linear("sdec.dense1", x))));
  x = ad::upsample_nearest(ad::reshape(x, {bars, kCnnChannels2, kNumTracks / 4, kStepsPerBar / 4}), 2);
  x = ad::conv2d(x, store_.get("sdec.conv1.k"), store_.get("sdec.conv1.b"), 1, 1);
  x = ad::upsample_nearest(bn("sdec.bn1", ad::relu(x), training), 2);
  x = ad::conv2d(x, store_.get("sdec.conv2.k"), store_.get("sdec.conv2.b"), 1, 1);
  return ad::reshape(x, {items, static_cast<std::size_t>(config_.n_bars) * kNumTracks * kStepsPerBar});
}

std::pair<Tensor, Tensor> Model::content_logits(const Tensor& z_c, const GraphBatch& topology, bool training) const {
  if (topology.sigma != config_.sigma || topology.n_bars != config_.n_bars) {
    throw Error("ConfigMismatch", "topology built under a different sigma or n_bars");
  }
  const std::size_t v = topology.n_nodes();
  const std::size_t rows = v * static_cast<std::size_t>(config_.sigma);
  if (v == 0) return {Tensor::zeros({0, kPitchVocab}), Tensor::zeros({0, kDurationVocab})};
  const std::size_t d = static_cast<std::size_t>(config_.d);
  const std::size_t bars = z_c.dim(0) * static_cast<std::size_t>(config_.n_bars);
  const Tensor seeds = ad::reshape(linear("cdec.decompress", z_c), {bars, d});
  const Tensor h = gcn_stack(ad::gather_rows(seeds, topology.node_bar), topology, "dec", training);
  const Tensor notes = ad::reshape(linear("cdec.chord", h), {rows, d});
  const Tensor pitch_half = ad::slice(notes, 1, 0, d / 2);
  const Tensor duration_half = ad::slice(notes, 1, d / 2, d / 2);
  const Tensor pitch = ad::add(
      ad::scatter_add_rows(linear("cdec.pitch_drum", ad::gather_rows(pitch_half, topology.drum_rows)),
                           topology.drum_rows, rows),
      ad::scatter_add_rows(linear("cdec.pitch", ad::gather_rows(pitch_half, topology.other_rows)),
                           topology.other_rows, rows));
  return {pitch, linear("cdec.duration", duration_half)};
}

ForwardPass Model::forward(const GraphBatch& batch, std::mt19937_64& noise, bool training) const {
  ForwardPass out;
  std::tie(out.mu, out.logvar) = latent_heads(batch, training);
  if (training) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> eps(out.mu.size());
    for (auto& e : eps) e = normal(noise);
    const Tensor sd = ad::exp(ad::scale(out.logvar, 0.5));
    out.z = ad::add(out.mu, ad::mul(sd, Tensor(out.mu.shape(), std::move(eps))));
  } else {
    out.z = out.mu;
  }
  const auto [z_s, z_c] = split(out.z);
  out.structure_logits = structure_logits(z_s, training);
  std::tie(out.pitch_logits, out.duration_logits) = content_logits(z_c, batch, training);
  return out;
}

namespace {

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor row_tensor(std::span<const double> v) { return Tensor({1, v.size()}, {v.begin(), v.end()}); }

}  // namespace

LatentCode Model::encode(const ChordGraph& graph, bool sample, std::uint64_t seed) const {
  ad::NoGradGuard guard;
  const auto batch = make_batch(std::span<const ChordGraph>(&graph, 1));
  const auto [mu, logvar] = latent_heads(batch, false);
  LatentCode code{to_vector(mu), to_vector(logvar), to_vector(mu)};
  if (sample) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t k = 0; k < code.z.size(); ++k) code.z[k] += std::exp(0.5 * code.logvar[k]) * normal(rng);
  }
  return code;
}

std::pair<std::vector<double>, std::vector<double>> Model::split_latent(std::span<const double> z) const {
  if (z.size() != static_cast<std::size_t>(config_.d)) throw Error("ShapeMismatch", "latent has wrong width");
  ad::NoGradGuard guard;
  const auto [z_s, z_c] = split(row_tensor(z));
  return {to_vector(z_s), to_vector(z_c)};
}

std::vector<double> Model::decode_structure(std::span<const double> z_s) const {
  if (z_s.size() != static_cast<std::size_t>(config_.d)) throw Error("ShapeMismatch", "z_S has wrong width");
  ad::NoGradGuard guard;
  return to_vector(ad::sigmoid(structure_logits(row_tensor(z_s), false)));
}

ContentProbs Model::decode_content(std::span<const double> z_c, const StructureTensor& s) const {
  if (z_c.size() != static_cast<std::size_t>(config_.d)) throw Error("ShapeMismatch", "z_C has wrong width");
  if (s.n_bars() != config_.n_bars) throw Error("ShapeMismatch", "structure has wrong number of bars");
  ad::NoGradGuard guard;
  ContentProbs out;
  out.topology = build_topology(s, config_.sigma);
  if (out.topology.nodes.empty()) return out;
  const auto batch = make_batch(std::span<const ChordGraph>(&out.topology, 1));
  const auto [pitch, duration] = content_logits(row_tensor(z_c), batch, false);
  out.pitch = to_vector(ad::softmax(pitch, 1));
  out.duration = to_vector(ad::softmax(duration, 1));
  return out;
}

Decoded Model::decode(std::span<const double> z, double threshold) const {
  const auto [z_s, z_c] = split_latent(z);
  Decoded out;
  out.structure_probs = decode_structure(z_s);
  out.structure = binarize(out.structure_probs, config_.n_bars, threshold);
  for (int n = 0; n < config_.n_bars; ++n) {
    int active = 0;
    for (int i = 0; i < kNumTracks; ++i)
      for (int t = 0; t < kStepsPerBar; ++t) active += out.structure.at(n, i, t) ? 1 : 0;
    if (active > config_.structure_cap_per_bar) {
      out.over_cap = true;
      spdlog::warn("generated bar {} has {} active cells (cap {})", n, active, config_.structure_cap_per_bar);
    }
  }
  out.content = decode_content(z_c, out.structure);
  return out;
}

StructureTensor binarize(std::span<const double> probs, int n_bars, double threshold) {
  StructureTensor s(n_bars);
  if (probs.size() != s.size()) throw Error("ShapeMismatch", "probability grid has wrong size");
  for (int n = 0; n < n_bars; ++n)
    for (int i = 0; i < kNumTracks; ++i)
      for (int t = 0; t < kStepsPerBar; ++t) {
        if (probs[StructureTensor::index(n, i, t)] >= threshold) s.set(n, i, t);
      }
  return s;
}

void Model::save_to(ad::Checkpoint& ckpt, bool with_optimizer) const {
  ckpt.meta["model"] = to_json(config_);
  ckpt.meta["fingerprint"] = fingerprint(config_);
  ad::store_to_checkpoint(store_, ckpt, with_optimizer);
}

void Model::load_from(const ad::Checkpoint& ckpt, bool with_optimizer) {
  if (ckpt.meta.value("fingerprint", std::string()) != fingerprint(config_)) {
    throw Error("CheckpointMismatch", "checkpoint was written for a different model architecture");
  }
  ad::store_from_checkpoint(store_, ckpt, with_optimizer);
}

Model model_from_checkpoint(const ad::Checkpoint& ckpt, bool with_optimizer) {
  if (!ckpt.meta.contains("model")) throw Error("CheckpointMismatch", "checkpoint has no model config");
  const auto config = model_config_from_json(ckpt.meta.at("model"));
  if (ckpt.meta.value("fingerprint", std::string()) != fingerprint(config)) {
    throw Error("CheckpointMismatch", "checkpoint fingerprint does not match its config");
  }
  Model model(config);
  model.load_from(ckpt, with_optimizer);
  return model;
}

void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra_meta) {
  ad::Checkpoint ckpt;
  if (extra_meta.is_object()) ckpt.meta = extra_meta;
  model.save_to(ckpt, false);
  ad::save_checkpoint(path, ckpt);
}

Model load_model(const std::filesystem::path& path) {
  const auto ckpt = ad::load_checkpoint(path);
  return model_from_checkpoint(ckpt, ckpt.contains("adam_m/enc.pitch_drum"));
}

}  // namespace poly
