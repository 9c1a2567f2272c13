/**
 * @file generate.cpp
 * @brief Generation modes and embedding projections.
 */

#include "poly/generate.hpp"

#include <fstream>
#include <random>

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include "poly/error.hpp"

namespace poly {

std::vector<double> random_latent(int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> z(static_cast<std::size_t>(d));
  for (auto& v : z) v = normal(rng);
  return z;
}

namespace {

int pick(std::span<const double> probs, bool sample, std::mt19937_64& rng) {
  if (sample) {
    std::discrete_distribution<int> dist(probs.begin(), probs.end());
    return dist(rng);
  }
  return static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

Generation render(std::vector<double> z, Decoded decoded, const GenerationOptions& options) {
  Generation g;
  g.z = std::move(z);
  g.decoded = std::move(decoded);
  g.graph = select_tokens(g.decoded.content, options);
  g.roll = graph_to_pianoroll(g.graph);
  g.silent = g.graph.nodes.empty();
  return g;
}

}  // namespace

ChordGraph select_tokens(const ContentProbs& probs, const GenerationOptions& options) {
  ChordGraph g = probs.topology;
  const std::size_t sigma = static_cast<std::size_t>(g.sigma);
  std::mt19937_64 rng(options.token_seed);
  const std::span<const double> pitch(probs.pitch), duration(probs.duration);
  for (std::size_t v = 0; v < g.nodes.size(); ++v) {
    auto& slots = g.nodes[v].slots;
    slots.resize(sigma);
    for (std::size_t j = 0; j < sigma; ++j) {
      const std::size_t row = v * sigma + j;
      slots[j].pitch = pick(pitch.subspan(row * kPitchVocab, kPitchVocab), options.sample_tokens, rng);
      slots[j].duration = pick(duration.subspan(row * kDurationVocab, kDurationVocab), options.sample_tokens, rng);
    }
  }
  return g;
}

Generation generate(const Model& model, std::span<const double> z, const GenerationOptions& options) {
  return render({z.begin(), z.end()}, model.decode(z, options.threshold), options);
}

std::vector<Generation> sample(const Model& model, int n, std::uint64_t seed, const GenerationOptions& options) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Generation> out;
  for (int i = 0; i < n; ++i) {
    std::vector<double> z(static_cast<std::size_t>(model.config().d));
    for (auto& v : z) v = normal(rng);
    out.push_back(generate(model, z, options));
  }
  return out;
}

std::vector<Generation> interpolate(const Model& model, std::span<const double> z_a, std::span<const double> z_b,
                                    int steps, const GenerationOptions& options) {
  if (steps < 2) throw Error("InvalidArgument", "interpolation needs at least 2 steps");
  if (z_a.size() != z_b.size()) throw Error("ShapeMismatch", "latent endpoints differ in width");
  std::vector<Generation> out;
  for (int k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
    std::vector<double> z(z_a.size());
    // (1 - t) a + t b is exact at both endpoints.
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = (1.0 - t) * z_a[j] + t * z_b[j];
    out.push_back(generate(model, z, options));
  }
  return out;
}

Generation conditioned_generate(const Model& model, std::span<const double> z, const StructureTensor& structure,
                                const GenerationOptions& options) {
  const auto [z_s, z_c] = model.split_latent(z);
  Decoded decoded;
  decoded.structure = structure;
  decoded.content = model.decode_content(z_c, structure);
  auto g = render({z.begin(), z.end()}, std::move(decoded), options);
  if (g.silent) spdlog::warn("conditioning structure has no active cells; returning silence");
  return g;
}

EmbeddingProjection embedding_pca(const Eigen::MatrixXd& rows, int k, std::vector<std::string> labels) {
  if (k < 1) throw Error("InvalidArgument", "k must be >= 1");
  if (rows.rows() < k + 1) throw Error("InvalidArgument", "PCA needs at least k + 1 rows");
  if (rows.cols() < 1) throw Error("InvalidArgument", "PCA needs at least one column");
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != rows.rows()) {
    throw Error("InvalidArgument", "label count differs from row count");
  }
  const Eigen::MatrixXd centered = rows.rowwise() - rows.colwise().mean();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(rows.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw Error("NumericalError", "eigendecomposition failed");
  const Eigen::VectorXd values = solver.eigenvalues();  // ascending
  const Eigen::Index dims = values.size();
  const double largest = std::max(values(dims - 1), 0.0);
  const double total = std::max(cov.trace(), 0.0);
  const double tol = 1e-12 * std::max(largest, 1e-300);
  int rank = 0;
  for (Eigen::Index i = 0; i < dims; ++i) rank += values(i) > tol ? 1 : 0;

  EmbeddingProjection out;
  const int kept = std::min(k, rank);
  out.degenerate = rank < k;
  out.components.resize(rows.cols(), kept);
  for (int c = 0; c < kept; ++c) {
    Eigen::VectorXd axis = solver.eigenvectors().col(dims - 1 - c);
    Eigen::Index at = 0;
    axis.cwiseAbs().maxCoeff(&at);
    if (axis(at) < 0) axis = -axis;
    out.components.col(c) = axis;
    out.explained.push_back(total > 0 ? values(dims - 1 - c) / total : 0.0);
  }
  out.coordinates = centered * out.components;
  out.labels = std::move(labels);
  if (out.labels.empty()) {
    for (Eigen::Index r = 0; r < rows.rows(); ++r) out.labels.push_back(std::to_string(r));
  }
  return out;
}

std::string pitch_name(int pitch) {
  static const char* names[12] = {"C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};
  return std::string(names[pitch % 12]) + std::to_string(pitch / 12 - 1);
}

EmbeddingKind embedding_kind_from_string(const std::string& name) {
  if (name == "pitch") return EmbeddingKind::kPitch;
  if (name == "drum_pitch") return EmbeddingKind::kDrumPitch;
  if (name == "duration") return EmbeddingKind::kDuration;
  if (name == "chord") return EmbeddingKind::kChord;
  throw Error("InvalidArgument", "unknown embedding '" + name + "' (pitch, drum_pitch, duration, chord)");
}

std::pair<Eigen::MatrixXd, std::vector<std::string>> embedding_rows(const Model& model, EmbeddingKind kind) {
  ad::NoGradGuard guard;
  auto table_rows = [&](const char* name, int count, auto label) {
    const auto t = model.params().get(name);
    const Eigen::Index cols = static_cast<Eigen::Index>(t.dim(1));
    Eigen::MatrixXd m(count, cols);
    std::vector<std::string> labels;
    for (int r = 0; r < count; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = t[static_cast<std::size_t>(r * cols + c)];
      labels.push_back(label(r));
    }
    return std::make_pair(m, labels);
  };
  switch (kind) {
    case EmbeddingKind::kPitch:
      return table_rows("enc.pitch", kNumPitches, [](int r) { return pitch_name(r); });
    case EmbeddingKind::kDrumPitch:
      return table_rows("enc.pitch_drum", kNumPitches, [](int r) { return std::to_string(r); });
    case EmbeddingKind::kDuration:
      return table_rows("enc.duration", kMaxDuration, [](int r) { return std::to_string(r + 1); });
    case EmbeddingKind::kChord:
      break;
  }
  const auto& cfg = model.config();
  if (cfg.sigma < 4) throw Error("InvalidArgument", "chord embeddings need sigma >= 4");
  constexpr int kLowRoot = 24;   // C1
  constexpr int kHighRoot = 119;  // B8
  const int beat = duration_token(kStepsPerBar / 4);
  std::vector<ChordGraph> graphs;
  std::vector<std::string> labels;
  for (int root = kLowRoot; root <= kHighRoot; ++root) {
    ChordGraph g;
    g.n_bars = cfg.n_bars;
    g.sigma = cfg.sigma;
    GraphNode node{0, static_cast<int>(Track::kGuitarPiano), 0, {}};
    node.slots.assign(static_cast<std::size_t>(cfg.sigma), NoteToken{});
    node.slots[0] = {root, beat};
    node.slots[1] = {root + 4, beat};
    node.slots[2] = {root + 7, beat};
    node.slots[3] = {kEosPitch, kEosDuration};
    g.nodes.push_back(std::move(node));
    graphs.push_back(std::move(g));
    labels.push_back(pitch_name(root));
  }
  const auto h = model.chord_encoding(make_batch(graphs));
  const Eigen::Index cols = cfg.d;
  Eigen::MatrixXd m(static_cast<Eigen::Index>(graphs.size()), cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = h[static_cast<std::size_t>(r * cols + c)];
  return {m, labels};
}

void write_pca_csv(const std::filesystem::path& path, const EmbeddingProjection& projection) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "label";
  for (Eigen::Index c = 0; c < projection.coordinates.cols(); ++c) out << ",c" << (c + 1);
  out << '\n';
  out.precision(17);
  for (Eigen::Index r = 0; r < projection.coordinates.rows(); ++r) {
    out << projection.labels[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < projection.coordinates.cols(); ++c) out << ',' << projection.coordinates(r, c);
    out << '\n';
  }
}

}  // namespace poly
