/**
 * @file generate.hpp
 * @brief Sampling, latent interpolation, structure-conditioned generation and
 *        embedding PCA.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "poly/model.hpp"

namespace poly {

struct GenerationOptions {
  double threshold = 0.5;
  /// Draw tokens from the per-slot distributions instead of taking the argmax.
  bool sample_tokens = false;
  std::uint64_t token_seed = 0;
};

struct Generation {
  std::vector<double> z;
  Decoded decoded;
  ChordGraph graph;  ///< decoded topology with selected tokens
  Pianoroll roll{1};
  /// True when the structure had no active cell.
  bool silent = false;
};

/// z ~ N(0, I) from a seeded generator.
std::vector<double> random_latent(int d, std::uint64_t seed);

/// Fills the slots of `probs.topology` with argmax (or sampled) tokens.
ChordGraph select_tokens(const ContentProbs& probs, const GenerationOptions& options = {});

/// Full decode of one latent and rendering to a pianoroll.
Generation generate(const Model& model, std::span<const double> z, const GenerationOptions& options = {});

/// n sequences from consecutive normal draws of one seeded generator.
std::vector<Generation> sample(const Model& model, int n, std::uint64_t seed, const GenerationOptions& options = {});

/// Decodes z_k = (1 - t_k) z_a + t_k z_b, t_k = k / (steps - 1). Throws
/// InvalidArgument when steps < 2.
std::vector<Generation> interpolate(const Model& model, std::span<const double> z_a, std::span<const double> z_b,
                                    int steps, const GenerationOptions& options = {});

/// Decodes content from z's content half against `structure`, skipping the
/// structure decoder. An all-zero structure yields a silent result.
Generation conditioned_generate(const Model& model, std::span<const double> z, const StructureTensor& structure,
                                const GenerationOptions& options = {});

struct EmbeddingProjection {
  std::vector<std::string> labels;
  Eigen::MatrixXd coordinates;   ///< rows x k
  Eigen::MatrixXd components;    ///< columns are unit principal axes
  std::vector<double> explained;  ///< variance ratio per component
  /// Set when the data has fewer than k nonzero-variance directions.
  bool degenerate = false;
};

/// Centered PCA via a symmetric eigensolver. Each axis is signed so that its
/// largest-magnitude entry is positive. Throws InvalidArgument.
EmbeddingProjection embedding_pca(const Eigen::MatrixXd& rows, int k, std::vector<std::string> labels = {});

enum class EmbeddingKind { kPitch, kDrumPitch, kDuration, kChord };

/// Rows of an embedding table with labels. kChord encodes major triads with
/// roots C1..B8, one-beat durations, through the chord encoder.
std::pair<Eigen::MatrixXd, std::vector<std::string>> embedding_rows(const Model& model, EmbeddingKind kind);

/// Throws InvalidArgument for unknown names (pitch, drum_pitch, duration, chord).
EmbeddingKind embedding_kind_from_string(const std::string& name);

/// label,c1..ck rows.
void write_pca_csv(const std::filesystem::path& path, const EmbeddingProjection& projection);

/// Scientific pitch name, e.g. 60 -> "C4".
std::string pitch_name(int pitch);

}  // namespace poly
