/**
 * @file model.hpp
 * @brief Graph VAE: content and structure encoders, latent heads, structure
 *        and content decoders, and the relational GCN they share.
 *
 * Batches are disjoint unions of chord graphs. Row vectors are used
 * throughout, so every linear map is x W + b with W shaped [in, out].
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "poly/graph.hpp"
#include "poly/params.hpp"
#include "poly/tensor.hpp"

namespace poly {

struct ModelConfig {
  int n_bars = 2;
  int sigma = 16;
  int d = 512;
  int gnn_layers = 8;
  /// Bypassing batch normalization in the GCN is meant for tests only.
  bool gcn_batchnorm = true;
  /// Generated structures with more active cells per bar are flagged (never pruned).
  int structure_cap_per_bar = kNumTracks * kStepsPerBar;
  std::uint64_t init_seed = 1;

  /// Throws InvalidConfig.
  void validate() const;
  /// 2-bar: d=512, L=8, sigma=16. 16-bar keeps the same widths.
  static ModelConfig for_bars(int n_bars);

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys keep their defaults. Throws InvalidConfig.
ModelConfig model_config_from_json(const nlohmann::json& doc);
/// Stable hex digest of the architecture-defining fields.
std::string fingerprint(const ModelConfig& c);

/// Tensorized disjoint union of graphs sharing n_bars and sigma.
struct GraphBatch {
  int n_items = 0;
  int n_bars = 0;
  int sigma = 0;
  bool has_content = false;

  std::vector<int> node_bar;  ///< item * n_bars + bar
  std::vector<int> node_track;
  std::vector<double> inv_degree;  ///< 1 / in-degree, 0 for isolated nodes

  /// Slot rows (node * sigma + slot) split by pitch table.
  std::vector<int> drum_rows;
  std::vector<int> other_rows;
  std::vector<int> pitch;     ///< per slot row
  std::vector<int> duration;  ///< per slot row

  /// Edge lists grouped by type.
  struct EdgeGroup {
    std::vector<int> src;
    std::vector<int> dst;
    std::vector<int> bin;
    std::vector<double> weight;  ///< inv_degree of dst
  };
  std::vector<EdgeGroup> edges = std::vector<EdgeGroup>(kNumEdgeTypes);

  /// n_items * n_bars * 4 * 32 activations.
  std::vector<double> structure;

  std::size_t n_nodes() const { return node_bar.size(); }
};

/// Throws ConfigMismatch when graphs disagree on n_bars or sigma.
GraphBatch make_batch(std::span<const ChordGraph> graphs);

/// Per-slot class probabilities for a decoded topology.
struct ContentProbs {
  ChordGraph topology;         ///< nodes without slots
  std::vector<double> pitch;     ///< |V| x sigma x 131
  std::vector<double> duration;  ///< |V| x sigma x 99
};

struct LatentCode {
  std::vector<double> mu;
  std::vector<double> logvar;
  std::vector<double> z;
};

struct Decoded {
  std::vector<double> structure_probs;  ///< n_bars x 4 x 32
  StructureTensor structure;
  ContentProbs content;
  bool over_cap = false;
};

/// Training-graph outputs of one forward pass.
struct ForwardPass {
  ad::Tensor mu;                 ///< [B, d]
  ad::Tensor logvar;             ///< [B, d]
  ad::Tensor z;                  ///< [B, d]
  ad::Tensor structure_logits;   ///< [B, n_bars * 128]
  ad::Tensor pitch_logits;       ///< [V * sigma, 131]
  ad::Tensor duration_logits;    ///< [V * sigma, 99]
};

/**
 * @brief Parameters plus the differentiable submodules.
 *
 * Batch-norm running statistics change only when a method is called with
 * training = true. Inference through the const methods is thread-safe.
 */
class Model {
 public:
  explicit Model(ModelConfig config);
  // Copies would share parameter storage.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ad::ParameterStore& params() { return store_; }
  const ad::ParameterStore& params() const { return store_; }

  // --- differentiable pieces (batch level) -------------------------------
  /// h^0 from the chord encoder, [V, d].
  ad::Tensor chord_encoding(const GraphBatch& batch) const;
  /// One relational GCN layer of the encoder ("enc") or decoder ("dec").
  ad::Tensor gcn_layer(const ad::Tensor& h, const GraphBatch& batch, const std::string& stack, int layer,
                       bool training) const;
  /// Readout per bar before the compressor, [B * n_bars, d]; empty bars are zero.
  ad::Tensor content_bar_embeddings(const GraphBatch& batch, bool training) const;
  ad::Tensor encode_content(const GraphBatch& batch, bool training) const;
  ad::Tensor encode_structure(const ad::Tensor& structure, bool training) const;
  /// (mu, logvar) from both encoders.
  std::pair<ad::Tensor, ad::Tensor> latent_heads(const GraphBatch& batch, bool training) const;
  /// (z_S, z_C).
  std::pair<ad::Tensor, ad::Tensor> split(const ad::Tensor& z) const;
  ad::Tensor structure_logits(const ad::Tensor& z_s, bool training) const;
  /// Pitch and duration logits on the batch topology (teacher forcing).
  std::pair<ad::Tensor, ad::Tensor> content_logits(const ad::Tensor& z_c, const GraphBatch& topology,
                                                   bool training) const;

  /// Encoder, reparameterization with the given noise, and both decoders.
  ForwardPass forward(const GraphBatch& batch, std::mt19937_64& noise, bool training) const;

  // --- inference (single sequence, eval mode, no tape) ---------------------
  /// z = mu unless `sample`, in which case z = mu + exp(logvar / 2) * eps.
  LatentCode encode(const ChordGraph& graph, bool sample = false, std::uint64_t seed = 0) const;
  std::pair<std::vector<double>, std::vector<double>> split_latent(std::span<const double> z) const;
  std::vector<double> decode_structure(std::span<const double> z_s) const;
  /// Empty structures give an empty topology and empty probabilities.
  ContentProbs decode_content(std::span<const double> z_c, const StructureTensor& s) const;
  Decoded decode(std::span<const double> z, double threshold = 0.5) const;

  // --- persistence ----------------------------------------------------------
  /// Adds parameters, batch-norm statistics and the config to `ckpt`.
  void save_to(ad::Checkpoint& ckpt, bool with_optimizer) const;
  void load_from(const ad::Checkpoint& ckpt, bool with_optimizer);

 private:
  void build();
  ad::Tensor linear(const std::string& name, const ad::Tensor& x) const;
  ad::Tensor bn(const std::string& name, const ad::Tensor& x, bool training) const;
  ad::Tensor gcn_stack(ad::Tensor h, const GraphBatch& batch, const std::string& stack, bool training) const;

  ModelConfig config_;
  /// Mutable so eval-mode forwards can share the batch-norm helpers; only
  /// training-mode calls write the running statistics.
  mutable ad::ParameterStore store_;
};

/// S = [probs >= threshold].
StructureTensor binarize(std::span<const double> probs, int n_bars, double threshold = 0.5);

/// Model checkpoint: parameters, batch-norm statistics, config and fingerprint.
void save_model(const std::filesystem::path& path, const Model& model, const nlohmann::json& extra_meta = {});
/// Rebuilds the model from the stored config. Throws CheckpointMismatch on a
/// fingerprint mismatch.
Model load_model(const std::filesystem::path& path);
Model model_from_checkpoint(const ad::Checkpoint& ckpt, bool with_optimizer);

}  // namespace poly
