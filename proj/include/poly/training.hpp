/**
 * @file training.hpp
 * @brief Beta-VAE objective, schedules, dataset split and the training loop.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "poly/model.hpp"

namespace poly {

struct TrainingConfig {
  double beta_max = 0.01;
  std::int64_t beta_warmup = 40000;
  double beta_increment = 0.001;
  std::int64_t beta_interval = 40000;
  double lr0 = 1e-4;
  std::int64_t decay_start = 8000;
  /// Per-update multiplicative decay is (1 - decay_rate).
  double decay_rate = 5e-6;
  int batch_size = 256;
  ad::AdamConfig adam;
  std::int64_t max_updates = 100000;
  std::uint64_t seed = 1;
  /// Excludes PAD targets from the content loss when set.
  bool mask_pad = false;
  /// 0 disables periodic checkpoints / validation.
  std::int64_t checkpoint_every = 0;
  std::int64_t validate_every = 0;

  /// lr0 = 1e-4 and batch 256 for 2 bars; 5e-5 and batch 32 otherwise.
  static TrainingConfig for_bars(int n_bars);
  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& c);
/// Missing keys keep the values already in `base`. Throws InvalidConfig.
TrainingConfig training_config_from_json(const nlohmann::json& doc, TrainingConfig base = {});

/// 0 before the warmup, then +increment every interval, capped at beta_max.
double beta_at(const TrainingConfig& c, std::int64_t step);
/// lr0 up to decay_start, then lr0 * (1 - decay_rate)^(step - decay_start).
double lr_at(const TrainingConfig& c, std::int64_t step);

/// Probability clamp used inside logs.
inline constexpr double kProbEps = 1e-7;

/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
double kl_divergence(std::span<const double> mu, std::span<const double> logvar);
/// -sum[S log p + (1 - S) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
double structure_nll(std::span<const double> target, std::span<const double> probs);
/// -sum over slots of log p[target] for pitch and duration rows; rows whose
/// pitch target is PAD are skipped when `mask_pad`. Throws ShapeMismatch.
double content_nll(std::span<const int> pitch, std::span<const int> duration, std::span<const double> pitch_probs,
                   std::span<const double> duration_probs, bool mask_pad = false);

struct LossBreakdown {
  double total = 0;
  double structure_nll = 0;
  double pitch_nll = 0;
  double duration_nll = 0;
  double kl = 0;
  double beta = 0;
};

/// Differentiable batch loss; every term is a mean over batch items.
struct LossTerms {
  ad::Tensor total;
  ad::Tensor structure_nll;
  ad::Tensor pitch_nll;
  ad::Tensor duration_nll;
  ad::Tensor kl;
  LossBreakdown values(double beta) const;
};

/// Loss on a batch with teacher forcing; `noise` drives the reparameterization.
LossTerms batch_loss(const Model& model, const GraphBatch& batch, double beta, std::mt19937_64& noise, bool training,
                     bool mask_pad = false);

struct DatasetSplit {
  std::vector<ChordGraph> train;
  std::vector<ChordGraph> validation;
  std::vector<ChordGraph> test;
};

/// Seeded shuffle, then 70/10/20 by sequence. Throws EmptyDataset.
DatasetSplit split_dataset(std::vector<ChordGraph> graphs, std::uint64_t seed);

struct HistoryRow {
  std::int64_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows);
std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path);

/**
 * @brief Stateless-schedule trainer.
 *
 * Batch composition and reparameterization noise of update k depend only on
 * (seed, k), so a run resumed from a checkpoint continues bit-identically.
 */
class Trainer {
 public:
  /// Throws EmptyDataset.
  Trainer(Model& model, TrainingConfig config, std::vector<ChordGraph> train,
          std::vector<ChordGraph> validation = {});

  /// Runs one update and returns its loss (computed before the update).
  HistoryRow step();
  /// Runs until `max_updates`, calling `on_step` after each update.
  void run(const std::function<void(const HistoryRow&)>& on_step = {});

  /// Eval-mode loss averaged over the validation set, or nullopt if empty.
  std::optional<LossBreakdown> validation_loss() const;

  std::int64_t updates_done() const { return step_; }
  const std::vector<HistoryRow>& history() const { return history_; }
  const TrainingConfig& config() const { return config_; }

  /// Item indices of update `step`.
  std::vector<int> batch_indices(std::int64_t step) const;

  /// Parameters, Adam moments, batch-norm statistics, step and configs.
  void save(const std::filesystem::path& path) const;
  /// Restores state written by save(); the model must match the checkpoint.
  void resume(const std::filesystem::path& path);

 private:
  Model& model_;
  TrainingConfig config_;
  std::vector<ChordGraph> train_;
  std::vector<ChordGraph> validation_;
  std::int64_t step_ = 0;
  std::vector<HistoryRow> history_;
};

}  // namespace poly
