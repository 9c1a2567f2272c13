/**
 * @file training.cpp
 * @brief Loss terms, schedules, dataset split, history CSV and the trainer.
 */

#include "poly/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "poly/error.hpp"

namespace poly {

using ad::Tensor;

TrainingConfig TrainingConfig::for_bars(int n_bars) {
  TrainingConfig c;
  if (n_bars == 2) {
    c.lr0 = 1e-4;
    c.batch_size = 256;
  } else {
    c.lr0 = 5e-5;
    c.batch_size = 32;
  }
  return c;
}

void TrainingConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error("InvalidConfig", msg); };
  if (beta_max < 0 || beta_increment < 0) fail("beta values must be >= 0");
  if (beta_warmup < 0 || beta_interval < 1) fail("beta warmup must be >= 0 and interval >= 1");
  if (lr0 <= 0) fail("lr0 must be > 0");
  if (decay_start < 0 || decay_rate < 0 || decay_rate >= 1) fail("decay_rate must lie in [0, 1)");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_updates < 0) fail("max_updates must be >= 0");
}

nlohmann::json to_json(const TrainingConfig& c) {
  return {{"beta_max", c.beta_max},
          {"beta_warmup", c.beta_warmup},
          {"beta_increment", c.beta_increment},
          {"beta_interval", c.beta_interval},
          {"lr0", c.lr0},
          {"decay_start", c.decay_start},
          {"decay_rate", c.decay_rate},
          {"batch_size", c.batch_size},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"max_updates", c.max_updates},
          {"seed", c.seed},
          {"mask_pad", c.mask_pad},
          {"checkpoint_every", c.checkpoint_every},
          {"validate_every", c.validate_every}};
}

TrainingConfig training_config_from_json(const nlohmann::json& doc, TrainingConfig c) {
  try {
    if (!doc.is_object()) throw Error("InvalidConfig", "training config must be an object");
    c.beta_max = doc.value("beta_max", c.beta_max);
    c.beta_warmup = doc.value("beta_warmup", c.beta_warmup);
    c.beta_increment = doc.value("beta_increment", c.beta_increment);
    c.beta_interval = doc.value("beta_interval", c.beta_interval);
    c.lr0 = doc.value("lr0", c.lr0);
    c.decay_start = doc.value("decay_start", c.decay_start);
    c.decay_rate = doc.value("decay_rate", c.decay_rate);
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.adam.beta1 = doc.value("adam_beta1", c.adam.beta1);
    c.adam.beta2 = doc.value("adam_beta2", c.adam.beta2);
    c.adam.eps = doc.value("adam_eps", c.adam.eps);
    c.max_updates = doc.value("max_updates", c.max_updates);
    c.seed = doc.value("seed", c.seed);
    c.mask_pad = doc.value("mask_pad", c.mask_pad);
    c.checkpoint_every = doc.value("checkpoint_every", c.checkpoint_every);
    c.validate_every = doc.value("validate_every", c.validate_every);
  } catch (const nlohmann::json::exception& e) {
    throw Error("InvalidConfig", std::string("bad training config: ") + e.what());
  }
  c.validate();
  return c;
}

double beta_at(const TrainingConfig& c, std::int64_t step) {
  if (step < c.beta_warmup) return 0.0;
  const auto stages = static_cast<double>((step - c.beta_warmup) / c.beta_interval + 1);
  return std::min(c.beta_max, c.beta_increment * stages);
}

double lr_at(const TrainingConfig& c, std::int64_t step) {
  if (step <= c.decay_start) return c.lr0;
  // log1p keeps (1 - rate)^n accurate where pow of the rounded factor drifts.
  return c.lr0 * std::exp(static_cast<double>(step - c.decay_start) * std::log1p(-c.decay_rate));
}

double kl_divergence(std::span<const double> mu, std::span<const double> logvar) {
  if (mu.size() != logvar.size()) throw Error("ShapeMismatch", "mu and logvar differ in length");
  double kl = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) kl += mu[j] * mu[j] + std::exp(logvar[j]) - 1.0 - logvar[j];
  return 0.5 * kl;
}

double structure_nll(std::span<const double> target, std::span<const double> probs) {
  if (target.size() != probs.size()) throw Error("ShapeMismatch", "structure target and probabilities differ");
  double nll = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    const double p = std::clamp(probs[k], kProbEps, 1.0 - kProbEps);
    nll -= target[k] * std::log(p) + (1.0 - target[k]) * std::log(1.0 - p);
  }
  return nll;
}

double content_nll(std::span<const int> pitch, std::span<const int> duration, std::span<const double> pitch_probs,
                   std::span<const double> duration_probs, bool mask_pad) {
  const std::size_t rows = pitch.size();
  if (duration.size() != rows || pitch_probs.size() != rows * kPitchVocab ||
      duration_probs.size() != rows * kDurationVocab) {
    throw Error("ShapeMismatch", "content targets and probabilities differ in shape");
  }
  double nll = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask_pad && pitch[r] == kPadPitch) continue;
    nll -= std::log(std::clamp(pitch_probs[r * kPitchVocab + pitch[r]], kProbEps, 1.0 - kProbEps));
    nll -= std::log(std::clamp(duration_probs[r * kDurationVocab + duration[r]], kProbEps, 1.0 - kProbEps));
  }
  return nll;
}

LossBreakdown LossTerms::values(double beta) const {
  return {total.item(), structure_nll.item(), pitch_nll.item(), duration_nll.item(), kl.item(), beta};
}

LossTerms batch_loss(const Model& model, const GraphBatch& batch, double beta, std::mt19937_64& noise, bool training,
                     bool mask_pad) {
  if (batch.n_items == 0) throw Error("EmptyDataset", "empty batch");
  if (!batch.has_content && batch.n_nodes() > 0) throw Error("ConfigMismatch", "training batch lacks content");
  const auto fp = model.forward(batch, noise, training);
  const double inv_b = 1.0 / batch.n_items;
  LossTerms out;
  out.structure_nll = ad::scale(ad::bce_with_logits_sum(fp.structure_logits, batch.structure), inv_b);
  if (batch.n_nodes() > 0) {
    std::vector<double> weights;
    if (mask_pad) {
      weights.resize(batch.pitch.size());
      for (std::size_t r = 0; r < weights.size(); ++r) weights[r] = batch.pitch[r] == kPadPitch ? 0.0 : 1.0;
    }
    out.pitch_nll = ad::scale(ad::cross_entropy_sum(fp.pitch_logits, batch.pitch, weights), inv_b);
    out.duration_nll = ad::scale(ad::cross_entropy_sum(fp.duration_logits, batch.duration, weights), inv_b);
  } else {
    out.pitch_nll = Tensor::scalar(0.0);
    out.duration_nll = Tensor::scalar(0.0);
  }
  const double count = static_cast<double>(fp.mu.size());
  const Tensor kl_sum = ad::add_scalar(
      ad::sub(ad::add(ad::sum(ad::square(fp.mu)), ad::sum(ad::exp(fp.logvar))), ad::sum(fp.logvar)), -count);
  out.kl = ad::scale(kl_sum, 0.5 * inv_b);
  out.total = ad::add(ad::add(out.structure_nll, out.pitch_nll), out.duration_nll);
  if (beta != 0.0) out.total = ad::add(out.total, ad::scale(out.kl, beta));
  return out;
}

DatasetSplit split_dataset(std::vector<ChordGraph> graphs, std::uint64_t seed) {
  if (graphs.empty()) throw Error("EmptyDataset", "no sequences to split");
  std::mt19937_64 rng(seed);
  std::shuffle(graphs.begin(), graphs.end(), rng);
  const std::size_t n = graphs.size();
  const std::size_t n_val = n * 10 / 100;
  const std::size_t n_test = n * 20 / 100;
  DatasetSplit s;
  const auto train_end = graphs.begin() + static_cast<std::ptrdiff_t>(n - n_val - n_test);
  const auto val_end = train_end + static_cast<std::ptrdiff_t>(n_val);
  s.train.assign(std::make_move_iterator(graphs.begin()), std::make_move_iterator(train_end));
  s.validation.assign(std::make_move_iterator(train_end), std::make_move_iterator(val_end));
  s.test.assign(std::make_move_iterator(val_end), std::make_move_iterator(graphs.end()));
  return s;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << "step,lr,beta,total,structure_nll,pitch_nll,duration_nll,kl\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.lr << ',' << r.loss.beta << ',' << r.loss.total << ',' << r.loss.structure_nll << ','
        << r.loss.pitch_nll << ',' << r.loss.duration_nll << ',' << r.loss.kl << '\n';
  }
}

std::vector<HistoryRow> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    HistoryRow r;
    if (!(fields >> r.step >> r.lr >> r.loss.beta >> r.loss.total >> r.loss.structure_nll >> r.loss.pitch_nll >>
          r.loss.duration_nll >> r.loss.kl)) {
      throw Error("BadHistory", "malformed history line: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

}  // namespace

Trainer::Trainer(Model& model, TrainingConfig config, std::vector<ChordGraph> train,
                 std::vector<ChordGraph> validation)
    : model_(model), config_(config), train_(std::move(train)), validation_(std::move(validation)) {
  config_.validate();
  if (train_.empty()) throw Error("EmptyDataset", "training set is empty");
}

std::vector<int> Trainer::batch_indices(std::int64_t step) const {
  const auto n = static_cast<std::int64_t>(train_.size());
  const std::int64_t bs = std::min<std::int64_t>(config_.batch_size, n);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(bs));
  std::int64_t cached_epoch = -1;
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (std::int64_t j = 0; j < bs; ++j) {
    const std::int64_t k = step * bs + j;
    const std::int64_t epoch = k / n;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      auto rng = stream(config_.seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<std::size_t>(k % n)]);
  }
  return out;
}

HistoryRow Trainer::step() {
  std::vector<ChordGraph> items;
  for (int i : batch_indices(step_)) items.push_back(train_[i]);
  const auto batch = make_batch(items);
  const double beta = beta_at(config_, step_);
  const double lr = lr_at(config_, step_);
  auto noise = stream(config_.seed, kNoiseStream, static_cast<std::uint64_t>(step_));
  model_.params().zero_grad();
  const auto terms = batch_loss(model_, batch, beta, noise, true, config_.mask_pad);
  terms.total.backward();
  ad::adam_update(model_.params().parameters(), lr, step_ + 1, config_.adam);
  HistoryRow row{step_, lr, terms.values(beta)};
  history_.push_back(row);
  ++step_;
  return row;
}

void Trainer::run(const std::function<void(const HistoryRow&)>& on_step) {
  while (step_ < config_.max_updates) {
    const auto row = step();
    if (on_step) on_step(row);
  }
}

std::optional<LossBreakdown> Trainer::validation_loss() const {
  if (validation_.empty()) return std::nullopt;
  ad::NoGradGuard guard;
  LossBreakdown sum;
  const double beta = beta_at(config_, step_);
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  std::mt19937_64 unused(0);
  for (std::size_t start = 0; start < validation_.size(); start += bs) {
    const std::size_t len = std::min(bs, validation_.size() - start);
    const auto batch = make_batch(std::span<const ChordGraph>(validation_.data() + start, len));
    const auto v = batch_loss(model_, batch, beta, unused, false, config_.mask_pad).values(beta);
    const double w = static_cast<double>(len);
    sum.total += w * v.total;
    sum.structure_nll += w * v.structure_nll;
    sum.pitch_nll += w * v.pitch_nll;
    sum.duration_nll += w * v.duration_nll;
    sum.kl += w * v.kl;
  }
  const double n = static_cast<double>(validation_.size());
  return LossBreakdown{sum.total / n, sum.structure_nll / n, sum.pitch_nll / n, sum.duration_nll / n, sum.kl / n,
                       beta};
}

void Trainer::save(const std::filesystem::path& path) const {
  ad::Checkpoint ckpt;
  ckpt.meta["training"] = to_json(config_);
  ckpt.meta["step"] = step_;
  model_.save_to(ckpt, true);
  ad::save_checkpoint(path, ckpt);
}

void Trainer::resume(const std::filesystem::path& path) {
  const auto ckpt = ad::load_checkpoint(path);
  model_.load_from(ckpt, true);
  step_ = ckpt.meta.value("step", std::int64_t{0});
  spdlog::info("resumed at update {}", step_);
}

}  // namespace poly
