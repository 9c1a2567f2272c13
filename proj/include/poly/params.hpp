/**
 * @file params.hpp
 * @brief Named trainable parameters, Adam updates and the checkpoint file.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "poly/tensor.hpp"

namespace poly::ad {

/// A trainable tensor with its Adam moment buffers.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
};

/// Insertion-ordered parameters plus named batch-norm buffers.
class ParameterStore {
 public:
  /// Registers a parameter. Throws DuplicateName.
  Tensor add(const std::string& name, Shape shape, std::vector<double> init);
  /// Registers a zero tensor with Glorot-uniform init when `fan_in`/`fan_out` are given.
  Tensor add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
  BatchNormState& add_batchnorm(const std::string& name, std::size_t channels);

  Tensor get(const std::string& name) const;
  BatchNormState& batchnorm(const std::string& name);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<std::pair<std::string, BatchNormState>>& batchnorms() { return bn_; }
  const std::vector<std::pair<std::string, BatchNormState>>& batchnorms() const { return bn_; }

  std::vector<Tensor> tensors() const;
  std::size_t count() const;
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::vector<std::pair<std::string, BatchNormState>> bn_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update; `step` counts from 1.
void adam_update(std::vector<Parameter>& params, double lr, std::int64_t step, const AdamConfig& config = {});

/// Raw named arrays as stored on disk.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// Checkpoint file: "PCKP", u32 version, u64 manifest byte length, UTF-8 JSON
/// manifest {meta, tensors:[{name, shape, offset}]}, then every tensor's
/// values as little-endian 64-bit floats (offsets count doubles).
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& find(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters ("param/<name>"), optional Adam moments ("adam_m/", "adam_v/")
/// and batch-norm statistics ("bn_mean/", "bn_var/").
void store_to_checkpoint(const ParameterStore& store, Checkpoint& ckpt, bool with_optimizer);
/// Copies values into an already-built store. Throws CheckpointMismatch.
void store_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt, bool with_optimizer);

}  // namespace poly::ad
