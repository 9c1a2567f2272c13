/**
 * @file params.cpp
 * @brief Parameter registry, Adam and checkpoint encoding.
 */

#include "poly/params.hpp"

#include <cmath>

#include "poly/bytes.hpp"
#include "poly/error.hpp"
#include "poly/pianoroll.hpp"

namespace poly::ad {

Tensor ParameterStore::add(const std::string& name, Shape shape, std::vector<double> init) {
  for (const auto& p : params_) {
    if (p.name == name) throw Error("DuplicateName", "parameter '" + name + "' already registered");
  }
  Tensor t(std::move(shape), std::move(init), true);
  params_.push_back(Parameter{name, t, std::vector<double>(t.size(), 0.0), std::vector<double>(t.size(), 0.0)});
  return t;
}

Tensor ParameterStore::add_glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out,
                                  std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> init(numel(shape));
  for (auto& v : init) v = dist(rng);
  return add(name, std::move(shape), std::move(init));
}

BatchNormState& ParameterStore::add_batchnorm(const std::string& name, std::size_t channels) {
  for (const auto& [n, s] : bn_) {
    if (n == name) throw Error("DuplicateName", "batchnorm '" + name + "' already registered");
  }
  bn_.emplace_back(name, BatchNormState(channels));
  return bn_.back().second;
}

Tensor ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw Error("UnknownName", "no parameter named '" + name + "'");
}

BatchNormState& ParameterStore::batchnorm(const std::string& name) {
  for (auto& [n, s] : bn_) {
    if (n == name) return s;
  }
  throw Error("UnknownName", "no batchnorm named '" + name + "'");
}

std::vector<Tensor> ParameterStore::tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::size_t ParameterStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    p.value.mutable_grad();
    p.value.zero_grad();
  }
}

void adam_update(std::vector<Parameter>& params, double lr, std::int64_t step, const AdamConfig& config) {
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (auto& p : params) {
    auto grad = p.value.grad();
    if (grad.empty()) continue;
    auto values = p.value.mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      p.first_moment[k] = config.beta1 * p.first_moment[k] + (1.0 - config.beta1) * grad[k];
      p.second_moment[k] = config.beta2 * p.second_moment[k] + (1.0 - config.beta2) * grad[k] * grad[k];
      const double m_hat = p.first_moment[k] / c1;
      const double v_hat = p.second_moment[k] / c2;
      values[k] -= lr * m_hat / (std::sqrt(v_hat) + config.eps);
    }
  }
}

const NamedArray& Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw Error("CheckpointMismatch", "checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (numel(a.shape) != a.values.size()) throw Error("ShapeMismatch", "array '" + a.name + "' size/shape mismatch");
    tensors.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.values.size();
  }
  const std::string manifest = nlohmann::json{{"meta", ckpt.meta}, {"tensors", tensors}}.dump();
  ByteWriter w;
  w.tag("PCKP");
  w.u32(1);
  w.u64(manifest.size());
  w.tag(manifest);
  for (const auto& a : ckpt.arrays) {
    for (double v : a.values) w.f64(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "BadCheckpoint");
  r.expect_tag("PCKP");
  if (r.u32() != 1) throw Error("BadCheckpoint", "unsupported checkpoint version");
  const auto manifest_len = r.u64();
  if (manifest_len > r.remaining()) throw Error("BadCheckpoint", "manifest length exceeds file");
  const std::string text(reinterpret_cast<const char*>(r.current()), manifest_len);
  r.skip(manifest_len);
  Checkpoint ckpt;
  try {
    const auto manifest = nlohmann::json::parse(text);
    ckpt.meta = manifest.at("meta");
    const std::size_t data_start = r.position();
    for (const auto& t : manifest.at("tensors")) {
      NamedArray a;
      a.name = t.at("name").get<std::string>();
      a.shape = t.at("shape").get<Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto n = numel(a.shape);
      if (data_start + (offset + n) * 8 > bytes.size()) throw Error("BadCheckpoint", "tensor data truncated");
      ByteReader data(bytes.data() + data_start + offset * 8, n * 8, "BadCheckpoint");
      a.values.resize(n);
      for (auto& v : a.values) v = data.f64();
      ckpt.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("BadCheckpoint", std::string("bad manifest: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

void store_to_checkpoint(const ParameterStore& store, Checkpoint& ckpt, bool with_optimizer) {
  for (const auto& p : store.parameters()) {
    const auto vals = p.value.values();
    ckpt.arrays.push_back({"param/" + p.name, p.value.shape(), {vals.begin(), vals.end()}});
    if (with_optimizer) {
      ckpt.arrays.push_back({"adam_m/" + p.name, p.value.shape(), p.first_moment});
      ckpt.arrays.push_back({"adam_v/" + p.name, p.value.shape(), p.second_moment});
    }
  }
  for (const auto& [name, s] : store.batchnorms()) {
    ckpt.arrays.push_back({"bn_mean/" + name, {s.running_mean.size()}, s.running_mean});
    ckpt.arrays.push_back({"bn_var/" + name, {s.running_var.size()}, s.running_var});
  }
}

void store_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt, bool with_optimizer) {
  auto copy_into = [&](const std::string& key, const Shape& shape, std::span<double> dst) {
    const auto& a = ckpt.find(key);
    if (a.shape != shape) {
      throw Error("CheckpointMismatch", key + " has shape " + shape_str(a.shape) + ", expected " + shape_str(shape));
    }
    std::copy(a.values.begin(), a.values.end(), dst.begin());
  };
  for (auto& p : store.parameters()) {
    copy_into("param/" + p.name, p.value.shape(), p.value.mutable_values());
    if (with_optimizer) {
      copy_into("adam_m/" + p.name, p.value.shape(), p.first_moment);
      copy_into("adam_v/" + p.name, p.value.shape(), p.second_moment);
    }
  }
  for (auto& [name, s] : store.batchnorms()) {
    copy_into("bn_mean/" + name, {s.running_mean.size()}, s.running_mean);
    copy_into("bn_var/" + name, {s.running_var.size()}, s.running_var);
  }
}

}  // namespace poly::ad
