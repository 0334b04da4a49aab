#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fusedesc/binary_io.hpp"
#include "fusedesc/errors.hpp"
#include "fusedesc/tensor.hpp"

namespace fusedesc {

inline constexpr double kAdagradEpsilon = 1e-10;

// Learnable parameters plus non-trainable buffers (batch-norm running
// statistics). Buffers are persisted with the checkpoint but skipped by the
// optimizer and by parameter counting.
template <class T>
class ParameterStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> gradient;
    Tensor<T> accumulator;
    bool trainable = true;
  };

  Entry& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (entries_.count(name)) throw ConfigError("duplicate parameter " + name);
    Entry e;
    e.gradient = Tensor<T>(value.shape());
    e.accumulator = Tensor<T>(value.shape());
    e.value = std::move(value);
    e.trainable = trainable;
    return entries_.emplace(name, std::move(e)).first->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }

  Tensor<T>& value(const std::string& name) { return at(name).value; }
  const Tensor<T>& value(const std::string& name) const { return at(name).value; }
  Tensor<T>& gradient(const std::string& name) { return at(name).gradient; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) {
      if (e.trainable) n += e.value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.gradient.fill(T{0});
  }

  // Values only; gradients and accumulators restart from zero.
  ParameterStore snapshot_values() const {
    ParameterStore copy;
    for (const auto& [name, e] : entries_) copy.add(name, e.value, e.trainable);
    return copy;
  }

  void assign_values(const ParameterStore& other) {
    for (auto& [name, e] : entries_) {
      const auto& src = other.at(name).value;
      if (src.shape() != e.value.shape()) {
        throw ConfigError("shape mismatch for parameter " + name);
      }
      e.value = src;
    }
  }

 private:
  std::map<std::string, Entry> entries_;
};

// accumulator += g^2; value -= lr * g / (sqrt(accumulator) + eps)
template <class T>
void adagrad_step(ParameterStore<T>& store, double learning_rate,
                  double epsilon = kAdagradEpsilon) {
  for (auto& [_, e] : store) {
    if (!e.trainable) continue;
    auto v = e.value.data();
    auto g = e.gradient.data();
    auto a = e.accumulator.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double acc = static_cast<double>(a[i]) + gi * gi;
      a[i] = static_cast<T>(acc);
      v[i] = static_cast<T>(static_cast<double>(v[i]) -
                            learning_rate * gi / (std::sqrt(acc) + epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// PFCK checkpoint: "PFCK", version byte, then per entry: name length (u32),
// name bytes, rank (u32), dims (u32 each), values (f32 each). Little-endian.

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline bool is_buffer_name(const std::string& name) {
  return name.find(".running_") != std::string::npos;
}

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore<T>& store) {
  io::ByteWriter w;
  w.magic("PFCK");
  w.u8(kCheckpointVersion);
  for (const auto& [name, e] : store) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T v : e.value.data()) w.f32(static_cast<float>(v));
  }
  return w.bytes();
}

template <class T>
ParameterStore<T> decode_checkpoint(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  r.expect_magic("PFCK");
  const auto version_at = r.offset();
  if (r.u8("version") != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version", version_at);
  }
  ParameterStore<T> store;
  if (r.at_end()) throw FormatError("checkpoint holds no parameters", r.offset());
  while (!r.at_end()) {
    const auto record_at = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    std::string name(name_len, '\0');
    r.raw(name.data(), name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("bad tensor rank", record_at);
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      const auto dim_at = r.offset();
      d = r.u32("dimension");
      if (d == 0) throw FormatError("zero tensor dimension", dim_at);
      count *= d;
    }
    r.need(count * 4, "tensor values");
    std::vector<T> values(count);
    for (auto& v : values) v = static_cast<T>(r.f32());
    if (store.contains(name)) throw FormatError("duplicate entry " + name, record_at);
    store.add(name, Tensor<T>(std::move(shape), std::move(values)),
              !is_buffer_name(name));
  }
  return store;
}

template <class T>
void save_checkpoint(const ParameterStore<T>& store,
                     const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(store));
}

template <class T>
ParameterStore<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(io::read_file(path));
}

}  // namespace fusedesc
