// Copyright 2026 The nestdecode Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "nestdecode/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

#include "nestdecode/errors.hpp"

namespace nestdecode {

namespace {

using Kind = CheckpointError::Kind;

std::uint32_t crc(const std::uint8_t* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class Writer {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(int v) { u32(static_cast<std::uint32_t>(v)); }
  void i64(long long v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  const std::uint8_t* data() const { return bytes_.data(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(Kind::truncated, "checkpoint truncated at byte " + std::to_string(pos_));
    }
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  int i32() { return static_cast<int>(u32()); }
  long long i64() { return static_cast<long long>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void write_config(Writer& w, const NestedConfig& c) {
  for (int v : {c.num_layers, c.hidden, c.mlp_dim, c.num_heads, c.head_dim, c.vocab_size, c.num_classes,
                c.max_positions}) {
    w.i32(v);
  }
  w.i32(static_cast<int>(c.downscale_factors.size()));
  for (int p : c.downscale_factors) w.i32(p);
}

NestedConfig read_config(Reader& r) {
  NestedConfig c;
  for (int* f : {&c.num_layers, &c.hidden, &c.mlp_dim, &c.num_heads, &c.head_dim, &c.vocab_size, &c.num_classes,
                 &c.max_positions}) {
    *f = r.i32();
  }
  const int n = r.i32();
  if (n < 1 || n > 64) throw CheckpointError(Kind::truncated, "implausible downscale factor count in checkpoint");
  c.downscale_factors.resize(n);
  for (int& p : c.downscale_factors) p = r.i32();
  return c;
}

void write_tensor(Writer& w, const std::string& name, const Tensor32& t) {
  const std::size_t start = w.bytes.size();
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.raw(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (float v : t.data()) w.f32(v);
  w.u32(crc(w.bytes.data() + start, w.bytes.size() - start));
}

void read_tensor(Reader& r, const std::string& name, Tensor32& t) {
  const std::size_t start = r.pos();
  const std::uint32_t len = r.u32();
  const std::string got = r.raw(len);
  if (got != name) throw CheckpointError(Kind::config_mismatch, "expected tensor '" + name + "', found '" + got + "'");
  const std::uint32_t rank = r.u32();
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.u64();
  if (shape != t.shape()) {
    throw CheckpointError(Kind::config_mismatch, "tensor '" + name + "' has shape " + shape_string(shape) +
                                                     ", expected " + shape_string(t.shape()));
  }
  r.need(t.size() * 4 + 4);
  for (float& v : t.data()) v = r.f32();
  const std::uint32_t expected = crc(r.data() + start, r.pos() - start);
  if (r.u32() != expected) throw CheckpointError(Kind::checksum, "checksum mismatch in tensor '" + name + "'");
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const NestedWeights<float>& weights, const CheckpointMeta& meta) {
  Writer w;
  w.raw("NDCK");
  w.u32(kCheckpointVersion);
  write_config(w, weights.config);
  w.i64(meta.step);
  w.i64(meta.total_steps);
  w.u8(meta.optimizer ? 1 : 0);
  w.i64(meta.optimizer ? meta.optimizer->step : 0);
  w.u32(crc(w.bytes.data(), w.bytes.size()));

  std::vector<std::pair<std::string, const Tensor32*>> tensors;
  weights.for_each([&](const std::string& name, const Tensor32& t) { tensors.emplace_back(name, &t); });
  if (meta.optimizer) {
    meta.optimizer->m.for_each([&](const std::string& name, const Tensor32& t) { tensors.emplace_back("adam.m." + name, &t); });
    meta.optimizer->v.for_each([&](const std::string& name, const Tensor32& t) { tensors.emplace_back("adam.v." + name, &t); });
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) write_tensor(w, name, *t);
  return std::move(w.bytes);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::optional<NestedConfig>& expected) {
  Reader r(bytes);
  if (bytes.size() < 8) throw CheckpointError(Kind::truncated, "checkpoint shorter than its header");
  if (r.raw(4) != "NDCK") throw CheckpointError(Kind::bad_magic, "not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version, "unsupported checkpoint version " + std::to_string(version) +
                                             " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  const NestedConfig config = read_config(r);
  CheckpointMeta meta;
  meta.step = r.i64();
  meta.total_steps = r.i64();
  const bool has_optimizer = r.u8() != 0;
  const long long optimizer_step = r.i64();
  const std::uint32_t header_crc = crc(r.data(), r.pos());
  if (r.u32() != header_crc) throw CheckpointError(Kind::checksum, "checkpoint header checksum mismatch");
  if (expected && !(*expected == config)) {
    throw CheckpointError(Kind::config_mismatch, "checkpoint model config does not match the requested config");
  }
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::config_mismatch, std::string("checkpoint holds an invalid config: ") + e.what());
  }

  Checkpoint out{NestedWeights<float>::zeros(config), {}};
  out.meta = std::move(meta);
  std::vector<std::pair<std::string, Tensor32*>> tensors;
  out.weights.for_each([&](const std::string& name, Tensor32& t) { tensors.emplace_back(name, &t); });
  if (has_optimizer) {
    out.meta.optimizer = AdamState<float>::zeros(config);
    out.meta.optimizer->step = optimizer_step;
    out.meta.optimizer->m.for_each([&](const std::string& name, Tensor32& t) { tensors.emplace_back("adam.m." + name, &t); });
    out.meta.optimizer->v.for_each([&](const std::string& name, Tensor32& t) { tensors.emplace_back("adam.v." + name, &t); });
  }
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) {
    throw CheckpointError(Kind::config_mismatch, "checkpoint holds " + std::to_string(count) + " tensors, expected " +
                                                     std::to_string(tensors.size()));
  }
  for (auto& [name, t] : tensors) read_tensor(r, name, *t);
  if (!r.at_end()) throw CheckpointError(Kind::truncated, "trailing bytes after the last tensor");
  return out;
}

void save_checkpoint(const std::string& path, const NestedWeights<float>& weights, const CheckpointMeta& meta) {
  const auto bytes = serialize_checkpoint(weights, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(Kind::io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(Kind::io, "failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path, const std::optional<NestedConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::io, "cannot open checkpoint '" + path + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint(bytes, expected);
}

void load_checkpoint_into(const std::string& path, NestedWeights<float>& weights, CheckpointMeta* meta) {
  Checkpoint loaded = load_checkpoint(path, weights.config);
  weights = std::move(loaded.weights);
  if (meta != nullptr) *meta = std::move(loaded.meta);
}

}  // namespace nestdecode
