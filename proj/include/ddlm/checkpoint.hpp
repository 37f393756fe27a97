#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "model.hpp"

namespace ddlm {

// Optimizer state carried in a checkpoint so training can resume exactly.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<float> second_moment;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct Checkpoint {
  DenoiserParams params;
  std::optional<OptimizerState> optimizer;
};

// Layout (all little-endian):
//   "DDLMCKPT" | u32 version | u32 flags | i32 x7 config | u32 time_embed
//   | u64 param_count | f32 x param_count
//   [flags & 1: u64 step | u64 n | f32 x n second moments]
inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <class U>
  void le(U v) {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    auto bits = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U le() {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    need(sizeof(U));
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<U>(bits);
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint truncated");
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const DenoiserParams& p,
                                                      const std::optional<OptimizerState>& opt = std::nullopt) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(opt ? 1u : 0u);
  const ModelConfig& c = p.config;
  for (std::int32_t v : {c.layers, c.model_dim, c.heads, c.ff_dim, c.vocab_size, c.max_len, c.mask_id}) {
    w.le<std::int32_t>(v);
  }
  w.le<std::uint32_t>(0);  // sinusoidal
  w.le<std::uint64_t>(p.values.size());
  for (float v : p.values) w.le<float>(v);
  if (opt) {
    w.le<std::uint64_t>(opt->step);
    w.le<std::uint64_t>(opt->second_moment.size());
    for (float v : opt->second_moment) w.le<float>(v);
  }
  return w.take();
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw CheckpointError("bad checkpoint magic");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto flags = r.le<std::uint32_t>();
  ModelConfig c;
  c.layers = r.le<std::int32_t>();
  c.model_dim = r.le<std::int32_t>();
  c.heads = r.le<std::int32_t>();
  c.ff_dim = r.le<std::int32_t>();
  c.vocab_size = r.le<std::int32_t>();
  c.max_len = r.le<std::int32_t>();
  c.mask_id = r.le<std::int32_t>();
  if (r.le<std::uint32_t>() != 0) throw CheckpointError("unknown time embedding code");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  Checkpoint ck;
  ck.params = DenoiserParams(c);
  const auto count = r.le<std::uint64_t>();
  if (count != ck.params.values.size()) throw CheckpointError("parameter count does not match config");
  for (auto& v : ck.params.values) v = r.le<float>();
  if (flags & 1u) {
    OptimizerState s;
    s.step = r.le<std::uint64_t>();
    const auto n = r.le<std::uint64_t>();
    if (n != count) throw CheckpointError("optimizer state size mismatch");
    s.second_moment.resize(n);
    for (auto& v : s.second_moment) v = r.le<float>();
    ck.optimizer = std::move(s);
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const std::string& path, const DenoiserParams& p,
                            const std::optional<OptimizerState>& opt = std::nullopt) {
  const auto bytes = serialize_checkpoint(p, opt);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace ddlm
