// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout (all integers 32-bit little-endian):
//
//   "TCWD" | version = 1 | json length | json bytes (UTF-8)
//   | array count | per array: name length, name, rank, dims..., float32 LE payload
//
// The JSON block carries the model config, the optimiser step counter and
// hyperparameters, and free-form run provenance. Optimiser moments are stored
// as arrays named "<param>.m" and "<param>.v".

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"
#include "transcrowd/config.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/optim.hpp"

namespace transcrowd {

inline constexpr char kCheckpointMagic[4] = {'T', 'C', 'W', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { Io, BadMagic, BadVersion, Truncated, Malformed, ShapeMismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  Model model;
  AdamState optimizer;
  AdamConfig adam;
  nlohmann::json run;  // provenance, may be null
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void floats(std::span<const float> v) { raw(v.data(), v.size() * sizeof(float)); }
  const std::vector<char>& buffer() const { return buf_; }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& buf) : buf_(buf) {}
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw CheckpointError(CheckpointErrorKind::Truncated,
                            std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string bytes(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* out, std::size_t n, const char* what) {
    need(n * sizeof(float), what);
    std::memcpy(out, buf_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

inline void put_array(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const float> values) {
  w.bytes(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.floats(values);
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Model& model, const AdamState& state, const AdamConfig& adam,
                                           const nlohmann::json& run = nullptr) {
  nlohmann::json header{{"model", model.config},
                        {"step", state.step},
                        {"adam",
                         {{"lr", adam.lr},
                          {"beta1", adam.beta1},
                          {"beta2", adam.beta2},
                          {"eps", adam.eps},
                          {"weight_decay", adam.weight_decay}}},
                        {"run", run}};
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.bytes(header.dump());

  const auto params = model.parameters();
  std::uint32_t count = 0;
  for (const auto& p : params) count += 1 + (state.moments.count(p.name) ? 2 : 0);
  w.u32(count);
  for (const auto& p : params) {
    detail::put_array(w, p.name, p.tensor.shape(), p.tensor.data());
    if (auto it = state.moments.find(p.name); it != state.moments.end()) {
      detail::put_array(w, p.name + ".m", p.tensor.shape(), it->second.m);
      detail::put_array(w, p.name + ".v", p.tensor.shape(), it->second.v);
    }
  }
  return w.buffer();
}

// Writes to a sibling temporary and renames, so a failure leaves no partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamState& state,
                            const AdamConfig& adam, const nlohmann::json& run = nullptr) {
  const auto bytes = encode_checkpoint(model, state, adam, run);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorKind::Io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw CheckpointError(CheckpointErrorKind::Io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError(CheckpointErrorKind::Io, "cannot move checkpoint into " + path.string());
  }
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::BadMagic, "not a checkpoint: bad magic");
  }
  std::vector<char> body(bytes.begin() + 4, bytes.end());
  detail::ByteReader r(body);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ModelConfig config;
  try {
    const auto header = nlohmann::json::parse(r.bytes("config block"));
    config = header.at("model").get<ModelConfig>();
    config.validate();
    ck.optimizer.step = header.at("step").get<std::uint64_t>();
    const auto& a = header.at("adam");
    ck.adam = {a.at("lr").get<float>(), a.at("beta1").get<float>(), a.at("beta2").get<float>(),
               a.at("eps").get<float>(), a.at("weight_decay").get<float>()};
    ck.run = header.value("run", nlohmann::json());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::Malformed, std::string("bad config block: ") + e.what());
  }

  // A freshly initialised model provides the expected names and shapes.
  ck.model = init_model(config, 0);
  std::map<std::string, Tensor> expected;
  for (const auto& p : ck.model.parameters()) expected.emplace(p.name, p.tensor);

  std::set<std::string> seen;
  const std::uint32_t count = r.u32("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes("array name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw CheckpointError(CheckpointErrorKind::Malformed, "array '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("dims"));

    std::string base = name;
    char moment = 0;
    if (!expected.count(name) && name.size() > 2 && name[name.size() - 2] == '.' &&
        (name.back() == 'm' || name.back() == 'v')) {
      base = name.substr(0, name.size() - 2);
      moment = name.back();
    }
    const auto it = expected.find(base);
    if (it == expected.end()) {
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "array '" + name + "' is not part of this model config");
    }
    Tensor target = it->second;
    if (shape != target.shape()) {
      throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "array '" + name + "' has shape " + shape_str(shape) +
                                                                     ", config expects " + shape_str(target.shape()));
    }
    if (!seen.insert(name).second) throw CheckpointError(CheckpointErrorKind::Malformed, "duplicate array '" + name + "'");
    if (!moment) {
      r.floats(target.mutable_data().data(), target.numel(), "array payload");
    } else {
      AdamMoments& m = ck.optimizer.moments[base];
      auto& buf = moment == 'm' ? m.m : m.v;
      buf.resize(target.numel());
      r.floats(buf.data(), buf.size(), "moment payload");
    }
  }
  if (!r.done()) throw CheckpointError(CheckpointErrorKind::Malformed, "trailing bytes after last array");
  for (const auto& [name, t] : expected) {
    if (!seen.count(name)) throw CheckpointError(CheckpointErrorKind::ShapeMismatch, "missing array '" + name + "'");
  }
  for (const auto& [name, m] : ck.optimizer.moments) {
    if (m.m.size() != m.v.size()) throw CheckpointError(CheckpointErrorKind::Malformed, "incomplete moments for '" + name + "'");
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::Io, "cannot open " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

// Loads and checks that the stored architecture matches `expected`.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.model.config == expected)) {
    throw CheckpointError(CheckpointErrorKind::ShapeMismatch,
                          "checkpoint config " + nlohmann::json(ck.model.config).dump() + " does not match " +
                              nlohmann::json(expected).dump());
  }
  return ck;
}

}  // namespace transcrowd
