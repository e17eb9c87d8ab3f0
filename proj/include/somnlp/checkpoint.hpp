#pragma once

// Checkpoint files: 8-byte magic "SOMNLPCK", little-endian u64 header
// length, JSON header (config, tensor manifest, vocab fingerprint, meta),
// then every tensor as little-endian float32 in manifest order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "somnlp/encoder.hpp"
#include "somnlp/error.hpp"

namespace somnlp::model {

struct TrainingMeta {
  std::uint64_t steps = 0;
  double final_loss = 0;
  std::uint64_t seed = 0;

  bool operator==(const TrainingMeta&) const = default;
};

struct EncoderCheckpoint {
  ModelConfig config;
  EncoderParams<float> params;
  std::string vocab_fingerprint;
  TrainingMeta meta;

  bool operator==(const EncoderCheckpoint&) const = default;
};

inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'M', 'N', 'L', 'P', 'C', 'K'};

namespace io {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

using NamedTensors = std::vector<std::pair<std::string, const Mat<float>*>>;

/// Serializes header + tensors; the manifest ("tensors") is added here.
inline std::string encode(nlohmann::ordered_json header, const NamedTensors& tensors) {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::size_t floats = 0;
  for (const auto& [name, m] : tensors) {
    manifest.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}});
    floats += static_cast<std::size_t>(m->size());
  }
  header["tensors"] = std::move(manifest);
  header["blob_bytes"] = floats * 4;
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  put_u64(out, h.size());
  out += h;
  out.reserve(out.size() + floats * 4);
  for (const auto& [_, m] : tensors)
    for (Eigen::Index i = 0; i < m->size(); ++i) put_f32(out, m->data()[i]);
  return out;
}

struct Decoded {
  nlohmann::json header;
  std::vector<std::pair<std::string, Mat<float>>> tensors;
};

inline Decoded decode(const std::string& data) {
  if (data.size() < 16 || std::memcmp(data.data(), kCheckpointMagic, 8) != 0)
    throw FormatError("checkpoint", "not a checkpoint file (bad magic)");
  const auto hlen = get_u64(data.data() + 8);
  if (hlen > data.size() - 16) throw FormatError("checkpoint", "header length exceeds file size");
  Decoded d;
  try {
    d.header = nlohmann::json::parse(data.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint", std::string("malformed header: ") + e.what());
  }
  struct Entry {
    std::string name;
    Eigen::Index rows, cols;
  };
  std::vector<Entry> manifest;
  std::size_t expected = 0;
  try {
    for (const auto& t : d.header.at("tensors")) {
      const auto shape = t.at("shape").get<std::vector<std::int64_t>>();
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0 || shape[0] > (1LL << 31) || shape[1] > (1LL << 31))
        throw FormatError("checkpoint", "bad tensor shape");
      manifest.push_back({t.at("name").get<std::string>(), shape[0], shape[1]});
      expected += static_cast<std::size_t>(shape[0] * shape[1]) * 4;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint", std::string("malformed tensor manifest: ") + e.what());
  }
  const std::size_t blob = data.size() - 16 - hlen;
  if (blob != expected)
    throw FormatError("checkpoint", "tensor blob has " + std::to_string(blob) + " bytes, manifest requires " +
                                        std::to_string(expected));
  const char* p = data.data() + 16 + hlen;
  for (auto& e : manifest) {
    Mat<float> m(e.rows, e.cols);
    for (Eigen::Index i = 0; i < m.size(); ++i, p += 4) m.data()[i] = get_f32(p);
    d.tensors.emplace_back(std::move(e.name), std::move(m));
  }
  return d;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint", "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("checkpoint", "write failure on " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint", "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Moves decoded tensors into `params` (already shaped from the config),
/// consuming them from the front of `tensors` in manifest order.
inline std::size_t fill_params(EncoderParams<float>& params, const Decoded& d, std::size_t offset = 0) {
  auto named = named_tensors(params);
  if (d.tensors.size() < offset + named.size()) throw FormatError("checkpoint", "manifest lists too few tensors");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, m] = d.tensors[offset + i];
    auto& [want, dst] = named[i];
    if (name != want) throw FormatError("checkpoint", "manifest entry " + name + " where " + want + " expected");
    if (m.rows() != dst->rows() || m.cols() != dst->cols())
      throw FormatError("checkpoint", "tensor " + name + " has a shape inconsistent with the config");
    *dst = m;
  }
  return offset + named.size();
}

inline nlohmann::ordered_json meta_json(const TrainingMeta& m) {
  return {{"steps", m.steps}, {"final_loss", m.final_loss}, {"seed", m.seed}};
}

inline TrainingMeta meta_from_json(const nlohmann::json& j) {
  return {j.at("steps").get<std::uint64_t>(), j.at("final_loss").get<double>(), j.at("seed").get<std::uint64_t>()};
}

inline void check_fingerprint(const std::string& stored, const std::optional<std::string>& expected) {
  if (expected && *expected != stored)
    throw FingerprintMismatch("checkpoint", "vocabulary fingerprint mismatch: checkpoint was trained with " + stored +
                                                ", supplied vocabulary is " + *expected);
}

}  // namespace io

inline nlohmann::ordered_json checkpoint_header(const EncoderCheckpoint& c) {
  nlohmann::ordered_json h;
  h["format"] = "somnlp-checkpoint";
  h["version"] = 1;
  h["config"] = to_json(c.config);
  h["vocab_fingerprint"] = c.vocab_fingerprint;
  h["meta"] = io::meta_json(c.meta);
  return h;
}

inline io::NamedTensors checkpoint_tensors(const EncoderCheckpoint& c) {
  io::NamedTensors t;
  for (auto& [name, m] : named_tensors(c.params)) t.emplace_back(name, m);
  return t;
}

inline void save_checkpoint(const EncoderCheckpoint& c, const std::filesystem::path& path) {
  io::write_file(path, io::encode(checkpoint_header(c), checkpoint_tensors(c)));
}

/// Parses the encoder part of a decoded file. Returns the index of the first
/// tensor after the encoder's.
inline std::size_t checkpoint_from_decoded(const io::Decoded& d, EncoderCheckpoint& c) {
  try {
    c.config = config_from_json(d.header.at("config"));
    c.config.validate();
    c.vocab_fingerprint = d.header.at("vocab_fingerprint").get<std::string>();
    c.meta = io::meta_from_json(d.header.at("meta"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint", std::string("incomplete header: ") + e.what());
  }
  c.params = EncoderParams<float>::zeros(c.config);
  return io::fill_params(c.params, d);
}

/// Loads a checkpoint; refuses when `expected_fingerprint` is given and differs.
inline EncoderCheckpoint load_checkpoint(const std::filesystem::path& path,
                                         const std::optional<std::string>& expected_fingerprint = std::nullopt) {
  const auto d = io::decode(io::read_file(path));
  EncoderCheckpoint c;
  const auto used = checkpoint_from_decoded(d, c);
  if (used != d.tensors.size()) throw FormatError("checkpoint", "unexpected extra tensors in encoder checkpoint");
  io::check_fingerprint(c.vocab_fingerprint, expected_fingerprint);
  return c;
}

}  // namespace somnlp::model
