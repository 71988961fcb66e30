#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "UMLB"                 4 bytes magic
//   version                u32, currently 1
//   header_len             u64
//   header                 header_len bytes of UTF-8 JSON
//   payload                raw float64 tensors, in header "tensors" order
//
// The header holds both configs, the vocabulary, the group names, the step
// counters, the seed the random streams derive from, and the tensor
// directory {name, shape, offset} with offsets relative to the payload start.
// Parameters come first, followed by the Adam moments ("adam.m.*",
// "adam.v.*").

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "cuimlm/errors.hpp"
#include "cuimlm/model.hpp"
#include "cuimlm/training.hpp"

namespace cuimlm {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, Malformed };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'U', 'M', 'L', 'B'};

namespace detail {

template <typename UInt>
void write_le(std::ostream& out, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename UInt>
UInt read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(UInt)))
    throw CheckpointError(CheckpointError::Kind::Truncated, std::string("checkpoint truncated in ") + what);
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
  return {{"hidden_dim", m.hidden_dim},   {"layer_count", m.layer_count},       {"head_count", m.head_count},
          {"ff_dim", m.ff_dim},           {"max_seq_len", m.max_seq_len},       {"vocab_size", m.vocab_size},
          {"group_count", m.group_count}, {"augment_inputs", m.augment_inputs}, {"layer_norm_eps", m.layer_norm_eps}};
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  m.layer_count = j.at("layer_count").get<std::size_t>();
  m.head_count = j.at("head_count").get<std::size_t>();
  m.ff_dim = j.at("ff_dim").get<std::size_t>();
  m.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  m.vocab_size = j.at("vocab_size").get<std::size_t>();
  m.group_count = j.at("group_count").get<std::size_t>();
  m.augment_inputs = j.at("augment_inputs").get<bool>();
  m.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return m;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"loss_mode", to_string(t.loss_mode)},
          {"mask_rate", t.mask_rate},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"total_steps", t.total_steps},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"classic_masking", t.classic_masking},
          {"init_std", t.init_std}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.loss_mode = parse_loss_mode(j.at("loss_mode").get<std::string>());
  t.mask_rate = j.at("mask_rate").get<double>();
  t.learning_rate = j.at("learning_rate").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.total_steps = j.at("total_steps").get<std::size_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.checkpoint_every = j.at("checkpoint_every").get<std::size_t>();
  t.classic_masking = j.at("classic_masking").get<bool>();
  t.init_std = j.at("init_std").get<double>();
  return t;
}

template <typename T>
struct NamedTensor {
  std::string name;
  T* tensor;
};

/// Parameters then Adam moments, in file order.
template <typename CK>
auto directory(CK& ck) {
  using T = std::conditional_t<std::is_const_v<CK>, const Tensor, Tensor>;
  std::vector<NamedTensor<T>> out;
  ck.params.for_each([&](const std::string& name, T& t, ParamKind) { out.push_back({name, &t}); });
  const std::vector<std::string> names = ck.params.names();
  for (std::size_t i = 0; i < ck.optimizer.m.size(); ++i) out.push_back({"adam.m." + names.at(i), &ck.optimizer.m[i]});
  for (std::size_t i = 0; i < ck.optimizer.v.size(); ++i) out.push_back({"adam.v." + names.at(i), &ck.optimizer.v[i]});
  return out;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, std::ostream& out) {
  const auto dir = detail::directory(ck);

  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : dir) {
    tensors.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset}});
    offset += nt.tensor->size() * sizeof(double);
  }
  nlohmann::json header = {
      {"model", detail::model_to_json(ck.model)},
      {"train", detail::train_to_json(ck.train)},
      {"step", ck.step},
      {"optimizer_step", ck.optimizer.step},
      {"rng", {{"root_seed", ck.train.seed}, {"streams", {"init", "mask", "shuffle"}}}},
      {"vocab", ck.vocab_words},
      {"groups", ck.group_names},
      {"tensors", tensors},
      {"payload_bytes", offset},
  };
  const std::string text = header.dump();

  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_le<std::uint32_t>(out, Checkpoint::kVersion);
  detail::write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& nt : dir)
    for (double v : nt.tensor->values()) detail::write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw IoError("failed writing checkpoint");
}

inline Checkpoint load_checkpoint(std::istream& in) {
  using Kind = CheckpointError::Kind;
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kCheckpointMagic)
    throw CheckpointError(Kind::BadMagic, "not a checkpoint: bad magic bytes");
  const auto version = detail::read_le<std::uint32_t>(in, "version");
  if (version != Checkpoint::kVersion)
    throw CheckpointError(Kind::VersionMismatch, "unsupported checkpoint version " + std::to_string(version));
  const auto header_len = detail::read_le<std::uint64_t>(in, "header length");
  if (header_len > (std::uint64_t{1} << 32)) throw CheckpointError(Kind::Malformed, "implausible header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len)))
    throw CheckpointError(Kind::Truncated, "checkpoint truncated in header");

  Checkpoint ck;
  nlohmann::json tensors;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.model = detail::model_from_json(header.at("model"));
    ck.train = detail::train_from_json(header.at("train"));
    ck.step = header.at("step").get<std::uint64_t>();
    ck.optimizer.step = header.at("optimizer_step").get<std::uint64_t>();
    ck.vocab_words = header.at("vocab").get<std::vector<std::string>>();
    ck.group_names = header.at("groups").get<std::vector<std::string>>();
    tensors = header.at("tensors");
    ck.model.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::Malformed, std::string("bad checkpoint header: ") + e.what());
  } catch (const DataError& e) {
    throw CheckpointError(Kind::Malformed, std::string("bad checkpoint header: ") + e.what());
  }
  if (ck.vocab_words.size() + kReservedCount != ck.model.vocab_size || ck.group_names.size() != ck.model.group_count)
    throw CheckpointError(Kind::Malformed, "vocabulary or group list does not match the model config");

  ck.params = shape_params(ck.model);
  ck.optimizer = [&] {
    OptimizerState s = OptimizerState::zeros_like(ck.params);
    s.step = ck.optimizer.step;
    return s;
  }();
  const auto dir = detail::directory(ck);
  if (!tensors.is_array() || tensors.size() != dir.size())
    throw CheckpointError(Kind::Malformed, "tensor directory does not match the model config");
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    const auto& entry = tensors[i];
    try {
      if (entry.at("name").get<std::string>() != dir[i].name ||
          entry.at("shape").get<Shape>() != dir[i].tensor->shape() || entry.at("offset").get<std::uint64_t>() != offset)
        throw CheckpointError(Kind::Malformed, "tensor directory entry " + std::to_string(i) + " (" + dir[i].name +
                                                   ") does not match the model config");
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(Kind::Malformed, std::string("bad tensor directory: ") + e.what());
    }
    offset += dir[i].tensor->size() * sizeof(double);
  }
  for (const auto& nt : dir) {
    for (double& v : nt.tensor->values()) {
      try {
        v = std::bit_cast<double>(detail::read_le<std::uint64_t>(in, "tensor payload"));
      } catch (const CheckpointError&) {
        throw CheckpointError(Kind::Truncated, "checkpoint truncated in tensor " + nt.name);
      }
    }
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw CheckpointError(Kind::Malformed, "trailing bytes after checkpoint payload");
  return ck;
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  save_checkpoint(ck, out);
  return out.str();
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return load_checkpoint(in);
}

inline void save_checkpoint_file(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  save_checkpoint(ck, out);
  out.flush();
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace cuimlm
