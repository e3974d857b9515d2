#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ufid/model.hpp"

namespace ufid {

// Container layout (all integers little-endian):
//   "UFID" | u16 version | u32 record count
//   per record: u16 name length | name | u8 dtype | u8 rank | u32 dims[rank] | values
// The last record is the manifest, a UTF-8 JSON document stored as bytes.
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::string_view kManifestRecord = "__manifest__";

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2, kBytes = 3 };

DType parse_dtype(const std::string& name);
std::string to_string(DType dtype);
std::size_t dtype_size(DType dtype);

enum class CheckpointKind { kGlobalEncoder, kClient };

struct CheckpointManifest {
  CheckpointKind kind = CheckpointKind::kClient;
  int client_id = -1;
  std::vector<std::string> shared;
  std::vector<std::string> local;
  std::vector<std::string> buffers;
  EncoderClassifierConfig model;
};

struct Checkpoint {
  ParameterList tensors;  // parameters then buffers, in manifest order
  CheckpointManifest manifest;
};

Checkpoint client_checkpoint(const EncoderClassifier& model, int client_id);
Checkpoint global_checkpoint(const ParameterList& shared, const EncoderClassifierConfig& reference);

// Rebuilds the model described by a client checkpoint, including batchnorm
// running statistics.
EncoderClassifier restore_model(const Checkpoint& ckpt);

std::string encode_checkpoint(const Checkpoint& ckpt, DType dtype = DType::kF64);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt,
                     DType dtype = DType::kF64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Bytes of an encoded checkpoint that are not trainable-parameter values
// (framing, manifest and batchnorm buffers).
std::size_t checkpoint_overhead(std::string_view bytes);

}  // namespace ufid
