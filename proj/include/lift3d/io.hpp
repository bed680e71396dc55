#pragma once

#include "lift3d/nn/optim.hpp"
#include "lift3d/records.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lift3d::io {

namespace fs = std::filesystem;

inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr int kCheckpointVersion = 1;
inline constexpr char kBlobMagic[8] = {'L', '3', 'D', 'B', 'L', 'O', 'B', '1'};
inline constexpr char kCheckpointMagic[8] = {'L', '3', 'D', 'C', 'K', 'P', 'T', '1'};

std::uint32_t crc32(const std::vector<unsigned char>& bytes);

/// Blob: 8-byte magic, u64 little-endian payload length, payload of
/// little-endian float32 values.
std::vector<unsigned char> encode_blob(const std::vector<float>& values);
/// Throws FormatError naming `record` on bad magic or length mismatch.
std::vector<float> decode_blob(const std::vector<unsigned char>& bytes, const std::string& record);

std::vector<unsigned char> read_file(const fs::path& path);

/// Writes through a sibling temp path then renames over `path`.
void write_file_atomic(const fs::path& path, const std::vector<unsigned char>& bytes);

/// Writes one split directory: manifest.json plus record_NNNNNN.bin blobs.
/// The directory appears atomically.
void write_episodes(const std::vector<EpisodeRecord>& records, const fs::path& dir);
std::vector<EpisodeRecord> read_episodes(const fs::path& dir);

/// Same layout; also writes attention_NNNNNN.pgm beside each blob.
void write_pretrain(const std::vector<PretrainRecord>& records, const fs::path& dir);
std::vector<PretrainRecord> read_pretrain(const fs::path& dir);

nlohmann::json read_manifest(const fs::path& dir);

struct NamedArray {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
  bool operator==(const NamedArray&) const = default;
};

/// Versioned container: magic, u32 version, u64 header length, UTF-8 JSON
/// header (stage, config, tensor table, payload CRC32), then float32 arrays
/// in table order.
struct Checkpoint {
  std::string stage;
  nlohmann::json config;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);
void write_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint read_checkpoint(const fs::path& path);

void append_params(Checkpoint& ckpt, const nn::ParamList& params);
void append_matrix(Checkpoint& ckpt, const std::string& name, const nn::Matrix& m);

/// Copies arrays into matching parameters. Throws CheckpointMismatchError on a
/// missing name or shape disagreement.
void load_params(const Checkpoint& ckpt, nn::ParamList& params);
nn::Matrix load_matrix(const Checkpoint& ckpt, const std::string& name);

}  // namespace lift3d::io
