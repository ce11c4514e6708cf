#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddlab/dataset.hpp"
#include "ddlab/optim.hpp"
#include "ddlab/tensor.hpp"

namespace ddlab {

// TSR1 tensor record, little-endian:
//   "TSR1" | u8 dtype (0 = f32) | u8 rank | 6 reserved zero bytes
//   | rank x u32 dims | row-major f32 payload
inline constexpr std::size_t kMaxTensorRank = 8;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Decodes one record starting at `offset` and advances it past the record.
Tensor decode_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// CKP1 checkpoint: "CKP1" | u32 entry count | per entry: u16 name length,
// UTF-8 name, embedded TSR1 record.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Loads into an existing model; names, order and shapes must match exactly
/// (CheckpointMismatchError otherwise).
void load_checkpoint_into(const std::filesystem::path& path, ModelParams& params);

// Binary 8-bit PGM (P5), mapped to [0, 1] by division with maxval.
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Manifest: headered CSV "path,label,split".
struct ManifestRow {
    std::string path;
    int label = 0;
    Split split = Split::train;
};

void write_manifest(const std::filesystem::path& path, std::span<const ManifestRow> rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// Persists a dataset as `manifest.csv` plus one TSR1 file per sample under `samples/`.
void save_dataset_dir(const std::filesystem::path& dir, const Dataset& ds);
/// Loads a manifest directory. Samples may be `.tsr` (C x H x W) or `.pgm`;
/// anything not `image_size` square is bilinearly resized.
Dataset load_dataset_dir(const std::filesystem::path& dir, std::int64_t image_size);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace ddlab
