// Bit-exact binary persistence for model bundles.
//
// File layout (all integers little-endian, payloads little-endian IEEE):
//   magic   "MMLF"
//   u32     format version (currently 1)
//   u8      stage tag
//   u64     config hash
//   u32     seed count, then u64 per seed
//   u32     provenance length, then bytes
//   u32     model count, then per model:
//             i32 modality id, u8 encoder kind,
//             i32 input_dim, i32 classes, i32 hidden,
//             i32 tokens, i32 token_width, i32 ff_dim
//   u8      fusion-head flag
//   u32     tensor count, then per tensor:
//             u32 name length + name, u64 rows, u64 cols,
//             u8 dtype (0=f64, 1=f32), u8 frozen flag, payload
//   u32     adapter count, then per adapter:
//             u32 model index, u32 base-name length + name,
//             u32 rank, f64 delta scale,
//             u64 A rows, u64 A cols, f64 payload,
//             u64 B rows, u64 B cols, f64 payload
//
// Saving is deterministic: identical bundles produce identical bytes.
// Files are written to a temp path and renamed into place.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmlora/training.hpp"

namespace mmlora::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

void save(const train::TrainedBundle& bundle, const std::string& path, Dtype dtype = Dtype::f64);
train::TrainedBundle load(const std::string& path);

// Writes a checkpoint with every adapted matrix replaced by its merged
// weight and an empty adapter table. The exported tensors are marked
// unfrozen: the merged file is a plain standalone predictor.
void export_merged(const train::TrainedBundle& bundle, const std::string& path,
                   Dtype dtype = Dtype::f64);

struct TensorInfo {
    std::string name;
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    Dtype dtype = Dtype::f64;
    bool frozen = false;
    std::uint64_t checksum = 0;  // fnv-1a over the payload bytes
};

struct InspectInfo {
    std::uint32_t version = 0;
    std::string stage;
    std::uint64_t config_hash = 0;
    std::vector<std::uint64_t> seeds;
    std::string provenance;
    int model_count = 0;
    bool has_fusion = false;
    std::vector<TensorInfo> tensors;
    int adapter_count = 0;
};

InspectInfo inspect(const std::string& path);
std::string format_inspect(const InspectInfo& info);

}  // namespace mmlora::ckpt
