#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "s2c/series_graph.hpp"

namespace s2c {

// Everything needed to resume or inspect a run.
template <RealScalar Scalar>
struct TrainingSnapshot {
  SeriesNetwork<Scalar> net;
  TensorMap<Scalar> ema_shadows;
  TensorMap<Scalar> velocities;
  std::uint64_t step = 0;
  std::string rng_state;
  nlohmann::json metadata = nlohmann::json::object();  // normalization stats, config echo, run info
};

// File layout (all integers little-endian):
//   "S2C1" | u8 version | u8 precision bytes (4|8) | u16 reserved
//   u64 header length | header (UTF-8 JSON topology + counters + metadata)
//   u64 tensor count  | per tensor: u32 key length, key, u32 rank, rank x u64 extents,
//                                   u64 blob offset, u64 blob bytes
//   u64 blob section length | blobs (IEEE-754 little-endian)
inline constexpr char checkpoint_magic[4] = {'S', '2', 'C', '1'};
inline constexpr std::uint8_t checkpoint_version = 1;

template <RealScalar Scalar>
void save_checkpoint(const std::filesystem::path& path, const TrainingSnapshot<Scalar>& snapshot);

// Throws CheckpointError with a distinct kind per failure; nothing is returned
// unless the whole file parsed and validated.
template <RealScalar Scalar>
TrainingSnapshot<Scalar> load_checkpoint(const std::filesystem::path& path);

Precision peek_checkpoint_precision(const std::filesystem::path& path);

// Human-readable topology (nodes, layers, kernel geometry, stage tags).
template <RealScalar Scalar>
nlohmann::json topology_json(const SeriesNetwork<Scalar>& net);

}  // namespace s2c
