#pragma once

// Binary checkpoint container.
//
//   "FFKT" | version u32 | config length u32 | config JSON
//   | tensor count u32 | { name length u32 | name | rank u32 | dims u32... | f64 data }...
//
// All integers and floats are little-endian. Optimiser moments are stored as
// tensors named "adam.m/<param>" and "adam.v/<param>".

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fusionformer/model.hpp"
#include "fusionformer/train.hpp"

namespace ff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::size_t epoch = 0;  // next epoch to run
  std::vector<NamedTensor> tensors;  // model parameters in ModelParams::named order
  OptimState optim;                  // empty moments when not saved
};

Checkpoint make_checkpoint(const ModelConfig& model, const TrainConfig& train,
                           const TrainSession& session);
// Rebuilds parameters and optimiser state; throws CheckpointError on a shape
// table that does not match the stored config.
TrainSession restore_session(const Checkpoint& ck);

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ff
