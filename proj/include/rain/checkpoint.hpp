#pragma once

#include <stdexcept>
#include <string>

#include "rain/config.hpp"
#include "rain/model.hpp"
#include "rain/optim.hpp"

namespace rain {

/// Loading a checkpoint into an incompatible model configuration.
class CheckpointMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout: "RAINCKPT" magic, u32 format version, u64 header length, JSON header
// (model config, metadata, array index), then the float64 arrays in index
// order, little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  RainModel model;
  Json metadata;
  long step = 0;
  bool has_optimizer = false;
  Adam generator;
  Adam discriminator;
};

void save_checkpoint(const std::string& path, const RainModel& model, long step, const Json& metadata = Json::object(),
                     const Adam* generator = nullptr, const Adam* discriminator = nullptr);

/// Reads a checkpoint. With `expected`, the stored configuration must produce
/// the same parameter names and shapes; otherwise CheckpointMismatch lists
/// every differing array.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

/// Copies matching arrays into `model`; throws CheckpointMismatch listing
/// missing, unexpected or reshaped arrays.
void assign_parameters(RainModel& model, const RainModel& source);

}  // namespace rain
