#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "dgsc/trainer.hpp"

namespace dgsc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (little-endian):
///   "DGSC" | u32 version | u64 model digest | u64 run digest | u64 step |
///   u32 flags (bit 0: optimizer state) | u64 n_params | u64 n_rng |
///   n_rng × (u64 purpose tag, u64 position) | f64 params[n_params] |
///   [f64 m[n_params] | f64 v[n_params] | u64 adam_t] | u64 CRC-64 of all
///   preceding bytes.
/// Stream names are stored as purpose tags; known names are restored on load.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Verifies magic, version, and checksum (IntegrityError), then, when
/// `expected_model_digest` is given, the model digest (CompatibilityError
/// naming both digests).
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_model_digest = std::nullopt);

/// "ckpt_<step, zero-padded to 9 digits>.dgsc"
std::string checkpoint_filename(std::uint64_t step);

}  // namespace dgsc
