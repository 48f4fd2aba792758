#pragma once

#include <cstdint>
#include <string>

#include "viewalign/diffusion.hpp"

namespace viewalign {

// Self-describing model container: a JSON manifest (model config, schedule,
// seed, content hash over the tensor payload) followed by the named parameter
// tensors as little-endian 32-bit floats in registration order.
struct LoadedCheckpoint {
    Denoiser model;
    NoiseSchedule schedule;
    uint64_t seed = 0;
    std::string content_hash;
};

void save_checkpoint(const std::string& path, const Denoiser& model,
                     const NoiseSchedule& schedule, uint64_t seed);

LoadedCheckpoint load_checkpoint(const std::string& path);

// Hash recorded in a checkpoint's manifest without loading the tensors.
std::string checkpoint_hash(const std::string& path);

// Hex SHA-1 over a git-style "<tag> <size>\0<payload>" framing.
std::string content_hash_sha1(const std::string& tag, const void* payload, size_t size);

}  // namespace viewalign
