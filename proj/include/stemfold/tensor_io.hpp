#pragma once

// STEMTENS container: 8-byte magic "STEMTENS", little-endian u32 rank, rank
// little-endian u32 extents, then row-major little-endian IEEE-754 float32
// payload. Doubles are narrowed on write and widened on read.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "stemfold/tensor.hpp"

namespace stemfold {

inline constexpr char kTensorMagic[8] = {'S', 'T', 'E', 'M', 'T', 'E', 'N', 'S'};

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// FNV-1a of a file's bytes, hex encoded.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace stemfold
