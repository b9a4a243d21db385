#pragma once

#include "kvnn/tensor.hpp"

#include <filesystem>
#include <iosfwd>

namespace kvnn {

// KVT1 layout: the four bytes "KVT1", u32 rank, rank x u32 extents, then the
// payload as little-endian IEEE-754 doubles. All integers little-endian.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace kvnn
