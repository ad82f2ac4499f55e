#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "cylseg/common.hpp"

namespace cylseg {

// Named-tensor container, all integers and floats little-endian:
//
//   magic        8 bytes  "CYLSEGT1"
//   header_len   u32      length of the UTF-8 text header that follows
//   header       bytes    free text (the network config for checkpoints)
//   count        u32      number of tensors
//   per tensor, in name order:
//     name_len   u32
//     name       bytes
//     ndim       u32
//     dims       u64 * ndim
//     values     f64 * prod(dims)
//
// Full layout notes live in docs/checkpoint_format.md.
struct TensorFile {
  std::string header;
  TensorMap tensors;
};

void write_tensor_file(std::ostream& out, const TensorFile& file);
TensorFile read_tensor_file(std::istream& in);

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path);

}  // namespace cylseg
