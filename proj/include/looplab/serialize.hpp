#pragma once

#include <string>
#include <utility>
#include <vector>

#include "looplab/netcore.hpp"

namespace looplab {

/// Header plus named f64 tensors. See docs/net_format.md for the byte layout.
struct TensorFile {
  NetConfig config;
  double eps = 1e-6;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
};

std::string encode_tensor_file(const TensorFile& file);
/// Throws FormatError on anything malformed.
TensorFile decode_tensor_file(const std::string& bytes);

TensorFile to_tensor_file(const LoopedNet& net);
/// Rebuilds the net from the tensors it owns; unknown extra tensors are ignored.
LoopedNet net_from_tensor_file(const TensorFile& file);

void save_net(const std::string& path, const LoopedNet& net);
LoopedNet load_net(const std::string& path);

/// Writes `contents` to `path` through a temporary sibling and a rename.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace looplab
