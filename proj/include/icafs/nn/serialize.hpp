#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "icafs/nn/tensor.hpp"

namespace icafs::nn {

// Flat little-endian layout, one entry per parameter in sorted name order:
//   u64 name length | name bytes | u64 rank | u64 dims[rank] | f64 values (row-major)
// preceded by a u64 entry count.
void write_params(std::ostream& os, const ParamSet& params);
ParamSet read_params(std::istream& is);

std::string params_to_bytes(const ParamSet& params);
ParamSet params_from_bytes(const std::string& bytes);

using Section = std::pair<std::string, ParamSet>;

// "ICAFSCK1" | u64 section count | per section: u64 name length | name | params blob
void write_checkpoint(const std::string& path, const std::vector<Section>& sections);
std::vector<Section> read_checkpoint(const std::string& path);
std::string checkpoint_bytes(const std::vector<Section>& sections);

}  // namespace icafs::nn
