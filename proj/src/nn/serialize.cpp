#include "icafs/nn/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace icafs::nn {

namespace {

constexpr char kMagic[8] = {'I', 'C', 'A', 'F', 'S', 'C', 'K', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error("truncated parameter stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }
double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

std::string get_string(std::istream& is) {
  const std::uint64_t n = get_u64(is);
  if (n > (1u << 20)) throw Error("implausible name length in parameter stream");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw Error("truncated parameter stream");
  return s;
}

}  // namespace

void write_params(std::ostream& os, const ParamSet& params) {
  put_u64(os, params.size());
  for (const auto& [name, t] : params) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto shape = t.shape();
    put_u64(os, shape.size());
    for (auto d : shape) put_u64(os, d);
    const Matrix& v = t.value();
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j) put_f64(os, v(i, j));
  }
}

ParamSet read_params(std::istream& is) {
  ParamSet p;
  const std::uint64_t count = get_u64(is);
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name = get_string(is);
    const std::uint64_t rank = get_u64(is);
    if (rank != 1 && rank != 2) throw Error("unsupported tensor rank in parameter stream");
    const std::uint64_t rows = rank == 1 ? 1 : get_u64(is);
    const std::uint64_t cols = get_u64(is);
    Matrix v(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < v.rows(); ++i)
      for (Eigen::Index j = 0; j < v.cols(); ++j) v(i, j) = get_f64(is);
    p.add(name, Tensor(std::move(v), static_cast<int>(rank)));
  }
  return p;
}

std::string params_to_bytes(const ParamSet& params) {
  std::ostringstream os(std::ios::binary);
  write_params(os, params);
  return os.str();
}

ParamSet params_from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_params(is);
}

std::string checkpoint_bytes(const std::vector<Section>& sections) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  put_u64(os, sections.size());
  for (const auto& [name, params] : sections) {
    put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_params(os, params);
  }
  return os.str();
}

void write_checkpoint(const std::string& path, const std::vector<Section>& sections) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint: " + path);
  const std::string bytes = checkpoint_bytes(sections);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<Section> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw Error("not a checkpoint file: " + path);
  std::vector<Section> out;
  const std::uint64_t n = get_u64(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = get_string(is);
    out.emplace_back(std::move(name), read_params(is));
  }
  return out;
}

}  // namespace icafs::nn
