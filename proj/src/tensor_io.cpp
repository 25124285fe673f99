#include "stemfold/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "stemfold/errors.hpp"
#include "stemfold/text_format.hpp"

namespace stemfold {
namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  const auto& shape = t.shape();
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t e : shape) {
    if (e > 0xffffffffULL) throw InvalidArgument("extent does not fit in u32");
    put_u32(out, static_cast<std::uint32_t>(e));
  }
  out.reserve(out.size() + 4 * t.size());
  for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kTensorMagic, 8) != 0) {
    throw DataError(origin + ": not a STEMTENS file");
  }
  const std::uint32_t rank = get_u32(bytes.data() + 8);
  std::size_t off = 12;
  if (bytes.size() < off + 4ULL * rank) throw DataError(origin + ": truncated header");
  std::vector<std::size_t> shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t e = get_u32(bytes.data() + off);
    if (e == 0) throw DataError(origin + ": zero extent");
    shape.push_back(e);
    n *= e;
    off += 4;
  }
  if (bytes.size() != off + 4 * n) {
    throw DataError(origin + ": payload size " + std::to_string(bytes.size() - off) +
                    " does not match shape");
  }
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + off + 4 * i)));
  }
  if (rank == 0) shape = {1};
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_all(path), path.string());
}

std::string file_fingerprint(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

}  // namespace stemfold
