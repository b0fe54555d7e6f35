#include "bilevel/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace bilevel {
namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'T', 'N', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint32_t checked_dim(std::size_t v) {
  if (v > UINT32_MAX) throw Error(ErrorKind::Shape, "dimension exceeds u32 range");
  return static_cast<std::uint32_t>(v);
}

void put_header(std::vector<std::uint8_t>& out, Dtype dtype,
                std::initializer_list<std::size_t> dims) {
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(dims.size()));
  for (std::size_t d : dims) put_u32(out, checked_dim(d));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed: " + path.string());
  return bytes;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const FeatureGrid& grid) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 2 + 12 + grid.data().size() * 4);
  put_header(out, Dtype::Float32, {grid.height(), grid.width(), grid.channels()});
  for (float v : grid.data()) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "refusing to write non-finite value");
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<std::uint8_t> encode_tensor(const LabelMask& mask) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 2 + 8 + mask.labels().size() * 4);
  put_header(out, Dtype::UInt32, {mask.height(), mask.width()});
  for (std::uint32_t v : mask.labels()) put_u32(out, v);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw Error(ErrorKind::BadMagic, "missing FTN1 magic");
  }
  const std::uint8_t dtype = bytes[4];
  if (dtype != static_cast<std::uint8_t>(Dtype::Float32) &&
      dtype != static_cast<std::uint8_t>(Dtype::UInt32)) {
    throw Error(ErrorKind::BadDtype, "unknown dtype code " + std::to_string(dtype));
  }
  const std::size_t ndim = bytes[5];
  const std::size_t header = 6 + 4 * ndim;
  if (bytes.size() < header) throw Error(ErrorKind::Truncated, "truncated dimension list");

  std::vector<std::size_t> dims(ndim);
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    dims[i] = get_u32(bytes.data() + 6 + 4 * i);
    if (dims[i] == 0) throw Error(ErrorKind::Shape, "zero-sized dimension");
    if (count > bytes.size() / dims[i]) throw Error(ErrorKind::Truncated, "truncated payload");
    count *= dims[i];
  }
  const std::size_t payload = bytes.size() - header;
  if (payload < count * 4) throw Error(ErrorKind::Truncated, "truncated payload");
  if (payload > count * 4) throw Error(ErrorKind::TrailingBytes, "payload longer than dims imply");

  const std::uint8_t* p = bytes.data() + header;
  if (dtype == static_cast<std::uint8_t>(Dtype::Float32)) {
    if (ndim != 2 && ndim != 3) {
      throw Error(ErrorKind::Shape, "float tensor must have 2 or 3 dims");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      data[i] = std::bit_cast<float>(get_u32(p + 4 * i));
      if (!std::isfinite(data[i])) throw Error(ErrorKind::NonFinite, "non-finite value in payload");
    }
    return FeatureGrid(dims[0], dims[1], ndim == 3 ? dims[2] : 1, std::move(data));
  }

  if (!(ndim == 2 || (ndim == 3 && dims[2] == 1))) {
    throw Error(ErrorKind::Shape, "label tensor must be H x W");
  }
  std::vector<std::uint32_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = get_u32(p + 4 * i);
  return LabelMask(dims[0], dims[1], std::move(labels));
}

Tensor read_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_tensor(bytes);
}

FeatureGrid read_feature_grid(const std::filesystem::path& path) {
  auto t = read_tensor(path);
  if (auto* g = std::get_if<FeatureGrid>(&t)) return std::move(*g);
  throw Error(ErrorKind::Shape, path.string() + " holds labels, expected features");
}

LabelMask read_label_mask(const std::filesystem::path& path) {
  auto t = read_tensor(path);
  if (auto* m = std::get_if<LabelMask>(&t)) return std::move(*m);
  throw Error(ErrorKind::Shape, path.string() + " holds features, expected labels");
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorKind::Io, "cannot move output into place: " + path.string());
  }
}

void write_tensor(const FeatureGrid& grid, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor(grid));
}

void write_tensor(const LabelMask& mask, const std::filesystem::path& path) {
  write_file_atomic(path, encode_tensor(mask));
}

}  // namespace bilevel
