#pragma once

// Little-endian binary framing shared by checkpoints and tensor caches.
//
//   tensor := u32 name_len, name, u8 dtype (0 = f32, 1 = f64), u32 rank,
//             u64 extents[rank], raw data

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "diffwave/error.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

static_assert(std::endian::native == std::endian::little, "binary framing assumes a little-endian host");

template <class Real>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? 0 : 1;
}

class ByteWriter {
 public:
  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void string(const std::string& s) {
    require(s.size() <= UINT32_MAX, "serialize: string too long");
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <class Real>
  void tensor(const std::string& name, const Tensor<Real>& t) {
    string(name);
    pod(dtype_tag<Real>());
    pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) pod(static_cast<std::uint64_t>(e));
    bytes(t.data(), t.size() * sizeof(Real));
  }
  const std::vector<char>& buffer() const noexcept { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> data, std::string source) : buf_(std::move(data)), src_(std::move(source)) {}

  template <class T>
  T pod() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    take(s.data(), n);
    return s;
  }
  /// Reads one framed tensor; the stored dtype must match Real.
  template <class Real>
  Tensor<Real> tensor(std::string& name) {
    name = string();
    const auto tag = pod<std::uint8_t>();
    if (tag != dtype_tag<Real>())
      fail(ErrorKind::Io, src_ + ": tensor '" + name + "' has dtype tag " + std::to_string(tag) + ", expected " +
                              std::to_string(dtype_tag<Real>()));
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) fail(ErrorKind::Io, src_ + ": tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
      e = static_cast<std::size_t>(pod<std::uint64_t>());
      count *= e;
    }
    if (count * sizeof(Real) > remaining()) fail(ErrorKind::Io, src_ + ": truncated data for tensor '" + name + "'");
    Tensor<Real> t(std::move(shape));
    take(t.data(), t.size() * sizeof(Real));
    return t;
  }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  const std::string& source() const noexcept { return src_; }

 private:
  void take(void* out, std::size_t n) {
    if (n > remaining()) fail(ErrorKind::Io, src_ + ": unexpected end of file (truncated)");
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::vector<char> buf_;
  std::size_t pos_ = 0;
  std::string src_;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary and renames it over the target.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::Io, "cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) fail(ErrorKind::Io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline constexpr char kTensorBundleMagic[4] = {'D', 'F', 'T', 'B'};

/// Named tensors in one file: magic "DFTB", u32 version, u32 count, framed tensors.
template <class Real>
void save_tensor_bundle(const std::filesystem::path& path, const std::map<std::string, Tensor<Real>>& tensors) {
  ByteWriter w;
  w.bytes(kTensorBundleMagic, 4);
  w.pod(std::uint32_t{1});
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) w.tensor(name, t);
  write_file_atomic(path, w.buffer().data(), w.buffer().size());
}

template <class Real>
std::map<std::string, Tensor<Real>> load_tensor_bundle(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  char magic[4];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kTensorBundleMagic, 4) != 0) fail(ErrorKind::Io, path.string() + ": not a tensor bundle");
  if (const auto v = r.pod<std::uint32_t>(); v != 1)
    fail(ErrorKind::Io, path.string() + ": unsupported bundle version " + std::to_string(v));
  const auto n = r.pod<std::uint32_t>();
  std::map<std::string, Tensor<Real>> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name;
    auto t = r.tensor<Real>(name);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace diffwave
