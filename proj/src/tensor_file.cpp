#include "unimt/tensor_file.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "unimt/errors.hpp"

namespace unimt {

using nlohmann::json;

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPrelude = 20;  // magic + version + header length

void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}
std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t x = 0;
  for (int i = 0; i < bytes; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return x;
}

void put_tensor(std::string& out, const Mat<float>& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(m.data()[i]));
}

void check_magic(std::string_view magic) {
  if (magic.size() != 8) throw Error("tensor file magic must be 8 bytes");
}

}  // namespace

void write_tensor_file(const std::string& path, std::string_view magic, const TensorFile& file) {
  check_magic(magic);
  json header;
  try {
    header["config"] = json::parse(file.config_json);
    header["extra"] = json::parse(file.extra_json);
  } catch (const json::exception& e) {
    throw FormatError(std::string("tensor file metadata is not valid JSON: ") + e.what());
  }
  header["step"] = file.step;
  json tensors = json::array();
  for (const auto& e : file.entries) {
    if (e.m.rows() != e.value.rows() || e.m.cols() != e.value.cols() || e.v.rows() != e.value.rows() ||
        e.v.cols() != e.value.cols())
      throw DimensionError("tensor '" + e.name + "' has moments of a different shape");
    tensors.push_back({{"name", e.name}, {"rows", e.value.rows()}, {"cols", e.value.cols()}});
  }
  header["tensors"] = tensors;
  const std::string h = header.dump();

  std::string blob(magic);
  put_u32(blob, kVersion);
  put_u64(blob, h.size());
  blob += h;
  for (const auto& e : file.entries) {
    put_tensor(blob, e.value);
    put_tensor(blob, e.m);
    put_tensor(blob, e.v);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move file into '" + path + "'");
}

TensorFile read_tensor_file(const std::string& path, std::string_view magic) {
  check_magic(magic);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open '" + path + "'");
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() < kPrelude || std::memcmp(blob.data(), magic.data(), magic.size()) != 0)
    throw FormatError("'" + path + "' is not a " + std::string(magic) + " file");
  const auto version = static_cast<std::uint32_t>(get_le(blob, 8, 4));
  if (version != kVersion) throw FormatError("unsupported file version " + std::to_string(version));
  const std::uint64_t hlen = get_le(blob, 12, 8);
  if (kPrelude + hlen > blob.size()) throw FormatError("truncated header in '" + path + "'");

  TensorFile file;
  json header;
  try {
    header = json::parse(blob.substr(kPrelude, hlen));
    file.config_json = header.at("config").dump();
    file.step = header.at("step").get<std::int64_t>();
    file.extra_json = header.contains("extra") ? header["extra"].dump() : "{}";
    for (const auto& t : header.at("tensors")) {
      TensorFile::Entry e;
      e.name = t.at("name").get<std::string>();
      const auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw FormatError("negative tensor shape");
      e.value.resize(rows, cols);
      e.m.resize(rows, cols);
      e.v.resize(rows, cols);
      file.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt header in '") + path + "': " + e.what());
  }

  std::size_t at = kPrelude + hlen;
  auto read = [&](Mat<float>& m) {
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * 4;
    if (at + bytes > blob.size()) throw FormatError("truncated tensor data in '" + path + "'");
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(blob, at + 4 * i, 4)));
    at += bytes;
  };
  for (auto& e : file.entries) {
    read(e.value);
    read(e.m);
    read(e.v);
  }
  if (at != blob.size()) throw FormatError("trailing bytes after tensor data in '" + path + "'");
  return file;
}

}  // namespace unimt
