#include "dcs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dcs {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'C', 'S', 'C', 'K', 'P', 'T', '\n'};

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

void put_i64(std::ostream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
  std::ifstream in;
  std::string path;
  std::int64_t offset = 0;

  void read(void* dst, std::int64_t n) {
    in.read(static_cast<char*>(dst), n);
    if (in.gcount() != n)
      throw FormatError("checkpoint '" + path + "' is truncated", offset);
    offset += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    read(&v, 4);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    read(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20))
      throw FormatError("checkpoint '" + path + "' has an implausible string length",
                        offset - 4);
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  put_u32(out, ck.version);
  put_u32(out, static_cast<std::uint32_t>(ck.meta.size()));
  for (const auto& kv : ck.meta) {
    put_str(out, kv.first);
    put_str(out, kv.second);
  }
  put_u32(out, static_cast<std::uint32_t>(ck.blobs.size()));
  for (const auto& b : ck.blobs) {
    put_str(out, b.name);
    put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    std::int64_t count = 1;
    for (int d : b.shape) {
      put_i64(out, d);
      count *= d;
    }
    if (count != static_cast<std::int64_t>(b.data.size()))
      throw Error("checkpoint blob '" + b.name + "' shape does not match its data size");
    out.write(reinterpret_cast<const char*>(b.data.data()),
              static_cast<std::streamsize>(b.data.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open checkpoint '" + path + "'");

  char magic[8];
  r.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("'" + path + "' is not a checkpoint file (bad magic)", 0);

  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version > kCheckpointVersion)
    throw CheckpointMismatch("checkpoint '" + path + "' has format version " +
                             std::to_string(ck.version) + "; this build reads up to " +
                             std::to_string(kCheckpointVersion));

  const std::uint32_t meta_count = r.u32();
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    auto key = r.str();
    auto value = r.str();
    ck.meta.emplace_back(std::move(key), std::move(value));
  }

  const std::uint32_t blob_count = r.u32();
  for (std::uint32_t i = 0; i < blob_count; ++i) {
    Blob b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 8)
      throw FormatError("checkpoint blob '" + b.name + "' has implausible rank",
                        r.offset - 4);
    std::int64_t count = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::int64_t dim = r.i64();
      if (dim < 0 || dim > (1 << 24))
        throw FormatError("checkpoint blob '" + b.name + "' has an invalid dimension",
                          r.offset - 8);
      b.shape.push_back(static_cast<int>(dim));
      count *= dim;
    }
    b.data.resize(static_cast<std::size_t>(count));
    r.read(b.data.data(), count * static_cast<std::int64_t>(sizeof(float)));
    ck.blobs.push_back(std::move(b));
  }
  return ck;
}

}  // namespace dcs
