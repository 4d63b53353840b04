#include "pcfs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "pcfs/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "record files are little-endian; big-endian hosts are unsupported");

namespace pcfs {

namespace {

constexpr char kMagic[4] = {'T', 'F', 'Q', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

class Reader {
 public:
  Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  void read_raw(void* dst, std::size_t bytes, const char* what) {
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in_.gcount()) != bytes) {
      throw ParseError(path_.string() + ": truncated while reading " + what +
                       " at byte offset " + std::to_string(offset_ + in_.gcount()));
    }
    offset_ += bytes;
  }

  std::uint32_t read_u32(const char* what) {
    std::uint32_t v = 0;
    read_raw(&v, sizeof(v), what);
    return v;
  }

  std::uint64_t read_u64(const char* what) {
    std::uint64_t v = 0;
    read_raw(&v, sizeof(v), what);
    return v;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& in_;
  const std::filesystem::path& path_;
  std::size_t offset_ = 0;
};

}  // namespace

void write_record_file(const std::filesystem::path& path,
                       const std::vector<TensorRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const TensorRecord& rec : records) {
    write_u32(out, static_cast<std::uint32_t>(rec.name.size()));
    out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    write_u32(out, static_cast<std::uint32_t>(rec.dims.size()));
    std::uint64_t expect = 1;
    for (std::uint64_t d : rec.dims) {
      write_u64(out, d);
      expect *= d;
    }
    if (expect != rec.data.size()) {
      throw IoError("record " + rec.name + ": payload size does not match shape");
    }
    out.write(reinterpret_cast<const char*>(rec.data.data()),
              static_cast<std::streamsize>(rec.data.size() * sizeof(double)));
  }
  if (!out) throw IoError("short write to " + path.string());
}

std::vector<TensorRecord> read_record_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Reader reader(in, path);

  char magic[4];
  reader.read_raw(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(path.string() + ": bad magic, not a record file");
  }
  const std::uint32_t version = reader.read_u32("version");
  if (version != kVersion) {
    throw ParseError(path.string() + ": unsupported format version " +
                     std::to_string(version));
  }
  const std::uint32_t count = reader.read_u32("record count");

  std::vector<TensorRecord> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    const std::uint32_t name_len = reader.read_u32("record name length");
    if (name_len > 4096) {
      throw ParseError(path.string() + ": implausible record name length at byte offset " +
                       std::to_string(reader.offset() - sizeof(std::uint32_t)));
    }
    rec.name.resize(name_len);
    reader.read_raw(rec.name.data(), name_len, "record name");
    const std::uint32_t rank = reader.read_u32("record rank");
    if (rank > 8) {
      throw ParseError(path.string() + ": record " + rec.name + " has implausible rank");
    }
    std::uint64_t total = 1;
    rec.dims.resize(rank);
    for (std::uint32_t r = 0; r < rank; ++r) {
      rec.dims[r] = reader.read_u64("record dimension");
      if (rec.dims[r] == 0 ||
          total > std::numeric_limits<std::uint64_t>::max() / std::max<std::uint64_t>(rec.dims[r], 1)) {
        throw ParseError(path.string() + ": record " + rec.name + " has invalid shape");
      }
      total *= rec.dims[r];
    }
    rec.data.resize(total);
    reader.read_raw(rec.data.data(), total * sizeof(double),
                    ("payload of record " + rec.name).c_str());
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace pcfs
