#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pcfs {

/// One named tensor in a record file. Payload is row-major float64.
struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;  // size = product of dims
};

/// Versioned binary container: magic "TFQT", format version u32, record
/// count u32, then (name, shape, payload) records. Little-endian throughout.
/// Round trips are bit-exact.
void write_record_file(const std::filesystem::path& path,
                       const std::vector<TensorRecord>& records);

/// Throws ParseError naming the byte offset or offending record on any
/// malformed input (bad magic, unsupported version, truncation).
std::vector<TensorRecord> read_record_file(const std::filesystem::path& path);

}  // namespace pcfs
