#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "weightlab/dtype.hpp"
#include "weightlab/errors.hpp"

namespace weightlab {

// Single-file checkpoint container: an 8-byte little-endian header length,
// a JSON header mapping tensor name -> {dtype, shape, data_offsets}, then a
// raw little-endian row-major data region. Wire compatible with the common
// single-file format used to publish model weights.

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;  // offsets into the data region
  std::uint64_t end = 0;

  std::size_t element_count() const;
  std::size_t byte_size() const { return static_cast<std::size_t>(end - begin); }
};

struct TensorData {
  std::vector<double> values;  // row-major, widened losslessly
  DType dtype = DType::F32;    // source dtype, for round-tripping
  std::vector<std::size_t> shape;
};

class TensorArchive {
 public:
  static TensorArchive open(const std::filesystem::path& path);

  const std::filesystem::path& path() const { return path_; }
  const std::vector<std::string>& names() const { return order_; }  // header order
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const TensorMeta& meta(const std::string& name) const;
  const std::map<std::string, std::string>& metadata() const { return metadata_; }
  std::uint64_t data_region_size() const { return data_size_; }

  // Lazy per-tensor reads; archives are immutable after open, so concurrent
  // reads are safe (each call uses its own file handle).
  TensorData read(const std::string& name) const;
  std::vector<unsigned char> read_raw(const std::string& name) const;

 private:
  TensorArchive() = default;

  std::filesystem::path path_;
  std::uint64_t data_offset_ = 0;  // file offset of the data region
  std::uint64_t data_size_ = 0;
  std::vector<std::string> order_;
  std::unordered_map<std::string, TensorMeta> entries_;
  std::map<std::string, std::string> metadata_;
};

struct WriteOptions {
  bool saturate = false;  // clamp F16/BF16/F32 overflow instead of erroring
};

struct TensorDecl {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
};

// Single-pass streaming writer. The layout is declared up front (offsets are
// laid out contiguously in order, no gaps); tensors are then appended in that
// order, so a multi-GB checkpoint never needs to be resident. Until finish()
// succeeds the target path is untouched; content goes to a ".partial" file
// that the destructor removes on abandonment.
class ArchiveWriter {
 public:
  ArchiveWriter(std::filesystem::path target, std::vector<TensorDecl> layout,
                std::map<std::string, std::string> metadata = {},
                WriteOptions options = {});
  ~ArchiveWriter();
  ArchiveWriter(const ArchiveWriter&) = delete;
  ArchiveWriter& operator=(const ArchiveWriter&) = delete;

  void append(const std::string& name, std::span<const double> values);
  // Byte-exact passthrough for copy paths; size must match the declaration.
  void append_raw(const std::string& name, std::span<const unsigned char> bytes);
  void finish();

 private:
  struct Entry {
    TensorDecl decl;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
  };

  const Entry& expect_next(const std::string& name) const;

  void write_bytes(const void* data, std::size_t n);

  std::filesystem::path target_;
  std::filesystem::path partial_;
  std::vector<Entry> entries_;
  WriteOptions options_;
  std::size_t cursor_ = 0;
  bool finished_ = false;
  std::ofstream out_;
};

struct TensorInit {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::size_t> shape;
  std::vector<double> values;
};

void write_archive(const std::vector<TensorInit>& entries,
                   const std::filesystem::path& path,
                   const std::map<std::string, std::string>& metadata = {},
                   WriteOptions options = {});

// Name/shape partition across >= 2 archives: shared (present everywhere with
// one shape), shape_conflicts (present everywhere, shapes differ), partial
// (missing somewhere). Disjoint; union covers all input names.
struct AlignmentReport {
  std::set<std::string> shared;
  std::set<std::string> shape_conflicts;
  std::set<std::string> partial;
};

AlignmentReport validate_alignment(const std::vector<const TensorArchive*>& archives);

}  // namespace weightlab
