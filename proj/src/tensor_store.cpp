#include "weightlab/tensor_store.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <unordered_set>

#include <nlohmann/json.hpp>

namespace weightlab {
namespace {

using ojson = nlohmann::ordered_json;

std::string quote(const std::string& s) { return nlohmann::json(s).dump(); }

std::uint64_t checked_element_count(const std::vector<std::size_t>& shape,
                                    const std::string& name) {
  std::uint64_t count = 1;
  for (std::size_t d : shape) {
    if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d) {
      throw ValidationError("element count overflow for tensor " + quote(name));
    }
    count *= d;
  }
  return count;
}

std::uint64_t expected_byte_size(const TensorMeta& m) {
  const std::uint64_t count = checked_element_count(m.shape, m.name);
  const std::uint64_t width = byte_width(m.dtype);
  if (count > std::numeric_limits<std::uint64_t>::max() / width) {
    throw ValidationError("byte size overflow for tensor " + quote(m.name));
  }
  return count * width;
}

std::string serialize_header(const std::vector<TensorMeta>& metas,
                             const std::map<std::string, std::string>& metadata) {
  std::string h = "{";
  bool first = true;
  if (!metadata.empty()) {
    h += "\"__metadata__\":{";
    bool mfirst = true;
    for (const auto& [k, v] : metadata) {
      if (!mfirst) h += ",";
      mfirst = false;
      h += quote(k) + ":" + quote(v);
    }
    h += "}";
    first = false;
  }
  for (const auto& m : metas) {
    if (!first) h += ",";
    first = false;
    h += quote(m.name) + ":{\"dtype\":\"" + std::string(dtype_name(m.dtype)) +
         "\",\"shape\":[";
    for (std::size_t i = 0; i < m.shape.size(); ++i) {
      if (i) h += ",";
      h += std::to_string(m.shape[i]);
    }
    h += "],\"data_offsets\":[" + std::to_string(m.begin) + "," +
         std::to_string(m.end) + "]}";
  }
  h += "}";
  return h;
}

}  // namespace

std::size_t TensorMeta::element_count() const {
  return static_cast<std::size_t>(checked_element_count(shape, name));
}

TensorArchive TensorArchive::open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + path.string());
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);

  if (file_size < 8) {
    throw ValidationError("malformed header: file too short (" + path.string() + ")");
  }
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  if (!in) throw IoError("failed reading header length from " + path.string());
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(len_bytes[i]) << (8 * i);
  if (header_len > file_size - 8) {
    throw ValidationError("header length " + std::to_string(header_len) +
                          " exceeds file size (" + path.string() + ")");
  }

  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw IoError("failed reading header from " + path.string());

  // The JSON parser keeps the last of duplicate keys, so duplicates are
  // detected while parsing via the event callback.
  std::unordered_set<std::string> seen;
  std::string duplicate;
  auto cb = [&](int depth, ojson::parse_event_t event, ojson& parsed) {
    if (depth == 1 && event == ojson::parse_event_t::key) {
      const auto key = parsed.get<std::string>();
      if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  ojson root = ojson::parse(header_text, cb, /*allow_exceptions=*/false);
  if (root.is_discarded()) {
    throw ValidationError("malformed header JSON (" + path.string() + ")");
  }
  if (!duplicate.empty()) {
    throw ValidationError("duplicate tensor name " + quote(duplicate));
  }
  if (!root.is_object()) {
    throw ValidationError("malformed header: root must be a JSON object (" +
                          path.string() + ")");
  }

  TensorArchive archive;
  archive.path_ = path;
  archive.data_offset_ = 8 + header_len;
  archive.data_size_ = file_size - archive.data_offset_;

  for (const auto& [key, value] : root.items()) {
    if (key == "__metadata__") {
      if (!value.is_object()) {
        throw ValidationError("__metadata__ must be a JSON object");
      }
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) {
          throw ValidationError("__metadata__ value for " + quote(mk) +
                                " must be a string");
        }
        archive.metadata_[mk] = mv.get<std::string>();
      }
      continue;
    }
    if (!value.is_object()) {
      throw ValidationError("malformed entry for tensor " + quote(key));
    }
    TensorMeta m;
    m.name = key;
    if (!value.contains("dtype") || !value["dtype"].is_string()) {
      throw ValidationError("missing dtype for tensor " + quote(key));
    }
    const auto dt = parse_dtype(value["dtype"].get<std::string>());
    if (!dt) {
      throw ValidationError("unknown dtype " + quote(value["dtype"].get<std::string>()) +
                            " for tensor " + quote(key));
    }
    m.dtype = *dt;
    if (!value.contains("shape") || !value["shape"].is_array()) {
      throw ValidationError("missing shape for tensor " + quote(key));
    }
    for (const auto& d : value["shape"]) {
      if (!d.is_number_unsigned()) {
        throw ValidationError("shape entries must be non-negative integers for tensor " +
                              quote(key));
      }
      m.shape.push_back(d.get<std::size_t>());
    }
    if (!value.contains("data_offsets") || !value["data_offsets"].is_array() ||
        value["data_offsets"].size() != 2 ||
        !value["data_offsets"][0].is_number_unsigned() ||
        !value["data_offsets"][1].is_number_unsigned()) {
      throw ValidationError("malformed data_offsets for tensor " + quote(key));
    }
    m.begin = value["data_offsets"][0].get<std::uint64_t>();
    m.end = value["data_offsets"][1].get<std::uint64_t>();
    if (m.begin > m.end) {
      throw ValidationError("span begin exceeds end for tensor " + quote(key));
    }
    if (m.end > archive.data_size_) {
      throw ValidationError("span out of bounds for tensor " + quote(key));
    }
    if (m.end - m.begin != expected_byte_size(m)) {
      throw ValidationError("span size does not match shape and dtype for tensor " +
                            quote(key));
    }
    archive.order_.push_back(key);
    archive.entries_.emplace(key, std::move(m));
  }

  // Gaps are tolerated on read; overlaps are not.
  std::vector<const TensorMeta*> spans;
  spans.reserve(archive.order_.size());
  for (const auto& n : archive.order_) spans.push_back(&archive.entries_.at(n));
  std::sort(spans.begin(), spans.end(), [](const TensorMeta* a, const TensorMeta* b) {
    return a->begin < b->begin;
  });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1]->end > spans[i]->begin && spans[i]->byte_size() > 0 &&
        spans[i - 1]->byte_size() > 0) {
      throw ValidationError("overlapping byte spans for tensors " +
                            quote(spans[i - 1]->name) + " and " + quote(spans[i]->name));
    }
  }
  return archive;
}

const TensorMeta& TensorArchive::meta(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw ValidationError("unknown tensor " + quote(name) + " in " + path_.string());
  }
  return it->second;
}

std::vector<unsigned char> TensorArchive::read_raw(const std::string& name) const {
  const TensorMeta& m = meta(name);
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + path_.string());
  in.seekg(static_cast<std::streamoff>(data_offset_ + m.begin));
  std::vector<unsigned char> bytes(m.byte_size());
  if (!bytes.empty()) {
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!in) {
      throw IoError("failed reading tensor " + quote(name) + " from " + path_.string());
    }
  }
  return bytes;
}

TensorData TensorArchive::read(const std::string& name) const {
  const TensorMeta& m = meta(name);
  const auto bytes = read_raw(name);
  TensorData data;
  data.dtype = m.dtype;
  data.shape = m.shape;
  data.values.resize(m.element_count());
  decode_span(m.dtype, bytes.data(), data.values.size(), data.values.data());
  return data;
}

ArchiveWriter::ArchiveWriter(std::filesystem::path target, std::vector<TensorDecl> layout,
                             std::map<std::string, std::string> metadata,
                             WriteOptions options)
    : target_(std::move(target)), options_(options) {
  std::unordered_set<std::string> names;
  std::uint64_t offset = 0;
  std::vector<TensorMeta> metas;
  metas.reserve(layout.size());
  for (auto& decl : layout) {
    if (!names.insert(decl.name).second) {
      throw ValidationError("duplicate tensor name " + quote(decl.name));
    }
    TensorMeta m;
    m.name = decl.name;
    m.dtype = decl.dtype;
    m.shape = decl.shape;
    m.begin = offset;
    m.end = offset + expected_byte_size(m);
    offset = m.end;
    metas.push_back(m);
    entries_.push_back(Entry{std::move(decl), m.begin, m.end});
  }

  const std::string header = serialize_header(metas, metadata);
  partial_ = target_;
  partial_ += ".partial";
  out_.open(partial_, std::ios::binary | std::ios::trunc);
  if (!out_) throw IoError("cannot create " + partial_.string());
  unsigned char len_bytes[8];
  const auto header_len = static_cast<std::uint64_t>(header.size());
  for (int i = 0; i < 8; ++i) {
    len_bytes[i] = static_cast<unsigned char>((header_len >> (8 * i)) & 0xff);
  }
  write_bytes(len_bytes, 8);
  write_bytes(header.data(), header.size());
}

ArchiveWriter::~ArchiveWriter() {
  if (!finished_) {
    out_.close();
    std::error_code ec;
    std::filesystem::remove(partial_, ec);
  }
}

void ArchiveWriter::write_bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw IoError("write failed on " + partial_.string());
}

const ArchiveWriter::Entry& ArchiveWriter::expect_next(const std::string& name) const {
  if (cursor_ >= entries_.size()) {
    throw ValidationError("append past declared layout (tensor " + quote(name) + ")");
  }
  const Entry& e = entries_[cursor_];
  if (e.decl.name != name) {
    throw ValidationError("out-of-order append: expected tensor " + quote(e.decl.name) +
                          ", got " + quote(name));
  }
  return e;
}

void ArchiveWriter::append(const std::string& name, std::span<const double> values) {
  const Entry& e = expect_next(name);
  const std::uint64_t count = checked_element_count(e.decl.shape, name);
  if (values.size() != count) {
    throw ValidationError("shape/value mismatch for tensor " + quote(name) + ": expected " +
                          std::to_string(count) + " values, got " +
                          std::to_string(values.size()));
  }
  const std::size_t width = byte_width(e.decl.dtype);
  std::vector<unsigned char> buf(values.size() * width);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!encode_scalar(e.decl.dtype, values[i], buf.data() + i * width, options_.saturate)) {
      throw ValidationError("value " + std::to_string(values[i]) + " overflows " +
                            std::string(dtype_name(e.decl.dtype)) + " (tensor " +
                            quote(name) + ", index " + std::to_string(i) + ")");
    }
  }
  write_bytes(buf.data(), buf.size());
  ++cursor_;
}

void ArchiveWriter::append_raw(const std::string& name, std::span<const unsigned char> bytes) {
  const Entry& e = expect_next(name);
  if (bytes.size() != e.end - e.begin) {
    throw ValidationError("raw byte size mismatch for tensor " + quote(name));
  }
  write_bytes(bytes.data(), bytes.size());
  ++cursor_;
}

void ArchiveWriter::finish() {
  if (finished_) return;
  if (cursor_ != entries_.size()) {
    throw ValidationError("archive incomplete: " +
                          std::to_string(entries_.size() - cursor_) +
                          " declared tensors not appended");
  }
  out_.flush();
  if (!out_) throw IoError("flush failed on " + partial_.string());
  out_.close();
  std::error_code ec;
  std::filesystem::rename(partial_, target_, ec);
  if (ec) throw IoError("cannot rename " + partial_.string() + " to " + target_.string());
  finished_ = true;
}

void write_archive(const std::vector<TensorInit>& entries, const std::filesystem::path& path,
                   const std::map<std::string, std::string>& metadata, WriteOptions options) {
  std::vector<TensorDecl> layout;
  layout.reserve(entries.size());
  for (const auto& e : entries) layout.push_back({e.name, e.dtype, e.shape});
  ArchiveWriter writer(path, std::move(layout), metadata, options);
  for (const auto& e : entries) writer.append(e.name, e.values);
  writer.finish();
}

AlignmentReport validate_alignment(const std::vector<const TensorArchive*>& archives) {
  if (archives.size() < 2) {
    throw ValidationError("alignment requires at least two archives");
  }
  std::set<std::string> all_names;
  for (const auto* a : archives) {
    for (const auto& n : a->names()) all_names.insert(n);
  }
  AlignmentReport report;
  for (const auto& name : all_names) {
    bool everywhere = true;
    for (const auto* a : archives) {
      if (!a->contains(name)) {
        everywhere = false;
        break;
      }
    }
    if (!everywhere) {
      report.partial.insert(name);
      continue;
    }
    const auto& ref_shape = archives.front()->meta(name).shape;
    bool same = true;
    for (const auto* a : archives) {
      if (a->meta(name).shape != ref_shape) {
        same = false;
        break;
      }
    }
    (same ? report.shared : report.shape_conflicts).insert(name);
  }
  return report;
}

}  // namespace weightlab
