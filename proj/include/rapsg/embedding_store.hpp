// SPDX-License-Identifier: Apache-2.0
//
// ID-addressed float32 embedding matrices and the region-description catalog.
//
// Binary layout (little-endian):
//   "RAPS" | version u16 (=1) | flags u16 (bit 0: normalized) | dim u32 |
//   count u64 | count x (len u16, utf-8 bytes) | count*dim f32 row-major |
//   crc32 u32 over every preceding byte
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rapsg/digest.hpp"
#include "rapsg/error.hpp"
#include "rapsg/jsonl.hpp"

static_assert(std::endian::native == std::endian::little, "store codec assumes a little-endian host");

namespace rapsg {

inline constexpr char kStoreMagic[4] = {'R', 'A', 'P', 'S'};
inline constexpr std::uint16_t kStoreVersion = 1;
inline constexpr std::uint16_t kFlagNormalized = 1;
inline constexpr double kUnitNormTolerance = 1e-5;

class EmbeddingStore {
 public:
  EmbeddingStore() = default;

  /// Validates ids (unique, non-empty), shape, and the unit-norm claim.
  EmbeddingStore(std::vector<std::string> ids, std::uint32_t dim, std::vector<float> data,
                 bool normalized)
      : ids_(std::move(ids)), dim_(dim), data_(std::move(data)), normalized_(normalized) {
    if (dim_ == 0) throw InputError("embedding store: dim must be positive");
    if (data_.size() != ids_.size() * static_cast<std::size_t>(dim_)) {
      throw InputError("embedding store: payload holds " + std::to_string(data_.size()) +
                       " floats, expected " + std::to_string(ids_.size()) + " x " +
                       std::to_string(dim_));
    }
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (ids_[i].empty()) throw InputError("embedding store: empty id at row " + std::to_string(i));
      if (!index_.emplace(ids_[i], i).second) {
        throw InputError("embedding store: duplicate id '" + ids_[i] + "'");
      }
    }
    if (normalized_) {
      for (std::size_t i = 0; i < ids_.size(); ++i) {
        const double norm = row_norm(i);
        if (std::abs(norm - 1.0) > kUnitNormTolerance) {
          throw InputError("embedding store: row '" + ids_[i] + "' flagged normalized but has norm " +
                           format_double(norm));
        }
      }
    }
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::uint32_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::string& id(std::size_t row) const { return ids_.at(row); }
  std::span<const float> data() const noexcept { return data_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

  std::optional<std::size_t> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::span<const float> row(const std::string& id) const {
    auto i = find(id);
    if (!i) throw InputError("embedding store: unknown id '" + id + "'");
    return row(*i);
  }

  double row_norm(std::size_t i) const {
    double sq = 0.0;
    for (float v : row(i)) sq += static_cast<double>(v) * v;
    return std::sqrt(sq);
  }

  /// Rows at `rows`, in the given order.
  EmbeddingStore subset(std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    std::vector<float> data;
    ids.reserve(rows.size());
    data.reserve(rows.size() * dim_);
    for (std::size_t r : rows) {
      ids.push_back(ids_.at(r));
      auto src = row(r);
      data.insert(data.end(), src.begin(), src.end());
    }
    return EmbeddingStore(std::move(ids), dim_, std::move(data), normalized_);
  }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint32_t dim_ = 0;
  std::vector<float> data_;
  bool normalized_ = false;
};

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(FormatError::Kind::kTruncated, pos_,
                        std::string("truncated store while reading ") + what);
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_store(const EmbeddingStore& store) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kStoreMagic, kStoreMagic + 4);
  detail::put_le<std::uint16_t>(out, kStoreVersion);
  detail::put_le<std::uint16_t>(out, store.normalized() ? kFlagNormalized : 0);
  detail::put_le<std::uint32_t>(out, store.dim());
  detail::put_le<std::uint64_t>(out, store.size());
  for (const auto& id : store.ids()) {
    if (id.size() > 0xffff) throw InputError("embedding store: id longer than 65535 bytes");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  const auto payload = store.data();
  const auto* raw = reinterpret_cast<const std::uint8_t*>(payload.data());
  out.insert(out.end(), raw, raw + payload.size_bytes());
  detail::put_le<std::uint32_t>(out, crc32_of(out));
  return out;
}

inline EmbeddingStore decode_store(std::span<const std::uint8_t> bytes) {
  using Kind = FormatError::Kind;
  detail::ByteReader in(bytes);
  auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), kStoreMagic, 4) != 0) {
    throw FormatError(Kind::kHeader, 0, "bad magic, expected \"RAPS\"");
  }
  const auto version = in.get<std::uint16_t>("version");
  if (version != kStoreVersion) {
    throw FormatError(Kind::kHeader, 4, "unsupported store version " + std::to_string(version));
  }
  const auto flags = in.get<std::uint16_t>("flags");
  if ((flags & ~kFlagNormalized) != 0) {
    throw FormatError(Kind::kHeader, 6, "unknown flag bits " + std::to_string(flags));
  }
  const auto dim = in.get<std::uint32_t>("dim");
  if (dim == 0) throw FormatError(Kind::kHeader, 8, "dim must be positive");
  const auto count = in.get<std::uint64_t>("count");

  // Every id takes at least 2 bytes; reject absurd counts before allocating.
  if (count > in.remaining() / 2) {
    throw FormatError(Kind::kCountMismatch, 12,
                      "count " + std::to_string(count) + " exceeds what the file can hold");
  }

  std::vector<std::string> ids;
  ids.reserve(count);
  std::unordered_set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto at = in.pos();
    const auto len = in.get<std::uint16_t>("id length");
    if (len == 0) throw FormatError(Kind::kEmptyId, at, "empty id at row " + std::to_string(i));
    auto raw = in.take(len, "id bytes");
    std::string id(reinterpret_cast<const char*>(raw.data()), raw.size());
    if (!seen.insert(id).second) {
      throw FormatError(Kind::kDuplicateId, at, "duplicate id '" + id + "'");
    }
    ids.push_back(std::move(id));
  }

  const auto payload_at = in.pos();
  const std::uint64_t floats = count * dim;
  const std::uint64_t expected = floats * sizeof(float) + sizeof(std::uint32_t);
  if (in.remaining() < expected) {
    throw FormatError(Kind::kTruncated, payload_at,
                      "payload needs " + std::to_string(expected) + " bytes, file has " +
                          std::to_string(in.remaining()));
  }
  if (in.remaining() > expected) {
    throw FormatError(Kind::kCountMismatch, payload_at + expected,
                      std::to_string(in.remaining() - expected) +
                          " trailing bytes after declared payload");
  }
  std::vector<float> data(floats);
  auto raw = in.take(floats * sizeof(float), "payload");
  std::memcpy(data.data(), raw.data(), raw.size());

  const auto crc_at = in.pos();
  const auto stored_crc = in.get<std::uint32_t>("crc32");
  const auto actual_crc = crc32_of(bytes.first(crc_at));
  if (stored_crc != actual_crc) {
    throw FormatError(Kind::kChecksum, crc_at, "crc32 mismatch");
  }
  return EmbeddingStore(std::move(ids), dim, std::move(data), (flags & kFlagNormalized) != 0);
}

inline EmbeddingStore load_store(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  try {
    return decode_store(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), e.offset(), path.string() + ": " + e.what());
  }
}

inline void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_store(store);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

/// Scales every row to unit length. Accumulates in double, stores float.
inline EmbeddingStore l2_normalize(const EmbeddingStore& store) {
  std::vector<float> data(store.data().begin(), store.data().end());
  const std::size_t dim = store.dim();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const double norm = store.row_norm(i);
    if (norm == 0.0 || !std::isfinite(norm)) {
      throw InputError("l2_normalize: row '" + store.id(i) + "' has zero or non-finite norm");
    }
    for (std::size_t j = 0; j < dim; ++j) {
      data[i * dim + j] = static_cast<float>(data[i * dim + j] / norm);
    }
  }
  return EmbeddingStore(store.ids(), store.dim(), std::move(data), true);
}

struct CatalogEntry {
  std::string id;
  std::string text;
  std::optional<std::string> source_image_id;

  friend bool operator==(const CatalogEntry&, const CatalogEntry&) = default;
};

/// Region-description texts keyed by id, in file order.
class DescriptionCatalog {
 public:
  DescriptionCatalog() = default;

  explicit DescriptionCatalog(std::vector<CatalogEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].id.empty()) throw InputError("catalog: empty id at entry " + std::to_string(i));
      if (!index_.emplace(entries_[i].id, i).second) {
        throw InputError("catalog: duplicate id '" + entries_[i].id + "'");
      }
    }
  }

  const std::vector<CatalogEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool contains(const std::string& id) const { return index_.contains(id); }

  const std::string& text(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InputError("catalog: unknown description id '" + id + "'");
    return entries_[it->second].text;
  }

 private:
  std::vector<CatalogEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline DescriptionCatalog load_catalog(const std::filesystem::path& path) {
  std::vector<CatalogEntry> entries;
  std::size_t line = 0;
  for (const auto& row : read_jsonl(path)) {
    const auto where = path.string() + " entry " + std::to_string(++line);
    CatalogEntry e{field<std::string>(row, "id", where), field<std::string>(row, "text", where),
                   std::nullopt};
    if (auto it = row.find("source_image_id"); it != row.end() && !it->is_null()) {
      e.source_image_id = it->get<std::string>();
    }
    entries.push_back(std::move(e));
  }
  return DescriptionCatalog(std::move(entries));
}

inline void save_catalog(const DescriptionCatalog& catalog, const std::filesystem::path& path) {
  std::vector<Json> rows;
  for (const auto& e : catalog.entries()) {
    Json row{{"id", e.id}, {"text", e.text}};
    if (e.source_image_id) row["source_image_id"] = *e.source_image_id;
    rows.push_back(std::move(row));
  }
  write_file_atomic(path, to_jsonl(rows));
}

/// Drops entries whose source image is excluded; entries without one are kept.
inline DescriptionCatalog overlap_filter(const DescriptionCatalog& catalog,
                                         const std::unordered_set<std::string>& excluded_image_ids) {
  std::vector<CatalogEntry> kept;
  for (const auto& e : catalog.entries()) {
    if (e.source_image_id && excluded_image_ids.contains(*e.source_image_id)) continue;
    kept.push_back(e);
  }
  return DescriptionCatalog(std::move(kept));
}

/// One id per line; blank lines and '#' comments ignored.
inline std::unordered_set<std::string> load_id_list(const std::filesystem::path& path) {
  std::unordered_set<std::string> ids;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    ids.insert(line.substr(b, e - b + 1));
  }
  return ids;
}

/// Restricts `store` to the catalog's ids, keeping store file order.
/// Every catalog id must have a row.
inline EmbeddingStore restrict_to_catalog(const EmbeddingStore& store,
                                          const DescriptionCatalog& catalog) {
  std::vector<std::size_t> rows;
  rows.reserve(catalog.size());
  for (const auto& e : catalog.entries()) {
    if (!store.find(e.id)) {
      throw InputError("catalog id '" + e.id + "' has no row in the description store");
    }
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (catalog.contains(store.id(i))) rows.push_back(i);
  }
  return store.subset(rows);
}

}  // namespace rapsg
