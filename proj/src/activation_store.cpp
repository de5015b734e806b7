#include "btraits/activation_store.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cmath>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_set>

#include "btraits/error.hpp"

namespace btraits {

namespace {

template <typename T>
void put_le(std::uint8_t* dst, T value) {
  std::memcpy(dst, &value, sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* src) {
  T value;
  std::memcpy(&value, src, sizeof(T));
  return value;
}

std::optional<std::string> optional_string(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<std::string>();
}

void check_record(const ImageRecord& r) {
  if (r.image_id.empty()) throw data_error("image record with empty image_id");
  if (r.species && !r.genus) {
    throw data_error("image " + r.image_id + " has species but no genus");
  }
}

}  // namespace

std::array<std::uint8_t, kShardHeaderBytes> ShardHeader::encode() const {
  std::array<std::uint8_t, kShardHeaderBytes> out{};
  std::memcpy(out.data(), kShardMagic, 8);
  put_le(out.data() + 8, version);
  put_le(out.data() + 10, feature_dim);
  put_le(out.data() + 14, grid_h);
  put_le(out.data() + 16, grid_w);
  put_le(out.data() + 18, image_count);
  out[26] = static_cast<std::uint8_t>(dtype);
  return out;
}

ShardHeader ShardHeader::decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kShardHeaderBytes) throw data_error("shard truncated: incomplete header");
  if (std::memcmp(bytes.data(), kShardMagic, 8) != 0) throw data_error("shard has bad magic");
  ShardHeader h;
  h.version = get_le<std::uint16_t>(bytes.data() + 8);
  if (h.version != kShardVersion) {
    throw data_error("unsupported shard version " + std::to_string(h.version));
  }
  h.feature_dim = get_le<std::uint32_t>(bytes.data() + 10);
  h.grid_h = get_le<std::uint16_t>(bytes.data() + 14);
  h.grid_w = get_le<std::uint16_t>(bytes.data() + 16);
  h.image_count = get_le<std::uint64_t>(bytes.data() + 18);
  if (bytes[26] != static_cast<std::uint8_t>(DType::F32LE)) {
    throw data_error("unsupported shard dtype code " + std::to_string(bytes[26]));
  }
  if (h.feature_dim == 0 || h.grid_h == 0 || h.grid_w == 0) {
    throw data_error("shard header has a zero dimension");
  }
  return h;
}

void to_json(json& j, const ImageRecord& r) {
  j = json{{"image_id", r.image_id},
           {"species", r.species ? json(*r.species) : json(nullptr)},
           {"genus", r.genus ? json(*r.genus) : json(nullptr)},
           {"source_path", r.source_path},
           {"shard", r.shard_index.shard},
           {"offset", r.shard_index.offset}};
}

void from_json(const json& j, ImageRecord& r) {
  r.image_id = j.at("image_id").get<std::string>();
  r.species = optional_string(j, "species");
  r.genus = optional_string(j, "genus");
  r.source_path = j.value("source_path", std::string{});
  r.shard_index.shard = j.value("shard", std::string{});
  r.shard_index.offset = j.value("offset", std::uint64_t{0});
}

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path) {
  auto p = shard_path;
  p += ".meta.jsonl";
  return p;
}

// ---------------------------------------------------------------------------
// Writer

struct ShardWriter::Impl {
  std::filesystem::path path;
  std::filesystem::path tmp;
  std::ofstream out;
  ShardHeader header;
  std::unordered_set<std::string> ids;
  bool finished = false;
};

ShardWriter::ShardWriter(std::filesystem::path path, std::uint32_t feature_dim,
                         std::uint16_t grid_h, std::uint16_t grid_w)
    : impl_(std::make_unique<Impl>()) {
  if (feature_dim == 0 || grid_h == 0 || grid_w == 0) {
    throw data_error("shard dimensions must be positive");
  }
  impl_->path = std::move(path);
  impl_->tmp = impl_->path;
  impl_->tmp += ".partial";
  impl_->header.feature_dim = feature_dim;
  impl_->header.grid_h = grid_h;
  impl_->header.grid_w = grid_w;
  if (impl_->path.has_parent_path()) std::filesystem::create_directories(impl_->path.parent_path());
  impl_->out.open(impl_->tmp, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw io_error("cannot create " + impl_->tmp.string());
  const auto hdr = impl_->header.encode();
  impl_->out.write(reinterpret_cast<const char*>(hdr.data()), hdr.size());
}

ShardWriter::~ShardWriter() {
  if (impl_ && !impl_->finished) {
    impl_->out.close();
    std::error_code ec;
    std::filesystem::remove(impl_->tmp, ec);
  }
}

void ShardWriter::append(ImageRecord record, const PatchMatrix& patches) {
  auto& h = impl_->header;
  if (impl_->finished) throw std::logic_error("ShardWriter::append after finish");
  if (static_cast<std::size_t>(patches.rows()) != h.patches_per_image() ||
      static_cast<std::size_t>(patches.cols()) != h.feature_dim) {
    throw data_error("image " + record.image_id + ": patch matrix is " +
                     std::to_string(patches.rows()) + "x" + std::to_string(patches.cols()) +
                     ", shard expects " + std::to_string(h.patches_per_image()) + "x" +
                     std::to_string(h.feature_dim));
  }
  check_record(record);
  if (!impl_->ids.insert(record.image_id).second) {
    throw data_error("duplicate image_id " + record.image_id);
  }
  if (!patches.allFinite()) throw data_error("image " + record.image_id + " has non-finite features");
  record.shard_index = {impl_->path.filename().string(), records_.size()};
  impl_->out.write(reinterpret_cast<const char*>(patches.data()),
                   static_cast<std::streamsize>(patches.size() * sizeof(float)));
  if (!impl_->out) throw io_error("write failed for " + impl_->tmp.string());
  records_.push_back(std::move(record));
}

ShardHeader ShardWriter::finish() {
  if (impl_->finished) return impl_->header;
  impl_->header.image_count = records_.size();
  const auto hdr = impl_->header.encode();
  impl_->out.seekp(0);
  impl_->out.write(reinterpret_cast<const char*>(hdr.data()), hdr.size());
  impl_->out.close();
  if (!impl_->out) throw io_error("write failed for " + impl_->tmp.string());

  std::string meta;
  for (const auto& r : records_) {
    meta += json(r).dump();
    meta += '\n';
  }
  write_file_atomic(sidecar_path(impl_->path), meta);
  std::filesystem::rename(impl_->tmp, impl_->path);
  impl_->finished = true;
  return impl_->header;
}

ShardHeader write_shard(std::span<const std::pair<ImageRecord, PatchMatrix>> images,
                        PatchGeometry geometry, const std::filesystem::path& path) {
  ShardWriter w(path, geometry.feature_dim, geometry.grid_h, geometry.grid_w);
  for (const auto& [rec, mat] : images) w.append(rec, mat);
  return w.finish();
}

// ---------------------------------------------------------------------------
// Reader

struct ShardReader::Mapping {
  int fd = -1;
  const std::uint8_t* data = nullptr;
  std::size_t length = 0;

  explicit Mapping(const std::filesystem::path& path) {
    fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) throw io_error("cannot open shard " + path.string());
    struct stat st{};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw io_error("cannot stat shard " + path.string());
    }
    length = static_cast<std::size_t>(st.st_size);
    if (length > 0) {
      void* p = ::mmap(nullptr, length, PROT_READ, MAP_SHARED, fd, 0);
      if (p == MAP_FAILED) {
        ::close(fd);
        throw io_error("cannot map shard " + path.string());
      }
      data = static_cast<const std::uint8_t*>(p);
    }
  }
  ~Mapping() {
    if (data) ::munmap(const_cast<std::uint8_t*>(data), length);
    if (fd >= 0) ::close(fd);
  }
  Mapping(const Mapping&) = delete;
  Mapping& operator=(const Mapping&) = delete;
};

ShardReader::ShardReader(const std::filesystem::path& path)
    : path_(path), map_(std::make_unique<Mapping>(path)) {
  header_ = ShardHeader::decode({map_->data, map_->length});
  const auto available = map_->length - kShardHeaderBytes;
  if (available < header_.payload_bytes()) {
    throw data_error("shard " + path.string() + " truncated: payload has " +
                     std::to_string(available) + " bytes, header declares " +
                     std::to_string(header_.payload_bytes()));
  }
  if (available > header_.payload_bytes()) {
    throw data_error("shard " + path.string() + " has " +
                     std::to_string(available - header_.payload_bytes()) + " trailing bytes");
  }

  const auto meta = sidecar_path(path);
  if (!std::filesystem::exists(meta)) throw data_error("missing metadata sidecar " + meta.string());
  records_.reserve(header_.image_count);
  for_each_jsonl(meta, [&](std::size_t lineno, const json& j) {
    ImageRecord r;
    try {
      r = j.get<ImageRecord>();
    } catch (const json::exception& e) {
      throw data_error(meta.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    check_record(r);
    if (r.shard_index.offset != records_.size()) {
      throw data_error(meta.string() + ":" + std::to_string(lineno) + ": offset " +
                       std::to_string(r.shard_index.offset) + " out of order");
    }
    records_.push_back(std::move(r));
  });
  if (records_.size() != header_.image_count) {
    throw data_error("sidecar " + meta.string() + " has " + std::to_string(records_.size()) +
                     " records, shard has " + std::to_string(header_.image_count) + " images");
  }
}

ShardReader::~ShardReader() = default;
ShardReader::ShardReader(ShardReader&&) noexcept = default;
ShardReader& ShardReader::operator=(ShardReader&&) noexcept = default;

void ShardReader::read_patches(std::uint64_t i, PatchMatrix& out) const {
  if (i >= header_.image_count) throw std::out_of_range("shard image index out of range");
  out.resize(static_cast<Eigen::Index>(header_.patches_per_image()),
             static_cast<Eigen::Index>(header_.feature_dim));
  const auto bytes = header_.floats_per_image() * sizeof(float);
  // Payload starts at byte 34, so floats are not 4-byte aligned in the map.
  std::memcpy(out.data(), map_->data + kShardHeaderBytes + i * bytes, bytes);
  if (!out.allFinite()) {
    throw data_error("shard " + path_.string() + ": non-finite feature in image " +
                     records_[i].image_id);
  }
}

PatchMatrix ShardReader::patches(std::uint64_t i) const {
  PatchMatrix m;
  read_patches(i, m);
  return m;
}

void ShardReader::read_patch(std::uint64_t image, std::size_t patch, std::span<float> out) const {
  const auto d = header_.feature_dim;
  const auto offset = kShardHeaderBytes +
                      (image * header_.floats_per_image() + std::uint64_t{patch} * d) * sizeof(float);
  std::memcpy(out.data(), map_->data + offset, std::size_t{d} * sizeof(float));
}

ShardReader::iterator::iterator(const ShardReader* reader, std::uint64_t pos)
    : reader_(reader), pos_(pos) {
  if (reader_ && pos_ < reader_->size()) load();
}

ShardReader::iterator& ShardReader::iterator::operator++() {
  ++pos_;
  if (reader_ && pos_ < reader_->size()) load();
  return *this;
}

void ShardReader::iterator::load() {
  entry_.record = &reader_->record(pos_);
  reader_->read_patches(pos_, entry_.patches);
}

std::vector<ImageRecord> load_metadata(const std::filesystem::path& sidecar) {
  std::vector<ImageRecord> out;
  for_each_jsonl(sidecar, [&](std::size_t lineno, const json& j) {
    try {
      out.push_back(j.get<ImageRecord>());
    } catch (const json::exception& e) {
      throw data_error(sidecar.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    check_record(out.back());
  });
  return out;
}

CorpusStats corpus_stats(std::span<const ImageRecord> metadata) {
  CorpusStats s;
  std::set<std::string> species, genera;
  for (const auto& r : metadata) {
    ++s.images;
    if (r.species) {
      ++s.labeled_images;
      species.insert(*r.species);
    } else {
      ++s.unlabeled_images;
    }
    if (r.genus) genera.insert(*r.genus);
  }
  s.species = species.size();
  s.genera = genera.size();
  return s;
}

json to_json(const CorpusStats& s) {
  return {{"images", s.images},
          {"labeled_images", s.labeled_images},
          {"unlabeled_images", s.unlabeled_images},
          {"species", s.species},
          {"genera", s.genera}};
}

// ---------------------------------------------------------------------------
// ShardSet

ShardSet::ShardSet(const std::vector<std::filesystem::path>& shard_paths) {
  if (shard_paths.empty()) throw usage_error("no activation shards given");
  shards_.reserve(shard_paths.size());
  for (const auto& p : shard_paths) {
    shards_.emplace_back(p);
    const auto& h = shards_.back().header();
    if (shards_.size() == 1) {
      geometry_ = h;
    } else if (h.feature_dim != geometry_.feature_dim || h.grid_h != geometry_.grid_h ||
               h.grid_w != geometry_.grid_w) {
      throw data_error("shard " + p.string() + " geometry differs from " +
                       shards_.front().path().string());
    }
    first_image_.push_back(total_images_);
    const auto shard_idx = shards_.size() - 1;
    for (std::uint64_t i = 0; i < h.image_count; ++i) {
      const auto& id = shards_.back().record(i).image_id;
      if (!by_id_.emplace(id, std::make_pair(shard_idx, i)).second) {
        throw data_error("duplicate image_id " + id + " across shards");
      }
    }
    total_images_ += h.image_count;
  }
  geometry_.image_count = total_images_;
}

void ShardSet::fetch(std::uint64_t index, std::span<float> out) const {
  const auto ppi = geometry_.patches_per_image();
  const auto image = index / ppi;
  const auto patch = static_cast<std::size_t>(index % ppi);
  const auto it = std::upper_bound(first_image_.begin(), first_image_.end(), image);
  const auto s = static_cast<std::size_t>(std::distance(first_image_.begin(), it)) - 1;
  shards_[s].read_patch(image - first_image_[s], patch, out);
}

std::vector<ImageRecord> ShardSet::records() const {
  std::vector<ImageRecord> out;
  out.reserve(total_images_);
  for (const auto& s : shards_) out.insert(out.end(), s.records().begin(), s.records().end());
  return out;
}

const ImageRecord* ShardSet::find(const std::string& image_id) const {
  auto it = by_id_.find(image_id);
  if (it == by_id_.end()) return nullptr;
  return &shards_[it->second.first].record(it->second.second);
}

PatchMatrix ShardSet::patches(const std::string& image_id) const {
  auto it = by_id_.find(image_id);
  if (it == by_id_.end()) throw data_error("unknown image_id " + image_id);
  return shards_[it->second.first].patches(it->second.second);
}

}  // namespace btraits
