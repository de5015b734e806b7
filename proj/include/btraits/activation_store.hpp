#pragma once

// Binary activation shards: per-patch backbone features for a batch of images
// plus a line-delimited metadata sidecar carrying taxon labels.
//
// Shard layout (all integers little-endian):
//
//   offset  size  field
//        0     8  magic "BTRAITS1"
//        8     2  version (u16)
//       10     4  feature_dim d (u32)
//       14     2  grid_h (u16)
//       16     2  grid_w (u16)
//       18     8  image_count (u64)
//       26     1  dtype_code (u8, 0 = f32le)
//       27     7  zero padding
//       34     -  payload: image_count * grid_h * grid_w * d f32le values,
//                 image-major, patches row-major, feature fastest
//
// The sidecar lives next to the shard as "<shard>.meta.jsonl", one record
// per image in payload order.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <iterator>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "btraits/util.hpp"

namespace btraits {

static_assert(std::endian::native == std::endian::little,
              "shard and checkpoint readers assume a little-endian host");

inline constexpr char kShardMagic[8] = {'B', 'T', 'R', 'A', 'I', 'T', 'S', '1'};
inline constexpr std::uint16_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 34;

enum class DType : std::uint8_t { F32LE = 0 };

struct ShardHeader {
  std::uint16_t version = kShardVersion;
  std::uint32_t feature_dim = 0;
  std::uint16_t grid_h = 0;
  std::uint16_t grid_w = 0;
  std::uint64_t image_count = 0;
  DType dtype = DType::F32LE;

  std::size_t patches_per_image() const { return std::size_t{grid_h} * grid_w; }
  std::uint64_t floats_per_image() const { return std::uint64_t{patches_per_image()} * feature_dim; }
  std::uint64_t payload_bytes() const { return image_count * floats_per_image() * sizeof(float); }

  std::array<std::uint8_t, kShardHeaderBytes> encode() const;
  /// Throws a data error on bad magic, unsupported version/dtype or zero dims.
  static ShardHeader decode(std::span<const std::uint8_t> bytes);

  bool operator==(const ShardHeader&) const = default;
};

struct ShardIndex {
  std::string shard;  // shard file name
  std::uint64_t offset = 0;  // image position inside the shard

  bool operator==(const ShardIndex&) const = default;
};

struct ImageRecord {
  std::string image_id;
  std::optional<std::string> species;
  std::optional<std::string> genus;
  std::string source_path;
  ShardIndex shard_index;

  bool operator==(const ImageRecord&) const = default;
};

void to_json(json& j, const ImageRecord& r);
void from_json(const json& j, ImageRecord& r);

/// grid_h*grid_w rows, one d-dimensional feature vector per patch.
using PatchMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path);

/// Streams images into a shard. Records are buffered (metadata only); the
/// payload goes straight to disk. finish() patches the header and writes
/// the sidecar; a writer destroyed without finish() leaves no shard behind.
class ShardWriter {
 public:
  ShardWriter(std::filesystem::path path, std::uint32_t feature_dim, std::uint16_t grid_h,
              std::uint16_t grid_w);
  ~ShardWriter();
  ShardWriter(const ShardWriter&) = delete;
  ShardWriter& operator=(const ShardWriter&) = delete;

  /// shard_index of `record` is overwritten with this shard's name/position.
  void append(ImageRecord record, const PatchMatrix& patches);
  ShardHeader finish();

  std::uint64_t image_count() const { return records_.size(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::vector<ImageRecord> records_;
};

struct PatchGeometry {
  std::uint32_t feature_dim = 0;
  std::uint16_t grid_h = 0;
  std::uint16_t grid_w = 0;
};

/// One-shot convenience over ShardWriter.
ShardHeader write_shard(std::span<const std::pair<ImageRecord, PatchMatrix>> images,
                        PatchGeometry geometry, const std::filesystem::path& path);

/// Read-only memory-mapped shard. Safe to share across threads.
class ShardReader {
 public:
  /// Validates header, payload length and sidecar consistency up front.
  /// Feature finiteness is checked lazily, per image, on read.
  explicit ShardReader(const std::filesystem::path& path);
  ~ShardReader();
  ShardReader(ShardReader&&) noexcept;
  ShardReader& operator=(ShardReader&&) noexcept;

  const ShardHeader& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }
  std::uint64_t size() const { return header_.image_count; }
  const std::vector<ImageRecord>& records() const { return records_; }
  const ImageRecord& record(std::uint64_t i) const { return records_.at(i); }

  /// Copies image `i` into `out` (resized as needed). Throws a data error on
  /// any non-finite value.
  void read_patches(std::uint64_t i, PatchMatrix& out) const;
  PatchMatrix patches(std::uint64_t i) const;
  /// Copies one patch vector without finiteness checks beyond the caller's.
  void read_patch(std::uint64_t image, std::size_t patch, std::span<float> out) const;

  struct Entry {
    const ImageRecord* record = nullptr;
    PatchMatrix patches;
  };

  /// Input iterator that reuses one PatchMatrix buffer.
  class iterator {
   public:
    using iterator_category = std::input_iterator_tag;
    using value_type = Entry;
    using difference_type = std::ptrdiff_t;
    using pointer = const Entry*;
    using reference = const Entry&;

    iterator() = default;
    iterator(const ShardReader* reader, std::uint64_t pos);
    reference operator*() const { return entry_; }
    pointer operator->() const { return &entry_; }
    iterator& operator++();
    void operator++(int) { ++*this; }
    bool operator==(const iterator& o) const { return pos_ == o.pos_; }

   private:
    void load();
    const ShardReader* reader_ = nullptr;
    std::uint64_t pos_ = 0;
    Entry entry_;
  };

  iterator begin() const { return {this, 0}; }
  iterator end() const { return {nullptr, size()}; }

 private:
  struct Mapping;
  std::filesystem::path path_;
  std::unique_ptr<Mapping> map_;
  ShardHeader header_;
  std::vector<ImageRecord> records_;
};

inline ShardReader read_shard(const std::filesystem::path& path) { return ShardReader(path); }

/// Loads a metadata sidecar on its own, for stats and validation.
std::vector<ImageRecord> load_metadata(const std::filesystem::path& sidecar);

struct CorpusStats {
  std::uint64_t images = 0;
  std::uint64_t labeled_images = 0;    // species present
  std::uint64_t unlabeled_images = 0;  // species absent
  std::uint64_t species = 0;
  std::uint64_t genera = 0;

  bool operator==(const CorpusStats&) const = default;
};

CorpusStats corpus_stats(std::span<const ImageRecord> metadata);
json to_json(const CorpusStats& s);

// ---------------------------------------------------------------------------

/// Random access to a flat collection of d-dimensional patch vectors; the
/// SAE trainer samples minibatches through this.
class PatchSource {
 public:
  virtual ~PatchSource() = default;
  virtual std::size_t dim() const = 0;
  virtual std::uint64_t size() const = 0;
  virtual void fetch(std::uint64_t index, std::span<float> out) const = 0;
};

/// Several shards with matching geometry, addressed by image id or by flat
/// patch index.
class ShardSet : public PatchSource {
 public:
  explicit ShardSet(const std::vector<std::filesystem::path>& shard_paths);

  std::size_t dim() const override { return geometry_.feature_dim; }
  std::uint64_t size() const override { return total_images_ * geometry_.patches_per_image(); }
  void fetch(std::uint64_t index, std::span<float> out) const override;

  /// Geometry shared by all shards (image_count is the corpus total).
  const ShardHeader& geometry() const { return geometry_; }
  std::uint64_t image_count() const { return total_images_; }
  const std::vector<ShardReader>& shards() const { return shards_; }
  std::vector<ImageRecord> records() const;

  const ImageRecord* find(const std::string& image_id) const;
  PatchMatrix patches(const std::string& image_id) const;

  /// Visits every image in shard order, reusing one patch buffer.
  template <typename Fn>
  void for_each_image(Fn&& fn) const {
    PatchMatrix buf;
    for (const auto& shard : shards_) {
      for (std::uint64_t i = 0; i < shard.size(); ++i) {
        shard.read_patches(i, buf);
        fn(shard.record(i), buf);
      }
    }
  }

 private:
  std::vector<ShardReader> shards_;
  std::vector<std::uint64_t> first_image_;  // prefix sums over shards
  std::unordered_map<std::string, std::pair<std::size_t, std::uint64_t>> by_id_;
  ShardHeader geometry_;
  std::uint64_t total_images_ = 0;
};

}  // namespace btraits
