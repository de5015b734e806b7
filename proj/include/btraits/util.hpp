#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace btraits {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Hashing / encoding

std::string sha256_hex(std::string_view bytes);
std::string sha256_file_hex(const std::filesystem::path& path);
std::string base64_encode(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Files

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);
/// Writes to a temporary sibling, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

/// Calls `fn(line_number, parsed)` for each non-blank line. Throws a data
/// error naming the line on malformed JSON.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(std::size_t, const json&)>& fn);
std::vector<json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<json>& records);

/// Expands shell-style globs. Patterns without wildcards pass through if
/// the file exists. Result is sorted and de-duplicated.
std::vector<std::filesystem::path> expand_globs(const std::vector<std::string>& patterns);

// ---------------------------------------------------------------------------
// Time

std::string utc_timestamp_now();

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// std::*_distribution output is implementation-defined; sampling here is
// done by hand on top of mt19937_64's raw stream, which the standard pins.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace btraits
