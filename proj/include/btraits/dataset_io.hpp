#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "btraits/captioner.hpp"
#include "btraits/util.hpp"

namespace btraits::dataset {

inline constexpr int kSchemaVersion = 1;

struct ImageBoxes {
  std::string image_id;
  json boxes = json::array();  // localize::to_json(BoundingBox) objects
};

/// One row of the dataset: a (species, latent, image set) and its description.
struct TraitAnnotation {
  std::string annotation_id;
  std::string species;
  std::string genus;
  std::uint32_t latent = 0;
  caption::PromptMode mode = caption::PromptMode::Multi;
  std::vector<ImageBoxes> images;
  std::string description;
  std::vector<caption::TraitPart> parts;
  double t_activation = 0.0;
  double t_freq = 0.0;
  std::string model;
  std::string template_id;
  std::string checkpoint;
  std::string corpus;
  std::string created_at;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  std::optional<std::string> expanded_from;  // set on per-image rows
};

/// Digest of species, latent, mode and image ids.
std::string make_annotation_id(const TraitAnnotation& a);

json to_json(const TraitAnnotation& a);
/// Throws on missing or mistyped fields.
TraitAnnotation annotation_from_json(const json& j);

/// Every invariant the row breaks; empty when valid. Never throws.
/// `known_images`, when given, must contain every referenced image id.
std::vector<std::string> check_record(const json& j,
                                      const std::set<std::string>* known_images = nullptr);

struct DatasetStats {
  std::size_t species = 0;
  std::size_t genera = 0;
  std::size_t unique_images = 0;
  std::size_t samples = 0;
  double mean_traits_per_image = 0.0;
};

json to_json(const DatasetStats& s);
DatasetStats compute_stats(const std::vector<TraitAnnotation>& rows);

struct EmitOptions {
  bool expand_per_image = false;
  const std::set<std::string>* known_images = nullptr;
};

struct EmitReport {
  std::size_t written = 0;
  std::size_t quarantined = 0;
  DatasetStats stats;
};

/// Writes valid rows to `dataset`, rejects to `quarantine` (one JSON object
/// per line with the record and its reasons) and stats JSON to `stats_path`.
/// All three files are always written, possibly empty.
EmitReport emit(const std::vector<TraitAnnotation>& annotations,
                const std::filesystem::path& dataset, const std::filesystem::path& quarantine,
                const std::filesystem::path& stats_path, const EmitOptions& options = {});

struct Violation {
  std::size_t line = 0;
  std::string message;
};

struct ValidationReport {
  std::size_t lines = 0;    // non-blank lines
  std::size_t records = 0;  // lines that parsed and checked clean
  std::vector<Violation> violations;
  DatasetStats stats;       // over the clean records
  bool ok() const { return violations.empty(); }
};

json to_json(const ValidationReport& r);

/// Re-checks every line. Reports, never throws, for anything but an
/// unreadable file (io error).
ValidationReport validate(const std::filesystem::path& dataset,
                          const std::set<std::string>* known_images = nullptr);
ValidationReport validate_text(const std::string& contents,
                               const std::set<std::string>* known_images = nullptr);

}  // namespace btraits::dataset
