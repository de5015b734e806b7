#pragma once

// Species-contrastive trait mining over aggregated SAE activations.
//
// For every species-labelled image i the active set is
//   Z_i = { j : a_i[j] > t_activation }.
// Per taxon, each latent's count is the number of images whose active set
// contains it, and its normalised frequency is that count over the taxon's
// total count across all latents. A latent z is salient for species s in
// genus g when
//   f_s(z) > t_freq  and  f_g(z) > t_freq  and  f_s(z) > f_g(z).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "btraits/sae_train.hpp"
#include "btraits/util.hpp"

namespace btraits::miner {

using LatentId = std::uint32_t;

struct LatentProfile {
  std::string image_id;
  std::string species;
  std::string genus;
  /// Active set with its aggregated values, sorted by latent id. Every value
  /// is strictly greater than the threshold used to build the profile.
  std::vector<std::pair<LatentId, float>> active;

  bool contains(LatentId latent) const;
  float activation(LatentId latent) const;  // 0 when inactive
  bool operator==(const LatentProfile&) const = default;
};

void to_json(json& j, const LatentProfile& p);
void from_json(const json& j, LatentProfile& p);

struct ProfileDiagnostics {
  std::uint64_t unlabeled_dropped = 0;
};

/// Thresholds aggregated activations with a strict '>' and drops images
/// without a species label.
std::vector<LatentProfile> build_profiles(std::span<const sae::ImageActivations> codes,
                                          double t_activation,
                                          ProfileDiagnostics* diagnostics = nullptr);

struct TraitTable {
  using Counts = std::map<std::string, std::map<LatentId, std::uint64_t>>;
  using Freqs = std::map<std::string, std::map<LatentId, double>>;

  std::map<std::string, std::string> genus_of;  // species -> genus
  Counts species_counts;
  Counts genus_counts;
  Freqs species_freq;  // empty row for a species with no activations
  Freqs genus_freq;

  /// Species whose images never activated any latent; they cannot be
  /// normalised and are excluded from selection.
  std::vector<std::string> inactive_species;
  /// Genera represented by a single species in the corpus.
  std::vector<std::string> single_species_genera;

  bool operator==(const TraitTable&) const = default;
};

/// Integer counts only; frequencies are filled in by finalize(). Partial
/// counters built from disjoint profile subsets merge commutatively.
class TraitCounter {
 public:
  void add(const LatentProfile& profile);
  void merge(const TraitCounter& other);
  TraitTable finalize() const;

 private:
  std::map<std::string, std::string> genus_of_;
  TraitTable::Counts species_counts_;
  std::map<std::string, std::uint64_t> images_per_species_;
};

/// Throws a data error if one species is seen under two genera.
TraitTable accumulate(std::span<const LatentProfile> profiles, unsigned threads = 1);

struct SalientTraitSet {
  std::map<std::string, std::vector<LatentId>> traits;  // per species, ascending ids
  std::map<std::string, std::string> genus_of;
  double t_activation = 0.0;
  double t_freq = 0.0;
  std::string checkpoint_id;
  std::string corpus_id;

  std::size_t total() const;
  bool operator==(const SalientTraitSet&) const = default;
};

SalientTraitSet select_salient(const TraitTable& table, double t_freq);

/// The k images of `species` whose active set contains `latent`, by
/// descending activation, ties by image_id.
std::vector<std::string> top_images_for(const std::string& species, LatentId latent, std::size_t k,
                                        std::span<const LatentProfile> profiles);

struct RankedImage {
  std::string image_id;
  float activation = 0.0f;
  bool operator==(const RankedImage&) const = default;
};

/// Corpus-wide ranking of images with a positive aggregated activation for
/// `latent`, same ordering rule as top_images_for.
std::vector<RankedImage> top_images(LatentId latent, std::size_t k,
                                    std::span<const sae::ImageActivations> codes);

// ---------------------------------------------------------------------------
// Line-delimited persistence

void write_profiles(const std::filesystem::path& path, std::span<const LatentProfile> profiles);
std::vector<LatentProfile> read_profiles(const std::filesystem::path& path);

void write_trait_table(const std::filesystem::path& path, const TraitTable& table);

/// First line is a header carrying thresholds and provenance, then one line
/// per (species, latent).
void write_salient(const std::filesystem::path& path, const SalientTraitSet& set);
SalientTraitSet read_salient(const std::filesystem::path& path);

}  // namespace btraits::miner
