#pragma once

// Synthetic corpora with known ground truth, used by the tests and the
// btraits_synth tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "btraits/activation_store.hpp"

namespace btraits::synth {

/// Samples are sums of `active` distinct unit atoms with coefficients drawn
/// uniformly from [coef_min, coef_max].
struct DictionarySpec {
  int dim = 32;
  int atoms = 128;
  int active = 4;
  std::int64_t samples = 50000;
  double coef_min = 0.5;
  double coef_max = 1.5;
  std::uint64_t seed = 7;
};

struct DictionaryCorpus {
  Eigen::MatrixXd atoms;  // dim x atoms, unit columns
  PatchMatrix samples;    // samples x dim
};

DictionaryCorpus make_dictionary(const DictionarySpec& spec);

/// Fraction of atoms whose best-matching column of `decoder` (d x n) has
/// cosine >= threshold, by exhaustive search.
double recovered_fraction(const Eigen::MatrixXd& atoms, const Eigen::MatrixXd& decoder,
                          double threshold = 0.9);

/// Labelled image corpus: every patch carries either the shared background
/// atom or, inside one 2x2 block per image, its species' trait atom.
struct PlantedSpec {
  int dim = 8;
  int grid = 4;        // grid x grid patches
  int patch_size = 14;
  std::vector<int> images_per_species = {8, 7, 8, 7};
  int genera = 2;      // consecutive species share a genus
  double coef_min = 2.0;
  double coef_max = 3.0;
  double noise = 0.01;
  std::uint64_t seed = 11;
};

struct PlantedImage {
  std::string image_id;
  std::string species;
  std::string genus;
  int block_row = 0;  // top-left patch of the trait block
  int block_col = 0;
};

struct PlantedCorpus {
  std::filesystem::path shard;
  std::filesystem::path image_dir;
  Eigen::MatrixXd background;                     // dim x 1
  std::map<std::string, Eigen::VectorXd> traits;  // species -> trait atom
  std::map<std::string, std::string> genus_of;
  std::vector<PlantedImage> images;
};

/// Writes `dir`/planted.shard (+ sidecar) and one PNG per image under
/// `dir`/images. Source paths in the sidecar are absolute.
PlantedCorpus write_planted(const std::filesystem::path& dir, const PlantedSpec& spec = {});

PlantedCorpus planted_ground_truth(const PlantedSpec& spec);

}  // namespace btraits::synth
