#include "btraits/synthetic.hpp"

#include <Eigen/QR>

#include <algorithm>

#include "btraits/error.hpp"
#include "btraits/png_image.hpp"
#include "btraits/util.hpp"

namespace btraits::synth {

DictionaryCorpus make_dictionary(const DictionarySpec& spec) {
  if (spec.dim < 1 || spec.atoms < 1 || spec.active < 1 || spec.active > spec.atoms ||
      spec.samples < 1 || !(spec.coef_min <= spec.coef_max)) {
    throw usage_error("invalid dictionary spec");
  }
  Rng rng(spec.seed);
  DictionaryCorpus c;
  c.atoms.resize(spec.dim, spec.atoms);
  for (int j = 0; j < spec.atoms; ++j) {
    for (int i = 0; i < spec.dim; ++i) c.atoms(i, j) = rng.normal();
    c.atoms.col(j).normalize();
  }
  c.samples = PatchMatrix::Zero(spec.samples, spec.dim);
  std::vector<int> idx;
  Eigen::VectorXd v(spec.dim);
  for (std::int64_t s = 0; s < spec.samples; ++s) {
    idx.clear();
    while (static_cast<int>(idx.size()) < spec.active) {
      const int a = static_cast<int>(rng.below(spec.atoms));
      if (std::find(idx.begin(), idx.end(), a) == idx.end()) idx.push_back(a);
    }
    v.setZero();
    for (int a : idx) v += rng.uniform(spec.coef_min, spec.coef_max) * c.atoms.col(a);
    c.samples.row(s) = v.cast<float>().transpose();
  }
  return c;
}

double recovered_fraction(const Eigen::MatrixXd& atoms, const Eigen::MatrixXd& decoder,
                          double threshold) {
  if (atoms.rows() != decoder.rows()) throw usage_error("atom and decoder dims differ");
  if (atoms.cols() == 0) return 0.0;
  std::size_t hit = 0;
  for (Eigen::Index a = 0; a < atoms.cols(); ++a) {
    const double an = atoms.col(a).norm();
    double best = -1.0;
    for (Eigen::Index j = 0; j < decoder.cols(); ++j) {
      const double dn = decoder.col(j).norm();
      if (dn == 0.0 || an == 0.0) continue;
      best = std::max(best, atoms.col(a).dot(decoder.col(j)) / (an * dn));
    }
    if (best >= threshold) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(atoms.cols());
}

namespace {

constexpr const char* kGenera[] = {"Synthia", "Plantia", "Fictoria", "Mockella"};
constexpr const char* kEpithets[] = {"alba", "nigra", "rubra", "viridis", "lutea", "caerulea"};

struct Colour {
  std::uint8_t r, g, b;
};
constexpr Colour kBackgrounds[] = {
    {200, 190, 160}, {170, 200, 170}, {160, 170, 210}, {210, 170, 190}, {190, 190, 190}};
constexpr Colour kTraitColour{60, 40, 20};

}  // namespace

PlantedCorpus planted_ground_truth(const PlantedSpec& spec) {
  const int n_species = static_cast<int>(spec.images_per_species.size());
  if (spec.dim < n_species + 1) throw usage_error("planted corpus needs dim > species count");
  if (spec.grid < 2 || spec.genera < 1 || spec.genera > n_species || spec.genera > 4 ||
      n_species > 6 * spec.genera) {
    throw usage_error("invalid planted corpus spec");
  }
  Rng rng(spec.seed);
  Eigen::MatrixXd g(spec.dim, n_species + 1);
  for (Eigen::Index j = 0; j < g.cols(); ++j) {
    for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = rng.normal();
  }
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  PlantedCorpus c;
  c.background = q.col(0);
  const int per_genus = (n_species + spec.genera - 1) / spec.genera;
  int serial = 0;
  for (int s = 0; s < n_species; ++s) {
    const std::string genus = kGenera[s / per_genus];
    const std::string species = genus + " " + kEpithets[s % per_genus];
    c.traits[species] = q.col(s + 1);
    c.genus_of[species] = genus;
    for (int k = 0; k < spec.images_per_species[s]; ++k) {
      PlantedImage im;
      im.image_id = "img" + std::to_string(serial++);
      im.species = species;
      im.genus = genus;
      im.block_row = static_cast<int>(rng.below(spec.grid - 1));
      im.block_col = static_cast<int>(rng.below(spec.grid - 1));
      c.images.push_back(im);
    }
  }
  return c;
}

PlantedCorpus write_planted(const std::filesystem::path& dir, const PlantedSpec& spec) {
  auto c = planted_ground_truth(spec);
  c.image_dir = std::filesystem::absolute(dir / "images");
  c.shard = dir / "planted.shard";
  std::filesystem::create_directories(c.image_dir);

  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::pair<ImageRecord, PatchMatrix>> rows;
  std::map<std::string, int> species_index;
  for (const auto& [s, g] : c.genus_of) species_index.emplace(s, static_cast<int>(species_index.size()));
  const int side = spec.grid * spec.patch_size;
  for (const auto& im : c.images) {
    PatchMatrix p(spec.grid * spec.grid, spec.dim);
    const auto bg_colour = kBackgrounds[species_index.at(im.species) % 5];
    RgbImage png(side, side, bg_colour.r, bg_colour.g, bg_colour.b);
    for (int r = 0; r < spec.grid; ++r) {
      for (int col = 0; col < spec.grid; ++col) {
        const bool trait = r >= im.block_row && r < im.block_row + 2 && col >= im.block_col &&
                           col < im.block_col + 2;
        const Eigen::VectorXd& atom = trait ? c.traits.at(im.species) : c.background.col(0);
        Eigen::VectorXd v = rng.uniform(spec.coef_min, spec.coef_max) * atom;
        for (int i = 0; i < spec.dim; ++i) v(i) += spec.noise * rng.normal();
        p.row(r * spec.grid + col) = v.cast<float>().transpose();
        if (trait) {
          for (int y = r * spec.patch_size; y < (r + 1) * spec.patch_size; ++y) {
            for (int x = col * spec.patch_size; x < (col + 1) * spec.patch_size; ++x) {
              auto* px = png.at(x, y);
              px[0] = kTraitColour.r;
              px[1] = kTraitColour.g;
              px[2] = kTraitColour.b;
            }
          }
        }
      }
    }
    const auto png_path = c.image_dir / (im.image_id + ".png");
    const auto bytes = encode_png(png);
    write_file_atomic(png_path,
                      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    ImageRecord rec;
    rec.image_id = im.image_id;
    rec.species = im.species;
    rec.genus = im.genus;
    rec.source_path = png_path.string();
    rows.emplace_back(std::move(rec), std::move(p));
  }
  write_shard(rows,
              PatchGeometry{static_cast<std::uint32_t>(spec.dim), static_cast<std::uint16_t>(spec.grid),
                            static_cast<std::uint16_t>(spec.grid)},
              c.shard);
  return c;
}

}  // namespace btraits::synth
