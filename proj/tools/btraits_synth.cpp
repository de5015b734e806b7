// Writes synthetic corpora with known ground truth.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "btraits/error.hpp"
#include "btraits/synthetic.hpp"
#include "btraits/util.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic corpora for btraits"};
  app.require_subcommand(1);

  auto* planted = app.add_subcommand("planted", "labelled image corpus with planted trait atoms");
  std::string planted_dir;
  std::uint64_t planted_seed = 11;
  planted->add_option("dir", planted_dir, "output directory")->required();
  planted->add_option("--seed", planted_seed, "corpus seed");

  auto* dict = app.add_subcommand("dictionary", "k-sparse dictionary corpus as a 1x1-grid shard");
  std::string dict_dir;
  btraits::synth::DictionarySpec spec;
  dict->add_option("dir", dict_dir, "output directory")->required();
  dict->add_option("--dim", spec.dim);
  dict->add_option("--atoms", spec.atoms);
  dict->add_option("--active", spec.active);
  dict->add_option("--samples", spec.samples);
  dict->add_option("--coef-min", spec.coef_min);
  dict->add_option("--coef-max", spec.coef_max);
  dict->add_option("--seed", spec.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*planted) {
      btraits::synth::PlantedSpec ps;
      ps.seed = planted_seed;
      const auto c = btraits::synth::write_planted(planted_dir, ps);
      auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.begin(), v.end()); };
      btraits::json images = btraits::json::array();
      for (const auto& im : c.images) {
        images.push_back({{"image_id", im.image_id},
                          {"species", im.species},
                          {"genus", im.genus},
                          {"block_row", im.block_row},
                          {"block_col", im.block_col}});
      }
      btraits::json traits = btraits::json::object();
      for (const auto& [species, atom] : c.traits) traits[species] = vec(atom);
      const btraits::json truth{
          {"images", images}, {"traits", traits}, {"background", vec(c.background.col(0))}};
      btraits::write_file_atomic(std::filesystem::path(planted_dir) / "truth.json",
                                 truth.dump(2) + "\n");
      std::cout << c.shard.string() << "\n";
    }
    if (*dict) {
      const auto c = btraits::synth::make_dictionary(spec);
      std::filesystem::create_directories(dict_dir);
      const auto shard = std::filesystem::path(dict_dir) / "dictionary.shard";
      btraits::ShardWriter w(shard, static_cast<std::uint32_t>(spec.dim), 1, 1);
      btraits::PatchMatrix row(1, spec.dim);
      for (Eigen::Index i = 0; i < c.samples.rows(); ++i) {
        btraits::ImageRecord rec;
        rec.image_id = "s" + std::to_string(i);
        row = c.samples.row(i);
        w.append(rec, row);
      }
      w.finish();
      std::ofstream atoms(std::filesystem::path(dict_dir) / "atoms.txt");
      atoms.precision(17);
      atoms << c.atoms.transpose() << "\n";
      std::cout << shard.string() << "\n";
    }
  } catch (const btraits::Error& e) {
    std::cerr << "[error] " << e.what() << "\n";
    return e.kind() == btraits::ErrorKind::Usage ? 1 : 2;
  }
  return 0;
}
