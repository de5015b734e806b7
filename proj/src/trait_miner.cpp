#include "btraits/trait_miner.hpp"

#include <algorithm>
#include <set>
#include <thread>

#include "btraits/error.hpp"
#include "btraits/log.hpp"

namespace btraits::miner {

namespace {

auto find_latent(const std::vector<std::pair<LatentId, float>>& v, LatentId latent) {
  return std::lower_bound(v.begin(), v.end(), latent,
                          [](const auto& e, LatentId l) { return e.first < l; });
}

// Descending activation, then ascending image id.
bool ranks_before(float a, const std::string& ida, float b, const std::string& idb) {
  if (a != b) return a > b;
  return ida < idb;
}

}  // namespace

bool LatentProfile::contains(LatentId latent) const {
  auto it = find_latent(active, latent);
  return it != active.end() && it->first == latent;
}

float LatentProfile::activation(LatentId latent) const {
  auto it = find_latent(active, latent);
  return (it != active.end() && it->first == latent) ? it->second : 0.0f;
}

void to_json(json& j, const LatentProfile& p) {
  json latents = json::array(), values = json::array();
  for (const auto& [l, v] : p.active) {
    latents.push_back(l);
    values.push_back(v);
  }
  j = json{{"image_id", p.image_id},
           {"species", p.species},
           {"genus", p.genus},
           {"active", std::move(latents)},
           {"values", std::move(values)}};
}

void from_json(const json& j, LatentProfile& p) {
  p.image_id = j.at("image_id").get<std::string>();
  p.species = j.at("species").get<std::string>();
  p.genus = j.at("genus").get<std::string>();
  const auto& latents = j.at("active");
  const auto& values = j.at("values");
  if (latents.size() != values.size()) throw data_error("profile length mismatch");
  p.active.clear();
  for (std::size_t i = 0; i < latents.size(); ++i) {
    p.active.emplace_back(latents[i].get<LatentId>(), values[i].get<float>());
  }
}

std::vector<LatentProfile> build_profiles(std::span<const sae::ImageActivations> codes,
                                          double t_activation, ProfileDiagnostics* diagnostics) {
  if (!(t_activation >= 0.0)) throw usage_error("t_activation must be >= 0");
  std::vector<LatentProfile> out;
  out.reserve(codes.size());
  std::uint64_t dropped = 0;
  for (const auto& c : codes) {
    if (!c.species) {
      ++dropped;
      continue;
    }
    if (!c.genus) throw data_error("image " + c.image_id + " has species but no genus");
    LatentProfile p{c.image_id, *c.species, *c.genus, {}};
    for (const auto& [latent, value] : c.entries) {
      if (static_cast<double>(value) > t_activation) p.active.emplace_back(latent, value);
    }
    std::sort(p.active.begin(), p.active.end());
    out.push_back(std::move(p));
  }
  if (dropped > 0) log::warn("dropped ", dropped, " image(s) without a species label");
  if (diagnostics) diagnostics->unlabeled_dropped = dropped;
  return out;
}

// ---------------------------------------------------------------------------

void TraitCounter::add(const LatentProfile& profile) {
  auto [it, inserted] = genus_of_.emplace(profile.species, profile.genus);
  if (!inserted && it->second != profile.genus) {
    throw data_error("species '" + profile.species + "' appears under genera '" + it->second +
                     "' and '" + profile.genus + "'");
  }
  auto& row = species_counts_[profile.species];
  // Active sets are sets: each image counts at most once per latent.
  LatentId prev = 0;
  bool first = true;
  for (const auto& [latent, value] : profile.active) {
    if (!first && latent == prev) continue;
    ++row[latent];
    prev = latent;
    first = false;
  }
}

void TraitCounter::merge(const TraitCounter& other) {
  for (const auto& [species, genus] : other.genus_of_) {
    auto [it, inserted] = genus_of_.emplace(species, genus);
    if (!inserted && it->second != genus) {
      throw data_error("species '" + species + "' appears under genera '" + it->second +
                       "' and '" + genus + "'");
    }
  }
  for (const auto& [species, row] : other.species_counts_) {
    auto& mine = species_counts_[species];
    for (const auto& [latent, count] : row) mine[latent] += count;
  }
}

TraitTable TraitCounter::finalize() const {
  TraitTable t;
  t.genus_of = genus_of_;
  t.species_counts = species_counts_;

  std::map<std::string, std::set<std::string>> species_in_genus;
  for (const auto& [species, genus] : genus_of_) {
    species_in_genus[genus].insert(species);
    auto& grow = t.genus_counts[genus];
    for (const auto& [latent, count] : species_counts_.at(species)) grow[latent] += count;
  }

  auto normalise = [](const TraitTable::Counts& counts, TraitTable::Freqs& freqs,
                      std::vector<std::string>* empty) {
    for (const auto& [taxon, row] : counts) {
      std::uint64_t total = 0;
      for (const auto& [latent, count] : row) total += count;
      auto& out = freqs[taxon];
      if (total == 0) {
        if (empty) empty->push_back(taxon);
        continue;
      }
      for (const auto& [latent, count] : row) {
        out[latent] = static_cast<double>(count) / static_cast<double>(total);
      }
    }
  };
  normalise(t.species_counts, t.species_freq, &t.inactive_species);
  normalise(t.genus_counts, t.genus_freq, nullptr);

  for (const auto& [genus, members] : species_in_genus) {
    if (members.size() == 1) t.single_species_genera.push_back(genus);
  }
  return t;
}

TraitTable accumulate(std::span<const LatentProfile> profiles, unsigned threads) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(profiles.size())));
  TraitCounter counter;
  if (threads <= 1) {
    for (const auto& p : profiles) counter.add(p);
  } else {
    std::vector<TraitCounter> partial(threads);
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    const std::size_t per = (profiles.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          const auto b = std::min(profiles.size(), t * per);
          const auto e = std::min(profiles.size(), b + per);
          for (auto i = b; i < e; ++i) partial[t].add(profiles[i]);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
    for (const auto& p : partial) counter.merge(p);
  }
  auto table = counter.finalize();
  for (const auto& s : table.inactive_species) {
    log::warn("species '", s, "' has no active latents; excluded from salience");
  }
  if (!table.single_species_genera.empty()) {
    log::info(table.single_species_genera.size(),
              " genus/genera contain a single species; those species rarely yield salient traits");
  }
  return table;
}

std::size_t SalientTraitSet::total() const {
  std::size_t n = 0;
  for (const auto& [s, v] : traits) n += v.size();
  return n;
}

SalientTraitSet select_salient(const TraitTable& table, double t_freq) {
  if (!(t_freq >= 0.0 && t_freq <= 1.0)) throw usage_error("t_freq must lie in [0, 1]");
  SalientTraitSet out;
  out.t_freq = t_freq;
  for (const auto& [species, row] : table.species_freq) {
    if (row.empty()) continue;
    const auto& genus = table.genus_of.at(species);
    const auto& genus_row = table.genus_freq.at(genus);
    std::vector<LatentId> kept;
    for (const auto& [latent, fs] : row) {
      const double fg = genus_row.at(latent);
      if (fs > t_freq && fg > t_freq && fs > fg) kept.push_back(latent);
    }
    if (!kept.empty()) {
      out.traits.emplace(species, std::move(kept));
      out.genus_of.emplace(species, genus);
    }
  }
  return out;
}

std::vector<std::string> top_images_for(const std::string& species, LatentId latent, std::size_t k,
                                        std::span<const LatentProfile> profiles) {
  std::vector<std::pair<float, const std::string*>> hits;
  bool species_seen = false;
  for (const auto& p : profiles) {
    if (p.species != species) continue;
    species_seen = true;
    auto it = find_latent(p.active, latent);
    if (it != p.active.end() && it->first == latent) hits.emplace_back(it->second, &p.image_id);
  }
  if (!species_seen) {
    log::warn("top_images_for: unknown species '", species, "'");
    return {};
  }
  if (hits.empty()) {
    log::warn("top_images_for: latent ", latent, " never active for species '", species, "'");
    return {};
  }
  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    return ranks_before(a.first, *a.second, b.first, *b.second);
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(k, hits.size()); ++i) out.push_back(*hits[i].second);
  return out;
}

std::vector<RankedImage> top_images(LatentId latent, std::size_t k,
                                    std::span<const sae::ImageActivations> codes) {
  std::vector<RankedImage> hits;
  for (const auto& c : codes) {
    const float a = c.at(latent);
    if (a > 0.0f) hits.push_back({c.image_id, a});
  }
  std::sort(hits.begin(), hits.end(), [](const RankedImage& a, const RankedImage& b) {
    return ranks_before(a.activation, a.image_id, b.activation, b.image_id);
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------------------

void write_profiles(const std::filesystem::path& path, std::span<const LatentProfile> profiles) {
  std::vector<json> rows;
  rows.reserve(profiles.size());
  for (const auto& p : profiles) rows.emplace_back(p);
  write_jsonl(path, rows);
}

std::vector<LatentProfile> read_profiles(const std::filesystem::path& path) {
  std::vector<LatentProfile> out;
  for_each_jsonl(path, [&](std::size_t, const json& j) { out.push_back(j.get<LatentProfile>()); });
  return out;
}

void write_trait_table(const std::filesystem::path& path, const TraitTable& table) {
  std::vector<json> rows;
  for (const auto& [species, row] : table.species_counts) {
    const auto& freq = table.species_freq.at(species);
    for (const auto& [latent, count] : row) {
      auto f = freq.find(latent);
      rows.push_back({{"rank", "species"},
                      {"taxon", species},
                      {"genus", table.genus_of.at(species)},
                      {"latent", latent},
                      {"count", count},
                      {"freq", f == freq.end() ? 0.0 : f->second}});
    }
  }
  for (const auto& [genus, row] : table.genus_counts) {
    const auto& freq = table.genus_freq.at(genus);
    for (const auto& [latent, count] : row) {
      auto f = freq.find(latent);
      rows.push_back({{"rank", "genus"},
                      {"taxon", genus},
                      {"latent", latent},
                      {"count", count},
                      {"freq", f == freq.end() ? 0.0 : f->second}});
    }
  }
  write_jsonl(path, rows);
}

void write_salient(const std::filesystem::path& path, const SalientTraitSet& set) {
  std::vector<json> rows;
  rows.push_back({{"kind", "header"},
                  {"t_activation", set.t_activation},
                  {"t_freq", set.t_freq},
                  {"checkpoint", set.checkpoint_id},
                  {"corpus", set.corpus_id},
                  {"species_with_traits", set.traits.size()},
                  {"traits", set.total()}});
  for (const auto& [species, latents] : set.traits) {
    for (auto latent : latents) {
      rows.push_back({{"kind", "trait"},
                      {"species", species},
                      {"genus", set.genus_of.at(species)},
                      {"latent", latent}});
    }
  }
  write_jsonl(path, rows);
}

SalientTraitSet read_salient(const std::filesystem::path& path) {
  SalientTraitSet set;
  bool header = false;
  for_each_jsonl(path, [&](std::size_t lineno, const json& j) {
    const auto kind = j.value("kind", std::string{});
    if (kind == "header") {
      set.t_activation = j.at("t_activation").get<double>();
      set.t_freq = j.at("t_freq").get<double>();
      set.checkpoint_id = j.value("checkpoint", std::string{});
      set.corpus_id = j.value("corpus", std::string{});
      header = true;
    } else if (kind == "trait") {
      const auto species = j.at("species").get<std::string>();
      set.traits[species].push_back(j.at("latent").get<LatentId>());
      set.genus_of[species] = j.at("genus").get<std::string>();
    } else {
      throw data_error(path.string() + ":" + std::to_string(lineno) + ": unknown record kind");
    }
  });
  if (!header) throw data_error(path.string() + ": missing header record");
  for (auto& [s, v] : set.traits) std::sort(v.begin(), v.end());
  return set;
}

}  // namespace btraits::miner
