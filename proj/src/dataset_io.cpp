#include "btraits/dataset_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "btraits/error.hpp"

namespace btraits::dataset {

namespace {

std::string id_material(const std::string& species, std::uint32_t latent, const std::string& mode,
                        const std::vector<std::string>& image_ids, const std::string& parent) {
  std::string s = species + '\n' + std::to_string(latent) + '\n' + mode;
  for (const auto& id : image_ids) s += '\n' + id;
  if (!parent.empty()) s += "\nfrom:" + parent;
  return s;
}

std::vector<std::string> image_ids(const TraitAnnotation& a) {
  std::vector<std::string> ids;
  for (const auto& im : a.images) ids.push_back(im.image_id);
  return ids;
}

}  // namespace

std::string make_annotation_id(const TraitAnnotation& a) {
  return sha256_hex(id_material(a.species, a.latent, caption::to_string(a.mode), image_ids(a),
                                a.expanded_from.value_or("")))
      .substr(0, 24);
}

json to_json(const TraitAnnotation& a) {
  json images = json::array();
  for (const auto& im : a.images) images.push_back({{"image_id", im.image_id}, {"boxes", im.boxes}});
  json parts = json::array();
  for (const auto& p : a.parts) parts.push_back({{"part", p.part}, {"attributes", p.attributes}});
  json j{{"schema_version", kSchemaVersion},
         {"annotation_id", a.annotation_id},
         {"species", a.species},
         {"genus", a.genus},
         {"latent", a.latent},
         {"mode", caption::to_string(a.mode)},
         {"images", images},
         {"description", a.description},
         {"parts", parts},
         {"t_activation", a.t_activation},
         {"t_freq", a.t_freq},
         {"model", a.model},
         {"template_id", a.template_id},
         {"checkpoint", a.checkpoint},
         {"corpus", a.corpus},
         {"created_at", a.created_at},
         {"tokens_in", a.tokens_in},
         {"tokens_out", a.tokens_out}};
  if (a.expanded_from) j["expanded_from"] = *a.expanded_from;
  return j;
}

TraitAnnotation annotation_from_json(const json& j) {
  TraitAnnotation a;
  a.annotation_id = j.at("annotation_id").get<std::string>();
  a.species = j.at("species").get<std::string>();
  a.genus = j.at("genus").get<std::string>();
  a.latent = j.at("latent").get<std::uint32_t>();
  a.mode = caption::parse_mode(j.at("mode").get<std::string>());
  for (const auto& im : j.at("images")) {
    a.images.push_back({im.at("image_id").get<std::string>(), im.value("boxes", json::array())});
  }
  a.description = j.at("description").get<std::string>();
  for (const auto& p : j.value("parts", json::array())) {
    a.parts.push_back({p.at("part").get<std::string>(),
                       p.at("attributes").get<std::vector<std::string>>()});
  }
  a.t_activation = j.at("t_activation").get<double>();
  a.t_freq = j.at("t_freq").get<double>();
  a.model = j.value("model", "");
  a.template_id = j.value("template_id", "");
  a.checkpoint = j.value("checkpoint", "");
  a.corpus = j.value("corpus", "");
  a.created_at = j.value("created_at", "");
  a.tokens_in = j.value("tokens_in", std::int64_t{0});
  a.tokens_out = j.value("tokens_out", std::int64_t{0});
  if (j.contains("expanded_from")) a.expanded_from = j.at("expanded_from").get<std::string>();
  return a;
}

// ---------------------------------------------------------------------------
// Checking

namespace {

bool nonempty_string(const json& j, const char* key) {
  return j.contains(key) && j[key].is_string() && !j[key].get_ref<const std::string&>().empty();
}

bool finite_number(const json& j, const char* key) {
  return j.contains(key) && j[key].is_number() && std::isfinite(j[key].get<double>());
}

void check_box(const json& b, const std::string& where, std::vector<std::string>& out) {
  if (!b.is_object()) {
    out.push_back(where + " is not an object");
    return;
  }
  for (const char* k : {"x0", "y0", "x1", "y1"}) {
    if (!b.contains(k) || !b[k].is_number_integer()) {
      out.push_back(where + "." + k + " must be an integer");
      return;
    }
  }
  const auto x0 = b["x0"].get<std::int64_t>(), y0 = b["y0"].get<std::int64_t>();
  const auto x1 = b["x1"].get<std::int64_t>(), y1 = b["y1"].get<std::int64_t>();
  if (x0 < 0 || y0 < 0 || x1 <= x0 || y1 <= y0) out.push_back(where + " has an empty extent");
}

}  // namespace

std::vector<std::string> check_record(const json& j, const std::set<std::string>* known) {
  std::vector<std::string> out;
  if (!j.is_object()) return {"record is not a JSON object"};

  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    out.push_back("schema_version missing");
  } else if (j["schema_version"].get<std::int64_t>() != kSchemaVersion) {
    out.push_back("unsupported schema_version " + j["schema_version"].dump());
  }
  for (const char* k : {"annotation_id", "species", "genus", "description"}) {
    if (!nonempty_string(j, k)) out.push_back(std::string(k) + " must be a non-empty string");
  }
  for (const char* k : {"model", "template_id", "checkpoint", "corpus", "created_at"}) {
    if (j.contains(k) && !j[k].is_string()) out.push_back(std::string(k) + " must be a string");
  }
  std::uint32_t latent = 0;
  if (!j.contains("latent") || !j["latent"].is_number_integer() ||
      j["latent"].get<std::int64_t>() < 0 ||
      j["latent"].get<std::int64_t>() > std::numeric_limits<std::uint32_t>::max()) {
    out.push_back("latent must be a non-negative 32-bit integer");
  } else {
    latent = j["latent"].get<std::uint32_t>();
  }

  std::optional<caption::PromptMode> mode;
  if (j.contains("mode") && j["mode"].is_string()) {
    const auto& m = j["mode"].get_ref<const std::string&>();
    if (m == "single") mode = caption::PromptMode::Single;
    if (m == "multi") mode = caption::PromptMode::Multi;
  }
  if (!mode) out.push_back("mode must be \"single\" or \"multi\"");

  std::string parent;
  if (j.contains("expanded_from")) {
    if (!nonempty_string(j, "expanded_from")) {
      out.push_back("expanded_from must be a non-empty string");
    } else {
      parent = j["expanded_from"].get<std::string>();
    }
  }

  std::vector<std::string> ids;
  if (!j.contains("images") || !j["images"].is_array()) {
    out.push_back("images must be an array");
  } else {
    const auto& images = j["images"];
    const std::size_t want = j.contains("expanded_from") ? 1 : (mode ? caption::images_for(*mode) : 0);
    if (want != 0 && images.size() != want) {
      out.push_back("expected " + std::to_string(want) + " image(s), found " +
                    std::to_string(images.size()));
    }
    std::set<std::string> seen;
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& im = images[i];
      const std::string where = "images[" + std::to_string(i) + "]";
      if (!im.is_object() || !nonempty_string(im, "image_id")) {
        out.push_back(where + ".image_id must be a non-empty string");
        continue;
      }
      const auto id = im["image_id"].get<std::string>();
      ids.push_back(id);
      if (!seen.insert(id).second) out.push_back("duplicate image " + id);
      if (known && !known->contains(id)) out.push_back("image " + id + " is not in the corpus");
      if (!im.contains("boxes") || !im["boxes"].is_array()) {
        out.push_back(where + ".boxes must be an array");
        continue;
      }
      for (std::size_t b = 0; b < im["boxes"].size(); ++b) {
        check_box(im["boxes"][b], where + ".boxes[" + std::to_string(b) + "]", out);
      }
    }
  }

  if (j.contains("parts")) {
    bool ok = j["parts"].is_array();
    if (ok) {
      for (const auto& p : j["parts"]) {
        if (!p.is_object() || !p.contains("part") || !p["part"].is_string() ||
            !p.contains("attributes") || !p["attributes"].is_array()) {
          ok = false;
          break;
        }
        for (const auto& a : p["attributes"]) ok = ok && a.is_string();
      }
    }
    if (!ok) out.push_back("parts must be a list of {part, attributes[]}");
  }

  if (!finite_number(j, "t_activation")) out.push_back("t_activation must be a finite number");
  if (!finite_number(j, "t_freq")) {
    out.push_back("t_freq must be a finite number");
  } else if (const double f = j["t_freq"].get<double>(); f < 0.0 || f > 1.0) {
    out.push_back("t_freq outside [0, 1]");
  }
  for (const char* k : {"tokens_in", "tokens_out"}) {
    if (j.contains(k) && !j[k].is_number_integer()) out.push_back(std::string(k) + " must be an integer");
  }

  if (out.empty()) {
    const auto expect = sha256_hex(id_material(j["species"].get<std::string>(), latent,
                                               j["mode"].get<std::string>(), ids, parent))
                            .substr(0, 24);
    if (j["annotation_id"].get<std::string>() != expect) {
      out.push_back("annotation_id does not match species/latent/mode/images");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stats

json to_json(const DatasetStats& s) {
  return {{"species", s.species},
          {"genera", s.genera},
          {"unique_images", s.unique_images},
          {"samples", s.samples},
          {"mean_traits_per_image", s.mean_traits_per_image}};
}

DatasetStats compute_stats(const std::vector<TraitAnnotation>& rows) {
  std::set<std::string> species, genera, images;
  for (const auto& r : rows) {
    species.insert(r.species);
    genera.insert(r.genus);
    for (const auto& im : r.images) images.insert(im.image_id);
  }
  DatasetStats s;
  s.species = species.size();
  s.genera = genera.size();
  s.unique_images = images.size();
  s.samples = rows.size();
  s.mean_traits_per_image =
      images.empty() ? 0.0 : static_cast<double>(rows.size()) / static_cast<double>(images.size());
  return s;
}

// ---------------------------------------------------------------------------
// Emit / validate

EmitReport emit(const std::vector<TraitAnnotation>& annotations,
                const std::filesystem::path& dataset, const std::filesystem::path& quarantine,
                const std::filesystem::path& stats_path, const EmitOptions& options) {
  std::vector<TraitAnnotation> rows;
  for (const auto& a : annotations) {
    if (!options.expand_per_image) {
      rows.push_back(a);
      continue;
    }
    for (const auto& im : a.images) {
      TraitAnnotation r = a;
      r.images = {im};
      r.expanded_from = a.annotation_id;
      r.annotation_id = make_annotation_id(r);
      rows.push_back(std::move(r));
    }
  }

  std::string good, bad;
  std::vector<TraitAnnotation> kept;
  for (const auto& r : rows) {
    const auto j = to_json(r);
    const auto problems = check_record(j, options.known_images);
    if (problems.empty()) {
      good += j.dump() + "\n";
      kept.push_back(r);
    } else {
      bad += json{{"record", j}, {"reasons", problems}}.dump() + "\n";
    }
  }
  EmitReport report;
  report.written = kept.size();
  report.quarantined = rows.size() - kept.size();
  report.stats = compute_stats(kept);
  for (const auto& p : {dataset, quarantine, stats_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  write_file_atomic(dataset, good);
  write_file_atomic(quarantine, bad);
  json stats = to_json(report.stats);
  stats["quarantined"] = report.quarantined;
  stats["expanded_per_image"] = options.expand_per_image;
  write_file_atomic(stats_path, stats.dump(2) + "\n");
  return report;
}

json to_json(const ValidationReport& r) {
  json v = json::array();
  for (const auto& x : r.violations) v.push_back({{"line", x.line}, {"message", x.message}});
  return {{"lines", r.lines},       {"records", r.records}, {"violations", v},
          {"ok", r.ok()},           {"stats", to_json(r.stats)}};
}

ValidationReport validate_text(const std::string& contents, const std::set<std::string>* known) {
  ValidationReport report;
  std::vector<TraitAnnotation> clean;
  std::set<std::string> ids;
  std::istringstream in(contents);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++report.lines;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      report.violations.push_back({lineno, std::string("unparseable JSON: ") + e.what()});
      continue;
    }
    auto problems = check_record(j, known);
    if (problems.empty()) {
      const auto id = j["annotation_id"].get<std::string>();
      if (!ids.insert(id).second) problems.push_back("duplicate annotation_id " + id);
    }
    if (!problems.empty()) {
      for (auto& p : problems) report.violations.push_back({lineno, std::move(p)});
      continue;
    }
    try {
      clean.push_back(annotation_from_json(j));
      ++report.records;
    } catch (const std::exception& e) {
      report.violations.push_back({lineno, e.what()});
    }
  }
  report.stats = compute_stats(clean);
  return report;
}

ValidationReport validate(const std::filesystem::path& dataset, const std::set<std::string>* known) {
  return validate_text(read_file_text(dataset), known);
}

}  // namespace btraits::dataset
