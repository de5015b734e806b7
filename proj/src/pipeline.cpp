#include "btraits/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "btraits/activation_store.hpp"
#include "btraits/dataset_io.hpp"
#include "btraits/error.hpp"
#include "btraits/log.hpp"
#include "btraits/trait_miner.hpp"

namespace btraits {

namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "btraits 0.1.0";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw usage_error("config key '" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw usage_error("config key '" + key + "' expects a number, got '" + v + "'");
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw usage_error("config key '" + key + "' expects an integer, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string safe_name(std::string s) {
  for (auto& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifests

struct StageIo {
  std::string stage;
  json config;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;
};

json digests(const std::vector<fs::path>& paths) {
  json out = json::object();
  for (const auto& p : paths) out[p.string()] = sha256_file_hex(p);
  return out;
}

fs::path manifest_path(const PipelineConfig& c, const std::string& stage) {
  return c.path("manifests") / (stage + ".json");
}

bool up_to_date(const PipelineConfig& c, const StageIo& io) {
  const auto path = manifest_path(c, io.stage);
  if (!fs::exists(path)) return false;
  try {
    const auto m = json::parse(read_file_text(path));
    if (m.value("version", "") != kVersion) return false;
    if (m.at("config_hash") != sha256_hex(io.config.dump())) return false;
    for (const auto& p : io.inputs) {
      if (!fs::exists(p) || m.at("inputs").value(p.string(), "") != sha256_file_hex(p)) return false;
    }
    for (const auto& p : io.outputs) {
      if (!fs::exists(p) || m.at("outputs").value(p.string(), "") != sha256_file_hex(p)) return false;
    }
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

void write_manifest(const PipelineConfig& c, const StageIo& io, const json& summary) {
  json m{{"stage", io.stage},
         {"version", kVersion},
         {"config", io.config},
         {"config_hash", sha256_hex(io.config.dump())},
         {"inputs", digests(io.inputs)},
         {"outputs", digests(io.outputs)},
         {"summary", summary}};
  fs::create_directories(manifest_path(c, io.stage).parent_path());
  write_file_atomic(manifest_path(c, io.stage), m.dump(2) + "\n");
}

json manifest_summary(const PipelineConfig& c, const std::string& stage) {
  try {
    return json::parse(read_file_text(manifest_path(c, stage))).value("summary", json::object());
  } catch (const std::exception&) {
    return json::object();
  }
}

void require(const fs::path& p, const std::string& what, const std::string& stage) {
  if (!fs::exists(p)) {
    throw usage_error(what + " " + p.string() + " not found (run '" + stage + "' first)");
  }
}

std::vector<sae::ImageActivations> read_activations(const fs::path& path) {
  std::vector<sae::ImageActivations> out;
  for_each_jsonl(path, [&](std::size_t, const json& j) { out.push_back(j.get<sae::ImageActivations>()); });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::load(const fs::path& path) {
  PipelineConfig c;
  std::ifstream in(path);
  if (!in) throw usage_error("cannot read config " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw usage_error(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw usage_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

void PipelineConfig::set(const std::string& key, const std::string& v) {
  if (key == "shards") shards = split_list(v);
  else if (key == "out_dir") out_dir = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "image_root") image_root = v;
  else if (key == "seed") train.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "steps") train.steps = parse_int(key, v);
  else if (key == "batch_size") train.batch_size = parse_int(key, v);
  else if (key == "expansion") train.expansion = parse_int(key, v);
  else if (key == "alpha") train.alpha = parse_double(key, v);
  else if (key == "alpha_warmup_steps") train.alpha_warmup_steps = parse_int(key, v);
  else if (key == "lr") train.lr = parse_double(key, v);
  else if (key == "lr_warmup_steps") train.lr_warmup_steps = parse_int(key, v);
  else if (key == "log_every") log_every = parse_int(key, v);
  else if (key == "t_activation") t_activation = parse_double(key, v);
  else if (key == "t_freq") t_freq = parse_double(key, v);
  else if (key == "aggregation") aggregation = sae::parse_aggregation(v);
  else if (key == "mode") mode = caption::parse_mode(v);
  else if (key == "rel_threshold") boxes.rel_threshold = parse_double(key, v);
  else if (key == "patch_size") boxes.patch_size = static_cast<int>(parse_int(key, v));
  else if (key == "max_boxes") boxes.max_boxes = static_cast<std::size_t>(parse_int(key, v));
  else if (key == "stroke") style.stroke = static_cast<int>(parse_int(key, v));
  else if (key == "crop") style.crop = parse_bool(key, v);
  else if (key == "endpoint") endpoint = v;
  else if (key == "model") model = v;
  else if (key == "template_id") template_id = v;
  else if (key == "template_dir") template_dir = v;
  else if (key == "cache_dir") cache_dir = v;
  else if (key == "concurrency") concurrency = static_cast<std::size_t>(parse_int(key, v));
  else if (key == "max_attempts") retry.max_attempts = static_cast<int>(parse_int(key, v));
  else if (key == "retry_base_ms") retry.base_delay = std::chrono::milliseconds(parse_int(key, v));
  else if (key == "min_interval_ms") retry.min_interval = std::chrono::milliseconds(parse_int(key, v));
  else if (key == "request_seed") request.seed = parse_int(key, v);
  else if (key == "max_tokens") request.max_tokens = static_cast<int>(parse_int(key, v));
  else if (key == "temperature") request.temperature = parse_double(key, v);
  else if (key == "dry_run") dry_run = parse_bool(key, v);
  else if (key == "expand_per_image") expand_per_image = parse_bool(key, v);
  else if (key == "timestamp") timestamp = v;
  else if (key == "threads") threads = static_cast<unsigned>(parse_int(key, v));
  else throw usage_error("unknown config key '" + key + "'");
}

void PipelineConfig::validate() const {
  train.validate();
  if (!(t_activation >= 0.0)) throw usage_error("t_activation must be >= 0");
  if (!(t_freq >= 0.0 && t_freq <= 1.0)) throw usage_error("t_freq must lie in [0, 1]");
  if (!(boxes.rel_threshold > 0.0 && boxes.rel_threshold <= 1.0)) {
    throw usage_error("rel_threshold must lie in (0, 1]");
  }
  if (boxes.patch_size < 1) throw usage_error("patch_size must be >= 1");
  if (concurrency < 1) throw usage_error("concurrency must be >= 1");
  if (retry.max_attempts < 1) throw usage_error("max_attempts must be >= 1");
  if (log_every < 1) throw usage_error("log_every must be >= 1");
  if (threads < 1) throw usage_error("threads must be >= 1");
  if (out_dir.empty()) throw usage_error("out_dir must not be empty");
}

json PipelineConfig::to_json() const {
  return {{"shards", shards},
          {"out_dir", out_dir.string()},
          {"checkpoint", checkpoint_path().string()},
          {"image_root", image_root.string()},
          {"seed", train.seed},
          {"steps", train.steps},
          {"batch_size", train.batch_size},
          {"expansion", train.expansion},
          {"alpha", train.alpha},
          {"alpha_warmup_steps", train.alpha_warmup_steps},
          {"lr", train.lr},
          {"lr_warmup_steps", train.lr_warmup_steps},
          {"t_activation", t_activation},
          {"t_freq", t_freq},
          {"aggregation", sae::to_string(aggregation)},
          {"mode", caption::to_string(mode)},
          {"rel_threshold", boxes.rel_threshold},
          {"patch_size", boxes.patch_size},
          {"max_boxes", boxes.max_boxes},
          {"stroke", style.stroke},
          {"crop", style.crop},
          {"endpoint", endpoint},
          {"model", model},
          {"template_id", template_id},
          {"template_dir", template_dir.string()},
          {"concurrency", concurrency},
          {"max_attempts", retry.max_attempts},
          {"request_seed", request.seed},
          {"max_tokens", request.max_tokens},
          {"temperature", request.temperature},
          {"expand_per_image", expand_per_image},
          {"timestamp", timestamp}};
}

fs::path PipelineConfig::checkpoint_path() const {
  return checkpoint.empty() ? path("sae.ckpt") : checkpoint;
}

fs::path PipelineConfig::cache_path() const { return cache_dir.empty() ? path("cache") : cache_dir; }

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig config, bool force) : config_(std::move(config)), force_(force) {
  config_.validate();
}

std::vector<fs::path> Pipeline::shard_paths() const {
  if (config_.shards.empty()) throw usage_error("no shards configured");
  auto paths = expand_globs(config_.shards);
  if (paths.empty()) {
    std::string joined;
    for (const auto& s : config_.shards) joined += (joined.empty() ? "" : ", ") + s;
    throw usage_error("no shard matches " + joined);
  }
  return paths;
}

fs::path Pipeline::resolve_image(const std::string& source_path) const {
  fs::path p(source_path);
  if (p.is_relative() && !config_.image_root.empty()) p = config_.image_root / p;
  return p;
}

void Pipeline::record_timing(const json& fields) {
  const auto path = config_.path("timing.json");
  json t = json::object();
  if (fs::exists(path)) {
    try {
      t = json::parse(read_file_text(path));
    } catch (const std::exception&) {
      t = json::object();
    }
  }
  t.update(fields);
  if (t.contains("activation_ms_per_image") && t.contains("sae_forward_ms_per_image")) {
    t["total_preprocessing_ms_per_image"] =
        t["activation_ms_per_image"].get<double>() + t["sae_forward_ms_per_image"].get<double>();
  }
  fs::create_directories(config_.out_dir);
  write_file_atomic(path, t.dump(2) + "\n");
}

StageResult Pipeline::train() {
  const auto shards = shard_paths();
  const auto ckpt = config_.checkpoint_path();
  const auto metrics_path = config_.path("train_metrics.jsonl");
  StageIo io{"train",
             {{"seed", config_.train.seed},
              {"steps", config_.train.steps},
              {"batch_size", config_.train.batch_size},
              {"expansion", config_.train.expansion},
              {"alpha", config_.train.alpha},
              {"alpha_warmup_steps", config_.train.alpha_warmup_steps},
              {"lr", config_.train.lr},
              {"lr_warmup_steps", config_.train.lr_warmup_steps},
              {"log_every", config_.log_every}},
             shards,
             {ckpt, metrics_path}};
  if (!force_ && up_to_date(config_, io)) return {"train", true, manifest_summary(config_, "train")};

  ShardSet set(shards);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<json> logged;
  const auto steps = config_.train.steps;
  auto result = sae::train(config_.train, set, [&](const sae::TrainMetrics& m) {
    if (m.step % config_.log_every == 0 || m.step == 1 || m.step == steps) {
      logged.push_back(sae::to_json(m));
    }
  });
  const double secs = seconds_since(t0);
  const auto final_metrics = sae::evaluate(result.params, set, config_.train.alpha);

  fs::create_directories(config_.out_dir);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  sae::save_checkpoint(result.params, ckpt);
  write_jsonl(metrics_path, logged);

  json summary{{"input_dim", result.params.input_dim()},
               {"latent_dim", result.params.latent_dim()},
               {"patches", set.size()},
               {"mse", final_metrics.mse},
               {"l0", final_metrics.l0},
               {"loss", final_metrics.loss},
               {"train_s", secs}};
  write_manifest(config_, io, summary);
  record_timing({{"train_s", secs}});
  return {"train", false, summary};
}

StageResult Pipeline::encode() {
  const auto shards = shard_paths();
  const auto ckpt = config_.checkpoint_path();
  require(ckpt, "checkpoint", "train");
  const auto out = config_.path("activations.jsonl");
  StageIo io{"encode", {{"aggregation", sae::to_string(config_.aggregation)}}, shards, {out}};
  io.inputs.push_back(ckpt);
  if (!force_ && up_to_date(config_, io)) return {"encode", true, manifest_summary(config_, "encode")};

  const auto t_load = std::chrono::steady_clock::now();
  ShardSet set(shards);
  // Touch every payload once so shard I/O is timed apart from the SAE.
  double checksum = 0.0;
  set.for_each_image([&](const ImageRecord&, const PatchMatrix& p) { checksum += p(0, 0); });
  const double load_s = seconds_since(t_load);
  const auto params = sae::load_checkpoint(ckpt);
  if (static_cast<std::size_t>(params.input_dim()) != set.dim()) {
    throw data_error("checkpoint input dim " + std::to_string(params.input_dim()) +
                     " does not match shard feature dim " + std::to_string(set.dim()));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto acts = sae::batch_encode(params, set, config_.aggregation, config_.threads);
  const double encode_s = seconds_since(t0);

  std::vector<json> rows;
  rows.reserve(acts.size());
  for (const auto& a : acts) rows.push_back(a);
  write_jsonl(out, rows);
  const double n = std::max<double>(1.0, static_cast<double>(acts.size()));
  json summary{{"images", acts.size()}, {"encode_s", encode_s}, {"checksum", checksum}};
  write_manifest(config_, io, summary);
  record_timing({{"activation_ms_per_image", 1000.0 * load_s / n},
                 {"sae_forward_ms_per_image", 1000.0 * encode_s / n},
                 {"activation_source", "shard read (backbone runs offline)"}});
  return {"encode", false, summary};
}

StageResult Pipeline::mine() {
  const auto acts_path = config_.path("activations.jsonl");
  require(acts_path, "activations", "encode");
  const auto ckpt = config_.checkpoint_path();
  const auto profiles_path = config_.path("profiles.jsonl");
  const auto table_path = config_.path("trait_table.jsonl");
  const auto salient_path = config_.path("salient.jsonl");
  StageIo io{"mine",
             {{"t_activation", config_.t_activation}, {"t_freq", config_.t_freq}},
             {acts_path, ckpt},
             {profiles_path, table_path, salient_path}};
  if (!force_ && up_to_date(config_, io)) return {"mine", true, manifest_summary(config_, "mine")};

  const auto t0 = std::chrono::steady_clock::now();
  const auto acts = read_activations(acts_path);
  miner::ProfileDiagnostics diag;
  const auto profiles = miner::build_profiles(acts, config_.t_activation, &diag);
  if (profiles.empty()) {
    throw data_error("no species labels in corpus (" + std::to_string(acts.size()) +
                     " images, all unlabeled)");
  }
  const auto table = miner::accumulate(profiles, config_.threads);
  auto salient = miner::select_salient(table, config_.t_freq);
  salient.t_activation = config_.t_activation;
  salient.checkpoint_id = fs::exists(ckpt) ? sha256_file_hex(ckpt) : "";
  salient.corpus_id = sha256_file_hex(acts_path);

  miner::write_profiles(profiles_path, profiles);
  miner::write_trait_table(table_path, table);
  miner::write_salient(salient_path, salient);

  std::size_t with_traits = 0;
  for (const auto& [s, ids] : salient.traits) with_traits += ids.empty() ? 0 : 1;
  json summary{{"labeled_images", profiles.size()},
               {"unlabeled_dropped", diag.unlabeled_dropped},
               {"species", table.genus_of.size()},
               {"species_with_traits", with_traits},
               {"traits", salient.total()},
               {"inactive_species", table.inactive_species},
               {"mine_s", seconds_since(t0)}};
  write_manifest(config_, io, summary);
  return {"mine", false, summary};
}

StageResult Pipeline::localize() {
  const auto profiles_path = config_.path("profiles.jsonl");
  const auto salient_path = config_.path("salient.jsonl");
  require(salient_path, "salient traits", "mine");
  const auto shards = shard_paths();
  const auto ckpt = config_.checkpoint_path();
  const auto out = config_.path("localize.jsonl");
  const auto crops = config_.path("localized");
  StageIo io{"localize",
             {{"mode", caption::to_string(config_.mode)},
              {"rel_threshold", config_.boxes.rel_threshold},
              {"patch_size", config_.boxes.patch_size},
              {"max_boxes", config_.boxes.max_boxes},
              {"stroke", config_.style.stroke},
              {"crop", config_.style.crop},
              {"image_root", config_.image_root.string()}},
             {profiles_path, salient_path, ckpt},
             {out}};
  if (!force_ && up_to_date(config_, io)) {
    return {"localize", true, manifest_summary(config_, "localize")};
  }

  const auto t0 = std::chrono::steady_clock::now();
  const auto profiles = miner::read_profiles(profiles_path);
  const auto salient = miner::read_salient(salient_path);
  const auto params = sae::load_checkpoint(ckpt);
  ShardSet set(shards);
  const auto& geo = set.geometry();
  const int canvas_w = geo.grid_w * config_.boxes.patch_size;
  const int canvas_h = geo.grid_h * config_.boxes.patch_size;
  const std::size_t need = caption::images_for(config_.mode);

  std::map<std::string, sae::Matrix<float>> codes_cache;
  auto codes_for = [&](const std::string& id) -> const sae::Matrix<float>& {
    auto it = codes_cache.find(id);
    if (it == codes_cache.end()) {
      it = codes_cache.emplace(id, sae::patch_codes(params, set.patches(id))).first;
    }
    return it->second;
  };

  fs::create_directories(crops);
  std::vector<json> jobs;
  std::size_t skipped = 0, files = 0;
  for (const auto& [species, latents] : salient.traits) {
    const auto genus = salient.genus_of.at(species);
    for (const auto latent : latents) {
      const auto top = miner::top_images_for(species, latent, need, profiles);
      if (top.size() < need) {
        log::warn("skipping ", species, "/", latent, ": ", top.size(), " qualifying image(s), ",
                  need, " needed");
        ++skipped;
        continue;
      }
      json images = json::array();
      for (const auto& id : top) {
        const auto* rec = set.find(id);
        if (!rec) throw data_error("image " + id + " is missing from the shards");
        const auto h = localize::heatmap(codes_for(id), latent, geo.grid_h, geo.grid_w);
        auto boxes = localize::mask_and_box(h, config_.boxes);
        const auto src_path = resolve_image(rec->source_path);
        std::vector<std::uint8_t> src;
        try {
          src = read_file_bytes(src_path);
        } catch (const Error&) {
          throw data_error("image " + id + ": cannot read source " + src_path.string());
        }
        const auto decoded = decode_png(src);
        for (auto& b : boxes) b = localize::map_to_image(b, canvas_w, canvas_h, decoded.width, decoded.height);
        const auto png = localize::annotate_image(src, boxes, config_.style);
        const auto file = crops / (safe_name(id) + "__" + std::to_string(latent) + ".png");
        write_file_atomic(file, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
        ++files;
        json jb = json::array();
        for (const auto& b : boxes) jb.push_back(localize::to_json(b));
        images.push_back({{"image_id", id},
                          {"path", file.string()},
                          {"activation", h.maxCoeff()},
                          {"boxes", jb}});
      }
      jobs.push_back({{"species", species},
                      {"genus", genus},
                      {"latent", latent},
                      {"mode", caption::to_string(config_.mode)},
                      {"images", images}});
    }
  }
  write_jsonl(out, jobs);
  json summary{{"jobs", jobs.size()},
               {"skipped", skipped},
               {"annotated_files", files},
               {"localize_s", seconds_since(t0)}};
  write_manifest(config_, io, summary);
  return {"localize", false, summary};
}

StageResult Pipeline::caption() {
  const auto jobs_path = config_.path("localize.jsonl");
  require(jobs_path, "localization output", "localize");
  const auto salient_path = config_.path("salient.jsonl");
  const auto out = config_.path("captions.jsonl");
  auto env = caption::EndpointConfig::from_env();
  if (!config_.endpoint.empty()) env.url = config_.endpoint;
  if (!config_.model.empty()) env.model = config_.model;

  StageIo io{"caption",
             {{"model", env.model},
              {"template_id", config_.template_id},
              {"template_dir", config_.template_dir.string()},
              {"request_seed", config_.request.seed},
              {"max_tokens", config_.request.max_tokens},
              {"temperature", config_.request.temperature},
              {"dry_run", config_.dry_run}},
             {jobs_path},
             {out}};
  if (!config_.template_dir.empty()) {
    for (const auto& e : fs::directory_iterator(config_.template_dir)) {
      if (e.path().extension() == ".txt") io.inputs.push_back(e.path());
    }
    std::sort(io.inputs.begin() + 1, io.inputs.end());
  }
  if (!force_ && !config_.dry_run && up_to_date(config_, io) &&
      manifest_summary(config_, "caption").value("failed", 1) == 0) {
    return {"caption", true, manifest_summary(config_, "caption")};
  }

  const auto salient = miner::read_salient(salient_path);
  const json provenance{{"t_activation", salient.t_activation},
                        {"t_freq", salient.t_freq},
                        {"checkpoint", salient.checkpoint_id},
                        {"corpus", salient.corpus_id}};
  const auto templates = caption::TemplateSet::load(config_.template_dir);
  std::vector<caption::PromptJob> jobs;
  for_each_jsonl(jobs_path, [&](std::size_t, const json& j) {
    caption::PromptJob job;
    job.species = j.at("species").get<std::string>();
    job.genus = j.at("genus").get<std::string>();
    job.latent = j.at("latent").get<std::uint32_t>();
    job.mode = caption::parse_mode(j.at("mode").get<std::string>());
    for (const auto& im : j.at("images")) {
      job.images.push_back({im.at("image_id").get<std::string>(), im.at("path").get<std::string>(),
                            im.at("boxes")});
    }
    job.template_id = config_.template_id.empty() ? caption::TemplateSet::default_id(job.mode)
                                                  : config_.template_id;
    job.model = env.model;
    job.provenance = provenance;
    jobs.push_back(std::move(job));
  });

  if (config_.dry_run) {
    const auto dir = config_.path("prompts");
    fs::create_directories(dir);
    for (const auto& job : jobs) {
      const auto payload = caption::build_prompt(job, templates, config_.request);
      write_file_atomic(dir / (safe_name(job.key()) + ".json"), caption::serialize(payload) + "\n");
    }
    return {"caption", false, {{"dry_run", true}, {"prompts", jobs.size()}, {"dir", dir.string()}}};
  }

  std::unique_ptr<caption::Transport> owned;
  caption::Transport* transport = transport_;
  if (!transport && !jobs.empty()) {
    owned = caption::make_http_transport(env);
    transport = owned.get();
  }
  caption::ResponseCache cache(config_.cache_path());
  caption::AuditLog audit(config_.path("audit.jsonl"));
  caption::RateLimiter limiter(config_.retry.min_interval);
  caption::RequestContext ctx;
  ctx.transport = transport;
  ctx.policy = config_.retry;
  ctx.cache = &cache;
  ctx.audit = &audit;
  ctx.limiter = &limiter;

  std::vector<caption::JobResult> results;
  std::mutex mu;
  const auto summary = caption::run_jobs(jobs, templates, config_.request, ctx, config_.concurrency,
                                         [&](const caption::JobResult& r) {
                                           std::lock_guard lock(mu);
                                           results.push_back(r);
                                         });
  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
    return std::tie(a.job.species, a.job.latent) < std::tie(b.job.species, b.job.latent);
  });
  std::vector<json> rows;
  for (const auto& r : results) {
    json row{{"job", caption::to_json(r.job)}, {"ok", r.ok}};
    if (r.ok) {
      auto d = caption::to_json(r.description);
      d.erase("latency_s");
      d.erase("attempts");
      row["description"] = d;
    } else {
      row["error"] = r.error;
    }
    rows.push_back(row);
  }
  write_jsonl(out, rows);
  auto js = caption::to_json(summary);
  write_manifest(config_, io, js);
  const std::size_t live = summary.succeeded - summary.cache_hits;
  if (live > 0) {
    record_timing({{"mllm_s_per_annotation", summary.mean_latency_s},
                   {"annotations_per_hour", summary.annotations_per_hour},
                   {"images_per_annotation", caption::images_for(config_.mode)}});
  }
  if (summary.failed > 0) {
    throw Error(ErrorKind::Endpoint, std::to_string(summary.failed) + " of " +
                                         std::to_string(summary.jobs) +
                                         " caption jobs failed (see " + out.string() + ")");
  }
  return {"caption", false, js};
}

StageResult Pipeline::emit() {
  const auto captions_path = config_.path("captions.jsonl");
  require(captions_path, "captions", "caption");
  const auto dataset_path = config_.path("dataset.jsonl");
  const auto quarantine_path = config_.path("quarantine.jsonl");
  const auto stats_path = config_.path("dataset_stats.json");
  const auto shards = shard_paths();
  StageIo io{"emit",
             {{"expand_per_image", config_.expand_per_image}, {"timestamp", config_.timestamp}},
             {captions_path},
             {dataset_path, quarantine_path, stats_path}};
  if (!force_ && !config_.timestamp.empty() && up_to_date(config_, io)) {
    return {"emit", true, manifest_summary(config_, "emit")};
  }

  std::set<std::string> known;
  for (const auto& r : ShardSet(shards).records()) known.insert(r.image_id);
  const auto created = config_.timestamp.empty() ? utc_timestamp_now() : config_.timestamp;
  std::vector<dataset::TraitAnnotation> rows;
  for_each_jsonl(captions_path, [&](std::size_t, const json& j) {
    if (!j.value("ok", false)) return;
    const auto job = caption::job_from_json(j.at("job"));
    const auto desc = caption::description_from_json(j.at("description"));
    dataset::TraitAnnotation a;
    a.species = job.species;
    a.genus = job.genus;
    a.latent = job.latent;
    a.mode = job.mode;
    for (const auto& im : job.images) a.images.push_back({im.image_id, im.boxes});
    a.description = desc.text;
    a.parts = desc.parts;
    a.t_activation = job.provenance.value("t_activation", 0.0);
    a.t_freq = job.provenance.value("t_freq", 0.0);
    a.checkpoint = job.provenance.value("checkpoint", "");
    a.corpus = job.provenance.value("corpus", "");
    a.model = job.model;
    a.template_id = job.template_id;
    a.created_at = created;
    a.tokens_in = desc.tokens_in;
    a.tokens_out = desc.tokens_out;
    a.annotation_id = dataset::make_annotation_id(a);
    rows.push_back(std::move(a));
  });
  dataset::EmitOptions opts;
  opts.expand_per_image = config_.expand_per_image;
  opts.known_images = &known;
  const auto report = dataset::emit(rows, dataset_path, quarantine_path, stats_path, opts);
  json summary = dataset::to_json(report.stats);
  summary["written"] = report.written;
  summary["quarantined"] = report.quarantined;
  write_manifest(config_, io, summary);
  return {"emit", false, summary};
}

std::vector<StageResult> Pipeline::run_all() {
  std::vector<StageResult> out;
  out.push_back(train());
  out.push_back(encode());
  out.push_back(mine());
  out.push_back(localize());
  out.push_back(caption());
  if (!config_.dry_run) out.push_back(emit());
  return out;
}

StageResult Pipeline::topk(std::uint32_t latent, std::size_t k) {
  const auto acts_path = config_.path("activations.jsonl");
  require(acts_path, "activations", "encode");
  const auto params = sae::load_checkpoint(config_.checkpoint_path());
  if (latent >= static_cast<std::uint32_t>(params.latent_dim())) {
    throw usage_error("unknown latent " + std::to_string(latent) + " (SAE has " +
                      std::to_string(params.latent_dim()) + ")");
  }
  const auto acts = read_activations(acts_path);
  const auto ranked = miner::top_images(latent, k, acts);
  const auto dir = config_.path("topk") / ("latent_" + std::to_string(latent));
  fs::create_directories(dir);

  std::unique_ptr<ShardSet> set;
  if (!ranked.empty()) set = std::make_unique<ShardSet>(shard_paths());
  std::vector<json> rows;
  for (std::size_t rank = 0; rank < ranked.size(); ++rank) {
    const auto& r = ranked[rank];
    const auto* rec = set->find(r.image_id);
    if (!rec) throw data_error("image " + r.image_id + " is missing from the shards");
    const auto& geo = set->geometry();
    const auto h = localize::heatmap(sae::patch_codes(params, set->patches(r.image_id)), latent,
                                     geo.grid_h, geo.grid_w);
    auto boxes = localize::mask_and_box(h, config_.boxes);
    json heat = json::array();
    for (int row = 0; row < h.rows(); ++row) {
      json line = json::array();
      for (int col = 0; col < h.cols(); ++col) line.push_back(h(row, col));
      heat.push_back(line);
    }
    json row{{"rank", rank},
             {"image_id", r.image_id},
             {"activation", r.activation},
             {"species", rec->species ? json(*rec->species) : json(nullptr)},
             {"heatmap", heat}};
    const auto src_path = resolve_image(rec->source_path);
    if (!rec->source_path.empty() && fs::exists(src_path)) {
      const auto src = read_file_bytes(src_path);
      const auto decoded = decode_png(src);
      for (auto& b : boxes) {
        b = localize::map_to_image(b, geo.grid_w * config_.boxes.patch_size,
                                   geo.grid_h * config_.boxes.patch_size, decoded.width,
                                   decoded.height);
      }
      const auto png = localize::annotate_image(src, boxes, config_.style);
      const auto file = dir / (safe_name(r.image_id) + "__" + std::to_string(latent) + ".png");
      write_file_atomic(file, std::string_view(reinterpret_cast<const char*>(png.data()), png.size()));
      row["path"] = file.string();
    }
    json jb = json::array();
    for (const auto& b : boxes) jb.push_back(localize::to_json(b));
    row["boxes"] = jb;
    rows.push_back(row);
  }
  write_jsonl(dir / "manifest.jsonl", rows);
  return {"topk", false, {{"latent", latent}, {"k", k}, {"returned", rows.size()},
                          {"manifest", (dir / "manifest.jsonl").string()}}};
}

StageResult Pipeline::validate(const fs::path& dataset_path) {
  const auto path = dataset_path.empty() ? config_.path("dataset.jsonl") : dataset_path;
  if (!fs::exists(path)) throw usage_error("dataset " + path.string() + " not found");
  std::set<std::string> known;
  const std::set<std::string>* known_ptr = nullptr;
  if (!config_.shards.empty()) {
    for (const auto& r : ShardSet(shard_paths()).records()) known.insert(r.image_id);
    known_ptr = &known;
  }
  const auto report = dataset::validate(path, known_ptr);
  auto summary = dataset::to_json(report);
  if (!report.ok()) {
    for (const auto& v : report.violations) {
      log::error(path.string(), ":", v.line, ": ", v.message);
    }
    throw data_error(std::to_string(report.violations.size()) + " violation(s) in " +
                     path.string());
  }
  return {"validate", false, summary};
}

StageResult Pipeline::stats() {
  json summary = json::object();
  if (!config_.shards.empty()) {
    const auto records = ShardSet(shard_paths()).records();
    summary["corpus"] = to_json(corpus_stats(records));
  }
  const auto dataset_path = config_.path("dataset.jsonl");
  if (fs::exists(dataset_path)) {
    summary["dataset"] = dataset::to_json(dataset::validate(dataset_path).stats);
  }
  const auto timing = config_.path("timing.json");
  if (fs::exists(timing)) summary["timing"] = json::parse(read_file_text(timing));
  if (summary.empty()) throw usage_error("nothing to report: no shards and no dataset");
  return {"stats", false, summary};
}

}  // namespace btraits
