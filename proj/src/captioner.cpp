#include "btraits/captioner.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

#include "btraits/log.hpp"

namespace btraits::caption {

PromptMode parse_mode(const std::string& s) {
  if (s == "single" || s == "single_image") return PromptMode::Single;
  if (s == "multi" || s == "multi_image") return PromptMode::Multi;
  throw usage_error("unknown prompt mode '" + s + "' (expected single or multi)");
}

std::string to_string(PromptMode m) { return m == PromptMode::Single ? "single" : "multi"; }

void PromptJob::validate() const {
  if (images.size() != images_for(mode)) {
    throw usage_error("job " + key() + ": " + to_string(mode) + " mode needs " +
                      std::to_string(images_for(mode)) + " image(s), got " +
                      std::to_string(images.size()));
  }
  if (species.empty()) throw usage_error("job without species");
}

std::string PromptJob::key() const {
  return species + "/" + std::to_string(latent) + "/" + to_string(mode);
}

json to_json(const PromptJob& job) {
  json images = json::array();
  for (const auto& im : job.images) {
    images.push_back({{"image_id", im.image_id}, {"path", im.path.string()}, {"boxes", im.boxes}});
  }
  return {{"species", job.species},     {"genus", job.genus},
          {"latent", job.latent},       {"mode", to_string(job.mode)},
          {"images", images},           {"template_id", job.template_id},
          {"model", job.model},         {"provenance", job.provenance}};
}

PromptJob job_from_json(const json& j) {
  PromptJob job;
  job.species = j.at("species").get<std::string>();
  job.genus = j.value("genus", "");
  job.latent = j.at("latent").get<std::uint32_t>();
  job.mode = parse_mode(j.at("mode").get<std::string>());
  for (const auto& im : j.at("images")) {
    job.images.push_back({im.at("image_id").get<std::string>(), im.at("path").get<std::string>(),
                          im.value("boxes", json::array())});
  }
  job.template_id = j.value("template_id", "");
  job.model = j.value("model", "");
  job.provenance = j.value("provenance", json::object());
  return job;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

}  // namespace

std::vector<TraitPart> parse_trait_lines(const std::string& text) {
  static const std::regex bracketed(R"(^\s*[-*•]\s*\[([^\]]+)\]\s*:\s*(.*)$)");
  static const std::regex plain(R"(^\s*[-*]\s*\**([^:\[\]*]+?)\**\s*:\s*(.*)$)");
  std::vector<TraitPart> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::smatch m;
    if (std::regex_match(line, m, bracketed) || std::regex_match(line, m, plain)) {
      TraitPart part{trim(m[1].str()), {}};
      std::string attrs = m[2].str();
      std::size_t a = 0;
      while (a <= attrs.size()) {
        std::size_t b = attrs.find(',', a);
        if (b == std::string::npos) b = attrs.size();
        auto attr = trim(attrs.substr(a, b - a));
        if (!attr.empty() && attr.back() == '.') attr.pop_back();
        if (!attr.empty()) part.attributes.push_back(attr);
        a = b + 1;
      }
      if (!part.part.empty()) out.push_back(std::move(part));
    }
    start = end + 1;
  }
  return out;
}

json to_json(const TraitDescription& d) {
  json parts = json::array();
  for (const auto& p : d.parts) parts.push_back({{"part", p.part}, {"attributes", p.attributes}});
  return {{"text", d.text},           {"parts", parts},
          {"tokens_in", d.tokens_in}, {"tokens_out", d.tokens_out},
          {"latency_s", d.latency_s}, {"response_id", d.response_id},
          {"attempts", d.attempts}};
}

TraitDescription description_from_json(const json& j) {
  TraitDescription d;
  d.text = j.at("text").get<std::string>();
  for (const auto& p : j.value("parts", json::array())) {
    d.parts.push_back({p.at("part").get<std::string>(),
                       p.at("attributes").get<std::vector<std::string>>()});
  }
  d.tokens_in = j.value("tokens_in", std::int64_t{0});
  d.tokens_out = j.value("tokens_out", std::int64_t{0});
  d.latency_s = j.value("latency_s", 0.0);
  d.response_id = j.value("response_id", "");
  d.attempts = j.value("attempts", 0);
  return d;
}

// ---------------------------------------------------------------------------
// Templates

namespace {

constexpr const char* kMultiSystem =
    "You are an expert entomologist describing insect morphology from photographs. "
    "Answer only with traits you can see.";

constexpr const char* kMultiUser =
    "You are given {n_images} images of the species {species} (genus {genus}). Each image has "
    "one or more red bounding boxes. Describe the morphological traits that are common to all "
    "{n_images} images and located inside the red boxes. Ignore anything outside the boxes and "
    "any trait that does not appear in every image. Use one line per body part in the form\n"
    "- [Body part]: attribute, attribute, attribute\n"
    "Do not mention the boxes, the images or the species name.";

constexpr const char* kSingleSystem = kMultiSystem;

constexpr const char* kSingleUser =
    "You are given an image of the species {species} (genus {genus}) with one or more red "
    "bounding boxes. Describe the morphological traits located inside the red boxes. Ignore "
    "anything outside the boxes. Use one line per body part in the form\n"
    "- [Body part]: attribute, attribute, attribute\n"
    "Do not mention the boxes, the image or the species name.";

}  // namespace

TemplateSet::TemplateSet() {
  add("sae_multi", {kMultiSystem, kMultiUser});
  add("sae_single", {kSingleSystem, kSingleUser});
}

std::string TemplateSet::default_id(PromptMode m) {
  return m == PromptMode::Single ? "sae_single" : "sae_multi";
}

void TemplateSet::add(const std::string& id, PromptTemplate t) { templates_[id] = std::move(t); }

const PromptTemplate& TemplateSet::get(const std::string& id) const {
  auto it = templates_.find(id);
  if (it == templates_.end()) throw usage_error("unknown prompt template '" + id + "'");
  return it->second;
}

std::vector<std::string> TemplateSet::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, t] : templates_) out.push_back(id);
  return out;
}

PromptTemplate parse_template(const std::string& text) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (trim(text.substr(pos, end - pos)) == "---") {
      return {trim(text.substr(0, pos)), trim(text.substr(std::min(end + 1, text.size())))};
    }
    pos = end + 1;
  }
  return {"", trim(text)};
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  TemplateSet set;
  if (dir.empty()) return set;
  if (!std::filesystem::is_directory(dir)) {
    throw usage_error("template directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) set.add(f.stem().string(), parse_template(read_file_text(f)));
  return set;
}

std::string render(const std::string& text, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    if (text[i] == '{') {
      auto close = text.find('}', i);
      if (close != std::string::npos) {
        auto it = vars.find(text.substr(i + 1, close - i - 1));
        if (it != vars.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += text[i++];
  }
  return out;
}

json build_prompt(const PromptJob& job, const TemplateSet& templates,
                  const RequestOptions& options) {
  job.validate();
  const auto& tpl =
      templates.get(job.template_id.empty() ? TemplateSet::default_id(job.mode) : job.template_id);
  const std::map<std::string, std::string> vars{{"n_images", std::to_string(job.images.size())},
                                                {"species", job.species},
                                                {"genus", job.genus}};
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", render(tpl.user, vars)}});
  for (const auto& im : job.images) {
    std::vector<std::uint8_t> bytes;
    try {
      bytes = read_file_bytes(im.path);
    } catch (const Error& e) {
      throw io_error("job " + job.key() + ": cannot read image " + im.path.string());
    }
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:image/png;base64," + base64_encode(bytes)}}}});
  }
  json messages = json::array();
  if (!tpl.system.empty()) {
    messages.push_back({{"role", "system"}, {"content", render(tpl.system, vars)}});
  }
  messages.push_back({{"role", "user"}, {"content", content}});
  return {{"model", job.model},
          {"messages", messages},
          {"temperature", options.temperature},
          {"seed", options.seed},
          {"max_tokens", options.max_tokens}};
}

std::string serialize(const json& payload) { return payload.dump(); }

std::string cache_key(const json& payload) { return sha256_hex(serialize(payload)); }

json elide_images(const json& payload) {
  json out = payload;
  if (!out.contains("messages")) return out;
  for (auto& msg : out["messages"]) {
    if (!msg.contains("content") || !msg["content"].is_array()) continue;
    for (auto& part : msg["content"]) {
      if (part.value("type", "") != "image_url") continue;
      const auto url = part["image_url"].value("url", "");
      part["image_url"]["url"] = "<elided " + std::to_string(url.size()) + " chars sha256:" +
                                 sha256_hex(url).substr(0, 16) + ">";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transport

EndpointConfig EndpointConfig::from_env() {
  EndpointConfig c;
  if (const char* v = std::getenv("TRAIT_MLLM_ENDPOINT")) c.url = v;
  if (const char* v = std::getenv("TRAIT_MLLM_API_KEY")) c.api_key = v;
  if (const char* v = std::getenv("TRAIT_MLLM_MODEL")) c.model = v;
  return c;
}

namespace {

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(const EndpointConfig& config) : config_(config) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config.url, m, url_re)) {
      throw usage_error("endpoint URL '" + config.url + "' is not http(s)://host[:port][/path]");
    }
    origin_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "";
    while (!path_.empty() && path_.back() == '/') path_.pop_back();
    const std::string suffix = "/chat/completions";
    if (path_.size() < suffix.size() ||
        path_.compare(path_.size() - suffix.size(), suffix.size(), suffix) != 0) {
      path_ += suffix;
    }
  }

  HttpReply post(const std::string& body) override {
    httplib::Client client(origin_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
    client.set_connection_timeout(std::chrono::seconds(10));
    client.set_read_timeout(std::max<std::chrono::seconds>(secs, std::chrono::seconds(1)));
    client.set_write_timeout(std::chrono::seconds(60));
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) return {0, "", httplib::to_string(res.error())};
    return {res->status, res->body, ""};
  }

 private:
  EndpointConfig config_;
  std::string origin_;
  std::string path_;
};

}  // namespace

std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config) {
  if (config.url.empty()) {
    throw usage_error("no MLLM endpoint configured (set TRAIT_MLLM_ENDPOINT or --endpoint)");
  }
  return std::make_unique<HttpTransport>(config);
}

ResponseCache::ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<TraitDescription> ResponseCache::get(const std::string& key) const {
  const auto path = dir_ / (key + ".json");
  std::lock_guard lock(mu_);
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    auto d = description_from_json(json::parse(read_file_text(path)));
    d.cached = true;
    return d;
  } catch (const std::exception& e) {
    log::warn("ignoring unreadable cache entry ", path.string(), ": ", e.what());
    return std::nullopt;
  }
}

void ResponseCache::put(const std::string& key, const TraitDescription& d) {
  std::lock_guard lock(mu_);
  write_file_atomic(dir_ / (key + ".json"), to_json(d).dump(2) + "\n");
}

struct AuditLog::Impl {
  std::ofstream out;
  std::mutex mu;
};

AuditLog::AuditLog(const std::filesystem::path& path) : impl_(std::make_unique<Impl>()) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  impl_->out.open(path, std::ios::app);
  if (!impl_->out) throw io_error("cannot open audit log " + path.string());
}

AuditLog::~AuditLog() = default;

void AuditLog::record(const json& entry) {
  const auto line = entry.dump() + "\n";
  std::lock_guard lock(impl_->mu);
  impl_->out << line;
  impl_->out.flush();
}

void RateLimiter::acquire() {
  if (interval_.count() <= 0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mu_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + interval_;
  }
  std::this_thread::sleep_until(slot);
}

TraitDescription parse_response(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw JobFailure(std::string("response is not JSON: ") + e.what(), 0);
  }
  TraitDescription d;
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) {
      d.text = content.get<std::string>();
    } else if (content.is_array()) {
      for (const auto& part : content) {
        if (part.value("type", "") == "text") d.text += part.value("text", "");
      }
    }
  } catch (const json::exception&) {
    throw JobFailure("response has no choices[0].message.content", 0);
  }
  if (d.text.empty()) throw JobFailure("response content is empty", 0);
  if (j.contains("usage") && j["usage"].is_object()) {
    d.tokens_in = j["usage"].value("prompt_tokens", std::int64_t{0});
    d.tokens_out = j["usage"].value("completion_tokens", std::int64_t{0});
  }
  d.response_id = j.value("id", "");
  d.parts = parse_trait_lines(d.text);
  return d;
}

TraitDescription request_with_retry(const json& payload, RequestContext& ctx,
                                    const std::string& label) {
  const auto body = serialize(payload);
  const auto key = sha256_hex(body);
  if (ctx.cache) {
    if (auto hit = ctx.cache->get(key)) return *hit;
  }
  if (!ctx.transport) throw usage_error("no transport configured");
  auto sleep = ctx.sleep ? ctx.sleep : [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
  const auto elided = ctx.audit ? elide_images(payload) : json();
  const int max_attempts = std::max(1, ctx.policy.max_attempts);
  std::string last_error;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    if (ctx.limiter) ctx.limiter->acquire();
    const auto t0 = std::chrono::steady_clock::now();
    const auto reply = ctx.transport->post(body);
    const double latency =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (ctx.audit) {
      json entry{{"time", utc_timestamp_now()}, {"job", label},          {"attempt", attempt},
                 {"key", key},                  {"status", reply.status}, {"latency_s", latency},
                 {"request", elided}};
      entry["response"] = reply.body;
      if (!reply.error.empty()) entry["error"] = reply.error;
      ctx.audit->record(entry);
    }
    if (reply.status == 200) {
      auto d = parse_response(reply.body);
      d.latency_s = latency;
      d.attempts = attempt;
      if (ctx.cache) ctx.cache->put(key, d);
      return d;
    }
    if (reply.status == 401 || reply.status == 403) {
      throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(reply.status) + ")");
    }
    const bool retryable = reply.status == 0 || reply.status == 429 || reply.status >= 500;
    last_error = reply.status == 0 ? "transport error: " + reply.error
                                   : "HTTP " + std::to_string(reply.status);
    if (!retryable) {
      throw JobFailure(label + ": " + last_error + ": " + reply.body.substr(0, 200), attempt);
    }
    if (attempt < max_attempts) {
      double delay = static_cast<double>(ctx.policy.base_delay.count());
      for (int k = 1; k < attempt; ++k) delay *= ctx.policy.factor;
      log::debug(label, ": ", last_error, ", retrying in ", delay, " ms");
      sleep(std::chrono::milliseconds(static_cast<std::int64_t>(delay)));
    }
  }
  throw JobFailure(label + ": giving up after " + std::to_string(max_attempts) +
                       " attempts (" + last_error + ")",
                   max_attempts);
}

// ---------------------------------------------------------------------------
// Batches

json to_json(const BatchSummary& s) {
  return {{"jobs", s.jobs},
          {"succeeded", s.succeeded},
          {"failed", s.failed},
          {"cache_hits", s.cache_hits},
          {"tokens_in", s.tokens_in},
          {"tokens_out", s.tokens_out},
          {"wall_s", s.wall_s},
          {"mean_latency_s", s.mean_latency_s},
          {"annotations_per_hour", s.annotations_per_hour}};
}

BatchSummary run_jobs(const std::vector<PromptJob>& jobs, const TemplateSet& templates,
                      const RequestOptions& options, RequestContext& ctx, std::size_t concurrency,
                      const std::function<void(const JobResult&)>& on_result) {
  if (concurrency < 1) throw usage_error("concurrency must be >= 1");
  BatchSummary summary;
  summary.jobs = jobs.size();
  if (jobs.empty()) return summary;

  const auto t0 = std::chrono::steady_clock::now();
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex mu;
  std::exception_ptr fatal;
  double latency_sum = 0.0;

  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      JobResult r;
      r.job = jobs[i];
      try {
        const auto payload = build_prompt(r.job, templates, options);
        r.description = request_with_retry(payload, ctx, r.job.key());
        r.ok = true;
      } catch (const AuthError&) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        stop = true;
        return;
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      std::lock_guard lock(mu);
      if (r.ok) {
        ++summary.succeeded;
        if (r.description.cached) ++summary.cache_hits;
        summary.tokens_in += r.description.tokens_in;
        summary.tokens_out += r.description.tokens_out;
        latency_sum += r.description.latency_s;
      } else {
        ++summary.failed;
        log::warn("job ", r.job.key(), " failed: ", r.error);
      }
      if (on_result) on_result(r);
    }
  };

  const std::size_t n = std::min(concurrency, jobs.size());
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n);
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  summary.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::size_t live = summary.succeeded - summary.cache_hits;
  summary.mean_latency_s = live > 0 ? latency_sum / static_cast<double>(live) : 0.0;
  summary.annotations_per_hour =
      summary.wall_s > 0.0 ? 3600.0 * static_cast<double>(summary.succeeded) / summary.wall_s : 0.0;
  return summary;
}

}  // namespace btraits::caption
