#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "btraits/error.hpp"
#include "btraits/util.hpp"

namespace btraits::caption {

enum class PromptMode { Single, Multi };

PromptMode parse_mode(const std::string& s);
std::string to_string(PromptMode m);
inline std::size_t images_for(PromptMode m) { return m == PromptMode::Single ? 1 : 3; }

struct ImageRef {
  std::string image_id;
  std::filesystem::path path;  // annotated PNG
  json boxes = json::array();
};

struct PromptJob {
  std::string species;
  std::string genus;
  std::uint32_t latent = 0;
  PromptMode mode = PromptMode::Multi;
  std::vector<ImageRef> images;  // activation-rank order
  std::string template_id;       // empty -> default for the mode
  std::string model;
  json provenance = json::object();  // thresholds, checkpoint, corpus

  /// Throws a usage error when the image count does not match the mode.
  void validate() const;
  std::string key() const;  // species/latent/mode, for logs and file names
};

json to_json(const PromptJob& job);
PromptJob job_from_json(const json& j);

struct TraitPart {
  std::string part;
  std::vector<std::string> attributes;
  bool operator==(const TraitPart&) const = default;
};

/// Extracts "- [Part]: a, b" and "- Part: a, b" bullet lines. Anything else
/// is ignored here; callers keep the raw text.
std::vector<TraitPart> parse_trait_lines(const std::string& text);

struct TraitDescription {
  std::string text;
  std::vector<TraitPart> parts;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  double latency_s = 0.0;
  std::string response_id;
  int attempts = 0;
  bool cached = false;
};

json to_json(const TraitDescription& d);
TraitDescription description_from_json(const json& j);

// ---------------------------------------------------------------------------
// Templates
//
// A template file holds the system prompt, a line containing only "---",
// then the user prompt. {n_images}, {species} and {genus} are substituted.

struct PromptTemplate {
  std::string system;
  std::string user;
};

class TemplateSet {
 public:
  /// Built-in "sae_multi" and "sae_single".
  TemplateSet();
  /// Built-ins overlaid with every <id>.txt in `dir`.
  static TemplateSet load(const std::filesystem::path& dir);

  static std::string default_id(PromptMode m);
  void add(const std::string& id, PromptTemplate t);
  bool contains(const std::string& id) const { return templates_.contains(id); }
  const PromptTemplate& get(const std::string& id) const;  // usage error when missing
  std::vector<std::string> ids() const;

 private:
  std::map<std::string, PromptTemplate> templates_;
};

PromptTemplate parse_template(const std::string& text);
std::string render(const std::string& text, const std::map<std::string, std::string>& vars);

struct RequestOptions {
  double temperature = 0.0;
  std::int64_t seed = 0;
  int max_tokens = 512;
};

/// OpenAI chat-completions body with base64 PNG attachments interleaved
/// after the user text. Throws a usage error for a missing template and an
/// io error for an unreadable image.
json build_prompt(const PromptJob& job, const TemplateSet& templates,
                  const RequestOptions& options = {});

/// Stable serialisation used for the cache key and the wire.
std::string serialize(const json& payload);
std::string cache_key(const json& payload);

/// Copy of the payload with image data replaced by a size and digest.
json elide_images(const json& payload);

// ---------------------------------------------------------------------------
// Transport

struct EndpointConfig {
  std::string url;  // base (".../v1") or full ".../chat/completions"
  std::string api_key;
  std::string model;
  std::chrono::milliseconds timeout{120000};

  /// TRAIT_MLLM_ENDPOINT, TRAIT_MLLM_API_KEY, TRAIT_MLLM_MODEL.
  static EndpointConfig from_env();
};

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
  std::chrono::milliseconds min_interval{0};  // between request starts, all workers
};

struct HttpReply {
  int status = 0;  // 0 on a transport failure
  std::string body;
  std::string error;
};

/// Blocking POST of a JSON body. Implementations must be thread-safe.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpReply post(const std::string& body) = 0;
};

std::unique_ptr<Transport> make_http_transport(const EndpointConfig& config);

/// Thrown for 401/403. Fatal for the whole batch.
class AuthError : public Error {
 public:
  explicit AuthError(const std::string& what) : Error(ErrorKind::Endpoint, what) {}
};

/// Thrown when a job cannot be completed (retries exhausted, 4xx, bad body).
class JobFailure : public Error {
 public:
  JobFailure(const std::string& what, int attempts)
      : Error(ErrorKind::Endpoint, what), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

/// Successful responses keyed by payload digest, one JSON file each.
class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path dir);
  std::optional<TraitDescription> get(const std::string& key) const;
  void put(const std::string& key, const TraitDescription& d);
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

/// Append-only JSONL of requests and responses, images elided.
class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  ~AuditLog();
  AuditLog(const AuditLog&) = delete;
  AuditLog& operator=(const AuditLog&) = delete;
  void record(const json& entry);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Spaces request starts by at least `interval`.
class RateLimiter {
 public:
  explicit RateLimiter(std::chrono::milliseconds interval) : interval_(interval) {}
  void acquire();

 private:
  std::chrono::milliseconds interval_;
  std::mutex mu_;
  std::chrono::steady_clock::time_point next_{};
};

struct RequestContext {
  Transport* transport = nullptr;
  RetryPolicy policy;
  ResponseCache* cache = nullptr;  // optional
  AuditLog* audit = nullptr;       // optional
  RateLimiter* limiter = nullptr;  // optional
  /// Replaceable for tests.
  std::function<void(std::chrono::milliseconds)> sleep;
};

/// Cache lookup, then up to max_attempts POSTs. 429, 5xx and transport
/// errors back off base_delay * factor^k; 401/403 throw AuthError; other
/// failures throw JobFailure.
TraitDescription request_with_retry(const json& payload, RequestContext& ctx,
                                    const std::string& label = {});

/// Content, usage and id from a chat-completions response body.
TraitDescription parse_response(const std::string& body);

// ---------------------------------------------------------------------------
// Batches

struct JobResult {
  PromptJob job;
  bool ok = false;
  TraitDescription description;
  std::string error;
};

struct BatchSummary {
  std::size_t jobs = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::size_t cache_hits = 0;
  std::int64_t tokens_in = 0;
  std::int64_t tokens_out = 0;
  double wall_s = 0.0;
  double mean_latency_s = 0.0;
  double annotations_per_hour = 0.0;
};

json to_json(const BatchSummary& s);

/// Runs jobs on at most `concurrency` workers. Per-job failures are
/// reported through `on_result` and counted; an AuthError stops the batch
/// and is rethrown once workers drain.
BatchSummary run_jobs(const std::vector<PromptJob>& jobs, const TemplateSet& templates,
                      const RequestOptions& options, RequestContext& ctx, std::size_t concurrency,
                      const std::function<void(const JobResult&)>& on_result);

}  // namespace btraits::caption
