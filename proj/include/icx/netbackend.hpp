#pragma once

// HTTP/JSON client for model servers speaking the /v1 protocol:
//   GET  /v1/models
//   POST /v1/score         {"model","prompt","continuations"}
//   POST /v1/count_tokens  {"model","text"}
//   POST /v1/entail        {"model","premise","hypothesis"}

#include <array>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "icx/scoring.hpp"

namespace httplib {
class Client;
}

namespace icx {

struct ServerConfig {
  std::string base_url;
  std::optional<std::string> api_key;
  std::chrono::milliseconds timeout{std::chrono::seconds(120)};
  std::size_t max_in_flight = 8;
  int max_retries = 2;
  /// Delay before the first retry; doubles for each further attempt.
  std::chrono::milliseconds backoff{std::chrono::seconds(1)};
  bool cache_enabled = true;
  std::size_t cache_capacity = 100'000;
  std::optional<std::filesystem::path> cache_dir;

  /// Throws ConfigError on an empty URL or max_in_flight == 0.
  void validate() const;
};

using Digest = std::array<std::uint8_t, 32>;

/// SHA-256.
Digest sha256(std::string_view bytes);
std::string to_hex(const Digest& digest);

struct CacheKey {
  std::string endpoint;
  std::string model;
  Digest prompt_digest{};
  Digest continuations_digest{};

  static CacheKey make(std::string_view endpoint, std::string_view model, std::string_view prompt,
                       std::span<const std::string> continuations);

  bool operator==(const CacheKey&) const = default;
  /// Hex digest naming this key on disk.
  std::string file_stem() const;
};

struct CacheKeyHash {
  std::size_t operator()(const CacheKey& key) const noexcept;
};

/// In-memory LRU map from request to response body, with an optional spill
/// directory that survives the process. Lookups take a shared lock.
class ResponseCache {
 public:
  explicit ResponseCache(std::size_t capacity, std::optional<std::filesystem::path> spill_dir = {});

  std::optional<nlohmann::json> get(const CacheKey& key);
  void put(const CacheKey& key, const nlohmann::json& value);
  std::size_t size() const;

 private:
  struct Entry {
    nlohmann::json value;
    mutable std::atomic<std::uint64_t> last_use{0};
  };

  void evict_locked();

  std::size_t capacity_;
  std::optional<std::filesystem::path> spill_dir_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<CacheKey, std::unique_ptr<Entry>, CacheKeyHash> entries_;
  std::atomic<std::uint64_t> clock_{0};
};

using WarningSink = std::function<void(std::string_view)>;

/// Thread-safe client. At most `max_in_flight` requests are outstanding at
/// any time; 5xx and transport failures are retried, 4xx are not.
class ModelClient {
 public:
  explicit ModelClient(ServerConfig config, WarningSink warn = {});
  ~ModelClient();
  ModelClient(const ModelClient&) = delete;
  ModelClient& operator=(const ModelClient&) = delete;

  std::vector<BackendDescriptor> list_models();
  std::vector<double> score(std::string_view model, std::string_view prompt,
                            std::span<const std::string> continuations);
  std::size_t count_tokens(std::string_view model, std::string_view text);
  double entail(std::string_view model, std::string_view premise, std::string_view hypothesis);

  const ServerConfig& config() const noexcept { return config_; }
  /// HTTP attempts made, including retries.
  std::size_t requests_sent() const noexcept { return requests_sent_.load(); }

 private:
  struct Response {
    int status = 0;
    std::string body;
  };

  nlohmann::json call(std::string_view method, std::string_view endpoint, const std::string& body);
  Response attempt(std::string_view method, std::string_view endpoint, const std::string& body);
  std::unique_ptr<httplib::Client> acquire_client();
  void release_client(std::unique_ptr<httplib::Client> client);
  nlohmann::json cached_post(std::string_view endpoint, const CacheKey& key,
                             const std::string& body);

  ServerConfig config_;
  WarningSink warn_;
  std::string scheme_host_port_;
  std::string path_prefix_;
  std::counting_semaphore<> slots_;
  std::mutex pool_mutex_;
  std::vector<std::unique_ptr<httplib::Client>> pool_;
  std::optional<ResponseCache> cache_;
  std::atomic<std::size_t> requests_sent_{0};
};

/// Backend adaptor for one served model.
class RemoteBackend : public Backend {
 public:
  RemoteBackend(std::shared_ptr<ModelClient> client, BackendDescriptor descriptor);

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  std::vector<double> score(std::string_view prompt,
                            std::span<const std::string> continuations) override;
  double entail(std::string_view premise, std::string_view hypothesis) override;
  std::size_t count_tokens(std::string_view text) override;

 private:
  std::shared_ptr<ModelClient> client_;
  BackendDescriptor descriptor_;
};

/// Looks the model up in /v1/models. Throws ConfigError when it is not served.
std::unique_ptr<RemoteBackend> connect_backend(std::shared_ptr<ModelClient> client,
                                               std::string_view model);

}  // namespace icx
