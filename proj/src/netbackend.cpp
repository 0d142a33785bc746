#include "icx/netbackend.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <openssl/evp.h>

#include "icx/error.hpp"

namespace icx {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void default_warning(std::string_view message) { std::cerr << "warning: " << message << '\n'; }

// "http://host:port/prefix" -> ("http://host:port", "/prefix")
std::pair<std::string, std::string> split_base_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("server url needs a scheme: " + url);
  const auto scheme = url.substr(0, scheme_end);
  if (scheme != "http") {
    throw ConfigError("unsupported scheme '" + scheme + "' (only http is built in): " + url);
  }
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  std::string prefix = url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, path_start), prefix};
}

ServerError to_server_error(int status, const std::string& body) {
  std::string code = "http_" + std::to_string(status);
  std::string message = body;
  try {
    auto j = json::parse(body);
    if (j.is_object() && j.contains("error") && j["error"].is_object()) {
      const auto& e = j["error"];
      if (e.contains("code") && e["code"].is_string()) code = e["code"].get<std::string>();
      if (e.contains("message") && e["message"].is_string()) message = e["message"].get<std::string>();
    }
  } catch (const json::exception&) {
  }
  return ServerError(status, std::move(code), message);
}

[[noreturn]] void protocol_error(std::string_view endpoint, const std::string& what) {
  throw ProtocolError(std::string(endpoint) + ": " + what);
}

double require_number(const json& j, std::string_view endpoint, const char* field) {
  if (!j.is_object() || !j.contains(field) || !j[field].is_number()) {
    protocol_error(endpoint, std::string("missing numeric field '") + field + "'");
  }
  return j[field].get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Config, digests, keys

void ServerConfig::validate() const {
  if (base_url.empty()) throw ConfigError("server url is empty");
  if (max_in_flight == 0) throw ConfigError("max_in_flight must be >= 1");
  if (max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (cache_enabled && cache_capacity == 0) throw ConfigError("cache capacity must be >= 1");
  split_base_url(base_url);
}

Digest sha256(std::string_view bytes) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw Error("SHA-256 computation failed");
  }
  return out;
}

std::string to_hex(const Digest& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(digest.size() * 2);
  for (auto b : digest) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

CacheKey CacheKey::make(std::string_view endpoint, std::string_view model, std::string_view prompt,
                        std::span<const std::string> continuations) {
  CacheKey key;
  key.endpoint = std::string(endpoint);
  key.model = std::string(model);
  key.prompt_digest = sha256(prompt);
  key.continuations_digest = sha256(json(std::vector<std::string>(continuations.begin(),
                                                                   continuations.end()))
                                        .dump());
  return key;
}

std::string CacheKey::file_stem() const {
  std::string material = json::array({endpoint, model}).dump();
  material.append(reinterpret_cast<const char*>(prompt_digest.data()), prompt_digest.size());
  material.append(reinterpret_cast<const char*>(continuations_digest.data()),
                  continuations_digest.size());
  return to_hex(sha256(material));
}

std::size_t CacheKeyHash::operator()(const CacheKey& key) const noexcept {
  std::size_t h = std::hash<std::string>{}(key.endpoint) * 31 + std::hash<std::string>{}(key.model);
  std::uint64_t a = 0, b = 0;
  std::memcpy(&a, key.prompt_digest.data(), sizeof a);
  std::memcpy(&b, key.continuations_digest.data(), sizeof b);
  return h ^ a ^ (b * 0x9e3779b97f4a7c15ULL);
}

// ---------------------------------------------------------------------------
// ResponseCache

ResponseCache::ResponseCache(std::size_t capacity, std::optional<std::filesystem::path> spill_dir)
    : capacity_(capacity), spill_dir_(std::move(spill_dir)) {
  if (capacity_ == 0) throw ConfigError("cache capacity must be >= 1");
  if (spill_dir_) {
    std::error_code ec;
    std::filesystem::create_directories(*spill_dir_, ec);
    if (ec) throw ConfigError("cannot create cache dir " + spill_dir_->string() + ": " + ec.message());
  }
}

std::optional<json> ResponseCache::get(const CacheKey& key) {
  {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      it->second->last_use.store(++clock_, std::memory_order_relaxed);
      return it->second->value;
    }
  }
  if (!spill_dir_) return std::nullopt;
  std::ifstream in(*spill_dir_ / (key.file_stem() + ".json"), std::ios::binary);
  if (!in) return std::nullopt;
  json value;
  try {
    value = json::parse(in);
  } catch (const json::exception&) {
    return std::nullopt;
  }
  std::unique_lock lock(mutex_);
  auto entry = std::make_unique<Entry>();
  entry->value = value;
  entry->last_use = ++clock_;
  entries_.insert_or_assign(key, std::move(entry));
  evict_locked();
  return value;
}

void ResponseCache::put(const CacheKey& key, const json& value) {
  {
    std::unique_lock lock(mutex_);
    auto entry = std::make_unique<Entry>();
    entry->value = value;
    entry->last_use = ++clock_;
    entries_.insert_or_assign(key, std::move(entry));
    evict_locked();
  }
  if (spill_dir_) {
    const auto stem = key.file_stem();
    const auto tmp = *spill_dir_ / (stem + ".tmp" +
                                    std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())));
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << value.dump();
    }
    std::error_code ec;
    std::filesystem::rename(tmp, *spill_dir_ / (stem + ".json"), ec);
    if (ec) std::filesystem::remove(tmp, ec);
  }
}

std::size_t ResponseCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

void ResponseCache::evict_locked() {
  while (entries_.size() > capacity_) {
    auto oldest = std::min_element(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) {
      return a.second->last_use.load(std::memory_order_relaxed) <
             b.second->last_use.load(std::memory_order_relaxed);
    });
    entries_.erase(oldest);
  }
}

// ---------------------------------------------------------------------------
// ModelClient

ModelClient::ModelClient(ServerConfig config, WarningSink warn)
    : config_(std::move(config)),
      warn_(warn ? std::move(warn) : WarningSink(default_warning)),
      slots_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(config_.max_in_flight, 1))) {
  config_.validate();
  std::tie(scheme_host_port_, path_prefix_) = split_base_url(config_.base_url);
  if (config_.cache_enabled) cache_.emplace(config_.cache_capacity, config_.cache_dir);
}

ModelClient::~ModelClient() = default;

std::unique_ptr<httplib::Client> ModelClient::acquire_client() {
  {
    std::lock_guard lock(pool_mutex_);
    if (!pool_.empty()) {
      auto c = std::move(pool_.back());
      pool_.pop_back();
      return c;
    }
  }
  auto c = std::make_unique<httplib::Client>(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  c->set_connection_timeout(secs.count(), usecs.count());
  c->set_read_timeout(secs.count(), usecs.count());
  c->set_write_timeout(secs.count(), usecs.count());
  c->set_keep_alive(true);
  if (config_.api_key) c->set_default_headers({{"authorization", "Bearer " + *config_.api_key}});
  return c;
}

void ModelClient::release_client(std::unique_ptr<httplib::Client> client) {
  std::lock_guard lock(pool_mutex_);
  pool_.push_back(std::move(client));
}

ModelClient::Response ModelClient::attempt(std::string_view method, std::string_view endpoint,
                                           const std::string& body) {
  slots_.acquire();
  struct SlotGuard {
    std::counting_semaphore<>& s;
    ~SlotGuard() { s.release(); }
  } guard{slots_};

  auto client = acquire_client();
  const std::string path = path_prefix_ + std::string(endpoint);
  ++requests_sent_;
  httplib::Result res = method == "GET" ? client->Get(path)
                                        : client->Post(path, body, "application/json");
  if (!res) {
    // Drop the connection; a fresh client is built next time.
    throw NetworkError(std::string(method) + " " + std::string(endpoint) + " at " +
                       config_.base_url + ": " + httplib::to_string(res.error()));
  }
  Response out{res->status, std::move(res->body)};
  release_client(std::move(client));
  return out;
}

json ModelClient::call(std::string_view method, std::string_view endpoint, const std::string& body) {
  auto delay = config_.backoff;
  for (int attempt_no = 0;; ++attempt_no) {
    const bool last = attempt_no >= config_.max_retries;
    Response resp;
    try {
      resp = attempt(method, endpoint, body);
    } catch (const NetworkError&) {
      if (last) throw;
      std::this_thread::sleep_for(delay);
      delay *= 2;
      continue;
    }
    if (resp.status >= 500) {
      if (last) throw to_server_error(resp.status, resp.body);
      std::this_thread::sleep_for(delay);
      delay *= 2;
      continue;
    }
    if (resp.status >= 400) throw to_server_error(resp.status, resp.body);
    if (resp.status != 200) {
      protocol_error(endpoint, "unexpected HTTP status " + std::to_string(resp.status));
    }
    try {
      return json::parse(resp.body);
    } catch (const json::parse_error&) {
      protocol_error(endpoint, "response is not JSON");
    }
  }
}

json ModelClient::cached_post(std::string_view endpoint, const CacheKey& key,
                              const std::string& body) {
  if (cache_) {
    if (auto hit = cache_->get(key)) return *hit;
  }
  return call("POST", endpoint, body);
}

std::vector<BackendDescriptor> ModelClient::list_models() {
  constexpr std::string_view endpoint = "/v1/models";
  const json j = call("GET", endpoint, "");
  if (!j.is_object() || !j.contains("models") || !j["models"].is_array()) {
    protocol_error(endpoint, "expected {\"models\": [...]}");
  }
  std::vector<BackendDescriptor> out;
  for (const auto& m : j["models"]) {
    if (!m.is_object() || !m.contains("name") || !m["name"].is_string() || !m.contains("family") ||
        !m["family"].is_string() || !m.contains("max_tokens") ||
        !m["max_tokens"].is_number_unsigned()) {
      protocol_error(endpoint, "model entry needs name, family and max_tokens");
    }
    BackendDescriptor d;
    d.name = m["name"].get<std::string>();
    try {
      d.family = parse_model_family(m["family"].get<std::string>());
    } catch (const ConfigError& e) {
      protocol_error(endpoint, e.what());
    }
    d.max_tokens = m["max_tokens"].get<std::size_t>();
    if (d.max_tokens == 0) protocol_error(endpoint, "max_tokens must be positive");
    d.max_in_flight = config_.max_in_flight;
    out.push_back(std::move(d));
  }
  if (out.empty()) warn_("server " + config_.base_url + " lists no models");
  return out;
}

std::vector<double> ModelClient::score(std::string_view model, std::string_view prompt,
                                       std::span<const std::string> continuations) {
  constexpr std::string_view endpoint = "/v1/score";
  ordered_json req;
  req["model"] = model;
  req["prompt"] = prompt;
  req["continuations"] = std::vector<std::string>(continuations.begin(), continuations.end());
  const auto key = CacheKey::make(endpoint, model, prompt, continuations);
  const json j = cached_post(endpoint, key, req.dump());

  if (!j.is_object() || !j.contains("logprobs") || !j["logprobs"].is_array()) {
    protocol_error(endpoint, "expected {\"logprobs\": [...]}");
  }
  if (j.contains("prompt_tokens") && !j["prompt_tokens"].is_number_integer()) {
    protocol_error(endpoint, "prompt_tokens must be an integer");
  }
  const auto& lp = j["logprobs"];
  if (lp.size() != continuations.size()) {
    protocol_error(endpoint, "alignment error: " + std::to_string(lp.size()) +
                                 " logprobs for " + std::to_string(continuations.size()) +
                                 " continuations");
  }
  std::vector<double> out;
  out.reserve(lp.size());
  for (const auto& v : lp) {
    if (!v.is_number()) protocol_error(endpoint, "logprobs must be numbers");
    out.push_back(v.get<double>());
  }
  if (cache_) cache_->put(key, j);
  return out;
}

std::size_t ModelClient::count_tokens(std::string_view model, std::string_view text) {
  constexpr std::string_view endpoint = "/v1/count_tokens";
  ordered_json req;
  req["model"] = model;
  req["text"] = text;
  const auto key = CacheKey::make(endpoint, model, text, {});
  const json j = cached_post(endpoint, key, req.dump());
  if (!j.is_object() || !j.contains("count") || !j["count"].is_number_unsigned()) {
    protocol_error(endpoint, "expected {\"count\": <non-negative int>}");
  }
  if (cache_) cache_->put(key, j);
  return j["count"].get<std::size_t>();
}

double ModelClient::entail(std::string_view model, std::string_view premise,
                           std::string_view hypothesis) {
  constexpr std::string_view endpoint = "/v1/entail";
  ordered_json req;
  req["model"] = model;
  req["premise"] = premise;
  req["hypothesis"] = hypothesis;
  const std::string hyp(hypothesis);
  const auto key = CacheKey::make(endpoint, model, premise, std::span<const std::string>(&hyp, 1));
  const json j = cached_post(endpoint, key, req.dump());
  const double value = require_number(j, endpoint, "entail_logprob");
  if (j.contains("class_logprobs")) {
    const auto& cls = j["class_logprobs"];
    if (!cls.is_object()) protocol_error(endpoint, "class_logprobs must be an object");
    for (const auto& [name, v] : cls.items()) {
      if (!v.is_number()) protocol_error(endpoint, "class_logprobs." + name + " must be a number");
    }
  }
  if (cache_) cache_->put(key, j);
  return value;
}

// ---------------------------------------------------------------------------
// RemoteBackend

RemoteBackend::RemoteBackend(std::shared_ptr<ModelClient> client, BackendDescriptor descriptor)
    : client_(std::move(client)), descriptor_(std::move(descriptor)) {}

std::vector<double> RemoteBackend::score(std::string_view prompt,
                                         std::span<const std::string> continuations) {
  if (descriptor_.family == ModelFamily::nli) {
    throw ScoringError("model '" + descriptor_.name + "' is an nli model");
  }
  return client_->score(descriptor_.name, prompt, continuations);
}

double RemoteBackend::entail(std::string_view premise, std::string_view hypothesis) {
  if (descriptor_.family != ModelFamily::nli) {
    throw ScoringError("model '" + descriptor_.name + "' is not an nli model");
  }
  return client_->entail(descriptor_.name, premise, hypothesis);
}

std::size_t RemoteBackend::count_tokens(std::string_view text) {
  return client_->count_tokens(descriptor_.name, text);
}

std::unique_ptr<RemoteBackend> connect_backend(std::shared_ptr<ModelClient> client,
                                               std::string_view model) {
  for (auto& d : client->list_models()) {
    if (d.name == model) return std::make_unique<RemoteBackend>(std::move(client), std::move(d));
  }
  throw ConfigError("model '" + std::string(model) + "' is not served by " +
                    client->config().base_url);
}

}  // namespace icx
