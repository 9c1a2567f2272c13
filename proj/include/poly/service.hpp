/**
 * @file service.hpp
 * @brief JSON-over-HTTP API for sampling, structure editing and interpolation.
 *
 * Routes:
 *   POST /api/sample      {seed?}                      -> {session_id, structure, pianoroll}
 *   POST /api/regenerate  {session_id, structure}      -> {session_id, pianoroll}
 *   POST /api/interpolate {seed_a, seed_b, steps}      -> {sequences:[pianoroll...]}
 *   GET  /api/health                                   -> {status, checkpoint, config}
 * Errors carry {error:{code, message}}. Silent results add {warning:"EmptyStructure"}.
 */

#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "poly/generate.hpp"

namespace httplib {
class Server;
}

namespace poly {

struct ServiceOptions {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::chrono::seconds session_timeout{1800};
  /// Served under / when the directory exists.
  std::filesystem::path static_dir;
  /// Sessions are restored from and written back to this file when set.
  std::filesystem::path snapshot_path;
  std::string checkpoint_label;
  std::string cors_origin = "*";
  double threshold = 0.5;
};

struct Session {
  std::string id;
  std::vector<double> z;
  StructureTensor structure;
  Pianoroll roll{1};
  std::chrono::system_clock::time_point created;
  std::chrono::steady_clock::time_point last_used;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  /// A null model makes the generation routes answer 503.
  Service(std::shared_ptr<const Model> model, ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Route handlers, usable without a socket.
  ApiResponse sample(const nlohmann::json& request);
  ApiResponse regenerate(const nlohmann::json& request);
  ApiResponse interpolate(const nlohmann::json& request);
  ApiResponse health() const;
  /// Dispatches by method and path; parses the body as JSON.
  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body);

  /// Blocks serving HTTP until stop(). Returns false if the socket could not be bound.
  bool listen();
  /// Binds an ephemeral port on `host` and returns it, or -1.
  int bind_any_port();
  /// Serves on a socket bound by bind_any_port().
  bool listen_after_bind();
  void stop();

  std::size_t session_count() const;
  /// Drops sessions idle longer than the timeout.
  void expire_sessions();
  void save_snapshot(const std::filesystem::path& path) const;
  void load_snapshot(const std::filesystem::path& path);

 private:
  struct Entry {
    std::mutex mutex;
    Session session;
  };

  void configure_routes();
  std::string new_session_id();
  std::shared_ptr<Entry> find(const std::string& id);

  std::shared_ptr<const Model> model_;
  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::uint64_t id_counter_ = 0;
};

}  // namespace poly
