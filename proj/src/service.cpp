/**
 * @file service.cpp
 * @brief HTTP routes, in-memory sessions and snapshot persistence.
 */

#include "poly/service.hpp"

#include <fstream>
#include <random>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "poly/error.hpp"

namespace poly {

namespace {

ApiResponse fail(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

std::uint64_t fresh_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

/// Reads an optional non-negative integer field; throws on a bad type.
std::optional<std::uint64_t> read_seed(const nlohmann::json& request, const char* key) {
  if (!request.contains(key) || request.at(key).is_null()) return std::nullopt;
  const auto& v = request.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw Error("InvalidRequest", std::string(key) + " must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

}  // namespace

Service::Service(std::shared_ptr<const Model> model, ServiceOptions options)
    : model_(std::move(model)), options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  if (!options_.snapshot_path.empty() && std::filesystem::exists(options_.snapshot_path)) {
    load_snapshot(options_.snapshot_path);
  }
  configure_routes();
}

Service::~Service() = default;

std::string Service::new_session_id() {
  static thread_local std::mt19937_64 rng(fresh_seed());
  std::lock_guard lock(sessions_mutex_);
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%016llx%04llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(++id_counter_ & 0xFFFF));
  return buf;
}

std::shared_ptr<Service::Entry> Service::find(const std::string& id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

ApiResponse Service::sample(const nlohmann::json& request) {
  if (!model_) return fail(503, "NoModel", "no checkpoint loaded");
  std::uint64_t seed = 0;
  try {
    seed = read_seed(request, "seed").value_or(fresh_seed());
  } catch (const Error& e) {
    return fail(422, e.code(), e.what());
  }
  const auto z = random_latent(model_->config().d, seed);
  const auto gen = generate(*model_, z, {.threshold = options_.threshold});

  auto entry = std::make_shared<Entry>();
  entry->session = {new_session_id(), z, gen.decoded.structure, gen.roll, std::chrono::system_clock::now(),
                    std::chrono::steady_clock::now()};
  ApiResponse out;
  out.body = {{"session_id", entry->session.id},
              {"seed", seed},
              {"structure", to_json(gen.decoded.structure)},
              {"pianoroll", to_json(gen.roll)}};
  if (gen.silent) out.body["warning"] = "EmptyStructure";
  {
    std::lock_guard lock(sessions_mutex_);
    sessions_[entry->session.id] = entry;
  }
  return out;
}

ApiResponse Service::regenerate(const nlohmann::json& request) {
  if (!model_) return fail(503, "NoModel", "no checkpoint loaded");
  if (!request.contains("session_id") || !request["session_id"].is_string()) {
    return fail(422, "InvalidRequest", "session_id must be a string");
  }
  auto entry = find(request["session_id"].get<std::string>());
  if (!entry) return fail(404, "UnknownSession", "no session with that id");
  if (!request.contains("structure")) return fail(422, "InvalidStructure", "structure is required");
  StructureTensor structure;
  try {
    structure = structure_from_json(request["structure"]);
  } catch (const Error& e) {
    return fail(422, e.code(), e.what());
  }
  if (structure.n_bars() != model_->config().n_bars) {
    return fail(422, "InvalidStructure",
                "structure must have " + std::to_string(model_->config().n_bars) + " bars");
  }
  std::lock_guard lock(entry->mutex);
  auto& s = entry->session;
  const auto gen = conditioned_generate(*model_, s.z, structure, {.threshold = options_.threshold});
  s.structure = structure;
  s.roll = gen.roll;
  s.last_used = std::chrono::steady_clock::now();
  ApiResponse out;
  out.body = {{"session_id", s.id}, {"pianoroll", to_json(gen.roll)}};
  if (gen.silent) out.body["warning"] = "EmptyStructure";
  return out;
}

ApiResponse Service::interpolate(const nlohmann::json& request) {
  if (!model_) return fail(503, "NoModel", "no checkpoint loaded");
  std::optional<std::uint64_t> seed_a, seed_b;
  try {
    seed_a = read_seed(request, "seed_a");
    seed_b = read_seed(request, "seed_b");
  } catch (const Error& e) {
    return fail(422, e.code(), e.what());
  }
  if (!seed_a || !seed_b) return fail(422, "InvalidRequest", "seed_a and seed_b are required");
  if (!request.contains("steps") || !request["steps"].is_number_integer()) {
    return fail(422, "InvalidSteps", "steps must be an integer in [2, 16]");
  }
  const auto steps = request["steps"].get<std::int64_t>();
  if (steps < 2 || steps > 16) return fail(422, "InvalidSteps", "steps must be an integer in [2, 16]");
  const int d = model_->config().d;
  const auto path = poly::interpolate(*model_, random_latent(d, *seed_a), random_latent(d, *seed_b),
                                      static_cast<int>(steps), {.threshold = options_.threshold});
  nlohmann::json sequences = nlohmann::json::array();
  for (const auto& g : path) sequences.push_back(to_json(g.roll));
  return {200, {{"sequences", sequences}}};
}

ApiResponse Service::health() const {
  nlohmann::json body = {{"status", model_ ? "ok" : "no_model"}, {"checkpoint", options_.checkpoint_label}};
  body["config"] = model_ ? to_json(model_->config()) : nlohmann::json(nullptr);
  return {200, body};
}

ApiResponse Service::handle(const std::string& method, const std::string& path, const std::string& body) {
  expire_sessions();
  if (method == "GET" && path == "/api/health") return health();
  if (method != "POST") return fail(404, "NotFound", method + " " + path);
  nlohmann::json request = nlohmann::json::object();
  if (!body.empty()) {
    try {
      request = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      return fail(400, "BadJson", e.what());
    }
    if (!request.is_object()) return fail(400, "BadJson", "request body must be a JSON object");
  }
  try {
    if (path == "/api/sample") return sample(request);
    if (path == "/api/regenerate") return regenerate(request);
    if (path == "/api/interpolate") return interpolate(request);
  } catch (const Error& e) {
    return fail(500, e.code(), e.what());
  }
  return fail(404, "NotFound", method + " " + path);
}

void Service::configure_routes() {
  auto& srv = *server_;
  srv.set_default_headers({{"Access-Control-Allow-Origin", options_.cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    const auto out = handle(req.method, req.path, req.body);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  srv.Get("/api/health", route);
  srv.Post("/api/sample", route);
  srv.Post("/api/regenerate", route);
  srv.Post("/api/interpolate", route);
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  if (!options_.static_dir.empty()) {
    if (std::filesystem::is_directory(options_.static_dir)) {
      srv.set_mount_point("/", options_.static_dir.string());
    } else {
      spdlog::warn("static directory {} not found; UI not mounted", options_.static_dir.string());
    }
  }
}

bool Service::listen() {
  spdlog::info("listening on {}:{}", options_.host, options_.port);
  return server_->listen(options_.host, options_.port);
}

int Service::bind_any_port() { return server_->bind_to_any_port(options_.host); }

bool Service::listen_after_bind() { return server_->listen_after_bind(); }

void Service::stop() {
  server_->stop();
  if (!options_.snapshot_path.empty()) save_snapshot(options_.snapshot_path);
}

std::size_t Service::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

void Service::expire_sessions() {
  const auto now = std::chrono::steady_clock::now();
  std::lock_guard lock(sessions_mutex_);
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    std::unique_lock entry_lock(it->second->mutex, std::try_to_lock);
    const bool idle = entry_lock.owns_lock() && now - it->second->session.last_used > options_.session_timeout;
    it = idle ? sessions_.erase(it) : std::next(it);
  }
}

void Service::save_snapshot(const std::filesystem::path& path) const {
  nlohmann::json list = nlohmann::json::array();
  {
    std::lock_guard lock(sessions_mutex_);
    for (const auto& [id, entry] : sessions_) {
      std::lock_guard entry_lock(entry->mutex);
      const auto& s = entry->session;
      list.push_back({{"id", s.id},
                      {"z", s.z},
                      {"structure", to_json(s.structure)},
                      {"pianoroll", to_json(s.roll)},
                      {"created", std::chrono::duration_cast<std::chrono::seconds>(
                                      s.created.time_since_epoch()).count()}});
    }
  }
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << nlohmann::json{{"sessions", list}}.dump(2) << '\n';
}

void Service::load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot read " + path.string());
  try {
    const auto doc = nlohmann::json::parse(in);
    std::lock_guard lock(sessions_mutex_);
    for (const auto& item : doc.at("sessions")) {
      auto entry = std::make_shared<Entry>();
      auto& s = entry->session;
      s.id = item.at("id").get<std::string>();
      s.z = item.at("z").get<std::vector<double>>();
      s.structure = structure_from_json(item.at("structure"));
      s.roll = pianoroll_from_json(item.at("pianoroll"));
      s.created = std::chrono::system_clock::time_point(std::chrono::seconds(item.at("created").get<std::int64_t>()));
      s.last_used = std::chrono::steady_clock::now();
      sessions_[s.id] = entry;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("BadSnapshot", std::string("session snapshot unreadable: ") + e.what());
  }
  spdlog::info("restored {} sessions from {}", sessions_.size(), path.string());
}

}  // namespace poly
