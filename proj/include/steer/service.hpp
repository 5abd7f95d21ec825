#ifndef STEER_SERVICE_HPP
#define STEER_SERVICE_HPP

#include "steer/config.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace httplib {
class Server;
}

namespace steer {

struct ServiceOptions {
  std::filesystem::path data_dir = "data";
  RunConfig defaults;  // config of new sessions
};

/// HTTP status for an error code.
int http_status(ErrorCode code);
nlohmann::json error_json(const Error& e);

struct Session;

/// Session store behind the /api/v1 routes. Sessions are persisted as
/// append-only JSON snapshots under data_dir/sessions/<id>/ and reloaded on
/// construction.
class Service {
 public:
  explicit Service(ServiceOptions options);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void mount(httplib::Server& server);

  /// Cancels running jobs and waits for their workers.
  void shutdown();

  std::size_t session_count() const;

 private:
  std::shared_ptr<Session> find(const std::string& id) const;
  void restore();

  ServiceOptions options_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// Runs the service on host:port until the process is interrupted.
void serve(const ServiceOptions& options, const std::string& host, int port);

}  // namespace steer

#endif  // STEER_SERVICE_HPP
