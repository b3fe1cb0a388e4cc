#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "beamtime/simulation.hpp"

namespace httplib {
class Server;
}

namespace beamtime {

enum class TaskStatus { pending, running, completed, failed };
std::string_view to_string(TaskStatus s);

struct TaskRecord {
  std::int64_t task_id = 0;
  std::string kind;  // "compute", "transfer", "command"
  TaskStatus status = TaskStatus::pending;
  nlohmann::json result = nlohmann::json::object();
  SimTime created{};
  SimTime updated{};
  // What the task waits on.
  std::optional<RunId> run;
  std::optional<JobId> job;

  bool terminal() const { return status == TaskStatus::completed || status == TaskStatus::failed; }
};

struct ApiRequest {
  std::string method = "GET";
  std::string path = "/";
  std::map<std::string, std::string> query;
  /// Header names in lower case.
  std::map<std::string, std::string> headers;
  std::string body;
};

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;

  nlohmann::json json() const { return nlohmann::json::parse(body); }
};

/// REST facade over one Simulation. Transport-free: `handle` maps a request to a response
/// and takes the simulation lock itself (shared for reads, exclusive for writes).
class ApiService {
 public:
  /// `files_root` is the namespace served by /utilities; `ui_dir` holds static console assets.
  ApiService(Simulation& sim, std::filesystem::path files_root, std::optional<std::filesystem::path> ui_dir = {});

  ApiResponse handle(const ApiRequest& request);

  /// Refreshes non-terminal tasks from simulation state. Caller holds the lock.
  void refresh_tasks();
  std::vector<TaskRecord> tasks() const;
  const std::filesystem::path& files_root() const noexcept { return files_root_; }

  static const std::vector<std::string>& endpoints();

 private:
  ApiResponse route(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse index() const;
  ApiResponse meta() const;
  ApiResponse account() const;
  ApiResponse status(const std::vector<std::string>& parts) const;
  ApiResponse compute(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse storage(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse tasks_route(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse utilities(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse campaign(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse admin(const ApiRequest& req, const std::vector<std::string>& parts);
  ApiResponse ui(const std::vector<std::string>& parts) const;

  TaskRecord& new_task(std::string kind);
  nlohmann::json task_json(const TaskRecord& t) const;
  nlohmann::json job_json(JobId id) const;
  std::filesystem::path resolve(const std::string& rel) const;

  Simulation& sim_;
  std::filesystem::path files_root_;
  std::optional<std::filesystem::path> ui_dir_;
  mutable std::mutex tasks_mu_;  // guards tasks_ under a shared simulation lock
  std::map<std::int64_t, TaskRecord> tasks_;
  std::int64_t next_task_ = 1;
};

/// Registers a catch-all handler on `server` that forwards to `api`.
void mount(httplib::Server& server, ApiService& api);

/// Parses "host:port" or ":port" (host defaults to 127.0.0.1).
std::pair<std::string, int> parse_addr(const std::string& addr);

}  // namespace beamtime
