#include "beamtime/api.hpp"

#include <algorithm>
#include <fstream>
#include <mutex>
#include <shared_mutex>
#include <sstream>

#include <httplib.h>

#include "beamtime/errors.hpp"
#include "beamtime/metrics.hpp"

namespace beamtime {

using nlohmann::json;

std::string_view to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::pending: return "pending";
    case TaskStatus::running: return "running";
    case TaskStatus::completed: return "completed";
    case TaskStatus::failed: return "failed";
  }
  return "pending";
}

namespace {

struct HttpError {
  int status;
  std::string code;
  std::string message;
};

ApiResponse reply(int status, const json& body) { return {status, "application/json", body.dump()}; }

ApiResponse error(int status, const std::string& code, const std::string& message) {
  return reply(status, {{"error", code}, {"message", message}});
}

[[noreturn]] void fail(int status, std::string code, std::string message) {
  throw HttpError{status, std::move(code), std::move(message)};
}

json parse_body(const ApiRequest& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    fail(400, "bad_request", std::string("malformed JSON body: ") + e.what());
  }
}

std::int64_t to_id(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto v = std::stoll(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  fail(404, "not_found", "no such " + what + " '" + s + "'");
}

template <class T>
T field(const json& doc, const std::string& key) {
  if (!doc.contains(key)) fail(400, "bad_request", "missing field '" + key + "'");
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    fail(400, "bad_request", "field '" + key + "' has the wrong type");
  }
}

std::string content_type_for(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".csv") return "text/csv";
  if (ext == ".json") return "application/json";
  if (ext == ".html") return "text/html";
  if (ext == ".js") return "application/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".log" || ext == ".txt") return "text/plain";
  return "application/octet-stream";
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

bool mutating(const std::string& method) { return method == "POST" || method == "PUT" || method == "DELETE"; }

json counts_json(const StageCounts& c) {
  return {{"processed", c.processed}, {"succeeded", c.succeeded}, {"rejected", c.rejected}, {"spots", c.spots}};
}

}  // namespace

ApiService::ApiService(Simulation& sim, std::filesystem::path files_root, std::optional<std::filesystem::path> ui_dir)
    : sim_(sim), files_root_(std::move(files_root)), ui_dir_(std::move(ui_dir)) {
  std::filesystem::create_directories(files_root_);
}

const std::vector<std::string>& ApiService::endpoints() {
  static const std::vector<std::string> list{"/meta", "/account", "/utilities", "/storage",
                                             "/status", "/compute", "/tasks"};
  return list;
}

ApiResponse ApiService::handle(const ApiRequest& req) {
  const auto parts = split_path(req.path);
  try {
    if (parts.empty()) return index();
    if (parts[0] == "ui") return ui(parts);

    const auto it = req.headers.find("authorization");
    if (it == req.headers.end() || it->second != "Bearer " + sim_.config().api.token)
      return error(401, "unauthorized", "missing or invalid bearer token");

    if (mutating(req.method)) {
      std::unique_lock lock(sim_.mutex());
      return route(req, parts);
    }
    std::shared_lock lock(sim_.mutex());
    return route(req, parts);
  } catch (const HttpError& e) {
    return error(e.status, e.code, e.message);
  } catch (const ValidationError& e) {
    return error(400, "validation_error", e.what());
  } catch (const SchemaViolation& e) {
    return error(400, "schema_violation", e.what());
  } catch (const EmptyExpression& e) {
    return error(400, "empty_expression", e.what());
  } catch (const NodesExceedPool& e) {
    return error(400, "nodes_exceed_pool", e.what());
  } catch (const UnknownRun& e) {
    return error(404, "unknown_run", e.what());
  } catch (const UnknownTrial& e) {
    return error(404, "unknown_trial", e.what());
  } catch (const UnknownDataset& e) {
    return error(404, "unknown_dataset", e.what());
  } catch (const UnknownJob& e) {
    return error(404, "unknown_job", e.what());
  } catch (const UnknownReservation& e) {
    return error(404, "unknown_reservation", e.what());
  } catch (const EmptyResult& e) {
    return error(404, "empty_result", e.what());
  } catch (const InvalidState& e) {
    return error(409, "invalid_state", e.what());
  } catch (const TrialFrozen& e) {
    return error(409, "trial_frozen", e.what());
  } catch (const DestinationUnavailable& e) {
    return error(409, "destination_unavailable", e.what());
  } catch (const std::exception& e) {
    return error(500, "internal", e.what());
  }
}

ApiResponse ApiService::route(const ApiRequest& req, const std::vector<std::string>& parts) {
  const auto& head = parts[0];
  if (head == "meta" && req.method == "GET") return meta();
  if (head == "account" && req.method == "GET") return account();
  if (head == "status" && req.method == "GET") return status(parts);
  if (head == "compute") return compute(req, parts);
  if (head == "storage") return storage(req, parts);
  if (head == "tasks") return tasks_route(req, parts);
  if (head == "utilities") return utilities(req, parts);
  if (head == "x-campaign") return campaign(req, parts);
  if (head == "x-admin") return admin(req, parts);
  fail(404, "not_found", "no route for " + req.method + " " + req.path);
}

ApiResponse ApiService::index() const {
  json eps = json::array();
  for (const auto& e : endpoints()) eps.push_back(e);
  return reply(200, {{"endpoints", eps}, {"extensions", {"/x-campaign", "/x-admin"}}, {"ui", "/ui/"}});
}

ApiResponse ApiService::meta() const {
  const auto& api = sim_.config().api;
  return reply(200, {{"api_version", "1.2"},
                     {"center", api.center},
                     {"machine", api.machine},
                     {"scenario", sim_.config().name},
                     {"sim_time_ns", to_ns(sim_.kernel().now())},
                     {"endpoints", endpoints()}});
}

ApiResponse ApiService::account() const {
  double node_s = 0.0;
  for (const auto& a : sim_.scheduler().allocations()) node_s += to_seconds(a.end - a.start);
  const double total = sim_.config().api.allocation_node_hours;
  return reply(200, {{"project", sim_.config().facility.experiment_id},
                     {"allocation_node_hours", total},
                     {"used_node_hours", node_s / 3600.0},
                     {"remaining_node_hours", total - node_s / 3600.0}});
}

ApiResponse ApiService::status(const std::vector<std::string>& parts) const {
  const auto& board = sim_.status();
  if (parts.size() == 1) {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& n : board.names()) list.push_back(board.to_json(board.get(n)));
    return {200, "application/json", list.dump()};
  }
  if (parts.size() == 3 && parts[1] == "outages" && parts[2] == "planned") {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto& o : board.planned_outages(sim_.kernel().now())) list.push_back(board.to_json(o));
    return {200, "application/json", list.dump()};
  }
  if (parts.size() == 2) {
    if (!board.has(parts[1])) fail(404, "not_found", "unknown resource '" + parts[1] + "'");
    return {200, "application/json", board.to_json(board.get(parts[1])).dump()};
  }
  fail(404, "not_found", "no such status path");
}

json ApiService::job_json(JobId id) const {
  const auto& orch = sim_.orchestrator();
  const auto& sj = sim_.scheduler().job(id);
  json j{{"job", id}, {"state", to_string(sj.state)}, {"nodes", sj.request.nodes},
         {"target", to_string(sj.request.target.kind)}, {"submit_ns", to_ns(sj.submit)}};
  if (sj.start) j["start_ns"] = to_ns(*sj.start);
  if (sj.end) j["end_ns"] = to_ns(*sj.end);
  if (sj.resubmit_of) j["resubmit_of"] = *sj.resubmit_of;
  if (!orch.specs().contains(id)) {
    j["label"] = sj.request.label;
    return j;
  }
  const auto& spec = orch.spec(id);
  j["stage"] = to_string(spec.stage);
  j["run"] = spec.run_id;
  j["trial"] = spec.trial_id;
  j["dataset"] = spec.dataset_id;
  j["ranks"] = spec.ranks();
  j["images"] = spec.input.size();
  j["reprocess"] = spec.reprocess;
  j["committed"] = counts_json(orch.job_committed(id));
  j["progress"] = to_json(sim_.store().query_progress({spec.run_id, spec.trial_id, std::nullopt}));
  return j;
}

ApiResponse ApiService::compute(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (parts.size() < 3 || parts[1] != "jobs") fail(404, "not_found", "use /compute/jobs/{machine}");
  if (parts[2] != sim_.config().api.machine) fail(404, "not_found", "unknown machine '" + parts[2] + "'");

  if (parts.size() == 3 && req.method == "GET") {
    json list = json::array();
    for (const auto& [id, _] : sim_.orchestrator().specs()) list.push_back(job_json(id));
    return reply(200, list);
  }
  if (parts.size() == 4) {
    const JobId id = to_id(parts[3], "job");
    if (!sim_.scheduler().jobs().contains(id)) fail(404, "not_found", "unknown job " + parts[3]);
    if (req.method == "GET") return reply(200, job_json(id));
    if (req.method == "DELETE") {
      if (!sim_.scheduler().cancel(id)) fail(409, "invalid_state", "job " + parts[3] + " is not pending");
      return reply(200, {{"job", id}, {"state", to_string(sim_.scheduler().job(id).state)}});
    }
  }
  if (parts.size() != 3 || req.method != "POST") fail(405, "method_not_allowed", req.method + " " + req.path);

  const auto doc = parse_body(req);
  Stage stage;
  try {
    stage = parse_stage(field<std::string>(doc, "stage"));
  } catch (const ValidationError& e) {
    fail(400, "bad_request", e.what());
  }
  const auto dataset = field<DatasetId>(doc, "dataset");
  const auto trial = field<TrialId>(doc, "trial");
  const auto run = field<RunId>(doc, "run");
  const auto nodes = field<int>(doc, "nodes");
  if (nodes < 1) fail(400, "bad_request", "nodes must be >= 1");
  if (nodes > sim_.scheduler().total_nodes()) fail(400, "bad_request", "nodes exceed the pool");
  Target target = Target::batch();
  const auto kind = doc.value("target", std::string("batch"));
  if (kind == "reservation") {
    const auto r = field<ReservationId>(doc, "reservation");
    if (!sim_.scheduler().reservations().contains(r)) fail(400, "bad_request", "unknown reservation");
    target = Target::urgent(r);
  } else if (kind != "batch") {
    fail(400, "bad_request", "target must be batch or reservation");
  }
  if (!sim_.campaign().datasets().contains(dataset)) fail(400, "bad_request", "unknown dataset");
  if (!sim_.campaign().trials().contains(trial)) fail(400, "bad_request", "unknown trial");
  if (!sim_.facility().has_run(run)) fail(400, "bad_request", "unknown run");

  std::int64_t task_id;
  {
    std::lock_guard g(tasks_mu_);
    auto& t = new_task("compute");
    t.run = run;
    task_id = t.task_id;
  }
  // Scheduler acceptance happens on the simulation clock, never inside the request.
  sim_.kernel().schedule(sim_.kernel().now(), "api compute submit",
                         [this, task_id, stage, dataset, trial, run, nodes, target] {
                           std::lock_guard g(tasks_mu_);
                           auto& t = tasks_.at(task_id);
                           t.updated = sim_.kernel().now();
                           try {
                             const auto spec = sim_.orchestrator().submit_manual(stage, dataset, trial, run, nodes, target);
                             t.job = spec.job_id;
                             t.status = TaskStatus::completed;
                             t.result = {{"job_id", spec.job_id}};
                           } catch (const std::exception& e) {
                             t.status = TaskStatus::failed;
                             t.result = {{"error", e.what()}};
                           }
                         });
  std::lock_guard g(tasks_mu_);
  return reply(202, task_json(tasks_.at(task_id)));
}

ApiResponse ApiService::storage(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (parts.size() != 2 || parts[1] != "transfer" || req.method != "POST")
    fail(404, "not_found", "use POST /storage/transfer");
  const auto doc = parse_body(req);
  const auto run = field<RunId>(doc, "run");
  if (!sim_.facility().has_run(run)) fail(404, "unknown_run", "unknown run " + std::to_string(run));
  std::vector<std::string> dests = sim_.mover().config().destination_resources;
  if (doc.contains("destination")) dests = {field<std::string>(doc, "destination")};
  for (const auto& d : dests) {
    if (!sim_.status().has(d)) fail(404, "not_found", "unknown destination '" + d + "'");
    if (!sim_.status().is_active(d))
      fail(409, "destination_unavailable", "destination '" + d + "' is " + std::string(to_string(sim_.status().get(d).status)));
  }
  std::lock_guard g(tasks_mu_);
  auto& t = new_task("transfer");
  t.run = run;
  return reply(202, task_json(t));
}

ApiResponse ApiService::tasks_route(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (req.method != "GET") fail(405, "method_not_allowed", req.method + " " + req.path);
  refresh_tasks();
  std::lock_guard g(tasks_mu_);
  if (parts.size() == 1) {
    json list = json::array();
    for (const auto& [_, t] : tasks_) list.push_back(task_json(t));
    return reply(200, list);
  }
  const auto id = to_id(parts[1], "task");
  const auto it = tasks_.find(id);
  if (parts.size() != 2 || it == tasks_.end()) fail(404, "not_found", "unknown task " + parts[1]);
  return reply(200, task_json(it->second));
}

void ApiService::refresh_tasks() {
  std::lock_guard g(tasks_mu_);
  const auto now = sim_.kernel().now();
  for (auto& [_, t] : tasks_) {
    if (t.terminal() || t.kind != "transfer" || !t.run) continue;
    const auto run = *t.run;
    const auto& mover = sim_.mover();
    if (mover.run_failed(run)) {
      t.status = TaskStatus::failed;
      t.result = {{"run", run}, {"error", "transfer exhausted its retries"}};
      t.updated = now;
    } else if (const auto done = mover.run_completed_at(run)) {
      const auto concluded = mover.run_concluded_at(run);
      t.status = TaskStatus::completed;
      t.result = {{"run", run},
                  {"bytes", sim_.facility().run(run).total_bytes()},
                  {"completed_ns", to_ns(*done)},
                  {"duration_s", concluded ? to_seconds(*done - *concluded) : 0.0}};
      t.updated = now;
    } else if (sim_.facility().run(run).state == RunState::transferring && t.status == TaskStatus::pending) {
      t.status = TaskStatus::running;
      t.result = {{"run", run}, {"bytes_delivered", mover.bytes_delivered(run)}};
      t.updated = now;
    } else if (t.status == TaskStatus::running) {
      t.result["bytes_delivered"] = mover.bytes_delivered(run);
    }
  }
}

std::vector<TaskRecord> ApiService::tasks() const {
  std::lock_guard g(tasks_mu_);
  std::vector<TaskRecord> out;
  for (const auto& [_, t] : tasks_) out.push_back(t);
  return out;
}

TaskRecord& ApiService::new_task(std::string kind) {
  TaskRecord t;
  t.task_id = next_task_++;
  t.kind = std::move(kind);
  t.created = t.updated = sim_.kernel().now();
  return tasks_[t.task_id] = t;
}

json ApiService::task_json(const TaskRecord& t) const {
  return {{"task_id", t.task_id},
          {"kind", t.kind},
          {"status", to_string(t.status)},
          {"result", t.result},
          {"created", sim_.status().iso_time(t.created)},
          {"updated", sim_.status().iso_time(t.updated)},
          {"created_ns", to_ns(t.created)},
          {"updated_ns", to_ns(t.updated)}};
}

std::filesystem::path ApiService::resolve(const std::string& rel) const {
  const std::filesystem::path p(rel);
  if (p.is_absolute()) fail(400, "bad_request", "path must be relative");
  for (const auto& part : p)
    if (part == "..") fail(400, "bad_request", "path escapes the namespace");
  return files_root_ / p;
}

ApiResponse ApiService::utilities(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (parts.size() < 2) fail(404, "not_found", "use /utilities/{ls,command,upload,download}");
  const auto q = req.query.find("path");
  const std::string rel = q == req.query.end() ? "" : q->second;
  const auto& op = parts[1];

  if (op == "ls" && req.method == "GET") {
    const auto dir = resolve(rel);
    if (!std::filesystem::exists(dir)) fail(404, "not_found", "no such path '" + rel + "'");
    json entries = json::array();
    std::vector<std::filesystem::directory_entry> list;
    if (std::filesystem::is_directory(dir))
      for (const auto& e : std::filesystem::directory_iterator(dir)) list.push_back(e);
    else
      list.emplace_back(dir);
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.path() < b.path(); });
    for (const auto& e : list)
      entries.push_back({{"name", e.path().filename().string()},
                         {"type", e.is_directory() ? "dir" : "file"},
                         {"size", e.is_directory() ? 0 : static_cast<std::int64_t>(e.file_size())}});
    return reply(200, {{"path", rel}, {"entries", entries}});
  }
  if (op == "download" && req.method == "GET") {
    const auto f = resolve(rel);
    if (rel.empty() || !std::filesystem::is_regular_file(f)) fail(404, "not_found", "no such file '" + rel + "'");
    return {200, content_type_for(f), read_file(f)};
  }
  if (op == "upload" && req.method == "POST") {
    if (rel.empty()) fail(400, "bad_request", "upload needs ?path=");
    const auto f = resolve(rel);
    std::filesystem::create_directories(f.parent_path());
    std::ofstream out(f, std::ios::binary);
    out << req.body;
    return reply(201, {{"path", rel}, {"bytes", req.body.size()}});
  }
  if (op == "command" && req.method == "POST") {
    const auto doc = parse_body(req);
    std::istringstream words(field<std::string>(doc, "command"));
    std::string cmd, arg;
    words >> cmd;
    words >> arg;
    std::string output;
    int code = 0;
    const auto target = resolve(arg);
    if (cmd == "ls") {
      if (!std::filesystem::exists(target)) {
        code = 2;
        output = "ls: " + arg + ": no such file or directory\n";
      } else if (std::filesystem::is_directory(target)) {
        std::vector<std::string> names;
        for (const auto& e : std::filesystem::directory_iterator(target)) names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        for (const auto& n : names) output += n + "\n";
      } else {
        output = arg + "\n";
      }
    } else if (cmd == "cat" || cmd == "wc" || cmd == "du") {
      if (!std::filesystem::is_regular_file(target)) {
        code = 1;
        output = cmd + ": " + arg + ": no such file\n";
      } else if (cmd == "cat") {
        output = read_file(target);
      } else if (cmd == "wc") {
        const auto text = read_file(target);
        output = std::to_string(std::count(text.begin(), text.end(), '\n')) + " " + std::to_string(text.size()) + " " +
                 arg + "\n";
      } else {
        output = std::to_string(std::filesystem::file_size(target)) + "\t" + arg + "\n";
      }
    } else {
      fail(400, "bad_request", "command '" + cmd + "' not allowed (ls, cat, wc, du)");
    }
    std::lock_guard g(tasks_mu_);
    auto& t = new_task("command");
    t.status = TaskStatus::completed;
    t.result = {{"output", output}, {"exit_code", code}};
    return reply(202, task_json(t));
  }
  fail(404, "not_found", "no route for " + req.method + " " + req.path);
}

ApiResponse ApiService::campaign(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (parts.size() < 2) fail(404, "not_found", "use /x-campaign/{runs,tags,trials,datasets,...}");
  auto& camp = sim_.campaign();
  auto& orch = sim_.orchestrator();
  const auto& what = parts[1];
  const auto& m = req.method;

  if (what == "runs") {
    if (parts.size() == 2 && m == "GET") {
      json list = json::array();
      for (auto id : camp.runs()) {
        const auto& run = sim_.facility().run(id);
        list.push_back({{"run", id}, {"state", to_string(run.state)}, {"images", run.image_count},
                        {"tags", camp.tags_of(id)}});
      }
      return reply(200, list);
    }
    if (parts.size() == 4 && parts[3] == "tags" && m == "POST") {
      const RunId id = to_id(parts[2], "run");
      const auto tags = field<std::vector<std::string>>(parse_body(req), "tags");
      return reply(200, {{"run", id}, {"tags", camp.tag_run(id, tags)}});
    }
  }
  if (what == "tags" && parts.size() == 2) {
    if (m == "GET") return reply(200, camp.tags());
    if (m == "POST") {
      const auto tag = field<std::string>(parse_body(req), "tag");
      camp.declare_tag(tag);
      return reply(201, {{"tag", tag}});
    }
  }
  if (what == "trials" && parts.size() == 2) {
    if (m == "GET") return reply(200, orch.snapshot().at("trials"));
    if (m == "POST") {
      auto doc = parse_body(req);
      const auto params = doc.contains("params") ? doc.at("params") : doc;
      const auto id = camp.create_trial(params);
      return reply(201, {{"trial", id}});
    }
  }
  if (what == "datasets" && parts.size() == 2) {
    if (m == "GET") return reply(200, orch.snapshot().at("datasets"));
    if (m == "POST") {
      const auto doc = parse_body(req);
      TagExpr expr;
      try {
        expr = tag_expr_from_json(doc.at("expr"));
      } catch (const json::exception& e) {
        fail(400, "bad_request", std::string("expr: ") + e.what());
      }
      const auto id = camp.create_dataset(field<std::string>(doc, "name"), expr);
      return reply(201, {{"dataset", id}});
    }
  }
  if (what == "snapshot" && m == "GET") return reply(200, orch.snapshot());
  if (what == "progress" && m == "GET") {
    ProgressFilter f;
    if (auto it = req.query.find("run"); it != req.query.end()) f.run = to_id(it->second, "run");
    if (auto it = req.query.find("trial"); it != req.query.end()) f.trial = to_id(it->second, "trial");
    if (auto it = req.query.find("stage"); it != req.query.end()) f.stage = parse_stage(it->second);
    return reply(200, to_json(sim_.store().query_progress(f)));
  }
  if (what == "turnaround" && m == "GET") return reply(200, to_json(orch.turnaround_report(), req.query.contains("samples")));
  if (what == "live-priority") {
    if (m == "GET") return reply(200, {{"enabled", orch.live_priority()}});
    if (m == "PUT" || m == "POST") {
      orch.set_live_priority(field<bool>(parse_body(req), "enabled"));
      return reply(200, {{"enabled", orch.live_priority()}});
    }
  }
  if (what == "reprocess" && m == "POST") {
    const auto trial = field<TrialId>(parse_body(req), "trial");
    camp.trial(trial);  // UnknownTrial
    json ids = json::array();
    for (const auto& s : orch.on_trial_created(trial)) ids.push_back(s.job_id);
    return reply(200, {{"trial", trial}, {"jobs", ids}});
  }
  if (what == "plots" && parts.size() == 4 && m == "GET") {
    const bool csv = req.query.contains("format") && req.query.at("format") == "csv";
    const JobId id = to_id(parts[2], "job");
    const auto* r = orch.result(id);
    if (!r) fail(404, "not_found", "job " + parts[2] + " has not started");
    if (parts[3] == "weather") {
      const auto doc = weather_plot(*r);
      return csv ? ApiResponse{200, "text/csv", timeline_csv(doc)} : ApiResponse{200, "image/svg+xml", timeline_svg(doc)};
    }
    if (parts[3] == "pdf") {
      const auto h = duration_pdf(r->traces, r->stage, 0.1);
      const std::string name(to_string(r->stage));
      return csv ? ApiResponse{200, "text/csv", histogram_csv(h, "duration_s")}
                 : ApiResponse{200, "image/svg+xml",
                               histogram_svg(h, name + " time per image", "seconds", stage_color(r->stage))};
    }
  }
  fail(404, "not_found", "no route for " + m + " " + req.path);
}

ApiResponse ApiService::admin(const ApiRequest& req, const std::vector<std::string>& parts) {
  if (parts.size() == 2 && parts[1] == "status" && req.method == "POST") {
    const auto doc = parse_body(req);
    const auto resource = field<std::string>(doc, "resource");
    if (!sim_.status().has(resource)) fail(404, "not_found", "unknown resource '" + resource + "'");
    Health h;
    try {
      h = parse_health(field<std::string>(doc, "status"));
    } catch (const std::exception& e) {
      fail(400, "bad_request", e.what());
    }
    sim_.status().set_status(resource, h, sim_.kernel().now());
    return {200, "application/json", sim_.status().to_json(sim_.status().get(resource)).dump()};
  }
  fail(404, "not_found", "no route for " + req.method + " " + req.path);
}

ApiResponse ApiService::ui(const std::vector<std::string>& parts) const {
  if (!ui_dir_) fail(404, "not_found", "no console assets configured");
  std::string rel;
  for (std::size_t i = 1; i < parts.size(); ++i) rel += (rel.empty() ? "" : "/") + parts[i];
  if (rel.empty()) rel = "index.html";
  const std::filesystem::path p(rel);
  for (const auto& part : p)
    if (part == "..") fail(400, "bad_request", "path escapes the asset directory");
  const auto f = *ui_dir_ / p;
  if (!std::filesystem::is_regular_file(f)) fail(404, "not_found", "no asset '" + rel + "'");
  return {200, content_type_for(f), read_file(f)};
}

void mount(httplib::Server& server, ApiService& api) {
  auto handler = [&api](const httplib::Request& req, httplib::Response& res) {
    ApiRequest r;
    r.method = req.method;
    r.path = req.path;
    for (const auto& [k, v] : req.params) r.query.emplace(k, v);
    for (const auto& [k, v] : req.headers) {
      std::string key = k;
      std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
      r.headers.emplace(key, v);
    }
    r.body = req.body;
    const auto out = api.handle(r);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
  };
  server.Get(".*", handler);
  server.Post(".*", handler);
  server.Put(".*", handler);
  server.Delete(".*", handler);
}

std::pair<std::string, int> parse_addr(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw ValidationError("address must look like host:port or :port");
  std::string host = addr.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(addr.substr(colon + 1));
  } catch (const std::exception&) {
    throw ValidationError("bad port in '" + addr + "'");
  }
  if (port < 0 || port > 65535) throw ValidationError("bad port in '" + addr + "'");
  return {host.empty() ? "127.0.0.1" : host, port};
}

}  // namespace beamtime
