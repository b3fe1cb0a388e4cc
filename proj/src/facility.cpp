#include "beamtime/facility.hpp"

#include <cmath>
#include <cstdio>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string_view to_string(RunState s) {
  switch (s) {
    case RunState::recording: return "recording";
    case RunState::concluded: return "concluded";
    case RunState::transferring: return "transferring";
    case RunState::available_remote: return "available_remote";
  }
  return "unknown";
}

std::string_view to_string(FileKind k) {
  switch (k) {
    case FileKind::data: return "data";
    case FileKind::index: return "index";
    case FileKind::calib: return "calib";
  }
  return "unknown";
}

FileKind parse_file_kind(std::string_view s) {
  if (s == "data") return FileKind::data;
  if (s == "index") return FileKind::index;
  if (s == "calib") return FileKind::calib;
  throw ValidationError("unknown file kind '" + std::string(s) + "'");
}

RunState parse_run_state(std::string_view s) {
  for (auto st : {RunState::recording, RunState::concluded, RunState::transferring, RunState::available_remote})
    if (to_string(st) == s) return st;
  throw ValidationError("unknown run state '" + std::string(s) + "'");
}

std::string ImageRef::id() const { return std::to_string(run_id) + ":" + std::to_string(index); }

std::int64_t Run::total_bytes() const {
  std::int64_t total = 0;
  for (const auto& f : files) total += f.size_bytes;
  return total;
}

std::int64_t Run::data_bytes() const {
  std::int64_t total = 0;
  for (const auto& f : files)
    if (f.kind == FileKind::data) total += f.size_bytes;
  return total;
}

nlohmann::json to_json(const FileAsset& f) {
  return {{"path", f.path}, {"kind", to_string(f.kind)}, {"size_bytes", f.size_bytes}, {"run", f.run_id}};
}

FileAsset file_from_json(const nlohmann::json& j) {
  return {j.at("path").get<std::string>(), parse_file_kind(j.at("kind").get<std::string>()),
          j.at("size_bytes").get<std::int64_t>(), j.at("run").get<RunId>()};
}

Facility::Facility(Kernel& kernel, EventBus& bus, FacilityConfig config, std::uint64_t seed)
    : kernel_(kernel), bus_(bus), config_(std::move(config)), seed_(seed) {
  const auto [lo, hi] = config_.files_per_run_range;
  if (lo < 4 || hi < lo) throw ValidationError("files_per_run_range must satisfy 4 <= lo <= hi");
  if (!(config_.byte_scale >= 1.0)) throw ValidationError("byte_scale must be >= 1");
  bus_.add_observer([this](const BusEvent& ev) { on_bus_event(ev); });
}

RunId Facility::start_run(const std::string& experiment_id, double rate_hz, SimDuration duration,
                          std::optional<std::int64_t> image_bytes) {
  if (!(rate_hz > 0.0)) throw ValidationError("rate_hz must be positive");
  if (duration <= SimDuration::zero()) throw ValidationError("duration must be positive");
  if (config_.single_beamline && recording_run())
    throw FacilityBusy("run " + std::to_string(*recording_run()) + " is still recording");

  const auto bytes = image_bytes.value_or(config_.image_bytes);
  if (bytes <= 0) throw ValidationError("image_bytes must be positive");

  Run run;
  run.run_id = next_run_id_++;
  run.experiment_id = experiment_id;
  run.start = kernel_.now();
  run.end = run.start + duration;
  run.rate_hz = rate_hz;
  run.image_bytes = std::max<std::int64_t>(1, std::llround(static_cast<double>(bytes) / config_.byte_scale));
  const auto id = run.run_id;
  runs_.emplace(id, std::move(run));
  pending_conclusions_[id] =
      kernel_.schedule(kernel_.now() + duration, "conclude run " + std::to_string(id), [this, id] {
        pending_conclusions_.erase(id);
        conclude_run(id);
      });
  return id;
}

const Run& Facility::conclude_run(RunId id) {
  Run& run = mutable_run(id);
  if (run.state != RunState::recording)
    throw InvalidState("run " + std::to_string(id) + " is already " + std::string(to_string(run.state)));
  if (auto it = pending_conclusions_.find(id); it != pending_conclusions_.end()) {
    kernel_.cancel(it->second);
    pending_conclusions_.erase(it);
  }
  run.end = kernel_.now();
  // Guard against 119.99999 from binary rates.
  run.image_count = static_cast<std::int64_t>(std::floor(to_seconds(run.end - run.start) * run.rate_hz + 1e-9));
  run.state = RunState::concluded;

  // Choose D data files and C calib files so that 3D + C lands in the configured range.
  RngStream rng(seed_, "run:" + std::to_string(id) + ":files");
  const auto [lo, hi] = config_.files_per_run_range;
  std::vector<std::pair<int, int>> shapes;
  for (int d = 1; 3 * d + 1 <= hi; ++d)
    for (int c = 1; c <= 3; ++c)
      if (3 * d + c >= lo && 3 * d + c <= hi) shapes.emplace_back(d, c);
  const auto [data_files, calib_files] = shapes[rng.next_u64() % shapes.size()];
  run.data_files = data_files;

  char stem[64];
  std::snprintf(stem, sizeof stem, "run%04lld", static_cast<long long>(id));
  const std::string dir = run.experiment_id + "/" + stem + "/";
  const auto calib_size = std::max<std::int64_t>(1, std::llround(static_cast<double>(config_.calib_bytes) / config_.byte_scale));

  run.files.clear();
  for (int f = 0; f < data_files; ++f) {
    const auto first = run.image_count * f / data_files;
    const auto last = run.image_count * (f + 1) / data_files;
    const auto data_size = (last - first) * run.image_bytes;
    char name[32];
    std::snprintf(name, sizeof name, "s%02d", f);
    run.files.push_back({dir + stem + "-" + name + ".xtc2", FileKind::data, data_size, id});
    // Index files stay well under 1% of their data file.
    const auto index_size = data_size / 250;
    for (int k = 0; k < 2; ++k)
      run.files.push_back({dir + "index/" + stem + "-" + name + ".idx" + std::to_string(k), FileKind::index,
                           index_size, id});
  }
  for (int c = 0; c < calib_files; ++c)
    run.files.push_back({dir + "calib/" + stem + "-calib" + std::to_string(c) + ".h5", FileKind::calib, calib_size, id});

  auto files_json = nlohmann::json::array();
  for (const auto& f : run.files) {
    bus_.publish(std::string(topics::runs), EventKind::file_created, to_json(f), kernel_.now());
    files_json.push_back(to_json(f));
  }
  bus_.publish(std::string(topics::runs), EventKind::run_concluded,
               {{"run", id},
                {"experiment", run.experiment_id},
                {"start_ns", to_ns(run.start)},
                {"end_ns", to_ns(run.end)},
                {"rate_hz", run.rate_hz},
                {"image_count", run.image_count},
                {"image_bytes", run.image_bytes},
                {"total_bytes", run.total_bytes()},
                {"files", files_json}},
               kernel_.now());
  return runs_.at(id);
}

std::vector<ImageRef> Facility::image_refs(RunId id) const {
  const Run& r = run(id);
  if (r.state == RunState::recording) throw InvalidState("run " + std::to_string(id) + " is still recording");
  std::vector<ImageRef> refs;
  refs.reserve(static_cast<std::size_t>(r.image_count));
  for (std::int32_t f = 0; f < r.data_files; ++f) {
    const auto first = r.image_count * f / r.data_files;
    const auto last = r.image_count * (f + 1) / r.data_files;
    for (auto i = first; i < last; ++i) {
      const auto recorded =
          r.start + SimDuration{static_cast<std::int64_t>(std::floor(static_cast<double>(i) * 1e9 / r.rate_hz))};
      refs.push_back({id, i, f, (i - first) * r.image_bytes, recorded, r.image_bytes});
    }
  }
  return refs;
}

std::int64_t Facility::images_recorded(RunId id, SimTime at) const {
  const Run& r = run(id);
  if (r.state != RunState::recording) return r.image_count;
  if (at <= r.start) return 0;
  return static_cast<std::int64_t>(std::floor(to_seconds(at - r.start) * r.rate_hz + 1e-9));
}

const Run& Facility::run(RunId id) const {
  const auto it = runs_.find(id);
  if (it == runs_.end()) throw UnknownRun("unknown run " + std::to_string(id));
  return it->second;
}

Run& Facility::mutable_run(RunId id) {
  const auto it = runs_.find(id);
  if (it == runs_.end()) throw UnknownRun("unknown run " + std::to_string(id));
  return it->second;
}

std::vector<RunId> Facility::run_ids() const {
  std::vector<RunId> ids;
  for (const auto& [id, _] : runs_) ids.push_back(id);
  return ids;
}

std::optional<RunId> Facility::recording_run() const {
  for (const auto& [id, r] : runs_)
    if (r.state == RunState::recording) return id;
  return std::nullopt;
}

void Facility::advance_state(RunId id, RunState next) {
  Run& r = mutable_run(id);
  if (static_cast<int>(next) < static_cast<int>(r.state))
    throw InvalidState("run " + std::to_string(id) + " cannot go from " + std::string(to_string(r.state)) +
                       " to " + std::string(to_string(next)));
  r.state = next;
}

void Facility::on_bus_event(const BusEvent& ev) {
  if (ev.topic != topics::transfers) return;
  const auto run_it = ev.payload.find("run");
  if (run_it == ev.payload.end()) return;
  const auto id = run_it->get<RunId>();
  if (!runs_.contains(id)) return;
  auto& r = runs_.at(id);
  if (ev.kind == EventKind::transfer_started && r.state == RunState::concluded) {
    r.state = RunState::transferring;
  } else if (ev.kind == EventKind::transfer_completed && ev.payload.value("scope", "") == "run" &&
             ev.payload.value("status", "") == "available_remote") {
    r.state = RunState::available_remote;
  }
}

}  // namespace beamtime
