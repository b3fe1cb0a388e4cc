#include "beamtime/event_bus.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <stdexcept>

#include "beamtime/errors.hpp"

namespace beamtime {

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 10> kKindNames{{
    {EventKind::file_created, "file_created"},
    {EventKind::run_concluded, "run_concluded"},
    {EventKind::transfer_started, "transfer_started"},
    {EventKind::transfer_completed, "transfer_completed"},
    {EventKind::job_submitted, "job_submitted"},
    {EventKind::job_state_changed, "job_state_changed"},
    {EventKind::trial_created, "trial_created"},
    {EventKind::tag_added, "tag_added"},
    {EventKind::dataset_created, "dataset_created"},
    {EventKind::job_progress, "job_progress"},
}};

template <class Int>
bool parse_int(std::string_view s, Int& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

void append_line(const std::filesystem::path& file, const std::string& line) {
  std::ofstream out(file, std::ios::app | std::ios::binary);
  out << line << '\n';
  out.flush();
}

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

EventKind parse_event_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown event kind '" + std::string(name) + "'");
}

std::string format_record(const BusEvent& event) {
  std::string line = std::to_string(event.offset);
  line += '\t';
  line += std::to_string(to_ns(event.time));
  line += '\t';
  line += to_string(event.kind);
  line += '\t';
  line += event.payload.dump();
  return line;
}

BusEvent parse_record(std::string_view line, std::string topic, std::size_t line_no) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  std::array<std::string_view, 4> fields;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto tab = line.find('\t', pos);
    if (tab == std::string_view::npos) throw CorruptLog(line_no, "expected 4 tab-separated fields");
    fields[i] = line.substr(pos, tab - pos);
    pos = tab + 1;
  }
  fields[3] = line.substr(pos);

  BusEvent ev;
  ev.topic = std::move(topic);
  std::int64_t ns = 0;
  if (!parse_int(fields[0], ev.offset) || ev.offset < 0) throw CorruptLog(line_no, "bad offset");
  if (!parse_int(fields[1], ns) || ns < 0) throw CorruptLog(line_no, "bad time");
  ev.time = from_ns(ns);
  try {
    ev.kind = parse_event_kind(fields[2]);
  } catch (const std::invalid_argument& e) {
    throw CorruptLog(line_no, e.what());
  }
  try {
    ev.payload = nlohmann::json::parse(fields[3]);
  } catch (const nlohmann::json::parse_error&) {
    throw CorruptLog(line_no, "payload is not valid JSON");
  }
  if (!ev.payload.is_object()) throw CorruptLog(line_no, "payload must be a JSON object");
  return ev;
}

std::vector<BusEvent> read_log(const std::filesystem::path& file, const std::string& topic) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<BusEvent> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto ev = parse_record(line, topic, line_no);
    if (ev.offset != static_cast<std::int64_t>(out.size()))
      throw CorruptLog(line_no, "offset gap: expected " + std::to_string(out.size()));
    out.push_back(std::move(ev));
  }
  return out;
}

EventBus::EventBus(Options options, std::vector<std::string> declared_topics)
    : options_(std::move(options)) {
  for (auto& t : declared_topics) topics_[t];
  if (!options_.persist_dir) return;
  std::filesystem::create_directories(*options_.persist_dir);
  for (const auto& entry : std::filesystem::directory_iterator(*options_.persist_dir)) {
    if (entry.path().extension() != ".log") continue;
    const auto topic = entry.path().stem().string();
    topics_[topic] = read_log(entry.path(), topic);
  }
}

std::vector<std::string> EventBus::default_topics() {
  return {std::string(topics::runs), std::string(topics::transfers), std::string(topics::jobs),
          std::string(topics::campaign)};
}

void EventBus::declare(const std::string& topic) {
  std::lock_guard lock(mutex_);
  topics_[topic];
}

bool EventBus::has_topic(const std::string& topic) const {
  std::lock_guard lock(mutex_);
  return topics_.contains(topic);
}

std::vector<std::string> EventBus::topic_names() const {
  std::lock_guard lock(mutex_);
  std::vector<std::string> names;
  for (const auto& [name, _] : topics_) names.push_back(name);
  return names;
}

std::int64_t EventBus::publish(const std::string& topic, EventKind kind, nlohmann::json payload,
                               SimTime time) {
  if (topic.empty()) throw ValidationError("topic must be nonempty");
  BusEvent copy;
  std::vector<Observer> observers;
  {
    std::lock_guard lock(mutex_);
    auto it = topics_.find(topic);
    if (it == topics_.end()) {
      if (options_.strict_topics) throw UnknownTopic("publish to undeclared topic '" + topic + "'");
      it = topics_.emplace(topic, std::vector<BusEvent>{}).first;
    }
    auto& log = it->second;
    BusEvent ev{topic, static_cast<std::int64_t>(log.size()), time, kind, std::move(payload)};
    if (options_.persist_dir) append_line(*options_.persist_dir / (topic + ".log"), format_record(ev));
    log.push_back(ev);
    copy = std::move(ev);
    observers = observers_;
  }
  for (const auto& obs : observers) obs(copy);
  return copy.offset;
}

Cursor EventBus::subscribe(const std::string& topic, std::int64_t from_offset) const {
  if (from_offset < 0) throw ValidationError("from_offset must be non-negative");
  std::lock_guard lock(mutex_);
  const auto it = topics_.find(topic);
  if (it == topics_.end()) throw UnknownTopic("unknown topic '" + topic + "'");
  return {topic, std::min<std::int64_t>(from_offset, static_cast<std::int64_t>(it->second.size()))};
}

std::vector<BusEvent> EventBus::poll(Cursor& cursor, std::size_t max_n) const {
  if (max_n == 0) throw ValidationError("max_n must be at least 1");
  std::lock_guard lock(mutex_);
  const auto it = topics_.find(cursor.topic);
  if (it == topics_.end()) return {};
  const auto& log = it->second;
  std::vector<BusEvent> out;
  while (out.size() < max_n && cursor.next_offset < static_cast<std::int64_t>(log.size()))
    out.push_back(log[static_cast<std::size_t>(cursor.next_offset++)]);
  return out;
}

std::int64_t EventBus::length(const std::string& topic) const {
  std::lock_guard lock(mutex_);
  const auto it = topics_.find(topic);
  return it == topics_.end() ? 0 : static_cast<std::int64_t>(it->second.size());
}

std::vector<BusEvent> EventBus::events(const std::string& topic) const {
  std::lock_guard lock(mutex_);
  const auto it = topics_.find(topic);
  return it == topics_.end() ? std::vector<BusEvent>{} : it->second;
}

void EventBus::add_observer(Observer observer) {
  std::lock_guard lock(mutex_);
  observers_.push_back(std::move(observer));
}

}  // namespace beamtime
