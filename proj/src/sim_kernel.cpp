#include "beamtime/sim_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <thread>

#include "beamtime/errors.hpp"

namespace beamtime {

SimDuration sim_seconds(double seconds) {
  return SimDuration{static_cast<std::int64_t>(std::llround(seconds * 1e9))};
}

EventHandle Kernel::schedule(SimTime at, std::string label, Action action) {
  if (at < now_) {
    throw PastEvent("cannot schedule '" + label + "' at " + std::to_string(to_seconds(at)) +
                    "s, now is " + std::to_string(to_seconds(now_)) + "s");
  }
  const auto seq = next_seq_++;
  queue_.push({at, seq});
  actions_.emplace(seq, Pending{std::move(label), std::move(action)});
  return {seq};
}

bool Kernel::cancel(EventHandle handle) { return actions_.erase(handle.seq) > 0; }

void Kernel::drop_cancelled_head() {
  while (!queue_.empty() && !actions_.contains(queue_.top().seq)) queue_.pop();
}

std::optional<SimTime> Kernel::next_event_time() {
  drop_cancelled_head();
  if (queue_.empty()) return std::nullopt;
  return queue_.top().at;
}

std::size_t Kernel::run_until(SimTime t_end) {
  if (t_end < now_) throw PastEvent("run_until target lies in the past");
  std::size_t fired = 0;
  for (;;) {
    drop_cancelled_head();
    if (queue_.empty() || queue_.top().at > t_end) break;
    const Slot slot = queue_.top();
    queue_.pop();
    auto node = actions_.extract(slot.seq);
    now_ = slot.at;
    if (tracing_) trace_.push_back({slot.at, slot.seq, node.mapped().label});
    ++fired;
    node.mapped().action();
  }
  now_ = t_end;
  return fired;
}

std::string Kernel::trace_text() const {
  std::ostringstream out;
  for (const auto& e : trace_) out << to_ns(e.fire_at) << '\t' << e.seq << '\t' << e.label << '\n';
  return out.str();
}

RealtimeDriver::RealtimeDriver(Kernel& kernel, double wall_per_virtual_second, StepRunner exclusive)
    : kernel_(kernel), scale_(wall_per_virtual_second), exclusive_(std::move(exclusive)) {}

std::size_t RealtimeDriver::run(SimTime t_end, std::stop_token stop, SimDuration max_step) {
  using wall = std::chrono::steady_clock;
  const auto wall_start = wall::now();
  const SimTime virtual_start = kernel_.now();
  std::size_t fired = 0;
  while (!stop.stop_requested() && kernel_.now() < t_end) {
    SimTime next = std::min(t_end, kernel_.now() + max_step);
    std::optional<SimTime> upcoming;
    exclusive_([&] { upcoming = kernel_.next_event_time(); });
    if (upcoming && *upcoming < next) next = std::max(*upcoming, kernel_.now());
    const double wall_offset = to_seconds(next - virtual_start) * scale_;
    std::this_thread::sleep_until(wall_start + std::chrono::duration_cast<wall::duration>(
                                                   std::chrono::duration<double>(wall_offset)));
    exclusive_([&] { fired += kernel_.run_until(next); });
  }
  return fired;
}

// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t scenario_seed, std::string_view key) {
  return splitmix64(splitmix64(scenario_seed) ^ fnv1a(key));
}

std::string image_stream_key(std::int64_t run_id, std::int64_t index) {
  return "image:" + std::to_string(run_id) + ":" + std::to_string(index);
}

RngStream::RngStream(std::uint64_t scenario_seed, std::string_view key)
    : engine_(stream_seed(scenario_seed, key)) {}

double RngStream::uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double RngStream::normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }

DistSpec DistSpec::lognormal_median(double median, double sigma) {
  if (!(median > 0.0)) throw InvalidDistribution("lognormal median must be positive");
  return lognormal(std::log(median), sigma);
}

DistSpec DistSpec::mixture(std::vector<MixtureComponent> components) {
  return {MixtureDist{std::move(components)}};
}

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

void validate(const DistSpec& dist) {
  std::visit(overloaded{
                 [](const ConstantDist& c) {
                   if (!std::isfinite(c.value)) throw InvalidDistribution("constant must be finite");
                 },
                 [](const UniformDist& u) {
                   if (!std::isfinite(u.lo) || !std::isfinite(u.hi) || u.hi < u.lo)
                     throw InvalidDistribution("uniform requires finite lo <= hi");
                 },
                 [](const LogNormalDist& l) {
                   if (!std::isfinite(l.mu)) throw InvalidDistribution("lognormal mu must be finite");
                   if (!(l.sigma >= 0.0) || !std::isfinite(l.sigma))
                     throw InvalidDistribution("lognormal sigma must be non-negative");
                 },
                 [](const MixtureDist& m) {
                   if (m.components.empty()) throw InvalidDistribution("mixture has no components");
                   double total = 0.0;
                   for (const auto& c : m.components) {
                     if (!(c.weight >= 0.0)) throw InvalidDistribution("mixture weight is negative");
                     total += c.weight;
                     validate(c.dist);
                   }
                   if (std::abs(total - 1.0) > 1e-9)
                     throw InvalidDistribution("mixture weights sum to " + std::to_string(total));
                 },
             },
             dist.kind);
}

double sample(RngStream& stream, const DistSpec& dist) {
  return std::visit(overloaded{
                        [](const ConstantDist& c) { return c.value; },
                        [&](const UniformDist& u) { return u.lo + (u.hi - u.lo) * stream.uniform01(); },
                        [&](const LogNormalDist& l) {
                          // sigma == 0 must yield exactly e^mu without consuming state differently.
                          const double z = stream.normal();
                          return l.sigma == 0.0 ? std::exp(l.mu) : std::exp(l.mu + l.sigma * z);
                        },
                        [&](const MixtureDist& m) {
                          const double u = stream.uniform01();
                          double acc = 0.0;
                          for (const auto& c : m.components) {
                            acc += c.weight;
                            if (u < acc) return sample(stream, c.dist);
                          }
                          return sample(stream, m.components.back().dist);
                        },
                    },
                    dist.kind);
}

double support_min(const DistSpec& dist) {
  return std::visit(overloaded{
                        [](const ConstantDist& c) { return c.value; },
                        [](const UniformDist& u) { return u.lo; },
                        [](const LogNormalDist&) { return 0.0; },
                        [](const MixtureDist& m) {
                          double lo = std::numeric_limits<double>::infinity();
                          for (const auto& c : m.components) lo = std::min(lo, support_min(c.dist));
                          return lo;
                        },
                    },
                    dist.kind);
}

void to_json(nlohmann::json& j, const DistSpec& d) {
  std::visit(overloaded{
                 [&](const ConstantDist& c) { j = {{"constant", c.value}}; },
                 [&](const UniformDist& u) { j = {{"uniform", {u.lo, u.hi}}}; },
                 [&](const LogNormalDist& l) { j = {{"lognormal", {{"mu", l.mu}, {"sigma", l.sigma}}}}; },
                 [&](const MixtureDist& m) {
                   auto arr = nlohmann::json::array();
                   for (const auto& c : m.components) arr.push_back({{"weight", c.weight}, {"dist", c.dist}});
                   j = {{"mixture", arr}};
                 },
             },
             d.kind);
}

void from_json(const nlohmann::json& j, DistSpec& d) {
  if (j.is_number()) {
    d = DistSpec::constant(j.get<double>());
    return;
  }
  if (!j.is_object() || j.size() != 1)
    throw InvalidDistribution("distribution must be a number or a single-key object");
  const std::string name = j.begin().key();
  const nlohmann::json& body = j.begin().value();
  if (name == "constant") {
    d = DistSpec::constant(body.get<double>());
  } else if (name == "uniform") {
    if (!body.is_array() || body.size() != 2) throw InvalidDistribution("uniform expects [lo, hi]");
    d = DistSpec::uniform(body[0].get<double>(), body[1].get<double>());
  } else if (name == "lognormal") {
    const double sigma = body.at("sigma").get<double>();
    if (body.contains("median")) {
      d = DistSpec::lognormal_median(body.at("median").get<double>(), sigma);
    } else {
      d = DistSpec::lognormal(body.at("mu").get<double>(), sigma);
    }
  } else if (name == "mixture") {
    std::vector<MixtureComponent> comps;
    for (const auto& c : body) comps.push_back({c.at("weight").get<double>(), c.at("dist").get<DistSpec>()});
    d = DistSpec::mixture(std::move(comps));
  } else {
    throw InvalidDistribution("unknown distribution '" + name + "'");
  }
  validate(d);
}

}  // namespace beamtime
