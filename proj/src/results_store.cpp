#include "beamtime/results_store.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string ProgressRecord::image_id() const { return std::to_string(run) + ":" + std::to_string(image_index); }

nlohmann::json to_json(const ProgressRecord& r) {
  return {{"id", r.id},           {"run", r.run},
          {"image", r.image_index}, {"trial", r.trial},
          {"stage", to_string(r.stage)}, {"outcome", to_string(r.outcome)},
          {"n_spots", r.n_spots}, {"job", r.job},
          {"committed_ns", to_ns(r.committed_at)}};
}

ProgressRecord record_from_json(const nlohmann::json& j) {
  ProgressRecord r;
  r.id = j.at("id").get<std::int64_t>();
  r.run = j.at("run").get<RunId>();
  r.image_index = j.at("image").get<std::int64_t>();
  r.trial = j.at("trial").get<TrialId>();
  r.stage = parse_stage(j.at("stage").get<std::string>());
  r.outcome = parse_outcome(j.at("outcome").get<std::string>());
  r.n_spots = j.at("n_spots").get<std::int32_t>();
  r.job = j.at("job").get<JobId>();
  r.committed_at = from_ns(j.at("committed_ns").get<std::int64_t>());
  return r;
}

nlohmann::json to_json(const ProgressCounts& c) {
  nlohmann::json stages = nlohmann::json::object();
  for (auto s : kStages) {
    const auto& sc = c.at(s);
    stages[std::string(to_string(s))] = {
        {"processed", sc.processed}, {"succeeded", sc.succeeded}, {"rejected", sc.rejected}, {"spots", sc.spots}};
  }
  return {{"records", c.records}, {"stages", stages}};
}

namespace {

std::filesystem::path wal_path(const StoreOptions& o) { return *o.dir / "store.wal"; }

}  // namespace

Store::Store(StoreOptions options) : options_(std::move(options)) {
  if (options_.dir) {
    std::filesystem::create_directories(*options_.dir);
    if (std::filesystem::exists(wal_path(options_))) recover();
  }
}

void Store::append_wal(const std::string& text) {
  if (options_.dir) {
    std::ofstream out(wal_path(options_), std::ios::app | std::ios::binary);
    out << text;
    out.flush();
    if (!out) throw StoreUnavailable("cannot write " + wal_path(options_).string());
  } else {
    wal_ += text;
  }
}

Connection Store::connect(SimTime at) {
  std::unique_lock lock(mutex_);
  if (!up_) throw StoreUnavailable("store is down");
  ++open_;
  high_water_ = std::max(high_water_, open_);
  return {next_connection_++, at};
}

void Store::close(const Connection& c) {
  if (c.id < 0) return;
  std::unique_lock lock(mutex_);
  if (open_ > 0) --open_;
}

void Store::apply(std::vector<ProgressRecord> records, SimTime at) {
  for (auto& r : records) {
    index_.emplace(Key{r.run, r.image_index, r.trial, r.stage}, r.id);
    auto& agg = aggregates_[{r.run, r.trial}][stage_index(r.stage)];
    ++agg.processed;
    (r.outcome == Outcome::success ? agg.succeeded : agg.rejected) += 1;
    agg.spots += r.n_spots;
    records_.push_back(std::move(r));
  }
  txs_.push_back({at, static_cast<std::int64_t>(records.size())});
}

std::vector<std::int64_t> Store::commit(const Connection& c, std::vector<ProgressRecord> records, SimTime at) {
  std::unique_lock lock(mutex_);
  if (c.id < 0) throw StoreUnavailable("commit without a connection");
  if (!up_) throw StoreUnavailable("store is down");
  if (records.empty()) return {};

  std::map<Key, bool> seen;
  for (const auto& r : records) {
    Key k{r.run, r.image_index, r.trial, r.stage};
    if (index_.contains(k) || !seen.emplace(k, true).second)
      throw DuplicateRecord("record for image " + r.image_id() + " stage " + std::string(to_string(r.stage)) +
                            " trial " + std::to_string(r.trial) + " already exists");
  }

  const auto tx = next_tx_++;
  std::vector<std::int64_t> ids;
  ids.reserve(records.size());
  auto next_id = static_cast<std::int64_t>(records_.size());
  std::string text = "B\t" + std::to_string(tx) + "\t" + std::to_string(records.size()) + "\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& r = records[i];
    r.id = next_id++;
    r.committed_at = at;
    ids.push_back(r.id);
    if (crash_after_ && i == *crash_after_) {
      crash_after_.reset();
      append_wal(text);
      throw StoreUnavailable("store crashed during transaction " + std::to_string(tx));
    }
    text += "R\t" + to_json(r).dump() + "\n";
  }
  if (crash_after_) {
    crash_after_.reset();
    append_wal(text);
    throw StoreUnavailable("store crashed before committing transaction " + std::to_string(tx));
  }
  text += "C\t" + std::to_string(tx) + "\n";
  append_wal(text);
  apply(std::move(records), at);
  return ids;
}

void Store::inject_crash(std::size_t after_records) {
  std::unique_lock lock(mutex_);
  crash_after_ = after_records;
}

void Store::set_available(bool up) {
  std::unique_lock lock(mutex_);
  up_ = up;
}

bool Store::available() const {
  std::shared_lock lock(mutex_);
  return up_;
}

void Store::load_wal(const std::string& text) {
  records_.clear();
  index_.clear();
  aggregates_.clear();
  txs_.clear();
  next_tx_ = 0;

  std::istringstream in(text);
  std::string line;
  std::int64_t open_tx = -1;  // -1: outside a transaction
  std::vector<ProgressRecord> pending;
  while (std::getline(in, line)) {
    if (line.size() < 2 || line[1] != '\t') continue;
    const char tag = line[0];
    const std::string body = line.substr(2);
    if (tag == 'B') {
      open_tx = std::stoll(body.substr(0, body.find('\t')));
      pending.clear();
      next_tx_ = std::max(next_tx_, open_tx + 1);
    } else if (tag == 'R' && open_tx >= 0) {
      try {
        pending.push_back(record_from_json(nlohmann::json::parse(body)));
      } catch (const std::exception&) {
        open_tx = -1;  // torn line: the transaction never committed
        pending.clear();
      }
    } else if (tag == 'C' && open_tx >= 0 && std::stoll(body) == open_tx) {
      const SimTime at = pending.empty() ? SimTime{} : pending.front().committed_at;
      apply(std::move(pending), at);
      pending.clear();
      open_tx = -1;
    }
  }
}

void Store::recover() {
  std::unique_lock lock(mutex_);
  if (options_.dir) {
    std::ifstream in(wal_path(options_), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    load_wal(ss.str());
  } else {
    load_wal(wal_);
  }
}

std::string Store::wal_text() const {
  std::shared_lock lock(mutex_);
  if (!options_.dir) return wal_;
  std::ifstream in(wal_path(options_), std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ProgressCounts Store::query_progress(const ProgressFilter& filter) const {
  std::shared_lock lock(mutex_);
  ProgressCounts out;
  for (const auto& [key, agg] : aggregates_) {
    if (filter.run && key.first != *filter.run) continue;
    if (filter.trial && key.second != *filter.trial) continue;
    for (auto s : kStages) {
      if (filter.stage && *filter.stage != s) continue;
      auto& dst = out.stages[stage_index(s)];
      const auto& src = agg[stage_index(s)];
      dst.processed += src.processed;
      dst.succeeded += src.succeeded;
      dst.rejected += src.rejected;
      dst.spots += src.spots;
      out.records += src.processed;
    }
  }
  return out;
}

CommitSeries Store::commit_rate_series(double bin_s) const {
  if (!(bin_s > 0.0)) throw ValidationError("bin must be positive");
  std::shared_lock lock(mutex_);
  CommitSeries s{bin_s, {}, {}};
  for (const auto& tx : txs_) {
    const auto b = static_cast<std::size_t>(std::floor(to_seconds(tx.at) / bin_s));
    if (b >= s.records.size()) {
      s.records.resize(b + 1, 0);
      s.transactions.resize(b + 1, 0);
    }
    s.transactions[b] += 1;
    s.records[b] += tx.records;
  }
  return s;
}

std::vector<ProgressRecord> Store::records() const {
  std::shared_lock lock(mutex_);
  return records_;
}

std::size_t Store::size() const {
  std::shared_lock lock(mutex_);
  return records_.size();
}

bool Store::contains(RunId run, std::int64_t image_index, TrialId trial, Stage stage) const {
  std::shared_lock lock(mutex_);
  return index_.contains(Key{run, image_index, trial, stage});
}

std::int64_t Store::transactions() const {
  std::shared_lock lock(mutex_);
  return static_cast<std::int64_t>(txs_.size());
}

int Store::open_connections() const {
  std::shared_lock lock(mutex_);
  return open_;
}

int Store::connection_high_water() const {
  std::shared_lock lock(mutex_);
  return high_water_;
}

void Store::reset_high_water() {
  std::unique_lock lock(mutex_);
  high_water_ = open_;
}

Batcher::Batcher(Store& store, int group_size, int group_index, FlushPolicy policy)
    : store_(store), group_size_(group_size), group_index_(group_index), policy_(policy) {
  if (group_size < 1) throw ValidationError("rank group size must be >= 1");
  if (group_index < 0) throw ValidationError("group index must be >= 0");
}

void Batcher::add(ProgressRecord record, int rank, SimTime at) {
  if (!owns_rank(rank))
    throw ValidationError("rank " + std::to_string(rank) + " is not in group " + std::to_string(group_index_));
  if (buffer_.empty()) oldest_ = at;
  buffer_.push_back(std::move(record));
}

bool Batcher::should_flush(SimTime now) const {
  if (buffer_.empty()) return false;
  return buffer_.size() >= policy_.max_records || to_seconds(now - *oldest_) >= policy_.max_age_s;
}

std::vector<std::int64_t> Batcher::flush(SimTime at) {
  if (buffer_.empty()) return {};
  const auto conn = store_.connect(at);
  std::vector<std::int64_t> ids;
  try {
    ids = store_.commit(conn, buffer_, at);
  } catch (const StoreUnavailable&) {
    store_.close(conn);
    store_.recover();
    throw;
  } catch (...) {
    store_.close(conn);
    throw;
  }
  store_.close(conn);
  buffer_.clear();
  oldest_.reset();
  return ids;
}

std::vector<Batcher> open_batches(Store& store, int ranks, int group_size, FlushPolicy policy) {
  if (group_size < 1) throw ValidationError("rank group size must be >= 1");
  if (ranks < 0) throw ValidationError("ranks must be >= 0");
  std::vector<Batcher> out;
  const int groups = (ranks + group_size - 1) / group_size;
  out.reserve(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) out.emplace_back(store, group_size, g, policy);
  return out;
}

Batcher open_batch(Store& store, int group_size) { return Batcher(store, group_size, 0); }

}  // namespace beamtime
