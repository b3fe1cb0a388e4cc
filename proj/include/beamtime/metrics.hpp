#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "beamtime/scheduler.hpp"
#include "beamtime/stage.hpp"
#include "beamtime/worker_pool.hpp"

namespace beamtime {

namespace colors {
inline constexpr std::string_view io = "#d62728";
inline constexpr std::string_view spotfinding = "#2ca02c";
inline constexpr std::string_view indexing = "#1f77b4";
inline constexpr std::string_view refinement = "#006400";
inline constexpr std::string_view integration = "#000000";
}  // namespace colors

std::string_view stage_color(Stage s);

struct TimelineSegment {
  int rank = 0;
  double start_s = 0.0;  // relative to job start
  double end_s = 0.0;
  std::string label;  // "init_io", "write" or a stage name
  std::string color;
};

struct TimelineDoc {
  JobId job_id = 0;
  int ranks = 0;
  double t_max_s = 0.0;
  std::vector<TimelineSegment> segments;  // by rank, then time
  std::map<std::string, std::string> legend;
};

/// Throws EmptyResult when the job has no rank timelines or no segments.
TimelineDoc weather_plot(const JobResult& job);
std::string timeline_csv(const TimelineDoc& doc);
std::string timeline_svg(const TimelineDoc& doc);

struct Histogram {
  double bin_s = 1.0;
  double origin = 0.0;
  std::vector<std::int64_t> counts;
  std::vector<double> density;  // counts / total; sums to 1 unless empty
  std::int64_t total = 0;

  double bin_center(std::size_t i) const { return origin + (static_cast<double>(i) + 0.5) * bin_s; }
};

/// Throws ValidationError when bin_s <= 0.
Histogram histogram(const std::vector<double>& values, double bin_s);
/// Compute durations of `stage` entries.
Histogram duration_pdf(const std::vector<ImageTrace>& traces, Stage stage, double bin_s);
std::string histogram_csv(const Histogram& h, std::string_view value_label);
std::string histogram_svg(const Histogram& h, std::string_view title, std::string_view x_label,
                          std::string_view color = colors::indexing);

struct ScalingRow {
  int ranks = 0;
  Stage stage = Stage::spotfinding;
  std::size_t images = 0;
  double mean_s = 0.0;
  double stddev_s = 0.0;
  double makespan_s = 0.0;
};

/// Per-image wall time (compute start to result written) per stage per rank count. Throws
/// ValidationError unless at least two distinct rank counts are present.
std::vector<ScalingRow> scaling_summary(const std::vector<JobResult>& jobs);
std::string scaling_csv(const std::vector<ScalingRow>& rows);
std::string scaling_svg(const std::vector<ScalingRow>& rows);

/// Rate per bin (e.g. GB/s) as a step line.
std::string series_csv(const std::vector<double>& values, double bin_s, std::string_view value_label);
std::string series_svg(const std::vector<double>& values, double bin_s, std::string_view title,
                       std::string_view y_label);

std::string utilization_csv(const UtilizationSeries& u);
std::string utilization_svg(const UtilizationSeries& u, int total_nodes);

/// Fixed-precision number formatting shared by all renderers.
std::string fmt_num(double v);

}  // namespace beamtime
