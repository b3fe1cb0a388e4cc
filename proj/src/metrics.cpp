#include "beamtime/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "beamtime/errors.hpp"

namespace beamtime {

std::string fmt_num(double v) {
  if (v == 0.0) return "0";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string_view stage_color(Stage s) {
  switch (s) {
    case Stage::spotfinding: return colors::spotfinding;
    case Stage::indexing: return colors::indexing;
    case Stage::refinement: return colors::refinement;
    case Stage::integration: return colors::integration;
  }
  return colors::io;
}

namespace {

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr double kWidth = 800.0;
constexpr double kHeight = 400.0;
constexpr double kLeft = 60.0;
constexpr double kBottom = 40.0;
constexpr double kTop = 30.0;

std::string svg_open(std::string_view title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
    << "<title>" << xml_escape(title) << "</title>\n"
    << "<rect class=\"bg\" x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"#ffffff\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  return o.str();
}

std::string axes(std::string_view x_label, std::string_view y_label, double x_max, double y_max) {
  std::ostringstream o;
  const double x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - 10, y1 = kTop;
  o << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"#000\"/>\n"
    << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"#000\"/>\n"
    << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 8 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << xml_escape(x_label) << "</text>\n"
    << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << (y0 + y1) / 2
    << ")\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n"
    << "<text x=\"" << x1 << "\" y=\"" << y0 + 14 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_num(x_max)
    << "</text>\n"
    << "<text x=\"" << x0 - 4 << "\" y=\"" << y1 + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_num(y_max)
    << "</text>\n";
  return o.str();
}

}  // namespace

TimelineDoc weather_plot(const JobResult& job) {
  TimelineDoc doc;
  doc.job_id = job.job_id;
  doc.ranks = static_cast<int>(job.rank_timelines.size());
  if (job.rank_timelines.empty()) throw EmptyResult("job " + std::to_string(job.job_id) + " has no rank timelines");
  for (const auto& tl : job.rank_timelines)
    for (const auto& s : tl.segments) {
      TimelineSegment seg;
      seg.rank = tl.rank;
      seg.start_s = to_seconds(s.start - job.start);
      seg.end_s = to_seconds(s.end - job.start);
      if (s.kind == SegmentKind::compute) {
        seg.label = std::string(to_string(s.stage));
        seg.color = std::string(stage_color(s.stage));
      } else {
        seg.label = s.kind == SegmentKind::init_io ? "init_io" : "write";
        seg.color = std::string(colors::io);
      }
      doc.t_max_s = std::max(doc.t_max_s, seg.end_s);
      doc.legend[seg.label] = seg.color;
      doc.segments.push_back(std::move(seg));
    }
  if (doc.segments.empty()) throw EmptyResult("job " + std::to_string(job.job_id) + " recorded no segments");
  return doc;
}

std::string timeline_csv(const TimelineDoc& doc) {
  std::ostringstream o;
  o << "rank,start_s,end_s,label,color\n";
  for (const auto& s : doc.segments)
    o << s.rank << ',' << fmt_num(s.start_s) << ',' << fmt_num(s.end_s) << ',' << s.label << ',' << s.color << '\n';
  return o.str();
}

std::string timeline_svg(const TimelineDoc& doc) {
  std::ostringstream o;
  o << svg_open("Job " + std::to_string(doc.job_id) + " rank timeline");
  o << axes("time since job start (s)", "rank", doc.t_max_s, doc.ranks);
  const double plot_w = kWidth - 10 - kLeft;
  const double plot_h = kHeight - kBottom - kTop;
  const double row = doc.ranks > 0 ? plot_h / doc.ranks : plot_h;
  const double sx = doc.t_max_s > 0 ? plot_w / doc.t_max_s : 0.0;
  for (const auto& s : doc.segments) {
    const double y = kHeight - kBottom - (s.rank + 1) * row;
    o << "<rect class=\"seg\" data-rank=\"" << s.rank << "\" data-label=\"" << s.label << "\" x=\""
      << fmt_num(kLeft + s.start_s * sx) << "\" y=\"" << fmt_num(y) << "\" width=\""
      << fmt_num(std::max((s.end_s - s.start_s) * sx, 0.05)) << "\" height=\"" << fmt_num(std::max(row * 0.9, 0.05))
      << "\" fill=\"" << s.color << "\"/>\n";
  }
  double ly = kTop;
  for (const auto& [label, color] : doc.legend) {
    o << "<text class=\"legend\" x=\"" << kWidth - 120 << "\" y=\"" << ly << "\" font-size=\"10\" fill=\"" << color
      << "\">" << label << "</text>\n";
    ly += 12;
  }
  o << "</svg>\n";
  return o.str();
}

Histogram histogram(const std::vector<double>& values, double bin_s) {
  if (!(bin_s > 0.0)) throw ValidationError("bin width must be positive");
  Histogram h;
  h.bin_s = bin_s;
  for (double v : values) {
    const auto b = static_cast<std::size_t>(std::max(0.0, std::floor(v / bin_s)));
    if (b >= h.counts.size()) h.counts.resize(b + 1, 0);
    ++h.counts[b];
    ++h.total;
  }
  h.density.resize(h.counts.size(), 0.0);
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    h.density[i] = static_cast<double>(h.counts[i]) / static_cast<double>(h.total);
  return h;
}

Histogram duration_pdf(const std::vector<ImageTrace>& traces, Stage stage, double bin_s) {
  std::vector<double> d;
  for (const auto& t : traces)
    for (const auto& e : t.entries)
      if (e.stage == stage) d.push_back(to_seconds(e.end - e.start));
  return histogram(d, bin_s);
}

std::string histogram_csv(const Histogram& h, std::string_view value_label) {
  std::ostringstream o;
  o << "bin_start,bin_end," << value_label << "_count,density\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i)
    o << fmt_num(h.origin + static_cast<double>(i) * h.bin_s) << ',' << fmt_num(h.origin + static_cast<double>(i + 1) * h.bin_s)
      << ',' << h.counts[i] << ',' << fmt_num(h.density[i]) << '\n';
  return o.str();
}

std::string histogram_svg(const Histogram& h, std::string_view title, std::string_view x_label, std::string_view color) {
  std::ostringstream o;
  o << svg_open(title);
  const double dmax = h.density.empty() ? 0.0 : *std::max_element(h.density.begin(), h.density.end());
  const double x_max = static_cast<double>(h.counts.size()) * h.bin_s;
  o << axes(x_label, "probability", x_max, dmax);
  const double plot_w = kWidth - 10 - kLeft;
  const double plot_h = kHeight - kBottom - kTop;
  const double bw = h.counts.empty() ? 0.0 : plot_w / static_cast<double>(h.counts.size());
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    if (h.counts[i] == 0) continue;
    const double bh = dmax > 0 ? h.density[i] / dmax * plot_h : 0.0;
    o << "<rect class=\"bar\" x=\"" << fmt_num(kLeft + static_cast<double>(i) * bw) << "\" y=\""
      << fmt_num(kHeight - kBottom - bh) << "\" width=\"" << fmt_num(bw) << "\" height=\"" << fmt_num(bh)
      << "\" fill=\"" << color << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::vector<ScalingRow> scaling_summary(const std::vector<JobResult>& jobs) {
  std::set<int> distinct;
  for (const auto& j : jobs) distinct.insert(j.ranks);
  if (distinct.size() < 2) throw ValidationError("scaling summary needs at least two distinct rank counts");

  std::map<std::pair<int, Stage>, std::vector<double>> samples;
  std::map<std::pair<int, Stage>, double> makespans;
  for (const auto& j : jobs) {
    auto& v = samples[{j.ranks, j.stage}];
    for (const auto& t : j.traces)
      for (const auto& e : t.entries) v.push_back(to_seconds(e.done - e.start));
    makespans[{j.ranks, j.stage}] = std::max(makespans[{j.ranks, j.stage}], j.makespan_s);
  }
  std::vector<ScalingRow> rows;
  for (const auto& [key, v] : samples) {
    ScalingRow row{key.first, key.second, v.size(), 0.0, 0.0, makespans[key]};
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      row.mean_s = sum / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - row.mean_s) * (x - row.mean_s);
      row.stddev_s = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    }
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const ScalingRow& a, const ScalingRow& b) {
    return a.stage != b.stage ? a.stage < b.stage : a.ranks < b.ranks;
  });
  return rows;
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
  std::ostringstream o;
  o << "stage,ranks,images,mean_s,stddev_s,makespan_s\n";
  for (const auto& r : rows)
    o << to_string(r.stage) << ',' << r.ranks << ',' << r.images << ',' << fmt_num(r.mean_s) << ','
      << fmt_num(r.stddev_s) << ',' << fmt_num(r.makespan_s) << '\n';
  return o.str();
}

std::string scaling_svg(const std::vector<ScalingRow>& rows) {
  std::ostringstream o;
  o << svg_open("Per-image time against MPI ranks");
  double y_max = 0.0;
  int r_max = 1;
  for (const auto& r : rows) {
    y_max = std::max(y_max, r.mean_s + r.stddev_s);
    r_max = std::max(r_max, r.ranks);
  }
  o << axes("log2(ranks)", "seconds per image", std::log2(r_max), y_max);
  const double plot_w = kWidth - 10 - kLeft;
  const double plot_h = kHeight - kBottom - kTop;
  const double lx = std::log2(std::max(r_max, 2));
  for (const auto& r : rows) {
    const double x = kLeft + std::log2(std::max(r.ranks, 1)) / lx * plot_w;
    const double y = kHeight - kBottom - (y_max > 0 ? r.mean_s / y_max * plot_h : 0.0);
    const double e = y_max > 0 ? r.stddev_s / y_max * plot_h : 0.0;
    o << "<line class=\"err\" x1=\"" << fmt_num(x) << "\" y1=\"" << fmt_num(y - e) << "\" x2=\"" << fmt_num(x)
      << "\" y2=\"" << fmt_num(y + e) << "\" stroke=\"" << stage_color(r.stage) << "\"/>\n"
      << "<circle class=\"pt\" cx=\"" << fmt_num(x) << "\" cy=\"" << fmt_num(y) << "\" r=\"3\" fill=\""
      << stage_color(r.stage) << "\"/>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string series_csv(const std::vector<double>& values, double bin_s, std::string_view value_label) {
  std::ostringstream o;
  o << "t_s," << value_label << '\n';
  for (std::size_t i = 0; i < values.size(); ++i)
    o << fmt_num(static_cast<double>(i) * bin_s) << ',' << fmt_num(values[i]) << '\n';
  return o.str();
}

std::string series_svg(const std::vector<double>& values, double bin_s, std::string_view title, std::string_view y_label) {
  std::ostringstream o;
  o << svg_open(title);
  const double y_max = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
  const double x_max = static_cast<double>(values.size()) * bin_s;
  o << axes("time (s)", y_label, x_max, y_max);
  const double plot_w = kWidth - 10 - kLeft;
  const double plot_h = kHeight - kBottom - kTop;
  o << "<polyline class=\"series\" fill=\"none\" stroke=\"" << colors::indexing << "\" points=\"";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x0 = kLeft + (x_max > 0 ? static_cast<double>(i) * bin_s / x_max * plot_w : 0.0);
    const double x1 = kLeft + (x_max > 0 ? static_cast<double>(i + 1) * bin_s / x_max * plot_w : 0.0);
    const double y = kHeight - kBottom - (y_max > 0 ? values[i] / y_max * plot_h : 0.0);
    o << fmt_num(x0) << ',' << fmt_num(y) << ' ' << fmt_num(x1) << ',' << fmt_num(y) << ' ';
  }
  o << "\"/>\n</svg>\n";
  return o.str();
}

std::string utilization_csv(const UtilizationSeries& u) {
  std::ostringstream o;
  o << "t_s,reservation,preemptible,batch\n";
  for (std::size_t i = 0; i < u.reservation.size(); ++i)
    o << fmt_num(static_cast<double>(i) * u.bin_s) << ',' << fmt_num(u.reservation[i]) << ','
      << fmt_num(u.preemptible[i]) << ',' << fmt_num(u.batch[i]) << '\n';
  return o.str();
}

std::string utilization_svg(const UtilizationSeries& u, int total_nodes) {
  std::ostringstream o;
  o << svg_open("Node utilization");
  const double x_max = static_cast<double>(u.reservation.size()) * u.bin_s;
  o << axes("time (s)", "nodes", x_max, total_nodes);
  const double plot_w = kWidth - 10 - kLeft;
  const double plot_h = kHeight - kBottom - kTop;
  const double bw = u.reservation.empty() ? 0.0 : plot_w / static_cast<double>(u.reservation.size());
  const std::string_view fills[3] = {colors::io, colors::indexing, "#7f7f7f"};
  for (std::size_t i = 0; i < u.reservation.size(); ++i) {
    double base = 0.0;
    const double parts[3] = {u.reservation[i], u.preemptible[i], u.batch[i]};
    for (int k = 0; k < 3; ++k) {
      if (parts[k] <= 0.0) continue;
      const double h = parts[k] / std::max(total_nodes, 1) * plot_h;
      o << "<rect class=\"util\" x=\"" << fmt_num(kLeft + static_cast<double>(i) * bw) << "\" y=\""
        << fmt_num(kHeight - kBottom - base - h) << "\" width=\"" << fmt_num(bw) << "\" height=\"" << fmt_num(h)
        << "\" fill=\"" << fills[k] << "\"/>\n";
      base += h;
    }
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace beamtime
