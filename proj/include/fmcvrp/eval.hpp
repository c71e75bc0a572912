#pragma once

// Gap statistics, percentile ranges, wins, paired one-sided t-test, report
// and geometry export.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "fmcvrp/graph.hpp"

namespace fmcvrp::eval {

inline double gap_percent(double z, double z_baseline) {
  if (!(z_baseline > 0.0)) throw validation_error("gap: baseline must be positive");
  return 100.0 * (z - z_baseline) / z_baseline;
}

/// q-quantile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw validation_error("percentile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

struct Summary {
  double mean = 0.0, p10 = 0.0, p90 = 0.0;
};

inline Summary aggregate(const std::vector<double>& values) {
  if (values.empty()) throw validation_error("aggregate of an empty list");
  Summary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.p10 = percentile(values, 0.1);
  s.p90 = percentile(values, 0.9);
  return s;
}

/// Instances where the method is strictly cheaper than the baseline.
inline int wins(const std::vector<double>& method, const std::vector<double>& baseline) {
  if (method.size() != baseline.size()) throw validation_error("wins: length mismatch");
  int w = 0;
  for (std::size_t i = 0; i < method.size(); ++i) w += method[i] < baseline[i];
  return w;
}

// ---------------------------------------------------------------------------
// Student t distribution

namespace detail {

// Continued fraction for the incomplete beta function, modified Lentz.
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw std::runtime_error("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x < 0.0 || x > 1.0) throw std::invalid_argument("incomplete beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// P(T <= t) for Student's t with `dof` degrees of freedom.
inline double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::invalid_argument("student t: dof must be positive");
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * incomplete_beta(0.5 * dof, 0.5, x);
  return t < 0.0 ? tail : 1.0 - tail;
}

/// Inverse CDF by bisection.
inline double student_t_quantile(double p, double dof) {
  double lo = -1e3, hi = 1e3;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, dof) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

struct TTest {
  double t = 0.0;
  double dof = 0.0;
  double p = 0.0;          // H1: mean(x) < mean(y)
  bool underflow = false;  // p below the double range, reported as the smallest positive value
  double mean_x = 0.0, mean_y = 0.0, sd_x = 0.0, sd_y = 0.0;
  double mean_diff = 0.0, ci95_lo = 0.0, ci95_hi = 0.0;
};

namespace detail {
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mu = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mu) * (x - mu);
  return {mu, std::sqrt(ss / (n - 1.0))};
}
}  // namespace detail

/// One-sided paired t-test of H1: x < y on d = x - y.
inline TTest paired_t_test(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw validation_error("t-test: length mismatch");
  if (x.size() < 2) throw validation_error("t-test: need at least two pairs");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  const auto [md, sd] = detail::mean_sd(d);
  if (!(sd > 0.0)) throw validation_error("t-test: differences have zero variance");
  const double m = static_cast<double>(x.size());
  const double se = sd / std::sqrt(m);
  TTest r;
  r.t = md / se;
  r.dof = m - 1.0;
  r.p = student_t_cdf(r.t, r.dof);
  if (r.p <= 0.0) {
    r.p = std::numeric_limits<double>::denorm_min();
    r.underflow = true;
  }
  std::tie(r.mean_x, r.sd_x) = detail::mean_sd(x);
  std::tie(r.mean_y, r.sd_y) = detail::mean_sd(y);
  r.mean_diff = md;
  const double q = student_t_quantile(0.975, r.dof);
  r.ci95_lo = md - q * se;
  r.ci95_hi = md + q * se;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRow {
  std::string instance_id;
  int n = 0;  // customers
  std::string method;
  std::string decoder;  // "none", "greedy", "nucleus"
  int s = 1;
  double objective = 0.0;
  double wall_time_s = 0.0;
};

struct AggregateRow {
  int n = 0;
  std::string method, decoder;
  int s = 1;
  Summary obj;
  Summary gap;  // zero for the baseline group
  int wins = 0;
  double time_avg_s = 0.0;
  bool is_baseline = false;
};

struct EvalReport {
  std::string baseline_method = "teacher";
  std::vector<EvalRow> rows;

  /// Aggregates per (n, method, decoder, s); gaps and wins pair each row with
  /// the baseline row of the same instance id.
  std::vector<AggregateRow> aggregates() const {
    std::map<std::pair<int, std::string>, double> base;
    for (const auto& r : rows)
      if (r.method == baseline_method) base[{r.n, r.instance_id}] = r.objective;
    std::map<std::tuple<int, bool, std::string, std::string, int>, std::vector<const EvalRow*>> groups;
    for (const auto& r : rows) groups[{r.n, r.method != baseline_method, r.method, r.decoder, r.s}].push_back(&r);
    std::vector<AggregateRow> out;
    for (const auto& [key, grp] : groups) {
      AggregateRow a;
      a.n = std::get<0>(key);
      a.is_baseline = !std::get<1>(key);
      a.method = std::get<2>(key);
      a.decoder = std::get<3>(key);
      a.s = std::get<4>(key);
      std::vector<double> obj, gaps, b, t;
      for (const auto* r : grp) {
        obj.push_back(r->objective);
        t.push_back(r->wall_time_s);
        if (!a.is_baseline) {
          auto it = base.find({r->n, r->instance_id});
          if (it == base.end()) throw validation_error("no baseline row for instance " + r->instance_id);
          gaps.push_back(gap_percent(r->objective, it->second));
          b.push_back(it->second);
        }
      }
      a.obj = aggregate(obj);
      a.time_avg_s = aggregate(t).mean;
      if (!a.is_baseline) {
        a.gap = aggregate(gaps);
        a.wins = wins(obj, b);
      }
      out.push_back(a);
    }
    return out;
  }
};

inline constexpr const char* kReportHeader =
    "N,method,decoder,s,obj_avg,obj_p10,obj_p90,gap_avg,gap_p10,gap_p90,wins,time_avg_s";

inline void export_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write report " + path);
  out << kReportHeader << '\n';
  out.precision(10);
  for (const auto& a : report.aggregates()) {
    out << a.n << ',' << a.method << ',' << a.decoder << ',' << a.s << ',' << a.obj.mean << ',' << a.obj.p10 << ','
        << a.obj.p90 << ',';
    if (a.is_baseline)
      out << ",,,,";
    else
      out << a.gap.mean << ',' << a.gap.p10 << ',' << a.gap.p90 << ',' << a.wins << ',';
    out << a.time_avg_s << '\n';
  }
  if (!out) throw io_error("failed writing report " + path);
}

// ---------------------------------------------------------------------------
// Geometry

struct Viewport {
  double width = 600.0, height = 600.0;
  double sx(double x) const { return x * width; }
  double sy(double y) const { return (1.0 - y) * height; }
};

/// SVG with one polyline per route (depot at both ends) and a depot marker,
/// plus a CSV listing the route polylines point by point.
inline void export_geometry(const ProblemInstance& inst, const Solution& sol, const std::string& svg_path,
                            const std::string& csv_path = {}, Viewport vp = {}) {
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  const auto routes = sol.routes();
  std::ofstream svg(svg_path);
  if (!svg) throw io_error("cannot write " + svg_path);
  svg.precision(10);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << vp.width << "\" height=\"" << vp.height
      << "\" viewBox=\"0 0 " << vp.width << ' ' << vp.height << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << vp.width << "\" height=\"" << vp.height
      << "\" fill=\"white\" stroke=\"black\"/>\n";
  const Point depot = inst.coord(0);
  for (std::size_t r = 0; r < routes.size(); ++r) {
    svg << "<polyline fill=\"none\" stroke=\"" << kColors[r % 10] << "\" stroke-width=\"1.5\" points=\"";
    svg << vp.sx(depot.x) << ',' << vp.sy(depot.y);
    for (int id : routes[r]) {
      const Point p = inst.graph->coord(id);
      svg << ' ' << vp.sx(p.x) << ',' << vp.sy(p.y);
    }
    svg << ' ' << vp.sx(depot.x) << ',' << vp.sy(depot.y) << "\"/>\n";
  }
  for (std::size_t l = 1; l < inst.size(); ++l) {
    const Point p = inst.coord(l);
    svg << "<circle cx=\"" << vp.sx(p.x) << "\" cy=\"" << vp.sy(p.y) << "\" r=\"3\" fill=\"black\"/>\n";
  }
  svg << "<rect class=\"depot\" x=\"" << vp.sx(depot.x) - 5 << "\" y=\"" << vp.sy(depot.y) - 5
      << "\" width=\"10\" height=\"10\" fill=\"red\"/>\n";
  svg << "</svg>\n";
  if (!svg) throw io_error("failed writing " + svg_path);

  if (csv_path.empty()) return;
  std::ofstream csv(csv_path);
  if (!csv) throw io_error("cannot write " + csv_path);
  csv.precision(17);
  csv << "route,order,node_id,x,y\n";
  for (std::size_t r = 0; r < routes.size(); ++r) {
    std::vector<int> pts{kDepotId};
    pts.insert(pts.end(), routes[r].begin(), routes[r].end());
    pts.push_back(kDepotId);
    for (std::size_t k = 0; k < pts.size(); ++k) {
      const Point p = inst.graph->coord(pts[k]);
      csv << r << ',' << k << ',' << pts[k] << ',' << p.x << ',' << p.y << '\n';
    }
  }
  if (!csv) throw io_error("failed writing " + csv_path);
}

}  // namespace fmcvrp::eval
