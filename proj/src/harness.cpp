#include "radvit/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include <torch/torch.h>

#include "radvit/error.hpp"
#include "radvit/log.hpp"

namespace radvit {
namespace {

using nlohmann::json;

uint64_t splitmix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t cell_seed(uint64_t split_seed, int k, int64_t resample) {
  return splitmix(splitmix(split_seed ^ 0x5eedULL) + static_cast<uint64_t>(k) * 1000003ULL +
                  static_cast<uint64_t>(resample));
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

using RowKey = std::tuple<std::string, int64_t, int, int64_t>;
RowKey key_of(const ReportRow& r) { return {r.task, r.split, r.k, r.resample}; }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw UsageError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; }) == allowed.end()) {
      throw UsageError(where + ": unknown key '" + k + "'");
    }
  }
}

// Minimal SVG charts: bars with error whiskers and lines with a +-std band.
struct Series {
  std::string label;
  std::vector<double> mean, std;
};

std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& labels, const std::vector<double>& mean,
                     const std::vector<double>& std) {
  const double w = 120.0 + 80.0 * static_cast<double>(labels.size()), h = 300.0, top = 40.0, bottom = 250.0;
  double ymax = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) ymax = std::max(ymax, mean[i] + std[i]);
  ymax = ymax > 0.0 ? ymax * 1.1 : 1.0;
  auto y = [&](double v) { return bottom - (bottom - top) * v / ymax; };
  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<text x=\"10\" y=\"20\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  out << "<line x1=\"60\" y1=\"" << bottom << "\" x2=\"" << w - 20 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  out << "<text x=\"5\" y=\"" << top + 4 << "\" font-size=\"10\">" << fmt("%.3g", ymax) << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double x = 70.0 + 80.0 * static_cast<double>(i);
    out << "<rect x=\"" << x << "\" y=\"" << y(mean[i]) << "\" width=\"50\" height=\"" << bottom - y(mean[i])
        << "\" fill=\"" << palette(i) << "\"/>\n";
    out << "<line x1=\"" << x + 25 << "\" y1=\"" << y(mean[i] - std[i]) << "\" x2=\"" << x + 25 << "\" y2=\""
        << y(mean[i] + std[i]) << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << x << "\" y=\"" << bottom + 15 << "\" font-size=\"10\">" << svg_escape(labels[i])
        << "</text>\n";
  }
  out << "</svg>\n";
}

void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::vector<int>& ks,
                      const std::vector<Series>& series) {
  const double w = 420.0, h = 300.0, left = 60.0, right = 380.0, top = 40.0, bottom = 250.0;
  double ymax = 0.0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.mean.size(); ++i) ymax = std::max(ymax, s.mean[i] + s.std[i]);
  }
  ymax = ymax > 0.0 ? ymax * 1.1 : 1.0;
  auto x = [&](int k) { return left + (right - left) * k / 100.0; };
  auto y = [&](double v) { return bottom - (bottom - top) * v / ymax; };
  std::ofstream out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<text x=\"10\" y=\"20\" font-size=\"14\">" << svg_escape(title) << "</text>\n";
  out << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom
      << "\" stroke=\"black\"/>\n";
  for (int k : ks) {
    out << "<text x=\"" << x(k) - 8 << "\" y=\"" << bottom + 15 << "\" font-size=\"10\">" << k << "%</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    std::ostringstream band, line;
    for (std::size_t i = 0; i < ks.size(); ++i) band << x(ks[i]) << ',' << y(s.mean[i] + s.std[i]) << ' ';
    for (std::size_t i = ks.size(); i-- > 0;) band << x(ks[i]) << ',' << y(s.mean[i] - s.std[i]) << ' ';
    for (std::size_t i = 0; i < ks.size(); ++i) line << x(ks[i]) << ',' << y(s.mean[i]) << ' ';
    out << "<polygon points=\"" << band.str() << "\" fill=\"" << palette(si) << "\" fill-opacity=\"0.2\"/>\n";
    out << "<polyline points=\"" << line.str() << "\" fill=\"none\" stroke=\"" << palette(si) << "\"/>\n";
    out << "<text x=\"" << right - 60 << "\" y=\"" << top + 12.0 * static_cast<double>(si) << "\" font-size=\"10\" fill=\""
        << palette(si) << "\">" << svg_escape(s.label) << "</text>\n";
  }
  out << "</svg>\n";
}

std::string file_safe(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
  }
  return s;
}

}  // namespace

SplitPlan make_split(int64_t n, uint64_t seed, double ratio) {
  if (n < 2) throw DataError("make_split: need at least 2 items, got " + std::to_string(n));
  if (!(ratio > 0.0 && ratio < 1.0)) throw UsageError("make_split: ratio must be in (0, 1)");
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_train = std::clamp<int64_t>(std::llround(ratio * static_cast<double>(n)), 1, n - 1);
  SplitPlan plan;
  plan.seed = seed;
  plan.ratio = ratio;
  plan.train.assign(perm.begin(), perm.begin() + n_train);
  plan.test.assign(perm.begin() + n_train, perm.end());
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

std::vector<SplitPlan> make_splits(int64_t n, std::span<const uint64_t> seeds, double ratio) {
  std::vector<SplitPlan> out;
  for (auto s : seeds) out.push_back(make_split(n, s, ratio));
  return out;
}

std::vector<int64_t> sample_fewshot(std::span<const int64_t> train, int k_percent, uint64_t seed) {
  if (k_percent != 25 && k_percent != 50 && k_percent != 75 && k_percent != 100) {
    throw UsageError("few-shot k must be one of 25, 50, 75, 100; got " + std::to_string(k_percent));
  }
  std::vector<int64_t> items(train.begin(), train.end());
  if (k_percent == 100) return items;
  const auto size = static_cast<int64_t>(items.size());
  const int64_t m = (k_percent * size + 50) / 100;
  std::mt19937_64 rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
  items.resize(static_cast<std::size_t>(m));
  std::sort(items.begin(), items.end());
  return items;
}

double accuracy(std::span<const int64_t> pred, std::span<const int64_t> labels) {
  if (pred.size() != labels.size() || pred.empty()) throw DataError("accuracy: prediction/label size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

SegMetrics dice_iou(const torch::Tensor& pred, const torch::Tensor& truth, int64_t classes) {
  if (!pred.sizes().equals(truth.sizes())) throw DataError("dice_iou: mask shapes differ");
  if (classes < 1) throw UsageError("dice_iou: classes must be >= 1");
  const auto p = pred.to(torch::kInt64);
  const auto t = truth.to(torch::kInt64);
  SegMetrics m;
  for (int64_t c = 1; c <= classes; ++c) {
    const auto a = p == c;
    const auto b = t == c;
    const auto inter = (a & b).sum().item<int64_t>();
    const auto sa = a.sum().item<int64_t>();
    const auto sb = b.sum().item<int64_t>();
    const auto uni = sa + sb - inter;
    m.dice.push_back(sa + sb == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb));
    m.iou.push_back(uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni));
  }
  m.mdice = std::accumulate(m.dice.begin(), m.dice.end(), 0.0) / static_cast<double>(classes);
  m.miou = std::accumulate(m.iou.begin(), m.iou.end(), 0.0) / static_cast<double>(classes);
  return m;
}

std::vector<double> default_sdr_radii() { return {2.0, 2.5, 3.0, 4.0}; }

LandmarkMetrics mre_sdr(const torch::Tensor& pred, const torch::Tensor& truth, std::span<const double> radii) {
  if (!pred.sizes().equals(truth.sizes()) || pred.dim() != 2 || pred.size(0) == 0) {
    throw DataError("mre_sdr: expected matching non-empty (N, D) point sets");
  }
  const auto p = pred.to(torch::kFloat64).contiguous();
  const auto t = truth.to(torch::kFloat64).contiguous();
  const auto n = p.size(0), d = p.size(1);
  const double* pp = p.data_ptr<double>();
  const double* tp = t.data_ptr<double>();
  std::vector<double> dist(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double e = pp[i * d + j] - tp[i * d + j];
      s += e * e;
    }
    dist[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  LandmarkMetrics m;
  m.mre = std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(n);
  for (double r : radii) {
    const auto hit = std::count_if(dist.begin(), dist.end(), [r](double v) { return v <= r; });
    m.sdr.push_back(static_cast<double>(hit) / static_cast<double>(n));
  }
  return m;
}

Aggregate aggregate(std::span<const double> values) {
  if (values.empty()) throw DataError("aggregate: no values");
  Aggregate a;
  a.n = values.size();
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.n);
  if (a.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0 && b > 0.0)) throw UsageError("incomplete_beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  // Modified Lentz evaluation of the continued fraction.
  constexpr double tiny = 1e-300;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(log_front) * h / a;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw UsageError("student_t_cdf: df must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t >= 0.0 ? 1.0 - tail : tail;
}

TTest welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("t-test: each sample needs at least 2 values");
  const auto sa = aggregate(a);
  const auto sb = aggregate(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = sa.std * sa.std / na, qb = sb.std * sb.std / nb;
  const double se2 = qa + qb;
  TTest r;
  if (se2 == 0.0) {
    r.df = na + nb - 2.0;
    if (sa.mean == sb.mean) return r;
    r.t = sa.mean > sb.mean ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  r.t = (sa.mean - sb.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  r.p = incomplete_beta(0.5 * r.df, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

TaskSpec TaskSpec::from_json(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, {"name", "type", "manifest", "mask_dir", "classes", "metrics", "options"}, "task");
  TaskSpec t;
  if (!j.contains("name") || !j["name"].is_string()) throw UsageError("task: 'name' is required");
  t.name = j["name"].get<std::string>();
  t.type = j.value("type", t.type);
  if (t.type != "classification" && t.type != "segmentation") {
    throw UsageError("task '" + t.name + "': unknown type '" + t.type + "'");
  }
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() ? base_dir / path : path;
  };
  if (j.contains("manifest")) t.manifest = resolve(j["manifest"].get<std::string>());
  if (j.contains("mask_dir")) t.mask_dir = resolve(j["mask_dir"].get<std::string>());
  t.classes = j.value("classes", t.classes);
  if (j.contains("metrics")) {
    t.metrics = j["metrics"].get<std::vector<std::string>>();
  } else if (t.type == "classification") {
    t.metrics = {"ACC"};
  } else {
    t.metrics = {"Dice", "IoU", "mDice", "mIoU"};
  }
  if (j.contains("options")) t.options = j["options"];
  return t;
}

BenchmarkConfig BenchmarkConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  check_keys(j, {"tasks", "split_seeds", "ratio", "k_percents", "resamples", "sdr_radii", "evaluator"}, "benchmark");
  BenchmarkConfig c;
  try {
    if (j.contains("tasks")) {
      for (const auto& t : j["tasks"]) c.tasks.push_back(TaskSpec::from_json(t, base_dir));
    }
    if (j.contains("split_seeds")) c.split_seeds = j["split_seeds"].get<std::vector<uint64_t>>();
    c.ratio = j.value("ratio", c.ratio);
    if (j.contains("k_percents")) c.k_percents = j["k_percents"].get<std::vector<int>>();
    c.resamples = j.value("resamples", c.resamples);
    if (j.contains("sdr_radii")) c.sdr_radii = j["sdr_radii"].get<std::vector<double>>();
    if (j.contains("evaluator")) c.evaluator = j["evaluator"];
  } catch (const json::exception& e) {
    throw UsageError(std::string("benchmark config: ") + e.what());
  }
  if (c.split_seeds.empty()) throw UsageError("benchmark: split_seeds must not be empty");
  if (c.resamples < 1) throw UsageError("benchmark: resamples must be >= 1");
  std::set<std::string> names;
  for (const auto& t : c.tasks) {
    if (!names.insert(t.name).second) throw UsageError("benchmark: duplicate task name '" + t.name + "'");
  }
  return c;
}

json BenchmarkConfig::to_json() const {
  json tasks_j = json::array();
  for (const auto& t : tasks) {
    tasks_j.push_back({{"name", t.name},
                       {"type", t.type},
                       {"manifest", t.manifest.string()},
                       {"mask_dir", t.mask_dir.string()},
                       {"classes", t.classes},
                       {"metrics", t.metrics},
                       {"options", t.options}});
  }
  return {{"tasks", tasks_j},   {"split_seeds", split_seeds}, {"ratio", ratio},         {"k_percents", k_percents},
          {"resamples", resamples}, {"sdr_radii", sdr_radii},   {"evaluator", evaluator}};
}

json ReportRow::to_json() const {
  return {{"task", task},       {"split", split},       {"k", k},          {"resample", resample},
          {"n_train", n_train}, {"n_test", n_test}, {"metrics", metrics}};
}

ReportRow ReportRow::from_json(const json& j) {
  ReportRow r;
  r.task = j.at("task").get<std::string>();
  r.split = j.at("split").get<int64_t>();
  r.k = j.at("k").get<int>();
  r.resample = j.at("resample").get<int64_t>();
  r.n_train = j.at("n_train").get<int64_t>();
  r.n_test = j.at("n_test").get<int64_t>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  return r;
}

std::vector<ReportRow> run_benchmark(const BenchmarkConfig& cfg, TaskEvaluator& evaluator,
                                     const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto report_path = out_dir / "report.jsonl";

  std::map<RowKey, ReportRow> done;
  if (std::filesystem::exists(report_path)) {
    std::ifstream in(report_path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto row = ReportRow::from_json(json::parse(line));
        done.emplace(key_of(row), std::move(row));
      } catch (const json::exception&) {
        throw DataError(report_path.string() + " line " + std::to_string(lineno) + ": malformed record");
      }
    }
    if (!done.empty()) log::info("resuming benchmark with " + std::to_string(done.size()) + " finished cells");
  }

  std::vector<int> ks = cfg.k_percents;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());

  std::vector<ReportRow> rows;
  std::ofstream append(report_path, std::ios::app);
  for (const auto& task : cfg.tasks) {
    const auto n = evaluator.size(task);
    const auto splits = make_splits(n, cfg.split_seeds, cfg.ratio);
    for (std::size_t s = 0; s < splits.size(); ++s) {
      for (int k : ks) {
        const int64_t reps = k == 100 ? 1 : cfg.resamples;
        for (int64_t r = 0; r < reps; ++r) {
          const RowKey key{task.name, static_cast<int64_t>(s), k, r};
          if (auto it = done.find(key); it != done.end()) {
            rows.push_back(it->second);
            continue;
          }
          const auto seed = cell_seed(splits[s].seed, k, r);
          const auto train = sample_fewshot(splits[s].train, k, seed);
          ReportRow row{task.name, static_cast<int64_t>(s), k, r,
                        static_cast<int64_t>(train.size()), static_cast<int64_t>(splits[s].test.size()), {}};
          row.metrics = evaluator.evaluate(task, train, splits[s].test, splitmix(seed));
          append << row.to_json().dump() << '\n' << std::flush;
          log::info("benchmark " + task.name + " split " + std::to_string(s) + " k " + std::to_string(k) +
                    " resample " + std::to_string(r) + " done");
          rows.push_back(std::move(row));
        }
      }
    }
  }
  append.close();

  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return key_of(a) < key_of(b); });
  {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + report_path.string());
    for (const auto& r : rows) out << r.to_json().dump() << '\n';
  }

  // (task, metric) -> k -> values
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<double>>> groups;
  for (const auto& r : rows) {
    for (const auto& [metric, v] : r.metrics) groups[{r.task, metric}][r.k].push_back(v);
  }

  std::ofstream csv(out_dir / "summary.csv");
  std::ofstream txt(out_dir / "summary.txt");
  csv << "task,k,metric,runs,mean,std,p_vs_full\n";
  char header[160];
  std::snprintf(header, sizeof(header), "%-24s %5s %-8s %5s %12s %12s %10s\n", "task", "k", "metric", "runs", "mean",
                "std", "p_vs_full");
  txt << header;
  for (const auto& [tm, by_k] : groups) {
    const auto full = by_k.find(100);
    for (const auto& [k, values] : by_k) {
      const auto agg = aggregate(values);
      std::string p;
      if (k != 100 && full != by_k.end() && values.size() >= 2 && full->second.size() >= 2) {
        p = fmt("%.6g", welch_t_test(values, full->second).p);
      }
      csv << tm.first << ',' << k << ',' << tm.second << ',' << agg.n << ',' << fmt("%.9g", agg.mean) << ','
          << fmt("%.9g", agg.std) << ',' << p << '\n';
      char line[200];
      std::snprintf(line, sizeof(line), "%-24s %5d %-8s %5zu %12.6f %12.6f %10s\n", tm.first.c_str(), k,
                    tm.second.c_str(), agg.n, agg.mean, agg.std, p.empty() ? "-" : p.c_str());
      txt << line;
    }
  }

  json meta = {{"t_test", "welch, unpaired, two-tailed"},
               {"std", "sample (n - 1); 0 for a single run"},
               {"empty_mask_score", 1.0},
               {"sdr_inclusive", true},
               {"rows", rows.size()},
               {"config", cfg.to_json()}};
  std::ofstream(out_dir / "report_meta.json") << meta.dump(2) << '\n';

  // Bar chart per metric at k = 100, line chart per task over k.
  std::map<std::string, std::vector<std::pair<std::string, Aggregate>>> bars;
  std::map<std::string, std::vector<Series>> lines;
  for (const auto& [tm, by_k] : groups) {
    if (auto it = by_k.find(100); it != by_k.end()) bars[tm.second].push_back({tm.first, aggregate(it->second)});
    if (by_k.size() > 1 && by_k.size() == ks.size()) {
      Series s{tm.second, {}, {}};
      for (int k : ks) {
        const auto agg = aggregate(by_k.at(k));
        s.mean.push_back(agg.mean);
        s.std.push_back(agg.std);
      }
      lines[tm.first].push_back(std::move(s));
    }
  }
  for (const auto& [metric, items] : bars) {
    std::vector<std::string> labels;
    std::vector<double> mean, std;
    for (const auto& [task, agg] : items) {
      labels.push_back(task);
      mean.push_back(agg.mean);
      std.push_back(agg.std);
    }
    write_bar_chart(out_dir / ("bars_" + file_safe(metric) + ".svg"), metric + " (mean +- std)", labels, mean, std);
  }
  for (const auto& [task, series] : lines) {
    write_line_chart(out_dir / ("fewshot_" + file_safe(task) + ".svg"), task + " few-shot", ks, series);
  }
  return rows;
}

}  // namespace radvit
