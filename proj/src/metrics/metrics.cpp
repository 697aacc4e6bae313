#include "cfnet/metrics/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace cfnet::metrics {

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (auto v : m_) t += v;
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t actual) const {
  std::size_t t = 0;
  for (std::size_t j = 0; j < c_; ++j) t += at(actual, j);
  return t;
}

std::size_t ConfusionMatrix::col_sum(std::size_t pred) const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < c_; ++i) t += at(i, pred);
  return t;
}

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t classes) {
  if (preds.size() != labels.size()) {
    throw ShapeError("confusion: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= classes || labels[i] >= classes) {
      throw ValueError("confusion: class index out of range at sample " + std::to_string(i));
    }
    ++m.at(labels[i], preds[i]);
  }
  return m;
}

namespace {
double ratio(double num, double den) { return den == 0 ? 0.0 : num / den; }
}  // namespace

MetricReport report(const ConfusionMatrix& m) {
  const std::size_t c = m.classes();
  MetricReport r;
  r.total = m.total();
  if (c == 0 || r.total == 0) throw ValueError("report: confusion matrix is empty");
  std::size_t trace = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const double tp = static_cast<double>(m.at(k, k));
    trace += m.at(k, k);
    ClassScores s;
    s.support = m.row_sum(k);
    s.precision = ratio(tp, static_cast<double>(m.col_sum(k)));
    s.recall = ratio(tp, static_cast<double>(s.support));
    s.f1 = ratio(2 * s.precision * s.recall, s.precision + s.recall);
    r.macro_precision += s.precision;
    r.macro_recall += s.recall;
    r.macro_f1 += s.f1;
    r.per_class.push_back(s);
  }
  r.macro_precision /= static_cast<double>(c);
  r.macro_recall /= static_cast<double>(c);
  r.macro_f1 /= static_cast<double>(c);
  r.accuracy = static_cast<double>(trace) / static_cast<double>(r.total);
  return r;
}

double psnr(std::span<const float> a, std::span<const float> b, double peak) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("psnr: image sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

void write_confusion_csv(std::ostream& os, const ConfusionMatrix& m) {
  os << "actual\\pred";
  for (std::size_t j = 0; j < m.classes(); ++j) os << ",c" << j;
  os << '\n';
  for (std::size_t i = 0; i < m.classes(); ++i) {
    os << 'c' << i;
    for (std::size_t j = 0; j < m.classes(); ++j) os << ',' << m.at(i, j);
    os << '\n';
  }
}

namespace {

bool parse_count(const std::string& cell, std::size_t& out) {
  std::size_t b = cell.find_first_not_of(" \t\r");
  std::size_t e = cell.find_last_not_of(" \t\r");
  if (b == std::string::npos) return false;
  std::string s = cell.substr(b, e - b + 1);
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) return false;
  out = std::stoull(s);
  return true;
}

}  // namespace

ConfusionMatrix read_confusion_csv(std::istream& is) {
  std::vector<std::vector<std::size_t>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    std::vector<std::size_t> row;
    bool numeric = true;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      std::size_t v;
      if (parse_count(cells[k], v)) {
        row.push_back(v);
      } else if (k == 0) {
        continue;  // row label
      } else {
        numeric = false;
        break;
      }
    }
    if (!numeric || row.empty()) {
      if (rows.empty()) continue;  // header
      throw FormatError("confusion csv: non-integer cell on line " + std::to_string(lineno));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError("confusion csv: no rows");
  const std::size_t c = rows.size();
  ConfusionMatrix m(c);
  for (std::size_t i = 0; i < c; ++i) {
    if (rows[i].size() != c) {
      throw FormatError("confusion csv: row " + std::to_string(i) + " has " + std::to_string(rows[i].size()) +
                        " counts, expected " + std::to_string(c));
    }
    for (std::size_t j = 0; j < c; ++j) m.at(i, j) = rows[i][j];
  }
  return m;
}

ConfusionMatrix load_confusion_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open confusion matrix file " + path.string());
  return read_confusion_csv(is);
}

std::string format_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

namespace {
std::string class_name(const std::vector<std::string>& names, std::size_t k) {
  return k < names.size() ? names[k] : "c" + std::to_string(k);
}
}  // namespace

void write_report_csv(std::ostream& os, const MetricReport& r, const std::vector<std::string>& names) {
  os << "class,precision,recall,f1,support\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& s = r.per_class[k];
    os << class_name(names, k) << ',' << format_value(s.precision) << ',' << format_value(s.recall) << ','
       << format_value(s.f1) << ',' << s.support << '\n';
  }
  os << "macro," << format_value(r.macro_precision) << ',' << format_value(r.macro_recall) << ','
     << format_value(r.macro_f1) << ',' << r.total << '\n';
  os << "accuracy," << format_value(r.accuracy) << ',' << format_value(r.accuracy) << ','
     << format_value(r.accuracy) << ',' << r.total << '\n';
}

std::string format_report(const MetricReport& r, const std::vector<std::string>& names) {
  std::ostringstream os;
  std::size_t w = 8;
  for (std::size_t k = 0; k < r.per_class.size(); ++k) w = std::max(w, class_name(names, k).size() + 2);
  auto row = [&](const std::string& n, double p, double rc, double f, std::size_t sup) {
    os << std::left << std::setw(static_cast<int>(w)) << n << std::right << std::fixed << std::setprecision(4)
       << std::setw(10) << p << std::setw(10) << rc << std::setw(10) << f << std::setw(9) << sup << '\n';
  };
  os << std::left << std::setw(static_cast<int>(w)) << "class" << std::right << std::setw(10) << "precision"
     << std::setw(10) << "recall" << std::setw(10) << "f1" << std::setw(9) << "support" << '\n';
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    const auto& s = r.per_class[k];
    row(class_name(names, k), s.precision, s.recall, s.f1, s.support);
  }
  row("macro", r.macro_precision, r.macro_recall, r.macro_f1, r.total);
  os << "accuracy " << std::fixed << std::setprecision(4) << r.accuracy << " (" << r.total << " samples)\n";
  return os.str();
}

}  // namespace cfnet::metrics
