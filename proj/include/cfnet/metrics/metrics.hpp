#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cfnet/errors.hpp"

namespace cfnet::metrics {

// Rows are actual classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : c_(classes), m_(classes * classes, 0) {}

  std::size_t classes() const { return c_; }
  std::size_t& at(std::size_t actual, std::size_t pred) { return m_[actual * c_ + pred]; }
  std::size_t at(std::size_t actual, std::size_t pred) const { return m_[actual * c_ + pred]; }
  std::size_t total() const;
  std::size_t row_sum(std::size_t actual) const;
  std::size_t col_sum(std::size_t pred) const;

 private:
  std::size_t c_;
  std::vector<std::size_t> m_;
};

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct MetricReport {
  double accuracy = 0;
  std::vector<ClassScores> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  std::size_t total = 0;
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t classes);

// 0/0 ratios count as 0. Throws ValueError on an empty matrix.
MetricReport report(const ConfusionMatrix& m);

// 10 log10(peak^2 / MSE); +infinity when the images are identical.
double psnr(std::span<const float> a, std::span<const float> b, double peak = 1.0);

// CSV: header "actual\pred,c0,...", one row per actual class.
void write_confusion_csv(std::ostream& os, const ConfusionMatrix& m);
// Accepts the format above or a bare integer grid (optional header/row labels).
ConfusionMatrix read_confusion_csv(std::istream& is);
ConfusionMatrix load_confusion_csv(const std::filesystem::path& path);

// CSV: class,precision,recall,f1,support; per-class rows, then "macro" and
// "accuracy" (micro P = R = F1 = accuracy for single-label data).
void write_report_csv(std::ostream& os, const MetricReport& r, const std::vector<std::string>& names = {});
std::string format_report(const MetricReport& r, const std::vector<std::string>& names = {});

// "inf" for infinite values, fixed 6 decimals otherwise.
std::string format_value(double v);

}  // namespace cfnet::metrics
