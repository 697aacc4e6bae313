#include "cfnet/losses/losses.hpp"

#include <limits>
#include <set>
#include <string>

#include "cfnet/ndgrad/ops.hpp"

namespace cfnet::losses {

using nd::Shape;

void LossWeights::validate() const {
  if (rec < 0 || con < 0 || align < 0 || sep < 0) throw ConfigError("loss: weights must be >= 0");
  if (!(margin > 0)) throw ConfigError("loss: margin must be > 0");
}

LossWeights ablation_weights(std::string_view preset, const LossWeights& base) {
  LossWeights w = base;
  if (preset == "rec_only") {
    w.con = w.align = w.sep = 0;
  } else if (preset == "rec_con_align") {
    w.sep = 0;
  } else if (preset != "full") {
    throw ConfigError("loss: unknown ablation preset '" + std::string(preset) +
                      "' (expected rec_only, rec_con_align, full)");
  }
  return w;
}

namespace {

template <typename T>
void same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(who) + ": shapes differ, " + nd::to_string(a.shape()) + " vs " +
                     nd::to_string(b.shape()));
  }
}

template <typename T>
BasicTensor<T> as_rows(const BasicTensor<T>& x, const char* who) {
  if (x.rank() < 1) throw ShapeError(std::string(who) + ": features need a batch axis");
  if (x.rank() == 1) return nd::reshape(x, Shape{x.dim(0), 1});
  return x.rank() == 2 ? x : nd::flatten(x);
}

}  // namespace

template <typename T>
BasicTensor<T> l_rec(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  same_shape(pred, target, "l_rec");
  return nd::mean(nd::square(nd::sub(pred, target)));
}

template <typename T>
BasicTensor<T> l_con(const BasicTensor<T>& teacher_out, const BasicTensor<T>& student_out) {
  same_shape(teacher_out, student_out, "l_con");
  return nd::mean(nd::square(nd::sub(teacher_out, student_out)));
}

template <typename T>
BasicTensor<T> l_align(const BasicTensor<T>& f_teacher, const BasicTensor<T>& f_student, double eps) {
  same_shape(f_teacher, f_student, "l_align");
  auto a = as_rows(f_teacher, "l_align");
  auto b = as_rows(f_student, "l_align");
  auto dot = nd::sum(nd::mul(a, b), {1});
  auto denom = nd::add_scalar(nd::mul(nd::l2_norm(a, 1), nd::l2_norm(b, 1)), static_cast<T>(eps));
  auto cos = nd::div(dot, denom);
  return nd::add_scalar(nd::scale(nd::mean(cos), T{-1}), T{1});
}

template <typename T>
BasicTensor<T> l_sep(const BasicTensor<T>& features, const std::vector<std::size_t>& labels, double margin,
                     bool normalize) {
  auto x = as_rows(features, "l_sep");
  const std::size_t n = x.dim(0);
  if (labels.size() != n) {
    throw ShapeError("l_sep: " + std::to_string(labels.size()) + " labels for a batch of " + std::to_string(n));
  }
  if (std::set<std::size_t>(labels.begin(), labels.end()).size() < 2) {
    throw ValueError("l_sep: batch holds a single class; the sampler must provide at least two");
  }
  if (normalize) {
    auto norms = nd::add_scalar(nd::l2_norm(x, 1), static_cast<T>(1e-8));
    x = nd::div(x, nd::reshape(norms, Shape{n, 1}));
  }
  auto dist = nd::pairwise_distance(x);
  auto d = dist.data();

  std::vector<std::size_t> pos_idx, neg_idx;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t hp = n, hn = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (hp == n || d[i * n + j] > d[i * n + hp]) hp = j;
      } else if (hn == n || d[i * n + j] < d[i * n + hn]) {
        hn = j;
      }
    }
    if (hp == n) continue;  // no in-batch positive
    pos_idx.push_back(i * n + hp);
    neg_idx.push_back(i * n + hn);
  }
  if (pos_idx.empty()) {
    throw ValueError("l_sep: no anchor has an in-batch positive; the sampler must provide one");
  }
  auto gap = nd::sub(nd::take(dist, pos_idx), nd::take(dist, neg_idx));
  return nd::sum(nd::relu(nd::add_scalar(gap, static_cast<T>(margin))));
}

template <typename T>
BasicTensor<T> compound(const LossTerms<T>& terms, const LossWeights& w) {
  w.validate();
  std::optional<BasicTensor<T>> total;
  auto accumulate = [&](const std::optional<BasicTensor<T>>& term, double lambda, const char* name) {
    if (lambda == 0) return;
    if (!term) throw ValueError(std::string("compound: weight for ") + name + " is nonzero but the term is missing");
    auto t = nd::scale(*term, static_cast<T>(lambda));
    total = total ? nd::add(*total, t) : t;
  };
  accumulate(terms.rec, w.rec, "l_rec");
  accumulate(terms.con, w.con, "l_con");
  accumulate(terms.align, w.align, "l_align");
  accumulate(terms.sep, w.sep, "l_sep");
  return total ? *total : BasicTensor<T>::scalar(T{0});
}

template <typename T>
BasicTensor<T> focal_loss(const BasicTensor<T>& logits, const std::vector<std::size_t>& labels, double gamma,
                          const std::vector<double>& alpha) {
  if (logits.rank() != 2) throw ShapeError("focal_loss: logits must be [N,C], got " + nd::to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("focal_loss: label count does not match batch");
  if (!(gamma >= 0)) throw ValueError("focal_loss: gamma must be >= 0");
  if (!alpha.empty() && alpha.size() != c) throw ShapeError("focal_loss: alpha needs one weight per class");
  std::vector<std::size_t> idx(n);
  std::vector<T> a(n, T{1});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) {
      throw ValueError("focal_loss: label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    idx[i] = i * c + labels[i];
    if (!alpha.empty()) {
      if (alpha[labels[i]] < 0) throw ValueError("focal_loss: alpha must be >= 0");
      a[i] = static_cast<T>(alpha[labels[i]]);
    }
  }
  auto logp = nd::take(nd::log_softmax(logits), idx);
  auto per = nd::mul(logp, BasicTensor<T>(Shape{n}, a));
  if (gamma != 0) {
    auto one_minus_p = nd::add_scalar(nd::scale(nd::exp(logp), T{-1}), T{1});
    per = nd::mul(per, nd::pow_scalar(nd::relu(one_minus_p), static_cast<T>(gamma)));
  }
  return nd::scale(nd::mean(per), T{-1});
}

std::vector<double> inverse_frequency_alpha(const std::vector<std::size_t>& counts) {
  std::vector<double> alpha(counts.size(), 1.0);
  double total = 0;
  std::size_t present = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) continue;
    alpha[i] = 1.0 / static_cast<double>(counts[i]);
    total += alpha[i];
    ++present;
  }
  if (present == 0) return alpha;
  const double mean = total / static_cast<double>(present);
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i]) alpha[i] /= mean;
  return alpha;
}

#define CFNET_INSTANTIATE(T)                                                                           \
  template BasicTensor<T> l_rec(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> l_con(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> l_align(const BasicTensor<T>&, const BasicTensor<T>&, double);               \
  template BasicTensor<T> l_sep(const BasicTensor<T>&, const std::vector<std::size_t>&, double, bool); \
  template BasicTensor<T> compound(const LossTerms<T>&, const LossWeights&);                           \
  template BasicTensor<T> focal_loss(const BasicTensor<T>&, const std::vector<std::size_t>&, double,   \
                                     const std::vector<double>&);

CFNET_INSTANTIATE(float)
CFNET_INSTANTIATE(double)

#undef CFNET_INSTANTIATE

}  // namespace cfnet::losses
