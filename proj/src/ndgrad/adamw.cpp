#include "cfnet/ndgrad/adamw.hpp"

#include <cmath>

namespace cfnet::nd {

void AdamW::add_group(std::vector<std::string> names, std::vector<Tensor> params, double lr_scale) {
  if (names.size() != params.size()) throw ValueError("adamw: names/params length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Slot s;
    s.name = std::move(names[i]);
    s.param = params[i];
    s.m.assign(params[i].size(), 0.0f);
    s.v.assign(params[i].size(), 0.0f);
    s.lr_scale = lr_scale;
    slots_.push_back(std::move(s));
  }
}

void AdamW::step(MissingGrad missing) {
  if (missing == MissingGrad::kError) {
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) throw ValueError("adamw: parameter " + s.name + " has no gradient");
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    auto p = s.param.mutable_data();
    auto g = s.param.grad();
    if (s.m.size() != p.size()) throw ShapeError("adamw: moment buffer does not match " + s.name);
    const double lr = opt_.lr * s.lr_scale;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double m = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * gi;
      const double v = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * gi * gi;
      s.m[i] = static_cast<float>(m);
      s.v[i] = static_cast<float>(v);
      double pi = p[i];
      pi -= lr * opt_.weight_decay * pi;
      pi -= lr * (m / bc1) / (std::sqrt(v / bc2) + opt_.eps);
      p[i] = static_cast<float>(pi);
    }
    s.param.clear_grad();
  }
}

}  // namespace cfnet::nd
