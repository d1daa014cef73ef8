#include "xbridge/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "xbridge/errors.hpp"
#include "xbridge/ops.hpp"

namespace xbridge::distill {

namespace {

// Sum of p * (log(p+eps) - log(q+eps)) over channels, averaged over the
// leading (batch/token) axes. The floor sits inside both logs, so p == q
// cancels exactly and a zero channel stays finite.
Tensor kl_mean(const Tensor& p, const Tensor& q, double epsilon) {
  Tensor logp = ops::log(ops::add_scalar(p, epsilon));
  Tensor logq = ops::log(ops::add_scalar(q, epsilon));
  Tensor total = ops::sum(ops::mul(p, ops::sub(logp, logq)));
  const std::int64_t tokens = p.numel() / p.shape().back();
  return ops::scale(total, 1.0 / static_cast<double>(tokens));
}

}  // namespace

Divergence divergence_from_name(const std::string& name) {
  if (name == "mse") return Divergence::mse;
  if (name == "kl") return Divergence::kl;
  if (name == "rkl") return Divergence::rkl;
  if (name == "js") return Divergence::js;
  throw ConfigError("unknown divergence '" + name + "', expected mse, kl, rkl or js");
}

const char* divergence_name(Divergence kind) {
  switch (kind) {
    case Divergence::mse: return "mse";
    case Divergence::kl: return "kl";
    case Divergence::rkl: return "rkl";
    case Divergence::js: return "js";
  }
  throw std::invalid_argument("divergence_name: bad kind");
}

Tensor normalize_attn(const Tensor& a, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw std::invalid_argument("normalize_attn: temperature must be finite positive");
  }
  return ops::softmax(ops::scale(a, 1.0 / tau), -1);
}

Tensor divergence_loss(const Tensor& p, const Tensor& q, Divergence kind, double epsilon) {
  if (p.shape() != q.shape()) {
    throw std::invalid_argument("divergence_loss: shapes disagree");
  }
  switch (kind) {
    case Divergence::mse: {
      Tensor d = ops::sub(p, q);
      return ops::mean(ops::mul(d, d));
    }
    case Divergence::kl:
      return kl_mean(p, q, epsilon);
    case Divergence::rkl:
      return kl_mean(q, p, epsilon);
    case Divergence::js: {
      Tensor m = ops::scale(ops::add(p, q), 0.5);
      return ops::scale(ops::add(kl_mean(p, m, epsilon), kl_mean(q, m, epsilon)), 0.5);
    }
  }
  throw std::invalid_argument("divergence_loss: bad kind");
}

std::vector<Tensor> per_block_distill(const TapSet& student, const TapSet& teacher,
                                      Divergence kind, double tau, double epsilon) {
  if (student.position != teacher.position) {
    throw std::invalid_argument("per_block_distill: positions disagree, student '" +
                                student.position + "' vs teacher '" + teacher.position + "'");
  }
  if (student.x_taps.size() != teacher.x_taps.size() ||
      student.c_taps.size() != teacher.c_taps.size()) {
    throw std::invalid_argument("per_block_distill: tap counts disagree");
  }
  const std::size_t blocks = std::max(student.x_taps.size(), student.c_taps.size());
  if (blocks == 0) throw std::invalid_argument("per_block_distill: empty tap sets");
  const bool has_x = !student.x_taps.empty();
  const bool has_c = !student.c_taps.empty();
  if (has_x && has_c && student.x_taps.size() != student.c_taps.size()) {
    throw std::invalid_argument("per_block_distill: x/c tap counts disagree");
  }

  std::vector<Tensor> losses;
  losses.reserve(blocks);
  for (std::size_t i = 0; i < blocks; ++i) {
    // Teacher first: the KL family keys its reference distribution off p.
    auto side = [&](const Tensor& t, const Tensor& s) {
      if (kind == Divergence::mse) return divergence_loss(t, s, kind, epsilon);
      return divergence_loss(normalize_attn(t, tau), normalize_attn(s, tau), kind, epsilon);
    };
    if (has_x && has_c) {
      losses.push_back(ops::scale(ops::add(side(teacher.x_taps[i], student.x_taps[i]),
                                           side(teacher.c_taps[i], student.c_taps[i])),
                                  0.5));
    } else if (has_c) {
      losses.push_back(side(teacher.c_taps[i], student.c_taps[i]));
    } else {
      losses.push_back(side(teacher.x_taps[i], student.x_taps[i]));
    }
  }
  return losses;
}

Tensor layer_distill_loss(const TapSet& student, const TapSet& teacher, Divergence kind,
                          double tau, double epsilon) {
  std::vector<Tensor> blocks = per_block_distill(student, teacher, kind, tau, epsilon);
  Tensor total = blocks[0];
  for (std::size_t i = 1; i < blocks.size(); ++i) total = ops::add(total, blocks[i]);
  return ops::scale(total, 1.0 / static_cast<double>(blocks.size()));
}

}  // namespace xbridge::distill
