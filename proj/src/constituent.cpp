#include "treetf/constituent.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace treetf {

namespace {

using detail::grad_of;
using detail::record;
using detail::TensorImpl;

// First entry of softmax(x, y) where either may be the sentinel.
double softmax2_first(double x, double y) {
  if (x == kMaskSentinel) return 0.0;
  if (y == kMaskSentinel) return 1.0;
  return 1.0 / (1.0 + std::exp(y - x));
}

// Derivative of softmax2_first w.r.t. x (and the negative w.r.t. y).
double softmax2_slope(double x, double y) {
  if (x == kMaskSentinel || y == kMaskSentinel) return 0.0;
  const double p = softmax2_first(x, y);
  return p * (1.0 - p);
}

double dot(const double* a, const double* b, std::int64_t d) {
  double s = 0.0;
  for (std::int64_t i = 0; i < d; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TokenMask TokenMask::all_content(std::int64_t batch, std::int64_t length) {
  TokenMask m;
  m.batch = batch;
  m.length = length;
  m.content.assign(static_cast<std::size_t>(batch * length), 1);
  m.pad.assign(static_cast<std::size_t>(batch * length), 0);
  return m;
}

// ---------------------------------------------------------------------------

LinkScores link_scores(std::span<const double> q, std::span<const double> k, std::int64_t n, std::int64_t d,
                       double divisor, std::span<const std::uint8_t> content) {
  if (n < 2) throw SequenceTooShort("link_scores needs at least 2 tokens, got " + std::to_string(n));
  if (static_cast<std::int64_t>(q.size()) != n * d || static_cast<std::int64_t>(k.size()) != n * d) {
    throw DimensionError("link_scores: q/k must be N x d");
  }
  if (!content.empty() && static_cast<std::int64_t>(content.size()) != n) {
    throw DimensionError("link_scores: content mask length must equal N");
  }
  LinkScores s;
  s.right.resize(static_cast<std::size_t>(n - 1));
  s.left.resize(static_cast<std::size_t>(n - 1));
  for (std::int64_t p = 0; p + 1 < n; ++p) {
    const bool ok = content.empty() || (content[p] && content[p + 1]);
    s.right[p] = ok ? dot(&q[p * d], &k[(p + 1) * d], d) / divisor : kMaskSentinel;
    s.left[p] = ok ? dot(&q[(p + 1) * d], &k[p * d], d) / divisor : kMaskSentinel;
  }
  return s;
}

LinkProbs link_probs(const LinkScores& scores) {
  const auto m = scores.right.size();
  LinkProbs p;
  p.right.resize(m);
  p.left.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double other_left = k > 0 ? scores.left[k - 1] : kMaskSentinel;
    const double other_right = k + 1 < m ? scores.right[k + 1] : kMaskSentinel;
    p.right[k] = softmax2_first(scores.right[k], other_left);
    p.left[k] = softmax2_first(scores.left[k], other_right);
  }
  return p;
}

std::vector<double> merge_probs(const LinkProbs& probs, MergeIndex index) {
  const auto m = probs.right.size();
  std::vector<double> a(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double partner = index == MergeIndex::kAdjacent ? probs.left[k] : (k > 0 ? probs.left[k - 1] : 0.0);
    a[k] = std::sqrt(probs.right[k] * partner);
  }
  return a;
}

std::vector<double> compose_layers(std::span<const double> a_hat, std::span<const double> prev) {
  if (!prev.empty() && prev.size() != a_hat.size()) throw DimensionError("compose_layers: length mismatch");
  std::vector<double> a(a_hat.begin(), a_hat.end());
  if (prev.empty()) return a;
  for (std::size_t k = 0; k < a.size(); ++k) a[k] = prev[k] + (1.0 - prev[k]) * a_hat[k];
  return a;
}

std::vector<double> constituent_prior(std::span<const double> a) {
  const auto n = a.size() + 1;
  std::vector<double> c(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    c[i * n + i] = 1.0;
    double prod = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      prod *= a[j - 1];
      if (prod < kPriorFlush) prod = 0.0;
      c[i * n + j] = prod;
      c[j * n + i] = prod;
    }
  }
  return c;
}

ConstituentState ConstituentState::from_ladder(const MergeLadder& ladder, int layer) {
  if (layer < 0 || layer >= static_cast<int>(ladder.layers.size())) {
    throw std::out_of_range("layer " + std::to_string(layer) + " not in ladder");
  }
  ConstituentState s;
  s.layer_index = layer;
  s.merge_probs = ladder.layers[static_cast<std::size_t>(layer)];
  s.prior = constituent_prior(s.merge_probs);
  return s;
}

void write_ladder(std::ostream& os, const MergeLadder& ladder) {
  os << ladder.tokens << ' ' << ladder.layers.size() << '\n';
  os << std::setprecision(17);
  for (const auto& row : ladder.layers) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k) os << ' ';
      os << row[k];
    }
    os << '\n';
  }
}

bool read_ladder(std::istream& is, MergeLadder& ladder) {
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  if (!is) return false;
  std::istringstream header(line);
  std::int64_t n = 0;
  std::size_t layers = 0;
  if (!(header >> n >> layers) || n < 1) throw std::runtime_error("malformed ladder header: " + line);
  ladder.tokens = n;
  ladder.layers.assign(layers, {});
  for (auto& row : ladder.layers) {
    if (!std::getline(is, line)) throw std::runtime_error("ladder record truncated");
    std::istringstream ls(line);
    double v;
    while (ls >> v) row.push_back(v);
    if (static_cast<std::int64_t>(row.size()) != n - 1) throw std::runtime_error("ladder row has wrong length");
  }
  return true;
}

// ---------------------------------------------------------------------------

LinkScoreTensors link_scores(const Tensor& q, const Tensor& k, const TokenMask& mask, double divisor) {
  if (q.rank() != 3 || q.shape() != k.shape()) {
    throw DimensionError("link_scores: q " + shape_str(q.shape()) + " and k " + shape_str(k.shape()) +
                         " must both be [B, T, d]");
  }
  const auto B = q.dim(0), T = q.dim(1), d = q.dim(2);
  if (T < 2) throw SequenceTooShort("link_scores needs at least 2 positions, got " + std::to_string(T));
  if (mask.batch != B || mask.length != T) throw DimensionError("link_scores: mask does not match batch");
  const auto P = T - 1;
  std::vector<double> right(static_cast<std::size_t>(B * P)), left(right.size());
  const double* pq = q.data().data();
  const double* pk = k.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t p = 0; p < P; ++p) {
      const bool ok = mask.pair_is_content(b, p);
      const double* qp = pq + (b * T + p) * d;
      const double* kp = pk + (b * T + p) * d;
      right[b * P + p] = ok ? dot(qp, kp + d, d) / divisor : kMaskSentinel;
      left[b * P + p] = ok ? dot(qp + d, kp, d) / divisor : kMaskSentinel;
    }
  }
  LinkScoreTensors out{make_tensor({B, P}, std::move(right)), make_tensor({B, P}, std::move(left))};
  auto iq = q.impl_ptr(), ik = k.impl_ptr();
  // right[p] pairs q_p with k_{p+1}; left[p] pairs q_{p+1} with k_p.
  for (int dir = 0; dir < 2; ++dir) {
    Tensor& y = dir == 0 ? out.right : out.left;
    const TensorImpl* iy = y.impl();
    record(y, {q, k}, dir == 0 ? "link_scores.right" : "link_scores.left",
           [iq, ik, iy, B, T, P, d, divisor, dir](const TensorImpl& o) {
             double* gq = grad_of(iq);
             double* gk = grad_of(ik);
             for (std::int64_t b = 0; b < B; ++b) {
               for (std::int64_t p = 0; p < P; ++p) {
                 const auto e = b * P + p;
                 if (iy->data[e] == kMaskSentinel) continue;
                 const double g = o.grad[e] / divisor;
                 const auto qi = (b * T + p + (dir == 0 ? 0 : 1)) * d;
                 const auto ki = (b * T + p + (dir == 0 ? 1 : 0)) * d;
                 for (std::int64_t j = 0; j < d; ++j) {
                   if (gq) gq[qi + j] += g * ik->data[ki + j];
                   if (gk) gk[ki + j] += g * iq->data[qi + j];
                 }
               }
             }
           });
  }
  return out;
}

LinkProbTensors link_probs(const LinkScoreTensors& scores) {
  const auto& sr = scores.right;
  const auto& sl = scores.left;
  if (sr.rank() != 2 || sr.shape() != sl.shape()) throw DimensionError("link_probs: score shapes differ");
  const auto B = sr.dim(0), P = sr.dim(1);
  // For each output: the own score and the competing score of the same token.
  auto own_other = [P](int dir, std::int64_t b, std::int64_t p) -> std::pair<std::int64_t, std::int64_t> {
    if (dir == 0) return {b * P + p, p > 0 ? b * P + p - 1 : -1};  // right[p] vs left[p-1]
    return {b * P + p, p + 1 < P ? b * P + p + 1 : -1};             // left[p] vs right[p+1]
  };
  LinkProbTensors out;
  auto ir = sr.impl_ptr(), il = sl.impl_ptr();
  for (int dir = 0; dir < 2; ++dir) {
    const auto& own = dir == 0 ? ir : il;
    const auto& other = dir == 0 ? il : ir;
    std::vector<double> v(static_cast<std::size_t>(B * P));
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t p = 0; p < P; ++p) {
        auto [e, f] = own_other(dir, b, p);
        v[e] = softmax2_first(own->data[e], f >= 0 ? other->data[f] : kMaskSentinel);
      }
    }
    Tensor y = make_tensor({B, P}, std::move(v));
    record(y, {sr, sl}, dir == 0 ? "link_probs.right" : "link_probs.left",
           [own, other, B, P, own_other, dir](const TensorImpl& o) {
             double* g_own = grad_of(own);
             double* g_other = grad_of(other);
             for (std::int64_t b = 0; b < B; ++b) {
               for (std::int64_t p = 0; p < P; ++p) {
                 auto [e, f] = own_other(dir, b, p);
                 if (f < 0) continue;
                 const double s = o.grad[e] * softmax2_slope(own->data[e], other->data[f]);
                 if (g_own) g_own[e] += s;
                 if (g_other) g_other[f] -= s;
               }
             }
           });
    (dir == 0 ? out.right : out.left) = y;
  }
  return out;
}

Tensor merge_probs(const LinkProbTensors& probs, MergeIndex index) {
  const auto& pr = probs.right;
  const auto& pl = probs.left;
  if (pr.rank() != 2 || pr.shape() != pl.shape()) throw DimensionError("merge_probs: shapes differ");
  const auto B = pr.dim(0), P = pr.dim(1);
  const bool same = index == MergeIndex::kSameToken;
  // Partner element of the left-probability tensor, or -1 for a constant 0.
  auto partner = [same, P](std::int64_t b, std::int64_t p) -> std::int64_t {
    if (!same) return b * P + p;
    return p > 0 ? b * P + p - 1 : -1;
  };
  std::vector<double> a(static_cast<std::size_t>(B * P));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t p = 0; p < P; ++p) {
      const auto f = partner(b, p);
      a[b * P + p] = std::sqrt(pr[b * P + p] * (f >= 0 ? pl[f] : 0.0));
    }
  }
  Tensor y = make_tensor({B, P}, std::move(a));
  auto ir = pr.impl_ptr(), il = pl.impl_ptr();
  const TensorImpl* iy = y.impl();
  record(y, {pr, pl}, "merge_probs", [ir, il, iy, B, P, partner](const TensorImpl& o) {
    double* gr = grad_of(ir);
    double* gl = grad_of(il);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t p = 0; p < P; ++p) {
        const auto e = b * P + p;
        const auto f = partner(b, p);
        const double ah = iy->data[e];
        if (f < 0 || ah <= 0.0) continue;
        const double g = o.grad[e] / (2.0 * ah);
        if (gr) gr[e] += g * il->data[f];
        if (gl) gl[f] += g * ir->data[e];
      }
    }
  });
  return y;
}

Tensor compose_layers(const Tensor& a_hat, const Tensor& prev) {
  if (!prev.defined()) return a_hat;
  if (a_hat.shape() != prev.shape()) {
    throw DimensionError("compose_layers: " + shape_str(a_hat.shape()) + " vs " + shape_str(prev.shape()));
  }
  std::vector<double> a(a_hat.numel());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = prev[i] + (1.0 - prev[i]) * a_hat[i];
  Tensor y = make_tensor(a_hat.shape(), std::move(a));
  auto ih = a_hat.impl_ptr(), ip = prev.impl_ptr();
  record(y, {a_hat, prev}, "compose_layers", [ih, ip](const TensorImpl& o) {
    double* gh = grad_of(ih);
    double* gp = grad_of(ip);
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      if (gh) gh[i] += o.grad[i] * (1.0 - ip->data[i]);
      if (gp) gp[i] += o.grad[i] * (1.0 - ih->data[i]);
    }
  });
  return y;
}

Tensor constituent_gate(const Tensor& merge, const TokenMask& mask) {
  if (merge.rank() != 2) throw DimensionError("constituent_gate: merge must be [B, T-1]");
  const auto B = merge.dim(0), P = merge.dim(1), T = P + 1;
  if (mask.batch != B || mask.length != T) throw DimensionError("constituent_gate: mask does not match batch");
  std::vector<double> g(static_cast<std::size_t>(B * T * T), 1.0);
  const double* a = merge.data().data();
  for (std::int64_t b = 0; b < B; ++b) {
    double* gb = g.data() + b * T * T;
    for (std::int64_t i = 0; i < T; ++i) {
      if (!mask.is_content(b, i)) continue;
      double prod = 1.0;
      for (std::int64_t j = i + 1; j < T; ++j) {
        if (!mask.is_content(b, j)) continue;
        prod *= a[b * P + j - 1];
        if (prod < kPriorFlush) prod = 0.0;
        gb[i * T + j] = prod;
        gb[j * T + i] = prod;
      }
    }
  }
  Tensor y = make_tensor({B, 1, T, T}, std::move(g));
  auto im = merge.impl_ptr();
  const TensorImpl* iy = y.impl();
  auto mk = std::make_shared<TokenMask>(mask);
  record(y, {merge}, "constituent_gate", [im, iy, mk, B, P, T](const TensorImpl& o) {
    double* ga = grad_of(im);
    if (!ga) return;
    const double* a = im->data.data();
    for (std::int64_t b = 0; b < B; ++b) {
      const double* gg = o.grad.data() + b * T * T;
      const double* c = iy->data.data() + b * T * T;
      for (std::int64_t i = 0; i < T; ++i) {
        if (!mk->is_content(b, i)) continue;
        // C_{i,j} = C_{i,j-1} * a_{j-1}; walk j downward accumulating the adjoint.
        double bar = 0.0;
        for (std::int64_t j = T - 1; j > i; --j) {
          if (!mk->is_content(b, j)) continue;
          bar += gg[i * T + j] + gg[j * T + i];
          const double left = (j - 1 == i) ? 1.0 : c[i * T + j - 1];
          ga[b * P + j - 1] += bar * left;
          bar *= a[b * P + j - 1];
        }
      }
    }
  });
  return y;
}

Tensor padding_bias(const TokenMask& mask) {
  std::vector<double> bias(static_cast<std::size_t>(mask.batch * mask.length), 0.0);
  for (std::size_t i = 0; i < bias.size(); ++i) {
    if (mask.pad[i]) bias[i] = kMaskSentinel;
  }
  return make_tensor({mask.batch, 1, 1, mask.length}, std::move(bias));
}

AttentionResult gated_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& gate,
                                const Tensor& pad_bias, double divisor) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("gated_attention: q/k/v must share shape [B, H, T, dh], got " + shape_str(q.shape()) +
                         ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const auto B = q.dim(0), T = q.dim(2);
  if (gate.defined() && gate.shape() != Shape{B, 1, T, T}) {
    throw DimensionError("gated_attention: gate " + shape_str(gate.shape()) + " must be [B, 1, T, T] (one gate shared by all heads)");
  }
  Tensor scores = scale(matmul(q, transpose(k, -1, -2)), 1.0 / divisor);
  if (pad_bias.defined()) scores = add(scores, pad_bias);
  Tensor probs = softmax(scores, -1);
  if (gate.defined()) probs = mul(gate, probs);
  return {matmul(probs, v), probs};
}

}  // namespace treetf
