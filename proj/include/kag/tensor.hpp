#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kag {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class Tape;

// Dense fp64 tensor, row-major, rank <= 4. Values share an immutable buffer;
// copies are cheap handles. A tensor optionally references a node on a Tape.
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;
  Tape* tape = nullptr;
  int id = -1;

  int rank() const { return static_cast<int>(shape.size()); }
  int size() const { return numel(shape); }
  const std::vector<double>& values() const { return *data; }
  double operator[](int i) const { return (*data)[static_cast<size_t>(i)]; }

  static Tensor leaf(Shape shape, std::vector<double> values) {
    if (shape.size() > 4) throw Error("tensor rank must be <= 4, got " + shape_str(shape));
    for (int d : shape)
      if (d <= 0) throw Error("tensor extents must be positive, got " + shape_str(shape));
    if (numel(shape) != static_cast<int>(values.size()))
      throw Error("shape " + shape_str(shape) + " does not match " +
                  std::to_string(values.size()) + " values");
    for (double v : values)
      if (!std::isfinite(v)) throw Error("leaf tensor contains a non-finite value");
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(std::move(values));
    return t;
  }

  static Tensor zeros(Shape shape) {
    // hot path for op outputs: zeros never need the finite-value scan
    if (shape.size() > 4) throw Error("tensor rank must be <= 4, got " + shape_str(shape));
    for (int d : shape)
      if (d <= 0) throw Error("tensor extents must be positive, got " + shape_str(shape));
    int n = numel(shape);
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
    return t;
  }

  static Tensor full(Shape shape, double v) {
    int n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
  }

  static Tensor scalar(double v) { return leaf({1}, {v}); }
};

// Reverse-mode tape. Nodes are recorded in execution order (hence already
// topologically sorted); one backward sweep walks them in reverse. Gradient
// accumulation order is fixed by tape order, so results are deterministic.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

  // Registers a leaf that should receive a gradient.
  void watch(Tensor& t) {
    if (t.tape && t.tape != this) throw Error("tensor is already on another tape");
    if (t.id < 0) {
      t.tape = this;
      t.id = add_node(t.shape, nullptr, true);
    } else {
      nodes_[static_cast<size_t>(t.id)].is_leaf = true;
    }
    t.requires_grad = true;
  }

  int record(const Shape& shape, BackwardFn bwd) { return add_node(shape, std::move(bwd), false); }

  // Accumulation buffer for node `id`, allocated lazily as zeros.
  std::vector<double>& acc(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (!g) g = std::make_unique<std::vector<double>>(
                    static_cast<size_t>(numel(nodes_[static_cast<size_t>(id)].shape)), 0.0);
    return *g;
  }

  // Reverse sweep from a scalar loss; returns {tape_id -> gradient} for every
  // watched leaf (zeros when the loss does not depend on it).
  std::map<int, Tensor> backward(const Tensor& loss) {
    if (loss.size() != 1) throw Error("backward requires a scalar loss");
    if (loss.tape != this || loss.id < 0) throw Error("loss is detached from this tape");
    for (auto& g : grads_) g.reset();
    acc(loss.id)[0] = 1.0;
    for (int k = static_cast<int>(nodes_.size()) - 1; k >= 0; --k) {
      auto& node = nodes_[static_cast<size_t>(k)];
      if (!node.backward) continue;
      auto& g = grads_[static_cast<size_t>(k)];
      if (!g) continue;
      node.backward(*this, *g);
    }
    std::map<int, Tensor> out;
    for (size_t k = 0; k < nodes_.size(); ++k) {
      if (!nodes_[k].is_leaf) continue;
      Tensor g = Tensor::zeros(nodes_[k].shape);
      if (grads_[k]) *g.data = *grads_[k];
      out.emplace(static_cast<int>(k), std::move(g));
    }
    return out;
  }

  // Gradient of a watched tensor after backward().
  Tensor grad(const Tensor& t) const {
    if (t.tape != this || t.id < 0) throw Error("tensor is not on this tape");
    Tensor g = Tensor::zeros(t.shape);
    const auto& buf = grads_[static_cast<size_t>(t.id)];
    if (buf) *g.data = *buf;
    return g;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    BackwardFn backward;
    bool is_leaf = false;
  };

  int add_node(const Shape& shape, BackwardFn bwd, bool leaf) {
    if (nodes_.capacity() == nodes_.size()) {
      size_t cap = std::max<size_t>(1024, nodes_.capacity() * 4);
      nodes_.reserve(cap);
      grads_.reserve(cap);
    }
    nodes_.push_back(Node{shape, std::move(bwd), leaf});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::unique_ptr<std::vector<double>>> grads_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

inline Tape* joint_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tape) continue;
    if (tape && tape != t->tape) throw Error("operands live on different tapes");
    tape = t->tape;
  }
  return tape;
}

inline Tensor make_output(Shape shape, Tape* tape) {
  Tensor out = Tensor::zeros(std::move(shape));
  out.tape = tape;
  return out;
}

inline void finish(Tensor& out, Tape* tape, Tape::BackwardFn bwd) {
  if (tape) out.id = tape->record(out.shape, std::move(bwd));
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// cache-blocked out-of-place transpose: dst[j,i] (+)= src[i,j] for [m,n] src
template <bool Accumulate>
inline void transpose_into(const double* src, double* dst, int m, int n) {
  constexpr int kBlock = 32;
  for (int i0 = 0; i0 < m; i0 += kBlock)
    for (int j0 = 0; j0 < n; j0 += kBlock) {
      int i1 = std::min(m, i0 + kBlock), j1 = std::min(n, j0 + kBlock);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) {
          if constexpr (Accumulate)
            dst[static_cast<size_t>(j) * m + i] += src[static_cast<size_t>(i) * n + j];
          else
            dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
        }
    }
}

// slice geometry for axis-wise ops: positions = outer * inner, vector length n
struct AxisView {
  int outer, n, inner;
};

inline AxisView axis_view(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw Error("axis " + std::to_string(axis) + " out of bounds for " + shape_str(shape));
  AxisView v{1, shape[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    v.inner *= shape[static_cast<size_t>(i)];
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd dfdx_from_xy) {
  Tape* tape = joint_tape({&x});
  Tensor out = make_output(x.shape, tape);
  const auto& xv = *x.data;
  auto& yv = *out.data;
  for (size_t i = 0; i < xv.size(); ++i) yv[i] = fwd(xv[i]);
  int xid = x.id;
  auto xd = x.data, yd = out.data;
  finish(out, tape, [xid, xd, yd, dfdx_from_xy](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx_from_xy((*xd)[i], (*yd)[i]);
  });
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw Error("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output(a.shape, tape);
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  int aid = a.id, bid = b.id;
  detail::finish(out, tape, [aid, bid](Tape& t, const std::vector<double>& gy) {
    if (aid >= 0) detail::add_into(t.acc(aid), gy);
    if (bid >= 0) detail::add_into(t.acc(bid), gy);
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw Error("sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output(a.shape, tape);
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
  int aid = a.id, bid = b.id;
  detail::finish(out, tape, [aid, bid](Tape& t, const std::vector<double>& gy) {
    if (aid >= 0) detail::add_into(t.acc(aid), gy);
    if (bid >= 0) {
      auto& gb = t.acc(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw Error("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output(a.shape, tape);
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  int aid = a.id, bid = b.id;
  auto ad = a.data, bd = b.data;
  detail::finish(out, tape, [aid, bid, ad, bd](Tape& t, const std::vector<double>& gy) {
    if (aid >= 0) {
      auto& ga = t.acc(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * (*bd)[i];
    }
    if (bid >= 0) {
      auto& gb = t.acc(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * (*ad)[i];
    }
  });
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw Error("div: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output(a.shape, tape);
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = (*a.data)[i] / (*b.data)[i];
  int aid = a.id, bid = b.id;
  auto ad = a.data, bd = b.data;
  detail::finish(out, tape, [aid, bid, ad, bd](Tape& t, const std::vector<double>& gy) {
    if (aid >= 0) {
      auto& ga = t.acc(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / (*bd)[i];
    }
    if (bid >= 0) {
      auto& gb = t.acc(bid);
      for (size_t i = 0; i < gb.size(); ++i)
        gb[i] -= gy[i] * (*ad)[i] / ((*bd)[i] * (*bd)[i]);
    }
  });
  return out;
}

// y = alpha * x + beta
inline Tensor affine(const Tensor& x, double alpha, double beta) {
  return detail::unary_op(
      x, [alpha, beta](double v) { return alpha * v + beta; },
      [alpha](double, double) { return alpha; });
}

inline Tensor scale(const Tensor& x, double alpha) { return affine(x, alpha, 0.0); }

inline Tensor sigmoid(const Tensor& x) {
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output(x.shape, tape);
  const auto& xv = *x.data;
  auto& yv = *out.data;
  const int n = static_cast<int>(xv.size());
  // overflow-safe logistic via e = exp(-|x|); the exp runs in an aligned
  // scratch buffer so its vectorized segmentation does not depend on the
  // runtime address of the output allocation (bit-determinism across runs)
  Eigen::ArrayXd s(n);
  s = Eigen::Map<const Eigen::ArrayXd>(xv.data(), n);
  s = (-s.abs()).exp();
  for (int i = 0; i < n; ++i) {
    double e = s[static_cast<Eigen::Index>(i)];
    yv[static_cast<size_t>(i)] = xv[static_cast<size_t>(i)] >= 0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
  }
  int xid = x.id;
  auto yd = out.data;
  detail::finish(out, tape, [xid, yd](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (*yd)[i] * (1.0 - (*yd)[i]);
  });
  return out;
}

inline Tensor tanh(const Tensor& x) {
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output(x.shape, tape);
  const auto& xv = *x.data;
  auto& yv = *out.data;
  const int n = static_cast<int>(xv.size());
  Eigen::ArrayXd s(n);  // aligned scratch, same rationale as sigmoid
  s = Eigen::Map<const Eigen::ArrayXd>(xv.data(), n);
  s = s.tanh();
  Eigen::Map<Eigen::ArrayXd>(yv.data(), n) = s;
  int xid = x.id;
  auto yd = out.data;
  detail::finish(out, tape, [xid, yd](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * (1.0 - (*yd)[i] * (*yd)[i]);
  });
  return out;
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(x, [](double v) { return std::log(v); },
                          [](double v, double) { return 1.0 / v; });
}

inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary_op(x, [lo](double v) { return v < lo ? lo : v; },
                          [lo](double v, double) { return v >= lo ? 1.0 : 0.0; });
}

// multiply by a scalar tensor [1] (both factors differentiable)
inline Tensor smul(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw Error("smul: scale must be a scalar tensor");
  Tape* tape = detail::joint_tape({&x, &s});
  Tensor out = detail::make_output(x.shape, tape);
  double sv = (*s.data)[0];
  for (size_t i = 0; i < out.data->size(); ++i) (*out.data)[i] = sv * (*x.data)[i];
  int xid = x.id, sid = s.id;
  auto xd = x.data;
  detail::finish(out, tape, [xid, sid, sv, xd](Tape& t, const std::vector<double>& gy) {
    if (xid >= 0) {
      auto& gx = t.acc(xid);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += sv * gy[i];
    }
    if (sid >= 0) {
      double acc = 0.0;
      for (size_t i = 0; i < gy.size(); ++i) acc += gy[i] * (*xd)[i];
      t.acc(sid)[0] += acc;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions / shape ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({1}, tape);
  (*out.data)[0] = std::accumulate(x.data->begin(), x.data->end(), 0.0);
  int xid = x.id;
  detail::finish(out, tape, [xid](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (double& g : gx) g += gy[0];
  });
  return out;
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / x.size()); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw Error("reshape: " + shape_str(x.shape) + " -> " + shape_str(shape) + " changes size");
  Tape* tape = detail::joint_tape({&x});
  Tensor out;
  out.shape = std::move(shape);
  out.data = x.data;  // buffers are immutable, sharing is safe
  out.tape = tape;
  int xid = x.id;
  detail::finish(out, tape, [xid](Tape& t, const std::vector<double>& gy) {
    if (xid >= 0) detail::add_into(t.acc(xid), gy);
  });
  return out;
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw Error("transpose expects rank-2, got " + shape_str(x.shape));
  int m = x.shape[0], n = x.shape[1];
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({n, m}, tape);
  detail::transpose_into<false>(x.data->data(), out.data->data(), m, n);
  int xid = x.id;
  detail::finish(out, tape, [xid, m, n](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    detail::transpose_into<true>(gy.data(), t.acc(xid).data(), n, m);
  });
  return out;
}

// [C,H,W] -> [H*W, C] (patch-major flattening used by the attention maths)
inline Tensor flatten_spatial(const Tensor& x) {
  if (x.rank() != 3) throw Error("flatten_spatial expects rank-3, got " + shape_str(x.shape));
  int c = x.shape[0], p = x.shape[1] * x.shape[2];
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({p, c}, tape);
  detail::transpose_into<false>(x.data->data(), out.data->data(), c, p);
  int xid = x.id;
  detail::finish(out, tape, [xid, c, p](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    detail::transpose_into<true>(gy.data(), t.acc(xid).data(), p, c);
  });
  return out;
}

// [H*W, C] -> [C,H,W]
inline Tensor unflatten_spatial(const Tensor& x, int h, int w) {
  if (x.rank() != 2 || x.shape[0] != h * w)
    throw Error("unflatten_spatial: " + shape_str(x.shape) + " does not match " +
                std::to_string(h) + "x" + std::to_string(w));
  int c = x.shape[1], p = h * w;
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({c, h, w}, tape);
  detail::transpose_into<false>(x.data->data(), out.data->data(), p, c);
  int xid = x.id;
  detail::finish(out, tape, [xid, c, p](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    detail::transpose_into<true>(gy.data(), t.acc(xid).data(), c, p);
  });
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape[1] != b.shape[1] || a.shape[2] != b.shape[2])
    throw Error("concat_channels: incompatible " + shape_str(a.shape) + " and " + shape_str(b.shape));
  int ca = a.shape[0], cb = b.shape[0], p = a.shape[1] * a.shape[2];
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output({ca + cb, a.shape[1], a.shape[2]}, tape);
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  std::copy(b.data->begin(), b.data->end(), out.data->begin() + static_cast<long>(ca) * p);
  int aid = a.id, bid = b.id;
  size_t na = a.data->size();
  detail::finish(out, tape, [aid, bid, na](Tape& t, const std::vector<double>& gy) {
    if (aid >= 0) {
      auto& ga = t.acc(aid);
      for (size_t i = 0; i < na; ++i) ga[i] += gy[i];
    }
    if (bid >= 0) {
      auto& gb = t.acc(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += gy[na + i];
    }
  });
  return out;
}

// out[c,:,:] = map[c,:,:] * gate[c]
inline Tensor channel_scale(const Tensor& map, const Tensor& gate) {
  if (map.rank() != 3 || gate.rank() != 1 || gate.shape[0] != map.shape[0])
    throw Error("channel_scale: incompatible " + shape_str(map.shape) + " and " + shape_str(gate.shape));
  int c = map.shape[0], p = map.shape[1] * map.shape[2];
  Tape* tape = detail::joint_tape({&map, &gate});
  Tensor out = detail::make_output(map.shape, tape);
  for (int ch = 0; ch < c; ++ch) {
    double g = (*gate.data)[static_cast<size_t>(ch)];
    for (int i = 0; i < p; ++i)
      (*out.data)[static_cast<size_t>(ch) * p + i] = g * (*map.data)[static_cast<size_t>(ch) * p + i];
  }
  int mid = map.id, gid = gate.id;
  auto md = map.data, gd = gate.data;
  detail::finish(out, tape, [mid, gid, md, gd, c, p](Tape& t, const std::vector<double>& gy) {
    if (mid >= 0) {
      auto& gm = t.acc(mid);
      for (int ch = 0; ch < c; ++ch) {
        double g = (*gd)[static_cast<size_t>(ch)];
        for (int i = 0; i < p; ++i) gm[static_cast<size_t>(ch) * p + i] += g * gy[static_cast<size_t>(ch) * p + i];
      }
    }
    if (gid >= 0) {
      auto& gg = t.acc(gid);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < p; ++i)
          acc += gy[static_cast<size_t>(ch) * p + i] * (*md)[static_cast<size_t>(ch) * p + i];
        gg[static_cast<size_t>(ch)] += acc;
      }
    }
  });
  return out;
}

// out[c,:,:] = map[c,:,:] + bias[c]
inline Tensor add_channel_bias(const Tensor& map, const Tensor& bias) {
  if (map.rank() != 3 || bias.rank() != 1 || bias.shape[0] != map.shape[0])
    throw Error("add_channel_bias: incompatible " + shape_str(map.shape) + " and " + shape_str(bias.shape));
  int c = map.shape[0], p = map.shape[1] * map.shape[2];
  Tape* tape = detail::joint_tape({&map, &bias});
  Tensor out = detail::make_output(map.shape, tape);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < p; ++i)
      (*out.data)[static_cast<size_t>(ch) * p + i] =
          (*map.data)[static_cast<size_t>(ch) * p + i] + (*bias.data)[static_cast<size_t>(ch)];
  int mid = map.id, bid = bias.id;
  detail::finish(out, tape, [mid, bid, c, p](Tape& t, const std::vector<double>& gy) {
    if (mid >= 0) detail::add_into(t.acc(mid), gy);
    if (bid >= 0) {
      auto& gb = t.acc(bid);
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < p; ++i) acc += gy[static_cast<size_t>(ch) * p + i];
        gb[static_cast<size_t>(ch)] += acc;
      }
    }
  });
  return out;
}

// column j of a rank-2 tensor, as a rank-1 tensor
inline Tensor column(const Tensor& x, int j) {
  if (x.rank() != 2) throw Error("column expects rank-2, got " + shape_str(x.shape));
  int m = x.shape[0], n = x.shape[1];
  if (j < 0 || j >= n) throw Error("column index out of bounds");
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({m}, tape);
  for (int i = 0; i < m; ++i) (*out.data)[static_cast<size_t>(i)] = (*x.data)[static_cast<size_t>(i) * n + j];
  int xid = x.id;
  detail::finish(out, tape, [xid, m, n, j](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (int i = 0; i < m; ++i) gx[static_cast<size_t>(i) * n + j] += gy[static_cast<size_t>(i)];
  });
  return out;
}

inline Tensor pick(const Tensor& x, int flat_index) {
  if (flat_index < 0 || flat_index >= x.size()) throw Error("pick index out of bounds");
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({1}, tape);
  (*out.data)[0] = (*x.data)[static_cast<size_t>(flat_index)];
  int xid = x.id;
  detail::finish(out, tape, [xid, flat_index](Tape& t, const std::vector<double>& gy) {
    if (xid >= 0) t.acc(xid)[static_cast<size_t>(flat_index)] += gy[0];
  });
  return out;
}

// ---------------------------------------------------------------------------
// matmul / softmax / normalize
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw Error("matmul expects rank-2 operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  if (a.shape[1] != b.shape[0])
    throw Error("matmul: inner dims disagree, " + shape_str(a.shape) + " x " + shape_str(b.shape));
  int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tape* tape = detail::joint_tape({&a, &b});
  Tensor out = detail::make_output({m, n}, tape);
  {
    detail::CMatMap A(a.data->data(), m, k), B(b.data->data(), k, n);
    detail::MatMap C(out.data->data(), m, n);
    C.noalias() = A * B;
  }
  int aid = a.id, bid = b.id;
  auto ad = a.data, bd = b.data;
  detail::finish(out, tape, [aid, bid, ad, bd, m, k, n](Tape& t, const std::vector<double>& gy) {
    detail::CMatMap G(gy.data(), m, n);
    if (aid >= 0) {
      detail::CMatMap B(bd->data(), k, n);
      detail::MatMap GA(t.acc(aid).data(), m, k);
      GA.noalias() += G * B.transpose();
    }
    if (bid >= 0) {
      detail::CMatMap A(ad->data(), m, k);
      detail::MatMap GB(t.acc(bid).data(), k, n);
      GB.noalias() += A.transpose() * G;
    }
  });
  return out;
}

// max-subtracted softmax along `axis`; slices along the axis sum to 1
inline Tensor softmax(const Tensor& x, int axis) {
  auto view = detail::axis_view(x.shape, axis);
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output(x.shape, tape);
  const auto& xv = *x.data;
  auto& yv = *out.data;
  if (view.inner == 1) {
    // contiguous slices: vectorized row-at-a-time path. exp/sum run in an
    // aligned scratch so the SIMD segmentation (and hence the bits) never
    // depends on the heap address of the tensor buffer.
    Eigen::ArrayXd s(view.n);
    for (int o = 0; o < view.outer; ++o) {
      size_t base = static_cast<size_t>(o) * view.n;
      s = Eigen::Map<const Eigen::ArrayXd>(xv.data() + base, view.n);
      s = (s - s.maxCoeff()).exp();
      double z = s.sum();
      Eigen::Map<Eigen::ArrayXd>(yv.data() + base, view.n) = s / z;
    }
  } else {
    for (int o = 0; o < view.outer; ++o)
      for (int in = 0; in < view.inner; ++in) {
        size_t base = static_cast<size_t>(o) * view.n * view.inner + in;
        double mx = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < view.n; ++i) mx = std::max(mx, xv[base + static_cast<size_t>(i) * view.inner]);
        double z = 0.0;
        for (int i = 0; i < view.n; ++i) {
          double e = std::exp(xv[base + static_cast<size_t>(i) * view.inner] - mx);
          yv[base + static_cast<size_t>(i) * view.inner] = e;
          z += e;
        }
        for (int i = 0; i < view.n; ++i) yv[base + static_cast<size_t>(i) * view.inner] /= z;
      }
  }
  int xid = x.id;
  auto yd = out.data;
  detail::finish(out, tape, [xid, yd, view](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    const auto& y = *yd;
    if (view.inner == 1) {
      for (int o = 0; o < view.outer; ++o) {
        size_t base = static_cast<size_t>(o) * view.n;
        Eigen::Map<const Eigen::ArrayXd> yr(y.data() + base, view.n);
        Eigen::Map<const Eigen::ArrayXd> gr(gy.data() + base, view.n);
        Eigen::Map<Eigen::ArrayXd> gxr(gx.data() + base, view.n);
        // four-lane reduction: fixed order (bit-stable) without the serial
        // add-latency chain of a single accumulator
        double d0 = 0, d1 = 0, d2 = 0, d3 = 0;
        int i = 0;
        for (; i + 4 <= view.n; i += 4) {
          d0 += gy[base + i] * y[base + i];
          d1 += gy[base + i + 1] * y[base + i + 1];
          d2 += gy[base + i + 2] * y[base + i + 2];
          d3 += gy[base + i + 3] * y[base + i + 3];
        }
        for (; i < view.n; ++i) d0 += gy[base + i] * y[base + i];
        double dot = (d0 + d1) + (d2 + d3);
        gxr += yr * (gr - dot);
      }
      return;
    }
    for (int o = 0; o < view.outer; ++o)
      for (int in = 0; in < view.inner; ++in) {
        size_t base = static_cast<size_t>(o) * view.n * view.inner + in;
        double dot = 0.0;
        for (int i = 0; i < view.n; ++i) {
          size_t k = base + static_cast<size_t>(i) * view.inner;
          dot += gy[k] * y[k];
        }
        for (int i = 0; i < view.n; ++i) {
          size_t k = base + static_cast<size_t>(i) * view.inner;
          gx[k] += y[k] * (gy[k] - dot);
        }
      }
  });
  return out;
}

// Fused softmax(q kᵀ) v: equals
// matmul(softmax(matmul(q, transpose(k)), 1), v) without materializing the
// [n,m] edge/attention tensors on the tape. The unnormalized attention
// exp(e - rowmax) lives in an aligned side buffer together with the inverse
// row sums; the normalization is folded into a cheap [n,c] row scaling of
// the output, and the backward pass reuses the buffer instead of redoing
// the exponentials. The buffer is 64-byte aligned so the vectorized exp
// segmentation is independent of the allocator's runtime addresses
// (bit-determinism across runs).
inline Tensor attention_rows(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw Error("attention_rows: operands must be rank-2");
  if (q.shape[1] != k.shape[1])
    throw Error("attention_rows: q/k feature dims disagree, " + shape_str(q.shape) + " vs " +
                shape_str(k.shape));
  if (k.shape[0] != v.shape[0])
    throw Error("attention_rows: k/v row counts disagree, " + shape_str(k.shape) + " vs " +
                shape_str(v.shape));
  int n = q.shape[0], d = q.shape[1], m = k.shape[0], c = v.shape[1];
  Tape* tape = detail::joint_tape({&q, &k, &v});
  Tensor out = detail::make_output({n, c}, tape);

  std::shared_ptr<double> att(
      static_cast<double*>(
          Eigen::internal::aligned_malloc(sizeof(double) * static_cast<size_t>(n) * m)),
      [](double* p) { Eigen::internal::aligned_free(p); });
  auto invz = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  {
    detail::CMatMap Q(q.data->data(), n, d), K(k.data->data(), m, d), V(v.data->data(), m, c);
    detail::MatMap A(att.get(), n, m), O(out.data->data(), n, c);
    A.noalias() = Q * K.transpose();
    for (int r = 0; r < n; ++r) {
      Eigen::Map<Eigen::ArrayXd> row(att.get() + static_cast<size_t>(r) * m, m);
      row = (row - row.maxCoeff()).exp();
      (*invz)[static_cast<size_t>(r)] = 1.0 / row.sum();
    }
    O.noalias() = A * V;
    for (int r = 0; r < n; ++r) O.row(r) *= (*invz)[static_cast<size_t>(r)];
  }
  int qid = q.id, kid = k.id, vid = v.id;
  auto qd = q.data, kd = k.data, vd = v.data;
  detail::finish(out, tape, [=](Tape& t, const std::vector<double>& gy) {
    detail::CMatMap Q(qd->data(), n, d), K(kd->data(), m, d), V(vd->data(), m, c);
    detail::CMatMap A(att.get(), n, m), G(gy.data(), n, c);
    // scratch survives across calls; only exact elementwise math and blocked
    // gemms touch it, so its alignment cannot perturb results
    thread_local std::vector<double> ga_buf, gs_buf;
    ga_buf.resize(static_cast<size_t>(n) * m);
    detail::MatMap GA(ga_buf.data(), n, m);
    // d att = g_out vᵀ, then the softmax Jacobian row by row (in place)
    GA.noalias() = G * V.transpose();
    for (int r = 0; r < n; ++r) {
      const double* ar = att.get() + static_cast<size_t>(r) * m;
      double* gr = ga_buf.data() + static_cast<size_t>(r) * m;
      double iz = (*invz)[static_cast<size_t>(r)];
      double d0 = 0, d1 = 0, d2 = 0, d3 = 0;
      int i = 0;
      for (; i + 4 <= m; i += 4) {
        d0 += gr[i] * ar[i];
        d1 += gr[i + 1] * ar[i + 1];
        d2 += gr[i + 2] * ar[i + 2];
        d3 += gr[i + 3] * ar[i + 3];
      }
      for (; i < m; ++i) d0 += gr[i] * ar[i];
      double dot = ((d0 + d1) + (d2 + d3)) * iz;
      Eigen::Map<Eigen::ArrayXd>(gr, m) =
          Eigen::Map<const Eigen::ArrayXd>(ar, m) *
          (Eigen::Map<const Eigen::ArrayXd>(gr, m) - dot) * iz;
    }
    if (qid >= 0) detail::MatMap(t.acc(qid).data(), n, d).noalias() += GA * K;
    if (kid >= 0) detail::MatMap(t.acc(kid).data(), m, d).noalias() += GA.transpose() * Q;
    if (vid >= 0) {
      // gv = (diag(invz) A)ᵀ G = Aᵀ (diag(invz) G)
      gs_buf.resize(static_cast<size_t>(n) * c);
      detail::MatMap GS(gs_buf.data(), n, c);
      GS = G;
      for (int r = 0; r < n; ++r) GS.row(r) *= (*invz)[static_cast<size_t>(r)];
      detail::MatMap(t.acc(vid).data(), m, c).noalias() += A.transpose() * GS;
    }
  });
  return out;
}

// each vector running along `axis` divided by max(||v||, eps)
inline Tensor l2_normalize(const Tensor& x, int axis, double eps = 1e-12) {
  if (eps <= 0) throw Error("l2_normalize: eps must be positive");
  auto view = detail::axis_view(x.shape, axis);
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output(x.shape, tape);
  auto norms = std::make_shared<std::vector<double>>(
      static_cast<size_t>(view.outer) * view.inner);
  const auto& xv = *x.data;
  auto& yv = *out.data;
  for (int o = 0; o < view.outer; ++o)
    for (int in = 0; in < view.inner; ++in) {
      size_t base = static_cast<size_t>(o) * view.n * view.inner + in;
      double ss = 0.0;
      for (int i = 0; i < view.n; ++i) {
        double v = xv[base + static_cast<size_t>(i) * view.inner];
        ss += v * v;
      }
      double nrm = std::max(std::sqrt(ss), eps);
      (*norms)[static_cast<size_t>(o) * view.inner + in] = std::sqrt(ss);
      for (int i = 0; i < view.n; ++i)
        yv[base + static_cast<size_t>(i) * view.inner] = xv[base + static_cast<size_t>(i) * view.inner] / nrm;
    }
  int xid = x.id;
  auto yd = out.data;
  detail::finish(out, tape, [xid, yd, norms, view, eps](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    const auto& y = *yd;
    for (int o = 0; o < view.outer; ++o)
      for (int in = 0; in < view.inner; ++in) {
        size_t base = static_cast<size_t>(o) * view.n * view.inner + in;
        double nrm = (*norms)[static_cast<size_t>(o) * view.inner + in];
        if (nrm >= eps) {
          double dot = 0.0;
          for (int i = 0; i < view.n; ++i) {
            size_t k = base + static_cast<size_t>(i) * view.inner;
            dot += gy[k] * y[k];
          }
          for (int i = 0; i < view.n; ++i) {
            size_t k = base + static_cast<size_t>(i) * view.inner;
            gx[k] += (gy[k] - y[k] * dot) / nrm;
          }
        } else {
          for (int i = 0; i < view.n; ++i) {
            size_t k = base + static_cast<size_t>(i) * view.inner;
            gx[k] += gy[k] / eps;
          }
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d / pooling / upsampling
// ---------------------------------------------------------------------------

// "same" zero-padded cross-correlation; kernel [C_out,C_in,kh,kw], or
// [C,1,kh,kw] with depthwise=true. Dense path runs as im2col + gemm.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, bool depthwise = false) {
  if (input.rank() != 3) throw Error("conv2d: input must be [C,H,W], got " + shape_str(input.shape));
  if (kernel.rank() != 4) throw Error("conv2d: kernel must be rank-4, got " + shape_str(kernel.shape));
  int cin = input.shape[0], h = input.shape[1], w = input.shape[2];
  int kh = kernel.shape[2], kw = kernel.shape[3];
  if (kh % 2 == 0 || kw % 2 == 0)
    throw Error("conv2d: kernel extents must be odd, got " + shape_str(kernel.shape));
  int cout = kernel.shape[0];
  if (depthwise) {
    if (kernel.shape[1] != 1 || cout != cin)
      throw Error("conv2d: depthwise kernel must be [C,1,kh,kw] with C==C_in");
  } else if (kernel.shape[1] != cin) {
    throw Error("conv2d: kernel C_in " + std::to_string(kernel.shape[1]) +
                " does not match input C " + std::to_string(cin));
  }
  int ph = kh / 2, pw = kw / 2, p = h * w;
  Tape* tape = detail::joint_tape({&input, &kernel});
  Tensor out = detail::make_output({cout, h, w}, tape);

  if (depthwise) {
    const auto& xv = *input.data;
    auto& yv = *out.data;
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          double wv = (*kernel.data)[(static_cast<size_t>(c) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          int dy = ky - ph, dx = kx - pw;
          int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = y0; y < y1; ++y) {
            size_t orow = static_cast<size_t>(c) * p + static_cast<size_t>(y) * w;
            size_t irow = static_cast<size_t>(c) * p + static_cast<size_t>(y + dy) * w + dx;
            for (int x = x0; x < x1; ++x) yv[orow + x] += wv * xv[irow + x];
          }
        }
    int xid = input.id, kid = kernel.id;
    auto xd = input.data, kd = kernel.data;
    detail::finish(out, tape, [=](Tape& t, const std::vector<double>& gy) {
      std::vector<double>* gx = xid >= 0 ? &t.acc(xid) : nullptr;
      std::vector<double>* gk_buf = kid >= 0 ? &t.acc(kid) : nullptr;
      for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int dy = ky - ph, dx = kx - pw;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            double wv = (*kd)[(static_cast<size_t>(c) * kh + ky) * kw + kx];
            double gk = 0.0;
            for (int y = y0; y < y1; ++y) {
              size_t orow = static_cast<size_t>(c) * p + static_cast<size_t>(y) * w;
              size_t irow = static_cast<size_t>(c) * p + static_cast<size_t>(y + dy) * w + dx;
              for (int x = x0; x < x1; ++x) {
                gk += gy[orow + x] * (*xd)[irow + x];
                if (gx) (*gx)[irow + x] += gy[orow + x] * wv;
              }
            }
            if (gk_buf) (*gk_buf)[(static_cast<size_t>(c) * kh + ky) * kw + kx] += gk;
          }
    });
    return out;
  }

  if (kh == 1 && kw == 1) {
    // 1x1 dense conv is a plain [C_out,C_in] x [C_in,H*W] product
    detail::CMatMap K(kernel.data->data(), cout, cin);
    detail::CMatMap X(input.data->data(), cin, p);
    detail::MatMap(out.data->data(), cout, p).noalias() = K * X;
    int xid = input.id, kid = kernel.id;
    auto xd = input.data, kd = kernel.data;
    detail::finish(out, tape, [=](Tape& t, const std::vector<double>& gy) {
      detail::CMatMap G(gy.data(), cout, p);
      if (kid >= 0) {
        detail::CMatMap X(xd->data(), cin, p);
        detail::MatMap(t.acc(kid).data(), cout, cin).noalias() += G * X.transpose();
      }
      if (xid >= 0) {
        detail::CMatMap K(kd->data(), cout, cin);
        detail::MatMap(t.acc(xid).data(), cin, p).noalias() += K.transpose() * G;
      }
    });
    return out;
  }

  // dense: col is [C_in*kh*kw, H*W]
  int kdim = cin * kh * kw;
  auto col = std::make_shared<detail::RowMat>(kdim, p);
  {
    const auto& xv = *input.data;
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          int row = (c * kh + ky) * kw + kx;
          int dy = ky - ph, dx = kx - pw;
          int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
          for (int y = 0; y < h; ++y) {
            int sy = y + dy;
            double* dst = col->data() + static_cast<size_t>(row) * p + static_cast<size_t>(y) * w;
            if (sy < 0 || sy >= h) {
              std::fill(dst, dst + w, 0.0);
              continue;
            }
            const double* src = xv.data() + static_cast<size_t>(c) * p + static_cast<size_t>(sy) * w;
            std::fill(dst, dst + x0, 0.0);
            std::copy(src + x0 + dx, src + x1 + dx, dst + x0);
            std::fill(dst + x1, dst + w, 0.0);
          }
        }
    detail::CMatMap K(kernel.data->data(), cout, kdim);
    detail::MatMap Y(out.data->data(), cout, p);
    Y.noalias() = K * (*col);
  }
  int xid = input.id, kid = kernel.id;
  auto kd = kernel.data;
  detail::finish(out, tape, [=](Tape& t, const std::vector<double>& gy) {
    detail::CMatMap G(gy.data(), cout, p);
    if (kid >= 0) {
      detail::MatMap GK(t.acc(kid).data(), cout, kdim);
      GK.noalias() += G * col->transpose();
    }
    if (xid >= 0) {
      detail::RowMat gcol(kdim, p);
      detail::CMatMap K(kd->data(), cout, kdim);
      gcol.noalias() = K.transpose() * G;
      auto& gx = t.acc(xid);
      for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            int row = (c * kh + ky) * kw + kx;
            int dy = ky - ph, dx = kx - pw;
            int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int y = y0; y < y1; ++y) {
              const double* src = gcol.data() + static_cast<size_t>(row) * p + static_cast<size_t>(y) * w;
              double* dst = gx.data() + static_cast<size_t>(c) * p + static_cast<size_t>(y + dy) * w + dx;
              for (int x = x0; x < x1; ++x) dst[x] += src[x];
            }
          }
    }
  });
  return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw Error("global_avg_pool expects [C,H,W], got " + shape_str(x.shape));
  int c = x.shape[0], p = x.shape[1] * x.shape[2];
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({c}, tape);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int i = 0; i < p; ++i) acc += (*x.data)[static_cast<size_t>(ch) * p + i];
    (*out.data)[static_cast<size_t>(ch)] = acc / p;
  }
  int xid = x.id;
  detail::finish(out, tape, [xid, c, p](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (int ch = 0; ch < c; ++ch) {
      double g = gy[static_cast<size_t>(ch)] / p;
      for (int i = 0; i < p; ++i) gx[static_cast<size_t>(ch) * p + i] += g;
    }
  });
  return out;
}

// half-pixel-center bilinear resize, [C,h,w] -> [C,H,W]
inline Tensor bilinear_upsample(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3) throw Error("bilinear_upsample expects [C,h,w], got " + shape_str(x.shape));
  if (out_h <= 0 || out_w <= 0) throw Error("bilinear_upsample: target extents must be positive");
  int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  if (out_h < h || out_w < w) throw Error("bilinear_upsample: target smaller than source");
  struct Lerp {
    int i0, i1;
    double w0, w1;
  };
  auto axis_weights = [](int src, int dst) {
    std::vector<Lerp> ws(static_cast<size_t>(dst));
    for (int d = 0; d < dst; ++d) {
      double s = (d + 0.5) * static_cast<double>(src) / dst - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      int i0 = static_cast<int>(std::floor(s));
      int i1 = std::min(i0 + 1, src - 1);
      double f = s - i0;
      ws[static_cast<size_t>(d)] = {i0, i1, 1.0 - f, f};
    }
    return ws;
  };
  auto wy = std::make_shared<std::vector<Lerp>>(axis_weights(h, out_h));
  auto wx = std::make_shared<std::vector<Lerp>>(axis_weights(w, out_w));
  Tape* tape = detail::joint_tape({&x});
  Tensor out = detail::make_output({c, out_h, out_w}, tape);
  {
    const auto& xv = *x.data;
    auto& yv = *out.data;
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = xv.data() + static_cast<size_t>(ch) * h * w;
      double* oplane = yv.data() + static_cast<size_t>(ch) * out_h * out_w;
      for (int y = 0; y < out_h; ++y) {
        const Lerp& ly = (*wy)[static_cast<size_t>(y)];
        for (int xo = 0; xo < out_w; ++xo) {
          const Lerp& lx = (*wx)[static_cast<size_t>(xo)];
          oplane[static_cast<size_t>(y) * out_w + xo] =
              ly.w0 * (lx.w0 * plane[static_cast<size_t>(ly.i0) * w + lx.i0] +
                       lx.w1 * plane[static_cast<size_t>(ly.i0) * w + lx.i1]) +
              ly.w1 * (lx.w0 * plane[static_cast<size_t>(ly.i1) * w + lx.i0] +
                       lx.w1 * plane[static_cast<size_t>(ly.i1) * w + lx.i1]);
        }
      }
    }
  }
  int xid = x.id;
  detail::finish(out, tape, [xid, wy, wx, c, h, w, out_h, out_w](Tape& t, const std::vector<double>& gy) {
    if (xid < 0) return;
    auto& gx = t.acc(xid);
    for (int ch = 0; ch < c; ++ch) {
      double* gplane = gx.data() + static_cast<size_t>(ch) * h * w;
      const double* goplane = gy.data() + static_cast<size_t>(ch) * out_h * out_w;
      for (int y = 0; y < out_h; ++y) {
        const Lerp& ly = (*wy)[static_cast<size_t>(y)];
        for (int xo = 0; xo < out_w; ++xo) {
          const Lerp& lx = (*wx)[static_cast<size_t>(xo)];
          double g = goplane[static_cast<size_t>(y) * out_w + xo];
          gplane[static_cast<size_t>(ly.i0) * w + lx.i0] += g * ly.w0 * lx.w0;
          gplane[static_cast<size_t>(ly.i0) * w + lx.i1] += g * ly.w0 * lx.w1;
          gplane[static_cast<size_t>(ly.i1) * w + lx.i0] += g * ly.w1 * lx.w0;
          gplane[static_cast<size_t>(ly.i1) * w + lx.i1] += g * ly.w1 * lx.w1;
        }
      }
    }
  });
  return out;
}

}  // namespace kag
