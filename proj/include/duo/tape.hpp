#pragma once

#include <array>
#include <functional>
#include <memory>

#include "duo/kernels.hpp"
#include "duo/route.hpp"
#include "duo/tensor.hpp"

namespace duo {

// Reverse-mode tape. Nodes are recorded in topological order as a side
// effect of building the forward graph; backward replays them once, in
// reverse. Parameter leaves reference external tensors so that per-step
// tapes never copy the model weights.
template <class T>
class Tape {
 public:
  using Id = std::uint32_t;
  static constexpr Id kNone = static_cast<Id>(-1);

  Id param(const Tensor<T>& external) {
    nodes_.push_back(Node{});
    nodes_.back().ext = &external;
    return static_cast<Id>(nodes_.size() - 1);
  }

  Id constant(Tensor<T> v) {
    nodes_.push_back(Node{});
    nodes_.back().val = std::move(v);
    return static_cast<Id>(nodes_.size() - 1);
  }

  const Tensor<T>& val(Id id) const {
    const Node& n = nodes_[id];
    return n.ext ? *n.ext : n.val;
  }

  Tensor<T>& grad(Id id) {
    Node& n = nodes_[id];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(val(id).shape);
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    return record(std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      axpy(t.grad(a), g, T(1));
      axpy(t.grad(b), g, T(1));
    });
  }

  Id mul(Id a, Id b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
    return record(std::move(out), [a, b](Tape& t, const Tensor<T>& g) {
      auto& ga = t.grad(a);
      auto& gb = t.grad(b);
      const auto& va = t.val(a);
      const auto& vb2 = t.val(b);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga.data[i] += g.data[i] * vb2.data[i];
        gb.data[i] += g.data[i] * va.data[i];
      }
    });
  }

  Id scale(Id a, T s) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x *= s;
    return record(std::move(out), [a, s](Tape& t, const Tensor<T>& g) {
      axpy(t.grad(a), g, s);
    });
  }

  // c = a + alpha * b (shapes must match; used for composite losses)
  Id add_scaled(Id a, Id b, T alpha) {
    check_same(a, b, "add_scaled");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += alpha * vb.data[i];
    return record(std::move(out), [a, b, alpha](Tape& t, const Tensor<T>& g) {
      axpy(t.grad(a), g, T(1));
      axpy(t.grad(b), g, alpha);
    });
  }

  Id silu(Id a) {
    Tensor<T> out = val(a);
    for (auto& x : out.data) x = kern::silu(x);
    return record(std::move(out), [a](Tape& t, const Tensor<T>& g) {
      auto& ga = t.grad(a);
      const auto& va = t.val(a);
      for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] += g.data[i] * kern::silu_grad(va.data[i]);
    });
  }

  // ---- reductions ----

  Id sum(Id a) {
    T s = 0;
    for (auto x : val(a).data) s += x;
    return record(Tensor<T>::scalar(s), [a](Tape& t, const Tensor<T>& g) {
      auto& ga = t.grad(a);
      for (auto& x : ga.data) x += g.data[0];
    });
  }

  Id mean(Id a) {
    const std::size_t n = val(a).numel();
    T s = 0;
    for (auto x : val(a).data) s += x;
    return record(Tensor<T>::scalar(s / T(n)), [a, n](Tape& t, const Tensor<T>& g) {
      auto& ga = t.grad(a);
      const T gi = g.data[0] / T(n);
      for (auto& x : ga.data) x += gi;
    });
  }

  // ---- linear algebra ----

  Id matmul(Id a, Id b) {
    const auto& va = val(a);
    const auto& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
      throw ShapeError("matmul: incompatible shapes " + shape_str(va.shape) + " * " + shape_str(vb.shape));
    const std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor<T> out({m, n});
    kern::matmul_nn(va.data.data(), vb.data.data(), out.data.data(), m, k, n);
    return record(std::move(out), [a, b, m, k, n](Tape& t, const Tensor<T>& g) {
      kern::matmul_nt_acc(g.data.data(), t.val(b).data.data(), t.grad(a).data.data(), m, n, k);
      kern::matmul_tn_acc(t.val(a).data.data(), g.data.data(), t.grad(b).data.data(), m, k, n);
    });
  }

  // c = a * b^T, with a [m x k], b [n x k]
  Id matmul_nt(Id a, Id b) {
    const auto& va = val(a);
    const auto& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[1])
      throw ShapeError("matmul_nt: incompatible shapes " + shape_str(va.shape) + " * " + shape_str(vb.shape) + "^T");
    const std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[0];
    Tensor<T> out({m, n});
    kern::matmul_nt(va.data.data(), vb.data.data(), out.data.data(), m, k, n);
    return record(std::move(out), [a, b, m, k, n](Tape& t, const Tensor<T>& g) {
      // da += g * b ; db += g^T * a
      kern::matmul_nn_acc(g.data.data(), t.val(b).data.data(), t.grad(a).data.data(), m, n, k);
      kern::matmul_tn_acc(g.data.data(), t.val(a).data.data(), t.grad(b).data.data(), m, n, k);
    });
  }

  // ---- rows / normalization ----

  Id softmax_rows(Id a) {
    const auto& va = val(a);
    if (!va.all_finite()) throw NumericError("softmax_rows: non-finite input");
    Tensor<T> out(va.shape);
    const std::size_t r = va.rows(), c = va.cols();
    for (std::size_t i = 0; i < r; ++i) kern::softmax_row(va.row(i), out.row(i), c);
    return record(std::move(out), [a, r, c](Tape& t, const Tensor<T>& g, const Tensor<T>& y) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < r; ++i) {
        const T* yi = y.row(i);
        const T* gi = g.row(i);
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += yi[j] * gi[j];
        T* gai = ga.row(i);
        for (std::size_t j = 0; j < c; ++j) gai[j] += yi[j] * (gi[j] - dot);
      }
    });
  }

  Id rms_norm(Id x, Id gain, T eps) {
    const auto& vx = val(x);
    const auto& vg = val(gain);
    const std::size_t d = vx.cols();
    if (vg.numel() != d) throw ShapeError("rms_norm: gain size mismatch");
    const std::size_t r = vx.rows();
    Tensor<T> out(vx.shape);
    auto rinv = std::make_shared<std::vector<T>>(r);
    for (std::size_t i = 0; i < r; ++i)
      (*rinv)[i] = kern::rms_norm_row(vx.row(i), vg.data.data(), out.row(i), d, eps);
    return record(std::move(out), [x, gain, r, d, rinv](Tape& t, const Tensor<T>& g) {
      auto& gx = t.grad(x);
      auto& gg = t.grad(gain);
      const auto& vx2 = t.val(x);
      const auto& vg2 = t.val(gain);
      for (std::size_t i = 0; i < r; ++i) {
        const T rr = (*rinv)[i];
        const T* xi = vx2.row(i);
        const T* gi = g.row(i);
        T dot = 0;  // sum_j g_j * gain_j * x_j
        for (std::size_t j = 0; j < d; ++j) {
          gg.data[j] += gi[j] * xi[j] * rr;
          dot += gi[j] * vg2.data[j] * xi[j];
        }
        const T coef = dot * rr * rr * rr / T(d);
        T* gxi = gx.row(i);
        for (std::size_t j = 0; j < d; ++j) gxi[j] += gi[j] * vg2.data[j] * rr - coef * xi[j];
      }
    });
  }

  // ---- embedding / loss ----

  Id embed(Id table, std::vector<int> ids) {
    const auto& vt = val(table);
    const std::size_t d = vt.cols();
    const std::size_t t = ids.size();
    Tensor<T> out({t, d});
    for (std::size_t i = 0; i < t; ++i) {
      const int id = ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= vt.rows())
        throw ContractError("embed: token id out of range");
      std::memcpy(out.row(i), vt.row(id), sizeof(T) * d);
    }
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    return record(std::move(out), [table, d, ids_p](Tape& t, const Tensor<T>& g) {
      auto& gt = t.grad(table);
      for (std::size_t i = 0; i < ids_p->size(); ++i) {
        T* dst = gt.row((*ids_p)[i]);
        const T* src = g.row(i);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }

  // Per-position next-token loss in nats: out[i] = -log softmax(logits[i])[targets[i]].
  Id cross_entropy(Id logits, std::vector<int> targets) {
    const auto& vl = val(logits);
    const std::size_t t = vl.rows(), v = vl.cols();
    if (targets.size() != t) throw ShapeError("cross_entropy: target count mismatch");
    auto probs = std::make_shared<Tensor<T>>(vl.shape);
    Tensor<T> out({t});
    for (std::size_t i = 0; i < t; ++i) {
      const int y = targets[i];
      if (y < 0 || static_cast<std::size_t>(y) >= v) throw ContractError("cross_entropy: target out of range");
      kern::softmax_row(vl.row(i), probs->row(i), v);
      out.data[i] = -std::log(probs->at(i, y));
    }
    auto tg = std::make_shared<std::vector<int>>(std::move(targets));
    return record(std::move(out), [logits, t, v, probs, tg](Tape& tp, const Tensor<T>& g) {
      auto& gl = tp.grad(logits);
      for (std::size_t i = 0; i < t; ++i) {
        const T gi = g.data[i];
        if (gi == T(0)) continue;
        const T* pi = probs->row(i);
        T* gli = gl.row(i);
        for (std::size_t j = 0; j < v; ++j) gli[j] += gi * pi[j];
        gli[(*tg)[i]] -= gi;
      }
    });
  }

  // ---- attention ----

  // Causal multi-head attention with rotary embeddings applied to q and k.
  // q, k, v: [t x d]; positions are 0..t-1.
  Id rope_attention(Id q, Id k, Id v, std::size_t n_heads, T theta) {
    const auto& vq = val(q);
    const auto& vk = val(k);
    const auto& vv = val(v);
    const std::size_t t = vq.rows(), d = vq.cols();
    if (!vk.same_shape(vq) || !vv.same_shape(vq)) throw ShapeError("rope_attention: q/k/v shape mismatch");
    if (d % n_heads != 0) throw ShapeError("rope_attention: d not divisible by heads");
    const std::size_t hd = d / n_heads;
    const T invs = T(1) / std::sqrt(T(hd));

    auto qr = std::make_shared<Tensor<T>>(vq);
    auto kr = std::make_shared<Tensor<T>>(vk);
    for (std::size_t i = 0; i < t; ++i) {
      kern::rope_row(qr->row(i), n_heads, hd, i, theta, +1);
      kern::rope_row(kr->row(i), n_heads, hd, i, theta, +1);
    }
    // attention probabilities, [n_heads x t x t], lower-triangular rows
    auto probs = std::make_shared<Tensor<T>>(std::vector<std::size_t>{n_heads, t, t});
    Tensor<T> out({t, d});
    std::vector<T> srow(t);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * hd;
      T* ph = probs->data.data() + h * t * t;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          const T* qi = qr->row(i) + off;
          const T* kj = kr->row(j) + off;
          T acc = 0;
          for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kj[p];
          srow[j] = acc * invs;
        }
        T* pr = ph + i * t;
        kern::softmax_row(srow.data(), pr, i + 1);
        T* oi = out.row(i) + off;
        for (std::size_t p = 0; p < hd; ++p) oi[p] = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T a = pr[j];
          const T* vj = vv.row(j) + off;
          for (std::size_t p = 0; p < hd; ++p) oi[p] += a * vj[p];
        }
      }
    }
    return record(std::move(out), [q, k, v, n_heads, hd, t, invs, theta, qr, kr, probs](
                                      Tape& tp, const Tensor<T>& g) {
      const std::size_t d = n_heads * hd;
      Tensor<T> dqr({t, d}), dkr({t, d});
      auto& gv = tp.grad(v);
      const auto& vv2 = tp.val(v);
      std::vector<T> da(t);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        const T* ph = probs->data.data() + h * t * t;
        for (std::size_t i = 0; i < t; ++i) {
          const T* pr = ph + i * t;
          const T* gi = g.row(i) + off;
          // dA_ij = g_i . v_j ; softmax backward over row
          T dot = 0;
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = vv2.row(j) + off;
            T acc = 0;
            for (std::size_t p = 0; p < hd; ++p) acc += gi[p] * vj[p];
            da[j] = acc;
            dot += pr[j] * acc;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = pr[j] * (da[j] - dot) * invs;
            // dqr_i += ds * kr_j ; dkr_j += ds * qr_i ; dv_j += A_ij * g_i
            const T* kj = kr->row(j) + off;
            const T* qi = qr->row(i) + off;
            T* dqi = dqr.row(i) + off;
            T* dkj = dkr.row(j) + off;
            T* gvj = gv.row(j) + off;
            const T a = pr[j];
            for (std::size_t p = 0; p < hd; ++p) {
              dqi[p] += ds * kj[p];
              dkj[p] += ds * qi[p];
              gvj[p] += a * gi[p];
            }
          }
        }
      }
      // pull gradients back through the rotation (inverse rotation)
      auto& gq = tp.grad(q);
      auto& gk = tp.grad(k);
      for (std::size_t i = 0; i < t; ++i) {
        kern::rope_row(dqr.row(i), n_heads, hd, i, theta, -1);
        kern::rope_row(dkr.row(i), n_heads, hd, i, theta, -1);
        axpy_row(gq.row(i), dqr.row(i), d);
        axpy_row(gk.row(i), dkr.row(i), d);
      }
    });
  }

  // ---- routed FFN ----

  // Per-row SwiGLU dispatch: rows routed Big go through the big triple,
  // Small through the small triple, Skip rows produce zero (the residual
  // add outside turns that into an identity FFN sub-block).
  Id routed_ffn(Id x, Id big_gate, Id big_up, Id big_down, Id small_gate, Id small_up, Id small_down,
                const std::vector<RouteChoice>& routes) {
    const auto& vx = val(x);
    const std::size_t t = vx.rows(), d = vx.cols();
    if (routes.size() != t) throw ShapeError("routed_ffn: route length mismatch");
    Tensor<T> out({t, d});
    auto caches = std::make_shared<std::array<FfnPack, 2>>();
    for (int which = 0; which < 2; ++which) {
      const RouteChoice want = which == 0 ? RouteChoice::Small : RouteChoice::Big;
      const Id wg = which == 0 ? small_gate : big_gate;
      const Id wu = which == 0 ? small_up : big_up;
      const Id wd = which == 0 ? small_down : big_down;
      FfnPack& pk = (*caches)[which];
      for (std::size_t i = 0; i < t; ++i)
        if (routes[i] == want) pk.rows.push_back(i);
      if (pk.rows.empty()) continue;
      const std::size_t r = pk.rows.size();
      const std::size_t f = val(wg).shape[1];
      pk.x = Tensor<T>({r, d});
      for (std::size_t i = 0; i < r; ++i) std::memcpy(pk.x.row(i), vx.row(pk.rows[i]), sizeof(T) * d);
      pk.a = Tensor<T>({r, f});
      pk.b = Tensor<T>({r, f});
      pk.h = Tensor<T>({r, f});
      kern::matmul_nn(pk.x.data.data(), val(wg).data.data(), pk.a.data.data(), r, d, f);
      kern::matmul_nn(pk.x.data.data(), val(wu).data.data(), pk.b.data.data(), r, d, f);
      for (std::size_t i = 0; i < r * f; ++i) pk.h.data[i] = kern::silu(pk.a.data[i]) * pk.b.data[i];
      Tensor<T> y({r, d});
      kern::matmul_nn(pk.h.data.data(), val(wd).data.data(), y.data.data(), r, f, d);
      for (std::size_t i = 0; i < r; ++i) std::memcpy(out.row(pk.rows[i]), y.row(i), sizeof(T) * d);
    }
    return record(std::move(out), [x, big_gate, big_up, big_down, small_gate, small_up, small_down, d,
                                   caches](Tape& tp, const Tensor<T>& g) {
      for (int which = 0; which < 2; ++which) {
        const Id wg = which == 0 ? small_gate : big_gate;
        const Id wu = which == 0 ? small_up : big_up;
        const Id wd = which == 0 ? small_down : big_down;
        FfnPack& pk = (*caches)[which];
        if (pk.rows.empty()) continue;
        const std::size_t r = pk.rows.size();
        const std::size_t f = pk.a.shape[1];
        Tensor<T> gy({r, d});
        for (std::size_t i = 0; i < r; ++i) std::memcpy(gy.row(i), g.row(pk.rows[i]), sizeof(T) * d);
        // y = h * Wd
        kern::matmul_tn_acc(pk.h.data.data(), gy.data.data(), tp.grad(wd).data.data(), r, f, d);
        Tensor<T> gh({r, f});
        kern::matmul_nt(gy.data.data(), tp.val(wd).data.data(), gh.data.data(), r, d, f);
        Tensor<T> ga({r, f}), gb({r, f});
        for (std::size_t i = 0; i < r * f; ++i) {
          ga.data[i] = gh.data[i] * pk.b.data[i] * kern::silu_grad(pk.a.data[i]);
          gb.data[i] = gh.data[i] * kern::silu(pk.a.data[i]);
        }
        kern::matmul_tn_acc(pk.x.data.data(), ga.data.data(), tp.grad(wg).data.data(), r, d, f);
        kern::matmul_tn_acc(pk.x.data.data(), gb.data.data(), tp.grad(wu).data.data(), r, d, f);
        Tensor<T> gx({r, d});
        kern::matmul_nt(ga.data.data(), tp.val(wg).data.data(), gx.data.data(), r, f, d);
        kern::matmul_nt_acc(gb.data.data(), tp.val(wu).data.data(), gx.data.data(), r, f, d);
        auto& gxx = tp.grad(x);
        for (std::size_t i = 0; i < r; ++i) axpy_row(gxx.row(pk.rows[i]), gx.row(i), d);
      }
    });
  }

  // Zero the rows where keep[i] is false; gradient is masked the same way.
  Id mask_rows(Id x, std::vector<char> keep) {
    const auto& vx = val(x);
    const std::size_t t = vx.rows(), d = vx.cols();
    if (keep.size() != t) throw ShapeError("mask_rows: mask length mismatch");
    Tensor<T> out = vx;
    for (std::size_t i = 0; i < t; ++i)
      if (!keep[i]) std::memset(out.row(i), 0, sizeof(T) * d);
    auto kp = std::make_shared<std::vector<char>>(std::move(keep));
    return record(std::move(out), [x, d, kp](Tape& t, const Tensor<T>& g) {
      auto& gx = t.grad(x);
      for (std::size_t i = 0; i < kp->size(); ++i)
        if ((*kp)[i]) axpy_row(gx.row(i), g.row(i), d);
    });
  }

  // out[i,:] = sum_c P[i,c] * H_c[i,:]. A kNone entry contributes zero
  // (the identity/pass-through branch under FFN-only skip).
  Id mixture(Id p, const std::vector<Id>& hs) {
    const auto& vp = val(p);
    const std::size_t t = vp.rows(), c = vp.cols();
    if (hs.size() != c) throw ShapeError("mixture: choice count mismatch");
    std::size_t d = 0;
    for (auto h : hs)
      if (h != kNone) d = val(h).cols();
    Tensor<T> out({t, d});
    for (std::size_t ci = 0; ci < c; ++ci) {
      if (hs[ci] == kNone) continue;
      const auto& vh = val(hs[ci]);
      for (std::size_t i = 0; i < t; ++i) {
        const T w = vp.at(i, ci);
        const T* hi = vh.row(i);
        T* oi = out.row(i);
        for (std::size_t j = 0; j < d; ++j) oi[j] += w * hi[j];
      }
    }
    auto hs_p = std::make_shared<std::vector<Id>>(hs);
    return record(std::move(out), [p, hs_p, t, c, d](Tape& tp, const Tensor<T>& g) {
      auto& gp = tp.grad(p);
      for (std::size_t ci = 0; ci < c; ++ci) {
        if ((*hs_p)[ci] == kNone) continue;
        const auto& vh = tp.val((*hs_p)[ci]);
        auto& gh = tp.grad((*hs_p)[ci]);
        const auto& vp2 = tp.val(p);
        for (std::size_t i = 0; i < t; ++i) {
          const T* gi = g.row(i);
          const T* hi = vh.row(i);
          T* ghi = gh.row(i);
          T acc = 0;
          const T w = vp2.at(i, ci);
          for (std::size_t j = 0; j < d; ++j) {
            acc += gi[j] * hi[j];
            ghi[j] += w * gi[j];
          }
          gp.at(i, ci) += acc;
        }
      }
    });
  }

  // Squared deviation of the layer-mean big-probability from the target,
  // averaged over positions: mean_i ((1/L) sum_l P_l[i,big] - budget)^2.
  Id budget_penalty(const std::vector<Id>& p_layers, std::size_t big_col, T budget) {
    const std::size_t L = p_layers.size();
    const std::size_t t = val(p_layers[0]).rows();
    auto m = std::make_shared<std::vector<T>>(t, T(0));
    for (auto p : p_layers) {
      const auto& vp = val(p);
      for (std::size_t i = 0; i < t; ++i) (*m)[i] += vp.at(i, big_col);
    }
    T loss = 0;
    for (std::size_t i = 0; i < t; ++i) {
      (*m)[i] /= T(L);
      const T dvt = (*m)[i] - budget;
      loss += dvt * dvt;
    }
    loss /= T(t);
    auto ps = std::make_shared<std::vector<Id>>(p_layers);
    return record(Tensor<T>::scalar(loss), [ps, big_col, budget, m, L, t](Tape& tp, const Tensor<T>& g) {
      const T g0 = g.data[0];
      for (auto p : *ps) {
        auto& gp = tp.grad(p);
        for (std::size_t i = 0; i < t; ++i)
          gp.at(i, big_col) += g0 * T(2) * ((*m)[i] - budget) / (T(L) * T(t));
      }
    });
  }

  // ---- backward ----

  void backward(Id loss) {
    if (val(loss).numel() != 1) throw ContractError("backward: loss must be scalar");
    grad(loss).data[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back) continue;
      if (n.grad.numel() == 0) continue;  // never reached from the loss
      n.back(*this, n.grad);
    }
  }

 private:
  struct FfnPack {
    std::vector<std::size_t> rows;
    Tensor<T> x, a, b, h;
  };

  struct Node {
    const Tensor<T>* ext = nullptr;
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Tape&, const Tensor<T>&)> back;
  };

  void check_same(Id a, Id b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                       shape_str(val(b).shape));
  }

  static void axpy(Tensor<T>& dst, const Tensor<T>& src, T alpha) {
    for (std::size_t i = 0; i < src.numel(); ++i) dst.data[i] += alpha * src.data[i];
  }
  static void axpy_row(T* dst, const T* src, std::size_t n) {
    for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
  }

  Id record(Tensor<T> v, std::function<void(Tape&, const Tensor<T>&)> back) {
    if (!v.all_finite()) throw NumericError("tape: non-finite value produced");
    nodes_.push_back(Node{});
    nodes_.back().val = std::move(v);
    nodes_.back().back = std::move(back);
    return static_cast<Id>(nodes_.size() - 1);
  }

  // overload used by softmax_rows which wants its own output in backward
  Id record(Tensor<T> v, std::function<void(Tape&, const Tensor<T>&, const Tensor<T>&)> back) {
    const Id id = record(std::move(v), std::function<void(Tape&, const Tensor<T>&)>{});
    nodes_[id].back = [id, back](Tape& t, const Tensor<T>& g) { back(t, g, t.val(id)); };
    return id;
  }

  std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8).
template <class T>
T finite_difference_check(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                          const Tensor<T>& analytic_grad, T h = T(1e-3)) {
  Tensor<T> xp = x;
  T worst = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = xp.data[i];
    xp.data[i] = orig + h;
    const T fp = f(xp);
    xp.data[i] = orig - h;
    const T fm = f(xp);
    xp.data[i] = orig;
    const T fd = (fp - fm) / (T(2) * h);
    const T err = std::abs(analytic_grad.data[i] - fd) / (std::abs(fd) + T(1e-8));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace duo
