#pragma once

#include <cstring>

#include "duo/kernels.hpp"
#include "duo/model.hpp"
#include "duo/route.hpp"

// Tape-free forward paths. Full-sequence and incremental evaluation share
// the same row-decomposable kernels, so position-by-position decoding
// against a KvCache reproduces the full forward bit for bit.

namespace duo {

template <class T>
struct KvCache {
  std::size_t len = 0;
  std::uint64_t version = 0;
  std::vector<Tensor<T>> k, v;  // per layer, [max_seq x d], rows beyond len are scratch

  static KvCache make(const DuoConfig& c) {
    KvCache cache;
    cache.k.resize(c.n_layers);
    cache.v.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      cache.k[l] = Tensor<T>({c.max_seq_len, c.d_model});
      cache.v[l] = Tensor<T>({c.max_seq_len, c.d_model});
    }
    return cache;
  }

  struct Snapshot {
    std::size_t len;
  };
  Snapshot snapshot() const { return {len}; }
  void restore(Snapshot s) {
    len = s.len;
    ++version;
  }
};

// K/V rows for one position, produced by forward_position but not yet
// committed. Carries the cache state it was produced against so commits
// of stale entries are rejected.
template <class T>
struct PositionEntries {
  std::vector<std::vector<T>> k, v;  // per layer, d values each
  std::size_t produced_len = 0;
  std::uint64_t produced_version = 0;
};

template <class T>
void commit(KvCache<T>& cache, const PositionEntries<T>& e) {
  if (e.produced_len != cache.len || e.produced_version != cache.version)
    throw ContractError("commit: stale cache entries");
  for (std::size_t l = 0; l < cache.k.size(); ++l) {
    const std::size_t d = cache.k[l].cols();
    std::memcpy(cache.k[l].row(cache.len), e.k[l].data(), sizeof(T) * d);
    std::memcpy(cache.v[l].row(cache.len), e.v[l].data(), sizeof(T) * d);
  }
  ++cache.len;
  ++cache.version;
}

namespace detail {

// Causal attention for a batch of rows that all sit at absolute position
// `pos`, attending over `ctx_len` cached rows plus their own k/v.
// q, k, v: [r x d] (already rotated); out: [r x d].
template <class T>
void attend_rows(const T* q, const T* k_self, const T* v_self, const Tensor<T>& k_cache,
                 const Tensor<T>& v_cache, std::size_t ctx_len, T* out, std::size_t r, std::size_t d,
                 std::size_t n_heads) {
  const std::size_t hd = d / n_heads;
  const T invs = T(1) / std::sqrt(T(hd));
  std::vector<T> scores(ctx_len + 1);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * hd;
      const T* qi = q + i * d + off;
      for (std::size_t j = 0; j < ctx_len; ++j) {
        const T* kj = k_cache.row(j) + off;
        T acc = 0;
        for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kj[p];
        scores[j] = acc * invs;
      }
      {
        const T* kj = k_self + i * d + off;
        T acc = 0;
        for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kj[p];
        scores[ctx_len] = acc * invs;
      }
      kern::softmax_row(scores.data(), scores.data(), ctx_len + 1);
      T* oi = out + i * d + off;
      for (std::size_t p = 0; p < hd; ++p) oi[p] = 0;
      for (std::size_t j = 0; j < ctx_len; ++j) {
        const T a = scores[j];
        const T* vj = v_cache.row(j) + off;
        for (std::size_t p = 0; p < hd; ++p) oi[p] += a * vj[p];
      }
      const T a = scores[ctx_len];
      const T* vs = v_self + i * d + off;
      for (std::size_t p = 0; p < hd; ++p) oi[p] += a * vs[p];
    }
  }
}

template <class T>
void swiglu_rows(const T* x, const FfnWeights<T>& w, T* out, std::size_t r, std::size_t d) {
  const std::size_t f = w.gate.shape[1];
  std::vector<T> a(r * f), b(r * f);
  kern::matmul_nn(x, w.gate.data.data(), a.data(), r, d, f);
  kern::matmul_nn(x, w.up.data.data(), b.data(), r, d, f);
  for (std::size_t i = 0; i < r * f; ++i) a[i] = kern::silu(a[i]) * b[i];
  kern::matmul_nn(a.data(), w.down.data.data(), out, r, f, d);
}

}  // namespace detail

// Full-sequence forward under an explicit route. Optionally fills `cache_out`
// with the per-layer rotated keys and values of all positions.
template <class T>
Tensor<T> forward_full(const DuoParams<T>& params, const std::vector<int>& tokens, const RouteSpec& route,
                       KvCache<T>* cache_out = nullptr) {
  const DuoConfig& c = params.config;
  const std::size_t t = tokens.size(), d = c.d_model;
  if (route.positions() != t || route.n_layers != c.n_layers)
    throw ShapeError("forward_full: route shape mismatch");
  if (t > c.max_seq_len) throw ContractError("forward_full: sequence exceeds max_seq_len");

  Tensor<T> h({t, d});
  for (std::size_t i = 0; i < t; ++i) {
    const int id = tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) throw ContractError("forward_full: token out of range");
    std::memcpy(h.row(i), params.embedding.row(id), sizeof(T) * d);
  }

  Tensor<T> normed({t, d}), q({t, d}), k({t, d}), v({t, d}), att({t, d}), proj({t, d});
  const std::size_t hd = c.head_dim();
  const T invs = T(1) / std::sqrt(T(hd));
  std::vector<T> scores(t);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = params.layers[l];
    for (std::size_t i = 0; i < t; ++i)
      kern::rms_norm_row(h.row(i), L.attn_norm.data.data(), normed.row(i), d, T(c.norm_eps));
    kern::matmul_nn(normed.data.data(), L.wq.data.data(), q.data.data(), t, d, d);
    kern::matmul_nn(normed.data.data(), L.wk.data.data(), k.data.data(), t, d, d);
    kern::matmul_nn(normed.data.data(), L.wv.data.data(), v.data.data(), t, d, d);
    for (std::size_t i = 0; i < t; ++i) {
      kern::rope_row(q.row(i), c.n_heads, hd, i, T(c.rope_theta), +1);
      kern::rope_row(k.row(i), c.n_heads, hd, i, T(c.rope_theta), +1);
    }
    if (cache_out) {
      for (std::size_t i = 0; i < t; ++i) {
        std::memcpy(cache_out->k[l].row(i), k.row(i), sizeof(T) * d);
        std::memcpy(cache_out->v[l].row(i), v.row(i), sizeof(T) * d);
      }
    }
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const std::size_t off = hh * hd;
      for (std::size_t i = 0; i < t; ++i) {
        const T* qi = q.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = k.row(j) + off;
          T acc = 0;
          for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kj[p];
          scores[j] = acc * invs;
        }
        kern::softmax_row(scores.data(), scores.data(), i + 1);
        T* oi = att.row(i) + off;
        for (std::size_t p = 0; p < hd; ++p) oi[p] = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T a = scores[j];
          const T* vj = v.row(j) + off;
          for (std::size_t p = 0; p < hd; ++p) oi[p] += a * vj[p];
        }
      }
    }
    kern::matmul_nn(att.data.data(), L.wo.data.data(), proj.data.data(), t, d, d);
    for (std::size_t i = 0; i < t; ++i) {
      const bool whole_skip =
          c.skip_scope == SkipScope::WholeBlock && route.at(i, l) == RouteChoice::Skip;
      if (whole_skip) continue;
      T* hi = h.row(i);
      const T* pi = proj.row(i);
      for (std::size_t j = 0; j < d; ++j) hi[j] += pi[j];
    }
    // FFN sub-block, dispatched per row
    for (std::size_t i = 0; i < t; ++i)
      kern::rms_norm_row(h.row(i), L.ffn_norm.data.data(), normed.row(i), d, T(c.norm_eps));
    for (int which = 0; which < 2; ++which) {
      const RouteChoice want = which == 0 ? RouteChoice::Small : RouteChoice::Big;
      const FfnWeights<T>& w = which == 0 ? L.small : L.big;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < t; ++i)
        if (route.at(i, l) == want) rows.push_back(i);
      if (rows.empty()) continue;
      Tensor<T> xin({rows.size(), d}), y({rows.size(), d});
      for (std::size_t i = 0; i < rows.size(); ++i) std::memcpy(xin.row(i), normed.row(rows[i]), sizeof(T) * d);
      detail::swiglu_rows(xin.data.data(), w, y.data.data(), rows.size(), d);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        T* hi = h.row(rows[i]);
        const T* yi = y.row(i);
        for (std::size_t j = 0; j < d; ++j) hi[j] += yi[j];
      }
    }
  }
  for (std::size_t i = 0; i < t; ++i)
    kern::rms_norm_row(h.row(i), params.final_norm.data.data(), normed.row(i), d, T(c.norm_eps));
  const Tensor<T>& out_w = c.tied_embeddings ? params.embedding : params.lm_head;
  Tensor<T> logits({t, c.vocab_size});
  kern::matmul_nt(normed.data.data(), out_w.data.data(), logits.data.data(), t, d, c.vocab_size);
  if (cache_out) {
    cache_out->len = t;
    ++cache_out->version;
  }
  return logits;
}

// Batched candidate evaluation: every row of `candidates` is a full
// per-layer route for the same next token at position cache.len. Returns
// the next-token loss per candidate; optionally the K/V entries each
// candidate would commit. The cache itself is never mutated.
template <class T>
std::vector<T> evaluate_candidates(const DuoParams<T>& params, const KvCache<T>& cache, int token,
                                   int target, const std::vector<LayerRoutes>& candidates,
                                   std::vector<PositionEntries<T>>* entries_out = nullptr) {
  const DuoConfig& c = params.config;
  const std::size_t r = candidates.size(), d = c.d_model;
  const std::size_t pos = cache.len;
  if (pos >= c.max_seq_len) throw ContractError("evaluate_candidates: cache length exceeds max_seq_len");
  if (token < 0 || static_cast<std::size_t>(token) >= c.vocab_size)
    throw ContractError("evaluate_candidates: token out of range");

  Tensor<T> h({r, d});
  for (std::size_t i = 0; i < r; ++i) std::memcpy(h.row(i), params.embedding.row(token), sizeof(T) * d);

  if (entries_out) {
    entries_out->assign(r, PositionEntries<T>{});
    for (auto& e : *entries_out) {
      e.k.assign(c.n_layers, std::vector<T>(d));
      e.v.assign(c.n_layers, std::vector<T>(d));
      e.produced_len = cache.len;
      e.produced_version = cache.version;
    }
  }

  Tensor<T> normed({r, d}), q({r, d}), k({r, d}), v({r, d}), att({r, d}), proj({r, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = params.layers[l];
    for (std::size_t i = 0; i < r; ++i)
      kern::rms_norm_row(h.row(i), L.attn_norm.data.data(), normed.row(i), d, T(c.norm_eps));
    kern::matmul_nn(normed.data.data(), L.wq.data.data(), q.data.data(), r, d, d);
    kern::matmul_nn(normed.data.data(), L.wk.data.data(), k.data.data(), r, d, d);
    kern::matmul_nn(normed.data.data(), L.wv.data.data(), v.data.data(), r, d, d);
    for (std::size_t i = 0; i < r; ++i) {
      kern::rope_row(q.row(i), c.n_heads, c.head_dim(), pos, T(c.rope_theta), +1);
      kern::rope_row(k.row(i), c.n_heads, c.head_dim(), pos, T(c.rope_theta), +1);
    }
    if (entries_out) {
      for (std::size_t i = 0; i < r; ++i) {
        std::memcpy((*entries_out)[i].k[l].data(), k.row(i), sizeof(T) * d);
        std::memcpy((*entries_out)[i].v[l].data(), v.row(i), sizeof(T) * d);
      }
    }
    detail::attend_rows(q.data.data(), k.data.data(), v.data.data(), cache.k[l], cache.v[l], pos,
                        att.data.data(), r, d, c.n_heads);
    kern::matmul_nn(att.data.data(), L.wo.data.data(), proj.data.data(), r, d, d);
    for (std::size_t i = 0; i < r; ++i) {
      const bool whole_skip =
          c.skip_scope == SkipScope::WholeBlock && candidates[i][l] == RouteChoice::Skip;
      if (whole_skip) continue;
      T* hi = h.row(i);
      const T* pi = proj.row(i);
      for (std::size_t j = 0; j < d; ++j) hi[j] += pi[j];
    }
    for (std::size_t i = 0; i < r; ++i)
      kern::rms_norm_row(h.row(i), L.ffn_norm.data.data(), normed.row(i), d, T(c.norm_eps));
    for (int which = 0; which < 2; ++which) {
      const RouteChoice want = which == 0 ? RouteChoice::Small : RouteChoice::Big;
      const FfnWeights<T>& w = which == 0 ? L.small : L.big;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < r; ++i)
        if (candidates[i][l] == want) rows.push_back(i);
      if (rows.empty()) continue;
      Tensor<T> xin({rows.size(), d}), y({rows.size(), d});
      for (std::size_t i = 0; i < rows.size(); ++i) std::memcpy(xin.row(i), normed.row(rows[i]), sizeof(T) * d);
      detail::swiglu_rows(xin.data.data(), w, y.data.data(), rows.size(), d);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        T* hi = h.row(rows[i]);
        const T* yi = y.row(i);
        for (std::size_t j = 0; j < d; ++j) hi[j] += yi[j];
      }
    }
  }
  for (std::size_t i = 0; i < r; ++i)
    kern::rms_norm_row(h.row(i), params.final_norm.data.data(), normed.row(i), d, T(c.norm_eps));
  const Tensor<T>& out_w = c.tied_embeddings ? params.embedding : params.lm_head;
  Tensor<T> logits({r, c.vocab_size});
  kern::matmul_nt(normed.data.data(), out_w.data.data(), logits.data.data(), r, d, c.vocab_size);

  std::vector<T> losses(r);
  std::vector<T> probs(c.vocab_size);
  for (std::size_t i = 0; i < r; ++i) {
    kern::softmax_row(logits.row(i), probs.data(), c.vocab_size);
    losses[i] = -std::log(probs[target]);
  }
  return losses;
}

// Incremental forward of one token against the committed prefix. The cache
// is read-only; the entries this position would append are returned.
template <class T>
Tensor<T> forward_position(const DuoParams<T>& params, const KvCache<T>& cache, int token,
                           const LayerRoutes& layer_routes, PositionEntries<T>* entries_out = nullptr) {
  const DuoConfig& c = params.config;
  if (layer_routes.size() != c.n_layers) throw ShapeError("forward_position: route length mismatch");
  const std::size_t d = c.d_model, pos = cache.len;
  if (pos >= c.max_seq_len) throw ContractError("forward_position: cache length exceeds max_seq_len");
  Tensor<T> h({1, d});
  std::memcpy(h.row(0), params.embedding.row(token), sizeof(T) * d);
  if (entries_out) {
    entries_out->k.assign(c.n_layers, std::vector<T>(d));
    entries_out->v.assign(c.n_layers, std::vector<T>(d));
    entries_out->produced_len = cache.len;
    entries_out->produced_version = cache.version;
  }
  Tensor<T> normed({1, d}), q({1, d}), k({1, d}), v({1, d}), att({1, d}), proj({1, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = params.layers[l];
    kern::rms_norm_row(h.row(0), L.attn_norm.data.data(), normed.row(0), d, T(c.norm_eps));
    kern::matmul_nn(normed.data.data(), L.wq.data.data(), q.data.data(), 1, d, d);
    kern::matmul_nn(normed.data.data(), L.wk.data.data(), k.data.data(), 1, d, d);
    kern::matmul_nn(normed.data.data(), L.wv.data.data(), v.data.data(), 1, d, d);
    kern::rope_row(q.row(0), c.n_heads, c.head_dim(), pos, T(c.rope_theta), +1);
    kern::rope_row(k.row(0), c.n_heads, c.head_dim(), pos, T(c.rope_theta), +1);
    if (entries_out) {
      std::memcpy(entries_out->k[l].data(), k.row(0), sizeof(T) * d);
      std::memcpy(entries_out->v[l].data(), v.row(0), sizeof(T) * d);
    }
    detail::attend_rows(q.data.data(), k.data.data(), v.data.data(), cache.k[l], cache.v[l], pos,
                        att.data.data(), 1, d, c.n_heads);
    kern::matmul_nn(att.data.data(), L.wo.data.data(), proj.data.data(), 1, d, d);
    const bool whole_skip =
        c.skip_scope == SkipScope::WholeBlock && layer_routes[l] == RouteChoice::Skip;
    if (!whole_skip) {
      for (std::size_t j = 0; j < d; ++j) h.data[j] += proj.data[j];
    }
    kern::rms_norm_row(h.row(0), L.ffn_norm.data.data(), normed.row(0), d, T(c.norm_eps));
    if (layer_routes[l] != RouteChoice::Skip) {
      const FfnWeights<T>& w = layer_routes[l] == RouteChoice::Big ? L.big : L.small;
      Tensor<T> y({1, d});
      detail::swiglu_rows(normed.data.data(), w, y.data.data(), 1, d);
      for (std::size_t j = 0; j < d; ++j) h.data[j] += y.data[j];
    }
  }
  kern::rms_norm_row(h.row(0), params.final_norm.data.data(), normed.row(0), d, T(c.norm_eps));
  const Tensor<T>& out_w = c.tied_embeddings ? params.embedding : params.lm_head;
  Tensor<T> logits({c.vocab_size});
  kern::matmul_nt(normed.data.data(), out_w.data.data(), logits.data.data(), 1, d, c.vocab_size);
  return logits;
}

// Per-position cross-entropy (nats) from full-sequence logits; targets[i]
// is the ground-truth token for position i.
template <class T>
std::vector<T> per_position_ce(const Tensor<T>& logits, const std::vector<int>& targets) {
  const std::size_t t = logits.rows(), v = logits.cols();
  if (targets.size() != t) throw ShapeError("per_position_ce: target count mismatch");
  std::vector<T> out(t);
  std::vector<T> probs(v);
  for (std::size_t i = 0; i < t; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw ContractError("per_position_ce: target out of range");
    kern::softmax_row(logits.row(i), probs.data(), v);
    out[i] = -std::log(probs[targets[i]]);
  }
  return out;
}

}  // namespace duo
