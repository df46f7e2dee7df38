#pragma once

#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "duo/route.hpp"
#include "duo/tensor.hpp"

namespace duo {

enum class SkipScope { FfnOnly, WholeBlock };

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DuoConfig {
  std::size_t n_layers = 6;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff_big = 512;
  std::size_t d_ff_small = 32;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 256;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  bool tied_embeddings = true;
  SkipScope skip_scope = SkipScope::FfnOnly;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0)
      throw ConfigError("DuoConfig: zero-sized dimension");
    if (d_model % n_heads != 0) throw ConfigError("DuoConfig: d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("DuoConfig: head dim must be even for rotary embeddings");
    if (n_layers > 0 && d_ff_big != 16 * d_ff_small)
      std::fprintf(stderr, "[duo] warning: d_ff_big (%zu) != 16 x d_ff_small (%zu)\n", d_ff_big, d_ff_small);
  }

  std::size_t head_dim() const { return d_model / n_heads; }

  static DuoConfig paper_scale() {
    DuoConfig c;
    c.n_layers = 12;
    c.d_model = 2560;
    c.n_heads = 20;
    c.d_ff_big = 10240;
    c.d_ff_small = 640;
    c.vocab_size = 32000;
    c.max_seq_len = 2048;
    return c;
  }
};

struct ParamCount {
  std::size_t attention = 0;
  std::size_t big_ffn = 0;
  std::size_t small_ffn = 0;
  std::size_t embeddings = 0;
  std::size_t norms = 0;
  std::size_t total = 0;
};

inline ParamCount count_params(const DuoConfig& c) {
  ParamCount n;
  n.attention = c.n_layers * 4 * c.d_model * c.d_model;
  n.big_ffn = c.n_layers * 3 * c.d_model * c.d_ff_big;
  n.small_ffn = c.n_layers * 3 * c.d_model * c.d_ff_small;
  n.embeddings = c.vocab_size * c.d_model * (c.tied_embeddings ? 1 : 2);
  n.norms = c.n_layers * 2 * c.d_model + c.d_model;
  n.total = n.attention + n.big_ffn + n.small_ffn + n.embeddings + n.norms;
  return n;
}

template <class T>
struct FfnWeights {
  Tensor<T> gate, up, down;  // d x f, d x f, f x d
};

template <class T>
struct LayerParams {
  Tensor<T> wq, wk, wv, wo;  // d x d
  Tensor<T> attn_norm, ffn_norm;
  FfnWeights<T> big, small;
};

template <class T>
struct DuoParams {
  DuoConfig config;
  Tensor<T> embedding;  // vocab x d
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> lm_head;  // vocab x d, only when untied

  // Stable named iteration order, shared by the optimizer and checkpointing.
  void for_each(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("embedding", embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& L = layers[l];
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "attn_norm", L.attn_norm);
      fn(p + "ffn_norm", L.ffn_norm);
      fn(p + "big.gate", L.big.gate);
      fn(p + "big.up", L.big.up);
      fn(p + "big.down", L.big.down);
      fn(p + "small.gate", L.small.gate);
      fn(p + "small.up", L.small.up);
      fn(p + "small.down", L.small.down);
    }
    fn("final_norm", final_norm);
    if (!config.tied_embeddings) fn("lm_head", lm_head);
  }
  void for_each(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
    const_cast<DuoParams*>(this)->for_each(
        [&](const std::string& n, Tensor<T>& t) { fn(n, t); });
  }

  std::size_t allocated_params() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  template <class U>
  DuoParams<U> cast() const {
    DuoParams<U> out;
    out.config = config;
    out.embedding = embedding.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    for (const auto& L : layers) {
      LayerParams<U> o;
      o.wq = L.wq.template cast<U>();
      o.wk = L.wk.template cast<U>();
      o.wv = L.wv.template cast<U>();
      o.wo = L.wo.template cast<U>();
      o.attn_norm = L.attn_norm.template cast<U>();
      o.ffn_norm = L.ffn_norm.template cast<U>();
      o.big = {L.big.gate.template cast<U>(), L.big.up.template cast<U>(), L.big.down.template cast<U>()};
      o.small = {L.small.gate.template cast<U>(), L.small.up.template cast<U>(), L.small.down.template cast<U>()};
      out.layers.push_back(std::move(o));
    }
    return out;
  }
};

// Scaled-normal init (std 0.02); residual-output projections additionally
// scaled by 1/sqrt(2 * n_layers). Norm gains start at one.
template <class T>
DuoParams<T> init_params(const DuoConfig& c, std::uint64_t seed) {
  c.validate();
  DuoParams<T> p;
  p.config = c;
  Rng rng(seed);
  const double std_base = 0.02;
  const double resid_scale = c.n_layers > 0 ? 1.0 / std::sqrt(2.0 * static_cast<double>(c.n_layers)) : 1.0;
  auto normal_fill = [&](Tensor<T>& t, std::vector<std::size_t> shape, double std) {
    t = Tensor<T>(std::move(shape));
    for (auto& x : t.data) x = static_cast<T>(rng.normal() * std);
  };
  const std::size_t d = c.d_model;
  normal_fill(p.embedding, {c.vocab_size, d}, std_base);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerParams<T> L;
    normal_fill(L.wq, {d, d}, std_base);
    normal_fill(L.wk, {d, d}, std_base);
    normal_fill(L.wv, {d, d}, std_base);
    normal_fill(L.wo, {d, d}, std_base * resid_scale);
    L.attn_norm = Tensor<T>::full({d}, T(1));
    L.ffn_norm = Tensor<T>::full({d}, T(1));
    normal_fill(L.big.gate, {d, c.d_ff_big}, std_base);
    normal_fill(L.big.up, {d, c.d_ff_big}, std_base);
    normal_fill(L.big.down, {c.d_ff_big, d}, std_base * resid_scale);
    normal_fill(L.small.gate, {d, c.d_ff_small}, std_base);
    normal_fill(L.small.up, {d, c.d_ff_small}, std_base);
    normal_fill(L.small.down, {c.d_ff_small, d}, std_base * resid_scale);
    p.layers.push_back(std::move(L));
  }
  p.final_norm = Tensor<T>::full({d}, T(1));
  if (!c.tied_embeddings) normal_fill(p.lm_head, {c.vocab_size, d}, std_base);
  return p;
}

}  // namespace duo
