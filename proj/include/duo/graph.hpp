#pragma once

#include "duo/model.hpp"
#include "duo/tape.hpp"

// Builds training graphs on a Tape from DuoParams. The bound DuoParams must
// outlive the tape (leaves hold references, not copies).

namespace duo {

template <class T>
struct GraphParams {
  using Id = typename Tape<T>::Id;
  struct Layer {
    Id wq, wk, wv, wo, attn_norm, ffn_norm;
    Id big_gate, big_up, big_down, small_gate, small_up, small_down;
  };
  Id embedding = 0;
  std::vector<Layer> layers;
  Id final_norm = 0;
  Id lm_head = Tape<T>::kNone;

  static GraphParams bind(Tape<T>& tape, const DuoParams<T>& p) {
    GraphParams g;
    g.embedding = tape.param(p.embedding);
    for (const auto& L : p.layers) {
      Layer gl;
      gl.wq = tape.param(L.wq);
      gl.wk = tape.param(L.wk);
      gl.wv = tape.param(L.wv);
      gl.wo = tape.param(L.wo);
      gl.attn_norm = tape.param(L.attn_norm);
      gl.ffn_norm = tape.param(L.ffn_norm);
      gl.big_gate = tape.param(L.big.gate);
      gl.big_up = tape.param(L.big.up);
      gl.big_down = tape.param(L.big.down);
      gl.small_gate = tape.param(L.small.gate);
      gl.small_up = tape.param(L.small.up);
      gl.small_down = tape.param(L.small.down);
      g.layers.push_back(gl);
    }
    g.final_norm = tape.param(p.final_norm);
    if (!p.config.tied_embeddings) g.lm_head = tape.param(p.lm_head);
    return g;
  }

  // Add this tape's gradients into `grads` (same layout as the params),
  // scaled by `scale`. Order is fixed by the for_each layout.
  void accumulate_grads(Tape<T>& tape, DuoParams<T>& grads, T scale) const {
    std::vector<Id> ids;
    ids.push_back(embedding);
    for (const auto& L : layers) {
      for (Id id : {L.wq, L.wk, L.wv, L.wo, L.attn_norm, L.ffn_norm, L.big_gate, L.big_up, L.big_down,
                    L.small_gate, L.small_up, L.small_down})
        ids.push_back(id);
    }
    ids.push_back(final_norm);
    if (lm_head != Tape<T>::kNone) ids.push_back(lm_head);
    std::size_t idx = 0;
    grads.for_each([&](const std::string&, Tensor<T>& g) {
      const Tensor<T>& tg = tape.grad(ids[idx++]);
      for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += scale * tg.data[i];
    });
  }
};

// Hard-routed forward on the tape; returns the logits node.
template <class T>
typename Tape<T>::Id build_forward(Tape<T>& tape, const GraphParams<T>& gp, const DuoConfig& c,
                                   const std::vector<int>& tokens, const RouteSpec& route) {
  using Id = typename Tape<T>::Id;
  const std::size_t t = tokens.size();
  if (route.positions() != t || route.n_layers != c.n_layers)
    throw ShapeError("build_forward: route shape mismatch");
  Id h = tape.embed(gp.embedding, tokens);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = gp.layers[l];
    std::vector<RouteChoice> col(t);
    std::vector<char> keep(t, 1);
    for (std::size_t i = 0; i < t; ++i) {
      col[i] = route.at(i, l);
      if (c.skip_scope == SkipScope::WholeBlock && col[i] == RouteChoice::Skip) keep[i] = 0;
    }
    Id normed = tape.rms_norm(h, L.attn_norm, T(c.norm_eps));
    Id q = tape.matmul(normed, L.wq);
    Id k = tape.matmul(normed, L.wk);
    Id v = tape.matmul(normed, L.wv);
    Id att = tape.rope_attention(q, k, v, c.n_heads, T(c.rope_theta));
    Id proj = tape.matmul(att, L.wo);
    if (c.skip_scope == SkipScope::WholeBlock) proj = tape.mask_rows(proj, keep);
    h = tape.add(h, proj);
    Id f = tape.rms_norm(h, L.ffn_norm, T(c.norm_eps));
    Id ffn = tape.routed_ffn(f, L.big_gate, L.big_up, L.big_down, L.small_gate, L.small_up,
                             L.small_down, col);
    h = tape.add(h, ffn);
  }
  Id fin = tape.rms_norm(h, gp.final_norm, T(c.norm_eps));
  const Id out_w = c.tied_embeddings ? gp.embedding : gp.lm_head;
  return tape.matmul_nt(fin, out_w);
}

// Mean next-token cross-entropy for a (tokens, targets) window.
template <class T>
typename Tape<T>::Id build_ce_loss(Tape<T>& tape, typename Tape<T>::Id logits,
                                   const std::vector<int>& targets) {
  return tape.mean(tape.cross_entropy(logits, targets));
}

}  // namespace duo
