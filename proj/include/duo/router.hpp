#pragma once

#include <fstream>
#include <map>

#include "duo/corpus.hpp"
#include "duo/graph.hpp"
#include "duo/infer.hpp"

namespace duo {

// Learned per-layer routers. Each layer owns a d_model x n_choices matrix;
// the gate input is the post-norm FFN input and column order follows
// RouteChoice (Small, Big[, Skip]).
struct RouterParams {
  std::vector<Tensor<float>> W;  // per layer, [d_model x n_choices]
  bool allow_skip = false;

  std::size_t n_choices() const { return allow_skip ? 3 : 2; }
  static constexpr std::size_t kBigCol = 1;

  static RouterParams init(const DuoConfig& c, bool allow_skip, std::uint64_t seed) {
    RouterParams r;
    r.allow_skip = allow_skip;
    Rng rng(seed);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      Tensor<float> w({c.d_model, allow_skip ? std::size_t(3) : std::size_t(2)});
      for (auto& x : w.data) x = static_cast<float>(rng.normal() * 0.02);
      r.W.push_back(std::move(w));
    }
    return r;
  }
};

// Sharpness schedule for the tempered gate softmax(beta * logits): beta
// rises linearly from beta_start to beta_end over the run, so early steps
// mix branches nearly uniformly and late steps approach hard routing.
struct TemperatureSchedule {
  double beta_start = 1.0;
  double beta_end = 20.0;

  double beta_at(std::size_t step, std::size_t total_steps) const {
    if (beta_end < beta_start) throw ConfigError("TemperatureSchedule: beta must not decrease");
    if (total_steps <= 1) return beta_end;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return beta_start + (beta_end - beta_start) * t;
  }
};

struct RouterTrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 4;
  std::size_t seq_len = 64;
  double lr = 1e-2;
  std::size_t warmup_steps = 10;
  double alpha = 1.0;    // weight of the budget term
  double budget = 0.5;   // target mean big-probability
  bool allow_skip = false;
  bool train_base = false;  // default: base model frozen, only routers move
  TemperatureSchedule schedule;
  std::uint64_t seed_init = 101;
  std::uint64_t seed_data = 102;

  void validate() const {
    if (budget < 0.0 || budget > 1.0) throw ConfigError("RouterTrainConfig: budget must be in [0,1]");
    if (alpha < 0.0) throw ConfigError("RouterTrainConfig: alpha must be non-negative");
    if (steps == 0 || batch_size == 0 || seq_len == 0) throw ConfigError("RouterTrainConfig: zero-sized run");
  }
};

// Plain-tensor reference of the tape's budget penalty:
// mean_i ((1/L) sum_l P_l[i,big] - budget)^2.
template <class T>
double budget_loss_value(const std::vector<Tensor<T>>& p_layers, double budget,
                         std::size_t big_col = RouterParams::kBigCol) {
  const std::size_t L = p_layers.size(), t = p_layers[0].rows();
  double loss = 0;
  for (std::size_t i = 0; i < t; ++i) {
    double m = 0;
    for (const auto& p : p_layers) m += p.at(i, big_col);
    const double dv = m / static_cast<double>(L) - budget;
    loss += dv * dv;
  }
  return loss / static_cast<double>(t);
}

struct RouterCurvePoint {
  std::size_t step;
  double ce, budget_loss, soft_budget, beta;
};

inline void write_router_curves(const std::vector<RouterCurvePoint>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "step,ce,budget_loss,soft_budget,beta\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", p.step, p.ce, p.budget_loss,
                  p.soft_budget, p.beta);
    f << buf;
  }
}

namespace detail {

// Soft-mixed forward: every layer's FFN output is the gate-weighted sum of
// the small and big branches (and a zero branch when skip is allowed).
// Returns the logits node and appends each layer's gate-probability node.
template <class T>
typename Tape<T>::Id build_soft_forward(Tape<T>& tape, const GraphParams<T>& gp,
                                        const std::vector<typename Tape<T>::Id>& router_w,
                                        const DuoConfig& c, const std::vector<int>& tokens, T beta,
                                        std::vector<typename Tape<T>::Id>& gate_probs_out) {
  using Id = typename Tape<T>::Id;
  const std::size_t t = tokens.size();
  Id h = tape.embed(gp.embedding, tokens);
  const std::vector<RouteChoice> all_small(t, RouteChoice::Small);
  const std::vector<RouteChoice> all_big(t, RouteChoice::Big);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = gp.layers[l];
    Id normed = tape.rms_norm(h, L.attn_norm, T(c.norm_eps));
    Id q = tape.matmul(normed, L.wq);
    Id k = tape.matmul(normed, L.wk);
    Id v = tape.matmul(normed, L.wv);
    Id att = tape.rope_attention(q, k, v, c.n_heads, T(c.rope_theta));
    h = tape.add(h, tape.matmul(att, L.wo));
    Id f = tape.rms_norm(h, L.ffn_norm, T(c.norm_eps));
    Id p = tape.softmax_rows(tape.scale(tape.matmul(f, router_w[l]), beta));
    gate_probs_out.push_back(p);
    Id small_h = tape.routed_ffn(f, L.big_gate, L.big_up, L.big_down, L.small_gate, L.small_up,
                                 L.small_down, all_small);
    Id big_h = tape.routed_ffn(f, L.big_gate, L.big_up, L.big_down, L.small_gate, L.small_up,
                               L.small_down, all_big);
    std::vector<Id> branches = {small_h, big_h};
    if (tape.val(p).cols() == 3) branches.push_back(Tape<T>::kNone);  // skip: zero delta
    h = tape.add(h, tape.mixture(p, branches));
  }
  Id fin = tape.rms_norm(h, gp.final_norm, T(c.norm_eps));
  const Id out_w = c.tied_embeddings ? gp.embedding : gp.lm_head;
  return tape.matmul_nt(fin, out_w);
}

}  // namespace detail

// Stage-3 router training: minimizes CE + alpha * budget penalty with soft
// branch mixing under the annealed sharpness beta. The base model is frozen
// unless cfg.train_base is set.
inline std::vector<RouterCurvePoint> train_router(DuoParams<float>& params, RouterParams& router,
                                                  const RouterTrainConfig& cfg,
                                                  const TokenizedCorpus& corpus) {
  cfg.validate();
  const DuoConfig& mc = params.config;
  if (router.W.size() != mc.n_layers) throw ShapeError("train_router: router layer count mismatch");
  if (cfg.allow_skip != router.allow_skip) throw ContractError("train_router: allow_skip mismatch");
  if (cfg.allow_skip && mc.skip_scope == SkipScope::WholeBlock)
    throw ContractError("train_router: soft mixing supports skip only under ffn_only scope");

  BatchStream stream(corpus, cfg.seq_len, cfg.batch_size, cfg.seed_data);
  // Adam state for the router matrices (and the base, if unfrozen).
  std::vector<Tensor<float>> rm, rv, rgrad;
  for (const auto& w : router.W) {
    rm.emplace_back(w.shape);
    rv.emplace_back(w.shape);
    rgrad.emplace_back(w.shape);
  }
  DuoParams<float> bgrad, bm, bv;
  if (cfg.train_base) {
    bgrad = bm = bv = params;
    for (auto* p : {&bgrad, &bm, &bv})
      p->for_each([](const std::string&, Tensor<float>& t) { t.fill(0); });
  }

  std::vector<RouterCurvePoint> curve;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double beta = cfg.schedule.beta_at(step, cfg.steps);
    auto batch = stream.next();
    for (auto& g : rgrad) g.fill(0);
    if (cfg.train_base) bgrad.for_each([](const std::string&, Tensor<float>& t) { t.fill(0); });
    double ce_sum = 0, bp_sum = 0, soft_sum = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      Tape<float> tape;
      auto gp = GraphParams<float>::bind(tape, params);
      std::vector<Tape<float>::Id> wids;
      for (const auto& w : router.W) wids.push_back(tape.param(w));
      std::vector<Tape<float>::Id> probs;
      auto logits = detail::build_soft_forward(tape, gp, wids, mc, batch.inputs[b],
                                               static_cast<float>(beta), probs);
      auto ce = build_ce_loss(tape, logits, batch.targets[b]);
      auto bp = tape.budget_penalty(probs, RouterParams::kBigCol, static_cast<float>(cfg.budget));
      auto loss = tape.add_scaled(ce, bp, static_cast<float>(cfg.alpha));
      const double lval = tape.val(loss).data[0];
      if (!std::isfinite(lval))
        throw NumericError("train_router: non-finite loss at step " + std::to_string(step));
      ce_sum += tape.val(ce).data[0];
      bp_sum += tape.val(bp).data[0];
      for (auto p : probs) {
        const auto& vp = tape.val(p);
        for (std::size_t i = 0; i < vp.rows(); ++i) soft_sum += vp.at(i, RouterParams::kBigCol);
      }
      tape.backward(loss);
      const float sc = 1.0f / static_cast<float>(cfg.batch_size);
      for (std::size_t l = 0; l < wids.size(); ++l) {
        const auto& g = tape.grad(wids[l]);
        for (std::size_t j = 0; j < g.numel(); ++j) rgrad[l].data[j] += sc * g.data[j];
      }
      if (cfg.train_base) gp.accumulate_grads(tape, bgrad, sc);
    }
    // Adam update (no weight decay on the tiny router matrices)
    const double lr = step < cfg.warmup_steps
                          ? cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps)
                          : cfg.lr;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(0.95, static_cast<double>(step + 1));
    auto adam = [&](Tensor<float>& p, const Tensor<float>& g, Tensor<float>& m, Tensor<float>& v) {
      for (std::size_t j = 0; j < p.numel(); ++j) {
        m.data[j] = static_cast<float>(0.9 * m.data[j] + 0.1 * g.data[j]);
        v.data[j] = static_cast<float>(0.95 * v.data[j] + 0.05 * g.data[j] * g.data[j]);
        p.data[j] -= static_cast<float>(lr * (m.data[j] / bc1) / (std::sqrt(v.data[j] / bc2) + 1e-8));
      }
    };
    for (std::size_t l = 0; l < router.W.size(); ++l) adam(router.W[l], rgrad[l], rm[l], rv[l]);
    if (cfg.train_base) {
      std::vector<Tensor<float>*> ps, gs, ms, vs;
      params.for_each([&](const std::string&, Tensor<float>& t) { ps.push_back(&t); });
      bgrad.for_each([&](const std::string&, Tensor<float>& t) { gs.push_back(&t); });
      bm.for_each([&](const std::string&, Tensor<float>& t) { ms.push_back(&t); });
      bv.for_each([&](const std::string&, Tensor<float>& t) { vs.push_back(&t); });
      for (std::size_t i = 0; i < ps.size(); ++i) adam(*ps[i], *gs[i], *ms[i], *vs[i]);
    }
    const double n_probs = static_cast<double>(cfg.batch_size * cfg.seq_len * mc.n_layers);
    curve.push_back({step, ce_sum / cfg.batch_size, bp_sum / cfg.batch_size, soft_sum / n_probs, beta});
  }
  return curve;
}

// Hard routing at inference: per layer, per position, take the argmax gate
// column (ties resolved to the lower column, i.e. Small < Big < Skip).
inline RouteSpec route_with_router(const DuoParams<float>& params, const RouterParams& router,
                                   const std::vector<int>& tokens) {
  const DuoConfig& c = params.config;
  if (router.W.size() != c.n_layers) throw ShapeError("route_with_router: layer count mismatch");
  const std::size_t t = tokens.size(), d = c.d_model;
  if (t > c.max_seq_len) throw ContractError("route_with_router: sequence exceeds max_seq_len");
  if (router.allow_skip && c.skip_scope == SkipScope::WholeBlock)
    throw ContractError("route_with_router: skip routing requires ffn_only scope");
  const std::size_t nc = router.n_choices();
  RouteSpec route(t, c.n_layers);

  Tensor<float> h({t, d});
  for (std::size_t i = 0; i < t; ++i)
    std::memcpy(h.row(i), params.embedding.row(tokens[i]), sizeof(float) * d);
  Tensor<float> normed({t, d}), q({t, d}), k({t, d}), v({t, d}), att({t, d}), proj({t, d});
  const std::size_t hd = c.head_dim();
  const float invs = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(t), logits(nc);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = params.layers[l];
    for (std::size_t i = 0; i < t; ++i)
      kern::rms_norm_row(h.row(i), L.attn_norm.data.data(), normed.row(i), d, float(c.norm_eps));
    kern::matmul_nn(normed.data.data(), L.wq.data.data(), q.data.data(), t, d, d);
    kern::matmul_nn(normed.data.data(), L.wk.data.data(), k.data.data(), t, d, d);
    kern::matmul_nn(normed.data.data(), L.wv.data.data(), v.data.data(), t, d, d);
    for (std::size_t i = 0; i < t; ++i) {
      kern::rope_row(q.row(i), c.n_heads, hd, i, float(c.rope_theta), +1);
      kern::rope_row(k.row(i), c.n_heads, hd, i, float(c.rope_theta), +1);
    }
    for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
      const std::size_t off = hh * hd;
      for (std::size_t i = 0; i < t; ++i) {
        const float* qi = q.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const float* kj = k.row(j) + off;
          float acc = 0;
          for (std::size_t p = 0; p < hd; ++p) acc += qi[p] * kj[p];
          scores[j] = acc * invs;
        }
        kern::softmax_row(scores.data(), scores.data(), i + 1);
        float* oi = att.row(i) + off;
        for (std::size_t p = 0; p < hd; ++p) oi[p] = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          const float a = scores[j];
          const float* vj = v.row(j) + off;
          for (std::size_t p = 0; p < hd; ++p) oi[p] += a * vj[p];
        }
      }
    }
    kern::matmul_nn(att.data.data(), L.wo.data.data(), proj.data.data(), t, d, d);
    for (std::size_t i = 0; i < t; ++i) {
      float* hi = h.row(i);
      const float* pi = proj.row(i);
      for (std::size_t j = 0; j < d; ++j) hi[j] += pi[j];
    }
    for (std::size_t i = 0; i < t; ++i) {
      kern::rms_norm_row(h.row(i), L.ffn_norm.data.data(), normed.row(i), d, float(c.norm_eps));
      kern::matmul_nn(normed.row(i), router.W[l].data.data(), logits.data(), 1, d, nc);
      std::size_t best = 0;
      for (std::size_t cc = 1; cc < nc; ++cc)
        if (logits[cc] > logits[best]) best = cc;  // strict: ties stay at the lower column
      route.at(i, l) = static_cast<RouteChoice>(best);
      if (route.at(i, l) != RouteChoice::Skip) {
        const FfnWeights<float>& w = route.at(i, l) == RouteChoice::Big ? L.big : L.small;
        Tensor<float> y({1, d});
        detail::swiglu_rows(normed.row(i), w, y.data.data(), 1, d);
        float* hi = h.row(i);
        for (std::size_t j = 0; j < d; ++j) hi[j] += y.data[j];
      }
    }
  }
  return route;
}

// Perplexity of the hard-routed model over a holdout, plus the realized
// fraction of Big choices.
struct RouterEval {
  double ppl = 0;
  double realized_budget = 0;
};

inline RouterEval eval_router(const DuoParams<float>& params, const RouterParams& router,
                              const std::vector<std::vector<int>>& windows) {
  if (windows.empty()) throw ContractError("eval_router: no windows");
  double total = 0;
  std::size_t count = 0, bigs = 0, entries = 0;
  for (const auto& w : windows) {
    std::vector<int> inputs(w.begin(), w.end() - 1);
    std::vector<int> targets(w.begin() + 1, w.end());
    auto route = route_with_router(params, router, inputs);
    for (auto ch : route.entries) {
      if (ch == RouteChoice::Big) ++bigs;
      ++entries;
    }
    auto logits = forward_full(params, inputs, route);
    for (auto l : per_position_ce(logits, targets)) {
      total += l;
      ++count;
    }
  }
  return {std::exp(total / static_cast<double>(count)),
          static_cast<double>(bigs) / static_cast<double>(entries)};
}

// Router checkpoint payload helpers: router matrices ride in the extras
// section under router.layer{l}.W.
inline std::map<std::string, Tensor<float>> router_extras(const RouterParams& r) {
  std::map<std::string, Tensor<float>> out;
  for (std::size_t l = 0; l < r.W.size(); ++l) out["router.layer" + std::to_string(l) + ".W"] = r.W[l];
  return out;
}

inline RouterParams router_from_extras(const std::map<std::string, Tensor<float>>& extras,
                                       const DuoConfig& c) {
  RouterParams r;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto it = extras.find("router.layer" + std::to_string(l) + ".W");
    if (it == extras.end()) throw ContractError("router_from_extras: missing layer " + std::to_string(l));
    r.W.push_back(it->second);
  }
  r.allow_skip = r.W[0].cols() == 3;
  return r;
}

}  // namespace duo
