#pragma once

#include <fstream>

#include "duo/checkpoint.hpp"
#include "duo/corpus.hpp"
#include "duo/graph.hpp"
#include "duo/infer.hpp"

namespace duo {

enum class Regime { FromScratch, FrozenBig };

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 256;
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  double p_big = 0.5;
  Regime regime = Regime::FromScratch;
  std::uint64_t seed_init = 1;
  std::uint64_t seed_data = 2;
  std::uint64_t seed_routing = 3;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string checkpoint_dir;        // empty: no checkpoints written
  double lr_min_frac = 0.1;

  void validate() const {
    if (p_big < 0.0 || p_big > 1.0) throw ConfigError("TrainConfig: p_big must be in [0,1]");
    if (steps == 0 || batch_size == 0 || seq_len == 0) throw ConfigError("TrainConfig: zero-sized run");
  }

  double lr_at(std::size_t step) const {
    if (step < warmup_steps) return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    const double lr_min = lr * lr_min_frac;
    if (steps <= warmup_steps) return lr;
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(steps - warmup_steps);
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
  }
};

// Routing policy used for training-time route draws and evaluation.
struct RoutePolicy {
  enum class Kind { AllSmall, AllBig, RandomBernoulli, FixedRow, FromSpec };
  Kind kind = Kind::AllBig;
  double p_big = 0.5;
  std::uint64_t seed = 0;
  LayerRoutes row;
  RouteSpec spec;

  static RoutePolicy all_small() { return {Kind::AllSmall, 0, 0, {}, {}}; }
  static RoutePolicy all_big() { return {Kind::AllBig, 0, 0, {}, {}}; }
  static RoutePolicy random_bernoulli(double p, std::uint64_t seed) {
    return {Kind::RandomBernoulli, p, seed, {}, {}};
  }
  static RoutePolicy fixed(LayerRoutes r) { return {Kind::FixedRow, 0, 0, std::move(r), {}}; }
  static RoutePolicy from_spec(RouteSpec s) { return {Kind::FromSpec, 0, 0, {}, std::move(s)}; }

  // Route for window `window_index` of a deterministic stream.
  RouteSpec make(std::size_t positions, std::size_t n_layers, std::uint64_t window_index = 0) const {
    switch (kind) {
      case Kind::AllSmall: return RouteSpec::uniform(positions, n_layers, RouteChoice::Small);
      case Kind::AllBig: return RouteSpec::uniform(positions, n_layers, RouteChoice::Big);
      case Kind::FixedRow: return RouteSpec::from_row(positions, row);
      case Kind::FromSpec:
        if (spec.positions() != positions || spec.n_layers != n_layers)
          throw ShapeError("RoutePolicy::FromSpec: spec shape mismatch");
        return spec;
      case Kind::RandomBernoulli: {
        Rng rng(Rng::mix(seed, window_index));
        RouteSpec s(positions, n_layers);
        for (auto& e : s.entries) e = rng.bernoulli(p_big) ? RouteChoice::Big : RouteChoice::Small;
        return s;
      }
    }
    throw ContractError("RoutePolicy: unreachable");
  }
};

namespace detail {

inline std::vector<std::pair<std::string, Tensor<float>*>> flatten(DuoParams<float>& p) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  p.for_each([&](const std::string& n, Tensor<float>& t) { out.emplace_back(n, &t); });
  return out;
}

}  // namespace detail

// Decoupled-weight-decay Adam over the model tensors. Decay applies to
// matrices other than the embedding table; never to norm gains.
class AdamW {
 public:
  AdamW(const DuoParams<float>& shape_like, const TrainConfig& cfg) : cfg_(cfg) {
    m_ = shape_like;
    v_ = shape_like;
    m_.for_each([](const std::string&, Tensor<float>& t) { t.fill(0); });
    v_.for_each([](const std::string&, Tensor<float>& t) { t.fill(0); });
  }

  void step(DuoParams<float>& params, DuoParams<float>& grads, double lr, std::size_t t,
            const std::function<bool(const std::string&)>& trainable) {
    auto ps = detail::flatten(params);
    auto gs = detail::flatten(grads);
    auto ms = detail::flatten(m_);
    auto vs = detail::flatten(v_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t + 1));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t + 1));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!trainable(ps[i].first)) continue;
      const bool decay = ps[i].second->rank() == 2 && ps[i].first != "embedding";
      auto& p = ps[i].second->data;
      auto& g = gs[i].second->data;
      auto& m = ms[i].second->data;
      auto& v = vs[i].second->data;
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j]);
        v[j] = static_cast<float>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j]);
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        double upd = mh / (std::sqrt(vh) + 1e-8);
        if (decay) upd += cfg_.weight_decay * p[j];
        p[j] = static_cast<float>(p[j] - lr * upd);
      }
    }
  }

 private:
  TrainConfig cfg_;
  DuoParams<float> m_, v_;
};

struct LossCurvePoint {
  std::size_t step;
  double loss;
  double lr;
};

inline void write_loss_curve(const std::vector<LossCurvePoint>& curve, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "step,loss,lr\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", p.step, p.loss, p.lr);
    f << buf;
  }
}

inline bool trainable_in_regime(const std::string& name, Regime regime) {
  if (regime == Regime::FromScratch) return true;
  return name.find("small.") != std::string::npos;
}

// Stage-1 training: per (position, layer) the route is drawn Big with
// probability p_big, Small otherwise. In the FrozenBig regime only the
// small FFN triples receive updates.
inline std::vector<LossCurvePoint> stage1_train(DuoParams<float>& params, const TrainConfig& cfg,
                                                const TokenizedCorpus& corpus) {
  cfg.validate();
  const DuoConfig& mc = params.config;
  if (cfg.seq_len > mc.max_seq_len) throw ConfigError("TrainConfig: seq_len exceeds max_seq_len");
  BatchStream stream(corpus, cfg.seq_len, cfg.batch_size, cfg.seed_data);
  AdamW opt(params, cfg);
  DuoParams<float> grads = params;
  std::vector<LossCurvePoint> curve;
  auto trainable = [&](const std::string& n) { return trainable_in_regime(n, cfg.regime); };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto batch = stream.next();
    grads.for_each([](const std::string&, Tensor<float>& t) { t.fill(0); });
    double loss_sum = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      Rng rng(Rng::mix(cfg.seed_routing, step, b));
      RouteSpec route(cfg.seq_len, mc.n_layers);
      for (auto& e : route.entries) e = rng.bernoulli(cfg.p_big) ? RouteChoice::Big : RouteChoice::Small;
      Tape<float> tape;
      auto gp = GraphParams<float>::bind(tape, params);
      typename Tape<float>::Id loss;
      try {
        loss = build_ce_loss(tape, build_forward(tape, gp, mc, batch.inputs[b], route), batch.targets[b]);
      } catch (const NumericError&) {
        std::ofstream dump("nan_batch_dump.txt", std::ios::trunc);
        dump << "step " << step << " sequence " << b << "\ntokens:";
        for (int id : batch.inputs[b]) dump << " " << id;
        dump << "\n";
        throw;
      }
      const double l = tape.val(loss).data[0];
      if (!std::isfinite(l)) {
        std::ofstream dump("nan_batch_dump.txt", std::ios::trunc);
        dump << "step " << step << " sequence " << b << " loss " << l << "\ntokens:";
        for (int id : batch.inputs[b]) dump << " " << id;
        dump << "\n";
        throw NumericError("stage1_train: non-finite loss at step " + std::to_string(step));
      }
      loss_sum += l;
      tape.backward(loss);
      gp.accumulate_grads(tape, grads, 1.0f / static_cast<float>(cfg.batch_size));
    }
    // global-norm clip over trainable tensors
    double norm_sq = 0;
    grads.for_each([&](const std::string& n, Tensor<float>& g) {
      if (!trainable(n)) return;
      for (auto x : g.data) norm_sq += static_cast<double>(x) * x;
    });
    const double norm = std::sqrt(norm_sq);
    if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
      const float s = static_cast<float>(cfg.grad_clip / norm);
      grads.for_each([&](const std::string&, Tensor<float>& g) {
        for (auto& x : g.data) x *= s;
      });
    }
    const double lr = cfg.lr_at(step);
    opt.step(params, grads, lr, step, trainable);
    curve.push_back({step, loss_sum / cfg.batch_size, lr});

    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save_checkpoint(params, cfg.checkpoint_dir + "/checkpoint_step" + std::to_string(step + 1) + ".duo");
  }
  if (!cfg.checkpoint_dir.empty()) save_checkpoint(params, cfg.checkpoint_dir + "/checkpoint.duo");
  return curve;
}

// Consecutive non-overlapping windows over a holdout corpus.
inline std::vector<std::vector<int>> holdout_windows(const TokenizedCorpus& corpus, std::size_t seq_len,
                                                     std::size_t max_windows = 0) {
  if (corpus.ids.size() < seq_len + 1) throw ContractError("holdout smaller than seq_len+1");
  std::vector<std::vector<int>> out;
  for (std::size_t start = 0; start + seq_len + 1 <= corpus.ids.size() + 1; start += seq_len) {
    if (start + seq_len + 1 > corpus.ids.size()) break;
    out.emplace_back(corpus.ids.begin() + start, corpus.ids.begin() + start + seq_len + 1);
    if (max_windows && out.size() >= max_windows) break;
  }
  return out;
}

// exp(mean next-token cross-entropy) over the holdout under a policy.
inline double eval_ppl(const DuoParams<float>& params, const TokenizedCorpus& holdout,
                       const RoutePolicy& policy, std::size_t seq_len, std::size_t max_windows = 0) {
  auto windows = holdout_windows(holdout, seq_len, max_windows);
  if (windows.empty()) throw ContractError("eval_ppl: empty holdout");
  double total = 0;
  std::size_t count = 0;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    std::vector<int> inputs(windows[w].begin(), windows[w].end() - 1);
    std::vector<int> targets(windows[w].begin() + 1, windows[w].end());
    auto route = policy.make(inputs.size(), params.config.n_layers, w);
    auto logits = forward_full(params, inputs, route);
    for (auto l : per_position_ce(logits, targets)) {
      total += l;
      ++count;
    }
  }
  return std::exp(total / static_cast<double>(count));
}

}  // namespace duo
