#pragma once

#include <fstream>

#include "duo/oracle.hpp"
#include "duo/router.hpp"
#include "duo/trainer.hpp"

// Comparison and reporting ops: fixed patterns, random-route search, budget
// sweeps, slope schedules, routing statistics, and token difficulty.

namespace duo {

// ---- fixed per-layer patterns ------------------------------------------

struct FixedPatternResult {
  LayerRoutes row;
  double ppl = 0;
  std::vector<std::pair<std::string, double>> all;  // route string -> ppl
};

// Evaluates every admissible per-layer row applied uniformly to all
// positions and returns the best by holdout perplexity.
inline FixedPatternResult best_fixed_pattern(const DuoParams<float>& params,
                                             const std::vector<std::vector<int>>& windows,
                                             const BudgetConstraint& bc) {
  if (windows.empty()) throw ContractError("best_fixed_pattern: no windows");
  const std::size_t L = params.config.n_layers;
  FixedPatternResult res;
  res.ppl = std::numeric_limits<double>::infinity();
  for (const auto& row : enumerate_routes(L, bc)) {
    double total = 0;
    std::size_t count = 0;
    for (const auto& w : windows) {
      std::vector<int> inputs(w.begin(), w.end() - 1);
      std::vector<int> targets(w.begin() + 1, w.end());
      auto logits = forward_full(params, inputs, RouteSpec::from_row(inputs.size(), row));
      for (auto l : per_position_ce(logits, targets)) {
        total += l;
        ++count;
      }
    }
    const double ppl = std::exp(total / static_cast<double>(count));
    std::string name;
    for (auto c : row) name += route_char(c);
    res.all.emplace_back(name, ppl);
    if (ppl < res.ppl) {
      res.ppl = ppl;
      res.row = row;
    }
  }
  return res;
}

// ---- best-of-N random routes -------------------------------------------

struct RandomSearchResult {
  std::vector<double> sample_ppls;
  std::vector<double> running_best;  // running_best[j] = min over samples 0..j
  double best_ppl = 0;
};

// Samples N position-wise random routes with exactly k Big layers per
// position. Sample j draws from the stream mix(seed, j), so a larger N
// extends rather than reshuffles the sample set and the running best is
// monotone non-increasing in N.
inline RandomSearchResult best_of_n_random(const DuoParams<float>& params,
                                           const std::vector<std::vector<int>>& windows,
                                           std::size_t n_samples, std::size_t k_big,
                                           std::uint64_t seed) {
  if (windows.empty() || n_samples == 0) throw ContractError("best_of_n_random: empty input");
  const std::size_t L = params.config.n_layers;
  if (k_big > L) throw ContractError("best_of_n_random: k exceeds layer count");
  RandomSearchResult res;
  res.best_ppl = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n_samples; ++j) {
    Rng rng(Rng::mix(seed, j));
    double total = 0;
    std::size_t count = 0;
    for (const auto& w : windows) {
      std::vector<int> inputs(w.begin(), w.end() - 1);
      std::vector<int> targets(w.begin() + 1, w.end());
      RouteSpec route(inputs.size(), L);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        // uniform k-subset of layers via partial Fisher-Yates
        std::vector<std::size_t> idx(L);
        for (std::size_t l = 0; l < L; ++l) idx[l] = l;
        for (std::size_t l = 0; l < k_big; ++l) std::swap(idx[l], idx[l + rng.below(L - l)]);
        for (std::size_t l = 0; l < k_big; ++l) route.at(i, idx[l]) = RouteChoice::Big;
      }
      auto logits = forward_full(params, inputs, route);
      for (auto l : per_position_ce(logits, targets)) {
        total += l;
        ++count;
      }
    }
    const double ppl = std::exp(total / static_cast<double>(count));
    res.sample_ppls.push_back(ppl);
    res.best_ppl = std::min(res.best_ppl, ppl);
    res.running_best.push_back(res.best_ppl);
  }
  return res;
}

// ---- budget sweep -------------------------------------------------------

struct SweepRow {
  std::size_t k = 0;
  double oracle_ppl = 0, fixed_ppl = 0, router_ppl = 0;  // router_ppl NaN when absent
};

inline double oracle_ppl_over_windows(const DuoParams<float>& params,
                                      const std::vector<std::vector<int>>& windows,
                                      const BudgetConstraint& bc,
                                      OracleMode mode = OracleMode::Committed) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& w : windows) {
    std::vector<int> inputs(w.begin(), w.end() - 1);
    std::vector<int> targets(w.begin() + 1, w.end());
    auto res = oracle_route_sequence(params, inputs, targets, bc, mode);
    for (const auto& tr : res.traces) {
      total += tr.loss_oracle;
      ++count;
    }
  }
  return std::exp(total / static_cast<double>(count));
}

// For every exact big-count k, the oracle perplexity and the best uniform
// fixed pattern at the same budget; with a router, its hard-routed
// perplexity is reported once at the row nearest its realized budget.
inline std::vector<SweepRow> budget_sweep(const DuoParams<float>& params,
                                          const std::vector<std::vector<int>>& windows,
                                          const RouterParams* router = nullptr) {
  const std::size_t L = params.config.n_layers;
  std::vector<SweepRow> rows;
  double router_ppl = std::numeric_limits<double>::quiet_NaN();
  double realized = -1;
  if (router) {
    auto ev = eval_router(params, *router, windows);
    router_ppl = ev.ppl;
    realized = ev.realized_budget;
  }
  for (std::size_t k = 0; k <= L; ++k) {
    SweepRow r;
    r.k = k;
    r.oracle_ppl = oracle_ppl_over_windows(params, windows, BudgetConstraint::exact_big(k));
    r.fixed_ppl = best_fixed_pattern(params, windows, BudgetConstraint::exact_big(k)).ppl;
    r.router_ppl = std::numeric_limits<double>::quiet_NaN();
    if (router && k == static_cast<std::size_t>(std::llround(realized * static_cast<double>(L))))
      r.router_ppl = router_ppl;
    rows.push_back(r);
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "k,oracle_ppl,fixed_ppl,router_ppl\n";
  char buf[128];
  for (const auto& r : rows) {
    if (std::isnan(r.router_ppl))
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,\n", r.k, r.oracle_ppl, r.fixed_ppl);
    else
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", r.k, r.oracle_ppl, r.fixed_ppl,
                    r.router_ppl);
    f << buf;
  }
}

// ---- slope schedules ----------------------------------------------------

// Per-position big counts ramping across the sequence while matching the
// exact total of the constant-k schedule. slope > 0 ramps up, < 0 ramps
// down, 0 is constant.
inline std::vector<std::size_t> make_slope_schedule(std::size_t positions, std::size_t n_layers,
                                                    std::size_t mean_k, int slope) {
  if (mean_k > n_layers) throw ContractError("make_slope_schedule: mean_k exceeds layer count");
  std::vector<std::size_t> s(positions, mean_k);
  if (slope == 0 || positions < 2) return s;
  // ramp in [-1, 1] scaled to stay inside [0, n_layers]
  const std::size_t room = std::min(mean_k, n_layers - mean_k);
  if (room == 0) return s;  // already pinned at a boundary
  long carry = 0;  // running deviation from the constant schedule
  for (std::size_t i = 0; i < positions; ++i) {
    double r = 2.0 * static_cast<double>(i) / static_cast<double>(positions - 1) - 1.0;
    if (slope < 0) r = -r;
    long delta = std::lround(r * static_cast<double>(room));
    s[i] = static_cast<std::size_t>(static_cast<long>(mean_k) + delta);
    carry += delta;
  }
  // repair rounding so the total equals positions * mean_k exactly
  for (std::size_t i = 0; carry != 0 && i < positions; ++i) {
    if (carry > 0 && s[i] > 0 && static_cast<long>(s[i]) > static_cast<long>(mean_k) - static_cast<long>(room)) {
      --s[i];
      --carry;
    } else if (carry < 0 && s[i] < n_layers) {
      ++s[i];
      ++carry;
    }
    if (carry != 0 && i + 1 == positions) i = static_cast<std::size_t>(-1);  // another pass
  }
  return s;
}

struct SlopeResult {
  int slope = 0;
  double mean_budget = 0;  // mean big fraction of the schedule
  double ppl = 0;
};

// Oracle perplexity under ramped per-position budgets vs the constant
// schedule with the identical mean budget.
inline std::vector<SlopeResult> slope_experiment(const DuoParams<float>& params,
                                                 const std::vector<std::vector<int>>& windows,
                                                 std::size_t mean_k,
                                                 const std::vector<int>& slopes = {-1, 0, 1}) {
  if (windows.empty()) throw ContractError("slope_experiment: no windows");
  const std::size_t L = params.config.n_layers;
  const std::size_t positions = windows.front().size() - 1;
  for (const auto& w : windows)
    if (w.size() - 1 != positions) throw ContractError("slope_experiment: ragged windows");

  std::vector<SlopeResult> out;
  for (int slope : slopes) {
    auto sched = make_slope_schedule(positions, L, mean_k, slope);
    double mean = 0;
    for (auto k : sched) mean += static_cast<double>(k);
    mean /= static_cast<double>(sched.size()) * static_cast<double>(L);
    const double target = static_cast<double>(mean_k) / static_cast<double>(L);
    if (std::abs(mean - target) > 1e-6)
      throw ContractError("slope_experiment: schedule mean deviates from target budget");
    auto bc = BudgetConstraint::position_schedule(sched);
    out.push_back({slope, mean, oracle_ppl_over_windows(params, windows, bc)});
  }
  return out;
}

// ---- routing statistics -------------------------------------------------

struct RoutingStats {
  Tensor<double> layer_choice;    // n_layers x 3: fraction Small / Big / Skip
  Tensor<double> layer_position;  // n_layers x n_buckets: Big fraction per bucket
  Tensor<double> bucket_small, bucket_big, bucket_skip;  // n_layers x n_buckets each
  std::size_t n_buckets = 32;
};

inline RoutingStats routing_stats(const std::vector<RouteSpec>& specs, std::size_t n_buckets = 32) {
  if (specs.empty()) throw ContractError("routing_stats: no routes");
  const std::size_t L = specs.front().n_layers;
  RoutingStats st;
  st.n_buckets = n_buckets;
  st.layer_choice = Tensor<double>({L, 3});
  st.bucket_small = Tensor<double>({L, n_buckets});
  st.bucket_big = Tensor<double>({L, n_buckets});
  st.bucket_skip = Tensor<double>({L, n_buckets});
  Tensor<double> bucket_totals({L, n_buckets});
  std::vector<std::size_t> layer_totals(L, 0);
  for (const auto& s : specs) {
    if (s.n_layers != L) throw ContractError("routing_stats: inconsistent layer counts");
    const std::size_t t = s.positions();
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t b = std::min(n_buckets - 1, i * n_buckets / std::max<std::size_t>(t, 1));
      for (std::size_t l = 0; l < L; ++l) {
        st.layer_choice.at(l, static_cast<std::size_t>(s.at(i, l))) += 1.0;
        ++layer_totals[l];
        bucket_totals.at(l, b) += 1.0;
        switch (s.at(i, l)) {
          case RouteChoice::Small: st.bucket_small.at(l, b) += 1.0; break;
          case RouteChoice::Big: st.bucket_big.at(l, b) += 1.0; break;
          case RouteChoice::Skip: st.bucket_skip.at(l, b) += 1.0; break;
        }
      }
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t c = 0; c < 3; ++c) st.layer_choice.at(l, c) /= static_cast<double>(layer_totals[l]);
    for (std::size_t b = 0; b < n_buckets; ++b) {
      const double tot = bucket_totals.at(l, b);
      if (tot > 0) {
        st.bucket_small.at(l, b) /= tot;
        st.bucket_big.at(l, b) /= tot;
        st.bucket_skip.at(l, b) /= tot;
      }
    }
  }
  st.layer_position = st.bucket_big;
  return st;
}

inline void write_stats_csv(const RoutingStats& st, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "layer,bucket,frac_small,frac_big,frac_skip\n";
  char buf[128];
  for (std::size_t l = 0; l < st.bucket_big.rows(); ++l)
    for (std::size_t b = 0; b < st.n_buckets; ++b) {
      std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g,%.9g\n", l, b, st.bucket_small.at(l, b),
                    st.bucket_big.at(l, b), st.bucket_skip.at(l, b));
      f << buf;
    }
}

// ---- heatmap export -----------------------------------------------------

// Blue (0) to red (1) color for a value clamped to [0,1].
inline std::string heat_color(double v) {
  v = std::min(1.0, std::max(0.0, v));
  const int r = static_cast<int>(std::lround(255.0 * v));
  const int b = static_cast<int>(std::lround(255.0 * (1.0 - v)));
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, 64, b);
  return buf;
}

// Writes an SVG heatmap of a [rows x cols] matrix of values in [0,1] and a
// CSV with the raw values next to it (same path with .csv appended).
inline void export_heatmap_svg(const Tensor<double>& m, const std::string& path) {
  const std::size_t rows = m.rows(), cols = m.cols();
  const int cell = 16, margin = 4;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
    << (cols * cell + 2 * margin) << "\" height=\"" << (rows * cell + 2 * margin) << "\">\n";
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j)
      f << "  <rect x=\"" << (margin + j * cell) << "\" y=\"" << (margin + i * cell) << "\" width=\""
        << cell << "\" height=\"" << cell << "\" fill=\"" << heat_color(m.at(i, j)) << "\"/>\n";
  f << "</svg>\n";

  std::ofstream csv(path + ".csv", std::ios::trunc);
  if (!csv) throw ContractError("cannot open " + path + ".csv");
  char buf[48];
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::snprintf(buf, sizeof(buf), "%s%.9g", j ? "," : "", m.at(i, j));
      csv << buf;
    }
    csv << "\n";
  }
}

// ---- token difficulty ---------------------------------------------------

struct TokenDifficulty {
  std::size_t position = 0;
  int token_id = 0;
  double loss_small = 0, loss_big = 0, loss_oracle = 0;
  double gap = 0;  // loss_small - loss_oracle, >= 0 when all-Small is admissible
};

inline std::vector<TokenDifficulty> token_difficulty(const std::vector<TokenTrace>& traces) {
  std::vector<TokenDifficulty> out;
  for (const auto& tr : traces)
    out.push_back({tr.position, tr.token_id, tr.loss_small, tr.loss_big, tr.loss_oracle,
                   tr.loss_small - tr.loss_oracle});
  return out;
}

// Fraction of strictly-ordered pairs on which two scores disagree about the
// order (discordant pairs / comparable pairs). 0 means identical rankings.
inline double rank_disagreement(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("rank_disagreement: length mismatch");
  std::size_t comparable = 0, discordant = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      if (a[i] == a[j] || b[i] == b[j]) continue;
      ++comparable;
      if ((a[i] < a[j]) != (b[i] < b[j])) ++discordant;
    }
  if (comparable == 0) return 0.0;
  return static_cast<double>(discordant) / static_cast<double>(comparable);
}

inline void write_difficulty_csv(const std::vector<TokenDifficulty>& d, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "position,token,loss_small,loss_big,loss_oracle,gap\n";
  char buf[160];
  for (const auto& r : d) {
    std::snprintf(buf, sizeof(buf), "%zu,%d,%.9g,%.9g,%.9g,%.9g\n", r.position, r.token_id,
                  r.loss_small, r.loss_big, r.loss_oracle, r.gap);
    f << buf;
  }
}

}  // namespace duo
