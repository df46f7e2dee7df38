#pragma once

#include <fstream>

#include "duo/infer.hpp"

namespace duo {

// Constraint on the per-position set of admissible layer-route rows.
struct BudgetConstraint {
  enum class Rule { Unconstrained, ExactBigCount, ExactSkipCount, PositionSchedule };

  bool allow_skip = false;  // false: {Small, Big} per layer; true: adds Skip
  Rule rule = Rule::Unconstrained;
  std::size_t big_count = 0;                // ExactBigCount
  std::size_t skip_count = 0;               // ExactSkipCount
  std::vector<std::size_t> schedule;        // PositionSchedule: big count per position

  static BudgetConstraint unconstrained(bool allow_skip = false) {
    BudgetConstraint b;
    b.allow_skip = allow_skip;
    return b;
  }
  static BudgetConstraint exact_big(std::size_t k, bool allow_skip = false) {
    BudgetConstraint b;
    b.allow_skip = allow_skip;
    b.rule = Rule::ExactBigCount;
    b.big_count = k;
    return b;
  }
  static BudgetConstraint exact_skip(std::size_t s) {
    BudgetConstraint b;
    b.allow_skip = true;
    b.rule = Rule::ExactSkipCount;
    b.skip_count = s;
    return b;
  }
  static BudgetConstraint position_schedule(std::vector<std::size_t> per_position_big,
                                            bool allow_skip = false) {
    BudgetConstraint b;
    b.allow_skip = allow_skip;
    b.rule = Rule::PositionSchedule;
    b.schedule = std::move(per_position_big);
    return b;
  }

  bool admits(const LayerRoutes& row, std::size_t position) const {
    std::size_t bigs = 0, skips = 0;
    for (auto c : row) {
      if (c == RouteChoice::Big) ++bigs;
      if (c == RouteChoice::Skip) ++skips;
    }
    if (!allow_skip && skips > 0) return false;
    switch (rule) {
      case Rule::Unconstrained: return true;
      case Rule::ExactBigCount: return bigs == big_count;
      case Rule::ExactSkipCount: return skips == skip_count;
      case Rule::PositionSchedule:
        if (position >= schedule.size()) throw ContractError("BudgetConstraint: position beyond schedule");
        return bigs == schedule[position];
    }
    return false;
  }
};

// All admissible rows for one position, in lexicographic order with digit
// order Small < Big < Skip and layer 0 most significant. Throws if the
// constraint admits nothing.
inline std::vector<LayerRoutes> enumerate_routes(std::size_t n_layers, const BudgetConstraint& bc,
                                                 std::size_t position = 0) {
  const int base = bc.allow_skip ? 3 : 2;
  std::vector<LayerRoutes> out;
  LayerRoutes row(n_layers, RouteChoice::Small);
  while (true) {
    if (bc.admits(row, position)) out.push_back(row);
    // odometer increment, last layer fastest
    std::size_t l = n_layers;
    while (l > 0) {
      --l;
      const int next = static_cast<int>(row[l]) + 1;
      if (next < base) {
        row[l] = static_cast<RouteChoice>(next);
        break;
      }
      row[l] = RouteChoice::Small;
      if (l == 0) {
        if (out.empty()) throw ContractError("enumerate_routes: constraint admits no route");
        return out;
      }
    }
    if (n_layers == 0) {
      if (out.empty()) throw ContractError("enumerate_routes: constraint admits no route");
      return out;
    }
  }
}

enum class OracleMode { Committed, AllBigReference };

// Per-position record of the oracle search. loss_small / loss_big are the
// all-Small and all-Big candidate losses evaluated in the same context as
// the winning route, so loss_oracle <= both holds exactly whenever the
// all-Small / all-Big rows are admissible.
struct TokenTrace {
  std::size_t position = 0;
  int token_id = 0;  // the target token this position predicts
  double loss_small = 0, loss_big = 0, loss_oracle = 0;
  std::string route;
  std::size_t candidate_count = 0;
};

struct OracleResult {
  RouteSpec routes;
  std::vector<TokenTrace> traces;
  double ppl = 0;
};

// Budget-constrained exhaustive per-token route search.
//
// Committed mode: position i is evaluated against the K/V prefix produced
// by the routes already chosen for positions < i; the winner's entries are
// committed before moving on. AllBigReference mode: every position is
// evaluated against the K/V prefix of an all-Big forward pass and nothing
// is committed. Ties go to the lexicographically smaller route
// (Small < Big < Skip).
inline OracleResult oracle_route_sequence(const DuoParams<float>& params,
                                          const std::vector<int>& inputs,
                                          const std::vector<int>& targets,
                                          const BudgetConstraint& bc,
                                          OracleMode mode = OracleMode::Committed) {
  const DuoConfig& c = params.config;
  const std::size_t t = inputs.size();
  if (targets.size() != t) throw ShapeError("oracle_route_sequence: target count mismatch");
  if (t == 0) throw ContractError("oracle_route_sequence: empty sequence");

  OracleResult res;
  res.routes = RouteSpec(t, c.n_layers);
  const LayerRoutes all_small(c.n_layers, RouteChoice::Small);
  const LayerRoutes all_big(c.n_layers, RouteChoice::Big);

  KvCache<float> cache = KvCache<float>::make(c);
  if (mode == OracleMode::AllBigReference)
    forward_full(params, inputs, RouteSpec::from_row(t, all_big), &cache);

  double total = 0;
  for (std::size_t i = 0; i < t; ++i) {
    auto candidates = enumerate_routes(c.n_layers, bc, i);
    const std::size_t n_cand = candidates.size();
    // diagnostic rows: locate or append all-Small and all-Big
    constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t idx_small = npos, idx_big = npos;
    for (std::size_t j = 0; j < n_cand; ++j) {
      if (candidates[j] == all_small) idx_small = j;
      if (candidates[j] == all_big) idx_big = j;
    }
    if (idx_small == npos) {
      candidates.push_back(all_small);
      idx_small = candidates.size() - 1;
    }
    if (idx_big == npos) {
      candidates.push_back(all_big);
      idx_big = candidates.size() - 1;
    }

    if (mode == OracleMode::AllBigReference) cache.restore({i});
    std::vector<PositionEntries<float>> entries;
    auto losses = evaluate_candidates(params, cache, inputs[i], targets[i], candidates,
                                      mode == OracleMode::Committed ? &entries : nullptr);

    std::size_t best = 0;
    for (std::size_t j = 1; j < n_cand; ++j)
      if (losses[j] < losses[best]) best = j;  // first min == lexicographic tie-break

    res.routes.set_row(i, candidates[best]);
    if (mode == OracleMode::Committed) commit(cache, entries[best]);

    TokenTrace tr;
    tr.position = i;
    tr.token_id = targets[i];
    tr.loss_small = losses[idx_small];
    tr.loss_big = losses[idx_big];
    tr.loss_oracle = losses[best];
    tr.route = res.routes.row_string(i);
    tr.candidate_count = n_cand;
    res.traces.push_back(tr);
    total += tr.loss_oracle;
  }
  res.ppl = std::exp(total / static_cast<double>(t));
  return res;
}

inline double oracle_ppl(const OracleResult& r) { return r.ppl; }

inline void write_trace_csv(const std::vector<TokenTrace>& traces, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ContractError("cannot open " + path);
  f << "position,token_id,loss_small,loss_big,loss_oracle,route,candidate_count\n";
  char buf[192];
  for (const auto& tr : traces) {
    std::snprintf(buf, sizeof(buf), "%zu,%d,%.9g,%.9g,%.9g,%s,%zu\n", tr.position, tr.token_id,
                  tr.loss_small, tr.loss_big, tr.loss_oracle, tr.route.c_str(), tr.candidate_count);
    f << buf;
  }
}

}  // namespace duo
