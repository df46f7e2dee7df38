// duo: pipeline driver for adaptive-depth transformer experiments.
//
// Subcommands: gen-corpus, train, router-train, oracle, baselines, sweep,
// difficulty, stats. Every command reads one JSON run config (--config),
// applies dotted --set overrides, and writes its artifacts plus the
// resolved config and a seed log under the output directory.
//
// Exit codes: 0 success, 2 config error, 3 missing artifact or I/O error,
// 4 numerical failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "duo/analysis.hpp"
#include "duo/checkpoint.hpp"
#include "duo/serde.hpp"
#include "duo/textgen.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace duo;

namespace {

struct ExitCode {
  int code;
  std::string message;
};

// ---- run config ---------------------------------------------------------

json default_run_config() {
  return json{
      {"model", config_to_json(DuoConfig{})},
      {"train",
       {{"steps", 2000},
        {"batch_size", 8},
        {"seq_len", 256},
        {"lr", 1e-3},
        {"warmup_steps", 100},
        {"weight_decay", 0.1},
        {"beta1", 0.9},
        {"beta2", 0.95},
        {"grad_clip", 1.0},
        {"p_big", 0.5},
        {"regime", "from_scratch"},
        {"checkpoint_every", 0}}},
      {"router",
       {{"steps", 300},
        {"batch_size", 4},
        {"seq_len", 64},
        {"lr", 1e-2},
        {"warmup_steps", 10},
        {"alpha", 1.0},
        {"budget", 0.5},
        {"allow_skip", false},
        {"train_base", false},
        {"beta_start", 1.0},
        {"beta_end", 20.0}}},
      {"oracle",
       {{"constraint", "unconstrained"},
        {"k", 1},
        {"allow_skip", false},
        {"mode", "committed"},
        {"windows", 4},
        {"seq_len", 64}}},
      {"analysis", {{"random_samples", 100}, {"buckets", 32}, {"slope_mean_k", 3}}},
      {"data",
       {{"train_files", json::array()},
        {"holdout_files", json::array()},
        {"checkpoint", ""},
        {"router_checkpoint", ""},
        {"generate",
         {{"prose_bytes", 1 << 20}, {"code_bytes", 1 << 20}, {"holdout_bytes", 1 << 16}}}}},
      {"output", {{"dir", "out"}}},
      {"seeds",
       {{"init", 1},
        {"data", 2},
        {"routing", 3},
        {"router_init", 101},
        {"router_data", 102},
        {"sampling", 7}}}};
}

// Strict recursive merge: every key in `user` must exist in `base`.
void merge_strict(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    if (base[it.key()].is_object() && !base[it.key()].empty() && it.value().is_object())
      merge_strict(base[it.key()], it.value(), path);
    else
      base[it.key()] = it.value();
  }
}

void apply_set_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json* node = &cfg;
  std::size_t pos = 0;
  std::string last;
  while (true) {
    const std::size_t dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    if (dot == std::string::npos) {
      last = part;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // bare strings need no quoting
  }
  (*node)[last] = value;
}

struct Run {
  json cfg;
  fs::path out;
  bool force = false;
  std::vector<std::string> seed_log;
};

Run load_run(const std::string& config_path, const std::vector<std::string>& sets,
             const std::string& out_override, bool force) {
  Run run;
  run.cfg = default_run_config();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw ExitCode{3, "cannot open config file " + config_path};
    json user;
    try {
      user = json::parse(f);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    merge_strict(run.cfg, user, "");
  }
  for (const auto& s : sets) apply_set_override(run.cfg, s);
  if (!out_override.empty()) run.cfg["output"]["dir"] = out_override;

  if (const char* env = std::getenv("DUO_SEED")) {
    const std::uint64_t s = std::stoull(env);
    auto& seeds = run.cfg["seeds"];
    std::size_t i = 0;
    for (auto it = seeds.begin(); it != seeds.end(); ++it, ++i) it.value() = Rng::mix(s, i);
    run.seed_log.push_back("DUO_SEED=" + std::string(env) + " (seed block derived)");
  }
  run.out = fs::path(run.cfg["output"]["dir"].get<std::string>());
  run.force = force;
  return run;
}

void require_writable(const Run& run, const std::vector<std::string>& artifacts) {
  std::error_code ec;
  fs::create_directories(run.out, ec);
  if (ec) throw ExitCode{3, "cannot create output directory " + run.out.string()};
  if (run.force) return;
  for (const auto& a : artifacts) {
    const fs::path p = run.out / a;
    if (fs::exists(p))
      throw ExitCode{3, "refusing to overwrite " + p.string() + " (pass --force to allow)"};
  }
}

void write_provenance(const Run& run, const std::string& command) {
  {
    std::ofstream f(run.out / "resolved_config.json", std::ios::trunc);
    f << run.cfg.dump(2) << "\n";
  }
  std::ofstream log(run.out / "run_log.txt", std::ios::trunc);
  log << "command: " << command << "\n";
  log << "seeds: " << run.cfg["seeds"].dump() << "\n";
  for (const auto& line : run.seed_log) log << line << "\n";
}

// ---- shared loaders -----------------------------------------------------

DuoConfig model_config(const Run& run) { return config_from_json(run.cfg["model"]); }

TokenizedCorpus load_corpus(const Run& run, const char* files_key, Split split) {
  std::vector<std::string> paths;
  for (const auto& p : run.cfg["data"][files_key]) paths.push_back(p.get<std::string>());
  if (paths.empty()) {
    // fall back to the generated corpus in the output directory
    const char* name = split == Split::Train ? "train_corpus.txt" : "holdout_corpus.txt";
    const fs::path p = run.out / name;
    if (!fs::exists(p))
      throw ExitCode{3, "no corpus configured and " + p.string() +
                            " does not exist (run gen-corpus first or set data." +
                            std::string(files_key) + ")"};
    paths.push_back(p.string());
  }
  return TokenizedCorpus::from_files(paths, split);
}

std::string checkpoint_path(const Run& run) {
  std::string p = run.cfg["data"]["checkpoint"].get<std::string>();
  if (p.empty()) p = (run.out / "checkpoint.duo").string();
  return p;
}

Checkpoint load_stage1(const Run& run) {
  const std::string p = checkpoint_path(run);
  if (!fs::exists(p))
    throw ExitCode{3, "missing stage-1 checkpoint at " + p + " (run the train command first)"};
  return load_checkpoint(p);
}

BudgetConstraint oracle_constraint(const Run& run) {
  const auto& oc = run.cfg["oracle"];
  const std::string kind = oc["constraint"].get<std::string>();
  const bool skip = oc["allow_skip"].get<bool>();
  if (kind == "unconstrained") return BudgetConstraint::unconstrained(skip);
  if (kind == "exact_big") return BudgetConstraint::exact_big(oc["k"].get<std::size_t>(), skip);
  if (kind == "exact_skip") return BudgetConstraint::exact_skip(oc["k"].get<std::size_t>());
  throw ConfigError("oracle.constraint must be unconstrained, exact_big, or exact_skip");
}

OracleMode oracle_mode(const Run& run) {
  const std::string m = run.cfg["oracle"]["mode"].get<std::string>();
  if (m == "committed") return OracleMode::Committed;
  if (m == "all_big_reference") return OracleMode::AllBigReference;
  throw ConfigError("oracle.mode must be committed or all_big_reference");
}

std::vector<std::vector<int>> eval_windows(const Run& run) {
  auto holdout = load_corpus(run, "holdout_files", Split::HoldoutText);
  return holdout_windows(holdout, run.cfg["oracle"]["seq_len"].get<std::size_t>(),
                         run.cfg["oracle"]["windows"].get<std::size_t>());
}

// ---- commands -----------------------------------------------------------

int cmd_gen_corpus(Run& run) {
  require_writable(run, {"train_corpus.txt", "holdout_corpus.txt"});
  const auto& g = run.cfg["data"]["generate"];
  const std::uint64_t seed = run.cfg["seeds"]["data"].get<std::uint64_t>();
  {
    std::ofstream f(run.out / "train_corpus.txt", std::ios::trunc);
    f << textgen::prose(g["prose_bytes"].get<std::size_t>(), Rng::mix(seed, 1));
    f << textgen::code(g["code_bytes"].get<std::size_t>(), Rng::mix(seed, 2));
  }
  {
    std::ofstream f(run.out / "holdout_corpus.txt", std::ios::trunc);
    f << textgen::prose(g["holdout_bytes"].get<std::size_t>(), Rng::mix(seed, 3));
    f << textgen::code(g["holdout_bytes"].get<std::size_t>(), Rng::mix(seed, 4));
  }
  write_provenance(run, "gen-corpus");
  std::cout << "corpus written to " << run.out.string() << "\n";
  return 0;
}

TrainConfig train_config(const Run& run) {
  const auto& t = run.cfg["train"];
  TrainConfig tc;
  tc.steps = t["steps"].get<std::size_t>();
  tc.batch_size = t["batch_size"].get<std::size_t>();
  tc.seq_len = t["seq_len"].get<std::size_t>();
  tc.lr = t["lr"].get<double>();
  tc.warmup_steps = t["warmup_steps"].get<std::size_t>();
  tc.weight_decay = t["weight_decay"].get<double>();
  tc.beta1 = t["beta1"].get<double>();
  tc.beta2 = t["beta2"].get<double>();
  tc.grad_clip = t["grad_clip"].get<double>();
  tc.p_big = t["p_big"].get<double>();
  const std::string regime = t["regime"].get<std::string>();
  if (regime == "from_scratch")
    tc.regime = Regime::FromScratch;
  else if (regime == "frozen_big")
    tc.regime = Regime::FrozenBig;
  else
    throw ConfigError("train.regime must be from_scratch or frozen_big");
  tc.checkpoint_every = t["checkpoint_every"].get<std::size_t>();
  tc.seed_init = run.cfg["seeds"]["init"].get<std::uint64_t>();
  tc.seed_data = run.cfg["seeds"]["data"].get<std::uint64_t>();
  tc.seed_routing = run.cfg["seeds"]["routing"].get<std::uint64_t>();
  return tc;
}

int cmd_train(Run& run) {
  require_writable(run, {"checkpoint.duo", "loss_curve.csv"});
  auto cfg = model_config(run);
  auto tc = train_config(run);
  tc.checkpoint_dir = run.out.string();
  auto corpus = load_corpus(run, "train_files", Split::Train);
  auto params = init_params<float>(cfg, tc.seed_init);
  if (tc.regime == Regime::FrozenBig) {
    // frozen-big starts from a stage-1 checkpoint's dense weights
    auto ck = load_stage1(run);
    params = ck.params;
  }
  auto curve = stage1_train(params, tc, corpus);
  write_loss_curve(curve, (run.out / "loss_curve.csv").string());
  write_provenance(run, "train");
  std::cout << "final training loss " << curve.back().loss << "; checkpoint at "
            << (run.out / "checkpoint.duo").string() << "\n";
  return 0;
}

int cmd_router_train(Run& run) {
  require_writable(run, {"router_checkpoint.duo", "router_curves.csv"});
  auto ck = load_stage1(run);
  const auto& r = run.cfg["router"];
  RouterTrainConfig rc;
  rc.steps = r["steps"].get<std::size_t>();
  rc.batch_size = r["batch_size"].get<std::size_t>();
  rc.seq_len = r["seq_len"].get<std::size_t>();
  rc.lr = r["lr"].get<double>();
  rc.warmup_steps = r["warmup_steps"].get<std::size_t>();
  rc.alpha = r["alpha"].get<double>();
  rc.budget = r["budget"].get<double>();
  rc.allow_skip = r["allow_skip"].get<bool>();
  rc.train_base = r["train_base"].get<bool>();
  rc.schedule = {r["beta_start"].get<double>(), r["beta_end"].get<double>()};
  rc.seed_init = run.cfg["seeds"]["router_init"].get<std::uint64_t>();
  rc.seed_data = run.cfg["seeds"]["router_data"].get<std::uint64_t>();

  auto corpus = load_corpus(run, "train_files", Split::Train);
  auto router = RouterParams::init(ck.config, rc.allow_skip, rc.seed_init);
  auto curve = train_router(ck.params, router, rc, corpus);
  write_router_curves(curve, (run.out / "router_curves.csv").string());
  save_checkpoint(ck.params, (run.out / "router_checkpoint.duo").string(), router_extras(router),
                  {{"stage", "router"}, {"alpha", rc.alpha}, {"budget", rc.budget}});
  auto ev = eval_router(ck.params, router, eval_windows(run));
  write_provenance(run, "router-train");
  std::cout << "router ppl " << ev.ppl << " at realized budget " << ev.realized_budget << "\n";
  return 0;
}

RouterParams load_router(const Run& run, Checkpoint& ck_out) {
  std::string p = run.cfg["data"]["router_checkpoint"].get<std::string>();
  if (p.empty()) p = (run.out / "router_checkpoint.duo").string();
  if (!fs::exists(p))
    throw ExitCode{3, "missing router checkpoint at " + p + " (run router-train first)"};
  ck_out = load_checkpoint(p);
  return router_from_extras(ck_out.extras, ck_out.config);
}

int cmd_oracle(Run& run) {
  require_writable(run, {"oracle_trace.csv"});
  auto ck = load_stage1(run);
  auto bc = oracle_constraint(run);
  auto mode = oracle_mode(run);
  std::vector<TokenTrace> traces;
  double total = 0;
  std::size_t count = 0;
  for (const auto& w : eval_windows(run)) {
    std::vector<int> inputs(w.begin(), w.end() - 1);
    std::vector<int> targets(w.begin() + 1, w.end());
    auto res = oracle_route_sequence(ck.params, inputs, targets, bc, mode);
    for (const auto& tr : res.traces) {
      traces.push_back(tr);
      total += tr.loss_oracle;
      ++count;
    }
  }
  write_trace_csv(traces, (run.out / "oracle_trace.csv").string());
  write_provenance(run, "oracle");
  std::cout << "oracle ppl " << std::exp(total / static_cast<double>(count)) << " over " << count
            << " positions\n";
  return 0;
}

int cmd_baselines(Run& run) {
  require_writable(run, {"baselines.csv"});
  auto ck = load_stage1(run);
  auto windows = eval_windows(run);
  const std::size_t L = ck.config.n_layers;
  const std::size_t n = run.cfg["analysis"]["random_samples"].get<std::size_t>();
  const std::uint64_t seed = run.cfg["seeds"]["sampling"].get<std::uint64_t>();

  std::ofstream f(run.out / "baselines.csv", std::ios::trunc);
  f << "kind,k,route,ppl\n";
  char buf[160];
  for (std::size_t k = 0; k <= L; ++k) {
    auto fixed = best_fixed_pattern(ck.params, windows, BudgetConstraint::exact_big(k, false));
    std::string name;
    for (auto c : fixed.row) name += route_char(c);
    std::snprintf(buf, sizeof(buf), "best_fixed,%zu,%s,%.9g\n", k, name.c_str(), fixed.ppl);
    f << buf;
    if (k > 0 && k < L) {
      auto rnd = best_of_n_random(ck.params, windows, n, k, seed);
      std::snprintf(buf, sizeof(buf), "best_of_%zu_random,%zu,,%.9g\n", n, k, rnd.best_ppl);
      f << buf;
    }
  }
  f.close();
  write_provenance(run, "baselines");
  std::cout << "baselines written to " << (run.out / "baselines.csv").string() << "\n";
  return 0;
}

int cmd_sweep(Run& run) {
  require_writable(run, {"sweep.csv"});
  auto ck = load_stage1(run);
  auto windows = eval_windows(run);
  std::vector<SweepRow> rows;
  Checkpoint rck;
  if (!run.cfg["data"]["router_checkpoint"].get<std::string>().empty() ||
      fs::exists(run.out / "router_checkpoint.duo")) {
    auto router = load_router(run, rck);
    rows = budget_sweep(rck.params, windows, &router);
  } else {
    rows = budget_sweep(ck.params, windows);
  }
  write_sweep_csv(rows, (run.out / "sweep.csv").string());
  write_provenance(run, "sweep");
  std::cout << "sweep written to " << (run.out / "sweep.csv").string() << "\n";
  return 0;
}

int cmd_difficulty(Run& run) {
  require_writable(run, {"difficulty.csv"});
  auto ck = load_stage1(run);
  std::vector<TokenDifficulty> all;
  for (const auto& w : eval_windows(run)) {
    std::vector<int> inputs(w.begin(), w.end() - 1);
    std::vector<int> targets(w.begin() + 1, w.end());
    // unconstrained {Small,Big} oracle guarantees gap >= 0
    auto res = oracle_route_sequence(ck.params, inputs, targets,
                                     BudgetConstraint::unconstrained(false), oracle_mode(run));
    for (auto& d : token_difficulty(res.traces)) all.push_back(d);
  }
  write_difficulty_csv(all, (run.out / "difficulty.csv").string());
  std::vector<double> by_small, by_gap;
  for (const auto& d : all) {
    by_small.push_back(d.loss_small);
    by_gap.push_back(d.gap);
  }
  write_provenance(run, "difficulty");
  std::cout << "rank disagreement (loss_small vs gap): " << rank_disagreement(by_small, by_gap)
            << " over " << all.size() << " positions\n";
  return 0;
}

int cmd_stats(Run& run) {
  require_writable(run, {"stats.csv", "stats_heatmap.svg"});
  auto ck = load_stage1(run);
  auto bc = oracle_constraint(run);
  auto mode = oracle_mode(run);
  std::vector<RouteSpec> specs;
  for (const auto& w : eval_windows(run)) {
    std::vector<int> inputs(w.begin(), w.end() - 1);
    std::vector<int> targets(w.begin() + 1, w.end());
    specs.push_back(oracle_route_sequence(ck.params, inputs, targets, bc, mode).routes);
  }
  auto st = routing_stats(specs, run.cfg["analysis"]["buckets"].get<std::size_t>());
  write_stats_csv(st, (run.out / "stats.csv").string());
  export_heatmap_svg(st.layer_position, (run.out / "stats_heatmap.svg").string());
  write_provenance(run, "stats");
  std::cout << "stats written to " << (run.out / "stats.csv").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaptive-depth transformer lab"};
  app.require_subcommand(1);

  std::string config_path, out_override;
  std::vector<std::string> sets;
  bool force = false;
  int threads = 0;  // 0: all available; the engine is deterministic regardless
  app.add_option("--config", config_path, "run config JSON")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override config keys, dotted key=value");
  app.add_option("--threads", threads, "worker thread cap (0 = available cores)");
  app.add_flag("--force", force, "overwrite existing artifacts");
  app.add_option("--out", out_override, "output directory (overrides output.dir)");

  std::map<std::string, int (*)(Run&)> commands = {
      {"gen-corpus", cmd_gen_corpus}, {"train", cmd_train},
      {"router-train", cmd_router_train}, {"oracle", cmd_oracle},
      {"baselines", cmd_baselines},   {"sweep", cmd_sweep},
      {"difficulty", cmd_difficulty}, {"stats", cmd_stats}};
  for (auto& [name, fn] : commands) app.add_subcommand(name)->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    Run run = load_run(config_path, sets, out_override, force);
    return commands.at(app.get_subcommands().front()->get_name())(run);
  } catch (const ExitCode& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
