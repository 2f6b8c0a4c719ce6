// dslrec: dataset preparation, sparse training runs, sweeps and reports.
//
// Exit codes: 0 success, 1 training or runtime failure, 2 usage/config error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "dslrec/dslrec.hpp"

namespace fs = std::filesystem;
using namespace dslrec;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

struct SynthArgs {
  SyntheticSpec spec;
  std::uint64_t seed = 0;
  std::string out;
};

struct PrepareArgs {
  std::string input;
  std::string format = "pair-lines";
  double ratio = 0.2;
  std::uint64_t seed = 0;
  std::string out;
};

// Flag values for `train`; only flags actually given override the config file.
struct TrainArgs {
  std::string config;
  std::string data;
  std::string out = "runs/run";
  std::string run_id, method, backbone, decay, optimizer, dense_checkpoint;
  std::size_t layers = 0, dim = 0, delta_t = 0, t_end = 0, batch_size = 0, eval_every = 0,
              k = 0, finetune_iters = 0;
  double sparsity = 0, rho0 = 0, lr = 0, l2 = 0, init_std = 0;
  std::uint64_t seed = 0;
  bool verbose_log = false;
};

struct SweepArgs {
  std::string spec;
  std::string data;
  std::string out = "sweeps/sweep";
  bool resume = false;
  std::size_t workers = 1;
};

struct ProfileArgs {
  std::string run_dir;
  std::size_t groups = 10;
  std::string data;
};

struct ReportArgs {
  std::string dir;
};

int cmd_synth(const SynthArgs& a) {
  const auto ds = generate_synthetic(a.spec, a.seed);
  fs::create_directories(fs::path(a.out).parent_path().empty() ? "." : fs::path(a.out).parent_path());
  save_interactions(a.out, ds.num_users(), ds.num_items(), ds.train_edges());
  fmt::print("wrote {} interactions ({} users, {} items) to {}\n", ds.train_edges().size(),
             ds.num_users(), ds.num_items(), a.out);
  return 0;
}

int cmd_prepare(const PrepareArgs& a) {
  std::vector<std::string> warnings;
  const auto raw = load_interactions(a.input, parse_input_format(a.format), &warnings);
  for (const auto& w : warnings) fmt::print(stderr, "warning: {}\n", w);
  const auto ds = split_holdout(raw, a.ratio, a.seed);
  SplitManifest manifest = SplitManifest::describe(ds);
  manifest.seed = a.seed;
  manifest.ratio = a.ratio;
  save_split(a.out, ds, manifest);
  fmt::print("{}: {} train / {} test edges, {} users, {} items\n", a.out,
             manifest.train_edges, manifest.test_edges, manifest.num_users, manifest.num_items);
  return 0;
}

RunConfig resolve_train_config(const TrainArgs& a, const CLI::App& app) {
  RunConfig cfg;
  if (!a.config.empty()) cfg.merge_json(read_json(a.config));
  auto given = [&](const char* flag) { return app.count(flag) > 0; };
  if (given("--run-id")) cfg.run_id = a.run_id;
  if (given("--method")) cfg.method = parse_method(a.method);
  if (given("--backbone")) cfg.backbone = parse_backbone(a.backbone);
  if (given("--layers")) cfg.layers = a.layers;
  if (given("--dim")) cfg.dim = a.dim;
  if (given("--sparsity")) cfg.sparsity = a.sparsity;
  if (given("--rho0")) cfg.schedule.rho0 = a.rho0;
  if (given("--delta-t")) cfg.schedule.delta_t = a.delta_t;
  if (given("--t-end")) cfg.schedule.t_end = a.t_end;
  if (given("--decay")) cfg.schedule.decay = parse_decay(a.decay);
  if (given("--optimizer")) cfg.optimizer.kind = parse_optimizer(a.optimizer);
  if (given("--lr")) cfg.optimizer.learning_rate = a.lr;
  if (given("--l2")) cfg.l2 = a.l2;
  if (given("--init-std")) cfg.init_std = a.init_std;
  if (given("--batch-size")) cfg.batch_size = a.batch_size;
  if (given("--eval-every")) cfg.eval_every = a.eval_every;
  if (given("--k")) cfg.eval_k = a.k;
  if (given("--seed")) cfg.seed = a.seed;
  if (given("--finetune-iters")) cfg.finetune_iters = a.finetune_iters;
  if (given("--dense-checkpoint")) cfg.dense_checkpoint = a.dense_checkpoint;
  if (given("--verbose-log")) cfg.verbose_log = a.verbose_log;
  if (given("--data")) cfg.data_dir = a.data;
  if (cfg.data_dir.empty()) throw ConfigError("no dataset: pass --data or set data_dir");
  if (cfg.method == Method::dense && given("--sparsity")) {
    fmt::print(stderr, "warning: --sparsity is ignored for method dense\n");
  }
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a, const CLI::App& app) {
  const auto cfg = resolve_train_config(a, app);
  const auto ds = load_split(cfg.data_dir);
  TrainOptions opts;
  opts.out_dir = a.out;
  if (fs::exists(fs::path(cfg.data_dir) / "split_manifest.json")) {
    const auto m = read_json(fs::path(cfg.data_dir) / "split_manifest.json");
    SplitManifest manifest = SplitManifest::describe(ds);
    if (m.contains("seed") && !m["seed"].is_null()) manifest.seed = m["seed"].get<std::uint64_t>();
    if (m.contains("ratio") && !m["ratio"].is_null()) manifest.ratio = m["ratio"].get<double>();
    opts.manifest = manifest;
  }
  const auto result = train(cfg, ds, opts);
  const auto& last = result.metrics.back();
  fmt::print(
      "{} method={} iter={} recall@{}={:.4f} ndcg@{}={:.4f} hr@{}={:.4f} sparsity={:.4f} "
      "macs_train={:.3e} macs_infer={:.3e} events={}\n",
      cfg.run_id, to_string(cfg.method), last.iteration, last.metrics.k, last.metrics.recall,
      last.metrics.k, last.metrics.ndcg, last.metrics.k, last.metrics.hr, last.sparsity,
      result.cost.macs_train, result.cost.macs_infer, result.events.size());
  return 0;
}

int cmd_sweep(const SweepArgs& a) {
  auto spec = SweepSpec::from_json(read_json(a.spec));
  if (!a.data.empty()) spec.base.data_dir = a.data;
  if (spec.base.data_dir.empty()) throw ConfigError("sweep spec has no data_dir; pass --data");
  const auto ds = load_split(spec.base.data_dir);
  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "sweep_spec.json") << read_json(a.spec).dump(2) << '\n';
  const auto results = run_sweep(spec, ds, {a.out, a.resume, a.workers});
  std::size_t failed = 0;
  for (const auto& r : results) {
    fmt::print("{:<32} {}{}\n", r.cell.name(), r.status, r.resumed ? " (resumed)" : "");
    failed += r.ok ? 0 : 1;
  }
  fmt::print("{} cells, {} failed; report in {}\n", results.size(), failed,
             (fs::path(a.out) / "sweep.csv").string());
  return 0;
}

int cmd_profile(const ProfileArgs& a) {
  std::optional<fs::path> data;
  if (!a.data.empty()) data = a.data;
  const auto p = write_profile(a.run_dir, a.groups, data);
  auto show = [](const std::optional<double>& v) {
    return v ? fmt::format("{:.4f}", *v) : std::string("null");
  };
  fmt::print("spearman(popularity rank, sparsity): users={} items={}\n",
             show(p.users_correlation), show(p.items_correlation));
  return 0;
}

int cmd_report(const ReportArgs& a) {
  const fs::path dir(a.dir);
  if (fs::exists(dir / "sweep_summary.csv")) {
    std::ifstream in(dir / "sweep_summary.csv");
    std::string line;
    while (std::getline(in, line)) fmt::print("{}\n", line);
    return 0;
  }
  if (!fs::exists(dir / "metrics.csv")) {
    throw ConfigError(dir.string() + " is neither a run nor a sweep directory");
  }
  const auto cfg = read_json(dir / "config.json");
  std::ifstream in(dir / "metrics.csv");
  std::string line, last;
  std::getline(in, line);
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  std::size_t events = 0;
  if (std::ifstream log(dir / "exploration.jsonl"); log) {
    while (std::getline(log, line)) events += line.empty() ? 0 : 1;
  }
  nlohmann::json meta;
  if (fs::exists(dir / "checkpoint.final")) meta = read_json(dir / "checkpoint.final")["meta"];
  fmt::print("run:          {}\n", cfg.value("run_id", ""));
  fmt::print("method:       {} ({} backbone, d={})\n", cfg.value("method", ""),
             cfg["backbone"].value("kind", ""), cfg.value("dim", 0));
  fmt::print("sparsity:     {}\n", cfg.value("sparsity", 0.0));
  fmt::print("events:       {}\n", events);
  fmt::print("final row:    {}\n", last);
  if (!meta.is_null()) {
    fmt::print("macs_train:   {:.4e}\n", meta.value("macs_train_cum", 0.0));
    fmt::print("macs_infer:   {:.4e}\n", meta.value("macs_infer", 0.0));
    fmt::print("memory_bytes: {:.0f}\n", meta.value("memory_bytes", 0.0));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic sparse training for embedding-based recommenders"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic interaction file");
  synth_cmd->add_option("--users", synth.spec.num_users, "Number of users")->capture_default_str();
  synth_cmd->add_option("--items", synth.spec.num_items, "Number of items")->capture_default_str();
  synth_cmd->add_option("--interactions", synth.spec.interactions, "Target interaction count")
      ->capture_default_str();
  synth_cmd->add_option("--alpha", synth.spec.popularity_exponent, "Power-law popularity exponent")
      ->capture_default_str();
  synth_cmd->add_option("--topics", synth.spec.topics, "Latent topic count")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--out", synth.out, "Output pair-lines file")->required();

  PrepareArgs prep;
  auto* prep_cmd = app.add_subcommand("prepare", "Load interactions and write a train/test split");
  prep_cmd->add_option("input", prep.input, "Interaction file")->required()->check(CLI::ExistingFile);
  prep_cmd->add_option("--format", prep.format, "Input format")
      ->check(CLI::IsMember({"pair-lines", "per-user-adjacency"}))
      ->capture_default_str();
  prep_cmd->add_option("--ratio", prep.ratio, "Per-user test fraction")->capture_default_str();
  prep_cmd->add_option("--seed", prep.seed, "Split seed")->capture_default_str();
  prep_cmd->add_option("--out", prep.out, "Output directory")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one run (flags override --config)");
  train_cmd->add_option("--config", tr.config, "RunConfig JSON file");
  train_cmd->add_option("--data", tr.data, "Prepared dataset directory");
  train_cmd->add_option("--out", tr.out, "Run directory")->capture_default_str();
  train_cmd->add_option("--run-id", tr.run_id, "Run identifier written to metrics.csv");
  train_cmd->add_option("--method", tr.method, "Training method")
      ->check(CLI::IsMember({"dsl", "dense", "rp", "omp"}));
  train_cmd->add_option("--backbone", tr.backbone, "Scoring backbone")
      ->check(CLI::IsMember({"mf", "lightgcn"}));
  train_cmd->add_option("--layers", tr.layers, "LightGCN layers");
  train_cmd->add_option("--dim", tr.dim, "Embedding dimension");
  train_cmd->add_option("--sparsity", tr.sparsity, "Target sparsity s in [0,1)");
  train_cmd->add_option("--rho0", tr.rho0, "Initial update ratio");
  train_cmd->add_option("--delta-t", tr.delta_t, "Iterations between explorations");
  train_cmd->add_option("--t-end", tr.t_end, "Total iterations");
  train_cmd->add_option("--decay", tr.decay, "Update-ratio decay")
      ->check(CLI::IsMember({"cosine", "linear", "none"}));
  train_cmd->add_option("--optimizer", tr.optimizer, "Optimizer")
      ->check(CLI::IsMember({"sgd", "adam"}));
  train_cmd->add_option("--lr", tr.lr, "Learning rate");
  train_cmd->add_option("--l2", tr.l2, "L2 regularization on touched embeddings");
  train_cmd->add_option("--init-std", tr.init_std, "Stddev of the normal weight init");
  train_cmd->add_option("--batch-size", tr.batch_size, "Triples per batch");
  train_cmd->add_option("--eval-every", tr.eval_every, "Evaluation cadence (iterations)");
  train_cmd->add_option("--k", tr.k, "Ranking cutoff");
  train_cmd->add_option("--seed", tr.seed, "Run seed");
  train_cmd->add_option("--finetune-iters", tr.finetune_iters, "OMP fine-tune iterations");
  train_cmd->add_option("--dense-checkpoint", tr.dense_checkpoint, "OMP: reuse a dense checkpoint");
  train_cmd->add_flag("--verbose-log", tr.verbose_log, "Log full prune/grow position lists");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run a sparsity x method x seed sweep");
  sweep_cmd->add_option("spec", sw.spec, "SweepSpec JSON file")->required()->check(CLI::ExistingFile);
  sweep_cmd->add_option("--data", sw.data, "Prepared dataset directory (overrides spec)");
  sweep_cmd->add_option("--out", sw.out, "Sweep directory")->capture_default_str();
  sweep_cmd->add_flag("--resume", sw.resume, "Skip cells that already finished");
  sweep_cmd->add_option("--workers", sw.workers, "Parallel cells")->capture_default_str();

  ProfileArgs pr;
  auto* profile_cmd = app.add_subcommand("profile", "Sparsity by popularity group for a run");
  profile_cmd->add_option("run_dir", pr.run_dir, "Run directory")->required();
  profile_cmd->add_option("--groups", pr.groups, "Number of popularity groups")->capture_default_str();
  profile_cmd->add_option("--data", pr.data, "Dataset directory (default: from config.json)");

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "Summarize a run or sweep directory");
  report_cmd->add_option("dir", rep.dir, "Run or sweep directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth_cmd) return cmd_synth(synth);
    if (*prep_cmd) return cmd_prepare(prep);
    if (*train_cmd) return cmd_train(tr, *train_cmd);
    if (*sweep_cmd) return cmd_sweep(sw);
    if (*profile_cmd) return cmd_profile(pr);
    if (*report_cmd) return cmd_report(rep);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const TrainingAborted& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
