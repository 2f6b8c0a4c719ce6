#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "dslrec/dataset.hpp"
#include "dslrec/evaluation.hpp"
#include "dslrec/trainer.hpp"

namespace dslrec {

struct SweepCell {
  Method method;
  double sparsity;
  std::uint64_t seed;

  std::string name() const {
    return fmt::format("{}_s{:.3f}_seed{}", to_string(method), sparsity, seed);
  }
};

struct SweepSpec {
  RunConfig base;
  std::vector<double> sparsities;
  std::vector<Method> methods;
  std::vector<std::uint64_t> seeds;

  void validate() const {
    if (sparsities.empty() || methods.empty() || seeds.empty()) {
      throw ConfigError("sweep needs at least one sparsity, method and seed");
    }
    for (double s : sparsities) check_sparsity(s);
  }

  // Sparsity-major, then method, then seed, each in declaration order.
  std::vector<SweepCell> cells() const {
    std::vector<SweepCell> out;
    for (double s : sparsities)
      for (Method m : methods)
        for (auto seed : seeds) out.push_back({m, s, seed});
    return out;
  }

  RunConfig config_for(const SweepCell& cell) const {
    RunConfig cfg = base;
    cfg.method = cell.method;
    cfg.sparsity = cell.sparsity;
    cfg.seed = cell.seed;
    cfg.run_id = cell.name();
    return cfg;
  }

  static SweepSpec from_json(const nlohmann::json& j) {
    SweepSpec spec;
    try {
      if (j.contains("base")) spec.base.merge_json(j.at("base"));
      for (const auto& s : j.at("sparsities")) spec.sparsities.push_back(s.get<double>());
      for (const auto& m : j.at("methods")) spec.methods.push_back(parse_method(m.get<std::string>()));
      for (const auto& s : j.at("seeds")) spec.seeds.push_back(s.get<std::uint64_t>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad sweep spec: ") + e.what());
    }
    spec.validate();
    return spec;
  }
};

struct CellResult {
  SweepCell cell;
  bool ok = false;
  bool resumed = false;
  std::string status;
  MetricsReport metrics;
  CostReport cost;

  nlohmann::json to_json() const {
    return {{"status", status},       {"recall", metrics.recall},
            {"ndcg", metrics.ndcg},   {"hr", metrics.hr},
            {"k", metrics.k},         {"macs_train", cost.macs_train},
            {"macs_infer", cost.macs_infer}, {"memory", cost.memory_bytes}};
  }
};

struct SweepOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  std::size_t workers = 1;
};

struct SweepGroup {
  Method method;
  double sparsity;
  std::size_t seed_count = 0;
  double recall_mean = 0.0, recall_std = 0.0;
  double ndcg_mean = 0.0, ndcg_std = 0.0;
  double macs_train = 0.0, macs_infer = 0.0, memory = 0.0;
};

// Mean and sample std (n-1) over successful seeds; std is 0 for one seed.
inline std::vector<SweepGroup> aggregate(const SweepSpec& spec,
                                         const std::vector<CellResult>& results) {
  std::vector<SweepGroup> groups;
  for (double s : spec.sparsities) {
    for (Method m : spec.methods) {
      SweepGroup g{m, s};
      std::vector<const CellResult*> ok;
      for (const auto& r : results)
        if (r.ok && r.cell.method == m && r.cell.sparsity == s) ok.push_back(&r);
      g.seed_count = ok.size();
      if (!ok.empty()) {
        const double n = static_cast<double>(ok.size());
        for (const auto* r : ok) {
          g.recall_mean += r->metrics.recall / n;
          g.ndcg_mean += r->metrics.ndcg / n;
          g.macs_train += r->cost.macs_train / n;
          g.macs_infer += r->cost.macs_infer / n;
          g.memory += r->cost.memory_bytes / n;
        }
        if (ok.size() > 1) {
          for (const auto* r : ok) {
            g.recall_std += std::pow(r->metrics.recall - g.recall_mean, 2) / (n - 1);
            g.ndcg_std += std::pow(r->metrics.ndcg - g.ndcg_mean, 2) / (n - 1);
          }
          g.recall_std = std::sqrt(g.recall_std);
          g.ndcg_std = std::sqrt(g.ndcg_std);
        }
      }
      groups.push_back(g);
    }
  }
  return groups;
}

inline std::string format_group(const SweepGroup& g) {
  return fmt::format("{},{:.3f},{},{:.8f},{:.8f},{:.8f},{:.8f},{:.0f},{:.0f},{:.0f}",
                     to_string(g.method), g.sparsity, g.seed_count, g.recall_mean,
                     g.recall_std, g.ndcg_mean, g.ndcg_std, g.macs_train, g.macs_infer,
                     g.memory);
}

inline constexpr std::string_view kSweepGroupHeader =
    "method,sparsity,seed_count,recall_mean,recall_std,ndcg_mean,ndcg_std,macs_train,"
    "macs_infer,memory";

// sweep.csv carries one row per cell (group aggregates + the cell's own
// seed, status and metrics); sweep_summary.csv one row per (method, sparsity).
inline void write_sweep_reports(const std::filesystem::path& dir, const SweepSpec& spec,
                                 const std::vector<CellResult>& results) {
  const auto groups = aggregate(spec, results);
  auto group_of = [&](const SweepCell& c) -> const SweepGroup& {
    for (const auto& g : groups)
      if (g.method == c.method && g.sparsity == c.sparsity) return g;
    throw Error("cell without group");
  };
  std::ofstream csv(dir / "sweep.csv");
  csv << kSweepGroupHeader << ",seed,status,recall,ndcg\n";
  for (const auto& r : results) {
    csv << format_group(group_of(r.cell))
        << fmt::format(",{},{},{:.8f},{:.8f}\n", r.cell.seed, r.status, r.metrics.recall,
                       r.metrics.ndcg);
  }
  std::ofstream summary(dir / "sweep_summary.csv");
  summary << kSweepGroupHeader << '\n';
  for (const auto& g : groups) summary << format_group(g) << '\n';
}

inline std::optional<CellResult> load_finished_cell(const std::filesystem::path& dir,
                                                    const SweepCell& cell) {
  const auto path = dir / "result.json";
  if (!std::filesystem::exists(path)) return std::nullopt;
  const auto j = nlohmann::json::parse(std::ifstream(path));
  if (j.value("status", "") != "ok") return std::nullopt;
  CellResult r;
  r.cell = cell;
  r.ok = true;
  r.resumed = true;
  r.status = "ok";
  r.metrics.k = j.at("k").get<std::size_t>();
  r.metrics.recall = j.at("recall").get<double>();
  r.metrics.ndcg = j.at("ndcg").get<double>();
  r.metrics.hr = j.at("hr").get<double>();
  r.cost.macs_train = j.at("macs_train").get<double>();
  r.cost.macs_infer = j.at("macs_infer").get<double>();
  r.cost.memory_bytes = j.at("memory").get<double>();
  return r;
}

// Runs every cell into out_dir/cells/<name>/. A failing cell is recorded
// with its error and the sweep moves on.
inline std::vector<CellResult> run_sweep(const SweepSpec& spec, const InteractionDataset& ds,
                                         const SweepOptions& opts) {
  spec.validate();
  const auto cells = spec.cells();
  std::vector<CellResult> results(cells.size());
  std::filesystem::create_directories(opts.out_dir / "cells");

  auto run_cell = [&](std::size_t idx) {
    const auto& cell = cells[idx];
    const auto dir = opts.out_dir / "cells" / cell.name();
    if (opts.resume) {
      if (auto done = load_finished_cell(dir, cell)) {
        results[idx] = *done;
        return;
      }
    }
    CellResult r;
    r.cell = cell;
    try {
      TrainOptions topts;
      topts.out_dir = dir;
      const auto run = train(spec.config_for(cell), ds, topts);
      r.ok = true;
      r.status = "ok";
      r.metrics = run.metrics.back().metrics;
      r.cost = run.cost;
    } catch (const std::exception& e) {
      r.status = std::string("failed: ") + e.what();
      std::replace(r.status.begin(), r.status.end(), ',', ';');
      std::replace(r.status.begin(), r.status.end(), '\n', ' ');
    }
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "result.json") << r.to_json().dump(2) << '\n';
    results[idx] = r;
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, cells.size()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  write_sweep_reports(opts.out_dir, spec, results);
  return results;
}

struct RunProfile {
  SparsityProfile users;
  SparsityProfile items;
  std::optional<double> users_correlation;
  std::optional<double> items_correlation;
};

inline RunProfile profile_run(const SparseMask& mask, const InteractionDataset& ds,
                              std::size_t groups) {
  RunProfile p;
  p.users = sparsity_profile(mask, ds, Side::users, std::min(groups, ds.num_users()));
  p.items = sparsity_profile(mask, ds, Side::items, std::min(groups, ds.num_items()));
  p.users_correlation = popularity_sparsity_correlation(p.users);
  p.items_correlation = popularity_sparsity_correlation(p.items);
  return p;
}

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

// Writes profile.csv and profile.json next to a finished run.
inline RunProfile write_profile(const std::filesystem::path& run_dir, std::size_t groups,
                                const std::optional<std::filesystem::path>& data_dir = {}) {
  const auto ck_path = run_dir / "checkpoint.final";
  if (!std::filesystem::exists(ck_path)) {
    throw ConfigError("no checkpoint in " + run_dir.string());
  }
  std::filesystem::path data = data_dir.value_or("");
  if (data.empty()) {
    const auto cfg = nlohmann::json::parse(std::ifstream(run_dir / "config.json"));
    data = cfg.value("data_dir", "");
    if (data.empty()) throw ConfigError("run config has no data_dir; pass one explicitly");
  }
  const auto ds = load_split(data);
  const auto ck = load_checkpoint(ck_path);
  if (ck.mask.rows() != ds.num_nodes()) throw ConfigError("checkpoint does not match dataset");
  auto p = profile_run(ck.mask, ds, groups);

  std::ofstream csv(run_dir / "profile.csv");
  csv << "group_id,side,mean_popularity,mean_sparsity\n";
  for (const auto* prof : {&p.users, &p.items}) {
    for (const auto& g : prof->groups) {
      csv << fmt::format("{},{},{:.6f},{:.8f}\n", g.group_id, to_string(prof->side),
                         g.mean_popularity, g.mean_sparsity);
    }
  }
  const nlohmann::json summary = {{"groups", groups},
                                  {"users_spearman", optional_json(p.users_correlation)},
                                  {"items_spearman", optional_json(p.items_correlation)}};
  std::ofstream(run_dir / "profile.json") << summary.dump(2) << '\n';
  return p;
}

}  // namespace dslrec
