#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "dslrec/common.hpp"
#include "dslrec/cost.hpp"
#include "dslrec/dataset.hpp"
#include "dslrec/embedding.hpp"
#include "dslrec/evaluation.hpp"
#include "dslrec/exploration.hpp"
#include "dslrec/models.hpp"

namespace dslrec {

enum class Method { dsl, dense, rp, omp };

inline Method parse_method(std::string_view name) {
  if (name == "dsl") return Method::dsl;
  if (name == "dense") return Method::dense;
  if (name == "rp") return Method::rp;
  if (name == "omp") return Method::omp;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::dsl: return "dsl";
    case Method::dense: return "dense";
    case Method::rp: return "rp";
    case Method::omp: return "omp";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

inline std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adam";
}

struct RunConfig {
  std::string run_id = "run";
  Method method = Method::dsl;
  BackboneKind backbone = BackboneKind::mf;
  std::size_t layers = 3;
  std::size_t dim = 64;
  double sparsity = 0.5;
  ExplorationSchedule schedule;
  OptimizerConfig optimizer;
  Real l2 = 1e-4;
  Real init_std = 0.01;
  std::size_t batch_size = 2048;
  std::size_t eval_every = 0;  // 0: use schedule.delta_t
  std::size_t eval_k = 20;
  std::uint64_t seed = 0;
  std::size_t finetune_iters = 0;  // omp only; 0: same as t_end
  std::string dense_checkpoint;    // omp only; empty: train the dense phase inline
  std::string data_dir;
  bool verbose_log = false;

  double effective_sparsity() const { return method == Method::dense ? 0.0 : sparsity; }
  std::size_t effective_eval_every() const {
    return eval_every == 0 ? schedule.delta_t : eval_every;
  }
  std::size_t effective_finetune_iters() const {
    return finetune_iters == 0 ? schedule.t_end : finetune_iters;
  }

  void validate() const {
    schedule.validate();
    if (method != Method::dense) check_sparsity(sparsity);
    if (dim == 0) throw ConfigError("embedding dimension must be at least 1");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (eval_k == 0) throw ConfigError("eval k must be at least 1");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (l2 < 0.0) throw ConfigError("l2 must be nonnegative");
    if (backbone == BackboneKind::lightgcn && layers == 0) {
      throw ConfigError("lightgcn needs at least one layer");
    }
  }

  nlohmann::json to_json() const {
    return {{"run_id", run_id},
            {"method", to_string(method)},
            {"backbone", {{"kind", to_string(backbone)}, {"layers", layers}}},
            {"dim", dim},
            {"sparsity", effective_sparsity()},
            {"schedule",
             {{"rho0", schedule.rho0},
              {"delta_t", schedule.delta_t},
              {"t_end", schedule.t_end},
              {"decay", to_string(schedule.decay)}}},
            {"optimizer",
             {{"kind", to_string(optimizer.kind)},
              {"lr", optimizer.learning_rate},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"epsilon", optimizer.epsilon}}},
            {"l2", l2},
            {"init_std", init_std},
            {"batch_size", batch_size},
            {"eval_every", effective_eval_every()},
            {"eval_k", eval_k},
            {"seed", seed},
            {"finetune_iters", method == Method::omp ? effective_finetune_iters() : 0},
            {"dense_checkpoint", dense_checkpoint},
            {"data_dir", data_dir},
            {"verbose_log", verbose_log}};
  }

  // Missing keys keep the current values, so a partial file layers over defaults.
  void merge_json(const nlohmann::json& j) {
    try {
      if (j.contains("run_id")) run_id = j["run_id"].get<std::string>();
      if (j.contains("method")) method = parse_method(j["method"].get<std::string>());
      if (j.contains("backbone")) {
        const auto& b = j["backbone"];
        if (b.is_string()) {
          backbone = parse_backbone(b.get<std::string>());
        } else {
          if (b.contains("kind")) backbone = parse_backbone(b["kind"].get<std::string>());
          if (b.contains("layers")) layers = b["layers"].get<std::size_t>();
        }
      }
      if (j.contains("layers")) layers = j["layers"].get<std::size_t>();
      if (j.contains("dim")) dim = j["dim"].get<std::size_t>();
      if (j.contains("sparsity")) sparsity = j["sparsity"].get<double>();
      if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        if (s.contains("rho0")) schedule.rho0 = s["rho0"].get<double>();
        if (s.contains("delta_t")) schedule.delta_t = s["delta_t"].get<std::size_t>();
        if (s.contains("t_end")) schedule.t_end = s["t_end"].get<std::size_t>();
        if (s.contains("decay")) schedule.decay = parse_decay(s["decay"].get<std::string>());
      }
      if (j.contains("optimizer")) {
        const auto& o = j["optimizer"];
        if (o.contains("kind")) optimizer.kind = parse_optimizer(o["kind"].get<std::string>());
        if (o.contains("lr")) optimizer.learning_rate = o["lr"].get<Real>();
        if (o.contains("beta1")) optimizer.beta1 = o["beta1"].get<Real>();
        if (o.contains("beta2")) optimizer.beta2 = o["beta2"].get<Real>();
        if (o.contains("epsilon")) optimizer.epsilon = o["epsilon"].get<Real>();
      }
      if (j.contains("l2")) l2 = j["l2"].get<Real>();
      if (j.contains("init_std")) init_std = j["init_std"].get<Real>();
      if (j.contains("batch_size")) batch_size = j["batch_size"].get<std::size_t>();
      if (j.contains("eval_every")) eval_every = j["eval_every"].get<std::size_t>();
      if (j.contains("eval_k")) eval_k = j["eval_k"].get<std::size_t>();
      if (j.contains("seed")) seed = j["seed"].get<std::uint64_t>();
      if (j.contains("finetune_iters")) finetune_iters = j["finetune_iters"].get<std::size_t>();
      if (j.contains("dense_checkpoint"))
        dense_checkpoint = j["dense_checkpoint"].get<std::string>();
      if (j.contains("data_dir")) data_dir = j["data_dir"].get<std::string>();
      if (j.contains("verbose_log")) verbose_log = j["verbose_log"].get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad run config: ") + e.what());
    }
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig cfg;
    cfg.merge_json(j);
    return cfg;
  }
};

struct MetricsRow {
  std::string run_id;
  std::size_t iteration = 0;
  MetricsReport metrics;
  double sparsity = 0.0;
  double macs_train_cum = 0.0;
  double macs_infer = 0.0;
};

inline constexpr std::string_view kMetricsHeader =
    "run_id,iteration,k,recall,ndcg,hr,sparsity,macs_train_cum,macs_infer";

inline std::string format_metrics_row(const MetricsRow& r) {
  return fmt::format("{},{},{},{:.8f},{:.8f},{:.8f},{:.8f},{:.0f},{:.0f}", r.run_id, r.iteration,
                     r.metrics.k, r.metrics.recall, r.metrics.ndcg, r.metrics.hr, r.sparsity,
                     r.macs_train_cum, r.macs_infer);
}

struct IterationView {
  std::size_t t;
  const EmbeddingTable& table;
  const SparseMask& mask;
  const ExplorationEvent* event;  // non-null on exploration iterations
  double loss;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;
  std::optional<SplitManifest> manifest;
  std::function<void(const IterationView&)> observer;
};

struct RunResult {
  EmbeddingTable table;
  SparseMask mask;
  SparseMask initial_mask;
  std::vector<MetricsRow> metrics;
  std::vector<ExplorationEvent> events;
  std::vector<double> losses;  // one per iteration, in order
  CostReport cost;
  std::optional<EmbeddingTable> dense_table;  // omp: table the mask was cut from
};

// A run that stopped on a non-finite loss or gradient. The state before the
// failing iteration is left in `last_good`.
class TrainingAborted : public Error {
 public:
  TrainingAborted(const std::string& what, std::size_t t, EmbeddingTable table, SparseMask mask)
      : Error("training aborted at iteration " + std::to_string(t) + ": " + what),
        iteration(t),
        last_good{std::move(table), std::move(mask), nlohmann::json::object()} {}
  std::size_t iteration;
  Checkpoint last_good;
};

namespace detail {

class Session {
 public:
  Session(const RunConfig& cfg, const InteractionDataset& ds, const TrainOptions& opts)
      : cfg_(cfg),
        ds_(ds),
        opts_(opts),
        backbone_(cfg.backbone == BackboneKind::lightgcn ? Backbone::lightgcn(ds, cfg.layers)
                                                         : Backbone::mf()),
        nnz_adj_(2 * ds.train_edges().size()),
        cost_model_(IterationCostModel::bpr(cfg.backbone, cfg.batch_size, cfg.dim,
                                            cfg.layers, nnz_adj_)),
        batch_rng_(make_stream(cfg.seed, 3)) {}

  // Random normal table; random mask from the run's mask stream unless dense.
  void initialize(bool dense, double s) {
    table_ = EmbeddingTable(ds_.num_users(), ds_.num_items(), cfg_.dim);
    Rng init_rng = make_stream(cfg_.seed, 2);
    init_normal(table_, cfg_.init_std, init_rng);
    if (dense) {
      mask_ = SparseMask::dense(table_.rows(), table_.dim());
    } else {
      Rng mask_rng = make_stream(cfg_.seed, 1);
      mask_ = random_prune_once(table_, s, mask_rng);
    }
    reset_optimizer();
  }

  void reset_optimizer() { opt_ = OptimizerState(cfg_.optimizer, table_.rows(), table_.dim()); }
  void reseed_batches(std::uint64_t stream) { batch_rng_ = make_stream(cfg_.seed, stream); }

  // Iterations t_begin+1 .. t_begin+count. Exploration fires per `sched`
  // when `explore` is set; otherwise every iteration is a sparse step.
  void run_phase(std::size_t t_begin, std::size_t count, bool explore,
                 const ExplorationSchedule& sched, std::size_t final_t) {
    Matrix grad = Matrix::Zero(table_.weights.rows(), table_.weights.cols());
    const double s = mask_.target_sparsity();
    const std::size_t every = cfg_.effective_eval_every();
    for (std::size_t t = t_begin + 1; t <= t_begin + count; ++t) {
      const TrainBatch batch = sample_batch(ds_, cfg_.batch_size, batch_rng_);
      double loss = 0.0;
      const ExplorationEvent* event = nullptr;
      try {
        if (explore && sched.fires_at(t - t_begin)) {
          auto grad_fn = [&](const EmbeddingTable& table, const SparseMask&) -> const Matrix& {
            grad.setZero();
            loss = accumulate_bpr(backbone_, table.weights, table.num_users, batch, cfg_.l2,
                                  grad);
            return grad;
          };
          result_.events.push_back(
              exploration_step(table_, mask_, opt_, sched, t - t_begin, grad_fn));
          event = &result_.events.back();
          result_.cost.macs_train += cost_model_.step_macs();
          if (log_) *log_ << event->to_json(cfg_.verbose_log).dump() << '\n';
        } else {
          grad.setZero();
          loss = accumulate_bpr(backbone_, table_.weights, table_.num_users, batch, cfg_.l2,
                                grad);
          masked_step(table_, grad, mask_, opt_);
          result_.cost.macs_train += cost_model_.step_macs() * (1.0 - s);
        }
      } catch (const NumericError& e) {
        if (opts_.out_dir) {
          save_checkpoint(*opts_.out_dir / "checkpoint.last_good", table_, mask_);
        }
        throw TrainingAborted(e.what(), t, table_, mask_);
      }
      result_.losses.push_back(loss);
      if (opts_.observer) opts_.observer({t, table_, mask_, event, loss});
      if (t % every == 0 || t == final_t) record_metrics(t);
    }
  }

  void record_metrics(std::size_t t) {
    MetricsRow row;
    row.run_id = cfg_.run_id;
    row.iteration = t;
    row.metrics = evaluate(backbone_, table_, mask_, ds_, cfg_.eval_k);
    row.sparsity = mask_.sparsity();
    row.macs_train_cum = result_.cost.macs_train;
    row.macs_infer = inference_macs();
    result_.metrics.push_back(row);
  }

  double inference_macs() const {
    return macs_inference(cfg_.backbone, ds_.num_users(), ds_.num_items(), cfg_.dim,
                          cfg_.backbone == BackboneKind::lightgcn ? cfg_.layers : 0, nnz_adj_,
                          mask_.target_sparsity());
  }

  void open_log() {
    if (!opts_.out_dir) return;
    std::filesystem::create_directories(*opts_.out_dir);
    log_.emplace(*opts_.out_dir / "exploration.jsonl");
  }

  RunResult finish() {
    result_.cost.macs_infer = inference_macs();
    result_.cost.memory_bytes =
        memory_bytes(mask_.size(), mask_.active_count(), cfg_.method != Method::dense);
    result_.table = table_;
    result_.mask = mask_;
    if (opts_.out_dir) write_artifacts(*opts_.out_dir);
    return std::move(result_);
  }

  EmbeddingTable& table() { return table_; }
  SparseMask& mask() { return mask_; }
  RunResult& result() { return result_; }

 private:
  void write_artifacts(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << cfg_.to_json().dump(2) << '\n';
    {
      std::ofstream csv(dir / "metrics.csv");
      csv << kMetricsHeader << '\n';
      for (const auto& row : result_.metrics) csv << format_metrics_row(row) << '\n';
    }
    const nlohmann::json meta = {{"iterations", result_.losses.size()},
                                 {"macs_train_cum", result_.cost.macs_train},
                                 {"macs_infer", result_.cost.macs_infer},
                                 {"memory_bytes", result_.cost.memory_bytes}};
    save_checkpoint(dir / "checkpoint.final", table_, mask_, meta);
    const auto manifest = opts_.manifest ? *opts_.manifest : SplitManifest::describe(ds_);
    std::ofstream(dir / "split_manifest.json") << manifest.to_json().dump(2) << '\n';
  }

  const RunConfig& cfg_;
  const InteractionDataset& ds_;
  const TrainOptions& opts_;
  Backbone backbone_;
  std::size_t nnz_adj_;
  IterationCostModel cost_model_;
  Rng batch_rng_;
  EmbeddingTable table_;
  SparseMask mask_;
  OptimizerState opt_;
  RunResult result_;
  std::optional<std::ofstream> log_;
};

}  // namespace detail

inline RunResult run_omp_pipeline(const RunConfig& cfg, const InteractionDataset& ds,
                                  const TrainOptions& opts = {});

// Runs exactly t_end iterations. For method dsl, iterations with
// t mod delta_t == 0 (0 < t < t_end) prune and regrow the mask; every other
// iteration samples a batch and takes a masked optimizer step.
inline RunResult train(const RunConfig& cfg, const InteractionDataset& ds,
                       const TrainOptions& opts = {}) {
  cfg.validate();
  if (cfg.method == Method::omp) return run_omp_pipeline(cfg, ds, opts);
  detail::Session session(cfg, ds, opts);
  session.initialize(cfg.method == Method::dense, cfg.effective_sparsity());
  session.result().initial_mask = session.mask();
  session.open_log();
  session.run_phase(0, cfg.schedule.t_end, cfg.method == Method::dsl, cfg.schedule,
                    cfg.schedule.t_end);
  return session.finish();
}

// Dense training to t_end (or a supplied dense checkpoint), one-shot
// magnitude pruning to the target sparsity, then fine-tuning the fixed mask.
inline RunResult run_omp_pipeline(const RunConfig& cfg, const InteractionDataset& ds,
                                  const TrainOptions& opts) {
  cfg.validate();
  if (cfg.method != Method::omp) throw ConfigError("run_omp_pipeline needs method omp");
  detail::Session session(cfg, ds, opts);
  session.open_log();

  const std::size_t t0 = cfg.schedule.t_end;
  const std::size_t final_t = cfg.schedule.t_end + cfg.effective_finetune_iters();
  if (cfg.dense_checkpoint.empty()) {
    session.initialize(true, 0.0);
    session.result().initial_mask = session.mask();
    session.run_phase(0, cfg.schedule.t_end, false, cfg.schedule, final_t);
  } else {
    auto ck = load_checkpoint(cfg.dense_checkpoint);
    if (ck.table.num_users != ds.num_users() || ck.table.num_items != ds.num_items() ||
        ck.table.dim() != cfg.dim) {
      throw ConfigError("dense checkpoint does not match dataset and dim");
    }
    if (ck.mask.active_count() != ck.mask.size()) {
      throw ConfigError("checkpoint " + cfg.dense_checkpoint + " is not dense");
    }
    session.initialize(true, 0.0);
    session.table() = std::move(ck.table);
    session.result().initial_mask = session.mask();
    session.result().cost.macs_train = ck.meta.value("macs_train_cum", 0.0);
  }

  auto& table = session.table();
  session.result().dense_table = table;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    save_checkpoint(*opts.out_dir / "checkpoint.dense", table, session.mask());
  }
  session.mask() = one_shot_magnitude_prune(table, cfg.sparsity);
  apply_mask(table, session.mask());
  session.reset_optimizer();
  // Fine-tuning draws from its own stream, so a supplied dense checkpoint and
  // an inline dense phase lead to the same run.
  session.reseed_batches(4);
  session.run_phase(t0, cfg.effective_finetune_iters(), false, cfg.schedule, final_t);
  return session.finish();
}

}  // namespace dslrec
