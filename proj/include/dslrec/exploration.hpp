#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslrec/common.hpp"
#include "dslrec/embedding.hpp"

namespace dslrec {

enum class Decay { cosine, linear, none };

inline Decay parse_decay(std::string_view name) {
  if (name == "cosine") return Decay::cosine;
  if (name == "linear") return Decay::linear;
  if (name == "none") return Decay::none;
  throw ConfigError("unknown decay '" + std::string(name) + "'");
}

inline std::string_view to_string(Decay d) {
  switch (d) {
    case Decay::cosine: return "cosine";
    case Decay::linear: return "linear";
    case Decay::none: return "none";
  }
  return "?";
}

// Prune/grow cadence and the update-ratio decay. delta_t may exceed t_end,
// in which case no exploration ever fires.
struct ExplorationSchedule {
  double rho0 = 0.3;
  std::size_t delta_t = 2000;
  std::size_t t_end = 10000;
  Decay decay = Decay::cosine;

  void validate() const {
    if (!(rho0 >= 0.0 && rho0 < 1.0)) {
      throw ConfigError("rho0 must lie in [0, 1), got " + std::to_string(rho0));
    }
    if (delta_t < 1) throw ConfigError("delta_t must be at least 1");
    if (t_end < 1) throw ConfigError("t_end must be at least 1");
  }

  bool fires_at(std::size_t t) const noexcept {
    return t > 0 && t < t_end && t % delta_t == 0;
  }
};

inline double update_ratio(const ExplorationSchedule& sched, std::size_t t) {
  if (t > sched.t_end) {
    throw ConfigError("iteration " + std::to_string(t) + " beyond t_end " +
                      std::to_string(sched.t_end));
  }
  const double frac = static_cast<double>(t) / static_cast<double>(sched.t_end);
  switch (sched.decay) {
    case Decay::cosine: return sched.rho0 / 2.0 * (1.0 + std::cos(std::numbers::pi * frac));
    case Decay::linear: return sched.rho0 * (1.0 - frac);
    case Decay::none: return sched.rho0;
  }
  return sched.rho0;
}

namespace detail {

struct Keyed {
  Real key;
  Position pos;
};

// The k entries first under `before`, returned in ascending position order.
template <class Less>
std::vector<Position> take_first(std::vector<Keyed> cand, std::size_t k, Less before) {
  k = std::min(k, cand.size());
  if (k < cand.size()) {
    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                     before);
  }
  std::vector<Position> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(cand[i].pos);
  std::sort(out.begin(), out.end());
  return out;
}

inline bool smaller_magnitude(const Keyed& a, const Keyed& b) {
  return a.key < b.key || (a.key == b.key && a.pos < b.pos);
}

inline bool larger_magnitude(const Keyed& a, const Keyed& b) {
  return a.key > b.key || (a.key == b.key && a.pos < b.pos);
}

inline std::vector<Position> smallest_active(const EmbeddingTable& table,
                                             const SparseMask& mask, std::size_t k) {
  std::vector<Keyed> cand;
  cand.reserve(mask.active_count());
  for (Position p = 0; p < table.size(); ++p)
    if (mask.test(p)) cand.push_back({std::abs(table.at(p)), p});
  return take_first(std::move(cand), k, smaller_magnitude);
}

}  // namespace detail

// floor(rho * active) active positions of smallest |w|, ties to lower index.
inline std::vector<Position> select_prune(const EmbeddingTable& table, const SparseMask& mask,
                                          double rho) {
  check_shape(table, mask);
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("update ratio must lie in [0, 1]");
  const auto k =
      static_cast<std::size_t>(std::floor(rho * static_cast<double>(mask.active_count())));
  return detail::smallest_active(table, mask, k);
}

// k inactive positions of largest |grad|, ties to lower index. `excluded`
// (sorted) is never eligible.
inline std::vector<Position> select_grow(const Matrix& grad, const SparseMask& mask,
                                         std::size_t k,
                                         std::span<const Position> excluded = {}) {
  if (static_cast<std::size_t>(grad.size()) != mask.size()) {
    throw ConfigError("gradient shape does not match mask");
  }
  std::vector<detail::Keyed> cand;
  cand.reserve(mask.inactive_count());
  const Real* g = grad.data();
  for (Position p = 0; p < mask.size(); ++p) {
    if (mask.test(p) || std::binary_search(excluded.begin(), excluded.end(), p)) continue;
    if (!std::isfinite(g[p])) {
      throw NumericError("non-finite growth gradient at position " + std::to_string(p));
    }
    cand.push_back({std::abs(g[p]), p});
  }
  if (k > cand.size()) {
    throw ConfigError("cannot grow " + std::to_string(k) + " positions, only " +
                      std::to_string(cand.size()) + " eligible");
  }
  return detail::take_first(std::move(cand), k, detail::larger_magnitude);
}

struct ExplorationEvent {
  std::size_t t = 0;
  double rho = 0.0;
  std::vector<Position> pruned;
  std::vector<Position> grown;
  double sparsity_after = 0.0;

  nlohmann::json to_json(bool verbose = false) const {
    nlohmann::json j;
    j["t"] = t;
    j["rho_t"] = rho;
    if (verbose) {
      j["pruned"] = pruned;
      j["grown"] = grown;
    } else {
      j["pruned"] = pruned.size();
      j["grown"] = grown.size();
    }
    j["sparsity_after"] = sparsity_after;
    return j;
  }
};

// One prune-and-grow round. `grad_fn(table, mask)` must return a dense,
// table-shaped gradient computed after pruning. The prune count is capped by
// the number of inactive positions so that growth can always match it. If
// grad_fn throws, table, mask and optimizer are restored before rethrowing.
template <class GradFn>
ExplorationEvent exploration_step(EmbeddingTable& table, SparseMask& mask, OptimizerState& opt,
                                  const ExplorationSchedule& sched, std::size_t t,
                                  GradFn&& grad_fn) {
  check_shape(table, mask);
  if (t % sched.delta_t != 0 || t >= sched.t_end) {
    throw ConfigError("exploration requested at non-exploration iteration " +
                      std::to_string(t));
  }
  ExplorationEvent ev;
  ev.t = t;
  ev.rho = update_ratio(sched, t);
  const auto wanted =
      static_cast<std::size_t>(std::floor(ev.rho * static_cast<double>(mask.active_count())));
  const std::size_t k = std::min(wanted, mask.inactive_count());
  ev.pruned = detail::smallest_active(table, mask, k);

  struct Saved {
    Real w, m, v;
  };
  std::vector<Saved> saved;
  saved.reserve(k);
  for (Position p : ev.pruned) {
    saved.push_back({table.at(p), opt.first(p), opt.second(p)});
    table.at(p) = 0.0;
    mask.reset(p);
    opt.reset(p);
  }

  try {
    const Matrix grad = grad_fn(static_cast<const EmbeddingTable&>(table),
                                static_cast<const SparseMask&>(mask));
    ev.grown = select_grow(grad, mask, k, ev.pruned);
  } catch (...) {
    for (std::size_t n = 0; n < ev.pruned.size(); ++n) {
      const Position p = ev.pruned[n];
      table.at(p) = saved[n].w;
      mask.set(p);
      opt.restore(p, saved[n].m, saved[n].v);
    }
    throw;
  }

  for (Position p : ev.grown) {
    mask.set(p);
    table.at(p) = 0.0;
    opt.reset(p);
  }
  ev.sparsity_after = mask.sparsity();
  return ev;
}

// RP baseline: a random mask, applied once and never revisited.
inline SparseMask random_prune_once(EmbeddingTable& table, double s, Rng& rng) {
  auto mask = init_mask(table.rows(), table.dim(), s, rng);
  apply_mask(table, mask);
  return mask;
}

// OMP baseline: keep the active_budget(total, s) largest-|w| positions.
inline SparseMask one_shot_magnitude_prune(const EmbeddingTable& table, double s) {
  check_sparsity(s);
  std::vector<detail::Keyed> cand;
  cand.reserve(table.size());
  for (Position p = 0; p < table.size(); ++p) cand.push_back({std::abs(table.at(p)), p});
  const auto keep = detail::take_first(std::move(cand), active_budget(table.size(), s),
                                       detail::larger_magnitude);
  SparseMask mask(table.rows(), table.dim(), s);
  for (Position p : keep) mask.set(p);
  return mask;
}

}  // namespace dslrec
