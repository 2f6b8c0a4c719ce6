#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dslrec/common.hpp"

namespace dslrec {

// User rows 0..N-1 followed by item rows N..N+M-1, each of width d.
struct EmbeddingTable {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  Matrix weights;

  EmbeddingTable() = default;
  EmbeddingTable(std::size_t users, std::size_t items, std::size_t dim)
      : num_users(users), num_items(items), weights(Matrix::Zero(users + items, dim)) {}

  std::size_t rows() const noexcept { return num_users + num_items; }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(weights.cols()); }
  std::size_t size() const noexcept { return rows() * dim(); }
  std::size_t user_row(std::size_t u) const noexcept { return u; }
  std::size_t item_row(std::size_t i) const noexcept { return num_users + i; }

  Real& at(Position p) { return weights.data()[p]; }
  Real at(Position p) const { return weights.data()[p]; }
};

inline void init_normal(EmbeddingTable& table, Real stddev, Rng& rng) {
  std::normal_distribution<Real> dist(0.0, stddev);
  Real* w = table.weights.data();
  for (std::size_t p = 0; p < table.size(); ++p) w[p] = dist(rng);
}

// Binary companion of an embedding table, stored as a packed bitset.
class SparseMask {
 public:
  SparseMask() = default;
  SparseMask(std::size_t rows, std::size_t cols, double target_sparsity, bool all_active = false)
      : rows_(rows),
        cols_(cols),
        target_sparsity_(target_sparsity),
        words_((rows * cols + 63) / 64, 0) {
    if (all_active) {
      for (Position p = 0; p < size(); ++p) set(p);
    }
  }

  static SparseMask dense(std::size_t rows, std::size_t cols) {
    return SparseMask(rows, cols, 0.0, true);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return rows_ * cols_; }
  double target_sparsity() const noexcept { return target_sparsity_; }
  std::size_t active_count() const noexcept { return active_; }
  std::size_t inactive_count() const noexcept { return size() - active_; }
  double sparsity() const noexcept {
    return size() == 0 ? 0.0 : 1.0 - static_cast<double>(active_) / static_cast<double>(size());
  }

  bool test(Position p) const noexcept { return (words_[p >> 6] >> (p & 63)) & 1ULL; }

  void set(Position p) noexcept {
    auto& w = words_[p >> 6];
    const auto bit = 1ULL << (p & 63);
    active_ += (w & bit) ? 0 : 1;
    w |= bit;
  }

  void reset(Position p) noexcept {
    auto& w = words_[p >> 6];
    const auto bit = 1ULL << (p & 63);
    active_ -= (w & bit) ? 1 : 0;
    w &= ~bit;
  }

  // Recomputed popcount; equals active_count() unless the object is corrupt.
  std::size_t popcount() const noexcept {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }

  std::size_t row_active(std::size_t row) const noexcept {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += test(row * cols_ + c);
    return n;
  }

  std::vector<Position> active_positions() const {
    std::vector<Position> out;
    out.reserve(active_);
    for (Position p = 0; p < size(); ++p)
      if (test(p)) out.push_back(p);
    return out;
  }

  std::uint64_t word(std::size_t i) const noexcept { return words_[i]; }

  std::size_t storage_bytes() const noexcept { return (size() + 7) / 8; }

  friend bool operator==(const SparseMask& a, const SparseMask& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.words_ == b.words_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  double target_sparsity_ = 0.0;
  std::size_t active_ = 0;
  std::vector<std::uint64_t> words_;
};

// Exactly active_budget(rows*d, s) positions, uniform without replacement.
inline SparseMask init_mask(std::size_t rows, std::size_t dim, double s, Rng& rng) {
  check_sparsity(s);
  const std::size_t total = rows * dim;
  const std::size_t keep = active_budget(total, s);
  std::vector<Position> pool(total);
  std::iota(pool.begin(), pool.end(), Position{0});
  SparseMask mask(rows, dim, s);
  for (std::size_t k = 0; k < keep; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, total - 1);
    std::swap(pool[k], pool[pick(rng)]);
    mask.set(pool[k]);
  }
  return mask;
}

inline void check_shape(const EmbeddingTable& table, const SparseMask& mask) {
  if (table.rows() != mask.rows() || table.dim() != mask.cols()) {
    throw ConfigError("mask shape " + std::to_string(mask.rows()) + "x" +
                      std::to_string(mask.cols()) + " does not match table " +
                      std::to_string(table.rows()) + "x" + std::to_string(table.dim()));
  }
}

// In place: inactive positions become exactly zero.
inline void apply_mask(EmbeddingTable& table, const SparseMask& mask) {
  check_shape(table, mask);
  Real* w = table.weights.data();
  for (Position p = 0; p < table.size(); ++p)
    if (!mask.test(p)) w[p] = 0.0;
}

inline EmbeddingTable masked_copy(EmbeddingTable table, const SparseMask& mask) {
  apply_mask(table, mask);
  return table;
}

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
};

class OptimizerState {
 public:
  OptimizerState() = default;
  OptimizerState(const OptimizerConfig& config, std::size_t rows, std::size_t dim)
      : config_(config) {
    if (!(config.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (config.kind == OptimizerKind::adam) {
      m_ = Matrix::Zero(rows, dim);
      v_ = Matrix::Zero(rows, dim);
    }
  }

  const OptimizerConfig& config() const noexcept { return config_; }
  std::uint64_t step() const noexcept { return step_; }
  bool has_moments() const noexcept { return config_.kind == OptimizerKind::adam; }
  const Matrix& first_moment() const noexcept { return m_; }
  const Matrix& second_moment() const noexcept { return v_; }

  void reset(Position p) noexcept {
    if (!has_moments()) return;
    m_.data()[p] = 0.0;
    v_.data()[p] = 0.0;
  }

  Real first(Position p) const noexcept { return has_moments() ? m_.data()[p] : 0.0; }
  Real second(Position p) const noexcept { return has_moments() ? v_.data()[p] : 0.0; }
  void restore(Position p, Real m, Real v) noexcept {
    if (!has_moments()) return;
    m_.data()[p] = m;
    v_.data()[p] = v;
  }

 private:
  friend void masked_step(EmbeddingTable&, const Matrix&, const SparseMask&, OptimizerState&);

  OptimizerConfig config_;
  Matrix m_;
  Matrix v_;
  std::uint64_t step_ = 0;
};

// One optimizer update restricted to active positions. Inactive weights and
// their moments are forced to zero. Throws before touching anything if the
// gradient has a non-finite entry.
inline void masked_step(EmbeddingTable& table, const Matrix& grad, const SparseMask& mask,
                        OptimizerState& opt) {
  check_shape(table, mask);
  if (grad.rows() != table.weights.rows() || grad.cols() != table.weights.cols()) {
    throw ConfigError("gradient shape does not match table");
  }
  const std::size_t n = table.size();
  const Real* g = grad.data();
  if (!grad.allFinite()) {
    for (Position p = 0; p < n; ++p) {
      if (!std::isfinite(g[p])) {
        throw NumericError("non-finite gradient at row " + std::to_string(p / table.dim()) +
                           ", col " + std::to_string(p % table.dim()));
      }
    }
  }

  Real* w = table.weights.data();
  const auto& cfg = opt.config_;
  ++opt.step_;
  // Branch-free per 64-position block: keep[b] is 1.0 for active, 0.0 otherwise.
  alignas(64) Real keep[64];
  auto for_each_block = [&](auto&& update) {
    for (std::size_t base = 0; base < n; base += 64) {
      const std::uint64_t word = mask.word(base >> 6);
      const std::size_t len = std::min<std::size_t>(64, n - base);
      for (std::size_t b = 0; b < 64; ++b) keep[b] = static_cast<Real>((word >> b) & 1ULL);
      update(base, len);
    }
  };

  if (cfg.kind == OptimizerKind::sgd) {
    const Real lr = cfg.learning_rate;
    for_each_block([&](std::size_t base, std::size_t len) {
      Real* wb = w + base;
      const Real* gb = g + base;
      for (std::size_t b = 0; b < len; ++b) wb[b] = keep[b] * (wb[b] - lr * gb[b]);
    });
    return;
  }

  const Real t = static_cast<Real>(opt.step_);
  const Real b1 = cfg.beta1, b2 = cfg.beta2, eps = cfg.epsilon;
  const Real step = cfg.learning_rate / (1.0 - std::pow(b1, t));
  const Real inv_c2 = 1.0 / (1.0 - std::pow(b2, t));
  for_each_block([&](std::size_t base, std::size_t len) {
    Real* wb = w + base;
    Real* mb = opt.m_.data() + base;
    Real* vb = opt.v_.data() + base;
    const Real* gb = g + base;
    for (std::size_t b = 0; b < len; ++b) {
      const Real mp = keep[b] * (b1 * mb[b] + (1.0 - b1) * gb[b]);
      const Real vp = keep[b] * (b2 * vb[b] + (1.0 - b2) * gb[b] * gb[b]);
      mb[b] = mp;
      vb[b] = vp;
      wb[b] = keep[b] * (wb[b] - step * mp / (std::sqrt(vp * inv_c2) + eps));
    }
  });
}

// Table + mask persisted as active (row, col, value) triples in row-major order.
struct Checkpoint {
  EmbeddingTable table;
  SparseMask mask;
  nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json checkpoint_json(const EmbeddingTable& table, const SparseMask& mask,
                                      const nlohmann::json& meta = nlohmann::json::object()) {
  check_shape(table, mask);
  nlohmann::json active = nlohmann::json::array();
  const std::size_t d = table.dim();
  for (Position p = 0; p < table.size(); ++p) {
    if (mask.test(p)) active.push_back({p / d, p % d, table.at(p)});
  }
  return {{"format", "dslrec-checkpoint-v1"},
          {"d", d},
          {"num_users", table.num_users},
          {"num_items", table.num_items},
          {"sparsity", mask.target_sparsity()},
          {"meta", meta},
          {"active", std::move(active)}};
}

inline void save_checkpoint(const std::filesystem::path& path, const EmbeddingTable& table,
                            const SparseMask& mask,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << checkpoint_json(table, mask, meta).dump() << '\n';
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "dslrec-checkpoint-v1") {
    throw ConfigError("not a dslrec checkpoint");
  }
  const auto d = j.at("d").get<std::size_t>();
  Checkpoint ck;
  ck.table = EmbeddingTable(j.at("num_users").get<std::size_t>(),
                            j.at("num_items").get<std::size_t>(), d);
  ck.mask = SparseMask(ck.table.rows(), d, j.at("sparsity").get<double>());
  for (const auto& t : j.at("active")) {
    const auto row = t.at(0).get<std::size_t>();
    const auto col = t.at(1).get<std::size_t>();
    if (row >= ck.table.rows() || col >= d) throw ConfigError("checkpoint entry out of range");
    const Position p = row * d + col;
    ck.mask.set(p);
    ck.table.at(p) = t.at(2).get<Real>();
  }
  if (j.contains("meta")) ck.meta = j.at("meta");
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace dslrec
