#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/SparseCore>

#include "dslrec/common.hpp"
#include "dslrec/dataset.hpp"
#include "dslrec/embedding.hpp"

namespace dslrec {

enum class BackboneKind { mf, lightgcn };

inline BackboneKind parse_backbone(std::string_view name) {
  if (name == "mf") return BackboneKind::mf;
  if (name == "lightgcn") return BackboneKind::lightgcn;
  throw ConfigError("unknown backbone '" + std::string(name) + "'");
}

inline std::string_view to_string(BackboneKind k) {
  return k == BackboneKind::mf ? "mf" : "lightgcn";
}

// Symmetric-normalized bipartite adjacency D^-1/2 A D^-1/2 over the N+M
// nodes. A node without train edges gets a unit self-loop, so it carries its
// own layer-0 row through every layer.
class NormalizedAdjacency {
 public:
  using Sparse = Eigen::SparseMatrix<Real, Eigen::RowMajor>;

  NormalizedAdjacency(std::size_t num_users, std::size_t num_items,
                      const std::vector<Edge>& edges)
      : edge_nonzeros_(2 * edges.size()) {
    const std::size_t n = num_users + num_items;
    std::vector<Real> deg(n, 0.0);
    for (const auto& e : edges) {
      deg[e.user] += 1.0;
      deg[num_users + e.item] += 1.0;
    }
    std::vector<Eigen::Triplet<Real>> trip;
    trip.reserve(edge_nonzeros_ + n);
    for (const auto& e : edges) {
      const std::size_t a = e.user, b = num_users + e.item;
      const Real w = 1.0 / std::sqrt(deg[a] * deg[b]);
      trip.emplace_back(static_cast<int>(a), static_cast<int>(b), w);
      trip.emplace_back(static_cast<int>(b), static_cast<int>(a), w);
    }
    for (std::size_t v = 0; v < n; ++v) {
      if (deg[v] == 0.0) trip.emplace_back(static_cast<int>(v), static_cast<int>(v), 1.0);
    }
    matrix_.resize(static_cast<int>(n), static_cast<int>(n));
    matrix_.setFromTriplets(trip.begin(), trip.end());
  }

  const Sparse& matrix() const noexcept { return matrix_; }
  // Nonzeros contributed by interactions (self-loops excluded).
  std::size_t edge_nonzeros() const noexcept { return edge_nonzeros_; }

 private:
  Sparse matrix_;
  std::size_t edge_nonzeros_;
};

struct Backbone {
  BackboneKind kind = BackboneKind::mf;
  std::size_t layers = 0;
  std::shared_ptr<const NormalizedAdjacency> adjacency;

  static Backbone mf() { return {}; }

  static Backbone lightgcn(const InteractionDataset& ds, std::size_t layers) {
    return {BackboneKind::lightgcn, layers,
            std::make_shared<NormalizedAdjacency>(ds.num_users(), ds.num_items(),
                                                  ds.train_edges())};
  }
};

// Mean of E, AE, ..., A^L E.
inline Matrix lightgcn_propagate(const Backbone& cfg, const Matrix& e0) {
  if (cfg.kind != BackboneKind::lightgcn || !cfg.adjacency) {
    throw ConfigError("lightgcn_propagate needs a lightgcn backbone");
  }
  const auto& adj = cfg.adjacency->matrix();
  if (adj.rows() != e0.rows()) throw ConfigError("adjacency does not match table rows");
  Matrix sum = e0;
  Matrix layer = e0;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Matrix next = adj * layer;
    layer.swap(next);
    sum += layer;
  }
  return sum / static_cast<Real>(cfg.layers + 1);
}

// Embeddings that enter the inner product.
inline Matrix final_embeddings(const Backbone& cfg, const Matrix& weights) {
  return cfg.kind == BackboneKind::mf ? weights : lightgcn_propagate(cfg, weights);
}

inline Real score(const Backbone& cfg, const EmbeddingTable& table, UserId u, ItemId i) {
  if (cfg.kind == BackboneKind::mf) {
    return table.weights.row(table.user_row(u)).dot(table.weights.row(table.item_row(i)));
  }
  const Matrix f = lightgcn_propagate(cfg, table.weights);
  return f.row(table.user_row(u)).dot(f.row(table.item_row(i)));
}

// -ln sigmoid(x), stable for large |x|.
inline Real neg_log_sigmoid(Real x) {
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

// sigmoid(-x)
inline Real sigmoid_neg(Real x) {
  if (x >= 0.0) {
    const Real e = std::exp(-x);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(x));
}

// Adds the gradient of the mean BPR loss (plus l2/2 * mean squared norm of
// the layer-0 rows each triple touches) into `grad`, returning the loss.
// `weights` are used as given; mask them beforehand if needed.
inline Real accumulate_bpr(const Backbone& cfg, const Matrix& weights, std::size_t num_users,
                           const TrainBatch& batch, Real l2, Matrix& grad) {
  if (batch.triples.empty()) throw ConfigError("empty batch");
  if (grad.rows() != weights.rows() || grad.cols() != weights.cols()) {
    throw ConfigError("gradient accumulator shape does not match table");
  }
  const bool propagated = cfg.kind == BackboneKind::lightgcn;
  Matrix prop;
  if (propagated) prop = lightgcn_propagate(cfg, weights);
  const Matrix& f = propagated ? prop : weights;
  Matrix out_grad;
  if (propagated) out_grad = Matrix::Zero(weights.rows(), weights.cols());
  Matrix& g = propagated ? out_grad : grad;

  const Real scale = 1.0 / static_cast<Real>(batch.triples.size());
  Real loss = 0.0;
  for (const auto& tr : batch.triples) {
    const auto u = static_cast<Eigen::Index>(tr.user);
    const auto i = static_cast<Eigen::Index>(num_users + tr.pos);
    const auto j = static_cast<Eigen::Index>(num_users + tr.neg);
    const Real x = f.row(u).dot(f.row(i)) - f.row(u).dot(f.row(j));
    const Real term = neg_log_sigmoid(x);
    if (!std::isfinite(term)) {
      throw NumericError("non-finite loss for triple (" + std::to_string(tr.user) + ", " +
                         std::to_string(tr.pos) + ", " + std::to_string(tr.neg) + ")");
    }
    loss += term * scale;
    const Real dx = -sigmoid_neg(x) * scale;
    g.row(u) += dx * (f.row(i) - f.row(j));
    g.row(i) += dx * f.row(u);
    g.row(j) -= dx * f.row(u);
  }

  if (propagated) {
    // d/dE0 = 1/(L+1) * sum_l (A^T)^l G, with A symmetric.
    const auto& adj = cfg.adjacency->matrix();
    Matrix acc = out_grad;
    Matrix layer = out_grad;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      Matrix next = adj * layer;
      layer.swap(next);
      acc += layer;
    }
    grad += acc / static_cast<Real>(cfg.layers + 1);
  }

  if (l2 > 0.0) {
    for (const auto& tr : batch.triples) {
      for (std::size_t row : {std::size_t{tr.user}, num_users + tr.pos, num_users + tr.neg}) {
        const auto r = static_cast<Eigen::Index>(row);
        loss += 0.5 * l2 * scale * weights.row(r).squaredNorm();
        grad.row(r) += l2 * scale * weights.row(r);
      }
    }
  }
  return loss;
}

struct LossAndGrad {
  Real loss;
  Matrix grad;
};

// Scoring uses the masked table when a mask is given; the returned gradient
// is dense either way.
inline LossAndGrad bpr_loss_and_grad(const Backbone& cfg, const EmbeddingTable& table,
                                     const SparseMask* mask, const TrainBatch& batch,
                                     Real l2) {
  LossAndGrad out{0.0, Matrix::Zero(table.weights.rows(), table.weights.cols())};
  if (mask) {
    const auto masked = masked_copy(table, *mask);
    out.loss = accumulate_bpr(cfg, masked.weights, table.num_users, batch, l2, out.grad);
  } else {
    out.loss = accumulate_bpr(cfg, table.weights, table.num_users, batch, l2, out.grad);
  }
  return out;
}

}  // namespace dslrec
