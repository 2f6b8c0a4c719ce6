#pragma once

#include <cstddef>

#include "dslrec/common.hpp"
#include "dslrec/models.hpp"

namespace dslrec {

// Model-derived multiply-accumulate counts. Counts are doubles: full-scale
// figures exceed 2^64.
struct CostReport {
  double macs_train = 0.0;
  double macs_infer = 0.0;
  double memory_bytes = 0.0;
};

// One full ranking pass: propagation over the adjacency (lightgcn) plus the
// N x M similarity matrix, scaled by the active fraction.
inline double macs_inference(BackboneKind kind, std::size_t num_users, std::size_t num_items,
                             std::size_t dim, std::size_t layers, std::size_t nnz_adj,
                             double s) {
  check_sparsity(s);
  double base = static_cast<double>(num_users) * static_cast<double>(num_items);
  if (kind == BackboneKind::lightgcn) {
    base += static_cast<double>(nnz_adj) * static_cast<double>(layers);
  }
  return base * static_cast<double>(dim) * (1.0 - s);
}

// Forward MACs of one training iteration on a dense table.
struct IterationCostModel {
  double forward_macs = 0.0;

  // Two inner products per triple, plus full propagation for lightgcn.
  static IterationCostModel bpr(BackboneKind kind, std::size_t batch_size, std::size_t dim,
                                std::size_t layers, std::size_t nnz_adj) {
    double f = 2.0 * static_cast<double>(batch_size) * static_cast<double>(dim);
    if (kind == BackboneKind::lightgcn) {
      f += static_cast<double>(nnz_adj) * static_cast<double>(layers) * static_cast<double>(dim);
    }
    return {f};
  }

  // Backward is counted as twice the forward.
  double step_macs() const noexcept { return 3.0 * forward_macs; }
};

// Sparse steps cost step_macs * (1 - s); each exploration iteration instead
// costs one dense forward + backward.
inline double macs_training(const IterationCostModel& model, std::size_t iterations,
                            std::size_t exploration_events, double s) {
  check_sparsity(s);
  if (exploration_events > iterations) {
    throw ConfigError("more exploration events than iterations");
  }
  const auto sparse_steps = static_cast<double>(iterations - exploration_events);
  return sparse_steps * model.step_macs() * (1.0 - s) +
         static_cast<double>(exploration_events) * model.step_macs();
}

// Active weights plus the packed mask; a dense table needs no mask.
inline double memory_bytes(std::size_t total, std::size_t active, bool with_mask) {
  double bytes = static_cast<double>(active) * sizeof(Real);
  if (with_mask) bytes += static_cast<double>((total + 7) / 8);
  return bytes;
}

}  // namespace dslrec
