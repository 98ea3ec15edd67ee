#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "fdu/metrics.hpp"
#include "fdu/model.hpp"
#include "fdu/tensor.hpp"

namespace fdu {

/// Probe inputs for representation diagnostics.
struct ProbeSet {
  TensorF images;  // [N, C, H, W]
  std::string source_domain;
};

enum class CkaDenominator {
  standard,    // ||X'X||_F * ||Y'Y||_F  (self-similarity = 1)
  as_printed,  // ||X'X||_F^2 * ||Y'Y||_F^2 (kept for ablation)
};

inline CkaDenominator cka_denominator_from_string(const std::string& s) {
  if (s == "standard") return CkaDenominator::standard;
  if (s == "as-printed" || s == "as_printed") return CkaDenominator::as_printed;
  throw std::invalid_argument("unknown cka denominator mode: " + s);
}

/// Subtracts the column mean from every column.
inline TensorD center_columns(const TensorD& x) {
  const std::size_t n = x.dim(0), p = x.dim(1);
  TensorD out = x;
  for (std::size_t j = 0; j < p; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x.at2(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out.at2(i, j) -= mean;
  }
  return out;
}

namespace detail_rep {

inline Eigen::MatrixXd to_eigen(const TensorD& x) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(x.dim(0)), static_cast<Eigen::Index>(x.dim(1)));
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < x.dim(1); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x.at2(i, j);
    }
  }
  return m;
}

}  // namespace detail_rep

/// Linear CKA between two activation matrices with the same row count.
/// Columns are centered internally. Throws if either input is identically
/// zero after centering (the score is undefined there).
inline double linear_cka(const TensorD& x_in, const TensorD& y_in,
                         CkaDenominator denom = CkaDenominator::standard) {
  if (x_in.dim(0) != y_in.dim(0)) throw std::invalid_argument("linear_cka: row counts differ");
  if (x_in.dim(0) < 2) throw std::invalid_argument("linear_cka: need at least 2 rows");
  const Eigen::MatrixXd x = detail_rep::to_eigen(center_columns(x_in));
  const Eigen::MatrixXd y = detail_rep::to_eigen(center_columns(y_in));
  const double xtx = (x.transpose() * x).norm();
  const double yty = (y.transpose() * y).norm();
  if (xtx == 0.0 || yty == 0.0) {
    throw std::invalid_argument("linear_cka undefined: input has zero variance");
  }
  const double cross = (y.transpose() * x).squaredNorm();
  if (denom == CkaDenominator::standard) return cross / (xtx * yty);
  return cross / (xtx * xtx * yty * yty);
}

struct SubspaceResult {
  double value = 0.0;       // normalized by k when requested
  double raw = 0.0;         // ||G_k' E_k||_F^2 in [0, k]
  bool degenerate = false;  // eigenvalues k and k+1 coincide; subspace ill-defined
};

/// Overlap between the top-k principal subspaces of two activation matrices.
/// Directions are the top-k eigenvectors of A'A / B'B after centering.
inline SubspaceResult subspace_similarity(const TensorD& a_in, const TensorD& b_in, int k,
                                          bool normalized = true) {
  if (k < 1) throw std::invalid_argument("subspace_similarity: k must be >= 1");
  const std::size_t n = a_in.dim(0);
  if (b_in.dim(0) != n) throw std::invalid_argument("subspace_similarity: row counts differ");
  if (static_cast<std::size_t>(k) > std::min({a_in.dim(1), b_in.dim(1), n})) {
    throw std::invalid_argument("subspace_similarity: k exceeds min(m, m', n)");
  }
  const Eigen::MatrixXd a = detail_rep::to_eigen(center_columns(a_in));
  const Eigen::MatrixXd b = detail_rep::to_eigen(center_columns(b_in));

  auto top_k = [&](const Eigen::MatrixXd& m, bool& degenerate) {
    const Eigen::MatrixXd gram = m.transpose() * m;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success) {
      throw std::runtime_error("subspace_similarity: eigensolver failed");
    }
    // Eigen returns ascending eigenvalues; take the trailing k columns.
    const Eigen::Index p = gram.rows();
    const auto& vals = solver.eigenvalues();
    if (p > k) {
      const double gap = std::abs(vals(p - k) - vals(p - k - 1));
      if (gap <= 1e-10) degenerate = true;
    }
    return Eigen::MatrixXd(solver.eigenvectors().rightCols(k));
  };

  SubspaceResult r;
  const Eigen::MatrixXd ek = top_k(a, r.degenerate);
  const Eigen::MatrixXd gk = top_k(b, r.degenerate);
  r.raw = (gk.transpose() * ek).squaredNorm();
  r.value = normalized ? r.raw / static_cast<double>(k) : r.raw;
  return r;
}

/// Per-layer CKA and subspace similarity between two checkpoints over one
/// probe set. k is clamped to each layer's width (the record keeps the k
/// actually used).
inline std::vector<MetricRecord> layerwise_report(const ModelCheckpoint& ckpt_a,
                                                  const ModelCheckpoint& ckpt_b,
                                                  const ProbeSet& probe, int k,
                                                  const std::string& run_id = "",
                                                  const std::string& method = "",
                                                  CkaDenominator denom = CkaDenominator::standard) {
  if (probe.images.dim(0) < 2) throw std::invalid_argument("probe set needs at least 2 samples");
  const auto [logits_a, trace_a] = forward_with_trace(ckpt_a, probe.images);
  const auto [logits_b, trace_b] = forward_with_trace(ckpt_b, probe.images);
  (void)logits_a;
  (void)logits_b;
  if (trace_a.layer_names != trace_b.layer_names) {
    throw std::invalid_argument("checkpoints have different layer layouts");
  }
  std::vector<MetricRecord> out;
  for (std::size_t li = 0; li < trace_a.layer_names.size(); ++li) {
    const TensorD& x = trace_a.activations[li];
    const TensorD& y = trace_b.activations[li];
    MetricRecord cka;
    cka.run_id = run_id;
    cka.method = method;
    cka.domain = probe.source_domain;
    cka.layer = trace_a.layer_names[li];
    cka.metric = denom == CkaDenominator::standard ? "cka" : "cka_as_printed";
    try {
      cka.value = linear_cka(x, y, denom);
    } catch (const std::invalid_argument&) {
      cka.value = 0.0;
      cka.flags = "undefined";
    }
    out.push_back(cka);

    const int layer_k = std::min<int>(
        k, static_cast<int>(std::min({x.dim(1), y.dim(1), x.dim(0)})));
    const SubspaceResult sub = subspace_similarity(x, y, layer_k, true);
    MetricRecord s;
    s.run_id = run_id;
    s.method = method;
    s.domain = probe.source_domain;
    s.layer = trace_a.layer_names[li];
    s.metric = "subspace_similarity";
    s.k = layer_k;
    s.value = sub.value;
    s.flags = sub.degenerate ? "degenerate_eigengap" : "";
    out.push_back(s);
    MetricRecord raw = s;
    raw.metric = "subspace_similarity_raw";
    raw.value = sub.raw;
    out.push_back(raw);
  }
  return out;
}

}  // namespace fdu
