#include <catch_amalgamated.hpp>
#include <cmath>

#include "fdu/repanalysis.hpp"
#include "fdu/rng.hpp"
#include "support/oracles.hpp"

using namespace fdu;

namespace {

TensorD random_matrix(std::size_t n, std::size_t p, std::uint64_t seed, double scale = 1.0) {
  TensorD m({n, p});
  Rng rng(seed);
  for (auto& v : m.data) v = scale * rng.next_normal();
  return m;
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
TensorD random_orthogonal(std::size_t p, std::uint64_t seed) {
  TensorD q = random_matrix(p, p, seed);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < p; ++i) dot += q.at2(i, j) * q.at2(i, k);
      for (std::size_t i = 0; i < p; ++i) q.at2(i, j) -= dot * q.at2(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < p; ++i) norm += q.at2(i, j) * q.at2(i, j);
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < p; ++i) q.at2(i, j) /= norm;
  }
  return q;
}

TensorD matmul(const TensorD& a, const TensorD& b) {
  TensorD out({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += a.at2(i, k) * b.at2(k, j);
      out.at2(i, j) = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("center_columns zeroes constant columns and fixes column means") {
  TensorD constant({4, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    constant.at2(i, 0) = 3.5;
    constant.at2(i, 1) = -1.0;
  }
  const TensorD centered = center_columns(constant);
  for (const double v : centered.data) CHECK(v == 0.0);

  const TensorD x = random_matrix(16, 5, 7);
  const TensorD cx = center_columns(x);
  for (std::size_t j = 0; j < 5; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 16; ++i) mean += cx.at2(i, j);
    CHECK(std::abs(mean / 16.0) < 1e-12);
  }
  // Already-centered input passes through unchanged.
  const TensorD ccx = center_columns(cx);
  for (std::size_t i = 0; i < cx.data.size(); ++i) {
    CHECK(std::abs(ccx.data[i] - cx.data[i]) < 1e-12);
  }
}

TEST_CASE("CKA self-similarity is 1 and degenerate input errors out") {
  const TensorD x = random_matrix(12, 6, 3);
  CHECK(std::abs(linear_cka(x, x) - 1.0) < 1e-9);

  const TensorD zeros({8, 3});
  CHECK_THROWS_AS(linear_cka(zeros, x), std::invalid_argument);
  TensorD rows_differ({4, 2});
  CHECK_THROWS_AS(linear_cka(x, rows_differ), std::invalid_argument);
}

TEST_CASE("CKA is invariant to orthogonal maps and isotropic scaling") {
  const TensorD x = random_matrix(10, 5, 11);
  const TensorD q = random_orthogonal(5, 12);
  const TensorD xq = matmul(x, q);
  CHECK(std::abs(linear_cka(x, xq) - 1.0) < 1e-9);

  TensorD scaled = x;
  for (auto& v : scaled.data) v *= -2.75;
  CHECK(std::abs(linear_cka(x, scaled) - 1.0) < 1e-9);
}

TEST_CASE("CKA orthogonal invariance on both sides (property)") {
  for (std::uint64_t trial = 0; trial < 8; ++trial) {
    const TensorD x = random_matrix(9, 4, 100 + trial);
    const TensorD y = random_matrix(9, 6, 200 + trial);
    const double base = linear_cka(x, y);
    const TensorD xq = matmul(x, random_orthogonal(4, 300 + trial));
    const TensorD yq = matmul(y, random_orthogonal(6, 400 + trial));
    CHECK(std::abs(linear_cka(xq, yq) - base) < 1e-9);
    CHECK(std::abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12);  // symmetry
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
  }
}

TEST_CASE("CKA matches the centered-Gram oracle on independent matrices") {
  const TensorD x = random_matrix(8, 3, 21);
  const TensorD y = random_matrix(8, 4, 22);
  const double ours = linear_cka(x, y);
  const double reference = oracles::gram_cka(x, y);
  CHECK(std::abs(ours - reference) < 1e-10);
}

TEST_CASE("as-printed denominator variant squares the norms") {
  const TensorD x = random_matrix(8, 3, 31);
  const TensorD cx = center_columns(x);
  double xtx = 0.0;
  {
    // ||X'X||_F for the centered matrix
    TensorD xt({3, 3});
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < 8; ++i) s += cx.at2(i, a) * cx.at2(i, b);
        xt.at2(a, b) = s;
      }
    }
    for (const double v : xt.data) xtx += v * v;
    xtx = std::sqrt(xtx);
  }
  const double standard = linear_cka(x, x, CkaDenominator::standard);
  const double printed = linear_cka(x, x, CkaDenominator::as_printed);
  CHECK(std::abs(standard - 1.0) < 1e-12);
  CHECK(printed == Catch::Approx(1.0 / (xtx * xtx)).epsilon(1e-9));
}

TEST_CASE("subspace self-similarity is 1 and orthogonal complements score 0") {
  const TensorD a = random_matrix(12, 6, 41);
  const SubspaceResult self = subspace_similarity(a, a, 3);
  CHECK(std::abs(self.value - 1.0) < 1e-8);
  CHECK(std::abs(self.raw - 3.0) < 1e-8);

  // B spans the orthogonal complement of A's top-k directions: build A with
  // variance only in the first 2 canonical axes, B only in the last 2.
  TensorD a2({10, 4});
  TensorD b2({10, 4});
  Rng rng(42);
  for (std::size_t i = 0; i < 10; ++i) {
    a2.at2(i, 0) = 4.0 * rng.next_normal();
    a2.at2(i, 1) = 2.0 * rng.next_normal();
    b2.at2(i, 2) = 4.0 * rng.next_normal();
    b2.at2(i, 3) = 2.0 * rng.next_normal();
  }
  const SubspaceResult disjoint = subspace_similarity(a2, b2, 2);
  CHECK(disjoint.value < 1e-12);
}

TEST_CASE("subspace similarity matches a dense Jacobi eigensolver oracle") {
  const TensorD a = random_matrix(6, 4, 51);
  const TensorD b = random_matrix(6, 4, 52);
  const int k = 2;
  const SubspaceResult ours = subspace_similarity(a, b, k);

  auto top_k_oracle = [&](const TensorD& m) {
    const TensorD c = center_columns(m);
    std::vector<std::vector<double>> gram(4, std::vector<double>(4, 0.0));
    for (std::size_t x = 0; x < 4; ++x) {
      for (std::size_t y = 0; y < 4; ++y) {
        double s = 0.0;
        for (std::size_t i = 0; i < 6; ++i) s += c.at2(i, x) * c.at2(i, y);
        gram[x][y] = s;
      }
    }
    const auto eig = oracles::jacobi_eigensymmetric(gram);
    // top-k = the trailing eigenvectors in ascending order
    std::vector<std::vector<double>> top;
    for (int j = 0; j < k; ++j) top.push_back(eig.vectors[4 - 1 - static_cast<std::size_t>(j)]);
    return top;
  };
  const auto ek = top_k_oracle(a);
  const auto gk = top_k_oracle(b);
  double raw = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < 4; ++d) {
        dot += gk[static_cast<std::size_t>(i)][d] * ek[static_cast<std::size_t>(j)][d];
      }
      raw += dot * dot;
    }
  }
  CHECK(std::abs(ours.raw - raw) < 1e-8);
  CHECK(std::abs(ours.value - raw / k) < 1e-8);
}

TEST_CASE("degenerate eigengap sets the warning flag") {
  // Identical variance in all directions: eigenvalues coincide.
  TensorD a({6, 3});
  Rng rng(61);
  for (auto& v : a.data) v = rng.next_normal();
  TensorD iso({6, 3});
  // Build an exactly isotropic gram: +/- canonical basis rows.
  iso.at2(0, 0) = 1;
  iso.at2(1, 0) = -1;
  iso.at2(2, 1) = 1;
  iso.at2(3, 1) = -1;
  iso.at2(4, 2) = 1;
  iso.at2(5, 2) = -1;
  const SubspaceResult r = subspace_similarity(iso, a, 1);
  CHECK(r.degenerate);
  CHECK_THROWS_AS(subspace_similarity(a, a, 9), std::invalid_argument);
}

TEST_CASE("normalized subspace similarity stays in [0,1], raw in [0,k]") {
  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    const TensorD a = random_matrix(10, 5, 700 + trial);
    const TensorD b = random_matrix(10, 5, 800 + trial);
    const int k = 1 + static_cast<int>(trial % 3);
    const SubspaceResult r = subspace_similarity(a, b, k);
    CHECK(r.value >= -1e-12);
    CHECK(r.value <= 1.0 + 1e-12);
    CHECK(r.raw <= k + 1e-12);
  }
}

TEST_CASE("layerwise report emits cka and subspace rows per layer") {
  const auto spec = ModelSpec::default_spec(4, 3, 16, 16);
  const auto a = init_params(spec, 1);
  const auto b = init_params(spec, 2);
  ProbeSet probe;
  probe.source_domain = "probe";
  probe.images = TensorF({24, 3, 16, 16});
  Rng rng(5);
  for (auto& v : probe.images.data) v = static_cast<float>(rng.next_double());
  const auto records = layerwise_report(a, b, probe, 10, "run", "retrain");
  REQUIRE(records.size() == 6 * 3);  // cka + subspace + raw per layer
  for (std::size_t li = 0; li < 6; ++li) {
    const auto& cka = records[li * 3];
    CHECK(cka.metric == "cka");
    CHECK(cka.value >= 0.0);
    CHECK(cka.value <= 1.0);
    const auto& sub = records[li * 3 + 1];
    CHECK(sub.metric == "subspace_similarity");
    CHECK(sub.k <= 10);
    CHECK(sub.k >= 1);
  }
  // Self-comparison scores 1 everywhere.
  const auto self_records = layerwise_report(a, a, probe, 5, "run", "self");
  for (const auto& r : self_records) {
    if (r.metric == "cka" || r.metric == "subspace_similarity") {
      CHECK(r.value == Catch::Approx(1.0).margin(1e-8));
    }
  }
}
