#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "resist/data.hpp"
#include "resist/model.hpp"
#include "resist/partition.hpp"
#include "resist/protocol.hpp"

#include "support.hpp"

using namespace resist;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.depth = 4;
  cfg.width = 8;
  cfg.input_dim = 3;
  cfg.partition_lo = 2;
  cfg.partition_hi = 4;
  cfg.min_depth = 1;
  return cfg;
}

// Power iteration; enough accuracy for a 2.5*sqrt(m) bound check.
double spectral_norm(const Matrix& w, int iters = 60) {
  Vector v = Vector::Ones(w.cols()).normalized();
  double sigma = 0.0;
  for (int i = 0; i < iters; ++i) {
    Vector u = w * v;
    sigma = u.norm();
    if (sigma == 0.0) return 0.0;
    v = (w.transpose() * u).normalized();
  }
  return sigma;
}

}  // namespace

TEST_CASE("init_params is deterministic and shaped by the config") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.width = 4;
  cfg.input_dim = 2;
  cfg.partition_lo = 2;
  cfg.partition_hi = 3;
  const GlobalParams a = init_params(cfg, 7);
  const GlobalParams b = init_params(cfg, 7);
  REQUIRE(bitwise_equal(a, b));
  REQUIRE(a.input_weights.rows() == 4);
  REQUIRE(a.input_weights.cols() == 2);
  REQUIRE(a.block_weights.size() == 2);
  REQUIRE(a.block(2).rows() == 4);
  REQUIRE(a.block(3).cols() == 4);
  REQUIRE(a.output_weights.size() == 4);

  const GlobalParams c = init_params(cfg, 8);
  REQUIRE_FALSE(bitwise_equal(a, c));
}

TEST_CASE("initialization spectral norms stay within the Gaussian bound") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.width = 512;
  cfg.input_dim = 512;
  cfg.partition_lo = 2;
  cfg.partition_hi = 3;
  const GlobalParams p = init_params(cfg, 1);
  const double bound = 2.5 * std::sqrt(512.0);
  for (int h = 2; h <= cfg.depth; ++h)
    REQUIRE(spectral_norm(p.block(h)) <= bound);
  REQUIRE(spectral_norm(p.input_weights) <= bound);
}

TEST_CASE("forward matches the hand-evaluated recursion") {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.width = 1;
  cfg.input_dim = 1;
  cfg.c_res = 0.5;
  cfg.c_sigma = 2.0;
  cfg.activation = Activation::identity;
  cfg.partition_lo = 2;
  cfg.partition_hi = 2;
  GlobalParams p = zeros_like(cfg);
  p.input_weights(0, 0) = 1.0;
  p.block(2)(0, 0) = 3.0;
  p.output_weights(0) = 2.0;
  Vector x(1);
  x << 1.0;
  const auto [u, cache] = forward(cfg, p, x, BlockMask::all_ones(cfg));
  // x1 = sqrt(2), x2 = sqrt(2) + (0.5/2)*3*sqrt(2) = 1.75*sqrt(2), u = 3.5*sqrt(2)
  REQUIRE(u == Catch::Approx(3.5 * std::sqrt(2.0)).epsilon(1e-12));
  REQUIRE(u == Catch::Approx(4.949747).epsilon(1e-6));
  REQUIRE(cache.hidden[0](0) == Catch::Approx(std::sqrt(2.0)).epsilon(1e-14));
}

TEST_CASE("masked branches contribute nothing") {
  const ModelConfig cfg = small_cfg();
  const GlobalParams p = init_params(cfg, 3);
  const Dataset data = gen_synthetic(4, cfg.input_dim, 11, LabelMode::random_bounded);

  // With ReLU, zeroing a partitionable block removes its branch exactly.
  GlobalParams stripped = p;
  for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h)
    stripped.block(h).setZero();
  const BlockMask shared = BlockMask::shared_only(cfg);
  const BlockMask full = BlockMask::all_ones(cfg);
  for (int i = 0; i < data.n(); ++i) {
    const Vector x = data.features.row(i).transpose();
    const auto [masked_u, c1] = forward(cfg, p, x, shared);
    const auto [zeroed_u, c2] = forward(cfg, stripped, x, full);
    REQUIRE(masked_u == zeroed_u);
  }
}

TEST_CASE("mask locality: masked-out weights cannot affect the output") {
  const ModelConfig cfg = small_cfg();
  GlobalParams p = init_params(cfg, 5);
  BlockMask mask = BlockMask::all_ones(cfg);
  mask.set(3, false);
  const Dataset data = gen_synthetic(3, cfg.input_dim, 2, LabelMode::random_bounded);
  const Vector x = data.features.row(0).transpose();
  const auto [before, c1] = forward(cfg, p, x, mask);
  p.block(3).setConstant(1e9);
  const auto [after, c2] = forward(cfg, p, x, mask);
  REQUIRE(before == after);
}

TEST_CASE("inference with S=1 is bitwise train mode") {
  const ModelConfig cfg = small_cfg();
  const GlobalParams p = init_params(cfg, 9);
  const Dataset data = gen_synthetic(5, cfg.input_dim, 4, LabelMode::random_bounded);
  const BlockMask full = BlockMask::all_ones(cfg);
  for (int i = 0; i < data.n(); ++i) {
    const Vector x = data.features.row(i).transpose();
    const auto [train_u, c1] = forward(cfg, p, x, full, ForwardOpts::train());
    const auto [inf_u, c2] = forward(cfg, p, x, full, ForwardOpts::inference(1));
    REQUIRE(train_u == inf_u);
  }
}

TEST_CASE("inference scaling equals pre-scaling the partitionable branches") {
  const ModelConfig cfg = small_cfg();  // ReLU: relu(z)/S == relu(z/S)
  const GlobalParams p = init_params(cfg, 13);
  const int s = 3;
  GlobalParams scaled = p;
  for (int h = cfg.partition_lo; h <= cfg.partition_hi; ++h)
    scaled.block(h) /= static_cast<double>(s);
  const Dataset data = gen_synthetic(6, cfg.input_dim, 21, LabelMode::random_bounded);
  const BlockMask full = BlockMask::all_ones(cfg);
  for (int i = 0; i < data.n(); ++i) {
    const Vector x = data.features.row(i).transpose();
    const auto [inf_u, c1] = forward(cfg, p, x, full, ForwardOpts::inference(s));
    const auto [mod_u, c2] = forward(cfg, scaled, x, full, ForwardOpts::train());
    REQUIRE(inf_u == Catch::Approx(mod_u).epsilon(1e-12));
  }
}

TEST_CASE("loss basics") {
  const ModelConfig cfg = small_cfg();
  const GlobalParams p = init_params(cfg, 17);
  Dataset data = gen_synthetic(5, cfg.input_dim, 8, LabelMode::random_bounded);
  const BlockMask full = BlockMask::all_ones(cfg);

  SECTION("perfect fit gives zero") {
    BatchCache c = forward_batch(cfg, p, data.features.transpose(), full);
    data.label_bound = std::numeric_limits<double>::infinity();
    data.labels = c.predictions;
    REQUIRE(loss(cfg, p, data, full) == 0.0);
  }
  SECTION("half squared residual") {
    BatchCache c = forward_batch(cfg, p, data.features.transpose(), full);
    data.label_bound = std::numeric_limits<double>::infinity();
    data.labels = c.predictions;
    data.labels(0) += 1.0;  // u - y = -1 on one sample
    REQUIRE(loss(cfg, p, data, full) == Catch::Approx(0.5).margin(1e-15));
  }
  SECTION("matches an independent sum-of-squares oracle") {
    double oracle = 0.0;
    for (int i = 0; i < data.n(); ++i) {
      const Vector x = data.features.row(i).transpose();
      const auto [u, cache] = forward(cfg, p, x, full);
      oracle += (data.labels(i) - u) * (data.labels(i) - u);
    }
    oracle *= 0.5;
    REQUIRE(loss(cfg, p, data, full) == Catch::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg = small_cfg();
  DetRng rng(99);
  for (int draw = 0; draw < 3; ++draw) {
    const GlobalParams p = init_params(cfg, 100 + draw);
    const Dataset data =
        gen_synthetic(5, cfg.input_dim, 300 + draw, LabelMode::random_bounded);
    const BlockMask mask = testsupport::random_mask(cfg, rng);
    const testsupport::FdReport report = testsupport::finite_difference_check(cfg, p, data, mask);
    CAPTURE(draw, report.checked, report.skipped);
    REQUIRE(report.checked > 0);
    REQUIRE(report.max_rel <= 1e-6);
  }
}

TEST_CASE("identity-activation gradients match finite differences") {
  ModelConfig cfg = small_cfg();
  cfg.activation = Activation::identity;
  const GlobalParams p = init_params(cfg, 41);
  const Dataset data = gen_synthetic(5, cfg.input_dim, 42, LabelMode::random_bounded);
  const testsupport::FdReport report =
      testsupport::finite_difference_check(cfg, p, data, BlockMask::all_ones(cfg));
  REQUIRE(report.skipped == 0);
  REQUIRE(report.max_rel <= 1e-6);
}

TEST_CASE("gradient structure under the mask") {
  const ModelConfig cfg = small_cfg();
  const GlobalParams p = init_params(cfg, 23);
  Dataset data = gen_synthetic(4, cfg.input_dim, 31, LabelMode::random_bounded);
  BlockMask mask = BlockMask::all_ones(cfg);
  mask.set(3, false);

  SECTION("masked-out block has an identically zero gradient") {
    const Gradients g = grad(cfg, p, data, mask);
    REQUIRE(g.block(3).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(g.block(2).cwiseAbs().maxCoeff() > 0.0);
  }
  SECTION("zero residual gives zero gradients") {
    BatchCache c = forward_batch(cfg, p, data.features.transpose(), mask);
    data.label_bound = std::numeric_limits<double>::infinity();
    data.labels = c.predictions;
    const Gradients g = grad(cfg, p, data, mask);
    REQUIRE(g.input_weights.cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(g.block(2).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE(g.output_weights.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("readout gradient is the residual-weighted last hidden state") {
    const Gradients g = grad(cfg, p, data, mask);
    BatchCache c = forward_batch(cfg, p, data.features.transpose(), mask);
    const Vector expect =
        c.hidden[static_cast<std::size_t>(cfg.depth - 1)] *
        (c.predictions - data.labels);
    REQUIRE((g.output_weights - expect).cwiseAbs().maxCoeff() <= 1e-15);
  }
}

TEST_CASE("gram matrix: structure, symmetry and the stacked-Jacobian oracle") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.width = 64;
  cfg.input_dim = 4;
  cfg.partition_lo = 2;
  cfg.partition_hi = 3;
  const GlobalParams p = init_params(cfg, 51);
  const Dataset data = gen_synthetic(4, cfg.input_dim, 52, LabelMode::random_bounded);
  const GramResult gram = gram_matrix(cfg, p, data);

  REQUIRE(gram.per_layer.size() == static_cast<std::size_t>(cfg.depth + 1));
  REQUIRE((gram.total - gram.total.transpose()).cwiseAbs().maxCoeff() <= 1e-10);

  Matrix layer_sum = Matrix::Zero(data.n(), data.n());
  for (const auto& g : gram.per_layer) layer_sum += g;
  REQUIRE((gram.total - layer_sum).cwiseAbs().maxCoeff() <= 1e-12);

  // Oracle: stack flattened per-sample prediction gradients and form J J^T.
  Matrix jac(data.n(), cfg.param_count());
  for (int i = 0; i < data.n(); ++i)
    jac.row(i) = testsupport::prediction_gradient(cfg, p, data.features.row(i).transpose());
  const Matrix outer = jac * jac.transpose();
  REQUIRE((gram.total - outer).cwiseAbs().maxCoeff() <= 1e-9);

  for (const auto& g : gram.per_layer) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (g + g.transpose()));
    REQUIRE(eig.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("gram of a single sample is a positive squared norm") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.width = 32;
  cfg.input_dim = 5;
  cfg.partition_lo = 2;
  cfg.partition_hi = 3;
  const GlobalParams p = init_params(cfg, 77);
  const Dataset data = gen_synthetic(1, cfg.input_dim, 78, LabelMode::random_bounded);
  const GramResult gram = gram_matrix(cfg, p, data);
  REQUIRE(gram.total.rows() == 1);
  REQUIRE(gram.total(0, 0) > 0.0);
  const Vector j = testsupport::prediction_gradient(cfg, p, data.features.row(0).transpose());
  REQUIRE(gram.total(0, 0) == Catch::Approx(j.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("least eigenvalue of the gram drifts less at larger widths") {
  // Wider nets move less in parameter space over the same training budget,
  // so lambda_min(G) should drift less as the width grows.
  const int widths[] = {64, 256, 1024};
  const Dataset data = gen_synthetic(6, 8, 1234, LabelMode::teacher_net);
  int monotone_votes = 0;
  for (int seed = 0; seed < 3; ++seed) {
    double drift[3] = {0, 0, 0};
    for (int wi = 0; wi < 3; ++wi) {
      ModelConfig cfg;
      cfg.depth = 4;
      cfg.width = widths[wi];
      cfg.input_dim = 8;
      cfg.partition_lo = 2;
      cfg.partition_hi = 4;
      ProtocolConfig pcfg;
      pcfg.method = Method::local_sgd;
      pcfg.workers = 1;
      pcfg.rounds = 15;
      pcfg.local_iters = 1;
      pcfg.eta = 0.05;
      pcfg.seed = static_cast<std::uint64_t>(900 + seed);

      const GlobalParams init = init_params(cfg, pcfg.seed);
      const GramResult before = gram_matrix(cfg, init, data);
      Eigen::SelfAdjointEigenSolver<Matrix> e0(
          0.5 * (before.total + before.total.transpose()));
      const double lam0 = e0.eigenvalues().minCoeff();
      REQUIRE(lam0 > 0.0);

      const RunResult run = run_protocol(pcfg, cfg, data, data, 1);
      const GramResult after = gram_matrix(cfg, run.final_params, data);
      Eigen::SelfAdjointEigenSolver<Matrix> e1(
          0.5 * (after.total + after.total.transpose()));
      drift[wi] = std::abs(e1.eigenvalues().minCoeff() - lam0) / lam0;
    }
    CAPTURE(seed, drift[0], drift[1], drift[2]);
    if (drift[0] >= drift[1] && drift[1] >= drift[2]) ++monotone_votes;
  }
  REQUIRE(monotone_votes >= 2);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  const ModelConfig cfg = small_cfg();
  const GlobalParams p = init_params(cfg, 29);
  const auto path =
      (std::filesystem::temp_directory_path() / "resist_ckpt_test.bin").string();
  save_checkpoint(path, cfg, p);
  const Checkpoint ck = load_checkpoint(path);
  REQUIRE(ck.depth == cfg.depth);
  REQUIRE(ck.width == cfg.width);
  REQUIRE(ck.input_dim == cfg.input_dim);
  REQUIRE(ck.c_res == cfg.c_res);
  REQUIRE(ck.c_sigma == cfg.c_sigma);
  REQUIRE(bitwise_equal(ck.params, p));
  std::filesystem::remove(path);
}

TEST_CASE("config and dataset validation") {
  ModelConfig cfg = small_cfg();
  SECTION("c_res outside (0,1) is rejected") {
    cfg.c_res = 1.0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SECTION("partition range must fit the depth") {
    cfg.partition_hi = cfg.depth + 1;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SECTION("min_depth cannot exceed the partitionable count") {
    cfg.min_depth = 4;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SECTION("non-unit rows are rejected") {
    Dataset bad;
    bad.features = Matrix::Constant(1, 3, 1.0);
    bad.labels = Vector::Zero(1);
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
  }
  SECTION("dimension mismatch at forward") {
    const GlobalParams p = init_params(cfg, 1);
    Vector x = Vector::Ones(cfg.input_dim + 1);
    REQUIRE_THROWS_AS(forward(cfg, p, x, BlockMask::all_ones(cfg)),
                      std::invalid_argument);
  }
}

TEST_CASE("the ReLU derivative at zero is taken as zero") {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.width = 1;
  cfg.input_dim = 1;
  cfg.partition_lo = 2;
  cfg.partition_hi = 2;
  GlobalParams p = zeros_like(cfg);  // every pre-activation sits at the kink
  p.output_weights(0) = 1.0;
  Dataset data;
  data.features = Matrix::Constant(1, 1, 1.0);
  data.labels = Vector::Constant(1, 1.0);
  const Gradients g = grad(cfg, p, data, BlockMask::all_ones(cfg));
  REQUIRE(g.input_weights(0, 0) == 0.0);
  REQUIRE(g.block(2)(0, 0) == 0.0);
}
