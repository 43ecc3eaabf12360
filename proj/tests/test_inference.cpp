#include <random>

#include <gtest/gtest.h>

#include "dense_oracle.hpp"
#include "orthant_oracle.hpp"
#include "stica/inference.hpp"

using namespace stica;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_spd(std::mt19937_64& rng, int n)
{
    std::normal_distribution<double> n01;
    MatrixXd a(n, n);
    for (auto& x : a.reshaped()) x = n01(rng);
    return a * a.transpose() / n + 0.2 * MatrixXd::Identity(n, n);
}

int count(const std::vector<bool>& m) { return static_cast<int>(std::count(m.begin(), m.end(), true)); }

bool subset(const std::vector<bool>& a, const std::vector<bool>& b)
{
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && !b[i]) return false;
    return true;
}

// A 1-IC field on a small grid with a smooth mean and SPDE covariance.
GaussianField grid_field(double scale)
{
    const TriMesh mesh = grid_mesh(6, 7, BoundaryLayers::none());
    DataPrecision prec(mesh);
    const SparseSym r = prec(0.8);
    GaussianField f;
    const int V = mesh.n_vertices();
    f.mean.resize(1, V);
    for (int v = 0; v < V; ++v) f.mean(0, v) = 2.5 * std::exp(-0.05 * ((v % 7 - 3.0) * (v % 7 - 3.0) + (v / 7 - 2.5) * (v / 7 - 2.5)));
    f.D = scale * MatrixXd::Ones(1, V);
    const MatrixXd cov = r.dense().inverse();
    f.sd = scale * cov.diagonal().cwiseSqrt().transpose();
    f.factor = std::make_shared<const CholFactor>(cholesky(r));
    return f;
}

} // namespace

TEST(MarginalSd, ScaledIdentity)
{
    const GaussianField f = dense_field(VectorXd::Zero(4), 0.5 * MatrixXd::Identity(4, 4));
    EXPECT_NEAR((f.sd.array() - 1.0 / std::sqrt(2.0)).abs().maxCoeff(), 0.0, 1e-15);
}

TEST(MarginalSd, MatchesDensePosteriorCovariance)
{
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto in = oracle::random_instance(seed, 9, 2);
        const auto pr = oracle::problem(in);
        const auto mo = e_step(pr, in.p);
        const auto d = oracle::evaluate(in, in.p.M, in.p.kappas);
        const MatrixXd sd = marginal_sd(mo);
        for (int l = 0; l < in.L; ++l)
            for (int v = 0; v < in.V; ++v)
                EXPECT_NEAR(sd(l, v), in.D(l, v) * std::sqrt(d.omega_inv(l * in.V + v, l * in.V + v)), 1e-9);
    }
}

TEST(MarginalSd, ShrinkWithMoreData)
{
    // Halving the noise variance is what doubling T does to the reduced data.
    const auto in = oracle::random_instance(4, 12, 2);
    auto p = in.p;
    const auto pr = oracle::problem(in);
    const double a = marginal_sd(e_step(pr, p)).mean();
    auto in2 = in;
    in2.rd.nu0_sq /= 2.0;
    p.nu0_sq /= 2.0;
    const double b = marginal_sd(e_step(oracle::problem(in2), p)).mean();
    EXPECT_LT(b, a);
}

TEST(Excursion, DegeneratePosteriorIsThresholdedMean)
{
    GaussianField f = grid_field(0.0);
    f.sd.setZero();
    for (double alpha : {0.01, 0.1, 0.5}) {
        const auto r = excursion_set(f, {0, 1.0, alpha, Direction::Positive}, 1000, 5);
        for (int v = 0; v < f.mean.cols(); ++v) EXPECT_EQ(r.mask[static_cast<std::size_t>(v)], f.mean(0, v) > 1.0);
        EXPECT_EQ(r.attained_joint_prob, 1.0);
    }
}

TEST(Excursion, ThreeLocationsMatchExhaustiveSearch)
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-0.5, 3.0);
    int agree = 0, close = 0;
    const int cases = 20;
    for (int c = 0; c < cases; ++c) {
        const MatrixXd cov = random_spd(rng, 3);
        const VectorXd mean = VectorXd::NullaryExpr(3, [&](Eigen::Index) { return u(rng); });
        const auto r = excursion_set(dense_field(mean, cov), {0, 0.5, 0.1, Direction::Positive}, 100000, static_cast<std::uint64_t>(c));
        const int exact = oracle::largest_excursion_size(mean, cov, 0.5, 0.1);
        agree += r.size() == exact;
        close += std::abs(r.size() - exact) <= 1;
    }
    EXPECT_GE(agree, cases - 2);
    EXPECT_EQ(close, cases);
}

TEST(Excursion, OrthantOracleSanity)
{
    // Independent coordinates factorise; equal correlation-one coordinates collapse.
    const VectorXd m = (VectorXd(3) << 0.3, 1.0, -0.2).finished();
    const MatrixXd id = MatrixXd::Identity(3, 3);
    double prod = 1.0;
    for (int i = 0; i < 3; ++i) prod *= boost::math::cdf(boost::math::normal(), m[i]);
    EXPECT_NEAR(oracle::orthant(m, id, 0.0), prod, 1e-10);
    // Bivariate standard normal with correlation rho: P(X>0, Y>0) = 1/4 + asin(rho)/(2 pi).
    const MatrixXd c = (MatrixXd(2, 2) << 1, 0.6, 0.6, 1).finished();
    EXPECT_NEAR(oracle::orthant(VectorXd::Zero(2), c, 0.0), 0.25 + std::asin(0.6) / (2 * M_PI), 1e-10);
}

TEST(Excursion, MonotoneInAlphaAndGamma)
{
    const GaussianField f = grid_field(0.4);
    std::vector<bool> prev;
    for (double alpha : {0.05, 0.1, 0.2, 0.3}) {
        const auto r = excursion_set(f, {0, 1.0, alpha, Direction::Positive}, 5000, 9);
        if (!prev.empty()) EXPECT_TRUE(subset(prev, r.mask));
        prev = r.mask;
    }
    prev.clear();
    for (double gamma : {1.5, 1.0, 0.5, 0.0}) {
        const auto r = excursion_set(f, {0, gamma, 0.1, Direction::Positive}, 5000, 9);
        if (!prev.empty()) EXPECT_TRUE(subset(prev, r.mask));
        prev = r.mask;
    }
}

TEST(Excursion, MaskWithinMarginalSetAndJointLevel)
{
    const GaussianField f = grid_field(0.5);
    const auto r = excursion_set(f, {0, 1.0, 0.1, Direction::Positive}, 10000, 3);
    EXPECT_GT(r.size(), 0);
    EXPECT_GE(r.attained_joint_prob, 0.9);
    for (std::size_t v = 0; v < r.mask.size(); ++v)
        if (r.mask[v]) EXPECT_GE(r.marginal_prob[v], 0.9);
    for (std::size_t k = 1; k < r.survival.size(); ++k) EXPECT_LE(r.survival[k], r.survival[k - 1]);
}

TEST(Excursion, NegativeDirectionMirrors)
{
    GaussianField f = grid_field(0.5);
    GaussianField g = f;
    g.mean = -f.mean;
    g.D = -f.D; // each sample maps to its mirror image
    const auto a = excursion_set(f, {0, 1.0, 0.1, Direction::Positive}, 4000, 21);
    const auto b = excursion_set(g, {0, -1.0, 0.1, Direction::Negative}, 4000, 21);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.attained_joint_prob, b.attained_joint_prob);
}

TEST(Excursion, SharedSamplesMatchSingleRequests)
{
    const GaussianField f = grid_field(0.5);
    const auto both = excursion_sets(f, {{0, 1.0, 0.1, Direction::Positive}, {0, 0.5, 0.05, Direction::Positive}}, 3000, 4);
    EXPECT_EQ(both[1].mask, excursion_set(f, {0, 0.5, 0.05, Direction::Positive}, 3000, 4).mask);
}

TEST(Excursion, DeterministicForSeed)
{
    const GaussianField f = grid_field(0.5);
    const auto a = excursion_set(f, {0, 1.0, 0.1, Direction::Positive}, 3000, 8);
    const auto b = excursion_set(f, {0, 1.0, 0.1, Direction::Positive}, 3000, 8);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_EQ(a.survival, b.survival);
}

TEST(Excursion, InsufficientSamples)
{
    const GaussianField f = grid_field(0.5);
    EXPECT_THROW(excursion_set(f, {0, 1.0, 0.1, Direction::Positive}, 500, 1), InsufficientSamples);
    // At alpha = 0.001 the boundary estimate from 1000 samples is far too noisy.
    EXPECT_THROW(excursion_set(f, {0, 0.0, 0.001, Direction::Positive}, 1000, 1), InsufficientSamples);
}

TEST(Ttest, SingleLocationIsOneSidedZTest)
{
    const double z = boost::math::quantile(boost::math::normal(), 0.95);
    const VectorXd sd = VectorXd::Ones(1);
    EXPECT_TRUE(ttest_engagement(VectorXd::Constant(1, 1.0 + z + 1e-9), sd, 1.0, 0.05, Direction::Positive)[0]);
    EXPECT_FALSE(ttest_engagement(VectorXd::Constant(1, 1.0 + z - 1e-9), sd, 1.0, 0.05, Direction::Positive)[0]);
    EXPECT_TRUE(ttest_engagement(VectorXd::Constant(1, 1.0 - z - 1e-9), sd, 1.0, 0.05, Direction::Negative)[0]);
}

TEST(Ttest, MeanAtThresholdGivesEmptyMask)
{
    const auto m = ttest_engagement(VectorXd::Constant(50, 2.0), VectorXd::Ones(50), 2.0, 0.1, Direction::Positive);
    EXPECT_EQ(count(m), 0);
}

TEST(Ttest, FamilywiseErrorUnderNull)
{
    // Null: estimates are N(0, 1) with known SD; 200 seeds, 400 locations.
    int hits = 0;
    for (std::uint64_t s = 0; s < 200; ++s) {
        Rng rng(derive_seed(77, s));
        const VectorXd m = standard_normal(rng, 400);
        hits += count(ttest_engagement(m, VectorXd::Ones(400), 0.0, 0.1, Direction::Positive)) > 0;
    }
    // Binomial(200, 0.1) upper 95% limit is about 28.
    EXPECT_LE(hits, 28);
}

TEST(FcMatrix, DuplicatedColumn)
{
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    MatrixXd m(30, 3);
    for (auto& x : m.reshaped()) x = n01(rng);
    m.col(2) = 3.0 * m.col(0).array() + 1.0;
    const MatrixXd r = fc_matrix(m);
    EXPECT_NEAR(r(0, 2), 1.0, 1e-12);
    EXPECT_EQ(r(0, 0), 1.0);
}

TEST(FcMatrix, OrthogonalColumns)
{
    MatrixXd m(4, 2);
    m << 1, 1, -1, 1, 1, -1, -1, -1;
    EXPECT_NEAR(fc_matrix(m)(0, 1), 0.0, 1e-15);
}

TEST(FcMatrix, MatchesDirectFormulaAndIsPsd)
{
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    MatrixXd m(40, 3);
    for (auto& x : m.reshaped()) x = n01(rng);
    const MatrixXd r = fc_matrix(m);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const VectorXd a = m.col(i).array() - m.col(i).mean(), b = m.col(j).array() - m.col(j).mean();
            EXPECT_NEAR(r(i, j), a.dot(b) / std::sqrt(a.squaredNorm() * b.squaredNorm()), 1e-12);
        }
    EXPECT_GE(Eigen::SelfAdjointEigenSolver<MatrixXd>(r).eigenvalues().minCoeff(), -1e-10);
}

TEST(FcMatrix, ConstantColumnThrows)
{
    MatrixXd m = MatrixXd::Random(10, 2);
    m.col(1).setConstant(4.0);
    EXPECT_THROW(fc_matrix(m), ConstantColumn);
}
