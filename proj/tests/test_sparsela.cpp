#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "stica/sparsela.hpp"

using namespace stica;

namespace {

// Random sparse SPD matrix: symmetric random pattern plus a dominant diagonal.
SparseSym random_spd(int n, double density, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-1.0, 1.0), p(0.0, 1.0);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (int j = 0; j < n; ++j)
        for (int i = j + 1; i < n; ++i)
            if (p(rng) < density) a(i, j) = a(j, i) = u(rng);
    for (int i = 0; i < n; ++i) a(i, i) = a.row(i).cwiseAbs().sum() + 0.5 + p(rng);
    return SparseSym::from_dense(a);
}

SparseSym tridiag_plus(int n, double shift)
{
    std::vector<Triplet> t;
    for (int i = 0; i < n; ++i) {
        t.emplace_back(i, i, 2.0 + shift);
        if (i + 1 < n) t.emplace_back(i + 1, i, -1.0);
    }
    return SparseSym(n, t);
}

} // namespace

TEST(SparseSym, RejectsDuplicatesAndFillsDiagonal)
{
    EXPECT_THROW(SparseSym(3, {{0, 1, 1.0}, {1, 0, 2.0}}), InvalidMatrix);
    SparseSym a(3, {{2, 0, 1.0}});
    EXPECT_EQ(a.nnz(), 4);
    EXPECT_TRUE(a.contains(1, 1));
    EXPECT_DOUBLE_EQ(a(0, 2), 1.0);
}

TEST(SparseSym, TextRoundTrip)
{
    std::mt19937_64 rng(3);
    const SparseSym a = random_spd(15, 0.3, rng);
    std::stringstream ss;
    write_sparse(ss, a);
    const SparseSym b = read_sparse(ss);
    ASSERT_TRUE(a.same_pattern(b));
    for (std::size_t k = 0; k < a.values().size(); ++k) EXPECT_EQ(a.values()[k], b.values()[k]);
}

TEST(SparseSym, HeaderAndLowerTriangleOnly)
{
    std::stringstream ss;
    write_sparse(ss, SparseSym::from_dense(Eigen::Matrix2d{{2, 1}, {1, 3}}));
    EXPECT_EQ(ss.str(), "2 3\n0 0 2\n1 0 1\n1 1 3\n");
    std::stringstream bad("2 1\n0 1 1\n");
    EXPECT_THROW(read_sparse(bad), IoError);
}

TEST(Cholesky, IdentityAndDiagonal)
{
    const CholFactor f = cholesky(SparseSym::identity(5));
    EXPECT_TRUE(Eigen::MatrixXd(f.factor_matrix()).isIdentity(0.0));

    const CholFactor g = cholesky(SparseSym::diagonal(Eigen::Vector2d(4, 9)));
    const Eigen::MatrixXd l = g.factor_matrix();
    const auto& perm = g.symbolic().perm;
    EXPECT_DOUBLE_EQ(l(g.symbolic().iperm[0], g.symbolic().iperm[0]), 2.0);
    EXPECT_DOUBLE_EQ(l(g.symbolic().iperm[1], g.symbolic().iperm[1]), 3.0);
    EXPECT_EQ(perm.size(), 2u);
}

TEST(Cholesky, MatchesDenseOracle)
{
    const SparseSym a = tridiag_plus(10, 10.0);
    const CholFactor f = cholesky(a, Ordering::Natural);
    const Eigen::MatrixXd oracle = Eigen::LLT<Eigen::MatrixXd>(a.dense()).matrixL();
    EXPECT_LT((Eigen::MatrixXd(f.factor_matrix()) - oracle).cwiseAbs().maxCoeff(), 1e-12);

    // With AMD the reconstruction P' L L' P must reproduce A.
    const CholFactor g = cholesky(a);
    const Eigen::MatrixXd l = g.factor_matrix();
    Eigen::MatrixXd pa(10, 10);
    for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 10; ++j) pa(i, j) = a(g.symbolic().perm[i], g.symbolic().perm[j]);
    EXPECT_LT((l * l.transpose() - pa).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Cholesky, RejectsIndefinite)
{
    EXPECT_THROW(cholesky(SparseSym::from_dense(Eigen::Matrix2d{{1, 2}, {2, 1}})), NotPositiveDefinite);
    EXPECT_THROW(cholesky(SparseSym::diagonal(Eigen::Vector3d(1, 0, 1))), NotPositiveDefinite);
}

TEST(Cholesky, SymbolicReuse)
{
    std::mt19937_64 rng(11);
    SparseSym a = random_spd(40, 0.1, rng);
    const auto sym = analyze(a);
    SparseSym b = a;
    for (double& v : b.values()) v *= 1.7;
    const CholFactor fa = cholesky(sym, a);
    const CholFactor fb = cholesky(sym, b);
    EXPECT_NEAR(fb.logdet() - fa.logdet(), 40 * std::log(1.7), 1e-10);
    EXPECT_THROW(cholesky(sym, SparseSym::identity(40)), DimensionMismatch);
}

TEST(Solve, TrivialCases)
{
    const Eigen::Vector3d b(1, 2, 3);
    EXPECT_EQ(solve(cholesky(SparseSym::identity(3)), Eigen::VectorXd(b)), Eigen::VectorXd(b));
    const Eigen::VectorXd x = solve(cholesky(SparseSym::diagonal(Eigen::Vector2d(2, 2))), Eigen::VectorXd(Eigen::Vector2d(4, 6)));
    EXPECT_DOUBLE_EQ(x[0], 2.0);
    EXPECT_DOUBLE_EQ(x[1], 3.0);
    EXPECT_THROW(solve(cholesky(SparseSym::identity(3)), Eigen::VectorXd(Eigen::Vector2d(1, 1))), DimensionMismatch);
}

TEST(Solve, MatchesDenseSolve)
{
    const SparseSym a = tridiag_plus(10, 10.0);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n01;
    Eigen::VectorXd b(10);
    for (auto& v : b) v = n01(rng);
    const Eigen::VectorXd x = solve(cholesky(a), b);
    const Eigen::VectorXd oracle = a.dense().ldlt().solve(b);
    EXPECT_LT((x - oracle).cwiseAbs().maxCoeff(), 1e-10);

    Eigen::MatrixXd bm = Eigen::MatrixXd::Random(10, 3);
    EXPECT_LT((solve(cholesky(a), bm) - a.dense().ldlt().solve(bm)).norm(), 1e-10);
}

TEST(Solve, RandomRecoveryProperty)
{
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n01;
    for (int n : {1, 2, 5, 17, 60, 123, 200}) {
        const SparseSym a = random_spd(n, 4.0 / n, rng);
        Eigen::VectorXd x(n);
        for (auto& v : x) v = n01(rng);
        const Eigen::VectorXd y = solve(cholesky(a), Eigen::VectorXd(a * x));
        EXPECT_LE((y - x).norm(), 1e-9 * x.norm()) << "n=" << n;
    }
}

TEST(Logdet, Values)
{
    EXPECT_DOUBLE_EQ(logdet(cholesky(SparseSym::identity(7))), 0.0);
    EXPECT_NEAR(logdet(cholesky(SparseSym::diagonal(Eigen::Vector2d(2, 2)))), 2 * std::log(2.0), 1e-15);

    std::mt19937_64 rng(23);
    const SparseSym a = random_spd(20, 0.2, rng);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a.dense()).eigenvalues();
    EXPECT_NEAR(logdet(cholesky(a)), ev.array().log().sum(), 1e-10);

    const Eigen::MatrixXd inv = a.dense().inverse();
    const double ld_inv = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(inv).eigenvalues().array().log().sum();
    EXPECT_NEAR(logdet(cholesky(a)) + ld_inv, 0.0, 1e-9);
}

TEST(PartialInverse, TrivialCases)
{
    const SparseSym d = partial_inverse(cholesky(SparseSym::diagonal(Eigen::Vector2d(2, 4))), {{0, 0}, {1, 1}});
    EXPECT_DOUBLE_EQ(d(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(d(1, 1), 0.25);

    Pattern full;
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j <= i; ++j) full.emplace_back(i, j);
    const SparseSym z = partial_inverse(cholesky(SparseSym::identity(6)), full);
    EXPECT_TRUE(z.dense().isIdentity(0.0));
    EXPECT_EQ(z.nnz(), 21);
}

TEST(PartialInverse, BandPlusBlocks)
{
    // Band of half-width 3 plus dense 5x5 diagonal blocks requested.
    const int n = 100;
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> u(-1, 1);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = std::max(0, i - 3); j < i; ++j) a(i, j) = a(j, i) = u(rng);
    for (int i = 0; i < n; ++i) a(i, i) = a.row(i).cwiseAbs().sum() + 1.0;
    const SparseSym s = SparseSym::from_dense(a);
    Pattern pat = s.pattern();
    for (int b = 0; b < n; b += 5)
        for (int i = b; i < b + 5; ++i)
            for (int j = b; j <= i; ++j) pat.emplace_back(i, j);
    pat.emplace_back(99, 0); // far outside the fill
    const SparseSym z = partial_inverse(cholesky(s), pat);
    const Eigen::MatrixXd inv = a.inverse();
    double err = 0.0;
    for (const auto& [i, j] : pat) err = std::max(err, std::abs(z(i, j) - inv(i, j)));
    EXPECT_LT(err, 1e-10);
    EXPECT_FALSE(z.contains(50, 10));
}

TEST(PartialInverse, RequiresCoveringPattern)
{
    const SparseSym a = tridiag_plus(5, 1.0);
    EXPECT_THROW(partial_inverse(cholesky(a), {{0, 0}, {1, 1}, {2, 2}, {3, 3}, {4, 4}}), PatternNotCovering);
}

TEST(PartialInverse, RandomProperty)
{
    std::mt19937_64 rng(31);
    for (int n : {3, 10, 50, 120, 200}) {
        const SparseSym a = random_spd(n, 3.0 / n, rng);
        const CholFactor f = cholesky(a);
        const SelectedInverse sel(f);
        const Eigen::MatrixXd inv = a.dense().inverse();
        double err = 0.0;
        for (int j = 0; j < n; ++j)
            for (int i = j; i < n; ++i)
                if (sel.contains(i, j)) err = std::max(err, std::abs(sel(i, j) - inv(i, j)));
        EXPECT_LT(err, 1e-10) << "n=" << n;
    }
}
