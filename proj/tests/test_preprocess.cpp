#include <random>

#include <gtest/gtest.h>

#include "stica/preprocess.hpp"

using namespace stica;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0)
{
    std::normal_distribution<double> nd(0.0, sd);
    Eigen::MatrixXd m(r, c);
    for (auto& x : m.reshaped()) x = nd(rng);
    return m;
}

Eigen::MatrixXd laplace(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng)
{
    std::exponential_distribution<double> ex(1.0);
    std::bernoulli_distribution sign(0.5);
    Eigen::MatrixXd m(r, c);
    for (auto& x : m.reshaped()) x = (sign(rng) ? 1.0 : -1.0) * ex(rng);
    return m;
}

double abs_corr(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    const Eigen::VectorXd x = a.array() - a.mean(), y = b.array() - b.mean();
    return std::abs(x.dot(y) / (x.norm() * y.norm()));
}

} // namespace

TEST(CenterScale, ConstantMatrixFlagged)
{
    const CenterScaleResult r = center_scale(Eigen::MatrixXd::Constant(4, 5, 3.0));
    EXPECT_EQ(r.data.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_FALSE(r.scaled);
}

TEST(CenterScale, AdditiveStructureAnnihilated)
{
    const Eigen::VectorXd a = Eigen::VectorXd::LinSpaced(6, -1, 4);
    const Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(9, 2, 7).array().square();
    const Eigen::MatrixXd y = a * Eigen::RowVectorXd::Ones(9) + Eigen::VectorXd::Ones(6) * b.transpose();
    const CenterScaleResult r = center_scale(y);
    EXPECT_LT(r.data.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_FALSE(r.scaled);
}

TEST(CenterScale, MeansAndGlobalSd)
{
    std::mt19937_64 rng(1);
    Eigen::MatrixXd y = gaussian(30, 70, rng, 3.0);
    y.array() += 5.0;
    const CenterScaleResult r = center_scale(y);
    EXPECT_LE(r.data.rowwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE(r.data.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    double acc = 0.0;
    for (int t = 0; t < 30; ++t) {
        const Eigen::RowVectorXd row = r.data.row(t).array() - r.data.row(t).mean();
        acc += row.squaredNorm() / 69.0;
    }
    EXPECT_NEAR(std::sqrt(acc / 30.0), 1.0, 1e-12);
    // Idempotent up to the scaling flag.
    const CenterScaleResult again = center_scale(r.data);
    EXPECT_NEAR(again.scale, 1.0, 1e-12);
    EXPECT_LT((again.data - r.data).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DualRegression, NoiselessRecovery)
{
    std::mt19937_64 rng(2);
    // Orthonormal rows for S.
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(40, 3, rng)).householderQ() * Eigen::MatrixXd::Identity(40, 3);
    const Eigen::MatrixXd s = q.transpose();
    const Eigen::MatrixXd m = gaussian(25, 3, rng);
    const DualRegressionResult r = dual_regression(m * s, s);
    EXPECT_LT((r.mixing - m).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((r.maps - s).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(DualRegression, ScalingAndPermutation)
{
    std::mt19937_64 rng(3);
    const Eigen::MatrixXd y = gaussian(20, 50, rng);
    const Eigen::MatrixXd g = gaussian(3, 50, rng);
    const DualRegressionResult a = dual_regression(y, g), b = dual_regression(y, 2.5 * g);
    EXPECT_LT((b.mixing - a.mixing / 2.5).cwiseAbs().maxCoeff(), 1e-12);
    // pinv(A / c) = c pinv(A): the stage-2 maps pick up the factor c.
    EXPECT_LT((b.maps - 2.5 * a.maps).cwiseAbs().maxCoeff(), 1e-10);

    Eigen::PermutationMatrix<Eigen::Dynamic> p(3);
    p.indices() << 2, 0, 1;
    const DualRegressionResult c = dual_regression(y, p * g);
    EXPECT_LT((c.maps - p * a.maps).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((c.mixing - a.mixing * p.transpose()).cwiseAbs().maxCoeff(), 1e-10);

    Eigen::MatrixXd bad = g;
    bad.row(2) = 2 * bad.row(0);
    EXPECT_THROW(dual_regression(y, bad), RankDeficientMaps);
}

TEST(DualRegression, SimulatedSubjectCorrelates)
{
    const GridDims d{20, 22};
    const Population pop = generate_population(d, {{5, 6, 4, 12}, {14, 15, 4, 14}}, 1.0);
    SubjectTruth s = simulate_subject(d, pop, 5.0, 1);
    const Eigen::MatrixXd y = simulate_timeseries(s, synthetic_timecourse_pool(200, 16, 2), 3.0, 3);
    const DualRegressionResult r = dual_regression(center_scale(y).data, pop.mean);
    for (int l = 0; l < 2; ++l) {
        const Eigen::VectorXd a = r.maps.row(l).transpose(), b = s.ics.row(l).transpose();
        const Eigen::VectorXd x = a.array() - a.mean(), z = b.array() - b.mean();
        EXPECT_GT(x.dot(z), 0.0);
    }
}

TEST(NuisanceCount, ZeroMatrix)
{
    EXPECT_EQ(estimate_nuisance_count(Eigen::MatrixXd::Zero(10, 30)), 0);
}

TEST(NuisanceCount, PureNoiseCalibration)
{
    int zeros = 0;
    for (int seed = 0; seed < 40; ++seed) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
        zeros += estimate_nuisance_count(gaussian(60, 300, rng)) == 0;
    }
    EXPECT_GE(zeros, 38); // >= 95%
}

TEST(NuisanceCount, PlantedComponents)
{
    for (int seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(100 + static_cast<std::uint64_t>(seed));
        const Eigen::MatrixXd a = gaussian(60, 2, rng), b = gaussian(2, 300, rng);
        // SNR 10 in variance: signal entries have variance 2 * sqrt(10)^2 / 2.
        const Eigen::MatrixXd r = std::sqrt(10.0 / 2.0) * a * b + gaussian(60, 300, rng);
        EXPECT_EQ(estimate_nuisance_count(r), 2);
    }
}

TEST(Infomax, RankOneRecovery)
{
    std::mt19937_64 rng(5);
    const Eigen::VectorXd src = laplace(1, 400, rng).transpose();
    const Eigen::VectorXd tc = gaussian(30, 1, rng);
    const InfomaxResult r = infomax_ica(tc * src.transpose(), 1, 3);
    EXPECT_GT(abs_corr(r.maps.row(0).transpose(), src), 0.999);
}

TEST(Infomax, ThreePlantedSources)
{
    std::mt19937_64 rng(6);
    const Eigen::MatrixXd s = laplace(3, 3000, rng);
    const Eigen::MatrixXd a = gaussian(40, 3, rng);
    const Eigen::MatrixXd x = a * s + 0.05 * gaussian(40, 3000, rng);
    const InfomaxResult r = infomax_ica(x, 3, 7);
    for (int i = 0; i < 3; ++i) {
        double best = 0.0;
        for (int j = 0; j < 3; ++j) best = std::max(best, abs_corr(r.maps.row(j).transpose(), s.row(i).transpose()));
        EXPECT_GT(best, 0.95) << i;
    }
    const InfomaxResult again = infomax_ica(x, 3, 7);
    EXPECT_EQ(again.maps, r.maps);
    EXPECT_EQ(again.mixing, r.mixing);
}

TEST(RemoveNuisance, ZeroIterationsIsIdentity)
{
    std::mt19937_64 rng(8);
    const Eigen::MatrixXd y = gaussian(20, 60, rng), g = gaussian(2, 60, rng);
    EXPECT_EQ(remove_nuisance(y, g, 0).data, y);
}

TEST(RemoveNuisance, NoNuisanceLeavesDataAlone)
{
    const GridDims d{20, 22};
    const Population pop = generate_population(d, {{5, 6, 4, 12}, {14, 15, 4, 14}}, 1.0);
    SubjectTruth s = simulate_subject(d, pop, 5.0, 1);
    const Eigen::MatrixXd yc = center_scale(simulate_timeseries(s, synthetic_timecourse_pool(200, 16, 2), 3.0, 3)).data;
    const NuisanceResult r = remove_nuisance(yc, pop.mean, 1);
    ASSERT_EQ(r.counts.size(), 1u);
    EXPECT_EQ(r.counts[0], 0);
    EXPECT_EQ(r.data, yc);
}

TEST(RemoveNuisance, PlantedNuisanceRemoved)
{
    std::mt19937_64 rng(9);
    const Eigen::Index T = 150, V = 600;
    const Eigen::MatrixXd g = laplace(2, V, rng).cwiseAbs();
    const Eigen::MatrixXd nuis = 2.0 * laplace(2, V, rng);
    const Eigen::MatrixXd a = gaussian(T, 2, rng), b = gaussian(T, 2, rng);
    const Eigen::MatrixXd y = a * g + b * nuis + 0.5 * gaussian(T, V, rng);
    const NuisanceResult r = remove_nuisance(y, g, 1, std::nullopt, 11);
    ASSERT_FALSE(r.counts.empty());
    EXPECT_GE(r.counts[0], 2);
    // Variance explained by the planted nuisance maps, before and after.
    auto explained = [&](const Eigen::MatrixXd& data) {
        const Eigen::MatrixXd coef = nuis.transpose().colPivHouseholderQr().solve(data.transpose());
        return (nuis.transpose() * coef).squaredNorm();
    };
    EXPECT_LT(explained(r.data), 0.1 * explained(y));
}

TEST(DimensionReduce, LastEigenvalueWhenLIsTMinusOne)
{
    std::mt19937_64 rng(10);
    const Eigen::MatrixXd y = center_scale(gaussian(6, 40, rng)).data;
    Eigen::MatrixXd x = y;
    // Two-way centering leaves rank T - 1; add one direction back so the
    // smallest eigenvalue is positive.
    x.row(0) += 0.1 * gaussian(1, 40, rng);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(x * x.transpose() / 39.0).eigenvalues();
    const ReducedData r = dimension_reduce(x, 5);
    EXPECT_NEAR(r.nu0_sq, ev[0], 1e-12);
}

TEST(DimensionReduce, NoiseLevelAndIdentities)
{
    const GridDims d{46, 55};
    const Population pop = generate_population(d, default_peaks(), default_var_scale);
    SubjectTruth s = simulate_subject(d, pop, 5.0, 4);
    const Eigen::MatrixXd y = simulate_timeseries(s, synthetic_timecourse_pool(800, 16, 5), 11.2, 6);
    const ReducedData r = dimension_reduce(y, 3);
    EXPECT_NEAR(r.nu0_sq / (11.2 * 11.2), 1.0, 0.05);
    // C = H H' = Delta^2 because U has orthonormal rows.
    const Eigen::MatrixXd uut = r.H * r.H.transpose();
    EXPECT_LT((r.C - uut).cwiseAbs().maxCoeff(), 1e-12 * r.C.norm());
    EXPECT_LT((r.C - Eigen::MatrixXd(r.C.diagonal().asDiagonal())).cwiseAbs().maxCoeff(), 1e-12 * r.C.norm());
    EXPECT_LT((r.y - r.H * y).cwiseAbs().maxCoeff(), 1e-12 * r.y.cwiseAbs().maxCoeff());
}

TEST(DimensionReduce, NoiselessColumnSpace)
{
    std::mt19937_64 rng(12);
    const Eigen::MatrixXd m = gaussian(30, 3, rng), s = gaussian(3, 200, rng);
    const ReducedData r = dimension_reduce(m * s, 3);
    EXPECT_LT((r.y - (r.H * m) * s).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_THROW(dimension_reduce(m * s, 4), EigGap);
}

TEST(DimensionReduce, WideAndTallAgree)
{
    std::mt19937_64 rng(13);
    const Eigen::MatrixXd m = gaussian(12, 2, rng), s = gaussian(2, 9, rng);
    const Eigen::MatrixXd y = m * s + 0.1 * gaussian(12, 9, rng);
    const ReducedData r = dimension_reduce(y, 2);
    const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(y * y.transpose() / 8.0).eigenvalues().reverse();
    EXPECT_NEAR(r.nu0_sq, ev.tail(10).mean(), 1e-12);
}
