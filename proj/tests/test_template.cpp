#include <algorithm>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "stica/template.hpp"

using namespace stica;

TEST(PeakMap, SigmaFromFwhm)
{
    EXPECT_NEAR(fwhm_to_sigma(30), 12.7397, 5e-4);
    EXPECT_NEAR(fwhm_to_sigma(5), 2.1233, 1e-4);
    EXPECT_NEAR(fwhm_to_sigma(5), 2.12, 5e-3);
}

TEST(PeakMap, ShapeAndZeroAmplitude)
{
    const GridDims d{46, 55};
    const Eigen::VectorXd z = gaussian_peak_map(d, 12, 15, 0.0, 30);
    EXPECT_EQ(z.cwiseAbs().maxCoeff(), 0.0);
    const Eigen::VectorXd m = gaussian_peak_map(d, 12, 15, 2.0, 30);
    Eigen::Index arg = 0;
    EXPECT_DOUBLE_EQ(m.maxCoeff(&arg), 2.0);
    EXPECT_EQ(arg, 12 * 55 + 15);
    // Half maximum at distance FWHM/2 from the centre.
    EXPECT_NEAR(m[12 * 55 + 30], 2.0 * std::exp(-15.0 * 15.0 / (2 * std::pow(fwhm_to_sigma(30), 2))), 1e-15);
    const double half = gaussian_peak_map(GridDims{1, 41}, 0, 0, 1.0, 40)[20];
    EXPECT_NEAR(half, 0.5, 1e-12);
    EXPECT_THROW(gaussian_peak_map(d, 50, 1, 1, 1), InvalidDims);
    EXPECT_THROW(gaussian_peak_map(d, 1, 1, 1, 0), InvalidDims);
}

TEST(Population, DefaultLayoutPeaksAtCentres)
{
    const GridDims d{46, 55};
    const Population p = generate_population(d, default_peaks(), 1.5);
    ASSERT_EQ(p.mean.rows(), 3);
    const int centres[3][2] = {{12, 15}, {35, 40}, {15, 40}};
    for (int l = 0; l < 3; ++l) {
        Eigen::Index arg = 0;
        p.mean.row(l).maxCoeff(&arg);
        EXPECT_EQ(arg, centres[l][0] * 55 + centres[l][1]);
    }
    EXPECT_TRUE((p.var.array() == (1.5 * p.mean).array()).all());

    const Population z = generate_population(d, {{10, 10, 0.0, 20}}, 3.0);
    EXPECT_EQ(z.mean.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(z.var.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SimulateSubject, ZeroVarianceGivesMean)
{
    const GridDims d{10, 12};
    Population p = generate_population(d, {{4, 5, 3.0, 6}}, 0.0);
    const SubjectTruth s = simulate_subject(d, p, 5.0, 7);
    EXPECT_EQ(s.effects.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(s.ics, p.mean);
}

TEST(SimulateSubject, IcsMinusEffectsIsMean)
{
    const GridDims d{46, 55};
    const Population p = generate_population(d, default_peaks(), default_var_scale);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const SubjectTruth s = simulate_subject(d, p, 5.0, seed);
        EXPECT_LE((s.ics - s.effects - p.mean).cwiseAbs().maxCoeff(), 1e-14 * p.mean.cwiseAbs().maxCoeff() * 4);
    }
}

TEST(SimulateSubject, NarrowKernelMatchesRawDraws)
{
    const GridDims d{8, 9};
    const Population p = generate_population(d, {{4, 4, 2.0, 6}}, 1.0);
    const SubjectTruth s = simulate_subject(d, p, 0.2, 99);
    Rng rng(99);
    const Eigen::VectorXd z = standard_normal(rng, d.size());
    const Eigen::VectorXd raw = z.cwiseProduct(p.var.row(0).transpose().cwiseSqrt());
    EXPECT_LT((s.effects.row(0).transpose() - raw).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(SimulateSubject, PeakVarianceMatchesGenerating)
{
    const GridDims d{30, 30};
    const Population p = generate_population(d, {{15, 15, 4.0, 20}}, 1.0);
    const int reps = 10000;
    const int peak = 15 * 30 + 15;
    double s2 = 0.0;
    for (int r = 0; r < reps; ++r) {
        const double e = simulate_subject(d, p, 5.0, derive_seed(5, static_cast<std::uint64_t>(r))).effects(0, peak);
        s2 += e * e;
    }
    EXPECT_NEAR(s2 / reps / p.var(0, peak), 1.0, 0.05);
}

TEST(EstimateTemplate, ClosedForms)
{
    Eigen::MatrixXd m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    const Template same = estimate_template({m, m});
    EXPECT_EQ(same.mean, m);
    EXPECT_EQ(same.var.cwiseAbs().maxCoeff(), 0.0);

    Eigen::MatrixXd dd(2, 3);
    dd << 0.5, -1, 2, 0, 3, 0.25;
    const Template t = estimate_template({m - dd, m + dd});
    EXPECT_LT((t.mean - m).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((t.var - 2 * dd.cwiseAbs2()).cwiseAbs().maxCoeff(), 1e-13);

    EXPECT_THROW(estimate_template({m}), TooFewSubjects);
}

TEST(EstimateTemplate, PermutationInvariantAndStreamingAgrees)
{
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n01;
    std::vector<Eigen::MatrixXd> subs;
    for (int i = 0; i < 7; ++i) {
        Eigen::MatrixXd s(2, 5);
        for (auto& x : s.reshaped()) x = n01(rng);
        subs.push_back(s);
    }
    const Template a = estimate_template(subs);
    std::reverse(subs.begin(), subs.end());
    const Template b = estimate_template(subs);
    EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((a.var - b.var).cwiseAbs().maxCoeff(), 1e-14);
    TemplateAccumulator acc;
    for (const auto& s : subs) acc.add(s);
    EXPECT_LT((acc.result().var - a.var).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(EstimateTemplate, MonteCarloPeakVariance)
{
    const GridDims d{46, 55};
    const Population p = generate_population(d, default_peaks(), default_var_scale);
    TemplateAccumulator acc;
    for (int i = 0; i < 1000; ++i) acc.add(simulate_subject(d, p, 5.0, derive_seed(11, static_cast<std::uint64_t>(i))).ics);
    const Template t = acc.result();
    for (int l = 0; l < 3; ++l) {
        Eigen::Index peak = 0;
        p.var.row(l).maxCoeff(&peak);
        EXPECT_NEAR(t.var(l, peak) / p.var(l, peak), 1.0, 0.1) << l;
    }
}

TEST(Timeseries, NoiselessConstantIc)
{
    SubjectTruth s;
    s.ics = Eigen::MatrixXd::Ones(1, 6);
    s.effects = Eigen::MatrixXd::Zero(1, 6);
    const Eigen::MatrixXd pool = synthetic_timecourse_pool(50, 4, 3);
    const Eigen::MatrixXd y = simulate_timeseries(s, pool, 0.0, 8);
    for (int v = 0; v < 6; ++v) EXPECT_EQ(y.col(v), s.mixing.col(0));
    bool from_pool = false;
    for (int p = 0; p < 4; ++p) from_pool |= (standardize_columns(pool.col(p)) - s.mixing).cwiseAbs().maxCoeff() < 1e-12;
    EXPECT_TRUE(from_pool);
}

TEST(Timeseries, MixingNormalizationAndNoiseLevel)
{
    const GridDims d{46, 55};
    const Population p = generate_population(d, default_peaks(), default_var_scale);
    SubjectTruth s = simulate_subject(d, p, 5.0, 1);
    const Eigen::MatrixXd pool = synthetic_timecourse_pool(800, 16, 2);
    const Eigen::MatrixXd y = simulate_timeseries(s, pool, 11.2, 3);
    ASSERT_EQ(y.rows(), 800);
    ASSERT_EQ(y.cols(), 2530);
    for (int l = 0; l < 3; ++l) {
        EXPECT_LT(std::abs(s.mixing.col(l).mean()), 1e-12);
        EXPECT_NEAR(std::sqrt(s.mixing.col(l).squaredNorm() / 799.0), 1.0, 1e-12);
    }
    // Distinct columns: sampling is without replacement.
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < a; ++b) EXPECT_GT((s.mixing.col(a) - s.mixing.col(b)).norm(), 1e-6);
    const Eigen::MatrixXd e = y - s.mixing * s.ics;
    EXPECT_NEAR(std::sqrt(e.squaredNorm() / static_cast<double>(e.size())), 11.2, 0.01 * 11.2);
    EXPECT_THROW(simulate_timeseries(s, pool.leftCols(2), 1.0, 3), PoolTooSmall);
}

TEST(Timeseries, DeterministicGivenSeed)
{
    const GridDims d{10, 10};
    const Population p = generate_population(d, {{5, 5, 2.0, 8}, {3, 3, 1.0, 6}}, 0.5);
    SubjectTruth a = simulate_subject(d, p, 5.0, 21), b = simulate_subject(d, p, 5.0, 21);
    const Eigen::MatrixXd pool = synthetic_timecourse_pool(40, 16, 9);
    EXPECT_EQ(simulate_timeseries(a, pool, 1.0, 4), simulate_timeseries(b, pool, 1.0, 4));
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
}

TEST(TemplateIo, RoundTrip)
{
    const auto dir = std::filesystem::temp_directory_path() / "stica_template_io";
    std::filesystem::remove_all(dir);
    Template t{Eigen::MatrixXd::Random(2, 7), Eigen::MatrixXd::Random(2, 7).cwiseAbs()};
    t.mean(0, 0) = 0.1;
    t.var(1, 3) = 1.0 / 3.0;
    write_template(dir, t);
    const Template r = read_template(dir);
    EXPECT_EQ(r.mean, t.mean);
    EXPECT_EQ(r.var, t.var);
    std::filesystem::remove_all(dir);
}
