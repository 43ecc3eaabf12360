#ifndef STICA_PREPROCESS_HPP
#define STICA_PREPROCESS_HPP

// Data preparation: two-way centering and global scaling, dual regression,
// nuisance component estimation/removal and SVD-based dimension reduction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "template.hpp"

namespace stica {

struct CenterScaleResult
{
    Eigen::MatrixXd data;  // T x V, centered over time and space, scaled
    double scale = 1.0;    // global image SD that was divided out
    bool scaled = true;    // false when the centered data had zero variance
};

/// Removes row (spatial) and column (temporal) means, then divides by the
/// square root of the across-image variance averaged over time.
inline CenterScaleResult center_scale(const Eigen::MatrixXd& y)
{
    const Eigen::Index T = y.rows(), V = y.cols();
    if (T < 2 || V < 2) throw DegenerateData("need at least 2 timepoints and 2 locations");
    if (!y.allFinite()) throw DegenerateData("non-finite values in data");
    CenterScaleResult r;
    r.data = y;
    for (int pass = 0; pass < 3; ++pass) {
        const Eigen::VectorXd rm = r.data.rowwise().mean();
        r.data.colwise() -= rm;
        const Eigen::RowVectorXd cm = r.data.colwise().mean();
        r.data.rowwise() -= cm;
        if (std::max(r.data.rowwise().mean().cwiseAbs().maxCoeff(), r.data.colwise().mean().cwiseAbs().maxCoeff()) <= 1e-12 * std::max(1.0, y.cwiseAbs().maxCoeff()))
            break;
    }
    const double var = r.data.squaredNorm() / (static_cast<double>(T) * static_cast<double>(V - 1));
    const double magnitude = y.cwiseAbs().maxCoeff();
    if (!(var > 0) || std::sqrt(var) <= 1e-13 * magnitude) {
        r.data.setZero();
        r.scale = 1.0;
        r.scaled = false;
        return r;
    }
    r.scale = std::sqrt(var);
    r.data /= r.scale;
    return r;
}

struct DualRegressionResult
{
    Eigen::MatrixXd mixing; // T x L
    Eigen::MatrixXd maps;   // L x V
};

namespace detail {

// Least-squares solution of X B = Y (X tall) with a rank check.
inline Eigen::MatrixXd least_squares(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const char* what)
{
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    qr.setThreshold(1e-10);
    if (qr.rank() < x.cols()) throw RankDeficientMaps(std::string(what) + " are rank deficient");
    return qr.solve(y);
}

} // namespace detail

inline DualRegressionResult dual_regression(const Eigen::MatrixXd& yc, const Eigen::MatrixXd& group_maps)
{
    if (group_maps.cols() != yc.cols()) throw DimensionMismatch("group maps and data differ in the number of locations");
    if (group_maps.rows() < 1 || group_maps.rows() > group_maps.cols()) throw RankDeficientMaps("need 1..V group maps");
    DualRegressionResult r;
    r.mixing = detail::least_squares(group_maps.transpose(), yc.transpose(), "group maps").transpose();
    r.maps = detail::least_squares(r.mixing, yc, "dual-regression timecourses");
    return r;
}

namespace detail {

// Eigenvalues (descending) of the smaller Gram matrix of x, divided by the
// larger dimension; returns {values, n, p}.
inline Eigen::VectorXd gram_eigenvalues(const Eigen::MatrixXd& x)
{
    Eigen::MatrixXd g;
    if (x.rows() <= x.cols()) g = x * x.transpose() / static_cast<double>(x.cols());
    else g = x.transpose() * x / static_cast<double>(x.rows());
    Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g, Eigen::EigenvaluesOnly).eigenvalues().reverse();
    return ev.cwiseMax(0.0);
}

} // namespace detail

/// Latent dimension of a residual matrix by a penalized probabilistic-PCA
/// profile likelihood over k = 0 .. p-2 (p = min(T, V)).
inline int estimate_nuisance_count(const Eigen::MatrixXd& r, double penalty_weight = 1.0)
{
    if (r.rows() < 2 || r.cols() < 2) throw DegenerateData("residual needs at least 2 rows and 2 columns");
    const Eigen::VectorXd lambda = detail::gram_eigenvalues(r);
    const int p = static_cast<int>(lambda.size());
    const double n = static_cast<double>(std::max(r.rows(), r.cols()));
    const double total = lambda.sum();
    if (!(total > 0) || !(lambda[0] > 1e-300)) return 0;
    const double lnpen = std::log(static_cast<double>(std::min(r.rows(), r.cols()))) / 2.0;
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    double head_log = 0.0, tail = total;
    for (int k = 0; k <= p - 2; ++k) {
        if (k > 0) {
            head_log += std::log(lambda[k - 1]);
            tail -= lambda[k - 1];
        }
        const double sigma2 = tail / (p - k);
        if (!(sigma2 > 1e-300 * total)) break;
        const double loglik = -0.5 * n * (head_log + (p - k) * std::log(sigma2));
        const double params = static_cast<double>(p) * k - 0.5 * k * (k - 1.0) + k + 1.0;
        const double score = loglik - penalty_weight * params * lnpen;
        if (score > best_score) {
            best_score = score;
            best = k;
        }
    }
    return best;
}

struct InfomaxResult
{
    Eigen::MatrixXd maps;   // k x V
    Eigen::MatrixXd mixing; // T x k
    int iterations = 0;
    bool converged = false;
};

/// Spatial infomax ICA: PCA-whitens to k dimensions across locations, then
/// runs full-batch natural-gradient infomax with the logistic nonlinearity.
inline InfomaxResult infomax_ica(const Eigen::MatrixXd& x, int k, std::uint64_t seed, int max_iter = 500, double tol = 1e-6)
{
    const Eigen::Index T = x.rows(), V = x.cols();
    if (k < 1 || k > std::min(T, V)) throw InvalidDims("component count must be in 1..min(T, V)");
    Eigen::MatrixXd xc = x;
    xc.colwise() -= xc.rowwise().mean();
    const Eigen::MatrixXd cov = xc * xc.transpose() / static_cast<double>(V);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Eigen::MatrixXd u(T, k);
    Eigen::VectorXd lam(k);
    for (int i = 0; i < k; ++i) {
        u.col(i) = es.eigenvectors().col(T - 1 - i);
        lam[i] = es.eigenvalues()[T - 1 - i];
    }
    if (!(lam[k - 1] > 1e-12 * std::max(lam[0], 1e-300))) throw RankDeficientMaps("data rank below the requested component count");
    const Eigen::MatrixXd z = lam.cwiseSqrt().cwiseInverse().asDiagonal() * u.transpose() * xc; // k x V

    Rng rng(seed);
    Eigen::MatrixXd w = Eigen::MatrixXd::Identity(k, k);
    {
        boost::random::normal_distribution<double> nd(0.0, 0.1);
        for (auto& e : w.reshaped()) e += nd(rng);
        const Eigen::JacobiSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeFullU | Eigen::ComputeFullV);
        w = svd.matrixU() * svd.matrixV().transpose();
    }
    InfomaxResult res;
    double lr = 0.1, prev_norm = std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(k, k);
    for (int it = 1; it <= max_iter; ++it) {
        const Eigen::MatrixXd s = w * z;
        const Eigen::MatrixXd g = (1.0 - 2.0 / (1.0 + (-s.array()).exp())).matrix(); // 1 - 2 logistic(s)
        Eigen::MatrixXd dw = lr * (eye + g * s.transpose() / static_cast<double>(V)) * w;
        double nrm = dw.norm();
        if (!std::isfinite(nrm)) {
            lr *= 0.5;
            continue;
        }
        if (nrm > prev_norm) lr *= 0.9;
        prev_norm = nrm;
        w += dw;
        res.iterations = it;
        if (nrm < tol) {
            res.converged = true;
            break;
        }
    }
    res.maps = w * z;
    // Deterministic sign: positive skew (heavier tail on the positive side).
    for (int i = 0; i < k; ++i)
        if (res.maps.row(i).array().cube().sum() < 0) res.maps.row(i) *= -1.0;
    res.mixing = detail::least_squares(res.maps.transpose(), x.transpose(), "infomax sources").transpose();
    return res;
}

struct NuisanceResult
{
    Eigen::MatrixXd data;     // cleaned T x V
    std::vector<int> counts;  // nuisance count per iteration
};

/// Iterates: dual regression on the template means, order selection on the
/// residual, infomax on the residual, subtraction of the nuisance fit.
inline NuisanceResult remove_nuisance(const Eigen::MatrixXd& yc, const Eigen::MatrixXd& template_means, int iterations,
                                      std::optional<int> forced_count = std::nullopt, std::uint64_t seed = 0)
{
    if (iterations < 0) throw InvalidDims("iteration count must be non-negative");
    NuisanceResult r{yc, {}};
    for (int it = 0; it < iterations; ++it) {
        const DualRegressionResult dr = dual_regression(r.data, template_means);
        const Eigen::MatrixXd resid = r.data - dr.mixing * dr.maps;
        const int k = forced_count ? *forced_count : estimate_nuisance_count(resid);
        r.counts.push_back(k);
        if (k <= 0) break;
        const InfomaxResult ica = infomax_ica(resid, k, derive_seed(seed, static_cast<std::uint64_t>(it)));
        r.data -= ica.mixing * ica.maps;
    }
    return r;
}

struct ReducedData
{
    Eigen::MatrixXd y; // L x V
    Eigen::MatrixXd H; // L x T
    Eigen::MatrixXd C; // L x L
    double nu0_sq = 0.0;
};

/// Projects onto the top-L eigenvectors of the T x T covariance over
/// locations, whitening by (d_l^2 - nu0^2)^-1/2 with nu0^2 the mean of the
/// remaining T - L eigenvalues.
inline ReducedData dimension_reduce(const Eigen::MatrixXd& yc, int L)
{
    const Eigen::Index T = yc.rows(), V = yc.cols();
    if (L < 1 || L >= T) throw InvalidDims("need 1 <= L < T");
    if (V < 2) throw DegenerateData("need at least 2 locations");
    Eigen::VectorXd d2(T);
    Eigen::MatrixXd u(T, L);
    if (T <= V) {
        const Eigen::MatrixXd cov = yc * yc.transpose() / static_cast<double>(V - 1);
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        d2 = es.eigenvalues().reverse();
        for (int l = 0; l < L; ++l) u.col(l) = es.eigenvectors().col(T - 1 - l);
    } else {
        // Nonzero spectrum via the V x V Gram matrix; remaining eigenvalues are 0.
        const Eigen::MatrixXd gram = yc.transpose() * yc / static_cast<double>(V - 1);
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
        d2.setZero();
        d2.head(V) = es.eigenvalues().reverse();
        if (L > V) throw InvalidDims("L exceeds the data rank");
        for (int l = 0; l < L; ++l) {
            const double ev = es.eigenvalues()[V - 1 - l];
            if (!(ev > 0)) throw EigGap("zero eigenvalue among the top L");
            u.col(l) = yc * es.eigenvectors().col(V - 1 - l) / std::sqrt(ev * static_cast<double>(V - 1));
        }
    }
    d2 = d2.cwiseMax(0.0);
    ReducedData r;
    r.nu0_sq = d2.tail(T - L).mean();
    if (!(d2[L - 1] - r.nu0_sq > 1e-10 * d2[0]))
        throw EigGap("eigenvalue " + std::to_string(L) + " does not exceed the noise level; L is too large");
    // Fix eigenvector signs so results are reproducible across solvers.
    for (int l = 0; l < L; ++l) {
        Eigen::Index arg = 0;
        u.col(l).cwiseAbs().maxCoeff(&arg);
        if (u(arg, l) < 0) u.col(l) *= -1.0;
    }
    const Eigen::VectorXd delta = (d2.head(L).array() - r.nu0_sq).rsqrt();
    r.H = delta.asDiagonal() * u.transpose();
    r.y = r.H * yc;
    r.C = r.H * r.H.transpose();
    r.C = 0.5 * (r.C + r.C.transpose());
    return r;
}

} // namespace stica

#endif
