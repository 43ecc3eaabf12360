#ifndef STICA_INFERENCE_HPP
#define STICA_INFERENCE_HPP

// Post-fit inference: marginal SDs, excursion sets from joint posterior
// samples, the per-location Bonferroni test used with tICA, and FC matrices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <Eigen/Dense>

#include "em.hpp"
#include "errors.hpp"
#include "sparsela.hpp"
#include "template.hpp"

namespace stica {

enum class Direction { Positive, Negative };

/// Gaussian posterior of L fields on V locations: s = mean + D x with
/// x ~ N(0, Omega^-1) in IC-major order.
struct GaussianField
{
    Eigen::MatrixXd mean; // L x V
    Eigen::MatrixXd sd;   // L x V marginal SDs
    Eigen::MatrixXd D;    // L x V
    std::shared_ptr<const CholFactor> factor; // Cholesky factor of Omega
};

/// sqrt(D^2 diag Omega^-1) per IC and location.
inline Eigen::MatrixXd marginal_sd(const PosteriorMoments& mo)
{
    const Eigen::Index L = mo.D.rows(), V = mo.D.cols();
    Eigen::MatrixXd sd(L, V);
    for (Eigen::Index l = 0; l < L; ++l)
        for (Eigen::Index v = 0; v < V; ++v)
            sd(l, v) = mo.D(l, v) * std::sqrt(mo.omega_inv(static_cast<int>(l * V + v), static_cast<int>(l * V + v)));
    return sd;
}

inline GaussianField ic_field(const FitResult& fit)
{
    return {fit.ics, fit.marginal_sd, fit.D, fit.omega_factor};
}

/// Same covariance as the ICs, centred on the subject effects.
inline GaussianField effect_field(const FitResult& fit)
{
    return {fit.effects, fit.marginal_sd, fit.D, fit.omega_factor};
}

/// Field with an explicit dense covariance (one IC), for small problems.
inline GaussianField dense_field(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov)
{
    const Eigen::Index V = mean.size();
    if (cov.rows() != V || cov.cols() != V) throw DimensionMismatch("covariance does not match the mean");
    GaussianField f;
    f.mean = mean.transpose();
    f.sd = cov.diagonal().cwiseSqrt().transpose();
    f.D = Eigen::MatrixXd::Ones(1, V);
    f.factor = std::make_shared<const CholFactor>(cholesky(SparseSym::from_dense(cov.inverse()), Ordering::Natural));
    return f;
}

struct ExcursionRequest
{
    int ic = 0;
    double gamma = 0.0;
    double alpha = 0.1;
    Direction direction = Direction::Positive;
};

struct ExcursionResult
{
    std::vector<bool> mask;
    double gamma = 0.0;
    double alpha = 0.1;
    Direction direction = Direction::Positive;
    double attained_joint_prob = 1.0;
    int n_samples = 0;
    std::vector<int> order;            // locations by decreasing marginal excursion probability
    std::vector<double> marginal_prob; // P(s(v) > gamma), or < gamma for Negative
    std::vector<double> survival;      // survival[k]: estimated P(top-k locations all exceed)
    int size() const { return static_cast<int>(std::count(mask.begin(), mask.end(), true)); }
};

namespace detail {

inline double exceed_prob(double mean, double sd, double gamma, Direction dir)
{
    const double m = dir == Direction::Positive ? mean - gamma : gamma - mean;
    if (!(sd > 0)) return m > 0 ? 1.0 : 0.0;
    return boost::math::cdf(boost::math::normal(), m / sd);
}

inline bool exceeds(double x, double gamma, Direction dir)
{
    return dir == Direction::Positive ? x > gamma : x < gamma;
}

} // namespace detail

/// Excursion sets over the one-parameter family of marginal-probability-
/// ordered sets. For each candidate size k the joint probability that the top
/// k locations all exceed gamma is the fraction of joint posterior samples in
/// which they do; the result is the largest k with probability >= 1 - alpha.
/// All requests share one set of samples.
inline std::vector<ExcursionResult> excursion_sets(const GaussianField& field, const std::vector<ExcursionRequest>& requests,
                                                   int n_samples, std::uint64_t seed)
{
    const Eigen::Index L = field.mean.rows(), V = field.mean.cols();
    if (field.sd.rows() != L || field.sd.cols() != V || field.D.rows() != L || field.D.cols() != V)
        throw DimensionMismatch("field mean, SD and D disagree in shape");
    if (!field.factor || field.factor->order() != L * V) throw DimensionMismatch("posterior factor has the wrong order");
    if (n_samples < 1000) throw InsufficientSamples("need at least 1000 samples");

    std::vector<ExcursionResult> out(requests.size());
    std::vector<std::vector<int>> runs(requests.size());
    for (std::size_t q = 0; q < requests.size(); ++q) {
        const ExcursionRequest& rq = requests[q];
        if (rq.ic < 0 || rq.ic >= L) throw DimensionMismatch("IC index out of range");
        if (!(rq.alpha > 0 && rq.alpha < 1)) throw InvalidDims("alpha must lie in (0, 1)");
        ExcursionResult& r = out[q];
        r.gamma = rq.gamma;
        r.alpha = rq.alpha;
        r.direction = rq.direction;
        r.n_samples = n_samples;
        r.marginal_prob.resize(static_cast<std::size_t>(V));
        for (Eigen::Index v = 0; v < V; ++v)
            r.marginal_prob[static_cast<std::size_t>(v)] = detail::exceed_prob(field.mean(rq.ic, v), field.sd(rq.ic, v), rq.gamma, rq.direction);
        r.order.resize(static_cast<std::size_t>(V));
        std::iota(r.order.begin(), r.order.end(), 0);
        std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) {
            return r.marginal_prob[static_cast<std::size_t>(a)] > r.marginal_prob[static_cast<std::size_t>(b)];
        });
        runs[q].assign(static_cast<std::size_t>(V) + 1, 0);
    }

    // Each sample contributes the length of the leading run of ordered
    // locations that exceed gamma. Samples come in chunks with their own seeds.
    const int chunk = 256;
    Eigen::VectorXd eps(L * V);
    for (int c0 = 0; c0 < n_samples; c0 += chunk) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c0 / chunk)));
        const int c1 = std::min(n_samples, c0 + chunk);
        for (int i = c0; i < c1; ++i) {
            eps = standard_normal(rng, L * V);
            const Eigen::VectorXd x = field.factor->colour(eps);
            for (std::size_t q = 0; q < requests.size(); ++q) {
                const ExcursionRequest& rq = requests[q];
                const ExcursionResult& r = out[q];
                int k = 0;
                for (; k < V; ++k) {
                    const int v = r.order[static_cast<std::size_t>(k)];
                    const double s = field.mean(rq.ic, v) + field.D(rq.ic, v) * x[rq.ic * V + v];
                    if (!detail::exceeds(s, rq.gamma, rq.direction)) break;
                }
                ++runs[q][static_cast<std::size_t>(k)];
            }
        }
    }

    for (std::size_t q = 0; q < requests.size(); ++q) {
        ExcursionResult& r = out[q];
        // survival[k] = P(run length >= k), non-increasing in k.
        r.survival.assign(static_cast<std::size_t>(V) + 1, 0.0);
        long acc = 0;
        for (Eigen::Index k = V; k >= 0; --k) {
            acc += runs[q][static_cast<std::size_t>(k)];
            r.survival[static_cast<std::size_t>(k)] = static_cast<double>(acc) / n_samples;
        }
        const double level = 1.0 - r.alpha;
        // The mask may only hold locations whose marginal probability reaches the level.
        int cap = 0;
        while (cap < V && r.marginal_prob[static_cast<std::size_t>(r.order[static_cast<std::size_t>(cap)])] >= level) ++cap;
        // Binary search for the largest k <= cap with survival[k] >= level.
        int lo = 0, hi = cap;
        while (lo < hi) {
            const int mid = (lo + hi + 1) / 2;
            if (r.survival[static_cast<std::size_t>(mid)] >= level) lo = mid;
            else hi = mid - 1;
        }
        // Linear confirmation around the boundary.
        while (lo < cap && r.survival[static_cast<std::size_t>(lo) + 1] >= level) ++lo;
        while (lo > 0 && r.survival[static_cast<std::size_t>(lo)] < level) --lo;
        r.mask.assign(static_cast<std::size_t>(V), false);
        for (int k = 0; k < lo; ++k) r.mask[static_cast<std::size_t>(r.order[static_cast<std::size_t>(k)])] = true;
        r.attained_joint_prob = r.survival[static_cast<std::size_t>(lo)];
        // Standard error of the estimates either side of the boundary.
        double se = 0.0;
        for (int k : {lo, lo + 1}) {
            if (k == 0 || k > V) continue;
            const double p = r.survival[static_cast<std::size_t>(k)];
            se = std::max(se, std::sqrt(p * (1.0 - p) / n_samples));
        }
        if (se > r.alpha / 10.0)
            throw InsufficientSamples("Monte Carlo standard error " + std::to_string(se) + " exceeds alpha/10");
    }
    return out;
}

inline ExcursionResult excursion_set(const GaussianField& field, const ExcursionRequest& request, int n_samples, std::uint64_t seed)
{
    return excursion_sets(field, {request}, n_samples, seed).front();
}

/// One-sided per-location z-test with Bonferroni correction over V locations:
/// (mean - gamma) / sd > z_{1 - alpha / V}, mirrored for Negative.
inline std::vector<bool> ttest_engagement(const Eigen::VectorXd& mean, const Eigen::VectorXd& sd, double gamma, double alpha,
                                          Direction direction)
{
    if (mean.size() != sd.size()) throw DimensionMismatch("mean and SD differ in length");
    if (!(alpha > 0 && alpha < 1)) throw InvalidDims("alpha must lie in (0, 1)");
    const auto V = static_cast<double>(mean.size());
    const double z = boost::math::quantile(boost::math::normal(), 1.0 - alpha / V);
    std::vector<bool> mask(static_cast<std::size_t>(mean.size()));
    for (Eigen::Index v = 0; v < mean.size(); ++v) {
        const double d = direction == Direction::Positive ? mean[v] - gamma : gamma - mean[v];
        mask[static_cast<std::size_t>(v)] = sd[v] > 0 ? d / sd[v] > z : d > 0;
    }
    return mask;
}

/// Test applied to IC `ic` of a fit, using its marginal SDs.
inline std::vector<bool> ttest_engagement(const FitResult& fit, int ic, double gamma, double alpha, Direction direction)
{
    if (ic < 0 || ic >= fit.ics.rows()) throw DimensionMismatch("IC index out of range");
    return ttest_engagement(fit.ics.row(ic).transpose(), fit.marginal_sd.row(ic).transpose(), gamma, alpha, direction);
}

/// Pearson correlation matrix of the columns of a T x L mixing matrix.
inline Eigen::MatrixXd fc_matrix(const Eigen::MatrixXd& mixing)
{
    if (mixing.rows() < 3) throw InvalidDims("need at least 3 timepoints");
    Eigen::MatrixXd c = mixing.rowwise() - mixing.colwise().mean();
    for (Eigen::Index l = 0; l < c.cols(); ++l) {
        const double n = c.col(l).norm();
        if (!(n > 1e-12 * std::max(1.0, mixing.col(l).cwiseAbs().maxCoeff()) * std::sqrt(static_cast<double>(c.rows()))))
            throw ConstantColumn("column " + std::to_string(l) + " is constant");
        c.col(l) /= n;
    }
    Eigen::MatrixXd r = c.transpose() * c;
    r = 0.5 * (r + r.transpose());
    r.diagonal().setOnes();
    return r;
}

} // namespace stica

#endif
