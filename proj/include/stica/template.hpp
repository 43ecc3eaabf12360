#ifndef STICA_TEMPLATE_HPP
#define STICA_TEMPLATE_HPP

// Population templates and the grid simulator: Gaussian-peak IC means,
// smoothed subject effects, mixing timecourses and noisy timeseries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <vector>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <Eigen/Dense>

#include "errors.hpp"
#include "io.hpp"

namespace stica {

using Rng = boost::random::mt19937_64;

/// splitmix64 finalizer applied to (master, index): independent, reproducible
/// per-subject seeds.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
    std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n)
{
    boost::random::normal_distribution<double> nd;
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = nd(rng);
    return z;
}

struct GridDims
{
    int rows = 46;
    int cols = 55;
    int size() const { return rows * cols; }
};

inline double fwhm_to_sigma(double fwhm) { return fwhm / std::sqrt(8.0 * std::log(2.0)); }

/// Point mass at (row, col) convolved with an isotropic Gaussian kernel whose
/// peak value is 1, so the map peaks at `amplitude`. Row-major, length rows*cols.
inline Eigen::VectorXd gaussian_peak_map(GridDims dims, double row, double col, double amplitude, double fwhm)
{
    if (!(fwhm > 0)) throw InvalidDims("fwhm must be positive");
    if (row < 0 || col < 0 || row > dims.rows - 1 || col > dims.cols - 1) throw InvalidDims("peak centre outside the grid");
    const double s2 = 2.0 * std::pow(fwhm_to_sigma(fwhm), 2);
    Eigen::VectorXd m(dims.size());
    for (int r = 0; r < dims.rows; ++r)
        for (int c = 0; c < dims.cols; ++c)
            m[r * dims.cols + c] = amplitude * std::exp(-((r - row) * (r - row) + (c - col) * (c - col)) / s2);
    return m;
}

struct PeakSpec
{
    double row = 0, col = 0, amplitude = 1, fwhm = 1;
};

/// Peak height and variance proportionality used when none is configured.
/// With these the mean signal variance is about half of 11.2^2 and the effect
/// SD at each peak is half the peak height.
inline constexpr double default_amplitude = 7.65;
inline constexpr double default_var_scale = default_amplitude / 4.0;

/// IC layout of the simulation study: centres (row, col) and FWHMs.
inline std::vector<PeakSpec> default_peaks(double amplitude = default_amplitude)
{
    return {{12, 15, amplitude, 30}, {35, 40, amplitude, 40}, {15, 40, amplitude, 45}};
}

struct Population
{
    Eigen::MatrixXd mean; // L x V
    Eigen::MatrixXd var;  // L x V
};

/// Generating means from Gaussian peaks and variances proportional to them.
inline Population generate_population(GridDims dims, const std::vector<PeakSpec>& peaks, double var_scale)
{
    if (peaks.empty()) throw InvalidDims("no ICs specified");
    if (var_scale < 0) throw InvalidDims("variance scale must be non-negative");
    Population p;
    p.mean.resize(static_cast<Eigen::Index>(peaks.size()), dims.size());
    for (std::size_t l = 0; l < peaks.size(); ++l)
        p.mean.row(static_cast<Eigen::Index>(l)) =
            gaussian_peak_map(dims, peaks[l].row, peaks[l].col, peaks[l].amplitude, peaks[l].fwhm).transpose();
    if ((p.mean.array() < 0).any()) throw InvalidDims("negative amplitudes give negative variances");
    p.var = var_scale * p.mean;
    return p;
}

struct Template
{
    Eigen::MatrixXd mean; // L x V
    Eigen::MatrixXd var;  // L x V

    int n_ics() const { return static_cast<int>(mean.rows()); }
    int n_locations() const { return static_cast<int>(mean.cols()); }
};

inline void write_template(const std::filesystem::path& dir, const Template& t)
{
    io::write_map_set(dir, "mean", t.mean);
    io::write_map_set(dir, "var", t.var);
}

inline Template read_template(const std::filesystem::path& dir)
{
    Template t{io::read_map_set(dir, "mean"), io::read_map_set(dir, "var")};
    if (t.mean.rows() != t.var.rows() || t.mean.cols() != t.var.cols())
        throw IoError("template mean and variance maps differ in shape");
    if ((t.var.array() < 0).any()) throw IoError("negative template variance");
    return t;
}

struct SubjectTruth
{
    Eigen::MatrixXd ics;     // L x V
    Eigen::MatrixXd effects; // L x V
    Eigen::MatrixXd mixing;  // T x L, empty until timeseries are simulated
    double noise_sd = 0.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma)
{
    if (!(sigma > 0)) return {1.0};
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i) k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    return k;
}

// Separable zero-padded convolution of a row-major image.
inline Eigen::VectorXd convolve2d(GridDims dims, const Eigen::VectorXd& img, const std::vector<double>& k)
{
    const int r0 = static_cast<int>(k.size() / 2);
    Eigen::VectorXd tmp = Eigen::VectorXd::Zero(img.size()), out = Eigen::VectorXd::Zero(img.size());
    for (int r = 0; r < dims.rows; ++r)
        for (int c = 0; c < dims.cols; ++c) {
            double s = 0.0;
            for (int d = -r0; d <= r0; ++d)
                if (c + d >= 0 && c + d < dims.cols) s += k[static_cast<std::size_t>(d + r0)] * img[r * dims.cols + c + d];
            tmp[r * dims.cols + c] = s;
        }
    for (int r = 0; r < dims.rows; ++r)
        for (int c = 0; c < dims.cols; ++c) {
            double s = 0.0;
            for (int d = -r0; d <= r0; ++d)
                if (r + d >= 0 && r + d < dims.rows) s += k[static_cast<std::size_t>(d + r0)] * tmp[(r + d) * dims.cols + c];
            out[r * dims.cols + c] = s;
        }
    return out;
}

} // namespace detail

/// Draws N(0, gen_var) deviations, smooths them, and rescales by one global
/// factor per IC so that the effect variance at the peak-variance pixel equals
/// gen_var there.
inline SubjectTruth simulate_subject(GridDims dims, const Population& pop, double smooth_fwhm, std::uint64_t seed)
{
    const Eigen::Index nl = pop.mean.rows(), nv = pop.mean.cols();
    if (nv != dims.size() || pop.var.rows() != nl || pop.var.cols() != nv) throw InvalidDims("population does not match the grid");
    if ((pop.var.array() < 0).any()) throw InvalidDims("negative generating variance");
    Rng rng(seed);
    const auto kernel = detail::gaussian_kernel(smooth_fwhm > 0 ? fwhm_to_sigma(smooth_fwhm) : 0.0);
    const int r0 = static_cast<int>(kernel.size() / 2);
    SubjectTruth s;
    s.effects.resize(nl, nv);
    for (Eigen::Index l = 0; l < nl; ++l) {
        const Eigen::VectorXd gv = pop.var.row(l).transpose();
        const Eigen::VectorXd z = standard_normal(rng, nv);
        Eigen::Index peak = 0;
        const double vmax = gv.maxCoeff(&peak);
        if (!(vmax > 0)) {
            s.effects.row(l).setZero();
            continue;
        }
        const Eigen::VectorXd raw = z.cwiseProduct(gv.cwiseSqrt());
        const Eigen::VectorXd smooth = detail::convolve2d(dims, raw, kernel);
        // Variance of the smoothed field at the peak: sum_u K(peak - u)^2 gv(u).
        const int pr = static_cast<int>(peak) / dims.cols, pc = static_cast<int>(peak) % dims.cols;
        double vs = 0.0;
        for (int dr = -r0; dr <= r0; ++dr)
            for (int dc = -r0; dc <= r0; ++dc) {
                const int r = pr + dr, c = pc + dc;
                if (r < 0 || c < 0 || r >= dims.rows || c >= dims.cols) continue;
                const double kk = kernel[static_cast<std::size_t>(dr + r0)] * kernel[static_cast<std::size_t>(dc + r0)];
                vs += kk * kk * gv[r * dims.cols + c];
            }
        s.effects.row(l) = (std::sqrt(vmax / vs) * smooth).transpose();
    }
    s.ics = pop.mean + s.effects;
    return s;
}

/// Elementwise mean and unbiased variance over subjects (each L x V).
inline Template estimate_template(const std::vector<Eigen::MatrixXd>& subject_ics)
{
    if (subject_ics.size() < 2) throw TooFewSubjects("need at least 2 subjects, got " + std::to_string(subject_ics.size()));
    const Eigen::Index nl = subject_ics[0].rows(), nv = subject_ics[0].cols();
    Template t{Eigen::MatrixXd::Zero(nl, nv), Eigen::MatrixXd::Zero(nl, nv)};
    for (const auto& s : subject_ics) {
        if (s.rows() != nl || s.cols() != nv) throw DimensionMismatch("subjects differ in shape");
        t.mean += s;
    }
    const double n = static_cast<double>(subject_ics.size());
    t.mean /= n;
    for (const auto& s : subject_ics) t.var.array() += (s - t.mean).array().square();
    t.var /= (n - 1.0);
    return t;
}

/// Streaming version of estimate_template (Welford), for large subject counts.
class TemplateAccumulator
{
public:
    void add(const Eigen::MatrixXd& s)
    {
        if (n_ == 0) {
            mean_ = Eigen::MatrixXd::Zero(s.rows(), s.cols());
            m2_ = mean_;
        } else if (s.rows() != mean_.rows() || s.cols() != mean_.cols()) {
            throw DimensionMismatch("subjects differ in shape");
        }
        ++n_;
        const Eigen::MatrixXd d = s - mean_;
        mean_ += d / static_cast<double>(n_);
        m2_.array() += d.array() * (s - mean_).array();
    }

    Template result() const
    {
        if (n_ < 2) throw TooFewSubjects("need at least 2 subjects, got " + std::to_string(n_));
        return {mean_, m2_ / static_cast<double>(n_ - 1)};
    }

private:
    long n_ = 0;
    Eigen::MatrixXd mean_, m2_;
};

/// Mean 0, sample SD 1 per column.
inline Eigen::MatrixXd standardize_columns(const Eigen::MatrixXd& x)
{
    Eigen::MatrixXd y = x.rowwise() - x.colwise().mean();
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
        const double sd = std::sqrt(y.col(c).squaredNorm() / static_cast<double>(y.rows() - 1));
        if (sd > 0) y.col(c) /= sd;
    }
    // A second centering pass removes the rounding residue of the first.
    y = y.rowwise() - y.colwise().mean();
    return y;
}

/// Pool of P standardized, band-limited, mutually correlated timecourses of
/// length T: AR(1) processes sharing a few common drivers.
inline Eigen::MatrixXd synthetic_timecourse_pool(int T, int P, std::uint64_t seed)
{
    if (T < 3 || P < 1) throw InvalidDims("pool needs T >= 3 and P >= 1");
    Rng rng(seed);
    const int shared = 3;
    auto ar1 = [&](double phi) {
        const Eigen::VectorXd e = standard_normal(rng, T + 50);
        Eigen::VectorXd x(T + 50);
        x[0] = e[0];
        for (int t = 1; t < T + 50; ++t) x[t] = phi * x[t - 1] + e[t];
        return Eigen::VectorXd(x.tail(T));
    };
    Eigen::MatrixXd common(T, shared);
    for (int k = 0; k < shared; ++k) common.col(k) = ar1(0.9);
    boost::random::normal_distribution<double> nd;
    Eigen::MatrixXd pool(T, P);
    for (int p = 0; p < P; ++p) {
        Eigen::VectorXd x = ar1(0.8);
        for (int k = 0; k < shared; ++k) x += 0.6 * nd(rng) * common.col(k);
        pool.col(p) = x;
    }
    return standardize_columns(pool);
}

/// Samples L pool columns without replacement as the mixing matrix and forms
/// Y = M S + E with iid N(0, noise_sd^2) noise. Stores the mixing in `truth`.
inline Eigen::MatrixXd simulate_timeseries(SubjectTruth& truth, const Eigen::MatrixXd& pool, double noise_sd, std::uint64_t seed)
{
    const Eigen::Index nl = truth.ics.rows(), nv = truth.ics.cols(), T = pool.rows();
    if (pool.cols() < nl) throw PoolTooSmall("pool has " + std::to_string(pool.cols()) + " timecourses for " + std::to_string(nl) + " ICs");
    if (T < std::max<Eigen::Index>(nl, 2)) throw PoolTooSmall("timecourses shorter than the IC count");
    if (noise_sd < 0) throw InvalidDims("noise SD must be non-negative");
    Rng rng(seed);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pool.cols()));
    std::iota(idx.begin(), idx.end(), 0);
    Eigen::MatrixXd m(T, nl);
    for (Eigen::Index l = 0; l < nl; ++l) {
        boost::random::uniform_int_distribution<Eigen::Index> pick(l, pool.cols() - 1);
        std::swap(idx[static_cast<std::size_t>(l)], idx[static_cast<std::size_t>(pick(rng))]);
        m.col(l) = pool.col(idx[static_cast<std::size_t>(l)]);
    }
    truth.mixing = standardize_columns(m);
    truth.noise_sd = noise_sd;
    Eigen::MatrixXd y = truth.mixing * truth.ics;
    if (noise_sd > 0) {
        boost::random::normal_distribution<double> nd(0.0, noise_sd);
        for (Eigen::Index v = 0; v < nv; ++v)
            for (Eigen::Index t = 0; t < T; ++t) y(t, v) += nd(rng);
    }
    return y;
}

} // namespace stica

#endif
