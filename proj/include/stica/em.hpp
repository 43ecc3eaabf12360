#ifndef STICA_EM_HPP
#define STICA_EM_HPP

// EM estimation of the spatial template ICA model and the spatially
// independent (tICA) benchmark.
//
// Latent maps are stored IC-major: entry l*V + v of a VL vector is IC l at
// location v. Every L x V matrix below follows the same layout (row l, col v).
// With s = s0 + D x and x_l ~ N(0, R_l), the posterior precision of x is
//   Omega = R^-1 + D P' (I (x) M'C^-1 M / nu0^2) P D,
// whose off-diagonal IC blocks are diagonal.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "mesh.hpp"
#include "preprocess.hpp"
#include "sparsela.hpp"
#include "template.hpp"

namespace stica {

enum class Smoothness { Common, PerIc };

struct ModelParams
{
    Eigen::MatrixXd M;      // L x L mixing in the reduced space
    Eigen::VectorXd kappas; // 1 (common) or L values; empty for tICA
    double nu0_sq = 1.0;
    Eigen::MatrixXd C;      // L x L

    int n_ics() const { return static_cast<int>(M.rows()); }
    double kappa(int l) const { return kappas.size() == 1 ? kappas[0] : kappas[l]; }
};

/// Where stICA takes its starting mixing matrix from.
enum class EmInit { DualRegression, TemplateIca };

struct EmOptions
{
    Smoothness mode = Smoothness::Common;
    EmInit init = EmInit::DualRegression;
    double tol = 1e-3;
    int max_iter = 100;
    bool squarem = true;
    bool floor_variance = true;
    double kappa_half_width = 3.0; // golden-section bracket, in ln kappa
    double kappa_tol = 1e-4;
};

/// Prior standard deviations D (L x V) from template variances. Each IC is
/// floored at 1e-3 x its median positive SD so that D^-1 stays finite.
inline Eigen::MatrixXd prior_sd(const Eigen::MatrixXd& var, bool floor = true)
{
    if ((var.array() < 0).any() || !var.allFinite()) throw InvalidMatrix("template variances must be finite and non-negative");
    Eigen::MatrixXd d = var.cwiseSqrt();
    if (!floor) return d;
    for (Eigen::Index l = 0; l < d.rows(); ++l) {
        std::vector<double> pos;
        for (Eigen::Index v = 0; v < d.cols(); ++v)
            if (d(l, v) > 0) pos.push_back(d(l, v));
        if (pos.empty()) continue;
        const auto mid = pos.begin() + static_cast<std::ptrdiff_t>(pos.size() / 2);
        std::nth_element(pos.begin(), mid, pos.end());
        double med = *mid;
        if (pos.size() % 2 == 0) med = 0.5 * (med + *std::max_element(pos.begin(), mid));
        d.row(l) = d.row(l).cwiseMax(1e-3 * med);
    }
    return d;
}

/// M' C^-1 M / nu0^2.
inline Eigen::MatrixXd data_gram(const Eigen::MatrixXd& M, const Eigen::MatrixXd& C, double nu0_sq)
{
    const Eigen::LLT<Eigen::MatrixXd> c(C);
    if (c.info() != Eigen::Success) throw NotPositiveDefinite("noise covariance C");
    Eigen::MatrixXd k = M.transpose() * c.solve(M) / nu0_sq;
    return 0.5 * (k + k.transpose());
}

/// Assembles Omega on a fixed pattern. All ICs share the pattern of R^-1, so
/// pattern(Omega) and its symbolic factorization never change during a fit.
class OmegaAssembler
{
public:
    OmegaAssembler(const SparseSym& r_pattern, int n_ics) : v_(r_pattern.order()), l_(n_ics)
    {
        if (n_ics < 1) throw InvalidDims("need at least one IC");
        const auto rt = r_pattern.entries();
        std::vector<Triplet> t;
        t.reserve(rt.size() * static_cast<std::size_t>(l_) + static_cast<std::size_t>(v_ * l_ * (l_ - 1) / 2));
        for (int l = 0; l < l_; ++l) {
            for (const auto& e : rt)
                if (e.row() >= e.col()) t.emplace_back(l * v_ + e.row(), l * v_ + e.col(), 0.0);
            for (int k = 0; k < l; ++k)
                for (int v = 0; v < v_; ++v) t.emplace_back(l * v_ + v, k * v_ + v, 0.0);
        }
        pattern_ = SparseSym(v_ * l_, t);
        for (double& x : pattern_.values()) x = 0.0;
        symbolic_ = analyze(pattern_);

        const auto ro = r_pattern.outer();
        const auto ri = r_pattern.inner();
        r_nnz_ = static_cast<int>(r_pattern.nnz());
        r_pos_.resize(static_cast<std::size_t>(r_nnz_ * l_));
        for (int l = 0; l < l_; ++l)
            for (int j = 0; j < v_; ++j)
                for (int p = ro[static_cast<std::size_t>(j)]; p < ro[static_cast<std::size_t>(j) + 1]; ++p)
                    r_pos_[static_cast<std::size_t>(l * r_nnz_ + p)] = pattern_.position(l * v_ + ri[static_cast<std::size_t>(p)], l * v_ + j);
        cross_pos_.resize(static_cast<std::size_t>(v_ * l_ * l_));
        for (int l = 0; l < l_; ++l)
            for (int k = 0; k < l_; ++k)
                for (int v = 0; v < v_; ++v) cross_pos_[cross_index(v, l, k)] = pattern_.position(l * v_ + v, k * v_ + v);
        factor_pos_.resize(static_cast<std::size_t>(pattern_.nnz()));
        const auto po = pattern_.outer();
        const auto pi = pattern_.inner();
        for (int j = 0; j < pattern_.order(); ++j)
            for (int p = po[static_cast<std::size_t>(j)]; p < po[static_cast<std::size_t>(j) + 1]; ++p)
                factor_pos_[static_cast<std::size_t>(p)] = symbolic_->position(pi[static_cast<std::size_t>(p)], j);
        r_pattern_ = r_pattern;
    }

    int n_locations() const { return v_; }
    int n_ics() const { return l_; }
    const SparseSym& pattern() const { return pattern_; }
    const SparseSym& r_pattern() const { return r_pattern_; }
    std::shared_ptr<const SymbolicCholesky> symbolic() const { return symbolic_; }

    /// Position in Omega's value array of entry p of R_l^-1's value array.
    int r_position(int l, int p) const { return r_pos_[static_cast<std::size_t>(l * r_nnz_ + p)]; }
    /// Position of Omega(l*V + v, k*V + v).
    int cross_position(int v, int l, int k) const { return cross_pos_[cross_index(v, l, k)]; }
    /// Position in the Cholesky factor of entry p of Omega's value array.
    int factor_position(int p) const { return factor_pos_[static_cast<std::size_t>(p)]; }

    /// r_inv holds one matrix per IC or one shared matrix.
    SparseSym assemble(const std::vector<SparseSym>& r_inv, const Eigen::MatrixXd& D, const Eigen::MatrixXd& K) const
    {
        if (r_inv.size() != 1 && static_cast<int>(r_inv.size()) != l_) throw DimensionMismatch("need 1 or L prior precisions");
        if (D.rows() != l_ || D.cols() != v_ || K.rows() != l_ || K.cols() != l_) throw DimensionMismatch("D or K has the wrong shape");
        SparseSym omega = pattern_;
        auto ov = omega.values();
        for (int l = 0; l < l_; ++l) {
            const SparseSym& r = r_inv[r_inv.size() == 1 ? 0 : static_cast<std::size_t>(l)];
            if (!r.same_pattern(r_pattern_)) throw DimensionMismatch("prior precision pattern differs from the planned pattern");
            const auto rv = r.values();
            for (int p = 0; p < r_nnz_; ++p) ov[static_cast<std::size_t>(r_position(l, p))] = rv[static_cast<std::size_t>(p)];
        }
        for (int l = 0; l < l_; ++l)
            for (int k = 0; k <= l; ++k)
                for (int v = 0; v < v_; ++v) ov[static_cast<std::size_t>(cross_position(v, l, k))] += K(l, k) * D(l, v) * D(k, v);
        return omega;
    }

private:
    std::size_t cross_index(int v, int l, int k) const
    {
        return static_cast<std::size_t>((v * l_ + l) * l_ + k);
    }

    int v_, l_, r_nnz_ = 0;
    SparseSym pattern_, r_pattern_;
    std::shared_ptr<const SymbolicCholesky> symbolic_;
    std::vector<int> r_pos_, cross_pos_, factor_pos_;
};

/// Omega for fixed R^-1 (one per IC, or one shared), D, M, C and nu0^2.
inline SparseSym build_omega(const std::vector<SparseSym>& r_inv, const Eigen::MatrixXd& D, const Eigen::MatrixXd& M,
                             const Eigen::MatrixXd& C, double nu0_sq)
{
    if (r_inv.empty()) throw DimensionMismatch("no prior precision given");
    return OmegaAssembler(r_inv.front(), static_cast<int>(D.rows())).assemble(r_inv, D, data_gram(M, C, nu0_sq));
}

/// Prior precision of the latent fields: R^-1(kappa) from an SPDE mesh, or the
/// identity when no mesh is given (tICA).
class SpatialPrior
{
public:
    SpatialPrior() = default;
    explicit SpatialPrior(std::shared_ptr<const DataPrecision> precision)
        : precision_(std::move(precision)), symbolic_(analyze(precision_->pattern()))
    {
    }
    static SpatialPrior independent(int n_locations)
    {
        SpatialPrior p;
        p.identity_ = SparseSym::identity(n_locations);
        return p;
    }

    bool spatial() const { return precision_ != nullptr; }
    int n_locations() const { return spatial() ? precision_->n_data() : identity_.order(); }
    const SparseSym& pattern() const { return spatial() ? precision_->pattern() : identity_; }
    std::shared_ptr<const SymbolicCholesky> symbolic() const { return symbolic_; }
    const DataPrecision& precision() const { return *precision_; }

    SparseSym r_inv(double kappa) const { return spatial() ? (*precision_)(kappa) : identity_; }

    double logdet(const SparseSym& r) const { return spatial() ? cholesky(symbolic_, r).logdet() : 0.0; }

private:
    std::shared_ptr<const DataPrecision> precision_;
    std::shared_ptr<const SymbolicCholesky> symbolic_;
    SparseSym identity_;
};

/// Posterior quantities from one E-step.
struct PosteriorMoments
{
    Eigen::MatrixXd mu;          // posterior mean of s
    Eigen::MatrixXd z;           // Omega^-1 D b, so mu = s0 + D z
    Eigen::MatrixXd m;           // D a + R^-1 D^-1 s0 (zero where D = 0)
    Eigen::MatrixXd omega_inv_m; // u + z
    Eigen::MatrixXd u;           // D^-1 s0 (zero where D = 0)
    Eigen::MatrixXd D;
    SparseSym omega;             // Omega itself
    SparseSym omega_inv;         // Omega^-1 on pattern(Omega)
    Eigen::MatrixXd location_cov;   // L x (L V): block v is Omega_PP^-1(v, v)
    std::vector<Eigen::VectorXd> kappa_weights; // per IC, on pattern(R^-1)
    std::shared_ptr<const CholFactor> factor;
    double logdet_omega = 0.0;
    double loglik = 0.0; // observed-data log-likelihood at the parameters used

    Eigen::Ref<const Eigen::MatrixXd> block(int v) const
    {
        const auto L = location_cov.rows();
        return location_cov.middleCols(v * L, L);
    }
};

/// Fixed ingredients of a fit: reduced data, template, prior SDs and prior.
class EmProblem
{
public:
    EmProblem(ReducedData data, Eigen::MatrixXd s0, Eigen::MatrixXd D, SpatialPrior prior)
        : data_(std::move(data)), s0_(std::move(s0)), d_(std::move(D)), prior_(std::move(prior)),
          assembler_(prior_.pattern(), static_cast<int>(s0_.rows()))
    {
        const Eigen::Index L = s0_.rows(), V = s0_.cols();
        if (data_.y.rows() != L || data_.y.cols() != V || d_.rows() != L || d_.cols() != V || data_.C.rows() != L || data_.C.cols() != L)
            throw DimensionMismatch("reduced data, template and prior SDs disagree in shape");
        if (prior_.n_locations() != V) throw DimensionMismatch("prior precision order differs from the number of locations");
        if (!(data_.nu0_sq > 0)) throw InvalidMatrix("nu0^2 must be positive");
    }

    int n_ics() const { return static_cast<int>(s0_.rows()); }
    int n_locations() const { return static_cast<int>(s0_.cols()); }
    const ReducedData& data() const { return data_; }
    const Eigen::MatrixXd& s0() const { return s0_; }
    const Eigen::MatrixXd& D() const { return d_; }
    const SpatialPrior& prior() const { return prior_; }
    const OmegaAssembler& assembler() const { return assembler_; }

    /// R^-1 per IC for the given kappas (one shared matrix in common mode).
    std::vector<SparseSym> prior_precisions(const ModelParams& p) const
    {
        std::vector<SparseSym> r;
        if (!prior_.spatial()) {
            r.push_back(prior_.r_inv(1.0));
            return r;
        }
        if (p.kappas.size() != 1 && p.kappas.size() != n_ics()) throw DimensionMismatch("need 1 or L kappas");
        for (Eigen::Index l = 0; l < p.kappas.size(); ++l) r.push_back(prior_.r_inv(p.kappas[l]));
        return r;
    }

private:
    ReducedData data_;
    Eigen::MatrixXd s0_, d_;
    SpatialPrior prior_;
    OmegaAssembler assembler_;
};

/// Posterior moments of s given y at the parameters p.
inline PosteriorMoments e_step(const EmProblem& pr, const ModelParams& p)
{
    const int L = pr.n_ics(), V = pr.n_locations();
    const OmegaAssembler& as = pr.assembler();
    const ReducedData& rd = pr.data();
    const Eigen::MatrixXd& D = pr.D();
    const Eigen::MatrixXd& s0 = pr.s0();
    if (p.M.rows() != L || p.M.cols() != L) throw DimensionMismatch("mixing matrix must be L x L");

    const std::vector<SparseSym> r_inv = pr.prior_precisions(p);
    double logdet_r = 0.0;
    for (const auto& r : r_inv) logdet_r += pr.prior().logdet(r);
    if (r_inv.size() == 1) logdet_r *= L;

    const Eigen::LLT<Eigen::MatrixXd> cllt(rd.C);
    if (cllt.info() != Eigen::Success) throw NotPositiveDefinite("noise covariance C");
    const Eigen::MatrixXd K = data_gram(p.M, rd.C, rd.nu0_sq);
    const Eigen::MatrixXd resid = rd.y - p.M * s0;
    const Eigen::MatrixXd cinv_r = cllt.solve(resid) / rd.nu0_sq;
    const Eigen::MatrixXd b = p.M.transpose() * cinv_r; // L x V

    PosteriorMoments mo;
    mo.D = D;
    mo.omega = as.assemble(r_inv, D, K);
    auto factor = std::make_shared<CholFactor>(as.symbolic(), mo.omega);
    mo.logdet_omega = factor->logdet();

    const Eigen::MatrixXd db = D.cwiseProduct(b);
    const Eigen::VectorXd zvec = factor->solve(Eigen::VectorXd(db.transpose().reshaped()));
    mo.z = zvec.reshaped(V, L).transpose();
    mo.mu = s0 + D.cwiseProduct(mo.z);

    mo.u = Eigen::MatrixXd::Zero(L, V);
    for (int l = 0; l < L; ++l)
        for (int v = 0; v < V; ++v)
            if (D(l, v) > 0) mo.u(l, v) = s0(l, v) / D(l, v);
    mo.omega_inv_m = mo.u + mo.z;
    {
        // Literal m = D M'C^-1 y / nu0^2 + R^-1 D^-1 s0.
        const Eigen::MatrixXd a = p.M.transpose() * cllt.solve(rd.y) / rd.nu0_sq;
        mo.m = D.cwiseProduct(a);
        for (int l = 0; l < L; ++l) {
            const SparseSym& r = r_inv[r_inv.size() == 1 ? 0 : static_cast<std::size_t>(l)];
            mo.m.row(l) += (r * Eigen::VectorXd(mo.u.row(l).transpose())).transpose();
        }
    }

    // Selected inverse on pattern(Omega); this covers the L x L location
    // blocks and pattern(R^-1) inside each IC block.
    const SelectedInverse sel(*factor);
    mo.omega_inv = mo.omega;
    {
        auto iv = mo.omega_inv.values();
        for (std::size_t q = 0; q < iv.size(); ++q) iv[q] = sel.at_position(as.factor_position(static_cast<int>(q)));
    }
    const auto iv = mo.omega_inv.values();
    mo.location_cov.resize(L, static_cast<Eigen::Index>(L) * V);
    for (int v = 0; v < V; ++v)
        for (int l = 0; l < L; ++l)
            for (int k = 0; k <= l; ++k) {
                const double x = iv[static_cast<std::size_t>(as.cross_position(v, l, k))];
                mo.location_cov(l, v * L + k) = x;
                mo.location_cov(k, v * L + l) = x;
            }

    // Weights for the kappa objective: Omega^-1_ij + z_i z_j on pattern(R^-1),
    // off-diagonal entries counted twice.
    const SparseSym& rp = as.r_pattern();
    const auto ro = rp.outer();
    const auto ri = rp.inner();
    mo.kappa_weights.assign(static_cast<std::size_t>(L), Eigen::VectorXd(rp.nnz()));
    for (int l = 0; l < L; ++l) {
        Eigen::VectorXd& w = mo.kappa_weights[static_cast<std::size_t>(l)];
        for (int j = 0; j < V; ++j)
            for (int q = ro[static_cast<std::size_t>(j)]; q < ro[static_cast<std::size_t>(j) + 1]; ++q) {
                const int i = ri[static_cast<std::size_t>(q)];
                const double x = iv[static_cast<std::size_t>(as.r_position(l, q))] + mo.z(l, i) * mo.z(l, j);
                w[q] = i == j ? x : 2.0 * x;
            }
    }

    // log p(y | params) via the determinant lemma and Woodbury identity.
    const double logdet_c = 2.0 * Eigen::MatrixXd(cllt.matrixL()).diagonal().array().log().sum() + L * std::log(rd.nu0_sq);
    const double quad = resid.cwiseProduct(cinv_r).sum() - db.cwiseProduct(mo.z).sum();
    mo.loglik = -0.5 * (static_cast<double>(V) * L * std::log(2.0 * std::numbers::pi) + V * logdet_c + mo.logdet_omega - logdet_r + quad);
    mo.factor = std::move(factor);
    return mo;
}

/// Sum over locations of E[s(v) s(v)'], i.e. sum_v T(v, v).
inline Eigen::MatrixXd second_moment(const PosteriorMoments& mo)
{
    const Eigen::Index V = mo.mu.cols();
    Eigen::MatrixXd t = mo.mu * mo.mu.transpose();
    for (Eigen::Index v = 0; v < V; ++v) t += mo.D.col(v).asDiagonal() * mo.block(static_cast<int>(v)) * mo.D.col(v).asDiagonal();
    return 0.5 * (t + t.transpose());
}

/// M-hat = (sum_v y(v) t(v)')(sum_v T(v, v))^-1.
inline Eigen::MatrixXd update_M(const PosteriorMoments& mo, const ReducedData& rd)
{
    const Eigen::MatrixXd t = second_moment(mo);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(t);
    const double scale = t.diagonal().cwiseAbs().maxCoeff();
    if (ldlt.info() != Eigen::Success || !(scale > 0) || ldlt.vectorD().minCoeff() <= 1e-12 * scale)
        throw SingularSecondMoment("sum of posterior second moments is not invertible");
    const Eigen::MatrixXd cross = rd.y * mo.mu.transpose();
    return ldlt.solve(cross.transpose()).transpose();
}

/// f(kappa) = q log|R^-1| - sum over pattern(R^-1) of R^-1_ij (Omega^-1_ij + z_i z_j),
/// with the weights summed over the ICs sharing kappa (q of them).
inline double kappa_objective(const SpatialPrior& prior, double kappa, const Eigen::VectorXd& weights, int q)
{
    if (!(kappa > 0)) throw NonPositiveKappa("kappa must be positive");
    const SparseSym r = prior.r_inv(kappa);
    const auto rv = r.values();
    const Eigen::Map<const Eigen::VectorXd> x(rv.data(), static_cast<Eigen::Index>(rv.size()));
    return q * prior.logdet(r) - x.dot(weights);
}

/// f_l(kappa) for one IC from the stored moments.
inline double kappa_objective(const SpatialPrior& prior, double kappa, int ic, const PosteriorMoments& mo)
{
    return kappa_objective(prior, kappa, mo.kappa_weights.at(static_cast<std::size_t>(ic)), 1);
}

namespace detail {

// sum_ij A_ij B_ij over pattern(A) for symmetric A (lower storage), B given
// by a callback: the column sums of the elementwise product.
template <class F>
double pattern_trace(const SparseSym& a, F&& b)
{
    double s = 0.0;
    const auto vals = a.values();
    for (int j = 0; j < a.order(); ++j)
        for (int p = a.outer()[static_cast<std::size_t>(j)]; p < a.outer()[static_cast<std::size_t>(j) + 1]; ++p) {
            const int i = a.inner()[static_cast<std::size_t>(p)];
            const double x = vals[static_cast<std::size_t>(p)] * b(i, j);
            s += i == j ? x : 2.0 * x;
        }
    return s;
}

} // namespace detail

/// The objective written out term by term:
/// log|R^-1| - Tr(R^-1 Omega^-1_ll) - Tr(R^-1 W_ll) + u_l' R^-1 v_l,
/// W = (Omega^-1 m)(Omega^-1 m)', v = 2 Omega^-1 m - u. Requires D > 0.
inline double kappa_objective_literal(const EmProblem& pr, double kappa, int ic, const PosteriorMoments& mo)
{
    if (!(kappa > 0)) throw NonPositiveKappa("kappa must be positive");
    const int V = pr.n_locations();
    const SparseSym r = pr.prior().r_inv(kappa);
    const Eigen::VectorXd w = mo.omega_inv_m.row(ic).transpose();
    const Eigen::VectorXd u = mo.u.row(ic).transpose();
    const Eigen::VectorXd v = 2.0 * w - u;
    const double tr_omega = detail::pattern_trace(r, [&](int i, int j) { return mo.omega_inv(ic * V + i, ic * V + j); });
    const double tr_w = detail::pattern_trace(r, [&](int i, int j) { return w[i] * w[j]; });
    return pr.prior().logdet(r) - tr_omega - tr_w + u.dot(r * v);
}

struct LineMaximum
{
    double x = 0.0;
    double value = 0.0;
    bool at_boundary = false;
    int evaluations = 0;
};

/// Golden-section search for the maximum of f on [a, b].
inline LineMaximum golden_section_max(const std::function<double(double)>& f, double a, double b, double tol)
{
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    const double lo = a, hi = b;
    double c = b - g * (b - a), d = a + g * (b - a);
    double fc = f(c), fd = f(d);
    int n = 2;
    while (b - a > tol) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        ++n;
    }
    LineMaximum r;
    r.x = fc >= fd ? c : d;
    r.value = std::max(fc, fd);
    r.evaluations = n;
    r.at_boundary = r.x - lo <= tol || hi - r.x <= tol;
    return r;
}

struct KappaUpdate
{
    Eigen::VectorXd kappas;
    bool at_boundary = false;
};

/// Maximizes f_l (per IC) or sum_l f_l (common) over ln kappa within
/// [ln kappa - w, ln kappa + w]. The current value is kept if it scores higher.
inline KappaUpdate update_kappa(const SpatialPrior& prior, const PosteriorMoments& mo, const Eigen::VectorXd& current,
                                double half_width = 3.0, double tol = 1e-4)
{
    const int L = static_cast<int>(mo.kappa_weights.size());
    KappaUpdate out{current, false};
    const bool common = current.size() == 1;
    if (!common && current.size() != L) throw DimensionMismatch("need 1 or L kappas");
    for (Eigen::Index g = 0; g < current.size(); ++g) {
        if (!(current[g] > 0)) throw NonPositiveKappa("kappa must be positive");
        Eigen::VectorXd w;
        int q = 1;
        if (common) {
            w = Eigen::VectorXd::Zero(mo.kappa_weights.front().size());
            for (const auto& x : mo.kappa_weights) w += x;
            q = L;
        } else {
            w = mo.kappa_weights[static_cast<std::size_t>(g)];
        }
        // Far outside the mesh's resolvable range R^-1 loses definiteness to
        // rounding; such trial points score -inf.
        auto f = [&](double t) {
            try {
                return kappa_objective(prior, std::exp(t), w, q);
            } catch (const NotPositiveDefinite&) {
                return -std::numeric_limits<double>::infinity();
            }
        };
        const double t0 = std::log(current[g]);
        const LineMaximum best = golden_section_max(f, t0 - half_width, t0 + half_width, tol);
        if (best.value > f(t0)) {
            out.kappas[g] = std::exp(best.x);
            out.at_boundary = out.at_boundary || best.at_boundary;
        }
    }
    return out;
}

/// Marginal log-likelihood of delta_hat = D A x + e, e ~ N(0, sigma^2 I),
/// summed over the rows given (one row per IC sharing kappa):
/// -log|K| + log|R^-1| - V log sigma^2 - |d|^2/sigma^2 + d'D K^-1 D d/sigma^4,
/// K = R^-1 + D^2/sigma^2.
inline double init_kappa_objective(const SpatialPrior& prior, double kappa, const Eigen::MatrixXd& delta_hat,
                                   const Eigen::MatrixXd& D, const Eigen::VectorXd& sigma_sq)
{
    if (!(kappa > 0)) throw NonPositiveKappa("kappa must be positive");
    if (delta_hat.rows() != D.rows() || delta_hat.cols() != D.cols() || sigma_sq.size() != D.rows())
        throw DimensionMismatch("delta_hat, D and sigma^2 disagree in shape");
    const SparseSym r = prior.r_inv(kappa);
    const double logdet_r = prior.logdet(r);
    const double V = static_cast<double>(D.cols());
    double total = 0.0;
    for (Eigen::Index l = 0; l < D.rows(); ++l) {
        const double s2 = sigma_sq[l];
        if (!(s2 > 0)) throw InvalidMatrix("sigma^2 must be positive");
        SparseSym k = r;
        auto kv = k.values();
        for (int v = 0; v < k.order(); ++v) kv[static_cast<std::size_t>(k.position(v, v))] += D(l, v) * D(l, v) / s2;
        const CholFactor f = cholesky(prior.symbolic(), k);
        const Eigen::VectorXd dd = D.row(l).transpose().cwiseProduct(delta_hat.row(l).transpose());
        total += -f.logdet() + logdet_r - V * std::log(s2) - delta_hat.row(l).squaredNorm() / s2 + dd.dot(f.solve(dd)) / (s2 * s2);
    }
    return total;
}

struct KappaInit
{
    Eigen::VectorXd kappas;
    bool at_boundary = false;
};

/// Initial kappa: a 25-point grid in ln kappa over [lo, hi], refined by
/// golden-section search between the neighbours of the best grid point.
inline KappaInit init_kappa(const SpatialPrior& prior, const Eigen::MatrixXd& delta_hat, const Eigen::MatrixXd& D,
                            const Eigen::VectorXd& sigma_sq, Smoothness mode, std::pair<double, double> bounds, double tol = 1e-4)
{
    const int n_grid = 25;
    const double a = std::log(bounds.first), b = std::log(bounds.second);
    if (!(b > a)) throw InvalidDims("kappa bounds must satisfy 0 < lo < hi");
    const double step = (b - a) / (n_grid - 1);
    auto one = [&](const std::vector<Eigen::Index>& rows) {
        Eigen::MatrixXd dh(static_cast<Eigen::Index>(rows.size()), D.cols()), dd(dh.rows(), D.cols());
        Eigen::VectorXd s2(dh.rows());
        for (std::size_t q = 0; q < rows.size(); ++q) {
            dh.row(static_cast<Eigen::Index>(q)) = delta_hat.row(rows[q]);
            dd.row(static_cast<Eigen::Index>(q)) = D.row(rows[q]);
            s2[static_cast<Eigen::Index>(q)] = sigma_sq[rows[q]];
        }
        auto f = [&](double t) {
            try {
                return init_kappa_objective(prior, std::exp(t), dh, dd, s2);
            } catch (const NotPositiveDefinite&) {
                return -std::numeric_limits<double>::infinity();
            }
        };
        int best = 0;
        double best_val = -std::numeric_limits<double>::infinity();
        for (int g = 0; g < n_grid; ++g) {
            const double val = f(a + g * step);
            if (val > best_val) {
                best_val = val;
                best = g;
            }
        }
        const double lo = a + std::max(best - 1, 0) * step, hi = a + std::min(best + 1, n_grid - 1) * step;
        LineMaximum m = golden_section_max(f, lo, hi, tol);
        if (best_val > m.value) {
            m.x = a + best * step;
            m.value = best_val;
        }
        const bool edge = (best == 0 && m.x - a <= tol) || (best == n_grid - 1 && b - m.x <= tol);
        return std::pair<double, bool>{std::exp(m.x), edge};
    };
    KappaInit out;
    if (mode == Smoothness::Common) {
        std::vector<Eigen::Index> all(static_cast<std::size_t>(D.rows()));
        for (Eigen::Index l = 0; l < D.rows(); ++l) all[static_cast<std::size_t>(l)] = l;
        const auto [k, e] = one(all);
        out.kappas = Eigen::VectorXd::Constant(1, k);
        out.at_boundary = e;
    } else {
        out.kappas.resize(D.rows());
        for (Eigen::Index l = 0; l < D.rows(); ++l) {
            const auto [k, e] = one({l});
            out.kappas[l] = k;
            out.at_boundary = out.at_boundary || e;
        }
    }
    return out;
}

struct TraceRow
{
    int evaluation = 0;   // fixed-point map evaluations so far
    double change = 0.0;  // |F(theta) - theta|
    double loglik = 0.0;  // log-likelihood at theta
    std::string step;     // "em", "squarem" or "fallback"
};

struct FitResult
{
    ModelParams params;
    Eigen::MatrixXd ics;         // L x V posterior means
    Eigen::MatrixXd effects;     // ics - template mean
    Eigen::MatrixXd marginal_sd; // sqrt(D^2 diag Omega^-1)
    Eigen::MatrixXd timecourses; // T x L mixing mapped back through the reduction
    std::vector<TraceRow> trace;
    int iterations = 0;
    bool converged = false;
    bool kappa_at_boundary = false;
    double loglik = 0.0;
    double wall_seconds = 0.0;
    Eigen::MatrixXd D;
    std::shared_ptr<const CholFactor> omega_factor; // for posterior sampling
};

/// Starting values from the template: M0 = y s0'(s0 s0')^-1, dual-regression
/// maps M0^-1 y, and their noise variances nu0^2 [M0^-1 C M0^-T]_ll.
struct EmStart
{
    Eigen::MatrixXd M;
    Eigen::MatrixXd maps;
    Eigen::VectorXd sigma_sq;
};

/// Unshrunk maps M^-1 y and their noise variances for a given mixing matrix.
inline EmStart em_start_from(const ReducedData& rd, const Eigen::MatrixXd& M)
{
    EmStart s;
    s.M = M;
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(s.M);
    if (!lu.isInvertible()) throw RankDeficientMaps("initial mixing matrix is singular");
    const Eigen::MatrixXd minv = lu.inverse();
    s.maps = minv * rd.y;
    s.sigma_sq = rd.nu0_sq * (minv * rd.C * minv.transpose()).diagonal();
    return s;
}

inline EmStart em_start(const ReducedData& rd, const Eigen::MatrixXd& s0)
{
    const Eigen::MatrixXd g = s0 * s0.transpose();
    const Eigen::LDLT<Eigen::MatrixXd> gl(g);
    if (gl.info() != Eigen::Success || gl.vectorD().minCoeff() <= 1e-12 * g.diagonal().maxCoeff())
        throw RankDeficientMaps("template means are rank deficient");
    return em_start_from(rd, gl.solve(s0 * rd.y.transpose()).transpose());
}

namespace detail {

inline Eigen::VectorXd pack(const ModelParams& p)
{
    Eigen::VectorXd t(p.M.size() + p.kappas.size());
    t.head(p.M.size()) = p.M.reshaped();
    t.tail(p.kappas.size()) = p.kappas.array().log().matrix();
    return t;
}

inline ModelParams unpack(const Eigen::VectorXd& t, const ModelParams& like)
{
    ModelParams p = like;
    p.M = t.head(like.M.size()).reshaped(like.M.rows(), like.M.cols());
    p.kappas = t.tail(like.kappas.size()).array().exp().matrix();
    return p;
}

} // namespace detail

/// EM with optional SQUAREM acceleration. A spatial prior gives stICA;
/// an independent prior gives tICA (no kappa).
inline FitResult fit_em(const EmProblem& pr, ModelParams start, const EmOptions& opts)
{
    const auto t_begin = std::chrono::steady_clock::now();
    FitResult res;
    const bool spatial = pr.prior().spatial();
    if (!spatial) start.kappas.resize(0);

    struct Eval
    {
        Eigen::VectorXd next;
        double loglik;
    };
    int evals = 0;
    bool boundary = false;
    double best_ll = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta;
    auto F = [&](const Eigen::VectorXd& theta) {
        ++evals;
        const ModelParams p = detail::unpack(theta, start);
        const PosteriorMoments mo = e_step(pr, p);
        if (!std::isfinite(mo.loglik)) throw NotPositiveDefinite("non-finite log-likelihood");
        if (mo.loglik > best_ll) {
            best_ll = mo.loglik;
            best_theta = theta;
        }
        ModelParams q = p;
        q.M = update_M(mo, pr.data());
        if (spatial) {
            const KappaUpdate ku = update_kappa(pr.prior(), mo, p.kappas, opts.kappa_half_width, opts.kappa_tol);
            q.kappas = ku.kappas;
            boundary = boundary || ku.at_boundary;
        }
        return Eval{detail::pack(q), mo.loglik};
    };

    Eigen::VectorXd theta = detail::pack(start);
    bool converged = false;
    auto record = [&](double change, double ll, const char* step) { res.trace.push_back({evals, change, ll, step}); };
    while (!converged && evals < opts.max_iter) {
        const Eval e1 = F(theta);
        const Eigen::VectorXd r = e1.next - theta;
        record(r.norm(), e1.loglik, "em");
        if (r.norm() < opts.tol) {
            theta = e1.next;
            converged = true;
            break;
        }
        if (!opts.squarem || evals + 2 > opts.max_iter) {
            theta = e1.next;
            continue;
        }
        const Eval e2 = F(e1.next);
        const Eigen::VectorXd r2 = e2.next - e1.next;
        record(r2.norm(), e2.loglik, "em");
        if (r2.norm() < opts.tol) {
            theta = e2.next;
            converged = true;
            break;
        }
        const Eigen::VectorXd w = r2 - r;
        const double alpha = w.norm() > 0 ? std::min(-r.norm() / w.norm(), -1.0) : -1.0;
        const Eigen::VectorXd extrapolated = theta - 2.0 * alpha * r + alpha * alpha * w;
        bool accepted = false;
        if (alpha < -1.0) {
            try {
                const Eval e3 = F(extrapolated);
                if (e3.loglik >= e1.loglik) {
                    record((e3.next - extrapolated).norm(), e3.loglik, "squarem");
                    theta = e3.next;
                    accepted = true;
                }
            } catch (const Error&) {
            }
        }
        if (!accepted) {
            if (alpha < -1.0) res.trace.push_back({evals, r2.norm(), e2.loglik, "fallback"});
            theta = e2.next;
        }
    }
    if (!converged && best_theta.size() > 0) theta = best_theta;

    res.params = detail::unpack(theta, start);
    const PosteriorMoments mo = e_step(pr, res.params);
    const int L = pr.n_ics(), V = pr.n_locations();
    res.effects = pr.D().cwiseProduct(mo.z);
    res.ics = pr.s0() + res.effects;
    res.marginal_sd.resize(L, V);
    for (int l = 0; l < L; ++l)
        for (int v = 0; v < V; ++v) res.marginal_sd(l, v) = pr.D()(l, v) * std::sqrt(mo.omega_inv(l * V + v, l * V + v));
    const ReducedData& rd = pr.data();
    if (rd.H.size() > 0) res.timecourses = rd.H.transpose() * rd.C.llt().solve(res.params.M);
    res.iterations = evals;
    res.converged = converged;
    res.kappa_at_boundary = boundary;
    res.loglik = mo.loglik;
    res.D = pr.D();
    res.omega_factor = mo.factor;
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    return res;
}

/// tICA: the same EM with R^-1 = I, so the E-step decouples over locations.
inline FitResult fit_tica(const ReducedData& rd, const Template& tmpl, const EmOptions& opts = {})
{
    const Eigen::MatrixXd D = prior_sd(tmpl.var, opts.floor_variance);
    const EmProblem pr(rd, tmpl.mean, D, SpatialPrior::independent(static_cast<int>(tmpl.mean.cols())));
    const EmStart st = em_start(rd, tmpl.mean);
    return fit_em(pr, ModelParams{st.M, Eigen::VectorXd(), rd.nu0_sq, rd.C}, opts);
}

/// stICA: M from the template regression (or from a tICA fit), kappa from the
/// unshrunk deviations M^-1 y - s0, then EM under the SPDE prior.
inline FitResult fit_stica(const ReducedData& rd, const Template& tmpl, const TriMesh& mesh, const EmOptions& opts = {})
{
    auto precision = std::make_shared<const DataPrecision>(mesh);
    const Eigen::MatrixXd D = prior_sd(tmpl.var, opts.floor_variance);
    const EmProblem pr(rd, tmpl.mean, D, SpatialPrior(precision));
    const EmStart st = opts.init == EmInit::TemplateIca ? em_start_from(rd, fit_tica(rd, tmpl, opts).params.M)
                                                        : em_start(rd, tmpl.mean);
    const KappaInit k0 = init_kappa(pr.prior(), st.maps - tmpl.mean, D, st.sigma_sq, opts.mode, kappa_bounds(mesh), opts.kappa_tol);
    ModelParams p{st.M, k0.kappas, rd.nu0_sq, rd.C};
    FitResult r = fit_em(pr, p, opts);
    r.kappa_at_boundary = r.kappa_at_boundary || k0.at_boundary;
    return r;
}

} // namespace stica

#endif
