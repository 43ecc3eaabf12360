#ifndef STICA_SPARSELA_HPP
#define STICA_SPARSELA_HPP

// Sparse symmetric positive definite linear algebra: up-looking Cholesky with
// cached symbolic analysis, triangular solves, log-determinants and selected
// (Takahashi) inversion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/OrderingMethods>
#include <Eigen/Sparse>

#include "errors.hpp"

namespace stica {

using SpMat = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Triplet = Eigen::Triplet<double, int>;
using Pattern = std::vector<std::pair<int, int>>;

/// Symmetric sparse matrix stored as its lower triangle in compressed columns.
/// Row indices are sorted within each column and every diagonal entry is
/// stored (possibly as an explicit zero).
class SparseSym
{
public:
    SparseSym() = default;

    /// Builds from (row, col, value) entries. Upper-triangle entries are
    /// mirrored into the lower triangle; a coordinate given twice is an error.
    SparseSym(int order, const std::vector<Triplet>& entries)
    {
        if (order <= 0) throw InvalidMatrix("order must be positive");
        std::vector<Triplet> lower;
        lower.reserve(entries.size() + static_cast<std::size_t>(order));
        std::vector<std::pair<int, int>> seen;
        seen.reserve(entries.size());
        for (const auto& t : entries) {
            int r = t.row(), c = t.col();
            if (r < 0 || c < 0 || r >= order || c >= order)
                throw InvalidMatrix("entry (" + std::to_string(r) + "," + std::to_string(c) +
                                    ") outside order " + std::to_string(order));
            if (r < c) std::swap(r, c);
            lower.emplace_back(r, c, t.value());
            seen.emplace_back(r, c);
        }
        std::sort(seen.begin(), seen.end());
        if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
            throw InvalidMatrix("duplicate coordinate in symmetric entry list");
        lower_.resize(order, order);
        lower_.setFromTriplets(lower.begin(), lower.end());
        ensure_diagonal();
    }

    /// Takes ownership of a lower-triangular matrix (entries above the diagonal
    /// are rejected).
    static SparseSym from_lower(SpMat lower)
    {
        if (lower.rows() != lower.cols() || lower.rows() == 0)
            throw InvalidMatrix("lower factor must be square and non-empty");
        lower.makeCompressed();
        for (int j = 0; j < lower.outerSize(); ++j)
            for (SpMat::InnerIterator it(lower, j); it; ++it)
                if (it.row() < j) throw InvalidMatrix("entry above the diagonal in lower triangle");
        SparseSym s;
        s.lower_ = std::move(lower);
        s.ensure_diagonal();
        return s;
    }

    /// Lower triangle of a full symmetric sparse matrix.
    static SparseSym from_full(const SpMat& full)
    {
        SpMat lo = full.triangularView<Eigen::Lower>();
        return from_lower(std::move(lo));
    }

    static SparseSym identity(int n)
    {
        return diagonal(Eigen::VectorXd::Ones(n));
    }

    static SparseSym diagonal(const Eigen::VectorXd& d)
    {
        std::vector<Triplet> t;
        t.reserve(static_cast<std::size_t>(d.size()));
        for (int i = 0; i < d.size(); ++i) t.emplace_back(i, i, d[i]);
        return SparseSym(static_cast<int>(d.size()), t);
    }

    /// Lower triangle of a dense symmetric matrix; entries with |a| <= drop
    /// off the diagonal are not stored.
    static SparseSym from_dense(const Eigen::MatrixXd& a, double drop = 0.0)
    {
        if (a.rows() != a.cols()) throw DimensionMismatch("dense matrix is not square");
        std::vector<Triplet> t;
        for (int j = 0; j < a.cols(); ++j)
            for (int i = j; i < a.rows(); ++i)
                if (i == j || std::abs(a(i, j)) > drop) t.emplace_back(i, j, a(i, j));
        return SparseSym(static_cast<int>(a.rows()), t);
    }

    int order() const { return static_cast<int>(lower_.rows()); }
    Eigen::Index nnz() const { return lower_.nonZeros(); }
    const SpMat& lower() const { return lower_; }

    std::span<double> values() { return {lower_.valuePtr(), static_cast<std::size_t>(lower_.nonZeros())}; }
    std::span<const double> values() const
    {
        return {lower_.valuePtr(), static_cast<std::size_t>(lower_.nonZeros())};
    }
    std::span<const int> outer() const
    {
        return {lower_.outerIndexPtr(), static_cast<std::size_t>(lower_.outerSize() + 1)};
    }
    std::span<const int> inner() const
    {
        return {lower_.innerIndexPtr(), static_cast<std::size_t>(lower_.nonZeros())};
    }

    /// Index into values() of entry (i, j), or -1 when not stored.
    int position(int i, int j) const
    {
        if (i < j) std::swap(i, j);
        const int* rows = lower_.innerIndexPtr();
        const int* b = rows + lower_.outerIndexPtr()[j];
        const int* e = rows + lower_.outerIndexPtr()[j + 1];
        const int* p = std::lower_bound(b, e, i);
        return (p != e && *p == i) ? static_cast<int>(p - rows) : -1;
    }

    bool contains(int i, int j) const { return position(i, j) >= 0; }

    double operator()(int i, int j) const
    {
        const int p = position(i, j);
        return p < 0 ? 0.0 : lower_.valuePtr()[p];
    }

    SpMat full() const
    {
        SpMat f = lower_.selfadjointView<Eigen::Lower>();
        f.makeCompressed();
        return f;
    }

    Eigen::MatrixXd dense() const { return Eigen::MatrixXd(full()); }

    Eigen::VectorXd operator*(const Eigen::VectorXd& x) const
    {
        if (x.size() != order()) throw DimensionMismatch("matrix-vector product");
        Eigen::VectorXd y = Eigen::VectorXd::Zero(order());
        for (int j = 0; j < order(); ++j)
            for (SpMat::InnerIterator it(lower_, j); it; ++it) {
                const int i = static_cast<int>(it.row());
                y[i] += it.value() * x[j];
                if (i != j) y[j] += it.value() * x[i];
            }
        return y;
    }

    /// Stored lower-triangle entries sorted by (row, col).
    std::vector<Triplet> entries() const
    {
        std::vector<Triplet> t;
        t.reserve(static_cast<std::size_t>(nnz()));
        for (int j = 0; j < order(); ++j)
            for (SpMat::InnerIterator it(lower_, j); it; ++it)
                t.emplace_back(static_cast<int>(it.row()), j, it.value());
        std::sort(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
            return a.row() != b.row() ? a.row() < b.row() : a.col() < b.col();
        });
        return t;
    }

    Pattern pattern() const
    {
        Pattern p;
        p.reserve(static_cast<std::size_t>(nnz()));
        for (int j = 0; j < order(); ++j)
            for (SpMat::InnerIterator it(lower_, j); it; ++it)
                p.emplace_back(static_cast<int>(it.row()), j);
        return p;
    }

    bool same_pattern(const SparseSym& o) const
    {
        return order() == o.order() && nnz() == o.nnz() &&
               std::equal(outer().begin(), outer().end(), o.outer().begin()) &&
               std::equal(inner().begin(), inner().end(), o.inner().begin());
    }

    double max_diagonal() const
    {
        double m = 0.0;
        for (int j = 0; j < order(); ++j) m = std::max(m, std::abs(lower_.coeff(j, j)));
        return m;
    }

private:
    void ensure_diagonal()
    {
        bool missing = false;
        for (int j = 0; j < lower_.outerSize() && !missing; ++j) {
            const int b = lower_.outerIndexPtr()[j];
            const int e = lower_.outerIndexPtr()[j + 1];
            missing = (b == e || lower_.innerIndexPtr()[b] != j);
        }
        if (missing) {
            std::vector<Triplet> t;
            t.reserve(static_cast<std::size_t>(lower_.nonZeros() + lower_.rows()));
            for (int j = 0; j < lower_.outerSize(); ++j)
                for (SpMat::InnerIterator it(lower_, j); it; ++it)
                    t.emplace_back(static_cast<int>(it.row()), j, it.value());
            for (int j = 0; j < lower_.rows(); ++j) t.emplace_back(j, j, 0.0); // summed into existing
            SpMat m(lower_.rows(), lower_.cols());
            m.setFromTriplets(t.begin(), t.end());
            lower_ = std::move(m);
        }
        lower_.makeCompressed();
    }

    SpMat lower_;
};

/// Text coordinate format: `order nnz` header, then one `row col value` line
/// per stored lower-triangle entry (0-based).
inline void write_sparse(std::ostream& os, const SparseSym& a)
{
    const auto t = a.entries();
    os << a.order() << ' ' << t.size() << '\n';
    char buf[64];
    for (const auto& e : t) {
        std::snprintf(buf, sizeof buf, "%.17g", e.value());
        os << e.row() << ' ' << e.col() << ' ' << buf << '\n';
    }
}

inline SparseSym read_sparse(std::istream& is)
{
    long order = 0, nnz = 0;
    if (!(is >> order >> nnz) || order <= 0 || nnz < 0) throw IoError("bad sparse matrix header");
    std::vector<Triplet> t;
    t.reserve(static_cast<std::size_t>(nnz));
    for (long k = 0; k < nnz; ++k) {
        long r = 0, c = 0;
        double v = 0;
        if (!(is >> r >> c >> v)) throw IoError("truncated sparse matrix body");
        if (c > r) throw IoError("sparse matrix file must hold the lower triangle only");
        t.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
    }
    return SparseSym(static_cast<int>(order), t);
}

enum class Ordering { Natural, Amd };

/// Symbolic Cholesky analysis of a fixed sparsity pattern: fill-reducing
/// permutation, elimination tree, row patterns of L and the column layout of L.
/// Reused for every numeric factorization of a matrix with the same pattern.
struct SymbolicCholesky
{
    int n = 0;
    std::vector<int> perm;  // perm[new] = old
    std::vector<int> iperm; // iperm[old] = new
    std::vector<int> parent;

    // L in compressed columns (permuted index space); diagonal first, rows sorted.
    std::vector<int> lp, li;
    // For each row k of L, the off-diagonal column indices in topological order.
    std::vector<int> rp, ri;

    // Permuted upper triangle C = P A P' and the map from input values to it.
    std::vector<int> cp, ci, cmap;

    // Input pattern (lower, original indexing) used to validate later inputs.
    std::vector<int> a_outer, a_inner;

    Eigen::Index factor_nnz() const { return static_cast<Eigen::Index>(li.size()); }

    bool matches(const SparseSym& a) const
    {
        return a.order() == n && a.nnz() == static_cast<Eigen::Index>(a_inner.size()) &&
               std::equal(a.outer().begin(), a.outer().end(), a_outer.begin()) &&
               std::equal(a.inner().begin(), a.inner().end(), a_inner.begin());
    }

    /// Position of entry (i, j) (original indices) in the factor storage, -1 if
    /// the entry is not part of pattern(L + L').
    int position(int i, int j) const
    {
        int a = iperm[static_cast<std::size_t>(i)], b = iperm[static_cast<std::size_t>(j)];
        if (a < b) std::swap(a, b);
        const auto first = li.begin() + lp[static_cast<std::size_t>(b)];
        const auto last = li.begin() + lp[static_cast<std::size_t>(b) + 1];
        const auto it = std::lower_bound(first, last, a);
        return (it != last && *it == a) ? static_cast<int>(it - li.begin()) : -1;
    }
};

namespace detail {

inline std::vector<int> amd_permutation(const SparseSym& a)
{
    SpMat full = a.full();
    Eigen::AMDOrdering<int> amd;
    Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> p;
    amd(full, p);
    std::vector<int> perm(p.indices().data(), p.indices().data() + p.indices().size());
    return perm;
}

} // namespace detail

inline std::shared_ptr<const SymbolicCholesky> analyze(const SparseSym& a, Ordering ordering = Ordering::Amd)
{
    auto s = std::make_shared<SymbolicCholesky>();
    const int n = a.order();
    s->n = n;
    s->a_outer.assign(a.outer().begin(), a.outer().end());
    s->a_inner.assign(a.inner().begin(), a.inner().end());

    if (ordering == Ordering::Amd && n > 2) {
        s->perm = detail::amd_permutation(a);
    } else {
        s->perm.resize(static_cast<std::size_t>(n));
        std::iota(s->perm.begin(), s->perm.end(), 0);
    }
    s->iperm.assign(static_cast<std::size_t>(n), 0);
    for (int k = 0; k < n; ++k) s->iperm[static_cast<std::size_t>(s->perm[static_cast<std::size_t>(k)])] = k;

    // C = P A P' upper triangle, columns with sorted rows.
    const auto outer = a.outer();
    const auto inner = a.inner();
    const auto nz = static_cast<std::size_t>(a.nnz());
    std::vector<int> count(static_cast<std::size_t>(n) + 1, 0);
    std::vector<int> rowc(nz), colc(nz);
    for (int j = 0; j < n; ++j)
        for (int p = outer[j]; p < outer[j + 1]; ++p) {
            int r = s->iperm[static_cast<std::size_t>(inner[static_cast<std::size_t>(p)])];
            int c = s->iperm[static_cast<std::size_t>(j)];
            if (r > c) std::swap(r, c);
            rowc[static_cast<std::size_t>(p)] = r;
            colc[static_cast<std::size_t>(p)] = c;
            ++count[static_cast<std::size_t>(c) + 1];
        }
    std::partial_sum(count.begin(), count.end(), count.begin());
    s->cp = count;
    s->ci.assign(nz, 0);
    s->cmap.assign(nz, 0);
    {
        std::vector<std::size_t> order(nz);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
            return colc[x] != colc[y] ? colc[x] < colc[y] : rowc[x] < rowc[y];
        });
        for (std::size_t q = 0; q < nz; ++q) {
            s->ci[q] = rowc[order[q]];
            s->cmap[order[q]] = static_cast<int>(q);
        }
    }

    // Elimination tree of C.
    s->parent.assign(static_cast<std::size_t>(n), -1);
    {
        std::vector<int> ancestor(static_cast<std::size_t>(n), -1);
        for (int k = 0; k < n; ++k)
            for (int p = s->cp[static_cast<std::size_t>(k)]; p < s->cp[static_cast<std::size_t>(k) + 1]; ++p) {
                int i = s->ci[static_cast<std::size_t>(p)];
                while (i != -1 && i < k) {
                    const int next = ancestor[static_cast<std::size_t>(i)];
                    ancestor[static_cast<std::size_t>(i)] = k;
                    if (next == -1) s->parent[static_cast<std::size_t>(i)] = k;
                    i = next;
                }
            }
    }

    // Row patterns via ereach; column counts follow.
    std::vector<int> mark(static_cast<std::size_t>(n), -1), stack(static_cast<std::size_t>(n)), colcount(static_cast<std::size_t>(n), 1);
    s->rp.assign(static_cast<std::size_t>(n) + 1, 0);
    s->ri.clear();
    for (int k = 0; k < n; ++k) {
        int top = n;
        mark[static_cast<std::size_t>(k)] = k;
        for (int p = s->cp[static_cast<std::size_t>(k)]; p < s->cp[static_cast<std::size_t>(k) + 1]; ++p) {
            int i = s->ci[static_cast<std::size_t>(p)];
            if (i > k) continue;
            int len = 0;
            for (; mark[static_cast<std::size_t>(i)] != k; i = s->parent[static_cast<std::size_t>(i)]) {
                stack[static_cast<std::size_t>(len++)] = i;
                mark[static_cast<std::size_t>(i)] = k;
            }
            while (len > 0) stack[static_cast<std::size_t>(--top)] = stack[static_cast<std::size_t>(--len)];
        }
        for (int q = top; q < n; ++q) {
            s->ri.push_back(stack[static_cast<std::size_t>(q)]);
            ++colcount[static_cast<std::size_t>(stack[static_cast<std::size_t>(q)])];
        }
        s->rp[static_cast<std::size_t>(k) + 1] = static_cast<int>(s->ri.size());
    }

    s->lp.assign(static_cast<std::size_t>(n) + 1, 0);
    for (int j = 0; j < n; ++j) s->lp[static_cast<std::size_t>(j) + 1] = s->lp[static_cast<std::size_t>(j)] + colcount[static_cast<std::size_t>(j)];
    s->li.assign(static_cast<std::size_t>(s->lp[static_cast<std::size_t>(n)]), 0);
    std::vector<int> next(s->lp.begin(), s->lp.end() - 1);
    for (int k = 0; k < n; ++k) {
        s->li[static_cast<std::size_t>(next[static_cast<std::size_t>(k)]++)] = k;
        for (int q = s->rp[static_cast<std::size_t>(k)]; q < s->rp[static_cast<std::size_t>(k) + 1]; ++q)
            s->li[static_cast<std::size_t>(next[static_cast<std::size_t>(s->ri[static_cast<std::size_t>(q)])]++)] = k;
    }
    return s;
}

/// Numeric Cholesky factor P A P' = L L'. Immutable; safe to share between
/// threads for concurrent solves.
class CholFactor
{
public:
    /// A pivot below this multiple of its own diagonal entry of A is treated as
    /// loss of positive definiteness.
    static constexpr double pivot_tolerance = 1e-14;

    CholFactor(std::shared_ptr<const SymbolicCholesky> symbolic, const SparseSym& a)
        : sym_(std::move(symbolic))
    {
        if (!sym_->matches(a))
            throw DimensionMismatch("matrix pattern differs from the analysed pattern");
        factorize(a);
    }

    int order() const { return sym_->n; }
    const SymbolicCholesky& symbolic() const { return *sym_; }
    std::shared_ptr<const SymbolicCholesky> symbolic_ptr() const { return sym_; }
    std::span<const double> values() const { return lx_; }

    double diag(int k) const { return lx_[static_cast<std::size_t>(sym_->lp[static_cast<std::size_t>(k)])]; }

    /// Solves A x = b.
    Eigen::VectorXd solve(const Eigen::VectorXd& b) const
    {
        if (b.size() != order()) throw DimensionMismatch("right-hand side has wrong length");
        Eigen::VectorXd x(order());
        for (int k = 0; k < order(); ++k) x[k] = b[sym_->perm[static_cast<std::size_t>(k)]];
        lower_solve(x);
        upper_solve(x);
        Eigen::VectorXd out(order());
        for (int k = 0; k < order(); ++k) out[sym_->perm[static_cast<std::size_t>(k)]] = x[k];
        return out;
    }

    Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const
    {
        if (b.rows() != order()) throw DimensionMismatch("right-hand side has wrong row count");
        Eigen::MatrixXd out(b.rows(), b.cols());
        for (Eigen::Index c = 0; c < b.cols(); ++c) out.col(c) = solve(Eigen::VectorXd(b.col(c)));
        return out;
    }

    double logdet() const
    {
        double s = 0.0;
        for (int k = 0; k < order(); ++k) s += std::log(diag(k));
        return 2.0 * s;
    }

    /// Maps a standard normal vector z to x = P' L^{-T} z, so Cov(x) = A^{-1}.
    Eigen::VectorXd colour(const Eigen::VectorXd& z) const
    {
        if (z.size() != order()) throw DimensionMismatch("noise vector has wrong length");
        Eigen::VectorXd x = z;
        upper_solve(x);
        Eigen::VectorXd out(order());
        for (int k = 0; k < order(); ++k) out[sym_->perm[static_cast<std::size_t>(k)]] = x[k];
        return out;
    }

    /// L as an Eigen sparse matrix (permuted index space).
    SpMat factor_matrix() const
    {
        std::vector<Triplet> t;
        t.reserve(lx_.size());
        for (int j = 0; j < order(); ++j)
            for (int p = sym_->lp[static_cast<std::size_t>(j)]; p < sym_->lp[static_cast<std::size_t>(j) + 1]; ++p)
                t.emplace_back(sym_->li[static_cast<std::size_t>(p)], j, lx_[static_cast<std::size_t>(p)]);
        SpMat l(order(), order());
        l.setFromTriplets(t.begin(), t.end());
        return l;
    }

private:
    void factorize(const SparseSym& a)
    {
        const SymbolicCholesky& s = *sym_;
        const int n = s.n;
        std::vector<double> cx(s.ci.size());
        const auto av = a.values();
        for (std::size_t p = 0; p < av.size(); ++p) cx[static_cast<std::size_t>(s.cmap[p])] = av[p];

        lx_.assign(s.li.size(), 0.0);
        std::vector<double> x(static_cast<std::size_t>(n), 0.0);
        std::vector<int> next(s.lp.begin(), s.lp.end() - 1);
        for (int k = 0; k < n; ++k) {
            for (int p = s.cp[static_cast<std::size_t>(k)]; p < s.cp[static_cast<std::size_t>(k) + 1]; ++p)
                x[static_cast<std::size_t>(s.ci[static_cast<std::size_t>(p)])] = cx[static_cast<std::size_t>(p)];
            double d = x[static_cast<std::size_t>(k)];
            const double tol = pivot_tolerance * std::abs(d);
            x[static_cast<std::size_t>(k)] = 0.0;
            for (int q = s.rp[static_cast<std::size_t>(k)]; q < s.rp[static_cast<std::size_t>(k) + 1]; ++q) {
                const auto i = static_cast<std::size_t>(s.ri[static_cast<std::size_t>(q)]);
                const double lki = x[i] / lx_[static_cast<std::size_t>(s.lp[i])];
                x[i] = 0.0;
                const int end = next[i];
                for (int p = s.lp[i] + 1; p < end; ++p)
                    x[static_cast<std::size_t>(s.li[static_cast<std::size_t>(p)])] -= lx_[static_cast<std::size_t>(p)] * lki;
                d -= lki * lki;
                lx_[static_cast<std::size_t>(next[i]++)] = lki;
            }
            if (!(d > tol))
                throw NotPositiveDefinite("non-positive pivot " + std::to_string(d) + " at column " +
                                          std::to_string(s.perm[static_cast<std::size_t>(k)]));
            lx_[static_cast<std::size_t>(next[static_cast<std::size_t>(k)]++)] = std::sqrt(d);
        }
    }

    // x <- L^{-1} x
    void lower_solve(Eigen::VectorXd& x) const
    {
        const SymbolicCholesky& s = *sym_;
        for (int j = 0; j < s.n; ++j) {
            const int b = s.lp[static_cast<std::size_t>(j)];
            x[j] /= lx_[static_cast<std::size_t>(b)];
            const double xj = x[j];
            for (int p = b + 1; p < s.lp[static_cast<std::size_t>(j) + 1]; ++p)
                x[s.li[static_cast<std::size_t>(p)]] -= lx_[static_cast<std::size_t>(p)] * xj;
        }
    }

    // x <- L^{-T} x
    void upper_solve(Eigen::VectorXd& x) const
    {
        const SymbolicCholesky& s = *sym_;
        for (int j = s.n - 1; j >= 0; --j) {
            const int b = s.lp[static_cast<std::size_t>(j)];
            double acc = x[j];
            for (int p = b + 1; p < s.lp[static_cast<std::size_t>(j) + 1]; ++p)
                acc -= lx_[static_cast<std::size_t>(p)] * x[s.li[static_cast<std::size_t>(p)]];
            x[j] = acc / lx_[static_cast<std::size_t>(b)];
        }
    }

    std::shared_ptr<const SymbolicCholesky> sym_;
    std::vector<double> lx_;
};

inline CholFactor cholesky(const SparseSym& a, Ordering ordering = Ordering::Amd)
{
    return CholFactor(analyze(a, ordering), a);
}

inline CholFactor cholesky(std::shared_ptr<const SymbolicCholesky> symbolic, const SparseSym& a)
{
    return CholFactor(std::move(symbolic), a);
}

inline Eigen::VectorXd solve(const CholFactor& f, const Eigen::VectorXd& b) { return f.solve(b); }
inline Eigen::MatrixXd solve(const CholFactor& f, const Eigen::MatrixXd& b) { return f.solve(b); }
inline double logdet(const CholFactor& f) { return f.logdet(); }

/// Entries of A^{-1} on pattern(L + L'), computed with the Takahashi recursion.
class SelectedInverse
{
public:
    explicit SelectedInverse(const CholFactor& f) : sym_(f.symbolic_ptr())
    {
        const SymbolicCholesky& s = *sym_;
        const auto lx = f.values();
        const int n = s.n;
        z_.assign(lx.size(), 0.0);
        std::vector<int> slot(static_cast<std::size_t>(n), -1);
        std::vector<double> acc;
        for (int j = n - 1; j >= 0; --j) {
            const int b = s.lp[static_cast<std::size_t>(j)];
            const int e = s.lp[static_cast<std::size_t>(j) + 1];
            const double ljj = lx[static_cast<std::size_t>(b)];
            const int m = e - b - 1;
            acc.assign(static_cast<std::size_t>(m), 0.0);
            for (int q = 0; q < m; ++q) slot[static_cast<std::size_t>(s.li[static_cast<std::size_t>(b + 1 + q)])] = q;

            // acc_i = sum_{k in struct(L_j)} Z_ik L_kj, exploiting symmetry of Z.
            for (int q = 0; q < m; ++q) {
                const auto pk = static_cast<std::size_t>(b + 1 + q);
                const auto k = static_cast<std::size_t>(s.li[pk]);
                const double lkj = lx[pk];
                const auto kb = static_cast<std::size_t>(s.lp[k]);
                const auto ke = static_cast<std::size_t>(s.lp[k + 1]);
                acc[static_cast<std::size_t>(q)] += z_[kb] * lkj;
                for (std::size_t p = kb + 1; p < ke; ++p) {
                    const int r = slot[static_cast<std::size_t>(s.li[p])];
                    if (r < 0) continue;
                    acc[static_cast<std::size_t>(r)] += z_[p] * lkj;
                    acc[static_cast<std::size_t>(q)] += z_[p] * lx[static_cast<std::size_t>(b + 1 + r)];
                }
            }
            double diag = 1.0 / ljj;
            for (int q = 0; q < m; ++q) {
                const auto p = static_cast<std::size_t>(b + 1 + q);
                z_[p] = -acc[static_cast<std::size_t>(q)] / ljj;
                diag -= z_[p] * lx[p];
            }
            z_[static_cast<std::size_t>(b)] = diag / ljj;
            for (int q = 0; q < m; ++q) slot[static_cast<std::size_t>(s.li[static_cast<std::size_t>(b + 1 + q)])] = -1;
        }
    }

    int order() const { return sym_->n; }
    const SymbolicCholesky& symbolic() const { return *sym_; }

    /// Entry (i, j) of A^{-1}; requires (i, j) in pattern(L + L').
    double operator()(int i, int j) const
    {
        const int p = sym_->position(i, j);
        if (p < 0) throw PatternNotCovering("entry outside the factor pattern");
        return z_[static_cast<std::size_t>(p)];
    }

    bool contains(int i, int j) const { return sym_->position(i, j) >= 0; }
    double at_position(int p) const { return z_[static_cast<std::size_t>(p)]; }

private:
    std::shared_ptr<const SymbolicCholesky> sym_;
    std::vector<double> z_;
};

/// Entries of A^{-1} on a requested symmetric pattern. The pattern has to cover
/// the sparsity pattern of A itself. Entries inside the factor fill come from
/// the Takahashi recursion; anything beyond it is obtained by column solves.
inline SparseSym partial_inverse(const CholFactor& f, const Pattern& pattern)
{
    const SymbolicCholesky& s = f.symbolic();
    const int n = s.n;
    auto key = [n](int i, int j) {
        if (i < j) std::swap(i, j);
        return static_cast<std::int64_t>(j) * n + i;
    };
    std::unordered_set<std::int64_t> requested;
    requested.reserve(pattern.size() * 2);
    for (const auto& [i, j] : pattern) {
        if (i < 0 || j < 0 || i >= n || j >= n) throw DimensionMismatch("pattern entry outside the matrix");
        requested.insert(key(i, j));
    }
    for (int j = 0; j < n; ++j)
        for (int p = s.a_outer[static_cast<std::size_t>(j)]; p < s.a_outer[static_cast<std::size_t>(j) + 1]; ++p)
            if (!requested.count(key(s.a_inner[static_cast<std::size_t>(p)], j)))
                throw PatternNotCovering("requested pattern omits entry (" +
                                         std::to_string(s.a_inner[static_cast<std::size_t>(p)]) + "," +
                                         std::to_string(j) + ") of the factorized matrix");

    const SelectedInverse z(f);
    std::vector<Triplet> out;
    out.reserve(requested.size());
    std::vector<std::pair<int, int>> outside; // (column, row)
    for (const std::int64_t k : requested) {
        const int j = static_cast<int>(k / n), i = static_cast<int>(k % n);
        const int p = s.position(i, j);
        if (p >= 0)
            out.emplace_back(i, j, z.at_position(p));
        else
            outside.emplace_back(j, i);
    }
    std::sort(outside.begin(), outside.end());
    for (std::size_t q = 0; q < outside.size();) {
        const int col = outside[q].first;
        Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
        e[col] = 1.0;
        const Eigen::VectorXd c = f.solve(e);
        for (; q < outside.size() && outside[q].first == col; ++q) out.emplace_back(outside[q].second, col, c[outside[q].second]);
    }
    return SparseSym(n, out);
}

} // namespace stica

#endif
