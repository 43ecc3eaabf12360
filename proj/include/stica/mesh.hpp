#ifndef STICA_MESH_HPP
#define STICA_MESH_HPP

// Triangular meshes, linear finite elements and SPDE (Matern, alpha = 2)
// precision matrices, plus marginalization of the precision onto the data
// vertices.

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "sparsela.hpp"

namespace stica {

struct TriMesh
{
    Eigen::MatrixXd vertices;               // N x 2 or N x 3
    std::vector<std::array<int, 3>> faces;
    std::vector<int> data_indices;          // V distinct vertex indices

    int n_vertices() const { return static_cast<int>(vertices.rows()); }
    int n_data() const { return static_cast<int>(data_indices.size()); }
    int dim() const { return static_cast<int>(vertices.cols()); }

    /// Throws InvalidMesh unless faces reference valid vertices, orientation is
    /// consistent, data indices are distinct and the mesh is connected.
    void validate() const;
};

/// Boundary extension rings around a pixel grid. Ring k (k = 0..count-1) is a
/// band of `layers` rectangular loops with vertex spacing
/// first_spacing * growth^k.
struct BoundaryLayers
{
    int count = 2;
    double first_spacing = 2.0;
    double growth = 2.0;
    int layers = 4;

    static BoundaryLayers none() { return {0, 1.0, 1.0, 0}; }
};

namespace detail {

inline double signed_area2(const Eigen::MatrixXd& v, const std::array<int, 3>& f)
{
    const double ax = v(f[1], 0) - v(f[0], 0), ay = v(f[1], 1) - v(f[0], 1);
    const double bx = v(f[2], 0) - v(f[0], 0), by = v(f[2], 1) - v(f[0], 1);
    return ax * by - ay * bx;
}

struct Loop
{
    std::vector<int> ids;
    std::vector<double> t; // perimeter parameter in [0, 4): side + fraction
};

// Counter-clockwise loop around [x0,x1]x[y0,y1] starting at (x0,y0) with at
// most `h` between consecutive points.
inline Loop rectangle_loop(double x0, double x1, double y0, double y1, double h, std::vector<Eigen::Vector2d>& pts)
{
    Loop loop;
    const double w = x1 - x0, ht = y1 - y0;
    const int nx = std::max(1, static_cast<int>(std::ceil(w / h - 1e-9)));
    const int ny = std::max(1, static_cast<int>(std::ceil(ht / h - 1e-9)));
    auto add = [&](double x, double y, double t) {
        loop.ids.push_back(static_cast<int>(pts.size()));
        loop.t.push_back(t);
        pts.emplace_back(x, y);
    };
    for (int i = 0; i < nx; ++i) add(x0 + w * i / nx, y0, static_cast<double>(i) / nx);
    for (int i = 0; i < ny; ++i) add(x1, y0 + ht * i / ny, 1.0 + static_cast<double>(i) / ny);
    for (int i = 0; i < nx; ++i) add(x1 - w * i / nx, y1, 2.0 + static_cast<double>(i) / nx);
    for (int i = 0; i < ny; ++i) add(x0, y1 - ht * i / ny, 3.0 + static_cast<double>(i) / ny);
    return loop;
}

// Triangulates the annulus between two closed loops sharing the perimeter
// parameterization.
inline void zipper(const Loop& in, const Loop& out, std::vector<std::array<int, 3>>& faces)
{
    const std::size_t ni = in.ids.size(), no = out.ids.size();
    std::size_t i = 0, j = 0;
    while (i < ni || j < no) {
        const double ti = i + 1 < ni ? in.t[i + 1] : 4.0;
        const double tj = j + 1 < no ? out.t[j + 1] : 4.0;
        const int a = in.ids[i % ni], b = out.ids[j % no];
        if (j >= no || (i < ni && ti <= tj)) {
            faces.push_back({a, b, in.ids[(i + 1) % ni]});
            ++i;
        } else {
            faces.push_back({a, b, out.ids[(j + 1) % no]});
            ++j;
        }
    }
}

} // namespace detail

/// Mesh of a rows x cols grid of unit-spaced pixel centres (x = column,
/// y = row, data indices row-major) with optional boundary extension rings.
inline TriMesh grid_mesh(int rows, int cols, const BoundaryLayers& boundary = {})
{
    if (rows < 2 || cols < 2) throw InvalidDims("grid needs at least 2 rows and 2 columns");
    if (boundary.count < 0 || (boundary.count > 0 && (boundary.first_spacing <= 0 || boundary.growth <= 0 || boundary.layers < 1)))
        throw InvalidDims("invalid boundary layer parameters");

    std::vector<Eigen::Vector2d> pts;
    pts.reserve(static_cast<std::size_t>(rows * cols));
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) pts.emplace_back(c, r);

    TriMesh m;
    for (int r = 0; r + 1 < rows; ++r)
        for (int c = 0; c + 1 < cols; ++c) {
            const int v00 = r * cols + c, v01 = v00 + 1, v10 = v00 + cols, v11 = v10 + 1;
            m.faces.push_back({v00, v01, v11});
            m.faces.push_back({v00, v11, v10});
        }

    // Perimeter of the pixel grid as the innermost loop.
    detail::Loop inner;
    {
        const double w = cols - 1, h = rows - 1;
        for (int c = 0; c < cols - 1; ++c) { inner.ids.push_back(c); inner.t.push_back(c / w); }
        for (int r = 0; r < rows - 1; ++r) { inner.ids.push_back(r * cols + cols - 1); inner.t.push_back(1.0 + r / h); }
        for (int c = cols - 1; c > 0; --c) { inner.ids.push_back((rows - 1) * cols + c); inner.t.push_back(2.0 + (cols - 1 - c) / w); }
        for (int r = rows - 1; r > 0; --r) { inner.ids.push_back(r * cols); inner.t.push_back(3.0 + (rows - 1 - r) / h); }
    }

    double offset = 0.0, spacing = boundary.first_spacing;
    for (int ring = 0; ring < boundary.count; ++ring) {
        for (int layer = 0; layer < boundary.layers; ++layer) {
            offset += spacing;
            detail::Loop outer = detail::rectangle_loop(-offset, cols - 1 + offset, -offset, rows - 1 + offset, spacing, pts);
            detail::zipper(inner, outer, m.faces);
            inner = std::move(outer);
        }
        spacing *= boundary.growth;
    }

    m.vertices.resize(static_cast<Eigen::Index>(pts.size()), 2);
    for (std::size_t k = 0; k < pts.size(); ++k) m.vertices.row(static_cast<Eigen::Index>(k)) = pts[k].transpose();
    for (auto& f : m.faces)
        if (detail::signed_area2(m.vertices, f) < 0) std::swap(f[1], f[2]);
    m.data_indices.resize(static_cast<std::size_t>(rows * cols));
    std::iota(m.data_indices.begin(), m.data_indices.end(), 0);
    return m;
}

inline void TriMesh::validate() const
{
    const int n = n_vertices();
    if (n < 3 || (dim() != 2 && dim() != 3)) throw InvalidMesh("need at least 3 vertices in 2 or 3 dimensions");
    if (faces.empty()) throw InvalidMesh("mesh has no faces");
    std::vector<int> uf(static_cast<std::size_t>(n));
    std::iota(uf.begin(), uf.end(), 0);
    auto find = [&](int x) {
        while (uf[static_cast<std::size_t>(x)] != x) x = uf[static_cast<std::size_t>(x)] = uf[static_cast<std::size_t>(uf[static_cast<std::size_t>(x)])];
        return x;
    };
    std::vector<std::pair<int, int>> directed;
    directed.reserve(faces.size() * 3);
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    int sign = 0;
    for (const auto& f : faces) {
        for (int k = 0; k < 3; ++k) {
            if (f[k] < 0 || f[k] >= n) throw InvalidMesh("face references a missing vertex");
            used[static_cast<std::size_t>(f[k])] = 1;
        }
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw InvalidMesh("face repeats a vertex");
        for (int k = 0; k < 3; ++k) {
            directed.emplace_back(f[k], f[(k + 1) % 3]);
            uf[static_cast<std::size_t>(find(f[k]))] = find(f[(k + 1) % 3]);
        }
        if (dim() == 2) {
            const double a = detail::signed_area2(vertices, f);
            const int s = a > 0 ? 1 : (a < 0 ? -1 : 0);
            if (s != 0) {
                if (sign == 0) sign = s;
                else if (s != sign) throw InvalidMesh("faces are not consistently oriented");
            }
        }
    }
    std::sort(directed.begin(), directed.end());
    if (std::adjacent_find(directed.begin(), directed.end()) != directed.end())
        throw InvalidMesh("faces are not consistently oriented");
    const int root = find(faces[0][0]);
    for (int v = 0; v < n; ++v)
        if (!used[static_cast<std::size_t>(v)] || find(v) != root) throw InvalidMesh("mesh is not connected");
    std::vector<int> d = data_indices;
    std::sort(d.begin(), d.end());
    if (std::adjacent_find(d.begin(), d.end()) != d.end()) throw InvalidMesh("duplicate data index");
    if (!d.empty() && (d.front() < 0 || d.back() >= n)) throw InvalidMesh("data index out of range");
}

/// Mesh file: `N V` header, N coordinate lines (2 or 3 numbers), the face
/// count followed by face lines, then V data-index lines.
inline void write_mesh(std::ostream& os, const TriMesh& m)
{
    os << m.n_vertices() << ' ' << m.n_data() << '\n';
    char buf[64];
    for (int i = 0; i < m.n_vertices(); ++i) {
        for (int k = 0; k < m.dim(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", m.vertices(i, k));
            os << (k ? " " : "") << buf;
        }
        os << '\n';
    }
    os << m.faces.size() << '\n';
    for (const auto& f : m.faces) os << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    for (int d : m.data_indices) os << d << '\n';
}

inline TriMesh read_mesh(std::istream& is)
{
    std::string line;
    auto next_line = [&]() {
        while (std::getline(is, line))
            if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
        return false;
    };
    if (!next_line()) throw IoError("empty mesh file");
    long n = 0, v = 0;
    {
        std::istringstream hs(line);
        if (!(hs >> n >> v) || n <= 0 || v < 0 || v > n) throw IoError("bad mesh header");
    }
    TriMesh m;
    std::vector<std::vector<double>> coords;
    for (long i = 0; i < n; ++i) {
        if (!next_line()) throw IoError("truncated vertex list");
        std::istringstream ls(line);
        std::vector<double> c;
        double x;
        while (ls >> x) c.push_back(x);
        if ((c.size() != 2 && c.size() != 3) || (!coords.empty() && c.size() != coords[0].size()))
            throw IoError("vertex line " + std::to_string(i) + " must hold 2 or 3 coordinates");
        coords.push_back(std::move(c));
    }
    m.vertices.resize(n, static_cast<Eigen::Index>(coords[0].size()));
    for (long i = 0; i < n; ++i)
        for (std::size_t k = 0; k < coords[0].size(); ++k) m.vertices(i, static_cast<Eigen::Index>(k)) = coords[static_cast<std::size_t>(i)][k];
    long nf = 0;
    if (!(is >> nf) || nf <= 0) throw IoError("bad face count");
    m.faces.resize(static_cast<std::size_t>(nf));
    for (auto& f : m.faces)
        if (!(is >> f[0] >> f[1] >> f[2])) throw IoError("truncated face list");
    m.data_indices.resize(static_cast<std::size_t>(v));
    for (auto& d : m.data_indices)
        if (!(is >> d)) throw IoError("truncated data index list");
    m.validate();
    return m;
}

inline TriMesh read_mesh(const std::string& path)
{
    std::ifstream f(path);
    if (!f) throw IoError("cannot open mesh file " + path);
    return read_mesh(f);
}

inline void write_mesh(const std::string& path, const TriMesh& m)
{
    std::ofstream f(path);
    if (!f) throw IoError("cannot write mesh file " + path);
    write_mesh(f, m);
}

struct FemMatrices
{
    Eigen::VectorXd mass; // diagonal of the lumped mass matrix F
    SparseSym F;
    SparseSym G;
};

inline FemMatrices assemble_fem(const TriMesh& mesh)
{
    const int n = mesh.n_vertices();
    const int d = mesh.dim();
    if (d != 2 && d != 3) throw InvalidMesh("vertices must be 2D or 3D");
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(n);
    std::vector<Triplet> g;
    g.reserve(mesh.faces.size() * 6);
    for (const auto& f : mesh.faces) {
        Eigen::Vector3d x[3];
        for (int k = 0; k < 3; ++k) {
            x[k].setZero();
            x[k].head(d) = mesh.vertices.row(f[k]).transpose();
        }
        // e[k] is the edge opposite vertex k
        const Eigen::Vector3d e[3] = {x[2] - x[1], x[0] - x[2], x[1] - x[0]};
        const double area = 0.5 * e[0].cross(e[1]).norm();
        const double scale = std::max({e[0].squaredNorm(), e[1].squaredNorm(), e[2].squaredNorm()});
        if (!(area > 1e-12 * scale))
            throw DegenerateTriangle("face (" + std::to_string(f[0]) + "," + std::to_string(f[1]) + "," +
                                     std::to_string(f[2]) + ") has zero area");
        for (int a = 0; a < 3; ++a) {
            mass[f[a]] += area / 3.0;
            for (int b = 0; b <= a; ++b) {
                int i = f[a], j = f[b];
                if (i < j) std::swap(i, j);
                g.emplace_back(i, j, e[a].dot(e[b]) / (4.0 * area));
            }
        }
    }
    SpMat gl(n, n);
    gl.setFromTriplets(g.begin(), g.end());
    return {mass, SparseSym::diagonal(mass), SparseSym::from_lower(std::move(gl))};
}

/// Normalizing constant of the alpha = 2 SPDE precision in two dimensions.
inline constexpr double spde_c1 = 1.0 / (4.0 * std::numbers::pi);

/// Q(kappa) = c1 (kappa^2 F + 2 G + kappa^-2 G F^-1 G) on a kappa-independent
/// sparsity pattern.
class SpdePrecision
{
public:
    explicit SpdePrecision(const FemMatrices& fem) : n_(fem.G.order())
    {
        if (fem.mass.size() != n_) throw DimensionMismatch("mass vector and stiffness matrix differ in order");
        if ((fem.mass.array() <= 0).any()) throw InvalidMesh("lumped mass must be strictly positive");
        const SpMat gfull = fem.G.full();
        SpMat h = gfull * fem.mass.cwiseInverse().asDiagonal() * gfull;
        std::vector<Triplet> t;
        for (int j = 0; j < n_; ++j) {
            t.emplace_back(j, j, 0.0);
            for (SpMat::InnerIterator it(h, j); it; ++it)
                if (it.row() > j) t.emplace_back(static_cast<int>(it.row()), j, 0.0);
        }
        // Pattern of H contains those of G and F; values start at zero.
        SpMat lower(n_, n_);
        lower.setFromTriplets(t.begin(), t.end());
        pattern_ = SparseSym::from_lower(std::move(lower));
        f_.assign(static_cast<std::size_t>(pattern_.nnz()), 0.0);
        g_ = f_;
        h_ = f_;
        for (int j = 0; j < n_; ++j) f_[static_cast<std::size_t>(pattern_.position(j, j))] = fem.mass[j];
        for (int j = 0; j < n_; ++j)
            for (SpMat::InnerIterator it(fem.G.lower(), j); it; ++it)
                g_[static_cast<std::size_t>(pattern_.position(static_cast<int>(it.row()), j))] = it.value();
        for (int j = 0; j < n_; ++j)
            for (SpMat::InnerIterator it(h, j); it; ++it)
                if (it.row() >= j) h_[static_cast<std::size_t>(pattern_.position(static_cast<int>(it.row()), j))] = it.value();
    }

    int order() const { return n_; }
    const SparseSym& pattern() const { return pattern_; }

    SparseSym operator()(double kappa) const
    {
        if (!(kappa > 0) || !std::isfinite(kappa)) throw NonPositiveKappa("kappa must be positive and finite, got " + std::to_string(kappa));
        SparseSym q = pattern_;
        auto v = q.values();
        const double k2 = kappa * kappa, ik2 = 1.0 / k2;
        for (std::size_t p = 0; p < v.size(); ++p) v[p] = spde_c1 * (k2 * f_[p] + 2.0 * g_[p] + ik2 * h_[p]);
        return q;
    }

private:
    int n_;
    SparseSym pattern_;
    std::vector<double> f_, g_, h_;
};

inline SparseSym spde_precision(const FemMatrices& fem, double kappa)
{
    return SpdePrecision(fem)(kappa);
}

/// Marginal precision of the data vertices, R^-1 = Q11 - Q12 Q22^-1 Q12',
/// with rows ordered as data_indices. The plan fixes the pattern of Q (and so
/// of R^-1) and caches the symbolic factorization of Q22.
class SchurPlan
{
public:
    SchurPlan(const SparseSym& q_pattern, const std::vector<int>& data_indices)
        : n_(q_pattern.order()), v_(static_cast<int>(data_indices.size())), q_pattern_(q_pattern)
    {
        if (v_ == 0) throw DimensionMismatch("no data indices");
        std::vector<int> dpos(static_cast<std::size_t>(n_), -1), opos(static_cast<std::size_t>(n_), -1);
        for (int k = 0; k < v_; ++k) {
            const int d = data_indices[static_cast<std::size_t>(k)];
            if (d < 0 || d >= n_) throw DimensionMismatch("data index outside the precision matrix");
            if (dpos[static_cast<std::size_t>(d)] >= 0) throw DimensionMismatch("duplicate data index");
            dpos[static_cast<std::size_t>(d)] = k;
        }
        for (int i = 0; i < n_; ++i)
            if (dpos[static_cast<std::size_t>(i)] < 0) opos[static_cast<std::size_t>(i)] = no_++;

        // Coupled data vertices: those with a structural neighbour outside the data.
        std::vector<int> cpos(static_cast<std::size_t>(v_), -1);
        const SpMat& ql = q_pattern.lower();
        for (int j = 0; j < n_; ++j)
            for (SpMat::InnerIterator it(ql, j); it; ++it) {
                const int i = static_cast<int>(it.row());
                const int di = dpos[static_cast<std::size_t>(i)], dj = dpos[static_cast<std::size_t>(j)];
                if ((di >= 0) != (dj >= 0)) cpos[static_cast<std::size_t>(di >= 0 ? di : dj)] = 0;
            }
        for (int k = 0; k < v_; ++k)
            if (cpos[static_cast<std::size_t>(k)] == 0) {
                cpos[static_cast<std::size_t>(k)] = static_cast<int>(coupled_.size());
                coupled_.push_back(k);
            }

        std::vector<Triplet> rt, q22t;
        for (int j = 0; j < n_; ++j)
            for (SpMat::InnerIterator it(ql, j); it; ++it) {
                const int i = static_cast<int>(it.row());
                const int di = dpos[static_cast<std::size_t>(i)], dj = dpos[static_cast<std::size_t>(j)];
                if (di >= 0 && dj >= 0) rt.emplace_back(std::max(di, dj), std::min(di, dj), 0.0);
                else if (di < 0 && dj < 0) {
                    const int oi = opos[static_cast<std::size_t>(i)], oj = opos[static_cast<std::size_t>(j)];
                    q22t.emplace_back(std::max(oi, oj), std::min(oi, oj), 0.0);
                }
            }
        for (std::size_t a = 0; a < coupled_.size(); ++a)
            for (std::size_t b = 0; b <= a; ++b) rt.emplace_back(coupled_[a], coupled_[b], 0.0);
        for (int k = 0; k < v_; ++k) rt.emplace_back(k, k, 0.0);
        {
            SpMat r(v_, v_);
            r.setFromTriplets(rt.begin(), rt.end());
            r_pattern_ = SparseSym::from_lower(std::move(r));
            for (double& x : r_pattern_.values()) x = 0.0;
        }
        if (no_ > 0) {
            SpMat q22(no_, no_);
            q22.setFromTriplets(q22t.begin(), q22t.end());
            q22_pattern_ = SparseSym::from_lower(std::move(q22));
            for (double& x : q22_pattern_.values()) x = 0.0;
        }

        // Scatter maps from Q's value array.
        for (int j = 0; j < n_; ++j)
            for (int p = q_pattern.outer()[j]; p < q_pattern.outer()[j + 1]; ++p) {
                const int i = q_pattern.inner()[static_cast<std::size_t>(p)];
                const int di = dpos[static_cast<std::size_t>(i)], dj = dpos[static_cast<std::size_t>(j)];
                if (di >= 0 && dj >= 0) {
                    to_r_.emplace_back(p, r_pattern_.position(di, dj));
                } else if (di < 0 && dj < 0) {
                    to_q22_.emplace_back(p, q22_pattern_.position(opos[static_cast<std::size_t>(i)], opos[static_cast<std::size_t>(j)]));
                } else {
                    const int o = di < 0 ? opos[static_cast<std::size_t>(i)] : opos[static_cast<std::size_t>(j)];
                    const int c = cpos[static_cast<std::size_t>(di >= 0 ? di : dj)];
                    to_b_.push_back({p, o, c});
                }
            }
        const int nc = static_cast<int>(coupled_.size());
        coupled_pos_.resize(static_cast<std::size_t>(nc * (nc + 1) / 2));
        for (int a = 0, q = 0; a < nc; ++a)
            for (int b = 0; b <= a; ++b) coupled_pos_[static_cast<std::size_t>(q++)] = r_pattern_.position(coupled_[static_cast<std::size_t>(a)], coupled_[static_cast<std::size_t>(b)]);
        if (no_ > 0) q22_symbolic_ = analyze(q22_pattern_);
    }

    int n_data() const { return v_; }
    int n_other() const { return no_; }
    const SparseSym& r_pattern() const { return r_pattern_; }
    const std::vector<int>& coupled() const { return coupled_; }

    SparseSym apply(const SparseSym& q) const
    {
        if (!q.same_pattern(q_pattern_)) throw DimensionMismatch("precision pattern differs from the planned pattern");
        SparseSym r = r_pattern_;
        auto rv = r.values();
        const auto qv = q.values();
        for (const auto& [p, t] : to_r_) rv[static_cast<std::size_t>(t)] += qv[static_cast<std::size_t>(p)];
        if (no_ == 0 || coupled_.empty()) return r;

        SparseSym q22 = q22_pattern_;
        auto q22v = q22.values();
        for (const auto& [p, t] : to_q22_) q22v[static_cast<std::size_t>(t)] = qv[static_cast<std::size_t>(p)];
        const CholFactor f = cholesky(q22_symbolic_, q22);
        const int nc = static_cast<int>(coupled_.size());
        Eigen::MatrixXd b = Eigen::MatrixXd::Zero(no_, nc);
        for (const auto& e : to_b_) b(e.o, e.c) = qv[static_cast<std::size_t>(e.p)];
        const Eigen::MatrixXd x = f.solve(b);
        Eigen::MatrixXd s(nc, nc);
        s.triangularView<Eigen::Lower>() = b.transpose() * x;
        for (int a = 0, q = 0; a < nc; ++a)
            for (int c = 0; c <= a; ++c) rv[static_cast<std::size_t>(coupled_pos_[static_cast<std::size_t>(q++)])] -= s(a, c);
        return r;
    }

private:
    struct BEntry { int p, o, c; };

    int n_, v_, no_ = 0;
    SparseSym q_pattern_, r_pattern_, q22_pattern_;
    std::vector<int> coupled_;
    std::vector<std::pair<int, int>> to_r_, to_q22_;
    std::vector<BEntry> to_b_;
    std::vector<int> coupled_pos_;
    std::shared_ptr<const SymbolicCholesky> q22_symbolic_;
};

inline SparseSym data_precision(const SparseSym& q, const std::vector<int>& data_indices)
{
    return SchurPlan(q, data_indices).apply(q);
}

/// R^-1(kappa) for a fixed mesh, reusing the SPDE pattern and Schur plan.
class DataPrecision
{
public:
    DataPrecision(const FemMatrices& fem, const std::vector<int>& data_indices)
        : spde_(fem), plan_(spde_.pattern(), data_indices)
    {
    }
    explicit DataPrecision(const TriMesh& mesh) : DataPrecision(assemble_fem(mesh), mesh.data_indices) {}

    SparseSym operator()(double kappa) const { return plan_.apply(spde_(kappa)); }
    const SparseSym& pattern() const { return plan_.r_pattern(); }
    int n_data() const { return plan_.n_data(); }
    const SpdePrecision& spde() const { return spde_; }
    const SchurPlan& plan() const { return plan_; }

private:
    SpdePrecision spde_;
    SchurPlan plan_;
};

/// Range of plausible kappa values for a mesh: sqrt(8)/kappa between the
/// shortest edge and the extent of the data vertices.
inline std::pair<double, double> kappa_bounds(const TriMesh& mesh)
{
    double hmin = std::numeric_limits<double>::infinity();
    for (const auto& f : mesh.faces)
        for (int k = 0; k < 3; ++k) hmin = std::min(hmin, (mesh.vertices.row(f[k]) - mesh.vertices.row(f[(k + 1) % 3])).norm());
    Eigen::RowVectorXd lo = mesh.vertices.row(mesh.data_indices.at(0)), hi = lo;
    for (int d : mesh.data_indices) {
        lo = lo.cwiseMin(mesh.vertices.row(d));
        hi = hi.cwiseMax(mesh.vertices.row(d));
    }
    const double diam = std::max((hi - lo).norm(), hmin);
    return {std::sqrt(8.0) / diam, std::sqrt(8.0) / hmin};
}

} // namespace stica

#endif
