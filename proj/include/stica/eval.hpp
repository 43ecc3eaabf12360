#ifndef STICA_EVAL_HPP
#define STICA_EVAL_HPP

// Accuracy metrics against ground truth (or between two sessions), the
// rescaling that makes IC estimates comparable, and PGM heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "io.hpp"
#include "template.hpp"

namespace stica {

using Mask = std::vector<bool>;

struct Rescaled
{
    Eigen::VectorXd map;
    double factor = 0.0;
    bool orthogonal = false; // estimate carries no component along the truth
};

/// Least-squares scale c = <est, truth> / <est, est> applied to the estimate.
inline Rescaled rescale_to_truth(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth)
{
    if (estimate.size() != truth.size()) throw DimensionMismatch("estimate and truth differ in length");
    const double ee = estimate.squaredNorm();
    if (!(ee > 0)) throw ZeroEstimate("estimate is identically zero");
    Rescaled r;
    r.factor = estimate.dot(truth) / ee;
    r.orthogonal = std::abs(estimate.dot(truth)) <= 1e-12 * std::sqrt(ee) * truth.norm();
    if (r.orthogonal) r.factor = 0.0;
    r.map = r.factor * estimate;
    return r;
}

inline double mse(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    if (a.size() != b.size() || a.size() == 0) throw DimensionMismatch("maps differ in length or are empty");
    return (a - b).squaredNorm() / static_cast<double>(a.size());
}

inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b)
{
    if (a.size() != b.size()) throw DimensionMismatch("maps differ in length");
    if (a.size() < 2) throw InvalidDims("correlation needs at least two values");
    const Eigen::VectorXd x = a.array() - a.mean(), y = b.array() - b.mean();
    const double d = std::sqrt(x.squaredNorm() * y.squaredNorm());
    if (!(d > 0)) throw ConstantColumn("correlation of a constant map");
    return std::clamp(x.dot(y) / d, -1.0, 1.0);
}

/// Correlation restricted to locations where the truth exceeds `threshold`.
inline double cat(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth, double threshold)
{
    if (estimate.size() != truth.size()) throw DimensionMismatch("estimate and truth differ in length");
    std::vector<Eigen::Index> idx;
    for (Eigen::Index v = 0; v < truth.size(); ++v)
        if (truth[v] > threshold) idx.push_back(v);
    if (idx.size() < 2) throw EmptyTruthRegion("fewer than two locations with truth above " + io::format_double(threshold));
    return pearson(estimate(idx), truth(idx));
}

inline double fisher_z(double r)
{
    return 0.5 * std::log((1.0 + r) / (1.0 - r));
}

inline Mask threshold_mask(const Eigen::VectorXd& map, double gamma)
{
    Mask m(static_cast<std::size_t>(map.size()));
    for (Eigen::Index v = 0; v < map.size(); ++v) m[static_cast<std::size_t>(v)] = map[v] > gamma;
    return m;
}

struct Confusion
{
    long tp = 0, fp = 0, tn = 0, fn = 0;

    // With no true negatives there can be no false positives: rate 0.
    double fpr() const { return fp + tn > 0 ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0; }
    // With no true positives nothing was missed: power 1.
    double power() const { return tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 1.0; }
};

inline Confusion confusion(const Mask& estimate, const Mask& truth)
{
    if (estimate.size() != truth.size()) throw DimensionMismatch("masks differ in length");
    Confusion c;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i]) (estimate[i] ? c.tp : c.fn)++;
        else (estimate[i] ? c.fp : c.tn)++;
    }
    return c;
}

struct Overlap
{
    long size_a = 0, size_b = 0, overlap = 0;
    double dice = 1.0; // two empty sets agree perfectly
};

inline Overlap overlap(const Mask& a, const Mask& b)
{
    if (a.size() != b.size()) throw DimensionMismatch("masks differ in length");
    Overlap o;
    for (std::size_t i = 0; i < a.size(); ++i) {
        o.size_a += a[i];
        o.size_b += b[i];
        o.overlap += a[i] && b[i];
    }
    if (o.size_a + o.size_b > 0) o.dice = 2.0 * static_cast<double>(o.overlap) / static_cast<double>(o.size_a + o.size_b);
    return o;
}

inline double dice(const Mask& a, const Mask& b) { return overlap(a, b).dice; }

/// Per (subject, IC) accuracy row. Mask columns are NaN when no masks were given.
struct MetricsRow
{
    int subject = 0, ic = 0;
    double scale = 0.0, mse = 0.0, corr = 0.0, corr_z = 0.0, cat = 0.0, cat_z = 0.0;
    double fpr = std::numeric_limits<double>::quiet_NaN();
    double power = std::numeric_limits<double>::quiet_NaN();
    double dice = std::numeric_limits<double>::quiet_NaN();
    double mask_size = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsReport
{
    std::vector<MetricsRow> rows;
    Eigen::MatrixXd mse_maps; // L x V, averaged over subjects
    Eigen::MatrixXd fc_mse;   // L x L, averaged over subjects (empty without FC input)

    /// Mean of a column over subjects for one IC.
    double mean(int ic, double MetricsRow::*field) const
    {
        double s = 0.0;
        int n = 0;
        for (const auto& r : rows)
            if (r.ic == ic) {
                s += r.*field;
                ++n;
            }
        return n ? s / n : std::numeric_limits<double>::quiet_NaN();
    }
};

struct EvalInput
{
    std::vector<Eigen::MatrixXd> estimates;      // per subject, L x V
    std::vector<Eigen::MatrixXd> truths;         // per subject, L x V
    std::vector<std::vector<Mask>> masks;        // per subject and IC (optional)
    std::vector<std::vector<Mask>> true_masks;   // per subject and IC (required with masks)
    std::vector<Eigen::MatrixXd> fc_est, fc_true; // per subject, L x L (optional)
    double cat_threshold = 1.0;
    bool rescale = true;
};

inline MetricsReport evaluate(const EvalInput& in)
{
    const std::size_t S = in.estimates.size();
    if (S == 0 || in.truths.size() != S) throw DimensionMismatch("need one truth per estimate and at least one subject");
    const Eigen::Index L = in.truths.front().rows(), V = in.truths.front().cols();
    const bool with_masks = !in.masks.empty();
    if (with_masks && (in.masks.size() != S || in.true_masks.size() != S)) throw DimensionMismatch("masks missing for some subjects");
    MetricsReport rep;
    rep.mse_maps = Eigen::MatrixXd::Zero(L, V);
    for (std::size_t s = 0; s < S; ++s) {
        const Eigen::MatrixXd& est = in.estimates[s];
        const Eigen::MatrixXd& tru = in.truths[s];
        if (est.rows() != L || est.cols() != V || tru.rows() != L || tru.cols() != V)
            throw DimensionMismatch("subject " + std::to_string(s) + " maps have the wrong shape");
        for (Eigen::Index l = 0; l < L; ++l) {
            const Eigen::VectorXd t = tru.row(l).transpose();
            Eigen::VectorXd e = est.row(l).transpose();
            MetricsRow row;
            row.subject = static_cast<int>(s);
            row.ic = static_cast<int>(l);
            row.scale = 1.0;
            if (in.rescale) {
                const Rescaled r = rescale_to_truth(e, t);
                row.scale = r.factor;
                e = r.map;
            }
            rep.mse_maps.row(l) += (e - t).cwiseAbs2().transpose();
            row.mse = mse(e, t);
            row.corr = pearson(e, t);
            row.corr_z = fisher_z(row.corr);
            row.cat = cat(e, t, in.cat_threshold);
            row.cat_z = fisher_z(row.cat);
            if (with_masks) {
                const Confusion c = confusion(in.masks[s].at(static_cast<std::size_t>(l)), in.true_masks[s].at(static_cast<std::size_t>(l)));
                row.fpr = c.fpr();
                row.power = c.power();
                row.dice = dice(in.masks[s][static_cast<std::size_t>(l)], in.true_masks[s][static_cast<std::size_t>(l)]);
                row.mask_size = static_cast<double>(c.tp + c.fp);
            }
            rep.rows.push_back(row);
        }
    }
    rep.mse_maps /= static_cast<double>(S);
    if (!in.fc_est.empty()) {
        if (in.fc_est.size() != S || in.fc_true.size() != S) throw DimensionMismatch("FC matrices missing for some subjects");
        rep.fc_mse = Eigen::MatrixXd::Zero(L, L);
        for (std::size_t s = 0; s < S; ++s) {
            if (in.fc_est[s].rows() != L || in.fc_est[s].cols() != L || in.fc_true[s].rows() != L || in.fc_true[s].cols() != L)
                throw DimensionMismatch("FC matrices must be L x L");
            rep.fc_mse += (in.fc_est[s] - in.fc_true[s]).cwiseAbs2();
        }
        rep.fc_mse /= static_cast<double>(S);
    }
    return rep;
}

/// metrics.csv, mse_<l>.csv maps and fc_mse.csv under `dir`.
inline void write_report(const std::filesystem::path& dir, const MetricsReport& rep)
{
    io::ensure_dir(dir);
    Eigen::MatrixXd t(static_cast<Eigen::Index>(rep.rows.size()), 12);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const MetricsRow& r = rep.rows[i];
        t.row(static_cast<Eigen::Index>(i)) << r.subject, r.ic + 1, r.scale, r.mse, r.corr, r.corr_z, r.cat, r.cat_z, r.fpr, r.power, r.dice, r.mask_size;
    }
    io::write_csv(dir / "metrics.csv", t,
                  {"subject", "ic", "scale", "mse", "corr", "corr_z", "cat", "cat_z", "fpr", "power", "dice", "mask_size"});
    io::write_map_set(dir, "mse", rep.mse_maps);
    if (rep.fc_mse.size()) io::write_matrix(dir / "fc_mse.csv", rep.fc_mse, "ic");
}

/// Agreement of two sessions of the same subject: correlation of the effect
/// maps and overlap of the positive and negative deviation sets.
struct ReliabilityRow
{
    int subject = 0, ic = 0;
    double effect_corr = 0.0;
    Overlap positive, negative;
};

inline std::vector<ReliabilityRow> reliability(int subject, const Eigen::MatrixXd& effects_a, const Eigen::MatrixXd& effects_b,
                                               const std::vector<Mask>& pos_a, const std::vector<Mask>& pos_b,
                                               const std::vector<Mask>& neg_a, const std::vector<Mask>& neg_b)
{
    if (effects_a.rows() != effects_b.rows() || effects_a.cols() != effects_b.cols()) throw DimensionMismatch("sessions differ in shape");
    const auto L = static_cast<std::size_t>(effects_a.rows());
    if (pos_a.size() != L || pos_b.size() != L || neg_a.size() != L || neg_b.size() != L) throw DimensionMismatch("need one mask per IC");
    std::vector<ReliabilityRow> rows;
    for (std::size_t l = 0; l < L; ++l) {
        ReliabilityRow r;
        r.subject = subject;
        r.ic = static_cast<int>(l);
        r.effect_corr = pearson(effects_a.row(static_cast<Eigen::Index>(l)).transpose(), effects_b.row(static_cast<Eigen::Index>(l)).transpose());
        r.positive = overlap(pos_a[l], pos_b[l]);
        r.negative = overlap(neg_a[l], neg_b[l]);
        rows.push_back(r);
    }
    return rows;
}

inline void write_reliability(const std::filesystem::path& path, const std::vector<ReliabilityRow>& rows)
{
    Eigen::MatrixXd t(static_cast<Eigen::Index>(rows.size()), 7);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        t.row(static_cast<Eigen::Index>(i)) << r.subject, r.ic + 1, r.effect_corr, static_cast<double>(r.positive.overlap), r.positive.dice,
            static_cast<double>(r.negative.overlap), r.negative.dice;
    }
    io::write_csv(path, t, {"subject", "ic", "effect_corr", "pos_overlap", "pos_dice", "neg_overlap", "neg_dice"});
}

// ---- heatmaps

/// Binary 8-bit PGM, row-major, linear grey scale from lo (black) to hi (white).
inline void write_pgm(const std::filesystem::path& path, const Eigen::VectorXd& map, GridDims dims, double lo, double hi)
{
    if (static_cast<Eigen::Index>(dims.rows) * dims.cols != map.size())
        throw DimsMismatch(std::to_string(dims.rows) + "x" + std::to_string(dims.cols) + " does not hold " + std::to_string(map.size()) + " values");
    if (!(hi > lo)) throw InvalidDims("palette range must have hi > lo");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    f << "P5\n" << dims.cols << ' ' << dims.rows << "\n255\n";
    std::string px(static_cast<std::size_t>(map.size()), '\0');
    for (Eigen::Index v = 0; v < map.size(); ++v) {
        const double q = std::round(std::clamp((map[v] - lo) / (hi - lo), 0.0, 1.0) * 255.0);
        px[static_cast<std::size_t>(v)] = static_cast<char>(static_cast<unsigned char>(q));
    }
    f.write(px.data(), static_cast<std::streamsize>(px.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

struct GreyImage
{
    GridDims dims;
    std::vector<int> pixels; // 0..255, row-major
};

inline GreyImage read_pgm(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw IoError(path.string() + " is not an 8-bit binary PGM");
    f.get();
    std::string px(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), '\0');
    f.read(px.data(), static_cast<std::streamsize>(px.size()));
    if (!f) throw IoError(path.string() + " is truncated");
    GreyImage img{{h, w}, {}};
    img.pixels.reserve(px.size());
    for (char c : px) img.pixels.push_back(static_cast<unsigned char>(c));
    return img;
}

/// Pixel values mapped back onto the palette range.
inline Eigen::VectorXd dequantize(const GreyImage& img, double lo, double hi)
{
    Eigen::VectorXd v(static_cast<Eigen::Index>(img.pixels.size()));
    for (std::size_t i = 0; i < img.pixels.size(); ++i) v[static_cast<Eigen::Index>(i)] = lo + (hi - lo) * img.pixels[i] / 255.0;
    return v;
}

} // namespace stica

#endif
