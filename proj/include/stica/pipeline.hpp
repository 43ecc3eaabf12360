#ifndef STICA_PIPELINE_HPP
#define STICA_PIPELINE_HPP

// Stage drivers shared by the CLI subcommands and the config-driven pipeline:
// simulate -> template -> preprocess -> fit -> excursions -> evaluate.
// Every stage reads its inputs from files written by earlier stages, so a
// stage can be rerun on its own.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/version.hpp>
#include <boost/property_tree/ptree.hpp>
#include <Eigen/Dense>
#include <json.hpp>

#include "em.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "inference.hpp"
#include "io.hpp"
#include "mesh.hpp"
#include "preprocess.hpp"
#include "template.hpp"

namespace stica {

inline constexpr const char* version = "0.1.0";

namespace fs = std::filesystem;

// ---- reduced data and fit directories

inline void write_reduced(const fs::path& dir, const ReducedData& rd)
{
    io::ensure_dir(dir);
    io::write_matrix(dir / "y.csv", rd.y, "v");
    io::write_matrix(dir / "H.csv", rd.H, "t");
    io::write_matrix(dir / "C.csv", rd.C, "ic");
    io::write_scalars(dir / "nu0sq.txt", {rd.nu0_sq});
}

inline ReducedData read_reduced(const fs::path& dir)
{
    ReducedData rd;
    rd.y = io::read_matrix(dir / "y.csv");
    rd.H = io::read_matrix(dir / "H.csv");
    rd.C = io::read_matrix(dir / "C.csv");
    rd.nu0_sq = io::read_scalars(dir / "nu0sq.txt").front();
    const auto L = rd.y.rows();
    if (rd.C.rows() != L || rd.C.cols() != L || rd.H.rows() != L) throw IoError("reduced data in " + dir.string() + " is inconsistent");
    return rd;
}

inline void write_masks(const fs::path& dir, const std::string& stem, const std::vector<Mask>& masks)
{
    Eigen::MatrixXd m(static_cast<Eigen::Index>(masks.size()), masks.empty() ? 0 : static_cast<Eigen::Index>(masks.front().size()));
    for (std::size_t l = 0; l < masks.size(); ++l)
        for (std::size_t v = 0; v < masks[l].size(); ++v) m(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(v)) = masks[l][v] ? 1.0 : 0.0;
    io::write_map_set(dir, stem, m);
}

inline std::vector<Mask> read_masks(const fs::path& dir, const std::string& stem)
{
    const Eigen::MatrixXd m = io::read_map_set(dir, stem);
    std::vector<Mask> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index l = 0; l < m.rows(); ++l) {
        out[static_cast<std::size_t>(l)].resize(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index v = 0; v < m.cols(); ++v) out[static_cast<std::size_t>(l)][static_cast<std::size_t>(v)] = m(l, v) > 0.5;
    }
    return out;
}

// ---- fitting against a spatially centred template

/// Centring the data over space removes each IC's spatial mean, so the model
/// is fitted against centred template means. Estimates are shifted back by
/// the template's spatial mean so they live on the template's scale.
struct CenteredTemplate
{
    Template centered;
    Eigen::VectorXd shift; // per-IC spatial mean of the template means
};

inline CenteredTemplate center_template(const Template& t)
{
    CenteredTemplate c{t, t.mean.rowwise().mean()};
    c.centered.mean.colwise() -= c.shift;
    return c;
}

enum class Method { Stica, Tica };

inline Method parse_method(const std::string& s)
{
    if (s == "stica") return Method::Stica;
    if (s == "tica") return Method::Tica;
    throw ConfigError("unknown method '" + s + "' (expected stica or tica)");
}

inline std::string method_name(Method m) { return m == Method::Stica ? "stica" : "tica"; }

inline FitResult fit_subject(Method method, const ReducedData& rd, const Template& tmpl, const TriMesh* mesh, const EmOptions& opts)
{
    const CenteredTemplate ct = center_template(tmpl);
    FitResult r;
    if (method == Method::Stica) {
        if (!mesh) throw ConfigError("stICA needs a mesh");
        r = fit_stica(rd, ct.centered, *mesh, opts);
    } else {
        r = fit_tica(rd, ct.centered, opts);
    }
    r.ics.colwise() += ct.shift;
    return r;
}

/// Dual-regression maps against the centred template, on the template's scale.
inline DualRegressionResult dual_regression_maps(const Eigen::MatrixXd& yc, const Template& tmpl)
{
    const CenteredTemplate ct = center_template(tmpl);
    DualRegressionResult dr = dual_regression(yc, ct.centered.mean);
    dr.maps.colwise() += ct.shift;
    return dr;
}

struct FitRecord
{
    std::string method;
    fs::path data, template_dir, mesh;
    EmOptions opts;
};

inline std::string mode_name(Smoothness m) { return m == Smoothness::Common ? "common" : "per-ic"; }
inline std::string init_name(EmInit i) { return i == EmInit::DualRegression ? "dr" : "tica"; }

inline Smoothness parse_mode(const std::string& s)
{
    if (s == "common") return Smoothness::Common;
    if (s == "per-ic") return Smoothness::PerIc;
    throw ConfigError("unknown smoothness mode '" + s + "' (expected common or per-ic)");
}

inline EmInit parse_init(const std::string& s)
{
    if (s == "dr") return EmInit::DualRegression;
    if (s == "tica") return EmInit::TemplateIca;
    throw ConfigError("unknown initialisation '" + s + "' (expected dr or tica)");
}

/// ic_/effect_/sd_<l>.csv, mixing.csv (T x L timecourses), M.csv (reduced
/// mixing), kappa.txt, trace.csv and fit.json with the inputs, so that the
/// posterior can be rebuilt later.
inline void write_fit(const fs::path& dir, const FitResult& r, const FitRecord& rec)
{
    io::ensure_dir(dir);
    io::write_map_set(dir, "ic", r.ics);
    io::write_map_set(dir, "effect", r.effects);
    io::write_map_set(dir, "sd", r.marginal_sd);
    io::write_matrix(dir / "mixing.csv", r.timecourses, "ic");
    io::write_matrix(dir / "M.csv", r.params.M, "ic");
    std::vector<double> k(r.params.kappas.data(), r.params.kappas.data() + r.params.kappas.size());
    if (k.empty()) k.push_back(0.0); // tICA has no spatial range
    io::write_scalars(dir / "kappa.txt", k);
    Eigen::MatrixXd t(static_cast<Eigen::Index>(r.trace.size()), 4);
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        const auto& row = r.trace[i];
        const double step = row.step == "em" ? 0.0 : row.step == "squarem" ? 1.0 : 2.0;
        t.row(static_cast<Eigen::Index>(i)) << row.evaluation, row.change, row.loglik, step;
    }
    io::write_csv(dir / "trace.csv", t, {"evaluation", "change", "loglik", "step"});
    nlohmann::ordered_json j;
    j["method"] = rec.method;
    j["data"] = fs::absolute(rec.data).string();
    j["template"] = fs::absolute(rec.template_dir).string();
    j["mesh"] = rec.mesh.empty() ? "" : fs::absolute(rec.mesh).string();
    j["mode"] = mode_name(rec.opts.mode);
    j["init"] = init_name(rec.opts.init);
    j["tol"] = rec.opts.tol;
    j["max_iter"] = rec.opts.max_iter;
    j["squarem"] = rec.opts.squarem;
    j["iterations"] = r.iterations;
    j["converged"] = r.converged;
    j["kappa_at_boundary"] = r.kappa_at_boundary;
    j["loglik"] = r.loglik;
    std::ofstream(dir / "fit.json") << j.dump(2) << '\n';
}

struct StoredFit
{
    FitRecord record;
    ModelParams params;
    Eigen::MatrixXd ics, effects, sd;
};

inline StoredFit read_fit(const fs::path& dir)
{
    std::ifstream f(dir / "fit.json");
    if (!f) throw IoError("no fit.json in " + dir.string());
    const auto j = nlohmann::json::parse(f);
    StoredFit s;
    s.record.method = j.at("method").get<std::string>();
    s.record.data = j.at("data").get<std::string>();
    s.record.template_dir = j.at("template").get<std::string>();
    s.record.mesh = j.at("mesh").get<std::string>();
    s.record.opts.mode = parse_mode(j.at("mode").get<std::string>());
    s.record.opts.init = parse_init(j.at("init").get<std::string>());
    s.record.opts.tol = j.at("tol").get<double>();
    s.record.opts.max_iter = j.at("max_iter").get<int>();
    s.record.opts.squarem = j.at("squarem").get<bool>();
    s.params.M = io::read_matrix(dir / "M.csv");
    if (s.record.method == "stica") {
        const auto k = io::read_scalars(dir / "kappa.txt");
        s.params.kappas = Eigen::Map<const Eigen::VectorXd>(k.data(), static_cast<Eigen::Index>(k.size()));
    }
    s.ics = io::read_map_set(dir, "ic");
    s.effects = io::read_map_set(dir, "effect");
    s.sd = io::read_map_set(dir, "sd");
    return s;
}

/// Posterior of the ICs at stored parameters: one E-step with the same inputs
/// as the fit. `effects` switches the mean to the subject effects.
inline GaussianField posterior_field(const StoredFit& fit, bool effects = false)
{
    const ReducedData rd = read_reduced(fit.record.data);
    const Template tmpl = read_template(fit.record.template_dir);
    const CenteredTemplate ct = center_template(tmpl);
    const Eigen::MatrixXd D = prior_sd(ct.centered.var, fit.record.opts.floor_variance);
    ModelParams p = fit.params;
    p.nu0_sq = rd.nu0_sq;
    p.C = rd.C;
    std::optional<EmProblem> pr;
    if (fit.record.method == "stica") {
        const TriMesh mesh = read_mesh(fit.record.mesh.string());
        pr.emplace(rd, ct.centered.mean, D, SpatialPrior(std::make_shared<const DataPrecision>(mesh)));
    } else {
        pr.emplace(rd, ct.centered.mean, D, SpatialPrior::independent(tmpl.n_locations()));
    }
    const PosteriorMoments mo = e_step(*pr, p);
    GaussianField g;
    g.mean = effects ? Eigen::MatrixXd(mo.mu - ct.centered.mean) : Eigen::MatrixXd(mo.mu.colwise() + ct.shift);
    g.sd = marginal_sd(mo);
    g.D = mo.D;
    g.factor = mo.factor;
    return g;
}

// ---- configuration

/// INI file read into a property tree, with defaults recorded as they are
/// looked up so the manifest shows every value actually used.
class Config
{
public:
    Config() = default;

    static Config from_file(const fs::path& path)
    {
        Config c;
        try {
            boost::property_tree::ini_parser::read_ini(path.string(), c.tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(e.what());
        }
        return c;
    }

    /// "section.key=value" overrides, applied on top of the file.
    void set(const std::string& assignment)
    {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || assignment.find('.') > eq) throw ConfigError("override '" + assignment + "' is not section.key=value");
        tree_.put(assignment.substr(0, eq), assignment.substr(eq + 1));
    }

    template <class T>
    T get(const std::string& key, const T& fallback)
    {
        T v = fallback;
        if (const auto s = tree_.get_optional<std::string>(key)) {
            std::istringstream is(*s);
            if constexpr (std::is_same_v<T, bool>) {
                std::string w;
                is >> w;
                if (w == "true" || w == "1" || w == "yes" || w == "on") v = true;
                else if (w == "false" || w == "0" || w == "no" || w == "off") v = false;
                else throw ConfigError("'" + key + "' expects a boolean, got '" + *s + "'");
            } else if constexpr (std::is_same_v<T, std::string>) {
                v = *s;
            } else {
                is >> v;
                if (!is || !(is >> std::ws).eof()) throw ConfigError("'" + key + "' has invalid value '" + *s + "'");
            }
        }
        used_[key] = to_text(v);
        return v;
    }

    /// Keys in the file that no stage asked for.
    std::vector<std::string> unused() const
    {
        std::vector<std::string> out;
        for (const auto& [section, body] : tree_)
            for (const auto& kv : body) {
                const std::string k = section + "." + kv.first;
                if (!used_.count(k)) out.push_back(k);
            }
        return out;
    }

    const std::map<std::string, std::string>& used() const { return used_; }

private:
    template <class T>
    static std::string to_text(const T& v)
    {
        if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return v;
        else if constexpr (std::is_floating_point_v<T>) return io::format_double(v);
        else return std::to_string(v);
    }

    boost::property_tree::ptree tree_;
    std::map<std::string, std::string> used_;
};

inline std::vector<std::string> split_words(const std::string& s)
{
    std::vector<std::string> out;
    std::string w;
    for (char c : s) {
        if (c == ' ' || c == ',' || c == '\t') {
            if (!w.empty()) out.push_back(w);
            w.clear();
        } else {
            w += c;
        }
    }
    if (!w.empty()) out.push_back(w);
    return out;
}

struct SimulateSettings
{
    GridDims dims;
    int subjects = 5;
    int sessions = 1;
    int T = 800;
    double noise_sd = 11.2;
    double smooth_fwhm = 5.0;
    double amplitude = default_amplitude;
    double var_scale = default_var_scale;
    int pool_size = 16;
    double layout_scale = 1.0; // shrinks peak centres and widths for small grids
    BoundaryLayers boundary;
};

struct PipelineSettings
{
    fs::path out;
    std::uint64_t seed = 1;
    std::vector<std::string> stages;
    SimulateSettings sim;
    int template_subjects = 1000;
    int L = 3;
    int nuisance_iters = 1;
    int nuisance_count = -1; // negative: estimate
    std::vector<Method> methods{Method::Stica, Method::Tica};
    EmOptions em;
    double gamma = 1.0;
    double alpha = 0.1;
    int samples = 10000;
    bool deviations = false;
    double cat_threshold = 1.0;
    bool heatmaps = true;
};

inline PipelineSettings read_settings(Config& c)
{
    PipelineSettings s;
    s.out = c.get<std::string>("pipeline.out", "run");
    s.seed = c.get<std::uint64_t>("pipeline.seed", 1);
    s.stages = split_words(c.get<std::string>("pipeline.stages", "simulate template preprocess fit excursions evaluate"));
    static const std::set<std::string> known{"simulate", "template", "preprocess", "fit", "excursions", "evaluate"};
    for (const auto& st : s.stages)
        if (!known.count(st)) throw ConfigError("unknown stage '" + st + "'");

    auto& m = s.sim;
    m.dims.rows = c.get<int>("simulate.rows", 46);
    m.dims.cols = c.get<int>("simulate.cols", 55);
    m.subjects = c.get<int>("simulate.subjects", 5);
    m.sessions = c.get<int>("simulate.sessions", 1);
    m.T = c.get<int>("simulate.timepoints", 800);
    m.noise_sd = c.get<double>("simulate.noise_sd", 11.2);
    m.smooth_fwhm = c.get<double>("simulate.smooth_fwhm", 5.0);
    m.amplitude = c.get<double>("simulate.amplitude", default_amplitude);
    m.var_scale = c.get<double>("simulate.var_scale", default_var_scale);
    m.pool_size = c.get<int>("simulate.pool_size", 16);
    m.layout_scale = c.get<double>("simulate.layout_scale", 1.0);
    m.boundary.count = c.get<int>("mesh.boundary_count", m.boundary.count);
    m.boundary.first_spacing = c.get<double>("mesh.first_spacing", m.boundary.first_spacing);
    m.boundary.growth = c.get<double>("mesh.growth", m.boundary.growth);
    m.boundary.layers = c.get<int>("mesh.layers", m.boundary.layers);
    if (m.subjects < 1 || m.sessions < 1 || m.T < 2) throw ConfigError("subjects, sessions and timepoints must be positive");

    s.template_subjects = c.get<int>("template.subjects", 1000);
    s.L = c.get<int>("preprocess.L", 3);
    s.nuisance_iters = c.get<int>("preprocess.nuisance_iters", 1);
    s.nuisance_count = c.get<int>("preprocess.nuisance_count", -1);

    s.methods.clear();
    for (const auto& w : split_words(c.get<std::string>("fit.methods", "stica tica"))) s.methods.push_back(parse_method(w));
    s.em.mode = parse_mode(c.get<std::string>("fit.mode", "common"));
    s.em.init = parse_init(c.get<std::string>("fit.init", "dr"));
    s.em.tol = c.get<double>("fit.tol", 1e-3);
    s.em.max_iter = c.get<int>("fit.max_iter", 100);
    s.em.squarem = c.get<bool>("fit.squarem", true);

    s.gamma = c.get<double>("excursions.gamma", 1.0);
    s.alpha = c.get<double>("excursions.alpha", 0.1);
    s.samples = c.get<int>("excursions.samples", 10000);
    s.deviations = c.get<bool>("excursions.deviations", m.sessions > 1);

    s.cat_threshold = c.get<double>("evaluate.cat_threshold", 1.0);
    s.heatmaps = c.get<bool>("evaluate.heatmaps", true);
    return s;
}

// ---- stages

/// Units are (subject, session) pairs; each gets its own directory name.
inline std::vector<std::string> unit_names(const SimulateSettings& s)
{
    std::vector<std::string> u;
    for (int i = 0; i < s.subjects; ++i)
        for (int k = 0; k < s.sessions; ++k)
            u.push_back("sub-" + std::to_string(i + 1) + (s.sessions > 1 ? "_ses-" + std::to_string(k + 1) : ""));
    return u;
}

/// Seeds: a separate stream per purpose, then one per subject or unit.
namespace seeds {
inline std::uint64_t template_subject(std::uint64_t master, int i) { return derive_seed(derive_seed(master, 1), static_cast<std::uint64_t>(i)); }
inline std::uint64_t test_subject(std::uint64_t master, int i) { return derive_seed(derive_seed(master, 2), static_cast<std::uint64_t>(i)); }
inline std::uint64_t timeseries(std::uint64_t master, int unit) { return derive_seed(derive_seed(master, 3), static_cast<std::uint64_t>(unit)); }
inline std::uint64_t pool(std::uint64_t master) { return derive_seed(master, 4); }
inline std::uint64_t nuisance(std::uint64_t master, int unit) { return derive_seed(derive_seed(master, 5), static_cast<std::uint64_t>(unit)); }
inline std::uint64_t excursions(std::uint64_t master, int unit) { return derive_seed(derive_seed(master, 6), static_cast<std::uint64_t>(unit)); }
} // namespace seeds

inline Population sim_population(const SimulateSettings& s)
{
    auto peaks = default_peaks(s.amplitude);
    for (auto& p : peaks) {
        p.row *= s.layout_scale;
        p.col *= s.layout_scale;
        p.fwhm *= s.layout_scale;
    }
    return generate_population(s.dims, peaks, s.var_scale);
}

/// Population maps, timecourse pool, mesh and per-unit truth plus data under
/// `dir`. A user pool (T x P) replaces the synthetic one when given.
inline void simulate_to(const fs::path& dir, const SimulateSettings& s, std::uint64_t seed, const Eigen::MatrixXd* user_pool = nullptr)
{
    const Population pop = sim_population(s);
    io::write_map_set(dir / "population", "mean", pop.mean);
    io::write_map_set(dir / "population", "var", pop.var);
    const Eigen::MatrixXd pool = user_pool ? *user_pool : synthetic_timecourse_pool(s.T, s.pool_size, seeds::pool(seed));
    io::write_matrix(dir / "pool.csv", pool, "tc");
    write_mesh((dir / "mesh.txt").string(), grid_mesh(s.dims.rows, s.dims.cols, s.boundary));
    const auto units = unit_names(s);
    for (int i = 0; i < s.subjects; ++i) {
        const SubjectTruth base = simulate_subject(s.dims, pop, s.smooth_fwhm, seeds::test_subject(seed, i));
        for (int k = 0; k < s.sessions; ++k) {
            const int u = i * s.sessions + k;
            SubjectTruth truth = base;
            const Eigen::MatrixXd y = simulate_timeseries(truth, pool, s.noise_sd, seeds::timeseries(seed, u));
            const fs::path ud = dir / units[static_cast<std::size_t>(u)];
            io::write_map_set(ud, "ic", truth.ics);
            io::write_map_set(ud, "effect", truth.effects);
            io::write_matrix(ud / "mixing.csv", truth.mixing, "ic");
            io::write_matrix(ud / "Y.csv", y, "v");
        }
    }
}

inline void stage_simulate(const PipelineSettings& ps) { simulate_to(ps.out / "simulate", ps.sim, ps.seed); }

/// Template from `n` independent subjects drawn from the same population.
inline Template template_from_population(const SimulateSettings& s, int n, std::uint64_t seed)
{
    const Population pop = sim_population(s);
    TemplateAccumulator acc;
    for (int i = 0; i < n; ++i) acc.add(simulate_subject(s.dims, pop, s.smooth_fwhm, seeds::template_subject(seed, i)).ics);
    return acc.result();
}

inline void stage_template(const PipelineSettings& ps)
{
    write_template(ps.out / "template", template_from_population(ps.sim, ps.template_subjects, ps.seed));
}

/// Centring, optional nuisance removal and dimension reduction for one data
/// matrix, plus dual-regression maps written to `dr_dir` when given.
inline ReducedData preprocess_data(const Eigen::MatrixXd& y, const Template& tmpl, int L, int nuisance_iters, int nuisance_count,
                                   std::uint64_t seed, const fs::path& out, const fs::path& dr_dir = {})
{
    const CenterScaleResult cs = center_scale(y);
    const CenteredTemplate ct = center_template(tmpl);
    std::optional<int> forced;
    if (nuisance_count >= 0) forced = nuisance_count;
    const NuisanceResult nr = remove_nuisance(cs.data, ct.centered.mean, nuisance_iters, forced, seed);
    const ReducedData rd = dimension_reduce(nr.data, L);
    write_reduced(out, rd);
    if (!dr_dir.empty()) {
        const DualRegressionResult dr = dual_regression_maps(nr.data, tmpl);
        io::write_map_set(dr_dir, "ic", dr.maps);
        io::write_matrix(dr_dir / "mixing.csv", dr.mixing, "ic");
    }
    return rd;
}

inline void stage_preprocess(const PipelineSettings& ps)
{
    const Template tmpl = read_template(ps.out / "template");
    const auto units = unit_names(ps.sim);
    for (std::size_t u = 0; u < units.size(); ++u) {
        const Eigen::MatrixXd y = io::read_matrix(ps.out / "simulate" / units[u] / "Y.csv");
        preprocess_data(y, tmpl, ps.L, ps.nuisance_iters, ps.nuisance_count, seeds::nuisance(ps.seed, static_cast<int>(u)),
                        ps.out / "preprocess" / units[u], ps.out / "fit" / "dr" / units[u]);
    }
}

inline void stage_fit(const PipelineSettings& ps)
{
    const fs::path tdir = ps.out / "template";
    const Template tmpl = read_template(tdir);
    const fs::path mesh_path = ps.out / "simulate" / "mesh.txt";
    std::optional<TriMesh> mesh;
    const auto units = unit_names(ps.sim);
    for (Method m : ps.methods) {
        if (m == Method::Stica && !mesh) mesh = read_mesh(mesh_path.string());
        for (const auto& u : units) {
            const fs::path data = ps.out / "preprocess" / u;
            const FitResult r = fit_subject(m, read_reduced(data), tmpl, mesh ? &*mesh : nullptr, ps.em);
            write_fit(ps.out / "fit" / method_name(m) / u, r, {method_name(m), data, tdir, m == Method::Stica ? mesh_path : fs::path(), ps.em});
        }
    }
}

/// Engagement masks (IC > gamma) for stICA from joint excursion sets and for
/// tICA from the Bonferroni test; deviation masks (effect above or below 0)
/// when enabled.
inline void stage_excursions(const PipelineSettings& ps)
{
    const auto units = unit_names(ps.sim);
    for (Method m : ps.methods) {
        for (std::size_t u = 0; u < units.size(); ++u) {
            const fs::path fdir = ps.out / "fit" / method_name(m) / units[u];
            const fs::path odir = ps.out / "excursions" / method_name(m) / units[u];
            const StoredFit fit = read_fit(fdir);
            const auto L = static_cast<int>(fit.ics.rows());
            std::vector<Mask> eng, pos, neg;
            if (m == Method::Stica) {
                const std::uint64_t seed = seeds::excursions(ps.seed, static_cast<int>(u));
                GaussianField g = posterior_field(fit);
                std::vector<ExcursionRequest> rq;
                for (int l = 0; l < L; ++l) rq.push_back({l, ps.gamma, ps.alpha, Direction::Positive});
                for (auto& r : excursion_sets(g, rq, ps.samples, seed)) eng.push_back(r.mask);
                if (ps.deviations) {
                    g.mean = fit.effects;
                    rq.clear();
                    for (int l = 0; l < L; ++l) {
                        rq.push_back({l, 0.0, ps.alpha, Direction::Positive});
                        rq.push_back({l, 0.0, ps.alpha, Direction::Negative});
                    }
                    const auto res = excursion_sets(g, rq, ps.samples, derive_seed(seed, 1));
                    for (int l = 0; l < L; ++l) {
                        pos.push_back(res[static_cast<std::size_t>(2 * l)].mask);
                        neg.push_back(res[static_cast<std::size_t>(2 * l + 1)].mask);
                    }
                }
            } else {
                for (int l = 0; l < L; ++l) {
                    const Eigen::VectorXd sd = fit.sd.row(l).transpose();
                    eng.push_back(ttest_engagement(fit.ics.row(l).transpose(), sd, ps.gamma, ps.alpha, Direction::Positive));
                    if (ps.deviations) {
                        pos.push_back(ttest_engagement(fit.effects.row(l).transpose(), sd, 0.0, ps.alpha, Direction::Positive));
                        neg.push_back(ttest_engagement(fit.effects.row(l).transpose(), sd, 0.0, ps.alpha, Direction::Negative));
                    }
                }
            }
            write_masks(odir, "mask", eng);
            if (ps.deviations) {
                write_masks(odir, "dev_pos", pos);
                write_masks(odir, "dev_neg", neg);
            }
        }
    }
}

inline std::vector<Mask> truth_masks(const Eigen::MatrixXd& truth, double gamma)
{
    std::vector<Mask> out;
    for (Eigen::Index l = 0; l < truth.rows(); ++l) out.push_back(threshold_mask(truth.row(l).transpose(), gamma));
    return out;
}

/// Metrics per method, a cross-method summary, heatmaps and, with two
/// sessions, scan-rescan reliability.
inline void stage_evaluate(const PipelineSettings& ps)
{
    const auto units = unit_names(ps.sim);
    const fs::path edir = ps.out / "evaluate";
    io::ensure_dir(edir);
    std::vector<Eigen::MatrixXd> truths, fc_true;
    std::vector<std::vector<Mask>> true_masks;
    for (const auto& u : units) {
        const fs::path d = ps.out / "simulate" / u;
        truths.push_back(io::read_map_set(d, "ic"));
        fc_true.push_back(fc_matrix(io::read_matrix(d / "mixing.csv")));
        true_masks.push_back(truth_masks(truths.back(), ps.gamma));
    }
    const auto L = truths.front().rows();

    std::vector<std::string> names{"dr"};
    for (Method m : ps.methods) names.push_back(method_name(m));
    std::vector<MetricsReport> reports;
    for (const auto& name : names) {
        EvalInput in;
        in.truths = truths;
        in.fc_true = fc_true;
        in.cat_threshold = ps.cat_threshold;
        const bool masked = name != "dr" && fs::exists(ps.out / "excursions" / name);
        for (const auto& u : units) {
            const fs::path d = ps.out / "fit" / name / u;
            in.estimates.push_back(io::read_map_set(d, "ic"));
            in.fc_est.push_back(fc_matrix(io::read_matrix(d / "mixing.csv")));
            if (masked) in.masks.push_back(read_masks(ps.out / "excursions" / name / u, "mask"));
        }
        if (masked) in.true_masks = true_masks;
        reports.push_back(evaluate(in));
        write_report(edir / name, reports.back());
    }

    // Summary: one row per method and IC, means over units.
    Eigen::MatrixXd sum(static_cast<Eigen::Index>(names.size()) * L, 9);
    for (std::size_t k = 0; k < names.size(); ++k)
        for (Eigen::Index l = 0; l < L; ++l) {
            const MetricsReport& r = reports[k];
            const int li = static_cast<int>(l);
            sum.row(static_cast<Eigen::Index>(k) * L + l) << static_cast<double>(k), static_cast<double>(l + 1), r.mean(li, &MetricsRow::mse),
                r.mean(li, &MetricsRow::corr), r.mean(li, &MetricsRow::corr_z), r.mean(li, &MetricsRow::cat), r.mean(li, &MetricsRow::fpr),
                r.mean(li, &MetricsRow::power), r.mean(li, &MetricsRow::dice);
        }
    io::write_csv(edir / "summary.csv", sum, {"method", "ic", "mse", "corr", "corr_z", "cat", "fpr", "power", "dice"});
    {
        std::ofstream f(edir / "methods.txt");
        for (std::size_t k = 0; k < names.size(); ++k) f << k << ' ' << names[k] << '\n';
    }
    // FC accuracy per IC pair.
    Eigen::MatrixXd fc(L * (L - 1) / 2, 2 + static_cast<Eigen::Index>(names.size()));
    std::vector<std::string> fch{"ic_a", "ic_b"};
    for (const auto& n : names) fch.push_back("mse_" + n);
    Eigen::Index row = 0;
    for (Eigen::Index a = 0; a < L; ++a)
        for (Eigen::Index b = a + 1; b < L; ++b, ++row) {
            fc(row, 0) = static_cast<double>(a + 1);
            fc(row, 1) = static_cast<double>(b + 1);
            for (std::size_t k = 0; k < names.size(); ++k) fc(row, 2 + static_cast<Eigen::Index>(k)) = reports[k].fc_mse(a, b);
        }
    io::write_csv(edir / "fc_summary.csv", fc, fch);

    if (ps.heatmaps) {
        const GridDims dims = ps.sim.dims;
        double hi = 0.0;
        for (const auto& r : reports) hi = std::max(hi, r.mse_maps.maxCoeff());
        if (!(hi > 0)) hi = 1.0;
        const double lo_ic = truths.front().minCoeff(), hi_ic = std::max(truths.front().maxCoeff(), lo_ic + 1e-12);
        for (Eigen::Index l = 0; l < L; ++l) {
            const std::string sfx = "_" + std::to_string(l + 1) + ".pgm";
            write_pgm(edir / ("truth_ic" + sfx), truths.front().row(l).transpose(), dims, lo_ic, hi_ic);
            for (std::size_t k = 0; k < names.size(); ++k) {
                write_pgm(edir / names[k] / ("mse" + sfx), reports[k].mse_maps.row(l).transpose(), dims, 0.0, hi);
                const Eigen::MatrixXd est = io::read_map_set(ps.out / "fit" / names[k] / units.front(), "ic");
                write_pgm(edir / names[k] / ("ic" + sfx), est.row(l).transpose(), dims, lo_ic, hi_ic);
            }
        }
    }

    if (ps.sim.sessions > 1 && ps.deviations) {
        for (Method m : ps.methods) {
            const std::string name = method_name(m);
            std::vector<ReliabilityRow> rows;
            for (int i = 0; i < ps.sim.subjects; ++i) {
                const auto& ua = units[static_cast<std::size_t>(i * ps.sim.sessions)];
                const auto& ub = units[static_cast<std::size_t>(i * ps.sim.sessions + 1)];
                const fs::path xa = ps.out / "excursions" / name / ua, xb = ps.out / "excursions" / name / ub;
                const auto r = reliability(i, io::read_map_set(ps.out / "fit" / name / ua, "effect"),
                                           io::read_map_set(ps.out / "fit" / name / ub, "effect"), read_masks(xa, "dev_pos"),
                                           read_masks(xb, "dev_pos"), read_masks(xa, "dev_neg"), read_masks(xb, "dev_neg"));
                rows.insert(rows.end(), r.begin(), r.end());
            }
            write_reliability(edir / name / "reliability.csv", rows);
        }
    }
}

struct StageTiming
{
    std::string name;
    double seconds = 0.0;
};

/// Runs the configured stages in order and writes manifest.json.
inline std::vector<StageTiming> run_pipeline(Config& config)
{
    const PipelineSettings ps = read_settings(config);
    const auto unused = config.unused();
    if (!unused.empty()) throw ConfigError("unknown configuration key '" + unused.front() + "'");
    io::ensure_dir(ps.out);
    std::vector<StageTiming> timings;
    auto write_manifest = [&](const std::string& failed) {
        nlohmann::ordered_json j;
        j["version"] = version;
        j["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION);
        j["boost"] = BOOST_LIB_VERSION;
        j["seed"] = ps.seed;
        nlohmann::ordered_json cfg;
        for (const auto& [k, v] : config.used()) cfg[k] = v;
        j["config"] = cfg;
        nlohmann::ordered_json st = nlohmann::ordered_json::array();
        for (const auto& t : timings) st.push_back({{"stage", t.name}, {"seconds", t.seconds}});
        j["stages"] = st;
        if (!failed.empty()) j["failed"] = failed;
        std::ofstream(ps.out / "manifest.json") << j.dump(2) << '\n';
    };
    for (const auto& name : ps.stages) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            if (name == "simulate") stage_simulate(ps);
            else if (name == "template") stage_template(ps);
            else if (name == "preprocess") stage_preprocess(ps);
            else if (name == "fit") stage_fit(ps);
            else if (name == "excursions") stage_excursions(ps);
            else if (name == "evaluate") stage_evaluate(ps);
        } catch (const std::exception& e) {
            write_manifest(name);
            throw StageFailed("stage '" + name + "': " + e.what());
        }
        timings.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
    write_manifest("");
    return timings;
}

} // namespace stica

#endif
