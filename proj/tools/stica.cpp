// stica: command-line front end. Each subcommand runs one stage; `pipeline`
// runs several from a config file. Any subcommand also takes --config FILE
// (INI, one section per subcommand); flags given on the command line win.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stica/stica.hpp"

using namespace stica;
namespace fs = std::filesystem;

namespace {

GridDims parse_dims(const std::string& s)
{
    const auto x = s.find('x');
    if (x == std::string::npos) throw ConfigError("dims must look like 46x55");
    try {
        return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
    } catch (const std::exception&) {
        throw ConfigError("dims must look like 46x55");
    }
}

std::vector<std::string> sorted_subdirs(const fs::path& dir)
{
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Spatial template ICA: simulation, estimation, inference and evaluation"};
    app.set_config("--config", "", "INI file with one section per subcommand");
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(version));

    // simulate
    auto* sim = app.add_subcommand("simulate", "Simulate test subjects from the generative model");
    std::string sim_dims = "46x55", sim_out, sim_pool;
    SimulateSettings ss;
    std::uint64_t sim_seed = 1;
    sim->add_option("--dims", sim_dims, "Grid size ROWSxCOLS")->capture_default_str();
    sim->add_option("--subjects", ss.subjects)->capture_default_str();
    sim->add_option("--sessions", ss.sessions, "Sessions per subject (same ICs, new timecourses and noise)")->capture_default_str();
    sim->add_option("--timepoints", ss.T)->capture_default_str();
    sim->add_option("--noise-sd", ss.noise_sd)->capture_default_str();
    sim->add_option("--smooth-fwhm", ss.smooth_fwhm)->capture_default_str();
    sim->add_option("--amplitude", ss.amplitude, "Peak height of the population means")->capture_default_str();
    sim->add_option("--var-scale", ss.var_scale, "Generating variance = var-scale x mean")->capture_default_str();
    sim->add_option("--layout-scale", ss.layout_scale, "Scale peak centres and widths, for small grids")->capture_default_str();
    sim->add_option("--pool", sim_pool, "T x P CSV of timecourses to use instead of the synthetic pool");
    sim->add_option("--seed", sim_seed)->capture_default_str();
    sim->add_option("--out", sim_out)->required();

    // template
    auto* tpl = app.add_subcommand("template", "Estimate a template from simulated population subjects");
    std::string tpl_dims = "46x55", tpl_out;
    SimulateSettings ts;
    int tpl_n = 1000;
    std::uint64_t tpl_seed = 1;
    tpl->add_option("--dims", tpl_dims)->capture_default_str();
    tpl->add_option("--subjects", tpl_n)->capture_default_str();
    tpl->add_option("--smooth-fwhm", ts.smooth_fwhm)->capture_default_str();
    tpl->add_option("--amplitude", ts.amplitude)->capture_default_str();
    tpl->add_option("--var-scale", ts.var_scale)->capture_default_str();
    tpl->add_option("--layout-scale", ts.layout_scale)->capture_default_str();
    tpl->add_option("--seed", tpl_seed)->capture_default_str();
    tpl->add_option("--out", tpl_out)->required();

    // preprocess
    auto* pre = app.add_subcommand("preprocess", "Centre, clean and reduce one subject's data");
    std::string pre_data, pre_tmpl, pre_out, pre_dr;
    int pre_L = 3, pre_k = -1, pre_iters = 1;
    std::uint64_t pre_seed = 1;
    pre->add_option("--data", pre_data, "T x V CSV")->required();
    pre->add_option("--template", pre_tmpl)->required();
    pre->add_option("--L", pre_L)->capture_default_str();
    pre->add_option("--nuisance-count", pre_k, "Force the nuisance IC count (negative: estimate)")->capture_default_str();
    pre->add_option("--nuisance-iters", pre_iters)->capture_default_str();
    pre->add_option("--seed", pre_seed)->capture_default_str();
    pre->add_option("--dr-out", pre_dr, "Also write dual-regression maps here");
    pre->add_option("--out", pre_out)->required();

    // fit
    auto* fit = app.add_subcommand("fit", "Fit stICA or tICA to reduced data");
    std::string fit_method = "stica", fit_data, fit_tmpl, fit_mesh, fit_mode = "common", fit_init = "dr", fit_out;
    EmOptions eo;
    bool no_squarem = false;
    std::uint64_t fit_seed = 1;
    fit->add_option("--method", fit_method)->check(CLI::IsMember({"stica", "tica"}))->capture_default_str();
    fit->add_option("--data", fit_data, "Directory with y.csv, H.csv, C.csv, nu0sq.txt")->required();
    fit->add_option("--template", fit_tmpl)->required();
    fit->add_option("--mesh", fit_mesh);
    fit->add_option("--mode", fit_mode)->check(CLI::IsMember({"common", "per-ic"}))->capture_default_str();
    fit->add_option("--init", fit_init, "Starting mixing matrix: dual regression or a tICA fit")
        ->check(CLI::IsMember({"dr", "tica"}))
        ->capture_default_str();
    fit->add_option("--tol", eo.tol)->capture_default_str();
    fit->add_option("--max-iter", eo.max_iter)->capture_default_str();
    fit->add_flag("--no-squarem", no_squarem);
    fit->add_option("--seed", fit_seed, "Unused: the fit is deterministic")->capture_default_str();
    fit->add_option("--out", fit_out)->required();

    // excursions
    auto* exc = app.add_subcommand("excursions", "Excursion set (stICA) or Bonferroni test (tICA) for one IC");
    std::string exc_fit, exc_dir = "pos", exc_field = "ic", exc_out;
    int exc_ic = 1, exc_samples = 10000;
    double exc_gamma = 1.0, exc_alpha = 0.1;
    std::uint64_t exc_seed = 1;
    exc->add_option("--fit", exc_fit)->required();
    exc->add_option("--ic", exc_ic, "IC number, from 1")->capture_default_str();
    exc->add_option("--gamma", exc_gamma)->capture_default_str();
    exc->add_option("--alpha", exc_alpha)->capture_default_str();
    exc->add_option("--direction", exc_dir)->check(CLI::IsMember({"pos", "neg"}))->capture_default_str();
    exc->add_option("--field", exc_field, "ic or effect")->check(CLI::IsMember({"ic", "effect"}))->capture_default_str();
    exc->add_option("--samples", exc_samples)->capture_default_str();
    exc->add_option("--seed", exc_seed)->capture_default_str();
    exc->add_option("--out", exc_out, "CSV file for the 0/1 mask, e.g. masks/sub-1/mask_2.csv")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Compare estimates with ground truth or with a second session");
    std::string ev_truth, ev_est, ev_masks, ev_out;
    double ev_gamma = 1.0, ev_cat = 1.0;
    bool ev_no_rescale = false;
    ev->add_option("--truth", ev_truth, "Directory of units with ic_<l>.csv (and mixing.csv)")->required();
    ev->add_option("--estimates", ev_est, "Directory of units with ic_<l>.csv (and mixing.csv)")->required();
    ev->add_option("--masks", ev_masks, "Directory of units with mask_<l>.csv");
    ev->add_option("--gamma", ev_gamma, "Engagement threshold on the truth")->capture_default_str();
    ev->add_option("--cat-threshold", ev_cat)->capture_default_str();
    ev->add_flag("--no-rescale", ev_no_rescale);
    ev->add_option("--out", ev_out)->required();

    // pipeline
    auto* pip = app.add_subcommand("pipeline", "Run configured stages end to end");
    std::string pip_cfg, pip_out;
    std::vector<std::string> pip_set;
    std::uint64_t pip_seed = 0;
    pip->add_option("config_file", pip_cfg, "Pipeline INI file")->required();
    pip->add_option("--set", pip_set, "Override, section.key=value");
    pip->add_option("--out", pip_out, "Override pipeline.out");
    pip->add_option("--seed", pip_seed, "Override pipeline.seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim) {
            ss.dims = parse_dims(sim_dims);
            if (sim_pool.empty()) {
                simulate_to(sim_out, ss, sim_seed);
            } else {
                const Eigen::MatrixXd pool = io::read_matrix(sim_pool);
                ss.T = static_cast<int>(pool.rows());
                simulate_to(sim_out, ss, sim_seed, &pool);
            }
        } else if (*tpl) {
            ts.dims = parse_dims(tpl_dims);
            write_template(tpl_out, template_from_population(ts, tpl_n, tpl_seed));
        } else if (*pre) {
            preprocess_data(io::read_matrix(pre_data), read_template(pre_tmpl), pre_L, pre_iters, pre_k, pre_seed, pre_out, pre_dr);
        } else if (*fit) {
            eo.mode = parse_mode(fit_mode);
            eo.init = parse_init(fit_init);
            eo.squarem = !no_squarem;
            const Method m = parse_method(fit_method);
            std::optional<TriMesh> mesh;
            if (m == Method::Stica) {
                if (fit_mesh.empty()) throw ConfigError("--mesh is required for stica");
                mesh = read_mesh(fit_mesh);
            }
            const FitResult r = fit_subject(m, read_reduced(fit_data), read_template(fit_tmpl), mesh ? &*mesh : nullptr, eo);
            write_fit(fit_out, r, {fit_method, fit_data, fit_tmpl, m == Method::Stica ? fs::path(fit_mesh) : fs::path(), eo});
            std::cerr << fit_method << ": " << r.iterations << " evaluations, " << (r.converged ? "converged" : "not converged")
                      << ", log-likelihood " << r.loglik << ", " << r.wall_seconds << " s\n";
            if (r.kappa_at_boundary) std::cerr << "warning: kappa estimate at the edge of its search range\n";
        } else if (*exc) {
            const StoredFit sf = read_fit(exc_fit);
            const int l = exc_ic - 1;
            if (l < 0 || l >= sf.ics.rows()) throw DimensionMismatch("--ic out of range");
            const Direction dir = exc_dir == "pos" ? Direction::Positive : Direction::Negative;
            const bool effect = exc_field == "effect";
            Mask mask;
            if (sf.record.method == "stica") {
                const ExcursionResult r = excursion_set(posterior_field(sf, effect), {l, exc_gamma, exc_alpha, dir}, exc_samples, exc_seed);
                mask = r.mask;
                std::cerr << r.size() << " locations, joint probability " << r.attained_joint_prob << '\n';
            } else {
                const Eigen::MatrixXd& mean = effect ? sf.effects : sf.ics;
                mask = ttest_engagement(mean.row(l).transpose(), sf.sd.row(l).transpose(), exc_gamma, exc_alpha, dir);
            }
            Eigen::VectorXd out(static_cast<Eigen::Index>(mask.size()));
            for (std::size_t v = 0; v < mask.size(); ++v) out[static_cast<Eigen::Index>(v)] = mask[v] ? 1.0 : 0.0;
            if (fs::path(exc_out).has_parent_path()) io::ensure_dir(fs::path(exc_out).parent_path());
            io::write_map(exc_out, out);
        } else if (*ev) {
            // Units are the subdirectories present in both trees; with none, the directories themselves.
            std::vector<std::string> units;
            for (const auto& u : sorted_subdirs(ev_est))
                if (fs::exists(fs::path(ev_truth) / u)) units.push_back(u);
            if (units.empty()) units.push_back(".");
            EvalInput in;
            in.cat_threshold = ev_cat;
            in.rescale = !ev_no_rescale;
            bool fc = true;
            for (const auto& u : units) {
                const fs::path t = fs::path(ev_truth) / u, e = fs::path(ev_est) / u;
                in.truths.push_back(io::read_map_set(t, "ic"));
                in.estimates.push_back(io::read_map_set(e, "ic"));
                fc = fc && fs::exists(t / "mixing.csv") && fs::exists(e / "mixing.csv");
                if (!ev_masks.empty()) {
                    in.masks.push_back(read_masks(fs::path(ev_masks) / u, "mask"));
                    in.true_masks.push_back(truth_masks(in.truths.back(), ev_gamma));
                }
            }
            if (fc)
                for (const auto& u : units) {
                    in.fc_true.push_back(fc_matrix(io::read_matrix(fs::path(ev_truth) / u / "mixing.csv")));
                    in.fc_est.push_back(fc_matrix(io::read_matrix(fs::path(ev_est) / u / "mixing.csv")));
                }
            write_report(ev_out, evaluate(in));
        } else if (*pip) {
            Config c = Config::from_file(pip_cfg);
            for (const auto& s : pip_set) c.set(s);
            if (!pip_out.empty()) c.set("pipeline.out=" + pip_out);
            if (pip->count("--seed")) c.set("pipeline.seed=" + std::to_string(pip_seed));
            for (const auto& t : run_pipeline(c)) std::cerr << t.name << ": " << t.seconds << " s\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
