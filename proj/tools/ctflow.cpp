// Command-line front end: generate, scan, recon, train, evaluate, sweep,
// plot, threshold and calibrate.
//
// Exit codes: 0 ok, 1 runtime failure, 2 configuration error, 3 failed cells.

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "ctflow/harness.hpp"
#include "ctflow/recon.hpp"
#include "ctflow/store.hpp"

using namespace ctflow;
namespace fs = std::filesystem;
using harness::ExperimentConfig;
using json = nlohmann::json;

namespace {

constexpr int kConfigError = 2;
constexpr int kCellFailure = 3;

/// Relative outputs land under $CTFLOW_OUTPUT_ROOT (default: working directory).
std::string output_path(std::string const& p)
{
    fs::path const path(p);
    if (path.is_absolute())
        return p;
    char const* root = std::getenv("CTFLOW_OUTPUT_ROOT");
    return root && *root ? (fs::path(root) / path).string() : p;
}

struct Common
{
    std::string config_path;
    std::vector<std::string> overrides;

    /// Desk defaults, then the config file, then --set key=value pairs
    /// (dotted keys reach nested fields; values parse as JSON, else string).
    ExperimentConfig load() const
    {
        json j = ExperimentConfig::desk().to_json();
        if (!config_path.empty())
        {
            std::ifstream in(config_path);
            if (!in)
                throw ConfigError(fmt::format("cannot read config '{}'", config_path));
            json file;
            try
            {
                file = json::parse(in);
            }
            catch (json::exception const& e)
            {
                throw ConfigError(fmt::format("config '{}': {}", config_path, e.what()));
            }
            j.merge_patch(file);
        }
        for (auto const& kv : overrides)
        {
            auto const eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError(fmt::format("--set expects key=value, got '{}'", kv));
            std::string const key = kv.substr(0, eq), text = kv.substr(eq + 1);
            json value = json::parse(text, nullptr, false);
            if (value.is_discarded())
                value = text;
            json* node = &j;
            std::size_t start = 0;
            for (;;)
            {
                auto const dot = key.find('.', start);
                std::string const part = key.substr(start, dot - start);
                if (!node->is_object() || !node->contains(part))
                    throw ConfigError(fmt::format("unknown config key '{}'", key));
                node = &(*node)[part];
                if (dot == std::string::npos)
                    break;
                start = dot + 1;
            }
            *node = value;
        }
        return ExperimentConfig::from_json(j);
    }
};

void add_common(CLI::App* app, Common& c)
{
    app->add_option("-c,--config", c.config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--set", c.overrides, "Override a config field, e.g. --set train.iterations=500");
}

struct CellFlags
{
    double grs = 0.0;
    double theta0 = 0.0;
    double cnr = 0.0;
    int pulse_width = 0;
    double duty = 1.0;
    std::string mode = "sinoflow";

    harness::Cell cell(ExperimentConfig const& config) const
    {
        harness::Cell c;
        c.grs = grs > 0.0 ? grs : config.base_grs;
        c.theta0 = theta0;
        c.cnr = cnr;
        c.pulse = {pulse_width, duty};
        c.method = pinn::mode_from_name(mode);
        return c;
    }
};

void add_cell_flags(CLI::App* app, CellFlags& f)
{
    app->add_option("--grs", f.grs, "Gantry rotation speed (Hz); default base_grs");
    app->add_option("--theta0", f.theta0, "Gantry starting angle (deg)");
    app->add_option("--cnr", f.cnr, "Target CNR; 0 is noise-free");
    app->add_option("--pulse-width", f.pulse_width, "Views per pulse; 0 is continuous");
    app->add_option("--duty", f.duty, "Pulse duty cycle");
    app->add_option("--mode", f.mode, "imageflow or sinoflow")->check(CLI::IsMember({"imageflow", "sinoflow"}));
}

harness::Scene scene_for(ExperimentConfig const& config)
{
    auto s = harness::build_scene(config);
    if (s.truth.grid.nx != config.grid_n || std::abs(s.truth.grid.nx * s.truth.grid.pixel - config.fov) > 1e-9 * config.fov)
        throw ConfigError("ground-truth grid differs from grid_n / fov in the config");
    return s;
}

void print_record(harness::MetricsRecord const& r)
{
    fmt::print("conc_rmse     {:.6g}\n", r.conc_rmse);
    fmt::print("vel_rmse      {:.6g} m/s\n", r.vel_rmse);
    fmt::print("vel_range_err {:.6g} m/s\n", r.vel_range_err);
    fmt::print("high_vel_err  {:.6g} m/s\n", r.high_vel_err);
    fmt::print("low_vel_err   {:.6g} m/s\n", r.low_vel_err);
    fmt::print("outlet_ratio  {:.6g}\n", r.outlet_ratio);
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Dynamic CT flow reconstruction experiments"};
    app.require_subcommand(1);
    Common common;

    std::string out;
    auto* generate = app.add_subcommand("generate", "Synthesise the ground-truth movie");
    add_common(generate, common);
    generate->add_option("-o,--out", out, "Output movie directory")->required();

    CellFlags flags;
    std::string truth_path, sino_path, ct_path, checkpoint;
    auto* scan = app.add_subcommand("scan", "Simulate a sinogram of the ground truth");
    add_common(scan, common);
    add_cell_flags(scan, flags);
    scan->add_option("--truth", truth_path, "Ground-truth movie (default: synthesise)");
    scan->add_option("-o,--out", out, "Output sinogram directory")->required();

    auto* rec = app.add_subcommand("recon", "Rotation-binned FBP movie of a sinogram");
    add_common(rec, common);
    rec->add_option("--sino", sino_path, "Sinogram directory")->required();
    rec->add_option("-o,--out", out, "Output movie directory")->required();

    auto* trn = app.add_subcommand("train", "Train a PINN on a sinogram (SinoFlow) or FBP movie (ImageFlow)");
    add_common(trn, common);
    trn->add_option("--sino", sino_path, "Sinogram directory")->required();
    trn->add_option("--ct", ct_path, "FBP movie for ImageFlow (default: reconstruct)");
    trn->add_option("--truth", truth_path, "Ground-truth movie (default: synthesise)");
    trn->add_option("--mode", flags.mode, "imageflow or sinoflow")
        ->check(CLI::IsMember({"imageflow", "sinoflow"}));
    trn->add_option("-o,--out", out, "Output run directory")->required();

    auto* eval = app.add_subcommand("evaluate", "Metrics of a checkpoint or movie against the ground truth");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory");
    eval->add_option("--movie", ct_path, "Reconstructed movie directory");
    eval->add_option("--truth", truth_path, "Ground-truth movie (default: synthesise)");
    eval->add_option("-o,--out", out, "Write metrics JSON here");

    auto* sweep = app.add_subcommand("sweep", "Run (or resume) every cell of an experiment");
    add_common(sweep, common);
    sweep->add_option("-o,--out", out, "Output directory (overrides output_dir)");

    std::string metrics_csv;
    auto* plot = app.add_subcommand("plot", "Boxplots and CSV from a sweep's metrics.csv");
    plot->add_option("--metrics", metrics_csv, "metrics.csv of a sweep")->required()->check(CLI::ExistingFile);
    plot->add_option("-o,--out", out, "Output directory")->required();

    harness::StrouhalInputs st;
    auto* thr = app.add_subcommand("threshold", "Slowest gantry speed that resolves the bolus front");
    thr->add_option("--st", st.St_flow, "Flow Strouhal number");
    thr->add_option("--omega", st.omega_flow, "Flow angular frequency (1/s)");
    thr->add_option("--lc-over-h", st.L_c_over_H, "Bolus-front thickness over channel width");
    thr->add_option("--H", st.H, "Channel width (cm)");
    thr->add_option("--u", st.u, "Characteristic velocity (cm/s)");

    std::vector<double> I0s{3e3, 1e4, 3e4, 1e5, 3e5, 1e6, 3e6};
    auto* cal = app.add_subcommand("calibrate", "Tabulate reconstructed CNR against incident photon count");
    add_common(cal, common);
    cal->add_option("--I0", I0s, "Photon counts to tabulate");
    cal->add_option("-o,--out", out, "Output CSV")->required();

    try
    {
        app.parse(argc, argv);
    }
    catch (CLI::ParseError const& e)
    {
        int const code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    try
    {
        if (*generate)
        {
            auto const config = common.load();
            config.validate();
            auto const scene = harness::build_scene(config);
            flowgen::save_field_movie(scene.truth, output_path(out));
            fmt::print("wrote {} frames to {}\n", scene.truth.nt(), output_path(out));
        }
        else if (*scan)
        {
            auto config = common.load();
            if (!truth_path.empty())
                config.truth_path = truth_path;
            config.validate();
            auto const scene = scene_for(config);
            auto const cell = flags.cell(config);
            auto const protocol = harness::scan_protocol(config, cell);
            auto const sino = ctsim::simulate_scan(scene.truth, config.scanner, protocol);
            ctsim::save_sinogram(sino, output_path(out));
            fmt::print("wrote {} views x {} channels to {}\n", sino.n_views, sino.n_channels, output_path(out));
        }
        else if (*rec)
        {
            auto const config = common.load();
            config.validate();
            auto const sino = ctsim::load_sinogram(sino_path);
            recon::ReconConfig rc;
            rc.grid = GridSpec::centered(config.grid_n, config.fov);
            auto const movie = recon::reconstruct_movie(sino, rc);
            flowgen::save_field_movie(movie, output_path(out));
            fmt::print("wrote {} frames to {}\n", movie.nt(), output_path(out));
        }
        else if (*trn)
        {
            auto config = common.load();
            if (!truth_path.empty())
                config.truth_path = truth_path;
            config.validate();
            auto const scene = scene_for(config);
            auto const sino = ctsim::load_sinogram(sino_path);
            auto const mode = pinn::mode_from_name(flags.mode);
            flowgen::FieldMovie ct;
            if (mode == pinn::Mode::imageflow)
            {
                if (ct_path.empty())
                {
                    recon::ReconConfig rc;
                    rc.grid = scene.truth.grid;
                    rc.region = scene.mask.roi_bounds();
                    ct = recon::reconstruct_movie(sino, rc);
                }
                else
                {
                    ct = flowgen::load_field_movie(ct_path);
                }
            }
            auto const data = harness::training_data(scene, sino, mode == pinn::Mode::imageflow ? &ct : nullptr);
            pinn::FieldNetwork net(config.network, data.normalization());
            auto tc = config.train;
            tc.mode = mode;
            fs::path const dir(output_path(out));
            tc.checkpoint_dir = (dir / "checkpoint").string();
            auto const result = pinn::train(net, data, tc);
            pinn::save_checkpoint(net, tc, result.iterations, tc.checkpoint_dir);
            pinn::write_history_csv(result.history, (dir / "history.csv").string());
            auto const& last = result.history.back();
            fmt::print("{} iterations: L_physics {:.4g}  L_data {:.4g}\n", result.iterations, last.physics,
                       last.data);
        }
        else if (*eval)
        {
            auto config = common.load();
            if (!truth_path.empty())
                config.truth_path = truth_path;
            config.validate();
            if (checkpoint.empty() == ct_path.empty())
                throw ConfigError("evaluate needs exactly one of --checkpoint and --movie");
            auto const scene = scene_for(config);
            harness::MetricsRecord r;
            if (!checkpoint.empty())
            {
                auto const net = pinn::load_checkpoint(checkpoint);
                auto const& n = net.normalization();
                r = harness::evaluate_source(scene, &net, {n.lo[0], n.hi[0]});
                r.method = "network";
            }
            else
            {
                auto const movie = flowgen::load_field_movie(ct_path);
                r = harness::evaluate_source(scene, &movie, {movie.window[0], movie.window[1]});
                r.method = "movie";
            }
            r.config_hash = config.hash();
            print_record(r);
            if (!out.empty())
                store::write_json(output_path(out), r.to_json());
        }
        else if (*sweep)
        {
            auto config = common.load();
            if (!out.empty())
                config.output_dir = out;
            config.output_dir = output_path(config.output_dir);
            auto const result = harness::run_sweep(config);
            for (auto const& c : result.cells)
            {
                if (c.record)
                    fmt::print("{} {:>9} grs {:g} theta0 {:g} cnr {:g} pw {} duty {:g}: conc {:.4g} vel {:.4g}{}\n",
                               c.hash.substr(0, 12), c.record->method, c.cell.grs, c.cell.theta0, c.cell.cnr,
                               c.cell.pulse.width, c.cell.pulse.duty, c.record->conc_rmse, c.record->vel_rmse,
                               c.resumed ? " (resumed)" : "");
                else
                    fmt::print("{} FAILED: {}\n", c.hash.substr(0, 12), c.error);
            }
            if (result.failures() > 0)
            {
                fmt::print(stderr, "{} of {} cells failed\n", result.failures(), result.cells.size());
                return kCellFailure;
            }
        }
        else if (*plot)
        {
            for (auto const& f : harness::emit_plots(harness::read_records_csv(metrics_csv), output_path(out)))
                fmt::print("{}\n", f);
        }
        else if (*thr)
        {
            fmt::print("gantry threshold {:.4f} Hz\n", harness::strouhal_threshold(st));
        }
        else if (*cal)
        {
            auto const config = common.load();
            auto const table = harness::calibrate_cnr(config, I0s);
            table.save(output_path(out));
            for (auto const& row : table.rows())
                fmt::print("I0 {:>10.4g}  CNR {:.3f}\n", row[0], row[1]);
        }
    }
    catch (ConfigError const& e)
    {
        fmt::print(stderr, "config error: {}\n", e.what());
        return kConfigError;
    }
    catch (std::exception const& e)
    {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
