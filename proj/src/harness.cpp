#include "ctflow/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/core.h>
#include <fmt/ranges.h>

#include "ctflow/recon.hpp"
#include "ctflow/store.hpp"

namespace ctflow::harness {

namespace fs = std::filesystem;
using flowgen::Field;
using flowgen::FieldMovie;

char const* kind_name(ExperimentKind k)
{
    switch (k)
    {
    case ExperimentKind::grs_sweep:
        return "grs_sweep";
    case ExperimentKind::noise_sweep:
        return "noise_sweep";
    case ExperimentKind::pulse_sweep:
        return "pulse_sweep";
    case ExperimentKind::single_run:
        return "single_run";
    }
    return "?";
}

ExperimentKind kind_from_name(std::string const& name)
{
    for (auto k : {ExperimentKind::grs_sweep, ExperimentKind::noise_sweep, ExperimentKind::pulse_sweep,
                   ExperimentKind::single_run})
        if (name == kind_name(k))
            return k;
    throw ConfigError(fmt::format("unknown experiment kind '{}'", name));
}

// ---------------------------------------------------------------------------
// Configuration

ExperimentConfig ExperimentConfig::desk()
{
    ExperimentConfig c;
    c.scanner.fan_angle_deg = 43.6;
    c.scanner.n_channels = 512;
    c.scanner.subrays_per_channel = 5;
    c.scanner.views_per_rotation = 984;
    c.scanner.fov = c.fov;
    c.train.iterations = 4000;
    c.train.n_phys = 1024;
    c.train.n_data = 1024;
    c.train.n_rays = 16;
    c.train.Re = flowgen::FlowParams::from_dimensional(c.u_c, c.H, c.nu, c.omega).Re;
    return c;
}

void ExperimentConfig::validate() const
{
    if (vessel != "channel" && vessel != "bifurcation")
        throw ConfigError(fmt::format("unknown vessel '{}'", vessel));
    if (vessel == "bifurcation" && truth_path.empty())
        throw ConfigError("the bifurcation needs a ground-truth movie (truth_path)");
    if (!(H > 0.0) || !(u_c > 0.0) || !(nu > 0.0) || !(omega > 0.0))
        throw ConfigError("flow parameters must be positive");
    if (grid_n < 8 || !(fov > 0.0))
        throw ConfigError("imaging grid is invalid");
    if (std::abs(scanner.fov - fov) > 1e-9 * fov)
        throw ConfigError("scanner FOV must equal the grid FOV");
    scanner.validate();
    if (!(acquisition_seconds > 0.0) || t_start < 0.0)
        throw ConfigError("acquisition window is invalid");
    if (grs.empty() || theta0.empty() || methods.empty())
        throw ConfigError("grs, theta0 and methods need at least one entry");
    for (double g : grs)
    {
        double const rot = g * acquisition_seconds;
        if (!(g > 0.0) || std::abs(rot - std::round(rot)) > 1e-9 || std::round(rot) < 1)
            throw ConfigError(fmt::format("GRS {} does not give a whole number of rotations", g));
    }
    double const rot = base_grs * acquisition_seconds;
    if (!(base_grs > 0.0) || std::abs(rot - std::round(rot)) > 1e-9 || std::round(rot) < 1)
        throw ConfigError("base GRS does not give a whole number of rotations");
    if (kind == ExperimentKind::noise_sweep && cnr.empty())
        throw ConfigError("noise sweep needs CNR targets");
    if (kind == ExperimentKind::pulse_sweep && pulses.empty())
        throw ConfigError("pulse sweep needs pulse settings");
    for (auto const& p : pulses)
        if (p.width < 0 || !(p.duty > 0.0 && p.duty <= 1.0))
            throw ConfigError("pulse settings need width >= 0 and duty in (0, 1]");
    for (double c : cnr)
        if (c < 0.0)
            throw ConfigError("CNR targets must be non-negative");
    bool const noisy = base_cnr > 0.0 || std::any_of(cnr.begin(), cnr.end(), [](double c) { return c > 0; });
    if (noisy && cnr_table.empty())
        throw ConfigError("noisy scans need a CNR calibration table (cnr_table)");
    bool const pulsed = kind == ExperimentKind::pulse_sweep
                        || std::any_of(pulses.begin(), pulses.end(), [](auto const& p) { return p.width > 0; });
    if (pulsed && std::count(methods.begin(), methods.end(), pinn::Mode::imageflow))
        throw ConfigError("pulsed acquisitions are evaluated with SinoFlow only");
    network.validate();
    train.validate();
    double const Re = flowgen::FlowParams::from_dimensional(u_c, H, nu, omega).Re;
    if (std::abs(train.Re - Re) > 1e-3 * Re)
        throw ConfigError(fmt::format("training Re {} does not match the flow (Re = {})", train.Re, Re));
}

namespace {

json scanner_json(ctsim::FanBeamGeometry const& g)
{
    return {{"fan_angle_deg", g.fan_angle_deg},
            {"n_channels", g.n_channels},
            {"subrays_per_channel", g.subrays_per_channel},
            {"views_per_rotation", g.views_per_rotation},
            {"fov", g.fov},
            {"source_to_iso", g.source_to_iso}};
}

json train_json(pinn::TrainConfig const& t)
{
    return {{"mode", pinn::mode_name(t.mode)},
            {"iterations", t.iterations},
            {"learning_rate", t.learning_rate},
            {"lambda0", t.lambda0},
            {"lambda1", t.lambda1},
            {"n_p", t.n_p},
            {"Re", t.Re},
            {"n_phys", t.n_phys},
            {"n_data", t.n_data},
            {"n_rays", t.n_rays},
            {"seed", t.seed},
            {"history_every", t.history_every},
            {"checkpoint_every", t.checkpoint_every},
            {"sino_unit", t.sino_unit},
            {"single_precision", t.single_precision}};
}

template <class T>
void get_if(json const& j, char const* key, T& out)
{
    if (j.contains(key))
        out = j.at(key).get<T>();
}

} // namespace

json ExperimentConfig::to_json() const
{
    json pulses_j = json::array();
    for (auto const& p : pulses)
        pulses_j.push_back({{"width", p.width}, {"duty", p.duty}});
    json methods_j = json::array();
    for (auto m : methods)
        methods_j.push_back(pinn::mode_name(m));
    return {
        {"kind", kind_name(kind)},
        {"vessel", vessel},
        {"H", H},
        {"u_c", u_c},
        {"nu", nu},
        {"omega", omega},
        {"pulsatile_fraction", pulsatile_fraction},
        {"beta", beta},
        {"truth_path", truth_path},
        {"truth_frames", truth_frames},
        {"truth_cycles", truth_cycles},
        {"grid_n", grid_n},
        {"fov", fov},
        {"scanner", scanner_json(scanner)},
        {"acquisition_seconds", acquisition_seconds},
        {"t_start", t_start},
        {"delta_mu", delta_mu},
        {"base_grs", base_grs},
        {"base_cnr", base_cnr},
        {"grs", grs},
        {"theta0", theta0},
        {"cnr", cnr},
        {"pulses", pulses_j},
        {"methods", methods_j},
        {"network", {{"hidden_layers", network.hidden_layers}, {"width", network.width}, {"seed", network.seed}}},
        {"train", train_json(train)},
        {"output_dir", output_dir},
        {"seed", seed},
        {"cnr_table", cnr_table},
    };
}

ExperimentConfig ExperimentConfig::from_json(json const& j)
{
    ExperimentConfig c = desk();
    try
    {
        if (j.contains("kind"))
            c.kind = kind_from_name(j.at("kind").get<std::string>());
        get_if(j, "vessel", c.vessel);
        get_if(j, "H", c.H);
        get_if(j, "u_c", c.u_c);
        get_if(j, "nu", c.nu);
        get_if(j, "omega", c.omega);
        get_if(j, "pulsatile_fraction", c.pulsatile_fraction);
        get_if(j, "beta", c.beta);
        get_if(j, "truth_path", c.truth_path);
        get_if(j, "truth_frames", c.truth_frames);
        get_if(j, "truth_cycles", c.truth_cycles);
        get_if(j, "grid_n", c.grid_n);
        get_if(j, "fov", c.fov);
        c.scanner.fov = c.fov;
        if (j.contains("scanner"))
        {
            auto const& s = j.at("scanner");
            get_if(s, "fan_angle_deg", c.scanner.fan_angle_deg);
            get_if(s, "n_channels", c.scanner.n_channels);
            get_if(s, "subrays_per_channel", c.scanner.subrays_per_channel);
            get_if(s, "views_per_rotation", c.scanner.views_per_rotation);
            get_if(s, "fov", c.scanner.fov);
            get_if(s, "source_to_iso", c.scanner.source_to_iso);
        }
        get_if(j, "acquisition_seconds", c.acquisition_seconds);
        get_if(j, "t_start", c.t_start);
        get_if(j, "delta_mu", c.delta_mu);
        get_if(j, "base_grs", c.base_grs);
        get_if(j, "base_cnr", c.base_cnr);
        get_if(j, "grs", c.grs);
        get_if(j, "theta0", c.theta0);
        get_if(j, "cnr", c.cnr);
        if (j.contains("pulses"))
        {
            c.pulses.clear();
            for (auto const& p : j.at("pulses"))
                c.pulses.push_back({p.at("width").get<int>(), p.at("duty").get<double>()});
        }
        if (j.contains("methods"))
        {
            c.methods.clear();
            for (auto const& m : j.at("methods"))
                c.methods.push_back(pinn::mode_from_name(m.get<std::string>()));
        }
        if (j.contains("network"))
        {
            auto const& n = j.at("network");
            get_if(n, "hidden_layers", c.network.hidden_layers);
            get_if(n, "width", c.network.width);
            get_if(n, "seed", c.network.seed);
        }
        if (j.contains("train"))
        {
            auto const& t = j.at("train");
            if (t.contains("mode"))
                c.train.mode = pinn::mode_from_name(t.at("mode").get<std::string>());
            get_if(t, "iterations", c.train.iterations);
            get_if(t, "learning_rate", c.train.learning_rate);
            get_if(t, "lambda0", c.train.lambda0);
            get_if(t, "lambda1", c.train.lambda1);
            get_if(t, "n_p", c.train.n_p);
            get_if(t, "Re", c.train.Re);
            get_if(t, "n_phys", c.train.n_phys);
            get_if(t, "n_data", c.train.n_data);
            get_if(t, "n_rays", c.train.n_rays);
            get_if(t, "seed", c.train.seed);
            get_if(t, "history_every", c.train.history_every);
            get_if(t, "checkpoint_every", c.train.checkpoint_every);
            get_if(t, "sino_unit", c.train.sino_unit);
            get_if(t, "single_precision", c.train.single_precision);
        }
        get_if(j, "output_dir", c.output_dir);
        get_if(j, "seed", c.seed);
        get_if(j, "cnr_table", c.cnr_table);
    }
    catch (json::exception const& e)
    {
        throw ConfigError(fmt::format("malformed experiment config: {}", e.what()));
    }
    return c;
}

std::string ExperimentConfig::hash() const
{
    // The output location does not change any result.
    json j = to_json();
    j.erase("output_dir");
    return store::sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Cells

json Cell::to_json(ExperimentConfig const& config) const
{
    json j = config.to_json();
    for (char const* key : {"output_dir", "grs", "theta0", "cnr", "pulses", "methods", "kind"})
        j.erase(key);
    j["cell"] = {{"grs", grs},
                 {"theta0", theta0},
                 {"cnr", cnr},
                 {"pulse_width", pulse.width},
                 {"duty", pulse.duty},
                 {"method", pinn::mode_name(method)}};
    return j;
}

std::vector<Cell> enumerate_cells(ExperimentConfig const& config)
{
    struct Condition
    {
        double grs, cnr;
        PulseSetting pulse;
    };
    std::vector<Condition> conds;
    PulseSetting const continuous{0, 1.0};
    switch (config.kind)
    {
    case ExperimentKind::grs_sweep:
        for (double g : config.grs)
            conds.push_back({g, config.base_cnr, continuous});
        break;
    case ExperimentKind::noise_sweep:
        for (double c : config.cnr)
            conds.push_back({config.base_grs, c, continuous});
        break;
    case ExperimentKind::pulse_sweep:
        for (auto const& p : config.pulses)
            conds.push_back({config.base_grs, config.base_cnr, p});
        break;
    case ExperimentKind::single_run:
        conds.push_back({config.grs.front(), config.base_cnr,
                         config.pulses.empty() ? continuous : config.pulses.front()});
        break;
    }
    std::vector<Cell> cells;
    for (std::size_t k = 0; k < conds.size(); ++k)
        for (std::size_t a = 0; a < config.theta0.size(); ++a)
            for (auto m : config.methods)
            {
                Cell c;
                c.condition = static_cast<int>(k);
                c.angle = static_cast<int>(a);
                c.method = m;
                c.grs = conds[k].grs;
                c.theta0 = config.theta0[a];
                c.cnr = conds[k].cnr;
                c.pulse = conds[k].pulse;
                cells.push_back(c);
            }
    return cells;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

double get_double(json const& j, char const* key)
{
    auto const& v = store::require(j, key);
    if (v.is_null())
        return std::nan("");
    return v.get<double>();
}

json number(double v)
{
    return std::isfinite(v) ? json(v) : json(nullptr);
}

} // namespace

json MetricsRecord::to_json() const
{
    return {{"cell_hash", cell_hash},
            {"config_hash", config_hash},
            {"grs", grs},
            {"theta0", theta0},
            {"cnr", cnr},
            {"I0", I0},
            {"duty", duty},
            {"pulse_width", pulse_width},
            {"method", method},
            {"conc_rmse", number(conc_rmse)},
            {"vel_rmse", number(vel_rmse)},
            {"vel_range_err", number(vel_range_err)},
            {"high_vel_err", number(high_vel_err)},
            {"low_vel_err", number(low_vel_err)},
            {"outlet_ratio", number(outlet_ratio)},
            {"series_path", series_path}};
}

MetricsRecord MetricsRecord::from_json(json const& j)
{
    MetricsRecord r;
    try
    {
        r.cell_hash = store::require(j, "cell_hash").get<std::string>();
        r.config_hash = store::require(j, "config_hash").get<std::string>();
        r.grs = get_double(j, "grs");
        r.theta0 = get_double(j, "theta0");
        r.cnr = get_double(j, "cnr");
        r.I0 = get_double(j, "I0");
        r.duty = get_double(j, "duty");
        r.pulse_width = store::require(j, "pulse_width").get<int>();
        r.method = store::require(j, "method").get<std::string>();
        r.conc_rmse = get_double(j, "conc_rmse");
        r.vel_rmse = get_double(j, "vel_rmse");
        r.vel_range_err = get_double(j, "vel_range_err");
        r.high_vel_err = get_double(j, "high_vel_err");
        r.low_vel_err = get_double(j, "low_vel_err");
        r.outlet_ratio = get_double(j, "outlet_ratio");
        r.series_path = store::require(j, "series_path").get<std::string>();
    }
    catch (json::exception const& e)
    {
        throw FormatError(fmt::format("malformed metrics record: {}", e.what()));
    }
    return r;
}

namespace {

/// Field values at world points and one nondimensional time.
std::vector<pinn::FieldValues> sample_source(FieldSource const& source, double t,
                                             std::vector<std::array<double, 2>> const& xy,
                                             Nondim const& scale, bool need_velocity)
{
    std::vector<pinn::FieldValues> out(xy.size());
    if (auto const* m = std::get_if<FieldMovie const*>(&source))
    {
        FieldMovie const& movie = **m;
        if (need_velocity && (!movie.has(Field::u) || !movie.has(Field::v)))
            throw ConfigError("field movie carries no velocity");
        double const span = movie.times.back() - movie.times.front();
        double const tol = 1e-9 * std::max(1.0, span);
        if (t < movie.times.front() - tol || t > movie.times.back() + tol)
            throw DomainError(fmt::format("time {} lies outside the movie", t));
        GridSpec const& g = movie.grid;
        for (std::size_t i = 0; i < xy.size(); ++i)
        {
            double const x = xy[i][0], y = xy[i][1];
            if (x < g.x_min || x > g.x_max() || y < g.y_min || y > g.y_max())
                throw DomainError(fmt::format("point ({}, {}) cm lies outside the movie grid", x, y));
            if (need_velocity)
            {
                out[i].u = movie.sample(Field::u, t, x, y);
                out[i].v = movie.sample(Field::v, t, x, y);
            }
            else
            {
                out[i].c = movie.sample(Field::c, t, x, y);
            }
        }
        return out;
    }
    auto const& net = *std::get<pinn::FieldNetwork const*>(source);
    std::vector<pinn::Point> pts(xy.size());
    for (std::size_t i = 0; i < xy.size(); ++i)
        pts[i] = {t, scale.to_x(xy[i][0]), scale.to_y(xy[i][1])};
    return net.evaluate(pts);
}

double mean(std::vector<double> const& v)
{
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_variance(std::vector<double> const& v)
{
    double const m = mean(v);
    double s = 0.0;
    for (double x : v)
        s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

} // namespace

std::vector<double> velocity_timeseries(FieldSource const& source, geometry::CrossSection const& section,
                                        std::vector<double> const& times, Nondim const& scale)
{
    if (section.samples.empty())
        throw DomainError(fmt::format("section '{}' has no samples", section.name));
    std::vector<std::array<double, 2>> xy;
    for (auto const& s : section.samples)
        xy.push_back({s.x, s.y});
    std::vector<double> series;
    series.reserve(times.size());
    for (double t : times)
    {
        auto const f = sample_source(source, t, xy, scale, true);
        double sum = 0.0;
        for (auto const& v : f)
            sum += v.u * section.normal_x + v.v * section.normal_y;
        series.push_back(scale.velocity_mps(sum / static_cast<double>(f.size())));
    }
    return series;
}

DecileErrors decile_errors(std::vector<double> const& pred, std::vector<double> const& truth)
{
    if (pred.size() != truth.size())
        throw ConfigError("decile_errors: series lengths differ");
    if (pred.size() < 10)
        throw ConfigError("decile_errors: need at least 10 samples");
    std::size_t const k = pred.size() / 10;
    auto tails = [k](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        double lo = 0.0, hi = 0.0;
        for (std::size_t i = 0; i < k; ++i)
        {
            lo += v[i];
            hi += v[v.size() - 1 - i];
        }
        return std::array<double, 2>{lo / k, hi / k};
    };
    auto const p = tails(pred);
    auto const t = tails(truth);
    DecileErrors e;
    e.high_err = std::abs(p[1] - t[1]);
    e.low_err = std::abs(p[0] - t[0]);
    e.range_err = std::abs((p[1] - p[0]) - (t[1] - t[0]));
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    e.rmse = std::sqrt(s / pred.size());
    return e;
}

double outlet_ratio(FieldSource const& source, geometry::CrossSection const& upper,
                    geometry::CrossSection const& lower, std::vector<double> const& times,
                    Nondim const& scale)
{
    if (times.empty())
        throw ConfigError("outlet_ratio: no times");
    double const qu = mean(velocity_timeseries(source, upper, times, scale)) * upper.length();
    double const ql = mean(velocity_timeseries(source, lower, times, scale)) * lower.length();
    if (std::abs(ql) < 1e-12)
        throw DomainError("outlet_ratio: the lower outlet carries no flow");
    return qu / ql;
}

double concentration_rmse(FieldSource const& source, FieldMovie const& truth,
                          std::vector<std::uint8_t> const& roi, std::vector<int> const& frames)
{
    GridSpec const& g = truth.grid;
    if (roi.size() != g.size())
        throw ConfigError("concentration_rmse: ROI does not match the truth grid");
    if (frames.empty())
        throw ConfigError("concentration_rmse: no frames");
    std::vector<std::array<double, 2>> xy;
    std::vector<std::size_t> idx;
    for (int r = 0; r < g.ny; ++r)
        for (int c = 0; c < g.nx; ++c)
            if (roi[g.index(r, c)])
            {
                xy.push_back({g.x_center(c), g.y_center(r)});
                idx.push_back(g.index(r, c));
            }
    if (idx.empty())
        throw ConfigError("concentration_rmse: empty ROI");
    double se = 0.0;
    for (int k : frames)
    {
        double const t = truth.times[k];
        std::vector<pinn::FieldValues> f;
        if (auto const* m = std::get_if<FieldMovie const*>(&source))
        {
            // Reconstructions are compared frame by frame (nearest in time).
            FieldMovie const& movie = **m;
            int const km = movie.nearest_frame(t);
            f.resize(xy.size());
            for (std::size_t i = 0; i < xy.size(); ++i)
                f[i].c = bilinear_sample(movie.frame(Field::c, km), movie.grid.nx, movie.grid.ny,
                                         movie.grid.col_coord(xy[i][0]), movie.grid.row_coord(xy[i][1]));
        }
        else
        {
            f = sample_source(source, t, xy, truth.scale, false);
        }
        float const* c = truth.frame(Field::c, k);
        for (std::size_t i = 0; i < idx.size(); ++i)
        {
            double const d = f[i].c - c[idx[i]];
            se += d * d;
        }
    }
    return std::sqrt(se / (static_cast<double>(idx.size()) * frames.size()));
}

double strouhal_threshold(StrouhalInputs const& in)
{
    if (!(in.St_flow > 0.0) || !(in.omega_flow > 0.0) || !(in.L_c_over_H > 0.0) || !(in.H > 0.0)
        || !(in.u > 0.0))
        throw ConfigError("strouhal_threshold: inputs must be positive");
    // omega_gantry / omega_flow = (2 pi / St) (H / L_c), reported in Hz.
    double const omega_gantry = in.omega_flow * (2.0 * kPi / in.St_flow) / in.L_c_over_H;
    return omega_gantry / (2.0 * kPi);
}

// ---------------------------------------------------------------------------
// Statistics

PairedTTest paired_ttest_bonferroni(std::vector<double> const& a, std::vector<double> const& b,
                                    int n_comparisons)
{
    if (a.size() != b.size())
        throw ConfigError("paired t-test: samples differ in length");
    if (a.size() < 2)
        throw ConfigError("paired t-test: need at least two pairs");
    if (n_comparisons < 1)
        throw ConfigError("paired t-test: n_comparisons must be positive");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        d[i] = a[i] - b[i];
    double const n = static_cast<double>(d.size());
    double const m = mean(d);
    double const sd = std::sqrt(sample_variance(d));
    PairedTTest r;
    if (!(sd > 0.0))
    {
        r.degenerate = true;
        if (m == 0.0)
        {
            r.t = 0.0;
            r.p_raw = 1.0;
        }
        else
        {
            r.t = std::copysign(std::numeric_limits<double>::infinity(), m);
            r.p_raw = 0.0;
        }
    }
    else
    {
        r.t = m / (sd / std::sqrt(n));
        boost::math::students_t dist(n - 1.0);
        r.p_raw = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    }
    r.p_adjusted = std::min(1.0, r.p_raw * n_comparisons);
    r.significant = r.p_adjusted < 0.05;
    return r;
}

WelchTTest welch_ttest(std::vector<double> const& a, std::vector<double> const& b)
{
    if (a.size() < 2 || b.size() < 2)
        throw ConfigError("Welch t-test: each group needs at least two values");
    double const na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    double const va = sample_variance(a) / na, vb = sample_variance(b) / nb;
    double const diff = mean(a) - mean(b);
    WelchTTest r;
    if (!(va + vb > 0.0))
    {
        r.t = diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
        r.p = diff == 0.0 ? 1.0 : 0.0;
        r.dof = na + nb - 2.0;
        return r;
    }
    r.t = diff / std::sqrt(va + vb);
    r.dof = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    boost::math::students_t dist(r.dof);
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
    return r;
}

// ---------------------------------------------------------------------------
// CNR calibration

CnrCalibration::CnrCalibration(std::vector<std::array<double, 2>> rows) : rows_(std::move(rows))
{
    std::sort(rows_.begin(), rows_.end());
    if (rows_.size() < 2)
        throw ConfigError("CNR calibration needs at least two rows");
    for (std::size_t i = 0; i < rows_.size(); ++i)
    {
        if (!(rows_[i][0] > 0.0) || !(rows_[i][1] > 0.0))
            throw ConfigError("CNR calibration values must be positive");
        if (i > 0 && !(rows_[i][1] > rows_[i - 1][1]))
            throw ConfigError("CNR calibration must increase with I0");
    }
}

CnrCalibration CnrCalibration::load(std::string const& csv_path)
{
    std::ifstream in(csv_path);
    if (!in)
        throw ConfigError(fmt::format("cannot read CNR table '{}'", csv_path));
    std::string line;
    std::vector<std::array<double, 2>> rows;
    bool header = true;
    while (std::getline(in, line))
    {
        if (line.empty() || line[0] == '#')
            continue;
        if (header)
        {
            header = false;
            if (line.rfind("I0", 0) == 0)
                continue;
        }
        std::istringstream ss(line);
        std::string a, b;
        if (!std::getline(ss, a, ',') || !std::getline(ss, b, ','))
            throw FormatError(fmt::format("bad CNR table line '{}'", line));
        try
        {
            rows.push_back({std::stod(a), std::stod(b)});
        }
        catch (std::exception const&)
        {
            throw FormatError(fmt::format("bad CNR table line '{}'", line));
        }
    }
    return CnrCalibration(rows);
}

void CnrCalibration::save(std::string const& csv_path) const
{
    std::ofstream out(csv_path);
    if (!out)
        throw Error(fmt::format("cannot write '{}'", csv_path));
    out << "I0,cnr\n";
    for (auto const& r : rows_)
        out << fmt::format("{:.6g},{:.6g}\n", r[0], r[1]);
}

double CnrCalibration::I0_for(double cnr) const
{
    if (rows_.empty())
        throw ConfigError("CNR calibration is empty");
    if (cnr < rows_.front()[1] || cnr > rows_.back()[1])
        throw DomainError(fmt::format("CNR {} lies outside the calibrated range [{}, {}]", cnr,
                                      rows_.front()[1], rows_.back()[1]));
    for (std::size_t i = 1; i < rows_.size(); ++i)
    {
        if (cnr > rows_[i][1])
            continue;
        double const x0 = std::log(rows_[i - 1][1]), x1 = std::log(rows_[i][1]);
        double const y0 = std::log(rows_[i - 1][0]), y1 = std::log(rows_[i][0]);
        double const w = (std::log(cnr) - x0) / (x1 - x0);
        return std::exp(y0 + w * (y1 - y0));
    }
    return rows_.back()[0];
}

namespace {

geometry::VesselGeometry make_vessel(ExperimentConfig const& config)
{
    return config.vessel == "channel" ? geometry::VesselGeometry::channel(config.H)
                                      : geometry::VesselGeometry::bifurcation(config.H);
}

flowgen::FlowParams make_flow(ExperimentConfig const& config)
{
    return flowgen::FlowParams::from_dimensional(config.u_c, config.H, config.nu, config.omega,
                                                 config.pulsatile_fraction, config.beta);
}

int rotations(double grs, double seconds)
{
    return static_cast<int>(std::lround(grs * seconds));
}

/// Pixels within `radius` pixels of a set pixel (square neighbourhood).
std::vector<std::uint8_t> dilate(GridSpec const& g, std::vector<std::uint8_t> const& m, int radius)
{
    std::vector<std::uint8_t> out(m.size(), 0);
    for (int r = 0; r < g.ny; ++r)
        for (int c = 0; c < g.nx; ++c)
        {
            if (!m[g.index(r, c)])
                continue;
            for (int dr = -radius; dr <= radius; ++dr)
                for (int dc = -radius; dc <= radius; ++dc)
                {
                    int const rr = r + dr, cc = c + dc;
                    if (rr >= 0 && cc >= 0 && rr < g.ny && cc < g.nx)
                        out[g.index(rr, cc)] = 1;
                }
        }
    return out;
}

} // namespace

CnrCalibration calibrate_cnr(ExperimentConfig const& config, std::vector<double> const& I0s)
{
    auto const vessel = make_vessel(config);
    GridSpec const grid = GridSpec::centered(config.grid_n, config.fov);
    auto const mask = geometry::build_bifurcation_mask(vessel, grid);

    // Static full-contrast lumen.
    FieldMovie movie;
    movie.grid = grid;
    movie.scale = make_flow(config).nondim();
    double const rotation = 1.0 / config.base_grs;
    movie.times = {movie.scale.to_t(config.t_start), movie.scale.to_t(config.t_start + rotation)};
    movie.window = {movie.times.front(), movie.times.back()};
    movie.allocate({Field::c});
    for (int k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < grid.size(); ++i)
            movie.frame(Field::c, k)[i] = mask.lumen[i] ? 1.0f : 0.0f;

    // Lumen core (2 px from the wall) against a background band 3 to 15 px away.
    std::vector<std::uint8_t> not_lumen(grid.size()), core(grid.size()), background(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i)
        not_lumen[i] = !mask.lumen[i];
    auto const near_wall = dilate(grid, not_lumen, 2);
    auto const near = dilate(grid, mask.lumen, 3);
    auto const band = dilate(grid, mask.lumen, 15);
    double x0 = grid.x_max(), y0 = grid.y_max(), x1 = grid.x_min, y1 = grid.y_min;
    for (int r = 0; r < grid.ny; ++r)
        for (int c = 0; c < grid.nx; ++c)
        {
            std::size_t const i = grid.index(r, c);
            core[i] = mask.lumen[i] && !near_wall[i];
            background[i] = band[i] && !near[i];
            if (band[i])
            {
                x0 = std::min(x0, grid.x_center(c));
                x1 = std::max(x1, grid.x_center(c));
                y0 = std::min(y0, grid.y_center(r));
                y1 = std::max(y1, grid.y_center(r));
            }
        }

    recon::ReconConfig rc;
    rc.grid = grid;
    rc.region = std::array<double, 4>{x0, y0, x1, y1};
    std::vector<std::array<double, 2>> rows;
    for (std::size_t n = 0; n < I0s.size(); ++n)
    {
        ctsim::ScanProtocol p;
        p.grs = config.base_grs;
        p.t_start = config.t_start;
        p.n_rotations = 1;
        p.I0 = I0s[n];
        p.delta_mu = config.delta_mu;
        p.noise_enabled = true;
        p.seed = config.seed + 7919 * (n + 1);
        auto const sino = ctsim::simulate_scan(movie, config.scanner, p);
        auto const img = recon::fbp_reconstruct_frame(sino, 0, rc);
        rows.push_back({I0s[n], ctsim::estimate_cnr(img, core, background)});
    }
    return CnrCalibration(rows);
}

// ---------------------------------------------------------------------------
// Sweeps

Scene build_scene(ExperimentConfig const& config)
{
    Scene s;
    s.vessel = make_vessel(config);
    if (config.truth_path.empty())
    {
        flowgen::ChannelCaseOptions opt;
        opt.nt = config.truth_frames;
        opt.n_cycles = config.truth_cycles;
        s.truth = flowgen::synthesize_channel_case(make_flow(config), s.vessel,
                                                   GridSpec::centered(config.grid_n, config.fov), opt);
    }
    else
    {
        s.truth = flowgen::load_field_movie(config.truth_path);
    }
    s.mask = geometry::build_bifurcation_mask(s.vessel, s.truth.grid);
    s.sections = geometry::locate_cross_sections(s.vessel, s.mask);
    return s;
}

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::string const& tag)
{
    return std::stoull(store::sha256_hex(fmt::format("{}:{}", base, tag)).substr(0, 16), nullptr, 16);
}

/// Adds the config hash to the files written by the training module.
void stamp_outputs(std::string const& cell_dir, std::string const& config_hash)
{
    fs::path const meta = fs::path(cell_dir) / "checkpoint" / "meta.json";
    json j = store::read_json(meta);
    j["config_hash"] = config_hash;
    store::write_json(meta, j);

    fs::path const history = fs::path(cell_dir) / "history.csv";
    std::ifstream in(history);
    std::string const body((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(history);
    out << "# config " << config_hash << "\n" << body;
}

} // namespace

ctsim::ScanProtocol scan_protocol(ExperimentConfig const& config, Cell const& cell)
{
    // The scan is shared by both methods of a condition so comparisons are paired.
    json key = cell.to_json(config);
    key["cell"].erase("method");

    ctsim::ScanProtocol p;
    p.grs = cell.grs;
    p.theta0_deg = cell.theta0;
    p.t_start = config.t_start;
    p.n_rotations = rotations(cell.grs, config.acquisition_seconds);
    p.delta_mu = config.delta_mu;
    p.pulse_width = cell.pulse.width;
    p.duty_cycle = cell.pulse.duty;
    p.seed = derive_seed(config.seed, "scan" + key.dump());
    if (cell.cnr > 0.0)
    {
        p.noise_enabled = true;
        p.I0 = CnrCalibration::load(config.cnr_table).I0_for(cell.cnr);
    }
    return p;
}

pinn::TrainingData training_data(Scene const& scene, ctsim::Sinogram const& sino,
                                 flowgen::FieldMovie const* ct)
{
    auto const& p = sino.protocol;
    pinn::TrainingData data;
    data.grid = scene.truth.grid;
    data.scale = scene.truth.scale;
    data.roi = scene.mask.roi;
    data.window = {scene.truth.scale.to_t(p.t_start),
                   scene.truth.scale.to_t(p.t_start + p.n_rotations / p.grs)};
    data.sinogram = &sino;
    data.ct = ct;
    return data;
}

MetricsRecord evaluate_source(Scene const& scene, FieldSource const& source,
                              std::array<double, 2> const& window, EvaluationSeries* series)
{
    FieldMovie const& truth = scene.truth;
    std::vector<int> frames;
    std::vector<double> times;
    for (int k = 0; k < truth.nt(); ++k)
    {
        double const t = truth.times[k];
        if (t >= window[0] && t <= window[1])
        {
            frames.push_back(k);
            times.push_back(t);
        }
    }
    if (frames.empty())
        throw ConfigError("no ground-truth frame lies inside the evaluation window");
    MetricsRecord rec;
    rec.conc_rmse = concentration_rmse(source, truth, scene.mask.roi, frames);
    if (auto const* m = std::get_if<FieldMovie const*>(&source); m && !(*m)->has(Field::u))
    {
        // Reconstructed images carry concentration only.
        double const nan = std::nan("");
        rec.vel_rmse = rec.vel_range_err = rec.high_vel_err = rec.low_vel_err = rec.outlet_ratio = nan;
        return rec;
    }
    auto const truth_series = velocity_timeseries(&truth, scene.sections[0], times, truth.scale);
    auto const pred_series = velocity_timeseries(source, scene.sections[0], times, truth.scale);
    auto const err = decile_errors(pred_series, truth_series);
    rec.vel_rmse = err.rmse;
    rec.vel_range_err = err.range_err;
    rec.high_vel_err = err.high_err;
    rec.low_vel_err = err.low_err;
    try
    {
        rec.outlet_ratio = outlet_ratio(source, scene.sections[1], scene.sections[2], times, truth.scale);
    }
    catch (DomainError const&)
    {
        rec.outlet_ratio = std::nan("");
    }
    if (series)
    {
        series->seconds.clear();
        for (double t : times)
            series->seconds.push_back(truth.scale.to_seconds(t));
        series->truth = truth_series;
        series->pred = pred_series;
    }
    return rec;
}

void write_series_csv(EvaluationSeries const& s, std::string const& path, std::string const& config_hash)
{
    std::ofstream out(path);
    if (!out)
        throw Error(fmt::format("cannot write '{}'", path));
    out << "# config " << config_hash << "\n";
    out << "t_s,truth_mps,pred_mps\n";
    for (std::size_t i = 0; i < s.seconds.size(); ++i)
        out << fmt::format("{:.10g},{:.10g},{:.10g}\n", s.seconds[i], s.truth[i], s.pred[i]);
}

MetricsRecord run_cell(ExperimentConfig const& config, Scene const& scene, Cell const& cell,
                       std::string const& cell_dir)
{
    fs::create_directories(cell_dir);
    FieldMovie const& truth = scene.truth;
    std::string const config_hash = config.hash();
    json const cell_json = cell.to_json(config);
    std::string const cell_hash = store::sha256_hex(cell_json.dump());
    json scan_key = cell_json;
    scan_key["cell"].erase("method");
    std::string const scan_tag = scan_key.dump();

    auto const p = scan_protocol(config, cell);
    auto const sino = ctsim::simulate_scan(truth, config.scanner, p);
    FieldMovie ct;
    if (cell.method == pinn::Mode::imageflow)
    {
        recon::ReconConfig rc;
        rc.grid = truth.grid;
        rc.region = scene.mask.roi_bounds();
        ct = recon::reconstruct_movie(sino, rc);
    }
    auto const data = training_data(scene, sino, cell.method == pinn::Mode::imageflow ? &ct : nullptr);

    pinn::NetworkConfig net_cfg = config.network;
    net_cfg.seed = derive_seed(config.network.seed, "net" + scan_tag);
    pinn::FieldNetwork net(net_cfg, data.normalization());
    pinn::TrainConfig tc = config.train;
    tc.mode = cell.method;
    tc.seed = derive_seed(config.train.seed, "train" + scan_tag);
    tc.checkpoint_dir = (fs::path(cell_dir) / "checkpoint").string();
    auto const trained = pinn::train(net, data, tc);
    pinn::save_checkpoint(net, tc, trained.iterations, tc.checkpoint_dir);
    pinn::write_history_csv(trained.history, (fs::path(cell_dir) / "history.csv").string());
    stamp_outputs(cell_dir, config_hash);

    EvaluationSeries series;
    MetricsRecord rec = evaluate_source(scene, &net, data.window, &series);
    rec.cell_hash = cell_hash;
    rec.config_hash = config_hash;
    rec.grs = cell.grs;
    rec.theta0 = cell.theta0;
    rec.cnr = cell.cnr;
    rec.I0 = p.noise_enabled ? p.I0 : 0.0;
    rec.duty = cell.pulse.duty;
    rec.pulse_width = cell.pulse.width;
    rec.method = pinn::mode_name(cell.method);
    rec.series_path = "inlet_series.csv";
    write_series_csv(series, (fs::path(cell_dir) / rec.series_path).string(), config_hash);
    store::write_json(fs::path(cell_dir) / "cell.json",
                      {{"config_hash", config_hash}, {"cell_hash", cell_hash}, {"cell", cell_json}});
    store::write_json(fs::path(cell_dir) / "metrics.json", rec.to_json());
    return rec;
}

std::vector<MetricsRecord> SweepResult::records() const
{
    std::vector<MetricsRecord> out;
    for (auto const& c : cells)
        if (c.record)
            out.push_back(*c.record);
    return out;
}

int SweepResult::failures() const
{
    return static_cast<int>(std::count_if(cells.begin(), cells.end(), [](auto const& c) { return !c.record; }));
}

SweepResult run_sweep(ExperimentConfig const& config)
{
    config.validate();
    if (config.output_dir.empty())
        throw ConfigError("sweep needs an output directory");
    fs::path const root(config.output_dir);
    fs::create_directories(root / "cells");
    json cfg = config.to_json();
    cfg["config_hash"] = config.hash();
    store::write_json(root / "config.json", cfg);

    std::optional<Scene> scene;
    SweepResult result;
    for (auto const& cell : enumerate_cells(config))
    {
        CellOutcome out;
        out.cell = cell;
        out.hash = store::sha256_hex(cell.to_json(config).dump());
        fs::path const dir = root / "cells" / out.hash.substr(0, 16);
        fs::path const done = dir / "metrics.json";
        if (fs::exists(done))
        {
            try
            {
                auto rec = MetricsRecord::from_json(store::read_json(done));
                if (rec.cell_hash == out.hash)
                {
                    out.record = rec;
                    out.resumed = true;
                    result.cells.push_back(out);
                    continue;
                }
            }
            catch (Error const&)
            {
                // Unreadable result: recompute the cell.
            }
        }
        try
        {
            if (!scene)
                scene = build_scene(config);
            out.record = run_cell(config, *scene, cell, dir.string());
        }
        catch (std::exception const& e)
        {
            out.error = e.what();
            fs::create_directories(dir);
            store::write_json(dir / "error.json", {{"cell_hash", out.hash}, {"error", out.error}});
        }
        result.cells.push_back(out);
    }
    write_records_csv(result.records(), (root / "metrics.csv").string());
    return result;
}

// ---------------------------------------------------------------------------
// Tables and plots

namespace {

struct MetricColumn
{
    char const* name;
    double MetricsRecord::*field;
    char const* unit;
};

constexpr MetricColumn kMetrics[] = {
    {"conc_rmse", &MetricsRecord::conc_rmse, ""},
    {"vel_rmse", &MetricsRecord::vel_rmse, "m/s"},
    {"vel_range_err", &MetricsRecord::vel_range_err, "m/s"},
    {"high_vel_err", &MetricsRecord::high_vel_err, "m/s"},
    {"low_vel_err", &MetricsRecord::low_vel_err, "m/s"},
    {"outlet_ratio", &MetricsRecord::outlet_ratio, ""},
};

std::string fmt_num(double v)
{
    return std::isfinite(v) ? fmt::format("{:.17g}", v) : std::string("nan");
}

double parse_num(std::string const& s)
{
    if (s == "nan")
        return std::nan("");
    return std::stod(s);
}

std::vector<std::string> split_csv(std::string const& line)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, ','))
        out.push_back(cur);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

/// Label built from the condition fields that vary across records.
std::string condition_label(MetricsRecord const& r, std::vector<MetricsRecord> const& all)
{
    auto varies = [&](auto get) {
        return std::any_of(all.begin(), all.end(), [&](auto const& o) { return get(o) != get(all.front()); });
    };
    std::vector<std::string> parts;
    if (varies([](auto const& o) { return o.grs; }))
        parts.push_back(fmt::format("{:g} Hz", r.grs));
    if (varies([](auto const& o) { return o.cnr; }))
        parts.push_back(fmt::format("CNR {:g}", r.cnr));
    if (varies([](auto const& o) { return o.duty; }))
        parts.push_back(fmt::format("{:g}%", 100 * r.duty));
    if (varies([](auto const& o) { return o.pulse_width; }))
        parts.push_back(fmt::format("{} views", r.pulse_width));
    if (parts.empty())
        return "all";
    std::string s = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i)
        s += ", " + parts[i];
    return s;
}

double quantile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    double const pos = q * (v.size() - 1);
    std::size_t const i = static_cast<std::size_t>(pos);
    if (i + 1 >= v.size())
        return v.back();
    return v[i] + (pos - i) * (v[i + 1] - v[i]);
}

std::string svg_escape(std::string const& s)
{
    std::string out;
    for (char c : s)
    {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

void write_boxplot(std::string const& path, MetricColumn const& metric,
                   std::vector<std::pair<std::string, std::vector<double>>> const& groups,
                   std::string const& hash)
{
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (auto const& g : groups)
        for (double v : g.second)
        {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi <= lo)
    {
        hi = lo + 1.0;
        lo -= 1.0;
    }
    double const pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    int const W = std::max(360, 90 * static_cast<int>(groups.size()) + 100);
    int const Ht = 360, left = 70, top = 30, plot_h = 250;
    auto ypix = [&](double v) { return top + plot_h * (hi - v) / (hi - lo); };

    std::ofstream out(path);
    out << fmt::format("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n", W, Ht);
    out << fmt::format("<desc>config {}</desc>\n", hash);
    out << fmt::format("<text x=\"{}\" y=\"18\" font-size=\"14\" text-anchor=\"middle\">{}{}</text>\n", W / 2,
                       metric.name, *metric.unit ? fmt::format(" [{}]", metric.unit) : "");
    out << fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left, top,
                       top + plot_h);
    for (int k = 0; k <= 4; ++k)
    {
        double const v = lo + (hi - lo) * k / 4.0;
        out << fmt::format("<text x=\"{}\" y=\"{:.1f}\" font-size=\"10\" text-anchor=\"end\">{:.3g}</text>\n",
                           left - 4, ypix(v) + 3, v);
    }
    for (std::size_t g = 0; g < groups.size(); ++g)
    {
        auto const& vals = groups[g].second;
        double const cx = left + 50 + 90.0 * g;
        double const q1 = quantile(vals, 0.25), med = quantile(vals, 0.5), q3 = quantile(vals, 0.75);
        double const mn = *std::min_element(vals.begin(), vals.end());
        double const mx = *std::max_element(vals.begin(), vals.end());
        out << fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n",
                           cx, ypix(mx), ypix(mn));
        out << fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"40\" height=\"{:.1f}\" fill=\"#9ecae1\" "
                           "stroke=\"black\"/>\n",
                           cx - 20, ypix(q3), std::max(1.0, ypix(q1) - ypix(q3)));
        out << fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"black\" "
                           "stroke-width=\"2\"/>\n",
                           cx - 20, ypix(med), cx + 20, ypix(med));
        out << fmt::format("<text x=\"{:.1f}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n", cx,
                           top + plot_h + 20, svg_escape(groups[g].first));
    }
    out << "</svg>\n";
}

} // namespace

void write_records_csv(std::vector<MetricsRecord> const& records, std::string const& path)
{
    std::ofstream out(path);
    if (!out)
        throw Error(fmt::format("cannot write '{}'", path));
    out << "cell_hash,config_hash,grs,theta0,cnr,I0,duty,pulse_width,method";
    for (auto const& m : kMetrics)
        out << ',' << m.name;
    out << ",series_path\n";
    for (auto const& r : records)
    {
        out << r.cell_hash << ',' << r.config_hash << ',' << fmt_num(r.grs) << ',' << fmt_num(r.theta0) << ','
            << fmt_num(r.cnr) << ',' << fmt_num(r.I0) << ',' << fmt_num(r.duty) << ',' << r.pulse_width << ','
            << r.method;
        for (auto const& m : kMetrics)
            out << ',' << fmt_num(r.*m.field);
        out << ',' << r.series_path << '\n';
    }
}

std::vector<MetricsRecord> read_records_csv(std::string const& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError(fmt::format("cannot read '{}'", path));
    std::string line;
    if (!std::getline(in, line))
        throw FormatError(fmt::format("'{}' is empty", path));
    std::size_t const n_cols = 10 + std::size(kMetrics);
    std::vector<MetricsRecord> out;
    while (std::getline(in, line))
    {
        if (line.empty())
            continue;
        auto const f = split_csv(line);
        if (f.size() != n_cols)
            throw FormatError(fmt::format("'{}': expected {} columns, got {}", path, n_cols, f.size()));
        try
        {
            MetricsRecord r;
            r.cell_hash = f[0];
            r.config_hash = f[1];
            r.grs = parse_num(f[2]);
            r.theta0 = parse_num(f[3]);
            r.cnr = parse_num(f[4]);
            r.I0 = parse_num(f[5]);
            r.duty = parse_num(f[6]);
            r.pulse_width = std::stoi(f[7]);
            r.method = f[8];
            for (std::size_t m = 0; m < std::size(kMetrics); ++m)
                r.*kMetrics[m].field = parse_num(f[9 + m]);
            r.series_path = f[9 + std::size(kMetrics)];
            out.push_back(r);
        }
        catch (std::logic_error const&)
        {
            throw FormatError(fmt::format("'{}': unparsable row '{}'", path, line));
        }
    }
    return out;
}

std::vector<std::string> emit_plots(std::vector<MetricsRecord> const& records, std::string const& dir)
{
    if (records.empty())
        throw ConfigError("emit_plots: no records");
    fs::create_directories(dir);
    std::vector<std::string> files;
    std::string const hash = records.front().config_hash;
    for (auto const& metric : kMetrics)
    {
        // Groups in first-seen order: condition, then method.
        std::vector<std::pair<std::string, std::vector<double>>> groups;
        for (auto const& r : records)
        {
            double const v = r.*metric.field;
            if (!std::isfinite(v))
                continue;
            std::string const key = condition_label(r, records) + " / " + r.method;
            auto it = std::find_if(groups.begin(), groups.end(), [&](auto const& g) { return g.first == key; });
            if (it == groups.end())
            {
                groups.push_back({key, {}});
                it = groups.end() - 1;
            }
            it->second.push_back(v);
        }
        if (groups.empty())
        {
            fmt::print(stderr, "warning: metric '{}' has no values; plot omitted\n", metric.name);
            continue;
        }
        std::string const path = (fs::path(dir) / fmt::format("{}.svg", metric.name)).string();
        write_boxplot(path, metric, groups, hash);
        files.push_back(path);
    }
    std::string const csv = (fs::path(dir) / "metrics.csv").string();
    write_records_csv(records, csv);
    files.push_back(csv);
    return files;
}

} // namespace ctflow::harness
