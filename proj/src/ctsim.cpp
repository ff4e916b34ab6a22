#include "ctflow/ctsim.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/core.h>

#include "ctflow/store.hpp"

namespace ctflow::ctsim {

using flowgen::Field;
using flowgen::FieldMovie;

FanBeamGeometry FanBeamGeometry::full_size()
{
    return FanBeamGeometry{};
}

double FanBeamGeometry::radius() const
{
    if (source_to_iso > 0.0)
        return source_to_iso;
    return 0.5 * fov / std::sin(0.5 * fan_angle());
}

void FanBeamGeometry::validate() const
{
    if (!(fan_angle_deg > 0.0 && fan_angle_deg < 180.0))
        throw ConfigError("fan angle must lie in (0, 180) degrees");
    if (n_channels < 2 || subrays_per_channel < 1 || views_per_rotation < 2)
        throw ConfigError("fan-beam sampling counts are too small");
    if (!(fov > 0.0))
        throw ConfigError("field of view must be positive");
    if (radius() * std::sin(0.5 * fan_angle()) < 0.5 * fov * (1.0 - 1e-9))
        throw ConfigError("fan does not cover the inscribed field of view");
}

void ScanProtocol::validate() const
{
    if (!(grs > 0.0))
        throw ConfigError("gantry rotation speed must be positive");
    if (n_rotations < 1)
        throw ConfigError("at least one rotation is required");
    if (!(duty_cycle > 0.0 && duty_cycle <= 1.0))
        throw ConfigError("duty cycle must lie in (0, 1]");
    if (pulse_width < 0)
        throw ConfigError("pulse width must be >= 1 (or 0 for continuous)");
    if (!(delta_mu > 0.0))
        throw ConfigError("delta_mu must be positive");
    if (noise_enabled && !(I0 > 0.0))
        throw ConfigError("I0 must be positive when noise is enabled");
}

Ray fan_ray(FanBeamGeometry const& geom, double theta, double gamma)
{
    double const R = geom.radius();
    Ray ray;
    ray.ox = R * std::cos(theta);
    ray.oy = R * std::sin(theta);
    double const cx = -std::cos(theta);
    double const cy = -std::sin(theta);
    double const cg = std::cos(gamma);
    double const sg = std::sin(gamma);
    ray.dx = cx * cg - cy * sg;
    ray.dy = cx * sg + cy * cg;
    return ray;
}

bool clip_ray(Ray const& ray, std::array<double, 4> const& box, double& t0, double& t1)
{
    t0 = -std::numeric_limits<double>::infinity();
    t1 = std::numeric_limits<double>::infinity();
    auto slab = [&](double o, double d, double lo, double hi) {
        if (std::abs(d) < 1e-15)
            return o >= lo && o <= hi;
        double a = (lo - o) / d;
        double b = (hi - o) / d;
        if (a > b)
            std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
        return t0 < t1;
    };
    if (!slab(ray.ox, ray.dx, box[0], box[2]))
        return false;
    if (!slab(ray.oy, ray.dy, box[1], box[3]))
        return false;
    t0 = std::max(t0, 0.0);
    return t1 > t0;
}

namespace {

/// Sub-rectangle of the grid outside which the concentration is zero.
struct Support
{
    int r0 = 0, r1 = 0, c0 = 0, c1 = 0; // inclusive pixel bounds
    std::array<double, 4> box{};        // world box covering the bilinear footprint
};

Support find_support(FieldMovie const& movie)
{
    // Bounding box of every pixel that is non-zero in any frame.
    GridSpec const& g = movie.grid;
    Support s{g.ny, -1, g.nx, -1, {}};
    for (int k = 0; k < movie.nt(); ++k)
    {
        float const* f = movie.frame(Field::c, k);
        for (int r = 0; r < g.ny; ++r)
        {
            float const* row = f + g.index(r, 0);
            for (int c = 0; c < g.nx; ++c)
            {
                if (row[c] == 0.0f)
                    continue;
                s.r0 = std::min(s.r0, r);
                s.r1 = std::max(s.r1, r);
                s.c0 = std::min(s.c0, c);
                s.c1 = std::max(s.c1, c);
            }
        }
    }
    if (s.r1 < 0)
        return s;
    s.r0 = std::max(0, s.r0 - 1);
    s.c0 = std::max(0, s.c0 - 1);
    s.r1 = std::min(g.ny - 1, s.r1 + 1);
    s.c1 = std::min(g.nx - 1, s.c1 + 1);
    s.box = {g.x_center(s.c0), g.y_center(s.r0), g.x_center(s.c1), g.y_center(s.r1)};
    return s;
}

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace

std::vector<std::uint8_t> pulse_mask(ScanProtocol const& protocol, int n_views)
{
    if (!(protocol.duty_cycle > 0.0 && protocol.duty_cycle <= 1.0))
        throw ConfigError("duty cycle must lie in (0, 1]");
    if (protocol.pulse_width < 0)
        throw ConfigError("pulse width must be >= 1 (or 0 for continuous)");
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n_views), 1);
    if (protocol.duty_cycle >= 1.0 || protocol.pulse_width == 0)
        return mask;
    double const d = protocol.duty_cycle;
    int const on = protocol.pulse_width;
    int const off = static_cast<int>(std::lround(on * (1.0 - d) / d));
    if (off < 1)
        throw ConfigError(fmt::format("pulse pattern with width {} and duty {} has no off views",
                                      on, d));
    int const period = on + off;
    for (int v = 0; v < n_views; ++v)
        mask[v] = (v % period) < on ? 1 : 0;
    return mask;
}

Sinogram forward_project_dynamic(FieldMovie const& movie, FanBeamGeometry const& geom,
                                 ScanProtocol const& protocol, bool keep_subrays)
{
    geom.validate();
    protocol.validate();
    if (!movie.has(Field::c))
        throw ConfigError("forward projection needs a concentration field");

    Sinogram sino;
    sino.geometry = geom;
    sino.protocol = protocol;
    sino.scale = movie.scale;
    sino.n_views = protocol.n_rotations * geom.views_per_rotation;
    sino.n_channels = geom.n_channels;
    sino.n_subrays = geom.subrays_per_channel;
    sino.pulse_mask = pulse_mask(protocol, sino.n_views);
    sino.view_angle.resize(sino.n_views);
    sino.view_time.resize(sino.n_views);
    double const view_dt = 1.0 / (geom.views_per_rotation * protocol.grs);
    double const theta0 = protocol.theta0_deg * kPi / 180.0;
    for (int v = 0; v < sino.n_views; ++v)
    {
        sino.view_time[v] = protocol.t_start + v * view_dt;
        sino.view_angle[v] = theta0 + 2.0 * kPi * v / geom.views_per_rotation;
    }

    double const t_first = movie.scale.to_seconds(movie.times.front());
    double const t_last = movie.scale.to_seconds(movie.times.back());
    double const t_end = protocol.t_start + sino.n_views * view_dt;
    if (protocol.t_start < t_first - 1e-9 || t_end > t_last + 1e-9)
        throw ConfigError(fmt::format("acquisition window [{:.4f}, {:.4f}] s exceeds the movie "
                                      "span [{:.4f}, {:.4f}] s",
                                      protocol.t_start, t_end, t_first, t_last));

    std::size_t const n_rays = static_cast<std::size_t>(sino.n_views) * sino.n_channels;
    sino.g.assign(n_rays, 0.0f);
    int const n_sub = geom.subrays_per_channel;
    if (keep_subrays)
        sino.subray_g.assign(n_rays * n_sub, 0.0f);

    GridSpec const& grid = movie.grid;
    Support const sup = find_support(movie);
    if (sup.r1 < 0)
        return sino;
    int const sw = sup.c1 - sup.c0 + 1;
    int const sh = sup.r1 - sup.r0 + 1;
    // One zero row and column of padding so interior samples need no bounds checks.
    int const pw = sw + 1;
    std::vector<float> local(static_cast<std::size_t>(pw) * (sh + 1), 0.0f);

    double const step_max = 0.5 * grid.pixel;
    double const pitch = geom.channel_pitch();
    double const col_off = grid.x_min / grid.pixel + 0.5 + sup.c0;
    double const row_off = grid.y_min / grid.pixel + 0.5 + sup.r0;
    double const inv_pixel = 1.0 / grid.pixel;

    for (int v = 0; v < sino.n_views; ++v)
    {
        if (!sino.view_on(v))
            continue;
        // Concentration at the view time over the support.
        int k = 0;
        double w = 0.0;
        movie.bracket(movie.scale.to_t(sino.view_time[v]), k, w);
        float const* f0 = movie.frame(Field::c, k);
        float const* f1 = movie.nt() > 1 ? movie.frame(Field::c, k + 1) : f0;
        for (int r = 0; r < sh; ++r)
        {
            for (int c = 0; c < sw; ++c)
            {
                std::size_t const gi = grid.index(r + sup.r0, c + sup.c0);
                local[static_cast<std::size_t>(r) * pw + c]
                    = static_cast<float>((1.0 - w) * f0[gi] + w * f1[gi]);
            }
        }

        double const theta = sino.view_angle[v];
        for (int ch = 0; ch < sino.n_channels; ++ch)
        {
            double const gamma_c = geom.channel_angle(ch);
            double sum = 0.0;
            for (int s = 0; s < n_sub; ++s)
            {
                double const gamma = gamma_c + ((s + 0.5) / n_sub - 0.5) * pitch;
                Ray const ray = fan_ray(geom, theta, gamma);
                double t0 = 0.0, t1 = 0.0;
                double integral = 0.0;
                if (clip_ray(ray, sup.box, t0, t1))
                {
                    int const m = std::max(1, static_cast<int>(std::ceil((t1 - t0) / step_max)));
                    double const step = (t1 - t0) / m;
                    double const dcol = ray.dx * step * inv_pixel;
                    double const drow = ray.dy * step * inv_pixel;
                    double col = (ray.ox + ray.dx * (t0 + 0.5 * step)) * inv_pixel - col_off;
                    double row = (ray.oy + ray.dy * (t0 + 0.5 * step)) * inv_pixel - row_off;
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i, col += dcol, row += drow)
                    {
                        double const cc = std::clamp(col, 0.0, sw - 1.0);
                        double const rr = std::clamp(row, 0.0, sh - 1.0);
                        int const c0 = static_cast<int>(cc);
                        int const r0 = static_cast<int>(rr);
                        double const wc = cc - c0;
                        double const wr = rr - r0;
                        float const* p = local.data() + static_cast<std::size_t>(r0) * pw + c0;
                        acc += (1.0 - wr) * ((1.0 - wc) * p[0] + wc * p[1])
                               + wr * ((1.0 - wc) * p[pw] + wc * p[pw + 1]);
                    }
                    integral = acc * step;
                }
                sum += integral;
                if (keep_subrays)
                    sino.subray_g[(static_cast<std::size_t>(v) * sino.n_channels + ch) * n_sub + s]
                        = static_cast<float>(integral);
            }
            sino.g[static_cast<std::size_t>(v) * sino.n_channels + ch]
                = static_cast<float>(sum / n_sub);
        }
    }
    return sino;
}

Intensities apply_beer_lambert(Sinogram const& sino, ScanProtocol const& protocol)
{
    if (!(protocol.delta_mu > 0.0))
        throw ConfigError("delta_mu must be positive");
    Intensities I;
    I.n_views = sino.n_views;
    I.n_channels = sino.n_channels;
    I.values.assign(sino.g.size(), 0.0);
    bool const subrays = !sino.subray_g.empty();
    int const n_sub = sino.n_subrays;
    for (std::size_t i = 0; i < sino.g.size(); ++i)
    {
        if (subrays)
        {
            double acc = 0.0;
            for (int s = 0; s < n_sub; ++s)
                acc += std::exp(-protocol.delta_mu * sino.subray_g[i * n_sub + s]);
            I.values[i] = protocol.I0 * acc / n_sub;
        }
        else
        {
            I.values[i] = protocol.I0 * std::exp(-protocol.delta_mu * sino.g[i]);
        }
    }
    return I;
}

Intensities add_poisson_noise(Intensities const& I, std::uint64_t seed)
{
    Intensities out = I;
    std::size_t const row = static_cast<std::size_t>(std::max(1, I.n_channels));
    std::size_t const rows = (I.values.size() + row - 1) / row;
    for (std::size_t v = 0; v < rows; ++v)
    {
        std::mt19937_64 rng(splitmix64(seed ^ splitmix64(v)));
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = v * row; i < std::min(I.values.size(), (v + 1) * row); ++i)
        {
            double const mean = I.values[i];
            if (!(mean >= 0.0))
                throw DomainError("add_poisson_noise: negative or NaN intensity");
            if (mean == 0.0)
            {
                out.values[i] = 0.0;
            }
            else if (mean > 1e7)
            {
                // Gaussian limit of the Poisson law.
                out.values[i] = std::max(0.0, std::round(mean + std::sqrt(mean) * normal(rng)));
            }
            else
            {
                std::poisson_distribution<long long> poisson(mean);
                out.values[i] = static_cast<double>(poisson(rng));
            }
        }
    }
    return out;
}

Sinogram log_transform(Intensities const& noisy, ScanProtocol const& protocol,
                       Sinogram const& like)
{
    if (noisy.values.size() != like.g.size())
        throw ConfigError("log_transform: intensity and sinogram sizes differ");
    Sinogram out = like;
    out.subray_g.clear();
    for (std::size_t i = 0; i < noisy.values.size(); ++i)
    {
        std::size_t const view = i / static_cast<std::size_t>(out.n_channels);
        if (!out.pulse_mask.empty() && !out.pulse_mask[view])
        {
            out.g[i] = 0.0f;
            continue;
        }
        double const counts = std::max(noisy.values[i], 1.0);
        out.g[i] = static_cast<float>(-std::log(counts / protocol.I0) / protocol.delta_mu);
    }
    out.noise_I0 = protocol.I0;
    return out;
}

Sinogram simulate_scan(FieldMovie const& movie, FanBeamGeometry const& geom,
                       ScanProtocol const& protocol)
{
    Sinogram sino = forward_project_dynamic(movie, geom, protocol, protocol.noise_enabled);
    if (!protocol.noise_enabled)
        return sino;
    Intensities const clean = apply_beer_lambert(sino, protocol);
    Intensities const noisy = add_poisson_noise(clean, protocol.seed);
    return log_transform(noisy, protocol, sino);
}

double estimate_cnr(Image const& image, std::vector<std::uint8_t> const& lumen_roi,
                    std::vector<std::uint8_t> const& background_roi)
{
    std::size_t const n = image.data.size();
    if (lumen_roi.size() != n || background_roi.size() != n)
        throw ConfigError("estimate_cnr: ROI masks do not match the image");
    double sum_l = 0.0, sum_b = 0.0, sum_b2 = 0.0;
    std::size_t nl = 0, nb = 0;
    for (std::size_t i = 0; i < n; ++i)
    {
        if (lumen_roi[i] && background_roi[i])
            throw ConfigError("estimate_cnr: ROIs overlap");
        if (lumen_roi[i])
        {
            sum_l += image.data[i];
            ++nl;
        }
        else if (background_roi[i])
        {
            sum_b += image.data[i];
            sum_b2 += static_cast<double>(image.data[i]) * image.data[i];
            ++nb;
        }
    }
    if (nl < 100 || nb < 100)
        throw ConfigError("estimate_cnr: each ROI needs at least 100 pixels");
    double const mean_l = sum_l / nl;
    double const mean_b = sum_b / nb;
    double const var_b = std::max(0.0, (sum_b2 - nb * mean_b * mean_b) / (nb - 1));
    double const sd = std::sqrt(var_b);
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean_l)))
        return kInfiniteCnr;
    return (mean_l - mean_b) / sd;
}

// ---------------------------------------------------------------------------

namespace {

store::json geometry_to_json(FanBeamGeometry const& g)
{
    return {{"fan_angle_deg", g.fan_angle_deg},
            {"n_channels", g.n_channels},
            {"subrays_per_channel", g.subrays_per_channel},
            {"views_per_rotation", g.views_per_rotation},
            {"fov", g.fov},
            {"source_to_iso", g.radius()}};
}

FanBeamGeometry geometry_from_json(store::json const& j)
{
    FanBeamGeometry g;
    g.fan_angle_deg = store::require(j, "fan_angle_deg").get<double>();
    g.n_channels = store::require(j, "n_channels").get<int>();
    g.subrays_per_channel = store::require(j, "subrays_per_channel").get<int>();
    g.views_per_rotation = store::require(j, "views_per_rotation").get<int>();
    g.fov = store::require(j, "fov").get<double>();
    g.source_to_iso = store::require(j, "source_to_iso").get<double>();
    return g;
}

store::json protocol_to_json(ScanProtocol const& p)
{
    return {{"grs", p.grs},
            {"theta0_deg", p.theta0_deg},
            {"t_start", p.t_start},
            {"n_rotations", p.n_rotations},
            {"I0", p.I0},
            {"pulse_width", p.pulse_width},
            {"duty_cycle", p.duty_cycle},
            {"delta_mu", p.delta_mu},
            {"noise_enabled", p.noise_enabled},
            {"seed", p.seed}};
}

ScanProtocol protocol_from_json(store::json const& j)
{
    ScanProtocol p;
    p.grs = store::require(j, "grs").get<double>();
    p.theta0_deg = store::require(j, "theta0_deg").get<double>();
    p.t_start = j.value("t_start", 0.0);
    p.n_rotations = store::require(j, "n_rotations").get<int>();
    p.I0 = j.value("I0", 1e15);
    p.pulse_width = j.value("pulse_width", 0);
    p.duty_cycle = j.value("duty_cycle", 1.0);
    p.delta_mu = j.value("delta_mu", 0.2);
    p.noise_enabled = j.value("noise_enabled", false);
    p.seed = j.value("seed", std::uint64_t{0});
    return p;
}

} // namespace

void save_sinogram(Sinogram const& sino, std::string const& path)
{
    store::fs::path const dir(path);
    store::fs::create_directories(dir);
    store::json meta;
    meta["format"] = "ctflow.sinogram";
    meta["version"] = 1;
    meta["shape"] = {sino.n_views, sino.n_channels};
    meta["n_subrays"] = sino.n_subrays;
    meta["geometry"] = geometry_to_json(sino.geometry);
    meta["protocol"] = protocol_to_json(sino.protocol);
    meta["constants"] = store::nondim_to_json(sino.scale);
    meta["noise_I0"] = sino.noise_I0;
    meta["units"] = "concentration*cm";
    store::write_f32(dir / "g.f32", sino.g);
    store::write_u8(dir / "mask.u8", sino.pulse_mask);
    store::write_f64(dir / "angle.f64", sino.view_angle);
    store::write_f64(dir / "time.f64", sino.view_time);
    store::write_json(dir / "meta.json", meta);
}

Sinogram load_sinogram(std::string const& path)
{
    store::fs::path const dir(path);
    store::json const meta = store::read_json(dir / "meta.json");
    Sinogram sino;
    try
    {
        if (store::require(meta, "format").get<std::string>() != "ctflow.sinogram")
            throw FormatError("not a sinogram");
        auto const shape = store::require(meta, "shape").get<std::vector<int>>();
        if (shape.size() != 2 || shape[0] <= 0 || shape[1] <= 0)
            throw FormatError("bad sinogram shape");
        sino.n_views = shape[0];
        sino.n_channels = shape[1];
        sino.n_subrays = meta.value("n_subrays", 1);
        sino.geometry = geometry_from_json(store::require(meta, "geometry"));
        sino.protocol = protocol_from_json(store::require(meta, "protocol"));
        sino.scale = store::nondim_from_json(store::require(meta, "constants"));
        sino.noise_I0 = meta.value("noise_I0", 0.0);
    }
    catch (store::json::exception const& e)
    {
        throw FormatError(fmt::format("malformed sinogram metadata: {}", e.what()));
    }
    if (sino.n_channels != sino.geometry.n_channels)
        throw FormatError("sinogram channel count disagrees with its geometry");
    std::size_t const n = static_cast<std::size_t>(sino.n_views) * sino.n_channels;
    sino.g = store::read_f32(dir / "g.f32", n);
    sino.pulse_mask = store::read_u8(dir / "mask.u8", sino.n_views);
    sino.view_angle = store::read_f64(dir / "angle.f64", sino.n_views);
    sino.view_time = store::read_f64(dir / "time.f64", sino.n_views);
    return sino;
}

} // namespace ctflow::ctsim
