#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ctflow/flowgen.hpp"
#include "ctflow/store.hpp"

using namespace ctflow;
using namespace ctflow::flowgen;
using geometry::Exterior;
using geometry::VesselGeometry;

namespace {

std::filesystem::path scratch(std::string const& name)
{
    auto dir = std::filesystem::temp_directory_path() / ("ctflow_test_flowgen_" + name);
    std::filesystem::remove_all(dir);
    return dir;
}

// Closed-form channel solution written out independently of the library.
double womersley_oracle(double y, double t, FlowParams const& p)
{
    using cd = std::complex<double>;
    cd const i(0.0, 1.0);
    double const a2 = p.Re * p.St;
    cd const lam = std::sqrt(i * a2);
    cd const shape = std::cosh(lam * y) / std::cosh(lam / 2.0) - 1.0;
    cd const osc = p.Re * p.A * p.Re / (i * a2) * shape * std::exp(i * p.St * t);
    return p.Re / 2.0 * p.dP * (0.25 - y * y) + osc.real();
}

} // namespace

TEST_CASE("reference flow parameters")
{
    auto const p = FlowParams::reference();
    CHECK(p.Re == doctest::Approx(1184).epsilon(0.001));
    CHECK(p.St == doctest::Approx(0.37).epsilon(0.01));
    CHECK(std::abs(p.womersley_alpha() - std::sqrt(p.Re * p.St)) < 1e-12);
    CHECK(std::abs(p.womersley_alpha() - 20.83) < 0.01);
    CHECK(p.period() == doctest::Approx(2.0 * kPi / p.St));
}

TEST_CASE("womersley profile matches the closed form")
{
    auto const p = FlowParams::reference();
    for (double y : {-0.5, -0.31, 0.0, 0.12, 0.49})
        for (double t : {0.0, 1.3, 7.7})
            CHECK(womersley_velocity(y, t, p) == doctest::Approx(womersley_oracle(y, t, p)).epsilon(1e-10));
}

TEST_CASE("steady Poiseuille limit")
{
    FlowParams p = FlowParams::reference();
    p.A = 0.0;
    p.dP = 8.0 / p.Re;
    for (double t : {0.0, 3.0, 11.0})
    {
        CHECK(womersley_velocity(0.0, t, p) == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(std::abs(womersley_velocity(0.5, t, p)) < 1e-14);
        CHECK(std::abs(womersley_velocity(-0.5, t, p)) < 1e-14);
    }
}

TEST_CASE("womersley profile is symmetric, periodic and vanishes at the walls")
{
    auto const p = FlowParams::reference();
    for (double y = 0.0; y <= 0.5; y += 0.05)
        for (double t = 0.0; t < p.period(); t += 0.9)
            CHECK(std::abs(womersley_velocity(y, t, p) - womersley_velocity(-y, t, p)) < 1e-12);
    for (double t = 0.0; t < p.period(); t += 0.7)
    {
        CHECK(std::abs(womersley_velocity(0.5, t, p)) < 1e-10);
        CHECK(std::abs(womersley_velocity(0.2, t, p) - womersley_velocity(0.2, t + p.period(), p))
              < 1e-10);
    }
    CHECK_THROWS_AS(womersley_velocity(0.5000001, 0.0, p), DomainError);
}

TEST_CASE("normalised peak velocity is one")
{
    auto const p = FlowParams::reference();
    // Independent dense search.
    double best = -1.0;
    for (int j = 0; j <= 1000; ++j)
        for (int k = 0; k < 1000; ++k)
            best = std::max(best, womersley_oracle(-0.5 + j / 1000.0, p.period() * k / 1000.0, p));
    CHECK(std::abs(best - 1.0) < 0.005);
}

TEST_CASE("pressure gradient balances the channel momentum equation")
{
    auto const p = FlowParams::reference();
    // u_t = -p_x + u_yy / Re, checked with centred differences of the oracle.
    double const h = 1e-4;
    for (double y : {-0.3, 0.0, 0.25})
    {
        for (double t : {0.4, 5.0, 12.0})
        {
            double const ut = (womersley_oracle(y, t + h, p) - womersley_oracle(y, t - h, p)) / (2 * h);
            double const uyy = (womersley_oracle(y + h, t, p) - 2 * womersley_oracle(y, t, p)
                                + womersley_oracle(y - h, t, p))
                               / (h * h);
            CHECK(std::abs(ut + womersley_pressure_gradient(t, p) - uyy / p.Re) < 1e-5);
        }
    }
}

TEST_CASE("inlet concentration")
{
    auto const p = FlowParams::reference();
    CHECK(inlet_concentration(0.0, p) == 0.0);
    CHECK(inlet_concentration(1.0 / (2.0 * p.beta * p.St), p) == doctest::Approx(1.0).epsilon(1e-14));
    FlowParams q = p;
    q.St = 0.37;
    double const period = 1.0 / (q.beta * q.St);
    CHECK(period == doctest::Approx(1.351).epsilon(0.001));
    for (double t : {0.1, 0.77, 2.3})
        CHECK(inlet_concentration(t + period, q) == doctest::Approx(inlet_concentration(t, q)));
}

TEST_CASE("WENO3 translates a Gaussian blob accurately")
{
    // 2H x 0.64H periodic box at 100 cells per H, unit velocity along x.
    int const nx = 200, ny = 64;
    double const dx = 0.01;
    GridSpec grid{nx, ny, 1.0, 0.0, 0.0};
    auto const domain = AdvectionDomain::box(grid, dx, Exterior::wall, true, true);
    auto blob = [&](double x0) {
        std::vector<double> c(grid.size());
        for (int r = 0; r < ny; ++r)
        {
            for (int col = 0; col < nx; ++col)
            {
                double x = (col + 0.5) * dx - x0;
                x -= 2.0 * std::round(x / 2.0);
                double const y = (r + 0.5) * dx - 0.32;
                c[grid.index(r, col)] = std::exp(-(x * x + y * y) / (2 * 0.15 * 0.15));
            }
        }
        return c;
    };
    auto const c0 = blob(1.0);
    VelocityFn vel = [](double, std::vector<double>& u, std::vector<double>& v) {
        std::fill(u.begin(), u.end(), 1.0);
        std::fill(v.begin(), v.end(), 0.0);
    };
    AdvectOptions opt;
    opt.n_steps = 800;
    opt.dt = 2.0 / opt.n_steps; // one flow-through of the 2H box
    opt.record_every = opt.n_steps;
    auto const frames = advect_weno3(c0, vel, domain, opt, nullptr);
    REQUIRE(frames.size() == 2);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < c0.size(); ++i)
    {
        num += (frames[1][i] - c0[i]) * (frames[1][i] - c0[i]);
        den += c0[i] * c0[i];
    }
    CHECK(std::sqrt(num / den) < 0.02);
    for (double v : frames[1])
    {
        CHECK(v >= -1e-6);
        CHECK(v <= 1.0 + 1e-6);
    }
}

TEST_CASE("WENO3 with zero velocity leaves the field unchanged")
{
    GridSpec grid{40, 30, 1.0, 0.0, 0.0};
    auto const domain = AdvectionDomain::box(grid, 0.05);
    std::vector<double> c(grid.size());
    for (std::size_t i = 0; i < c.size(); ++i)
        c[i] = 0.5 + 0.5 * std::sin(0.37 * i);
    VelocityFn vel = [](double, std::vector<double>& u, std::vector<double>& v) {
        std::fill(u.begin(), u.end(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
    };
    AdvectOptions opt;
    opt.dt = 0.01;
    opt.n_steps = 50;
    opt.record_every = 50;
    auto const frames = advect_weno3(c, vel, domain, opt, nullptr);
    for (std::size_t i = 0; i < c.size(); ++i)
        CHECK(std::abs(frames.back()[i] - c[i]) < 1e-12);
}

TEST_CASE("WENO3 conserves mass in a closed rotating flow")
{
    int const n = 80;
    double const dx = 1.0 / n;
    GridSpec grid{n, n, 1.0, 0.0, 0.0};
    auto const domain = AdvectionDomain::box(grid, dx);
    std::vector<double> c(grid.size());
    std::vector<double> uu(grid.size()), vv(grid.size());
    for (int r = 0; r < n; ++r)
    {
        for (int col = 0; col < n; ++col)
        {
            double const x = (col + 0.5) * dx - 0.5;
            double const y = (r + 0.5) * dx - 0.5;
            // u depends only on y and v only on x, so face fluxes are divergence-free.
            uu[grid.index(r, col)] = -y;
            vv[grid.index(r, col)] = x;
            double const d2 = (x - 0.15) * (x - 0.15) + y * y;
            c[grid.index(r, col)] = std::exp(-d2 / (2 * 0.06 * 0.06));
        }
    }
    VelocityFn vel = [&](double, std::vector<double>& u, std::vector<double>& v) {
        u = uu;
        v = vv;
    };
    AdvectOptions opt;
    opt.n_steps = 1000;
    opt.dt = 2.0 * kPi / opt.n_steps; // one revolution
    opt.record_every = opt.n_steps;
    auto const frames = advect_weno3(c, vel, domain, opt, nullptr);
    double m0 = 0.0, m1 = 0.0, lo = 1.0, hi = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
    {
        m0 += c[i];
        m1 += frames.back()[i];
        lo = std::min(lo, frames.back()[i]);
        hi = std::max(hi, frames.back()[i]);
    }
    CHECK(std::abs(m1 - m0) / m0 < 0.005);
    CHECK(lo >= -1e-6);
    CHECK(hi <= 1.0 + 1e-6);
}

TEST_CASE("WENO3 rejects CFL violations and NaN velocities")
{
    GridSpec grid{10, 10, 1.0, 0.0, 0.0};
    auto const domain = AdvectionDomain::box(grid, 0.1);
    std::vector<double> c(grid.size(), 0.0);
    AdvectOptions opt;
    opt.dt = 0.05;
    opt.n_steps = 1;
    VelocityFn fast = [](double, std::vector<double>& u, std::vector<double>& v) {
        std::fill(u.begin(), u.end(), 1.0);
        std::fill(v.begin(), v.end(), 0.0);
    };
    CHECK_THROWS_AS(advect_weno3(c, fast, domain, opt, nullptr), DomainError);
    VelocityFn bad = [](double, std::vector<double>& u, std::vector<double>& v) {
        std::fill(u.begin(), u.end(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
        u[7] = std::numeric_limits<double>::quiet_NaN();
    };
    opt.dt = 0.01;
    CHECK_THROWS_AS(advect_weno3(c, bad, domain, opt, nullptr), DomainError);
}

TEST_CASE("channel advection pins the inlet column to the sin^2 trace")
{
    auto const params = FlowParams::reference();
    auto const geom = VesselGeometry::channel(1.5);
    auto const grid = GridSpec::centered(160, 8.0);
    auto const mask = geometry::build_bifurcation_mask(geom, grid);
    auto const domain = AdvectionDomain::from_mask(geom, mask);
    VelocityFn vel = [&](double t, std::vector<double>& u, std::vector<double>& v) {
        std::fill(v.begin(), v.end(), 0.0);
        for (int r = 0; r < grid.ny; ++r)
        {
            double const y = grid.y_center(r) / geom.H;
            double const ur = std::abs(y) <= 0.5 ? womersley_velocity(y, t, params) : 0.0;
            for (int c = 0; c < grid.nx; ++c)
                u[grid.index(r, c)] = ur;
        }
    };
    AdvectOptions opt;
    opt.dt = 0.3 * domain.dx / 1.05;
    opt.n_steps = 300;
    opt.record_every = 10;
    InletFn inlet = [&](double t) { return inlet_concentration(t, params); };
    auto const frames = advect_weno3(std::vector<double>(grid.size(), 0.0), vel, domain, opt, inlet);
    int first_col = grid.nx;
    for (int c = 0; c < grid.nx && first_col == grid.nx; ++c)
        for (int r = 0; r < grid.ny; ++r)
            if (mask.roi_at(r, c))
            {
                first_col = c;
                break;
            }
    for (std::size_t k = 0; k < frames.size(); ++k)
    {
        double const t = k * opt.record_every * opt.dt;
        double const expected = std::pow(std::sin(params.beta * params.St * kPi * t), 2);
        for (int r = 0; r < grid.ny; ++r)
            if (mask.roi_at(r, first_col))
                CHECK(std::abs(frames[k][grid.index(r, first_col)] - expected) < 1e-12);
    }
}

TEST_CASE("synthesized channel case")
{
    auto const params = FlowParams::reference();
    auto const geom = VesselGeometry::channel(1.5);
    auto const grid = GridSpec::centered(160, 8.0);
    ChannelCaseOptions opts;
    opts.nt = 100;
    opts.n_cycles = 1.0;
    auto const movie = synthesize_channel_case(params, geom, grid, opts);
    REQUIRE_NOTHROW(movie.validate());
    CHECK(movie.nt() == 100);

    // Bounded concentration and lumen-only velocity.
    double umax = 0.0;
    for (int k = 0; k < movie.nt(); ++k)
    {
        float const* c = movie.frame(Field::c, k);
        float const* u = movie.frame(Field::u, k);
        float const* v = movie.frame(Field::v, k);
        for (std::size_t i = 0; i < grid.size(); ++i)
        {
            REQUIRE(c[i] >= -1e-6f);
            REQUIRE(c[i] <= 1.0f + 1e-6f);
            if (!movie.lumen[i])
            {
                REQUIRE(u[i] == 0.0f);
                REQUIRE(v[i] == 0.0f);
            }
            umax = std::max(umax, static_cast<double>(u[i]));
        }
    }
    CHECK(std::abs(movie.scale.u_c * umax - 30.0) < 0.2);

    // Finite-difference residual of the x-momentum equation away from walls and ends.
    double const dt = movie.times[1] - movie.times[0];
    double const dxn = grid.pixel / geom.H;
    double worst = 0.0;
    for (int k = 1; k + 1 < movie.nt(); ++k)
    {
        for (int r = 0; r < grid.ny; ++r)
        {
            double const y = grid.y_center(r) / geom.H;
            if (std::abs(y) > 0.3)
                continue;
            for (int c = 10; c < grid.nx - 10; ++c)
            {
                std::size_t const i = grid.index(r, c);
                if (!movie.lumen[i])
                    continue;
                auto U = [&](int kk, int rr, int cc) {
                    return static_cast<double>(movie.frame(Field::u, kk)[grid.index(rr, cc)]);
                };
                auto P = [&](int cc) {
                    return static_cast<double>(movie.frame(Field::p, k)[grid.index(r, cc)]);
                };
                double const ut = (U(k + 1, r, c) - U(k - 1, r, c)) / (2 * dt);
                double const ux = (U(k, r, c + 1) - U(k, r, c - 1)) / (2 * dxn);
                double const uxx = (U(k, r, c + 1) - 2 * U(k, r, c) + U(k, r, c - 1)) / (dxn * dxn);
                double const uyy = (U(k, r + 1, c) - 2 * U(k, r, c) + U(k, r - 1, c)) / (dxn * dxn);
                double const px = (P(c + 1) - P(c - 1)) / (2 * dxn);
                double const e2 = ut + U(k, r, c) * ux + px - (uxx + uyy) / params.Re;
                worst = std::max(worst, std::abs(e2));
            }
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("field movie round trip and validation")
{
    auto const geom = VesselGeometry::channel(1.5);
    auto const grid = GridSpec::centered(160, 8.0);
    auto const mask = geometry::build_bifurcation_mask(geom, grid);
    FieldMovie movie;
    movie.grid = grid;
    movie.times.resize(100);
    for (int k = 0; k < 100; ++k)
        movie.times[k] = 0.1 * k;
    movie.scale = {30.0, 1.5, geom.offset_x(), 0.0};
    movie.lumen = mask.lumen;
    movie.roi = mask.roi;
    movie.allocate({Field::c, Field::u, Field::v, Field::p});
    // Non-zero velocity everywhere, including outside the lumen.
    for (int f = 0; f < 4; ++f)
        for (std::size_t i = 0; i < movie.fields[f].size(); ++i)
            movie.fields[f][i] = static_cast<float>(std::sin(0.001 * i + f));

    auto const dir = scratch("roundtrip");
    save_field_movie(movie, dir.string());
    auto const loaded = load_field_movie(dir.string());
    CHECK(loaded.grid == movie.grid);
    CHECK(loaded.times == movie.times);
    CHECK(loaded.data(Field::c) == movie.data(Field::c));
    CHECK(loaded.data(Field::p) == movie.data(Field::p));
    CHECK(loaded.scale == movie.scale);
    for (int k = 0; k < loaded.nt(); ++k)
    {
        for (std::size_t i = 0; i < grid.size(); ++i)
        {
            float const u = loaded.frame(Field::u, k)[i];
            if (!mask.lumen[i])
                REQUIRE(u == 0.0f);
            else
                REQUIRE(u == movie.frame(Field::u, k)[i]);
        }
    }

    // Corrupt the shape header.
    auto meta = store::read_json(dir / "meta.json");
    meta["shape"] = {99, grid.ny, grid.nx};
    store::write_json(dir / "meta.json", meta);
    CHECK_THROWS_AS(load_field_movie(dir.string()), FormatError);

    // Non-monotonic times.
    meta["shape"] = {100, grid.ny, grid.nx};
    auto times = movie.times;
    std::swap(times[3], times[4]);
    meta["times"] = times;
    store::write_json(dir / "meta.json", meta);
    CHECK_THROWS_AS(load_field_movie(dir.string()), FormatError);

    // Missing constants.
    meta["times"] = movie.times;
    meta.erase("constants");
    store::write_json(dir / "meta.json", meta);
    CHECK_THROWS_AS(load_field_movie(dir.string()), FormatError);
    std::filesystem::remove_all(dir);
}
