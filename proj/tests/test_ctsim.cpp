#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ctflow/ctsim.hpp"
#include "fixtures.hpp"

using namespace ctflow;
using namespace ctflow::ctsim;
using flowgen::Field;

namespace {

double chord(double rho, double d)
{
    return d < rho ? 2.0 * std::sqrt(rho * rho - d * d) : 0.0;
}

} // namespace

TEST_CASE("scanner geometry")
{
    auto const g = FanBeamGeometry::full_size();
    CHECK(g.n_channels == 1600);
    CHECK(g.views_per_rotation == 984);
    CHECK(g.subrays_per_channel == 5);
    CHECK(g.channel_pitch() == doctest::Approx(43.6 * kPi / 180.0 / 1600));
    CHECK(g.radius() == doctest::Approx(25.0 / std::sin(21.8 * kPi / 180.0)));
    CHECK(g.radius() == doctest::Approx(67.3).epsilon(0.001));
    CHECK(g.radius() * std::sin(0.5 * g.fan_angle()) >= 25.0 - 1e-9);
    auto bad = g;
    bad.source_to_iso = 30.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("fan rays pass at distance R sin(gamma) from the centre")
{
    auto const g = FanBeamGeometry::full_size();
    for (double theta : {0.0, 0.7, 2.9})
    {
        for (double gamma : {-0.3, 0.0, 0.11})
        {
            Ray const ray = fan_ray(g, theta, gamma);
            double const d = std::abs(ray.ox * ray.dy - ray.oy * ray.dx);
            CHECK(d == doctest::Approx(g.radius() * std::abs(std::sin(gamma))).epsilon(1e-12));
            CHECK(std::hypot(ray.dx, ray.dy) == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("uniform disk projects to its chord length")
{
    auto const grid = GridSpec::centered(256, 12.8);
    double const rho = 3.0;
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0, 0, rho)));
    auto const geom = fixtures::small_scanner(12.8, 256, 36);
    ScanProtocol proto;
    proto.grs = 36.0;
    auto const sino = forward_project_dynamic(movie, geom, proto);
    double const R = geom.radius();
    for (int v = 0; v < sino.n_views; ++v)
    {
        for (int ch : {geom.n_channels / 2 - 1, geom.n_channels / 2, geom.n_channels / 2 + 40})
        {
            double expected = 0.0;
            for (int s = 0; s < geom.subrays_per_channel; ++s)
            {
                double const gamma = geom.channel_angle(ch)
                                     + ((s + 0.5) / geom.subrays_per_channel - 0.5)
                                           * geom.channel_pitch();
                expected += chord(rho, R * std::abs(std::sin(gamma)));
            }
            expected /= geom.subrays_per_channel;
            CHECK(std::abs(sino.at(v, ch) - expected) <= 0.01 * expected);
        }
    }
}

TEST_CASE("zero movie gives a zero sinogram")
{
    auto const grid = GridSpec::centered(128, 12.8);
    auto const movie = fixtures::static_movie(grid, std::vector<float>(grid.size(), 0.0f));
    auto const geom = fixtures::small_scanner(12.8, 64, 60);
    ScanProtocol proto;
    proto.grs = 60.0;
    auto const sino = forward_project_dynamic(movie, geom, proto);
    for (float g : sino.g)
        REQUIRE(g == 0.0f);
}

TEST_CASE("conjugate rays carry equal integrals")
{
    // Odd channel count with pitch = half the view step makes every
    // conjugate ray (theta + pi + 2 gamma, -gamma) land on a sampled view.
    int const V = 360;
    int const N = 129;
    auto geom = fixtures::small_scanner(12.8, N, V);
    geom.fan_angle_deg = N * 180.0 / V;
    auto const grid = GridSpec::centered(256, 12.8);
    auto image = fixtures::rasterize(grid, [](double x, double y) {
        return fixtures::disk(1.2, -0.5, 1.5)(x, y) + 0.5 * fixtures::disk(-2.0, 1.0, 0.8)(x, y);
    });
    auto const movie = fixtures::static_movie(grid, image);
    ScanProtocol proto;
    proto.grs = 10.0;
    auto const sino = forward_project_dynamic(movie, geom, proto);
    double gmax = 0.0;
    for (float g : sino.g)
        gmax = std::max(gmax, static_cast<double>(g));
    double worst = 0.0;
    for (int v = 0; v < V; v += 7)
    {
        for (int j = 0; j < N; ++j)
        {
            int const m = j - (N - 1) / 2;
            int const vc = ((v + V / 2 + m) % V + V) % V;
            int const jc = N - 1 - j;
            worst = std::max(worst, std::abs(sino.at(v, j) - sino.at(vc, jc)) / gmax);
        }
    }
    CHECK(worst < 0.01);
}

TEST_CASE("projection is linear and independent of GRS for static objects")
{
    auto const grid = GridSpec::centered(128, 12.8);
    auto const image = fixtures::rasterize(grid, fixtures::disk(0.5, 0.3, 2.0), 4);
    auto scaled = image;
    for (float& v : scaled)
        v *= 2.5f;
    auto const geom = fixtures::small_scanner(12.8, 128, 90);
    ScanProtocol proto;
    proto.grs = 4.0;
    auto const a = forward_project_dynamic(fixtures::static_movie(grid, image), geom, proto);
    auto const b = forward_project_dynamic(fixtures::static_movie(grid, scaled), geom, proto);
    for (std::size_t i = 0; i < a.g.size(); ++i)
        REQUIRE(std::abs(b.g[i] - 2.5 * a.g[i]) <= 1e-5 * (1.0 + std::abs(b.g[i])));

    ScanProtocol fast = proto;
    fast.grs = 10.0;
    auto const c = forward_project_dynamic(fixtures::static_movie(grid, image), geom, fast);
    CHECK(c.g == a.g);
    CHECK(c.view_angle == a.view_angle);
    CHECK(c.view_time != a.view_time);
}

TEST_CASE("view angles and times advance uniformly")
{
    auto const grid = GridSpec::centered(64, 12.8);
    auto const movie = fixtures::static_movie(grid, std::vector<float>(grid.size(), 0.0f), 3.0);
    auto const geom = fixtures::small_scanner(12.8, 32, 984, 1);
    ScanProtocol proto;
    proto.grs = 2.0;
    proto.n_rotations = 2;
    proto.theta0_deg = 30.0;
    proto.t_start = 0.5;
    auto const sino = forward_project_dynamic(movie, geom, proto);
    REQUIRE(sino.n_views == 2 * 984);
    CHECK(sino.view_angle[0] == doctest::Approx(kPi / 6.0));
    CHECK(sino.view_time[0] == doctest::Approx(0.5));
    for (int v = 1; v < sino.n_views; ++v)
    {
        REQUIRE(sino.view_angle[v] - sino.view_angle[v - 1]
                == doctest::Approx(2.0 * kPi / 984).epsilon(1e-9));
        REQUIRE(sino.view_time[v] - sino.view_time[v - 1]
                == doctest::Approx(1.0 / (984 * 2.0)).epsilon(1e-9));
    }

    proto.t_start = 2.5;
    CHECK_THROWS_AS(forward_project_dynamic(movie, geom, proto), ConfigError);
}

TEST_CASE("Beer-Lambert attenuation")
{
    Sinogram s;
    s.n_views = 1;
    s.n_channels = 4;
    ScanProtocol proto;
    proto.I0 = 1e6;
    proto.delta_mu = 0.2;
    s.g = {0.0f, static_cast<float>(std::log(2.0) / 0.2), 1.0f, 2.0f};
    auto const I = apply_beer_lambert(s, proto);
    CHECK(I.values[0] == proto.I0);
    CHECK(I.values[1] == doctest::Approx(proto.I0 / 2).epsilon(1e-7));
    // g order: 0 < 1 < 2 < ln2 / 0.2
    CHECK(I.values[0] > I.values[2]);
    CHECK(I.values[2] > I.values[3]);
    CHECK(I.values[3] > I.values[1]);
}

TEST_CASE("Poisson noise statistics")
{
    Intensities I;
    I.n_views = 100;
    I.n_channels = 1000;
    I.values.assign(100000, 1e4);
    auto const n = add_poisson_noise(I, 7);
    double mean = 0.0;
    for (double v : n.values)
        mean += v;
    mean /= n.values.size();
    double var = 0.0;
    for (double v : n.values)
        var += (v - mean) * (v - mean);
    var /= n.values.size() - 1;
    CHECK(std::abs(mean / 1e4 - 1.0) < 0.01);
    CHECK(std::abs(var / 1e4 - 1.0) < 0.03);

    auto const again = add_poisson_noise(I, 7);
    CHECK(again.values == n.values);
    auto const other = add_poisson_noise(I, 8);
    CHECK(other.values != n.values);

    Intensities z = I;
    std::fill(z.values.begin(), z.values.end(), 0.0);
    for (double v : add_poisson_noise(z, 3).values)
        REQUIRE(v == 0.0);

    Intensities big;
    big.n_views = 10;
    big.n_channels = 100;
    big.values.assign(1000, 1e15);
    double ss = 0.0;
    for (double v : add_poisson_noise(big, 1).values)
        ss += (v / 1e15 - 1.0) * (v / 1e15 - 1.0);
    CHECK(std::sqrt(ss / big.values.size()) < 1e-7);

    Intensities neg = z;
    neg.values[5] = -1.0;
    CHECK_THROWS_AS(add_poisson_noise(neg, 1), DomainError);
}

TEST_CASE("log transform")
{
    Sinogram s;
    s.n_views = 2;
    s.n_channels = 3;
    s.g = {0.0f, 0.5f, 1.25f, 3.0f, 0.001f, 7.0f};
    s.pulse_mask = {1, 1};
    ScanProtocol proto;
    proto.I0 = 1e5;
    auto const I = apply_beer_lambert(s, proto);
    auto const back = log_transform(I, proto, s);
    for (std::size_t i = 0; i < s.g.size(); ++i)
        CHECK(std::abs(back.g[i] - s.g[i]) < 1e-12);
    CHECK(back.noise_I0 == proto.I0);

    Intensities zero = I;
    zero.values[2] = 0.0;
    auto const clamped = log_transform(zero, proto, s);
    CHECK(clamped.g[2] == doctest::Approx(std::log(proto.I0) / proto.delta_mu).epsilon(1e-6));
}

TEST_CASE("log transform bias at 100 photons")
{
    ScanProtocol proto;
    proto.I0 = 200.0;
    double const g_true = std::log(2.0) / proto.delta_mu; // I = 100
    Sinogram s;
    s.n_views = 200;
    s.n_channels = 500;
    s.g.assign(100000, static_cast<float>(g_true));
    s.pulse_mask.assign(200, 1);
    auto const noisy = log_transform(add_poisson_noise(apply_beer_lambert(s, proto), 11), proto, s);
    double mean = 0.0;
    for (float g : noisy.g)
        mean += g;
    mean /= noisy.g.size();
    CHECK(mean - g_true < 0.01 / proto.delta_mu);
}

TEST_CASE("pulse masks")
{
    ScanProtocol p;
    p.duty_cycle = 1.0;
    p.pulse_width = 10;
    for (auto m : pulse_mask(p, 984))
        REQUIRE(m == 1);

    p.duty_cycle = 0.5;
    auto const half = pulse_mask(p, 100);
    for (int v = 0; v < 100; ++v)
        REQUIRE(half[v] == ((v % 20) < 10 ? 1 : 0));

    p.duty_cycle = 0.75;
    auto const m75 = pulse_mask(p, 13 * 10);
    int on = 0;
    for (int v = 0; v < 13; ++v)
        on += m75[v];
    CHECK(on == 10);
    CHECK(m75[10] == 0);
    CHECK(m75[12] == 0);
    CHECK(m75[13] == 1);

    for (int pw : {10, 50})
    {
        for (double d : {0.1, 0.25, 0.5, 0.75})
        {
            p.pulse_width = pw;
            p.duty_cycle = d;
            auto const m = pulse_mask(p, 984);
            int const period = pw + static_cast<int>(std::lround(pw * (1 - d) / d));
            int count = 0;
            for (int v = 0; v < period; ++v)
                count += m[v];
            CHECK(std::abs(count - d * period) <= 1.0);
        }
    }

    p.pulse_width = 1;
    p.duty_cycle = 0.9;
    CHECK_THROWS_AS(pulse_mask(p, 10), ConfigError);
    p.duty_cycle = 0.0;
    CHECK_THROWS_AS(pulse_mask(p, 10), ConfigError);
}

TEST_CASE("pulsed scans leave masked views empty")
{
    auto const grid = GridSpec::centered(64, 12.8);
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0, 0, 2.0), 2));
    auto const geom = fixtures::small_scanner(12.8, 32, 100, 1);
    ScanProtocol proto;
    proto.grs = 10.0;
    proto.pulse_width = 10;
    proto.duty_cycle = 0.5;
    proto.noise_enabled = true;
    proto.I0 = 1e6;
    auto const sino = simulate_scan(movie, geom, proto);
    for (int v = 0; v < sino.n_views; ++v)
    {
        float peak = 0.0f;
        for (int c = 0; c < sino.n_channels; ++c)
            peak = std::max(peak, sino.at(v, c));
        if (sino.view_on(v))
            CHECK(peak > 1.0f);
        else
            CHECK(peak == 0.0f);
    }
    auto const again = simulate_scan(movie, geom, proto);
    CHECK(again.g == sino.g);
}

TEST_CASE("CNR estimate")
{
    GridSpec grid = GridSpec::centered(40, 4.0);
    Image img(grid);
    std::vector<std::uint8_t> lumen(grid.size(), 0), bg(grid.size(), 0);
    for (int r = 0; r < 40; ++r)
        for (int c = 0; c < 40; ++c)
        {
            (c < 20 ? lumen : bg)[grid.index(r, c)] = 1;
            img.at(r, c) = c < 20 ? 1.0f : 0.0f;
        }
    CHECK(estimate_cnr(img, lumen, bg) == kInfiniteCnr);
    for (int r = 0; r < 40; ++r)
        for (int c = 20; c < 40; ++c)
            img.at(r, c) = ((r + c) % 2) ? 0.1f : -0.1f;
    // Background std of a +-0.1 pattern with zero mean.
    double const sd = std::sqrt(0.01 * 800.0 / 799.0);
    CHECK(estimate_cnr(img, lumen, bg) == doctest::Approx(1.0 / sd).epsilon(1e-5));

    std::vector<std::uint8_t> tiny(grid.size(), 0);
    tiny[0] = 1;
    CHECK_THROWS_AS(estimate_cnr(img, tiny, bg), ConfigError);
    CHECK_THROWS_AS(estimate_cnr(img, lumen, lumen), ConfigError);
}

TEST_CASE("sinogram round trip")
{
    auto const grid = GridSpec::centered(64, 12.8);
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0, 0, 2.0), 2));
    auto const geom = fixtures::small_scanner(12.8, 32, 100, 1);
    ScanProtocol proto;
    proto.grs = 10.0;
    proto.pulse_width = 10;
    proto.duty_cycle = 0.5;
    proto.seed = 99;
    auto const sino = simulate_scan(movie, geom, proto);
    auto const dir = std::filesystem::temp_directory_path() / "ctflow_test_sino";
    std::filesystem::remove_all(dir);
    save_sinogram(sino, dir.string());
    auto const back = load_sinogram(dir.string());
    CHECK(back.g == sino.g);
    CHECK(back.pulse_mask == sino.pulse_mask);
    CHECK(back.view_angle == sino.view_angle);
    CHECK(back.view_time == sino.view_time);
    CHECK(back.geometry.radius() == doctest::Approx(geom.radius()));
    CHECK(back.protocol.seed == 99);
    CHECK(back.protocol.pulse_width == 10);
    std::filesystem::remove_all(dir);
}
