#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ctflow/recon.hpp"
#include "fixtures.hpp"

using namespace ctflow;
using namespace ctflow::recon;
using ctsim::ScanProtocol;
using flowgen::Field;

namespace {

struct DiskStats
{
    double inside = 0.0;
    double outside = 0.0;
    double rmse_inside = 0.0;
};

DiskStats disk_stats(Image const& img, double cx, double cy, double rho, double value)
{
    GridSpec const& g = img.grid;
    double const rim = 2.0 * g.pixel;
    double si = 0.0, so = 0.0, se = 0.0;
    int ni = 0, no = 0;
    for (int r = 0; r < g.ny; ++r)
    {
        for (int c = 0; c < g.nx; ++c)
        {
            double const d = std::hypot(g.x_center(c) - cx, g.y_center(r) - cy);
            double const v = img.at(r, c);
            if (d < rho - rim)
            {
                si += v;
                se += (v - value) * (v - value);
                ++ni;
            }
            else if (d > rho + rim && d < 4.0 * rho)
            {
                so += v;
                ++no;
            }
        }
    }
    return {si / ni, so / no, std::sqrt(se / ni)};
}

} // namespace

TEST_CASE("RAM-LAK kernel is symmetric with vanishing sum")
{
    auto const geom = ctsim::FanBeamGeometry::full_size();
    auto const h = ramlak_kernel(geom.n_channels, geom.channel_pitch());
    int const c = geom.n_channels - 1;
    for (int n = 1; n < geom.n_channels; ++n)
    {
        REQUIRE(h[c + n] == h[c - n]);
        if (n % 2 == 0)
            REQUIRE(h[c + n] == 0.0);
        else
            REQUIRE(h[c + n] < 0.0);
    }
    double const sum = std::accumulate(h.begin(), h.end(), 0.0);
    CHECK(std::abs(sum) / h[c] < 1e-3);
}

TEST_CASE("static disk round trip")
{
    auto const grid = GridSpec::centered(256, 12.8);
    double const rho = 0.75;
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0.4, -0.3, rho)));
    auto const geom = fixtures::small_scanner(12.8, 512, 984);
    ScanProtocol proto;
    proto.grs = 2.0;
    auto const sino = ctsim::forward_project_dynamic(movie, geom, proto);
    ReconConfig cfg;
    cfg.grid = grid;
    auto const img = fbp_reconstruct_frame(sino, 0, cfg);
    auto const s = disk_stats(img, 0.4, -0.3, rho, 1.0);
    CHECK(std::abs(s.inside - 1.0) < 0.03);
    CHECK(std::abs(s.outside) < 0.02);
    CHECK(s.rmse_inside < 0.03);

    // Region-restricted reconstruction matches inside the region.
    cfg.region = std::array<double, 4>{-1.0, -1.5, 1.5, 1.0};
    auto const part = fbp_reconstruct_frame(sino, 0, cfg);
    int row = 0, col = 0;
    REQUIRE(grid.locate(0.4, -0.3, row, col));
    CHECK(part.at(row, col) == img.at(row, col));
    REQUIRE(grid.locate(4.0, 4.0, row, col));
    CHECK(part.at(row, col) == 0.0f);
}

TEST_CASE("zero sinogram reconstructs to zero")
{
    auto const grid = GridSpec::centered(64, 12.8);
    auto const movie = fixtures::static_movie(grid, std::vector<float>(grid.size(), 0.0f));
    auto const geom = fixtures::small_scanner(12.8, 64, 120, 1);
    ScanProtocol proto;
    proto.grs = 2.0;
    auto const sino = ctsim::forward_project_dynamic(movie, geom, proto);
    ReconConfig cfg;
    cfg.grid = grid;
    for (float v : fbp_reconstruct_frame(sino, 0, cfg).data)
        REQUIRE(std::abs(v) < 1e-10);
}

TEST_CASE("FBP is linear")
{
    auto const grid = GridSpec::centered(128, 12.8);
    auto const geom = fixtures::small_scanner(12.8, 256, 360, 1);
    ScanProtocol proto;
    proto.grs = 2.0;
    auto const a = ctsim::forward_project_dynamic(
        fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(-2, 0, 1), 2)), geom, proto);
    auto const b = ctsim::forward_project_dynamic(
        fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(2, 1, 0.7), 2)), geom, proto);
    auto sum = a;
    for (std::size_t i = 0; i < sum.g.size(); ++i)
        sum.g[i] = 2.0f * a.g[i] - 0.5f * b.g[i];
    ReconConfig cfg;
    cfg.grid = grid;
    auto const ra = fbp_reconstruct_frame(a, 0, cfg);
    auto const rb = fbp_reconstruct_frame(b, 0, cfg);
    auto const rs = fbp_reconstruct_frame(sum, 0, cfg);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        worst = std::max(worst, std::abs(rs.data[i] - (2.0 * ra.data[i] - 0.5 * rb.data[i])));
    CHECK(worst < 1e-5);

    // Disjoint disks add.
    auto both = a;
    for (std::size_t i = 0; i < both.g.size(); ++i)
        both.g[i] = a.g[i] + b.g[i];
    auto const rboth = fbp_reconstruct_frame(both, 0, cfg);
    worst = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        worst = std::max(worst, std::abs(double(rboth.data[i]) - (double(ra.data[i]) + rb.data[i])));
    CHECK(worst < 1e-6);
}

TEST_CASE("static movie frames are identical at any GRS")
{
    auto const grid = GridSpec::centered(96, 12.8);
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0.5, 0.5, 1.5), 2), 3.0);
    auto const geom = fixtures::small_scanner(12.8, 128, 180, 1);
    ReconConfig cfg;
    cfg.grid = grid;
    for (double grs : {1.0, 4.0})
    {
        ScanProtocol proto;
        proto.grs = grs;
        proto.n_rotations = 3;
        auto const sino = ctsim::forward_project_dynamic(movie, geom, proto);
        auto const rec = reconstruct_movie(sino, cfg);
        REQUIRE(rec.nt() == 3);
        auto const single = fbp_reconstruct_frame(sino, 0, cfg);
        for (int k = 0; k < 3; ++k)
        {
            CHECK(rec.times[k] == doctest::Approx(movie.scale.to_t((k + 0.5) / grs)));
            for (std::size_t i = 0; i < grid.size(); ++i)
                REQUIRE(std::abs(rec.frame(Field::c, k)[i] - single.data[i]) < 1e-8);
        }
    }
}

TEST_CASE("pulsed views are zero-filled and short sinograms rejected")
{
    auto const grid = GridSpec::centered(64, 12.8);
    auto const movie = fixtures::static_movie(grid, fixtures::rasterize(grid, fixtures::disk(0, 0, 2), 2));
    auto const geom = fixtures::small_scanner(12.8, 64, 120, 1);
    ScanProtocol proto;
    proto.grs = 2.0;
    auto sino = ctsim::forward_project_dynamic(movie, geom, proto);
    ReconConfig cfg;
    cfg.grid = grid;
    auto zeroed = sino;
    auto masked = sino;
    for (int v = 0; v < sino.n_views; v += 2)
    {
        masked.pulse_mask[v] = 0;
        for (int c = 0; c < sino.n_channels; ++c)
            zeroed.g[static_cast<std::size_t>(v) * sino.n_channels + c] = 0.0f;
    }
    CHECK(fbp_reconstruct_frame(masked, 0, cfg).data == fbp_reconstruct_frame(zeroed, 0, cfg).data);
    CHECK_THROWS_AS(fbp_reconstruct_frame(sino, 1, cfg), ConfigError);
    cfg.views_per_frame = 60;
    CHECK_THROWS_AS(fbp_reconstruct_frame(sino, 0, cfg), ConfigError);
}

TEST_CASE("motion artifacts grow as the gantry slows")
{
    auto params = flowgen::FlowParams::from_dimensional(30.0, 1.5, 3.8e-6, 7.33, 0.4, 1.0 / kPi);
    auto const geom_v = geometry::VesselGeometry::channel(1.5);
    auto const grid = GridSpec::centered(256, 12.8);
    auto const truth = flowgen::synthesize_channel_case(params, geom_v, grid);
    auto const mask = geometry::build_bifurcation_mask(geom_v, grid);
    auto const scanner = fixtures::small_scanner(12.8, 512, 984);
    ReconConfig cfg;
    cfg.grid = grid;
    cfg.region = mask.roi_bounds();

    auto rmse = [&](double grs) {
        ScanProtocol proto;
        proto.grs = grs;
        proto.n_rotations = static_cast<int>(grs);
        auto const sino = ctsim::forward_project_dynamic(truth, scanner, proto);
        auto const rec = reconstruct_movie(sino, cfg);
        double se = 0.0;
        long n = 0;
        for (int k = 0; k < rec.nt(); ++k)
        {
            int const kt = truth.nearest_frame(rec.times[k]);
            for (std::size_t i = 0; i < grid.size(); ++i)
            {
                if (!mask.roi[i])
                    continue;
                double const d = rec.frame(Field::c, k)[i] - truth.frame(Field::c, kt)[i];
                se += d * d;
                ++n;
            }
        }
        return std::sqrt(se / n);
    };
    double const r1 = rmse(1.0);
    double const r4 = rmse(4.0);
    double const r10 = rmse(10.0);
    MESSAGE("frame RMSE at 1/4/10 Hz: " << r1 << " " << r4 << " " << r10);
    CHECK(r1 > r4);
    CHECK(r4 > r10);
}
