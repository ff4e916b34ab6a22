#pragma once

#include <functional>

#include "ctflow/ctsim.hpp"
#include "ctflow/flowgen.hpp"

namespace fixtures {

using ctflow::GridSpec;
using ctflow::flowgen::Field;
using ctflow::flowgen::FieldMovie;

/// Area-weighted rasterisation of an indicator-like function (ss x ss samples per pixel).
inline std::vector<float> rasterize(GridSpec const& grid,
                                    std::function<double(double, double)> const& f, int ss = 8)
{
    std::vector<float> out(grid.size());
    for (int r = 0; r < grid.ny; ++r)
    {
        for (int c = 0; c < grid.nx; ++c)
        {
            double acc = 0.0;
            for (int a = 0; a < ss; ++a)
                for (int b = 0; b < ss; ++b)
                    acc += f(grid.x_min + (c + (b + 0.5) / ss) * grid.pixel,
                             grid.y_min + (r + (a + 0.5) / ss) * grid.pixel);
            out[grid.index(r, c)] = static_cast<float>(acc / (ss * ss));
        }
    }
    return out;
}

inline std::function<double(double, double)> disk(double cx, double cy, double rho,
                                                  double value = 1.0)
{
    return [=](double x, double y) {
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= rho * rho ? value : 0.0;
    };
}

/// Two identical frames spanning [0, seconds] of world time.
inline FieldMovie static_movie(GridSpec const& grid, std::vector<float> const& image,
                               double seconds = 2.0)
{
    FieldMovie m;
    m.grid = grid;
    m.scale = {30.0, 1.5, 0.0, 0.0};
    m.times = {0.0, m.scale.to_t(seconds)};
    m.window = {m.times.front(), m.times.back()};
    m.allocate({Field::c});
    std::copy(image.begin(), image.end(), m.frame(Field::c, 0));
    std::copy(image.begin(), image.end(), m.frame(Field::c, 1));
    return m;
}

/// Small scanner covering `fov`.
inline ctflow::ctsim::FanBeamGeometry small_scanner(double fov, int channels = 256,
                                                    int views = 360, int subrays = 5)
{
    ctflow::ctsim::FanBeamGeometry g;
    g.fov = fov;
    g.n_channels = channels;
    g.views_per_rotation = views;
    g.subrays_per_channel = subrays;
    return g;
}

} // namespace fixtures
