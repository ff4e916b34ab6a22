#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctflow {

inline constexpr double kPi = std::numbers::pi;

/// Base error for all library failures.
class Error : public std::runtime_error
{
  public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration / arguments.
class ConfigError : public Error
{
  public:
    using Error::Error;
};

/// Input outside the domain of an operation.
class DomainError : public Error
{
  public:
    using Error::Error;
};

/// Malformed artifact on disk.
class FormatError : public Error
{
  public:
    using Error::Error;
};

/// Square-pixel imaging grid centred on the iso-centre.
///
/// Pixel (row, col) has its centre at
///   x = x_min + (col + 0.5) * pixel,  y = y_min + (row + 0.5) * pixel.
/// Rows run along +y, columns along +x. Lengths are in cm.
struct GridSpec
{
    int nx = 0;
    int ny = 0;
    double pixel = 0.0;
    double x_min = 0.0;
    double y_min = 0.0;

    /// nx-by-ny grid covering a square field of view of side `fov` centred at 0.
    static GridSpec centered(int n, double fov)
    {
        GridSpec g;
        g.nx = n;
        g.ny = n;
        g.pixel = fov / n;
        g.x_min = -0.5 * fov;
        g.y_min = -0.5 * fov;
        return g;
    }

    std::size_t size() const { return static_cast<std::size_t>(nx) * ny; }
    std::size_t index(int row, int col) const
    {
        return static_cast<std::size_t>(row) * nx + col;
    }
    double x_center(int col) const { return x_min + (col + 0.5) * pixel; }
    double y_center(int row) const { return y_min + (row + 0.5) * pixel; }
    double x_max() const { return x_min + nx * pixel; }
    double y_max() const { return y_min + ny * pixel; }

    /// Continuous column / row coordinate (pixel centres at integers).
    double col_coord(double x) const { return (x - x_min) / pixel - 0.5; }
    double row_coord(double y) const { return (y - y_min) / pixel - 0.5; }

    /// Nearest pixel, or false if (x, y) lies outside the grid.
    bool locate(double x, double y, int& row, int& col) const
    {
        double const c = std::floor((x - x_min) / pixel);
        double const r = std::floor((y - y_min) / pixel);
        if (c < 0 || r < 0 || c >= nx || r >= ny)
            return false;
        col = static_cast<int>(c);
        row = static_cast<int>(r);
        return true;
    }

    bool operator==(GridSpec const&) const = default;
};

/// Constants mapping world units (cm, s) to the nondimensional frame used
/// by the flow fields: x~ = (x - x_origin) / H, y~ = (y - y_origin) / H,
/// t~ = t * u_c / H.
struct Nondim
{
    double u_c = 30.0; // cm/s
    double H = 1.5;    // cm
    double x_origin = 0.0;
    double y_origin = 0.0;

    double to_t(double seconds) const { return seconds * u_c / H; }
    double to_seconds(double t) const { return t * H / u_c; }
    double to_x(double x_cm) const { return (x_cm - x_origin) / H; }
    double to_y(double y_cm) const { return (y_cm - y_origin) / H; }
    double from_x(double xt) const { return xt * H + x_origin; }
    double from_y(double yt) const { return yt * H + y_origin; }
    /// Nondimensional velocity to m/s.
    double velocity_mps(double ut) const { return ut * u_c * 0.01; }

    bool operator==(Nondim const&) const = default;
};

/// Row-major single-precision image on a GridSpec.
struct Image
{
    GridSpec grid;
    std::vector<float> data;

    Image() = default;
    explicit Image(GridSpec const& g, float fill = 0.0f)
        : grid(g), data(g.size(), fill)
    {
    }

    float& at(int row, int col) { return data[grid.index(row, col)]; }
    float at(int row, int col) const { return data[grid.index(row, col)]; }

    /// Bilinear interpolation at (x, y) in cm; zero outside the grid.
    double bilinear(double x, double y) const;
};

/// Bilinear sample of a row-major array (pixel centres at integer coords);
/// samples outside the array contribute zero.
double bilinear_sample(float const* data, int nx, int ny, double col,
                       double row);

} // namespace ctflow
