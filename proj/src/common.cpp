#include "ctflow/common.hpp"

namespace ctflow {

double bilinear_sample(float const* data, int nx, int ny, double col, double row)
{
    double const fc = std::floor(col);
    double const fr = std::floor(row);
    if (fc < -1.0 || fr < -1.0 || fc >= nx || fr >= ny)
        return 0.0;
    int const c0 = static_cast<int>(fc);
    int const r0 = static_cast<int>(fr);
    double const wc = col - fc;
    double const wr = row - fr;

    auto value = [&](int r, int c) -> double {
        if (r < 0 || c < 0 || r >= ny || c >= nx)
            return 0.0;
        return data[static_cast<std::size_t>(r) * nx + c];
    };
    return (1 - wr) * ((1 - wc) * value(r0, c0) + wc * value(r0, c0 + 1))
           + wr * ((1 - wc) * value(r0 + 1, c0) + wc * value(r0 + 1, c0 + 1));
}

double Image::bilinear(double x, double y) const
{
    return bilinear_sample(data.data(), grid.nx, grid.ny, grid.col_coord(x),
                           grid.row_coord(y));
}

} // namespace ctflow
