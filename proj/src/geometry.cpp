#include "ctflow/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

namespace ctflow::geometry {
namespace {

struct Daughter
{
    double ox, oy; // axis origin (local coordinates)
    double dx, dy; // unit axis direction
    double nx, ny; // unit normal pointing to the outer wall

    double axial(double x, double y) const { return (x - ox) * dx + (y - oy) * dy; }
    double transverse(double x, double y) const { return (x - ox) * nx + (y - oy) * ny; }
};

struct Layout
{
    Daughter up{};
    Daughter lo{};
    double back = 0.0; // backward extension of the daughters into the parent
    double occ_x = 0.0;
    double occ_y = 0.0;
    double offset = 0.0;
};

Layout make_layout(VesselGeometry const& g)
{
    Layout lay;
    if (g.kind == VesselKind::channel)
    {
        lay.offset = -0.5 * g.L;
        return lay;
    }
    double const a = 0.5 * g.alpha_deg * kPi / 180.0;
    double const ca = std::cos(a);
    double const sa = std::sin(a);
    // The outer wall of each daughter starts at the parent's corner.
    lay.up = {g.L + 0.5 * g.h * sa, 0.5 * g.H - 0.5 * g.h * ca, ca, sa, -sa, ca};
    lay.lo = {g.L + 0.5 * g.h * sa, -0.5 * g.H + 0.5 * g.h * ca, ca, -sa, -sa, -ca};
    lay.back = g.h;

    double const s_occ = g.occlusion_position * g.l;
    lay.occ_x = lay.lo.ox + s_occ * lay.lo.dx + 0.5 * g.h * lay.lo.nx;
    lay.occ_y = lay.lo.oy + s_occ * lay.lo.dy + 0.5 * g.h * lay.lo.ny;

    double xmin = 0.0;
    double xmax = g.L;
    for (Daughter const* d : {&lay.up, &lay.lo})
    {
        for (double s : {-lay.back, g.l})
        {
            for (double t : {-0.5 * g.h, 0.5 * g.h})
            {
                double const x = d->ox + s * d->dx + t * d->nx;
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
            }
        }
    }
    lay.offset = -0.5 * (xmin + xmax);
    return lay;
}

bool in_parent(VesselGeometry const& g, double xl, double yl)
{
    return xl >= 0.0 && xl <= g.L && std::abs(yl) <= 0.5 * g.H;
}

bool in_daughter(VesselGeometry const& g, Layout const& lay, Daughter const& d,
                 double xl, double yl, double s_max)
{
    double const s = d.axial(xl, yl);
    if (s < -lay.back || s > s_max || xl < 0.0)
        return false;
    return std::abs(d.transverse(xl, yl)) <= 0.5 * g.h;
}

bool occluded_local(VesselGeometry const& g, Layout const& lay, double xl, double yl)
{
    if (g.kind != VesselKind::bifurcation || !g.occlusion_enabled
        || g.occlusion_radius <= 0.0)
        return false;
    double const dx = xl - lay.occ_x;
    double const dy = yl - lay.occ_y;
    return dx * dx + dy * dy <= g.occlusion_radius * g.occlusion_radius;
}

bool lumen_local(VesselGeometry const& g, Layout const& lay, double xl, double yl)
{
    if (in_parent(g, xl, yl))
        return true;
    if (g.kind == VesselKind::channel)
        return false;
    bool const inside = in_daughter(g, lay, lay.up, xl, yl, g.l)
                        || in_daughter(g, lay, lay.lo, xl, yl, g.l);
    return inside && !occluded_local(g, lay, xl, yl);
}

bool roi_local(VesselGeometry const& g, Layout const& lay, double xl, double yl)
{
    if (!lumen_local(g, lay, xl, yl))
        return false;
    if (g.kind == VesselKind::channel || !g.roi_excludes_occlusion)
        return true;
    if (in_parent(g, xl, yl))
        return true;
    double const s_roi = g.roi_daughter_fraction * g.l;
    return in_daughter(g, lay, lay.up, xl, yl, s_roi)
           || in_daughter(g, lay, lay.lo, xl, yl, s_roi);
}

} // namespace

VesselGeometry VesselGeometry::bifurcation(double H)
{
    VesselGeometry g;
    g.kind = VesselKind::bifurcation;
    g.H = H;
    g.L = 5.0 * H;
    g.h = 2.0 * H / 3.0;
    g.l = 8.0 * H;
    g.alpha_deg = 30.0;
    g.occlusion_radius = 0.15 * H;
    return g;
}

VesselGeometry VesselGeometry::channel(double H, double length_in_H)
{
    VesselGeometry g;
    g.kind = VesselKind::channel;
    g.H = H;
    g.L = length_in_H * H;
    g.h = H;
    g.l = 0.0;
    g.alpha_deg = 0.0;
    g.occlusion_radius = 0.0;
    g.occlusion_enabled = false;
    return g;
}

void VesselGeometry::validate() const
{
    if (!(H > 0.0) || !(L > 0.0))
        throw ConfigError("vessel height and length must be positive");
    if (kind == VesselKind::channel)
        return;
    if (!(h > 0.0) || !(l > 0.0))
        throw ConfigError("daughter height and length must be positive");
    if (alpha_deg < 0.0 || alpha_deg >= 90.0)
        throw ConfigError("bifurcation angle must lie in [0, 90) degrees");
    if (occlusion_radius < 0.0 || occlusion_radius > 0.5 * h)
        throw ConfigError("occlusion radius must lie in [0, h/2]");
    if (roi_daughter_fraction <= 0.0 || roi_daughter_fraction > 1.0)
        throw ConfigError("roi_daughter_fraction must lie in (0, 1]");
    if (outlet_section_fraction <= 0.0
        || outlet_section_fraction >= roi_daughter_fraction)
        throw ConfigError("outlet sections must lie upstream of the ROI exit");
    if (occlusion_enabled && roi_excludes_occlusion
        && roi_daughter_fraction * l >= occlusion_position * l - occlusion_radius)
        throw ConfigError("region of interest must end upstream of the occlusion");
}

double VesselGeometry::offset_x() const
{
    return make_layout(*this).offset;
}

std::array<double, 4> VesselGeometry::bounding_box() const
{
    Layout const lay = make_layout(*this);
    if (kind == VesselKind::channel)
        return {lay.offset, -0.5 * H, lay.offset + L, 0.5 * H};
    double xmin = 0.0, xmax = L, ymin = -0.5 * H, ymax = 0.5 * H;
    for (Daughter const* d : {&lay.up, &lay.lo})
    {
        for (double s : {-lay.back, l})
        {
            for (double t : {-0.5 * h, 0.5 * h})
            {
                double const x = d->ox + s * d->dx + t * d->nx;
                double const y = d->oy + s * d->dy + t * d->ny;
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
    }
    return {xmin + lay.offset, ymin, xmax + lay.offset, ymax};
}

bool VesselGeometry::in_lumen(double x, double y) const
{
    Layout const lay = make_layout(*this);
    return lumen_local(*this, lay, x - lay.offset, y);
}

bool VesselGeometry::in_roi(double x, double y) const
{
    Layout const lay = make_layout(*this);
    return roi_local(*this, lay, x - lay.offset, y);
}

bool VesselGeometry::in_occlusion(double x, double y) const
{
    Layout const lay = make_layout(*this);
    return occluded_local(*this, lay, x - lay.offset, y);
}

bool RasterMask::roi_contains(double x, double y) const
{
    int row = 0, col = 0;
    return grid.locate(x, y, row, col) && roi_at(row, col);
}

bool RasterMask::lumen_contains(double x, double y) const
{
    int row = 0, col = 0;
    return grid.locate(x, y, row, col) && lumen_at(row, col);
}

std::size_t RasterMask::lumen_count() const
{
    return static_cast<std::size_t>(std::count(lumen.begin(), lumen.end(), 1));
}

std::size_t RasterMask::roi_count() const
{
    return static_cast<std::size_t>(std::count(roi.begin(), roi.end(), 1));
}

std::array<double, 4> RasterMask::roi_bounds() const
{
    int rmin = grid.ny, rmax = -1, cmin = grid.nx, cmax = -1;
    for (int r = 0; r < grid.ny; ++r)
    {
        for (int c = 0; c < grid.nx; ++c)
        {
            if (!roi_at(r, c))
                continue;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
        }
    }
    if (rmax < 0)
        throw DomainError("empty region of interest");
    return {grid.x_min + cmin * grid.pixel, grid.y_min + rmin * grid.pixel,
            grid.x_min + (cmax + 1) * grid.pixel, grid.y_min + (rmax + 1) * grid.pixel};
}

RasterMask build_bifurcation_mask(VesselGeometry const& geom, GridSpec const& grid)
{
    geom.validate();
    if (grid.nx <= 0 || grid.ny <= 0 || !(grid.pixel > 0.0))
        throw ConfigError("empty imaging grid");
    if (grid.pixel > geom.H / 20.0 * (1.0 + 1e-12))
        throw ConfigError(fmt::format("grid too coarse: pixel {} cm exceeds H/20 = {} cm",
                                      grid.pixel, geom.H / 20.0));
    auto const box = geom.bounding_box();
    if (box[0] < grid.x_min || box[1] < grid.y_min || box[2] > grid.x_max()
        || box[3] > grid.y_max())
        throw ConfigError("vessel geometry does not fit inside the imaging grid");

    Layout const lay = make_layout(geom);
    RasterMask mask;
    mask.grid = grid;
    mask.lumen.assign(grid.size(), 0);
    mask.roi.assign(grid.size(), 0);
    for (int r = 0; r < grid.ny; ++r)
    {
        double const y = grid.y_center(r);
        if (y < box[1] - grid.pixel || y > box[3] + grid.pixel)
            continue;
        for (int c = 0; c < grid.nx; ++c)
        {
            double const xl = grid.x_center(c) - lay.offset;
            std::size_t const i = grid.index(r, c);
            mask.lumen[i] = lumen_local(geom, lay, xl, y) ? 1 : 0;
            mask.roi[i] = (mask.lumen[i] && roi_local(geom, lay, xl, y)) ? 1 : 0;
        }
    }
    return mask;
}

namespace {

/// Samples the transverse line through (cx, cy) with direction (tx, ty) at
/// pixel spacing, keeping the contiguous run of ROI pixels.
CrossSection trace_section(std::string name, RasterMask const& mask, double cx,
                           double cy, double tx, double ty, double nx, double ny,
                           double half_width, double lo_frac = -1.0,
                           double hi_frac = 1.0)
{
    GridSpec const& g = mask.grid;
    CrossSection sec;
    sec.name = std::move(name);
    sec.normal_x = nx;
    sec.normal_y = ny;
    sec.spacing = g.pixel;

    int const n = static_cast<int>(std::ceil(half_width / g.pixel)) + 2;
    bool seen = false;
    bool ended = false;
    for (int k = -n; k < n; ++k)
    {
        double const off = (k + 0.5) * g.pixel;
        if (off < lo_frac * half_width || off > hi_frac * half_width)
            continue;
        double const x = cx + off * tx;
        double const y = cy + off * ty;
        int row = 0, col = 0;
        bool const inside = g.locate(x, y, row, col) && mask.roi_at(row, col);
        if (inside)
        {
            if (ended)
                throw DomainError(fmt::format("cross-section '{}' crosses the lumen boundary "
                                              "irregularly", sec.name));
            sec.samples.push_back({x, y, row, col});
            seen = true;
        }
        else if (seen)
        {
            ended = true;
        }
    }
    if (sec.samples.empty())
        throw DomainError(fmt::format("cross-section '{}' misses the lumen", sec.name));
    return sec;
}

} // namespace

std::array<CrossSection, 3> locate_cross_sections(VesselGeometry const& geom,
                                                  RasterMask const& mask)
{
    Layout const lay = make_layout(geom);
    GridSpec const& g = mask.grid;

    // Inlet: the pixel column containing the requested offset.
    double x_in = lay.offset + geom.inlet_section_offset * geom.H;
    x_in = g.x_center(static_cast<int>(std::floor((x_in - g.x_min) / g.pixel)));
    auto inlet = trace_section("inlet", mask, x_in, 0.0, 0.0, 1.0, 1.0, 0.0,
                               0.5 * geom.H + g.pixel);

    if (geom.kind == VesselKind::channel)
    {
        double x_out = lay.offset + geom.L - geom.inlet_section_offset * geom.H;
        x_out = g.x_center(static_cast<int>(std::floor((x_out - g.x_min) / g.pixel)));
        double const hw = 0.5 * geom.H + g.pixel;
        auto upper = trace_section("outlet_upper", mask, x_out, 0.0, 0.0, 1.0, 1.0, 0.0,
                                   hw, 0.0, 1.0);
        auto lower = trace_section("outlet_lower", mask, x_out, 0.0, 0.0, 1.0, 1.0, 0.0,
                                   hw, -1.0, 0.0);
        return {std::move(inlet), std::move(upper), std::move(lower)};
    }

    double const s = geom.outlet_section_fraction * geom.l;
    auto outlet = [&](char const* name, Daughter const& d) {
        double const cx = d.ox + s * d.dx + lay.offset;
        double const cy = d.oy + s * d.dy;
        return trace_section(name, mask, cx, cy, d.nx, d.ny, d.dx, d.dy,
                             0.5 * geom.h + g.pixel);
    };
    return {std::move(inlet), outlet("outlet_upper", lay.up), outlet("outlet_lower", lay.lo)};
}

Exterior classify_exterior(VesselGeometry const& geom, double x, double y)
{
    Layout const lay = make_layout(geom);
    double const xl = x - lay.offset;
    if (xl < 0.0 && std::abs(y) <= 0.5 * geom.H)
        return Exterior::inlet;
    if (geom.kind == VesselKind::channel)
        return (xl > geom.L && std::abs(y) <= 0.5 * geom.H) ? Exterior::outlet
                                                            : Exterior::wall;
    double const s_roi = geom.roi_excludes_occlusion ? geom.roi_daughter_fraction * geom.l
                                                     : geom.l;
    for (Daughter const* d : {&lay.up, &lay.lo})
    {
        if (d->axial(xl, y) > s_roi && std::abs(d->transverse(xl, y)) <= 0.5 * geom.h)
            return Exterior::outlet;
    }
    return Exterior::wall;
}

} // namespace ctflow::geometry
