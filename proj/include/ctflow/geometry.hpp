#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "ctflow/common.hpp"

namespace ctflow::geometry {

enum class VesselKind
{
    bifurcation,
    channel,
};

/// Idealised 2D vessel anatomy (lengths in cm, angles in degrees).
///
/// The parent vessel runs along +x with its centreline on y = 0 and its
/// inlet at local x = 0. The whole vessel is shifted along x so that its
/// bounding box is centred on the iso-centre.
struct VesselGeometry
{
    VesselKind kind = VesselKind::bifurcation;
    double H = 1.5;
    double L = 7.5;
    double h = 1.0;
    double l = 12.0;
    double alpha_deg = 30.0;
    double occlusion_radius = 0.225;
    /// Occlusion centre along the lower daughter's outer wall, as a fraction of l.
    double occlusion_position = 0.8;
    bool occlusion_enabled = true;
    /// Daughter length kept in the region of interest, as a fraction of l.
    double roi_daughter_fraction = 0.6;
    bool roi_excludes_occlusion = true;
    /// Cross-section placement (inlet in units of H from the inlet,
    /// outlets as a fraction of l along each daughter).
    double inlet_section_offset = 0.5;
    double outlet_section_fraction = 0.45;

    /// Full-size anatomy: L = 5H, h = 2H/3, l = 8H, alpha = 30, r = 0.15H.
    static VesselGeometry bifurcation(double H);
    /// Straight channel of height H and length `length_in_H` * H.
    static VesselGeometry channel(double H, double length_in_H = 5.0);

    /// Throws ConfigError when the invariants are violated.
    void validate() const;

    /// Diameter reduction at the occlusion, in percent (2r/h).
    double occlusion_percent() const { return 200.0 * occlusion_radius / h; }

    /// Shift from local (inlet-at-origin) coordinates to world coordinates.
    double offset_x() const;
    /// World-space bounding box of the lumen: {x0, y0, x1, y1}.
    std::array<double, 4> bounding_box() const;

    bool in_lumen(double x, double y) const;
    bool in_roi(double x, double y) const;
    bool in_occlusion(double x, double y) const;

    /// Nondimensional coordinates (x from the inlet, y from the centreline, in H).
    double to_nondim_x(double x) const { return (x - offset_x()) / H; }
    double to_nondim_y(double y) const { return y / H; }
    double from_nondim_x(double xt) const { return xt * H + offset_x(); }
    double from_nondim_y(double yt) const { return yt * H; }
};

/// Raster masks of the lumen and the region of interest.
struct RasterMask
{
    GridSpec grid;
    std::vector<std::uint8_t> lumen;
    std::vector<std::uint8_t> roi;

    bool lumen_at(int row, int col) const { return lumen[grid.index(row, col)] != 0; }
    bool roi_at(int row, int col) const { return roi[grid.index(row, col)] != 0; }
    /// Nearest-pixel ROI lookup; false outside the grid.
    bool roi_contains(double x, double y) const;
    bool lumen_contains(double x, double y) const;
    std::size_t lumen_count() const;
    std::size_t roi_count() const;
    /// Pixel-edge bounding box of the ROI: {x0, y0, x1, y1}.
    std::array<double, 4> roi_bounds() const;
};

struct SectionSample
{
    double x = 0.0;
    double y = 0.0;
    int row = 0;
    int col = 0;
};

/// Transverse line used to measure velocity and flow.
struct CrossSection
{
    std::string name;
    std::vector<SectionSample> samples;
    double normal_x = 1.0;
    double normal_y = 0.0;
    /// Spacing between consecutive samples (cm).
    double spacing = 0.0;

    double length() const { return spacing * static_cast<double>(samples.size()); }
};

/// Rasterises the vessel on `grid` (pixel-centre inclusion test).
RasterMask build_bifurcation_mask(VesselGeometry const& geom, GridSpec const& grid);

/// Inlet, upper outlet and lower outlet sections. For a straight channel the
/// outlet section is split into its upper and lower halves.
std::array<CrossSection, 3> locate_cross_sections(VesselGeometry const& geom,
                                                  RasterMask const& mask);

/// What lies beyond a face leaving the ROI.
enum class Exterior
{
    wall,
    inlet,
    outlet,
};

/// Classifies a point outside the ROI by the vessel boundary it lies behind.
Exterior classify_exterior(VesselGeometry const& geom, double x, double y);

} // namespace ctflow::geometry
