#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ctflow/common.hpp"
#include "ctflow/ctsim.hpp"
#include "ctflow/flowgen.hpp"

namespace ctflow::recon {

struct ReconConfig
{
    /// Output grid; should match the ground-truth movie grid.
    GridSpec grid;
    /// 0 selects one full rotation.
    int views_per_frame = 0;
    /// Only "ram-lak" is implemented.
    std::string filter = "ram-lak";
    /// When set, only pixels whose centres lie in {x0, y0, x1, y1} are
    /// reconstructed; the rest stay zero.
    std::optional<std::array<double, 4>> region;

    void validate(ctsim::FanBeamGeometry const& geom) const;
};

/// Equiangular RAM-LAK taps h[n] for n = -(n_channels-1) .. n_channels-1,
/// channel pitch `alpha` (rad): 1/(8 alpha^2) at 0, 0 for even n and
/// -1/(2 pi^2 sin^2(n alpha)) for odd n.
std::vector<double> ramlak_kernel(int n_channels, double alpha);

/// Fan-beam FBP of views [first_view, first_view + views_per_frame).
/// Pulse-masked views contribute nothing (zero-filled).
Image fbp_reconstruct_frame(ctsim::Sinogram const& sino, int first_view,
                            ReconConfig const& config);

/// One frame per rotation, timestamped at the centre of its rotation interval
/// (nondimensional time). The result carries only the c field.
flowgen::FieldMovie reconstruct_movie(ctsim::Sinogram const& sino, ReconConfig const& config);

} // namespace ctflow::recon
