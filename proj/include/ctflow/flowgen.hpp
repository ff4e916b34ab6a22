#pragma once

#include <array>
#include <complex>
#include <functional>
#include <string>
#include <vector>

#include "ctflow/common.hpp"
#include "ctflow/geometry.hpp"

namespace ctflow::flowgen {

/// Pulsatile channel-flow parameters.
///
/// Dimensional inputs use cm/s, cm, m^2/s and rad/s; everything else is
/// nondimensional. The Womersley profile is
///   u~ = Re/2 dP (1/4 - y~^2)
///        + Re Re{ A Re / (i alpha^2) [cosh(lambda y~) / cosh(lambda/2) - 1] e^{i St t~} }
/// with alpha^2 = Re St and lambda = sqrt(i Re St).
struct FlowParams
{
    double u_c = 30.0;      // cm/s
    double H = 1.5;         // cm
    double nu = 3.8e-6;     // m^2/s
    double omega = 7.33;    // rad/s
    double Re = 0.0;
    double St = 0.0;
    double dP = 0.0;
    double A = 0.0;
    double beta = 2.0;

    /// Re and St from the dimensional inputs; dP and A normalised so that
    /// max u~ = 1 with the pulsatile term contributing `pulsatile_fraction`
    /// of the centreline amplitude.
    static FlowParams from_dimensional(double u_c, double H, double nu, double omega,
                                       double pulsatile_fraction = 0.4,
                                       double beta = 2.0);
    /// u_c = 30 cm/s, H = 1.5 cm, nu = 3.8e-6 m^2/s, omega = 7.33 rad/s.
    static FlowParams reference(double pulsatile_fraction = 0.4);

    double womersley_alpha() const { return std::sqrt(Re * St); }
    std::complex<double> lambda() const
    {
        return std::sqrt(std::complex<double>(0.0, Re * St));
    }
    /// Nondimensional flow period 2 pi / St.
    double period() const { return 2.0 * kPi / St; }

    Nondim nondim() const { return {u_c, H, 0.0, 0.0}; }
};

/// Streamwise velocity u~(y~, t~); throws DomainError for |y~| > 1/2.
double womersley_velocity(double y, double t, FlowParams const& params);

/// Streamwise pressure gradient dp~/dx~ of the channel solution.
double womersley_pressure_gradient(double t, FlowParams const& params);

/// Maximum of u~ over a dense (y~, t~) sampling of one period.
double womersley_max_velocity(FlowParams const& params, int ny = 401, int nt = 400);

/// Inlet contrast concentration sin^2(beta St pi t~).
double inlet_concentration(double t, FlowParams const& params);

enum class Field
{
    c = 0,
    u = 1,
    v = 2,
    p = 3,
};

char const* field_name(Field f);

/// Time-resolved nondimensional fields on the imaging grid.
///
/// Each present field is stored as (nt, ny, nx) float32. Absent fields are
/// empty vectors (a reconstructed movie carries only c).
struct FieldMovie
{
    GridSpec grid;
    std::vector<double> times;
    std::array<std::vector<float>, 4> fields;
    std::vector<std::uint8_t> lumen;
    std::vector<std::uint8_t> roi;
    Nondim scale;
    /// Nondimensional time window the movie represents.
    std::array<double, 2> window{0.0, 0.0};
    std::string provenance;

    int nt() const { return static_cast<int>(times.size()); }
    bool has(Field f) const { return !fields[static_cast<int>(f)].empty(); }
    std::vector<float>& data(Field f) { return fields[static_cast<int>(f)]; }
    std::vector<float> const& data(Field f) const { return fields[static_cast<int>(f)]; }
    float const* frame(Field f, int k) const
    {
        return data(f).data() + static_cast<std::size_t>(k) * grid.size();
    }
    float* frame(Field f, int k)
    {
        return data(f).data() + static_cast<std::size_t>(k) * grid.size();
    }
    bool roi_at(std::size_t i) const { return !roi.empty() && roi[i] != 0; }

    /// Allocates zeroed storage for the given fields.
    void allocate(std::initializer_list<Field> which);

    /// Frame k and weight w such that t = (1-w) t_k + w t_{k+1}; clamps at the ends.
    void bracket(double t, int& k, double& w) const;
    /// Index of the frame nearest to t.
    int nearest_frame(double t) const;
    /// Linear-in-time, bilinear-in-space sample at world position (cm).
    double sample(Field f, double t, double x_cm, double y_cm) const;

    /// Throws FormatError on shape mismatch or non-monotonic times.
    void validate() const;
};

/// Cell-centred nondimensional velocity provider: fills u, v (grid-sized) at t~.
using VelocityFn = std::function<void(double t, std::vector<double>& u,
                                      std::vector<double>& v)>;
using InletFn = std::function<double(double t)>;

/// Active cells and boundary classification for scalar transport.
struct AdvectionDomain
{
    GridSpec grid;
    /// Pixel size in nondimensional length units.
    double dx = 1.0;
    std::vector<std::uint8_t> active;
    /// Exterior kind behind each of the four faces of each cell
    /// (order: -x, +x, -y, +y). Only meaningful for faces leaving the domain.
    std::vector<std::array<geometry::Exterior, 4>> exterior;
    bool periodic_x = false;
    bool periodic_y = false;

    /// Domain restricted to the ROI of `mask`, with faces classified by `geom`.
    static AdvectionDomain from_mask(geometry::VesselGeometry const& geom,
                                     geometry::RasterMask const& mask);
    /// Every cell active; off-grid faces treated as `edge` (or periodic).
    static AdvectionDomain box(GridSpec const& grid, double dx,
                               geometry::Exterior edge = geometry::Exterior::wall,
                               bool periodic_x = false, bool periodic_y = false);
};

struct AdvectOptions
{
    double t0 = 0.0;
    double dt = 0.0;
    int n_steps = 0;
    /// A frame is recorded every `record_every` steps (the initial state is frame 0).
    int record_every = 1;
    double max_cfl = 0.3;
};

/// Advances dc/dt + div(u c) = 0 with WENO3 fluxes and SSP-RK3.
///
/// Inlet faces take Dirichlet data from `inlet` (inlet cells are pinned to it);
/// outlets extrapolate; walls carry no flux. Returns recorded frames
/// (grid-sized, double precision).
std::vector<std::vector<double>> advect_weno3(std::vector<double> const& c_init,
                                              VelocityFn const& velocity,
                                              AdvectionDomain const& domain,
                                              AdvectOptions const& options,
                                              InletFn const& inlet);

/// Same, with velocity linearly interpolated in time from a FieldMovie.
std::vector<std::vector<double>> advect_weno3(std::vector<double> const& c_init,
                                              FieldMovie const& velocity,
                                              AdvectionDomain const& domain,
                                              AdvectOptions const& options,
                                              InletFn const& inlet);

struct ChannelCaseOptions
{
    int nt = 100;
    double n_cycles = 2.0;
    double cfl = 0.3;
};

/// Self-contained ground truth for a straight channel: Womersley u, v = 0,
/// p from the analytic pressure gradient (zero at the inlet), and c advected
/// with the sin^2 inlet condition.
FieldMovie synthesize_channel_case(FlowParams const& params,
                                   geometry::VesselGeometry const& geom,
                                   GridSpec const& grid,
                                   ChannelCaseOptions const& options = {});

/// Reads a movie from the artifact store, validates it and zeroes velocities
/// outside the lumen.
FieldMovie load_field_movie(std::string const& path);
void save_field_movie(FieldMovie const& movie, std::string const& path);

} // namespace ctflow::flowgen
