#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ctflow/common.hpp"
#include "ctflow/flowgen.hpp"

namespace ctflow::ctsim {

/// Equiangular fan-beam scanner geometry (angles in degrees, lengths in cm).
struct FanBeamGeometry
{
    double fan_angle_deg = 43.6;
    int n_channels = 1600;
    int subrays_per_channel = 5;
    int views_per_rotation = 984;
    double fov = 50.0;
    /// Source-to-isocentre distance; 0 selects the value at which the fan
    /// exactly covers the inscribed FOV circle.
    double source_to_iso = 0.0;

    /// 43.6 degree fan, 1600 channels x 5 subrays, 984 views, 50 cm FOV.
    static FanBeamGeometry full_size();

    double radius() const;
    double fan_angle() const { return fan_angle_deg * kPi / 180.0; }
    double channel_pitch() const { return fan_angle() / n_channels; }
    /// Fan angle of channel j's centre (0 on the central ray).
    double channel_angle(int j) const
    {
        return (j - 0.5 * (n_channels - 1)) * channel_pitch();
    }
    void validate() const;
};

/// Acquisition settings for one scan.
struct ScanProtocol
{
    double grs = 4.0;        // rotations per second
    double theta0_deg = 0.0; // gantry starting angle
    double t_start = 0.0;    // seconds
    int n_rotations = 1;
    double I0 = 1e15;
    /// Views per pulse; 0 means continuous exposure.
    int pulse_width = 0;
    double duty_cycle = 1.0;
    /// Contrast attenuation per unit concentration (1/cm).
    double delta_mu = 0.2;
    bool noise_enabled = false;
    std::uint64_t seed = 0;

    void validate() const;
};

/// A straight ray: origin plus unit direction.
struct Ray
{
    double ox = 0.0, oy = 0.0;
    double dx = 1.0, dy = 0.0;
};

/// Ray leaving the source at gantry angle `theta` (rad) with fan angle `gamma`.
Ray fan_ray(FanBeamGeometry const& geom, double theta, double gamma);

/// Parametric interval of the ray inside an axis-aligned box {x0, y0, x1, y1};
/// returns false if the ray misses it.
bool clip_ray(Ray const& ray, std::array<double, 4> const& box, double& t0, double& t1);

/// Line-integral data with per-view timing.
struct Sinogram
{
    int n_views = 0;
    int n_channels = 0;
    int n_subrays = 1;
    /// Line integrals (concentration x cm), (n_views, n_channels).
    std::vector<float> g;
    /// Per-subray line integrals (n_views, n_channels, n_subrays); filled when
    /// the intensity-domain path is needed.
    std::vector<float> subray_g;
    std::vector<double> view_angle; // rad
    std::vector<double> view_time;  // s
    std::vector<std::uint8_t> pulse_mask;
    FanBeamGeometry geometry;
    ScanProtocol protocol;
    Nondim scale;
    /// 0 for noise-free data, otherwise the incident photon count.
    double noise_I0 = 0.0;

    float at(int view, int channel) const
    {
        return g[static_cast<std::size_t>(view) * n_channels + channel];
    }
    bool view_on(int view) const { return pulse_mask[view] != 0; }
};

/// Photon counts per (view, channel).
struct Intensities
{
    int n_views = 0;
    int n_channels = 0;
    std::vector<double> values;
};

/// Time-resolved projection of the movie's concentration.
///
/// Each "on" view integrates c(x, y, t_v) along the subrays of every channel
/// (half-pixel steps, bilinear in space, linear in time) and averages them.
Sinogram forward_project_dynamic(flowgen::FieldMovie const& movie,
                                 FanBeamGeometry const& geom, ScanProtocol const& protocol,
                                 bool keep_subrays = false);

/// I = I0 exp(-delta_mu g), averaged over subrays when they are present.
Intensities apply_beer_lambert(Sinogram const& sino, ScanProtocol const& protocol);

/// Independent Poisson draw per entry, seeded per view.
Intensities add_poisson_noise(Intensities const& I, std::uint64_t seed);

/// g = -ln(max(I_n, 1) / I0) / delta_mu, returned in a copy of `like`.
Sinogram log_transform(Intensities const& noisy, ScanProtocol const& protocol,
                       Sinogram const& like);

/// On/off pattern: pulse_width on views followed by round(pw (1 - d) / d) off.
std::vector<std::uint8_t> pulse_mask(ScanProtocol const& protocol, int n_views);

/// Projection followed by the Beer-Lambert / Poisson / log path when noise
/// is enabled.
Sinogram simulate_scan(flowgen::FieldMovie const& movie, FanBeamGeometry const& geom,
                       ScanProtocol const& protocol);

inline constexpr double kInfiniteCnr = std::numeric_limits<double>::infinity();

/// (mean(lumen) - mean(background)) / std(background); infinity when the
/// background has no spread.
double estimate_cnr(Image const& image, std::vector<std::uint8_t> const& lumen_roi,
                    std::vector<std::uint8_t> const& background_roi);

void save_sinogram(Sinogram const& sino, std::string const& path);
Sinogram load_sinogram(std::string const& path);

} // namespace ctflow::ctsim
