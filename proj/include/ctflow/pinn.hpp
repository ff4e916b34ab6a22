#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctflow/common.hpp"
#include "ctflow/ctsim.hpp"
#include "ctflow/flowgen.hpp"
#include "ctflow/geometry.hpp"

namespace ctflow::pinn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Nondimensional space-time point.
struct Point
{
    double t = 0.0;
    double x = 0.0;
    double y = 0.0;
};

/// Affine map of (t~, x~, y~) onto [-1, 1]^3.
struct Normalization
{
    std::array<double, 3> lo{-1.0, -1.0, -1.0};
    std::array<double, 3> hi{1.0, 1.0, 1.0};

    /// d(normalised)/d(nondim) along axis a (0 = t, 1 = x, 2 = y).
    double slope(int a) const { return 2.0 / (hi[a] - lo[a]); }
    double apply(int a, double q) const { return (q - lo[a]) * slope(a) - 1.0; }
    bool contains(Point const& p) const;
    void validate() const;
};

struct NetworkConfig
{
    int hidden_layers = 6;
    int width = 64;
    std::uint64_t seed = 0;

    /// 10 x 200, the full-size network.
    static NetworkConfig full(std::uint64_t seed = 0) { return {10, 200, seed}; }
    void validate() const;
};

struct FieldValues
{
    double c = 0.0;
    double u = 0.0;
    double v = 0.0;
    double p = 0.0;
};

struct Residuals
{
    double e1 = 0.0;
    double e2 = 0.0;
    double e3 = 0.0;
    double e4 = 0.0;
};

template <class T>
struct LayerT
{
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> W;
    Eigen::Matrix<T, Eigen::Dynamic, 1> b;
};

using Layer = LayerT<double>;
using Parameters = std::vector<Layer>;

/// Derivative channels carried through a forward pass. Channel blocks are
/// laid out side by side: value, d/dt, d/dx, d/dy, d2/dx2, d2/dy2 (with
/// respect to the normalised inputs).
enum class Jet
{
    value = 1,
    second = 6,
};

/// Activations kept for the backward pass.
template <class T>
struct TapeT
{
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
    int batch = 0;
    int channels = 1;
    std::vector<Mat> inputs; // per layer, width x (channels * batch)
    std::vector<Mat> pre;    // hidden pre-activations
    /// 4 x (channels * batch); rows c, u, v, p.
    Mat out;
    // Backward scratch.
    Mat g, dh;
};

using Tape = TapeT<double>;

/// Fully connected SiLU network (t~, x~, y~) -> (c, u, v, p).
class FieldNetwork
{
  public:
    FieldNetwork() = default;
    FieldNetwork(NetworkConfig const& config, Normalization const& norm);

    NetworkConfig const& config() const { return config_; }
    Normalization const& normalization() const { return norm_; }
    Parameters& parameters() { return params_; }
    Parameters const& parameters() const { return params_; }
    std::size_t parameter_count() const;

    /// Throws DomainError if any point lies outside the normalisation box.
    void check_domain(std::vector<Point> const& points) const;

    Tape forward(std::vector<Point> const& points, Jet jet) const;
    /// Adds d(loss)/d(params) to `grad` given d(loss)/d(tape.out).
    void backward(Tape const& tape, Matrix const& d_out, Parameters& grad) const;

    Parameters zeros_like() const;

    /// Value-only evaluation; rejects out-of-domain points.
    std::vector<FieldValues> evaluate(std::vector<Point> const& points) const;

  private:
    NetworkConfig config_;
    Normalization norm_;
    Parameters params_;
};

/// Navier-Stokes and transport residuals at the given points.
std::vector<Residuals> physics_residuals(FieldNetwork const& net,
                                         std::vector<Point> const& points, double Re);

/// Mean of e1^2 + e2^2 + e3^2 + e4^2; accumulates the gradient when `grad` is set.
double loss_physics(FieldNetwork const& net, std::vector<Point> const& points, double Re,
                    Parameters* grad = nullptr);

struct ConcentrationSample
{
    Point at;
    double c = 0.0;
};

/// lambda0 * mean (c^ - c_CT)^2.
double loss_imageflow_data(FieldNetwork const& net, std::vector<ConcentrationSample> const& data,
                           double lambda0, Parameters* grad = nullptr);

/// Midpoint-rule points of one ray that fall inside the ROI.
struct RayQuadrature
{
    std::vector<Point> points;
    double dl = 0.0; // cm
    double chord = 0.0;
};

/// One measured ray of the sinogram with its quadrature.
struct RaySample
{
    int view = 0;
    int channel = 0;
    double g = 0.0; // concentration x cm
    RayQuadrature quad;
};

/// Samples n_p points uniformly along the central ray of (view, channel)
/// clipped to the grid's field of view, keeps those whose nearest pixel is
/// in `roi`, and stamps them with the view time.
RayQuadrature ray_quadrature(ctsim::Sinogram const& sino, int view, int channel,
                             GridSpec const& grid, std::vector<std::uint8_t> const& roi,
                             int n_p = 1600);

/// Draws rays uniformly among pulse-on views and channels whose central ray
/// crosses the ROI bounding box.
class RaySampler
{
  public:
    RaySampler(ctsim::Sinogram const& sino, GridSpec const& grid,
               std::vector<std::uint8_t> const& roi, int n_p);
    std::vector<RaySample> draw(std::mt19937_64& rng, int n) const;
    /// Number of candidate rays.
    std::uint64_t size() const { return cumulative_.empty() ? 0 : cumulative_.back(); }

  private:
    ctsim::Sinogram const* sino_;
    GridSpec grid_;
    std::vector<std::uint8_t> const* roi_;
    int n_p_;
    std::vector<int> views_;
    std::vector<int> first_channel_;
    std::vector<std::uint64_t> cumulative_;
};

/// g^ = dl * sum c^(x_k, t_view) over the ROI points of the ray.
double sinoflow_render(FieldNetwork const& net, RayQuadrature const& quad);
/// The same quadrature applied to a movie's concentration.
double sinoflow_render(flowgen::FieldMovie const& movie, RayQuadrature const& quad);

/// lambda1 * mean ((g^ - g) / unit)^2 with ray integrals in cm and `unit`
/// the length (cm) in which the misfit is measured.
double loss_sinoflow_data(FieldNetwork const& net, std::vector<RaySample> const& rays,
                          double lambda1, double unit = 1.0, Parameters* grad = nullptr);

enum class Mode
{
    imageflow,
    sinoflow,
};

char const* mode_name(Mode m);
Mode mode_from_name(std::string const& name);

struct TrainConfig
{
    Mode mode = Mode::sinoflow;
    int iterations = 20000;
    double learning_rate = 1e-3;
    double lambda0 = 1.0;
    /// Negative selects 1 / n_p.
    double lambda1 = -1.0;
    int n_p = 1600;
    double Re = 1184.0;
    int n_phys = 4096;
    int n_data = 4096;
    int n_rays = 16;
    std::uint64_t seed = 0;
    int history_every = 100;
    int checkpoint_every = 0;
    std::string checkpoint_dir;
    /// Length unit (cm) of the sinogram misfit; 0 selects fov / n_p, one
    /// quadrature step on a full-FOV chord.
    double sino_unit = 0.0;
    /// Run forward and backward passes in float (parameters and the
    /// optimiser state stay double).
    bool single_precision = true;

    double effective_lambda1() const { return lambda1 >= 0.0 ? lambda1 : 1.0 / n_p; }
    void validate() const;
};

/// Observations and domain for one training run.
struct TrainingData
{
    GridSpec grid;
    Nondim scale;
    /// ROI of the lumen on `grid`; physics points and rendered rays live here.
    std::vector<std::uint8_t> roi;
    /// Nondimensional time window of the acquisition.
    std::array<double, 2> window{0.0, 0.0};
    /// ImageFlow: reconstructed concentration movie.
    flowgen::FieldMovie const* ct = nullptr;
    /// SinoFlow: measured sinogram.
    ctsim::Sinogram const* sinogram = nullptr;

    /// Input normalisation: the training window and the ROI bounding box.
    Normalization normalization() const;
};

/// Uniform random space-time points inside the ROI pixels.
class DomainSampler
{
  public:
    DomainSampler(TrainingData const& data);
    Point draw(std::mt19937_64& rng) const;

  private:
    GridSpec grid_;
    Nondim scale_;
    std::array<double, 2> window_;
    std::vector<std::uint32_t> pixels_;
};

struct HistoryRow
{
    int iteration = 0;
    double physics = 0.0;
    double data = 0.0;
    double total = 0.0;
};

/// Raised when training is aborted (NaN or divergence).
class TrainingError : public Error
{
  public:
    using Error::Error;
};

struct TrainResult
{
    std::vector<HistoryRow> history;
    int iterations = 0;
};

/// Adam training with per-iteration resampling. Physics points are drawn
/// inside the ROI; SinoFlow rays only from pulse-on views whose central ray
/// crosses the ROI.
TrainResult train(FieldNetwork& net, TrainingData const& data, TrainConfig const& config);

void write_history_csv(std::vector<HistoryRow> const& history, std::string const& path);

/// Directory holding meta.json (configs, normalisation, iteration) and params.f64.
void save_checkpoint(FieldNetwork const& net, TrainConfig const& config, int iteration,
                     std::string const& dir);
FieldNetwork load_checkpoint(std::string const& dir, int* iteration = nullptr);

} // namespace ctflow::pinn
