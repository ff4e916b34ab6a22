#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctflow/ctsim.hpp"
#include "ctflow/flowgen.hpp"
#include "ctflow/geometry.hpp"
#include "ctflow/pinn.hpp"

namespace ctflow::harness {

using json = nlohmann::json;

enum class ExperimentKind
{
    grs_sweep,
    noise_sweep,
    pulse_sweep,
    single_run,
};

char const* kind_name(ExperimentKind k);
ExperimentKind kind_from_name(std::string const& name);

struct PulseSetting
{
    int width = 0; // 0 = continuous
    double duty = 1.0;
};

/// Everything needed to regenerate every cell of an experiment.
struct ExperimentConfig
{
    ExperimentKind kind = ExperimentKind::single_run;

    // Anatomy and flow.
    std::string vessel = "channel"; // "channel" or "bifurcation"
    double H = 1.5;                 // cm
    double u_c = 30.0;              // cm/s
    double nu = 3.8e-6;             // m^2/s
    double omega = 7.33;            // rad/s
    double pulsatile_fraction = 0.4;
    double beta = 1.0 / kPi;
    /// Ground-truth movie on disk; empty synthesises the channel case.
    std::string truth_path;
    int truth_frames = 100;
    double truth_cycles = 2.0;

    // Imaging.
    int grid_n = 256;
    double fov = 12.8; // cm
    ctsim::FanBeamGeometry scanner;
    double acquisition_seconds = 1.0;
    double t_start = 0.0;
    double delta_mu = 0.2;
    /// GRS used by sweeps that do not vary it.
    double base_grs = 4.0;
    /// CNR used by sweeps that do not vary it; 0 = noise-free.
    double base_cnr = 0.0;

    // Sweep axes.
    std::vector<double> grs{4.0};
    std::vector<double> theta0{0.0};
    std::vector<double> cnr;
    std::vector<PulseSetting> pulses;
    std::vector<pinn::Mode> methods{pinn::Mode::sinoflow};

    // Learning.
    pinn::NetworkConfig network;
    pinn::TrainConfig train;

    std::string output_dir;
    std::uint64_t seed = 0;
    /// Table of (I0, CNR) pairs used to map CNR targets to photon counts.
    std::string cnr_table;

    /// Desk-scale defaults: channel case, 256^2 grid, 512 channels, 6 x 64 net.
    static ExperimentConfig desk();

    void validate() const;
    json to_json() const;
    static ExperimentConfig from_json(json const& j);
    /// SHA-256 of the canonical JSON without output_dir.
    std::string hash() const;
};

/// One (condition, angle, method) combination of a sweep.
struct Cell
{
    int condition = 0;
    int angle = 0;
    pinn::Mode method = pinn::Mode::sinoflow;
    double grs = 0.0;
    double theta0 = 0.0;
    double cnr = 0.0; // 0 = noise-free
    PulseSetting pulse;

    json to_json(ExperimentConfig const& config) const;
};

/// Cells in canonical order (condition-major, then angle, then method).
std::vector<Cell> enumerate_cells(ExperimentConfig const& config);

struct MetricsRecord
{
    std::string cell_hash;
    std::string config_hash;
    double grs = 0.0;
    double theta0 = 0.0;
    double cnr = 0.0;
    double I0 = 0.0;
    double duty = 1.0;
    int pulse_width = 0;
    std::string method;
    double conc_rmse = 0.0;
    double vel_rmse = 0.0;      // m/s
    double vel_range_err = 0.0; // m/s
    double high_vel_err = 0.0;  // m/s
    double low_vel_err = 0.0;   // m/s
    double outlet_ratio = 0.0;
    /// Inlet velocity series (relative to the cell directory).
    std::string series_path;

    json to_json() const;
    static MetricsRecord from_json(json const& j);
};

/// Velocity source: ground-truth or reconstructed movie, or a trained network.
using FieldSource = std::variant<flowgen::FieldMovie const*, pinn::FieldNetwork const*>;

/// Section-averaged normal velocity (m/s) at each nondimensional time.
std::vector<double> velocity_timeseries(FieldSource const& source,
                                        geometry::CrossSection const& section,
                                        std::vector<double> const& times, Nondim const& scale);

struct DecileErrors
{
    double high_err = 0.0;
    double low_err = 0.0;
    double range_err = 0.0;
    double rmse = 0.0;
};

/// Top/bottom decile means, range and RMSE between aligned series.
DecileErrors decile_errors(std::vector<double> const& pred, std::vector<double> const& truth);

/// Time-averaged flow through `upper` divided by that through `lower`.
double outlet_ratio(FieldSource const& source, geometry::CrossSection const& upper,
                    geometry::CrossSection const& lower, std::vector<double> const& times,
                    Nondim const& scale);

/// RMSE of c over ROI pixels and the given truth frames.
double concentration_rmse(FieldSource const& source, flowgen::FieldMovie const& truth,
                          std::vector<std::uint8_t> const& roi, std::vector<int> const& frames);

struct StrouhalInputs
{
    double St_flow = 0.37;
    double omega_flow = 7.33; // 1/s
    double L_c_over_H = 5.0;
    double H = 1.5;  // cm
    double u = 30.0; // cm/s
};

/// Slowest gantry frequency (Hz) that resolves the bolus front:
/// omega_flow / (St_flow * L_c/H).
double strouhal_threshold(StrouhalInputs const& in);

struct PairedTTest
{
    double t = 0.0;
    double p_raw = 1.0;
    double p_adjusted = 1.0;
    bool significant = false;
    /// Zero variance of the differences.
    bool degenerate = false;
};

PairedTTest paired_ttest_bonferroni(std::vector<double> const& a, std::vector<double> const& b,
                                    int n_comparisons);

struct WelchTTest
{
    double t = 0.0;
    double p = 1.0;
    double dof = 0.0;
};

WelchTTest welch_ttest(std::vector<double> const& a, std::vector<double> const& b);

/// Maps a CNR target to I0 by log-log interpolation of a calibration table.
class CnrCalibration
{
  public:
    CnrCalibration() = default;
    explicit CnrCalibration(std::vector<std::array<double, 2>> rows);
    static CnrCalibration load(std::string const& csv_path);
    void save(std::string const& csv_path) const;

    double I0_for(double cnr) const;
    std::vector<std::array<double, 2>> const& rows() const { return rows_; }

  private:
    std::vector<std::array<double, 2>> rows_; // (I0, CNR), I0 ascending
};

/// Monte-Carlo CNR of a full-contrast lumen reconstructed at each I0.
CnrCalibration calibrate_cnr(ExperimentConfig const& config, std::vector<double> const& I0s);

/// Inputs shared by every cell of a sweep.
struct Scene
{
    flowgen::FieldMovie truth;
    geometry::VesselGeometry vessel;
    geometry::RasterMask mask;
    std::array<geometry::CrossSection, 3> sections;
};

Scene build_scene(ExperimentConfig const& config);

struct CellOutcome
{
    Cell cell;
    std::string hash;
    std::optional<MetricsRecord> record;
    std::string error;
    bool resumed = false;
};

struct SweepResult
{
    std::vector<CellOutcome> cells;
    std::vector<MetricsRecord> records() const;
    int failures() const;
};

/// Runs every cell not already completed under config.output_dir.
SweepResult run_sweep(ExperimentConfig const& config);

/// Scan settings of a cell, including its derived noise seed and I0.
ctsim::ScanProtocol scan_protocol(ExperimentConfig const& config, Cell const& cell);

/// Training inputs over the scene ROI and the sinogram's acquisition window.
pinn::TrainingData training_data(Scene const& scene, ctsim::Sinogram const& sino,
                                 flowgen::FieldMovie const* ct = nullptr);

/// Inlet velocity series (m/s) on the truth frames used for evaluation.
struct EvaluationSeries
{
    std::vector<double> seconds;
    std::vector<double> truth;
    std::vector<double> pred;
};

/// Metric fields of a record for truth frames inside `window` (condition
/// fields are left at their defaults). Velocity metrics are NaN for movies
/// without velocity.
MetricsRecord evaluate_source(Scene const& scene, FieldSource const& source,
                              std::array<double, 2> const& window,
                              EvaluationSeries* series = nullptr);

void write_series_csv(EvaluationSeries const& series, std::string const& path,
                      std::string const& config_hash);

/// Simulation, reconstruction, training and evaluation of one cell.
MetricsRecord run_cell(ExperimentConfig const& config, Scene const& scene, Cell const& cell,
                       std::string const& cell_dir);

/// Boxplot per metric (SVG) plus metrics.csv; returns the files written.
std::vector<std::string> emit_plots(std::vector<MetricsRecord> const& records,
                                    std::string const& dir);

void write_records_csv(std::vector<MetricsRecord> const& records, std::string const& path);
std::vector<MetricsRecord> read_records_csv(std::string const& path);

} // namespace ctflow::harness
