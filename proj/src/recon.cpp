#include "ctflow/recon.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>

#include <fftw3.h>
#include <fmt/core.h>

namespace ctflow::recon {

using ctsim::FanBeamGeometry;
using ctsim::Sinogram;

void ReconConfig::validate(FanBeamGeometry const& geom) const
{
    if (filter != "ram-lak")
        throw ConfigError(fmt::format("unknown reconstruction filter '{}'", filter));
    if (grid.nx <= 0 || grid.ny <= 0 || !(grid.pixel > 0.0))
        throw ConfigError("reconstruction grid is empty");
    int const n = views_per_frame == 0 ? geom.views_per_rotation : views_per_frame;
    if (n != geom.views_per_rotation)
        throw ConfigError("full-scan FBP needs exactly one rotation of views per frame");
}

std::vector<double> ramlak_kernel(int n_channels, double alpha)
{
    if (n_channels < 1 || !(alpha > 0.0))
        throw ConfigError("ramlak_kernel: invalid size or pitch");
    std::vector<double> h(2 * static_cast<std::size_t>(n_channels) - 1, 0.0);
    int const c = n_channels - 1;
    h[c] = 1.0 / (8.0 * alpha * alpha);
    for (int n = 1; n < n_channels; n += 2)
    {
        double const s = std::sin(n * alpha);
        double const v = -1.0 / (2.0 * kPi * kPi * s * s);
        h[c + n] = v;
        h[c - n] = v;
    }
    return h;
}

namespace {

struct FftwFree
{
    void operator()(void* p) const { fftw_free(p); }
};

/// Linear convolution of each view with the RAM-LAK kernel via FFT.
class ViewFilter
{
  public:
    ViewFilter(int n_channels, double alpha)
        : n_(n_channels), alpha_(alpha)
    {
        m_ = 1;
        while (m_ < 2 * n_ - 1)
            m_ <<= 1;
        bins_ = m_ / 2 + 1;
        real_.reset(static_cast<double*>(fftw_malloc(sizeof(double) * m_)));
        spec_.reset(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins_)));
        forward_ = fftw_plan_dft_r2c_1d(m_, real_.get(), spec_.get(), FFTW_ESTIMATE);
        backward_ = fftw_plan_dft_c2r_1d(m_, spec_.get(), real_.get(), FFTW_ESTIMATE);

        // Kernel laid out circularly: tap n at index n mod m.
        auto const h = ramlak_kernel(n_, alpha_);
        std::fill(real_.get(), real_.get() + m_, 0.0);
        for (int n = -(n_ - 1); n <= n_ - 1; ++n)
            real_.get()[(n + m_) % m_] = h[n + n_ - 1];
        fftw_execute(forward_);
        kernel_.resize(bins_);
        for (int k = 0; k < bins_; ++k)
            kernel_[k] = {spec_.get()[k][0], spec_.get()[k][1]};
    }

    ~ViewFilter()
    {
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
    }

    ViewFilter(ViewFilter const&) = delete;
    ViewFilter& operator=(ViewFilter const&) = delete;

    /// out[j] = alpha * sum_k in[k] h[j - k]
    void apply(double const* in, double* out)
    {
        std::fill(real_.get(), real_.get() + m_, 0.0);
        std::copy(in, in + n_, real_.get());
        fftw_execute(forward_);
        double const scale = alpha_ / m_;
        for (int k = 0; k < bins_; ++k)
        {
            std::complex<double> const z(spec_.get()[k][0], spec_.get()[k][1]);
            std::complex<double> const w = z * kernel_[k] * scale;
            spec_.get()[k][0] = w.real();
            spec_.get()[k][1] = w.imag();
        }
        fftw_execute(backward_);
        std::copy(real_.get(), real_.get() + n_, out);
    }

  private:
    int n_;
    double alpha_;
    int m_ = 0;
    int bins_ = 0;
    std::unique_ptr<double, FftwFree> real_;
    std::unique_ptr<fftw_complex, FftwFree> spec_;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
    std::vector<std::complex<double>> kernel_;
};

Image reconstruct(Sinogram const& sino, int first_view, ReconConfig const& config,
                  ViewFilter& filter)
{
    FanBeamGeometry const& geom = sino.geometry;
    int const V = geom.views_per_rotation;
    int const N = sino.n_channels;
    if (first_view < 0 || first_view + V > sino.n_views)
        throw ConfigError(fmt::format("FBP frame needs views [{}, {}) but the sinogram has {}",
                                      first_view, first_view + V, sino.n_views));

    double const R = geom.radius();
    double const pitch = geom.channel_pitch();
    double const d_beta = 2.0 * kPi / V;
    GridSpec const& grid = config.grid;

    std::vector<double> weight(N);
    for (int j = 0; j < N; ++j)
        weight[j] = R * std::cos(geom.channel_angle(j));

    std::vector<double> acc(grid.size(), 0.0);
    std::vector<double> row(N), filtered(N);
    std::vector<double> xs(grid.nx), ys(grid.ny);
    for (int c = 0; c < grid.nx; ++c)
        xs[c] = grid.x_center(c);
    for (int r = 0; r < grid.ny; ++r)
        ys[r] = grid.y_center(r);
    double const centre = 0.5 * (N - 1);
    int r_lo = 0, r_hi = grid.ny - 1, c_lo = 0, c_hi = grid.nx - 1;
    if (config.region)
    {
        auto const& b = *config.region;
        c_lo = std::max(0, static_cast<int>(std::ceil(grid.col_coord(b[0]))));
        c_hi = std::min(grid.nx - 1, static_cast<int>(std::floor(grid.col_coord(b[2]))));
        r_lo = std::max(0, static_cast<int>(std::ceil(grid.row_coord(b[1]))));
        r_hi = std::min(grid.ny - 1, static_cast<int>(std::floor(grid.row_coord(b[3]))));
    }

    for (int v = first_view; v < first_view + V; ++v)
    {
        if (!sino.view_on(v))
            continue;
        for (int j = 0; j < N; ++j)
            row[j] = sino.at(v, j) * weight[j];
        filter.apply(row.data(), filtered.data());

        double const beta = sino.view_angle[v];
        double const sx = R * std::cos(beta);
        double const sy = R * std::sin(beta);
        double const cx = -std::cos(beta);
        double const cy = -std::sin(beta);
        for (int r = r_lo; r <= r_hi; ++r)
        {
            double const wy = ys[r] - sy;
            double* out = acc.data() + grid.index(r, 0);
            for (int c = c_lo; c <= c_hi; ++c)
            {
                double const wx = xs[c] - sx;
                double const along = cx * wx + cy * wy;
                double const across = cx * wy - cy * wx;
                double const pos = std::atan2(across, along) / pitch + centre;
                if (pos < 0.0 || pos > N - 1)
                    continue;
                int j0 = static_cast<int>(pos);
                if (j0 >= N - 1)
                    j0 = N - 2;
                double const f = pos - j0;
                double const q = (1.0 - f) * filtered[j0] + f * filtered[j0 + 1];
                out[c] += q / (wx * wx + wy * wy);
            }
        }
    }

    Image img(grid);
    for (std::size_t i = 0; i < acc.size(); ++i)
        img.data[i] = static_cast<float>(acc[i] * d_beta);
    return img;
}

} // namespace

Image fbp_reconstruct_frame(Sinogram const& sino, int first_view, ReconConfig const& config)
{
    config.validate(sino.geometry);
    if (sino.g.size() != static_cast<std::size_t>(sino.n_views) * sino.n_channels
        || sino.view_angle.size() != static_cast<std::size_t>(sino.n_views))
        throw ConfigError("sinogram arrays are inconsistent with its shape");
    if (sino.n_channels != sino.geometry.n_channels)
        throw ConfigError("sinogram channel count disagrees with its geometry");
    ViewFilter filter(sino.n_channels, sino.geometry.channel_pitch());
    return reconstruct(sino, first_view, config, filter);
}

flowgen::FieldMovie reconstruct_movie(Sinogram const& sino, ReconConfig const& config)
{
    config.validate(sino.geometry);
    int const V = sino.geometry.views_per_rotation;
    int const frames = sino.n_views / V;
    if (frames < 1)
        throw ConfigError("sinogram holds less than one rotation");
    if (sino.n_channels != sino.geometry.n_channels)
        throw ConfigError("sinogram channel count disagrees with its geometry");

    flowgen::FieldMovie movie;
    movie.grid = config.grid;
    movie.scale = sino.scale;
    double const rotation = 1.0 / sino.protocol.grs;
    for (int k = 0; k < frames; ++k)
        movie.times.push_back(sino.scale.to_t(sino.protocol.t_start + (k + 0.5) * rotation));
    movie.window = {sino.scale.to_t(sino.protocol.t_start),
                    sino.scale.to_t(sino.protocol.t_start + frames * rotation)};
    movie.allocate({flowgen::Field::c});
    movie.provenance = fmt::format("fbp ram-lak: grs={} theta0={} I0={} frames={}",
                                   sino.protocol.grs, sino.protocol.theta0_deg,
                                   sino.noise_I0 > 0 ? fmt::format("{:g}", sino.noise_I0)
                                                     : std::string("noise-free"),
                                   frames);

    ViewFilter filter(sino.n_channels, sino.geometry.channel_pitch());
    for (int k = 0; k < frames; ++k)
    {
        Image const img = reconstruct(sino, k * V, config, filter);
        std::copy(img.data.begin(), img.data.end(), movie.frame(flowgen::Field::c, k));
    }
    return movie;
}

} // namespace ctflow::recon
