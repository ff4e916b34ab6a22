#include "ctflow/flowgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/core.h>

#include "ctflow/store.hpp"

namespace ctflow::flowgen {

using geometry::Exterior;

namespace {

std::complex<double> pulsatile_shape(double y, FlowParams const& p)
{
    // Complex amplitude of the oscillatory part per unit A.
    std::complex<double> const lam = p.lambda();
    double const alpha2 = p.Re * p.St;
    std::complex<double> const i(0.0, 1.0);
    std::complex<double> const profile = std::cosh(lam * y) / std::cosh(0.5 * lam) - 1.0;
    return p.Re * (p.Re / (i * alpha2)) * profile;
}

double velocity_unchecked(double y, double t, FlowParams const& p)
{
    double const steady = 0.5 * p.Re * p.dP * (0.25 - y * y);
    std::complex<double> const phase = std::exp(std::complex<double>(0.0, p.St * t));
    return steady + (p.A * pulsatile_shape(y, p) * phase).real();
}

} // namespace

FlowParams FlowParams::from_dimensional(double u_c, double H, double nu, double omega,
                                        double pulsatile_fraction, double beta)
{
    if (!(u_c > 0) || !(H > 0) || !(nu > 0) || !(omega > 0))
        throw ConfigError("flow parameters must be positive");
    if (pulsatile_fraction < 0.0 || pulsatile_fraction >= 1.0)
        throw ConfigError("pulsatile_fraction must lie in [0, 1)");
    FlowParams p;
    p.u_c = u_c;
    p.H = H;
    p.nu = nu;
    p.omega = omega;
    p.beta = beta;
    p.Re = (u_c * 0.01) * (H * 0.01) / nu;
    p.St = omega * H / u_c;

    // Unit centreline amplitudes for each part, then a common rescale so the
    // dense-grid maximum equals one.
    double const dP_unit = 8.0 / p.Re;
    double const A_unit = 1.0 / std::abs(pulsatile_shape(0.0, p));
    p.dP = (1.0 - pulsatile_fraction) * dP_unit;
    p.A = pulsatile_fraction * A_unit;
    double const peak = womersley_max_velocity(p, 801, 800);
    p.dP /= peak;
    p.A /= peak;
    return p;
}

FlowParams FlowParams::reference(double pulsatile_fraction)
{
    return from_dimensional(30.0, 1.5, 3.8e-6, 7.33, pulsatile_fraction, 2.0);
}

double womersley_velocity(double y, double t, FlowParams const& params)
{
    if (!(std::abs(y) <= 0.5))
        throw DomainError(fmt::format("womersley_velocity: |y~| = {} exceeds 1/2", std::abs(y)));
    return velocity_unchecked(y, t, params);
}

double womersley_pressure_gradient(double t, FlowParams const& params)
{
    return -params.dP + params.Re * params.A * std::cos(params.St * t);
}

double womersley_max_velocity(FlowParams const& params, int ny, int nt)
{
    double best = -std::numeric_limits<double>::infinity();
    double best_y = 0.0, best_t = 0.0;
    double const T = params.period();
    for (int j = 0; j < ny; ++j)
    {
        double const y = -0.5 + static_cast<double>(j) / (ny - 1);
        for (int k = 0; k < nt; ++k)
        {
            double const t = T * k / nt;
            double const u = velocity_unchecked(y, t, params);
            if (u > best)
            {
                best = u;
                best_y = y;
                best_t = t;
            }
        }
    }
    // Local refinement around the coarse maximum.
    double const hy = 1.0 / (ny - 1);
    double const ht = T / nt;
    for (int j = -20; j <= 20; ++j)
    {
        double const y = std::clamp(best_y + j * hy / 20.0, -0.5, 0.5);
        for (int k = -20; k <= 20; ++k)
        {
            double const t = best_t + k * ht / 20.0;
            best = std::max(best, velocity_unchecked(y, t, params));
        }
    }
    return best;
}

double inlet_concentration(double t, FlowParams const& params)
{
    double const s = std::sin(params.beta * params.St * kPi * t);
    return s * s;
}

char const* field_name(Field f)
{
    switch (f)
    {
        case Field::c: return "c";
        case Field::u: return "u";
        case Field::v: return "v";
        case Field::p: return "p";
    }
    return "?";
}

void FieldMovie::allocate(std::initializer_list<Field> which)
{
    for (Field f : which)
        data(f).assign(grid.size() * times.size(), 0.0f);
}

void FieldMovie::bracket(double t, int& k, double& w) const
{
    int const n = nt();
    if (n == 1 || t <= times.front())
    {
        k = 0;
        w = 0.0;
        return;
    }
    if (t >= times.back())
    {
        k = n - 2;
        w = 1.0;
        return;
    }
    auto it = std::upper_bound(times.begin(), times.end(), t);
    k = static_cast<int>(it - times.begin()) - 1;
    w = (t - times[k]) / (times[k + 1] - times[k]);
}

int FieldMovie::nearest_frame(double t) const
{
    int k = 0;
    double w = 0.0;
    bracket(t, k, w);
    if (nt() == 1)
        return 0;
    return w < 0.5 ? k : k + 1;
}

double FieldMovie::sample(Field f, double t, double x_cm, double y_cm) const
{
    int k = 0;
    double w = 0.0;
    bracket(t, k, w);
    double const col = grid.col_coord(x_cm);
    double const row = grid.row_coord(y_cm);
    double value = (1.0 - w) * bilinear_sample(frame(f, k), grid.nx, grid.ny, col, row);
    if (w > 0.0)
        value += w * bilinear_sample(frame(f, k + 1), grid.nx, grid.ny, col, row);
    return value;
}

void FieldMovie::validate() const
{
    if (grid.nx <= 0 || grid.ny <= 0)
        throw FormatError("field movie has an empty grid");
    if (times.empty())
        throw FormatError("field movie has no frames");
    for (std::size_t k = 1; k < times.size(); ++k)
    {
        if (!(times[k] > times[k - 1]))
            throw FormatError("field movie times are not strictly increasing");
    }
    std::size_t const expected = grid.size() * times.size();
    bool any = false;
    for (auto const& f : fields)
    {
        if (f.empty())
            continue;
        any = true;
        if (f.size() != expected)
            throw FormatError("field array shape does not match (nt, ny, nx)");
    }
    if (!any)
        throw FormatError("field movie carries no fields");
    if (!lumen.empty() && lumen.size() != grid.size())
        throw FormatError("lumen mask shape mismatch");
    if (!roi.empty() && roi.size() != grid.size())
        throw FormatError("roi mask shape mismatch");
}

// ---------------------------------------------------------------------------
// WENO3 transport
// ---------------------------------------------------------------------------

AdvectionDomain AdvectionDomain::from_mask(geometry::VesselGeometry const& geom,
                                           geometry::RasterMask const& mask)
{
    AdvectionDomain d;
    d.grid = mask.grid;
    d.dx = mask.grid.pixel / geom.H;
    d.active = mask.roi;
    d.exterior.assign(mask.grid.size(), {Exterior::wall, Exterior::wall, Exterior::wall,
                                         Exterior::wall});
    GridSpec const& g = mask.grid;
    int const dr[4] = {0, 0, -1, 1};
    int const dc[4] = {-1, 1, 0, 0};
    for (int r = 0; r < g.ny; ++r)
    {
        for (int c = 0; c < g.nx; ++c)
        {
            std::size_t const i = g.index(r, c);
            if (!d.active[i])
                continue;
            for (int s = 0; s < 4; ++s)
            {
                int const rr = r + dr[s];
                int const cc = c + dc[s];
                bool const inside = rr >= 0 && cc >= 0 && rr < g.ny && cc < g.nx
                                    && d.active[g.index(rr, cc)];
                if (inside)
                    continue;
                double const x = g.x_min + (cc + 0.5) * g.pixel;
                double const y = g.y_min + (rr + 0.5) * g.pixel;
                d.exterior[i][s] = geometry::classify_exterior(geom, x, y);
            }
        }
    }
    return d;
}

AdvectionDomain AdvectionDomain::box(GridSpec const& grid, double dx, Exterior edge,
                                     bool periodic_x, bool periodic_y)
{
    AdvectionDomain d;
    d.grid = grid;
    d.dx = dx;
    d.active.assign(grid.size(), 1);
    d.exterior.assign(grid.size(), {edge, edge, edge, edge});
    d.periodic_x = periodic_x;
    d.periodic_y = periodic_y;
    return d;
}

namespace {

double weno3_face(double vm1, double v0, double vp1)
{
    // Reconstruction of the face value between v0 and vp1 from the upwind side
    // (WENO-Z weights, which keep third order at smooth extrema).
    constexpr double eps = 1e-10;
    double const q0 = -0.5 * vm1 + 1.5 * v0;
    double const q1 = 0.5 * v0 + 0.5 * vp1;
    double const b0 = (v0 - vm1) * (v0 - vm1);
    double const b1 = (vp1 - v0) * (vp1 - v0);
    double const tau = std::abs(b1 - b0);
    double const a0 = (1.0 / 3.0) * (1.0 + tau / (b0 + eps));
    double const a1 = (2.0 / 3.0) * (1.0 + tau / (b1 + eps));
    return (a0 * q0 + a1 * q1) / (a0 + a1);
}

class Weno3Stepper
{
  public:
    Weno3Stepper(AdvectionDomain const& domain, VelocityFn const& velocity,
                 InletFn const& inlet, double max_cfl)
        : d_(domain), velocity_(velocity), inlet_(inlet), max_cfl_(max_cfl)
    {
        GridSpec const& g = d_.grid;
        if (d_.active.size() != g.size() || d_.exterior.size() != g.size())
            throw ConfigError("advection domain arrays do not match the grid");
        r0_ = g.ny;
        r1_ = -1;
        c0_ = g.nx;
        c1_ = -1;
        for (int r = 0; r < g.ny; ++r)
        {
            for (int c = 0; c < g.nx; ++c)
            {
                std::size_t const i = g.index(r, c);
                if (!d_.active[i])
                    continue;
                r0_ = std::min(r0_, r);
                r1_ = std::max(r1_, r);
                c0_ = std::min(c0_, c);
                c1_ = std::max(c1_, c);
                if (std::find(d_.exterior[i].begin(), d_.exterior[i].end(), Exterior::inlet)
                        != d_.exterior[i].end()
                    && !d_.periodic_x)
                    pinned_.push_back(i);
            }
        }
        u_.assign(g.size(), 0.0);
        v_.assign(g.size(), 0.0);
        rhs_.assign(g.size(), 0.0);
        low_.assign(g.size(), 0.0);
        p_plus_.assign(g.size(), 0.0);
        p_minus_.assign(g.size(), 0.0);
        for (auto const& ext : d_.exterior)
            has_inlet_ = has_inlet_ || std::find(ext.begin(), ext.end(), Exterior::inlet) != ext.end();
    }

    void step(std::vector<double>& c, double t, double dt)
    {
        std::vector<double> const c0 = c;
        std::vector<double> stage(c.size());

        rates(c, t, dt);
        for (std::size_t i = 0; i < c.size(); ++i)
            stage[i] = c[i] + dt * rhs_[i];
        pin(stage, t + dt);

        rates(stage, t + dt, dt);
        for (std::size_t i = 0; i < c.size(); ++i)
            stage[i] = 0.75 * c0[i] + 0.25 * (stage[i] + dt * rhs_[i]);
        pin(stage, t + 0.5 * dt);

        rates(stage, t + 0.5 * dt, dt);
        for (std::size_t i = 0; i < c.size(); ++i)
            c[i] = c0[i] / 3.0 + 2.0 / 3.0 * (stage[i] + dt * rhs_[i]);
        pin(c, t + dt);
    }

    void pin(std::vector<double>& c, double t) const
    {
        if (pinned_.empty())
            return;
        double const value = inlet_(t);
        for (std::size_t i : pinned_)
            c[i] = value;
    }

  private:
    bool active(int r, int c) const
    {
        GridSpec const& g = d_.grid;
        if (d_.periodic_x)
            c = (c % g.nx + g.nx) % g.nx;
        if (d_.periodic_y)
            r = (r % g.ny + g.ny) % g.ny;
        if (r < 0 || c < 0 || r >= g.ny || c >= g.nx)
            return false;
        return d_.active[g.index(r, c)] != 0;
    }

    std::size_t wrap(int r, int c) const
    {
        GridSpec const& g = d_.grid;
        if (d_.periodic_x)
            c = (c % g.nx + g.nx) % g.nx;
        if (d_.periodic_y)
            r = (r % g.ny + g.ny) % g.ny;
        return g.index(r, c);
    }

    /// Value beyond `cell` on `side`, for a cell whose neighbour there is inactive.
    double ghost(std::vector<double> const& c, std::size_t cell, int side) const
    {
        return d_.exterior[cell][side] == Exterior::inlet ? inlet_value_ : c[cell];
    }

    struct FaceFlux
    {
        double high = 0.0; // WENO3
        double low = 0.0;  // first-order upwind
    };

    /// Fluxes through the face between cells a (lower index side) and b along
    /// one axis. side_a / side_b are the face indices as seen from a and b.
    FaceFlux face_flux(std::vector<double> const& c, std::vector<double> const& vel,
                       int ra, int ca, int rb, int cb, int dr, int dc, int side_a,
                       int side_b) const
    {
        bool const act_a = active(ra, ca);
        bool const act_b = active(rb, cb);
        if (!act_a && !act_b)
            return {};
        std::size_t const ia = act_a ? wrap(ra, ca) : 0;
        std::size_t const ib = act_b ? wrap(rb, cb) : 0;

        double uf = 0.0;
        if (act_a && act_b)
        {
            uf = 0.5 * (vel[ia] + vel[ib]);
        }
        else if (act_a)
        {
            if (d_.exterior[ia][side_a] == Exterior::wall)
                return {};
            uf = vel[ia];
        }
        else
        {
            if (d_.exterior[ib][side_b] == Exterior::wall)
                return {};
            uf = vel[ib];
        }
        if (uf == 0.0)
            return {};

        double const va = act_a ? c[ia] : ghost(c, ib, side_b);
        double const vb = act_b ? c[ib] : ghost(c, ia, side_a);
        double vaa = va;
        if (act_a)
        {
            vaa = active(ra - dr, ca - dc) ? c[wrap(ra - dr, ca - dc)] : ghost(c, ia, side_b);
        }
        double vbb = vb;
        if (act_b)
        {
            vbb = active(rb + dr, cb + dc) ? c[wrap(rb + dr, cb + dc)] : ghost(c, ib, side_a);
        }
        double const face = uf > 0.0 ? weno3_face(vaa, va, vb) : weno3_face(vbb, vb, va);
        return {uf * face, uf * (uf > 0.0 ? va : vb)};
    }

    struct Face
    {
        int ra, ca, rb, cb;
        FaceFlux f;
    };

    void collect_faces(std::vector<double> const& c)
    {
        GridSpec const& g = d_.grid;
        faces_.clear();
        // x faces: between (r, col) and (r, col + 1); side 1 = +x, side 0 = -x.
        int const xc0 = d_.periodic_x ? 0 : c0_ - 1;
        int const xc1 = d_.periodic_x ? g.nx - 1 : c1_;
        for (int r = r0_; r <= r1_; ++r)
        {
            for (int col = xc0; col <= xc1; ++col)
            {
                FaceFlux const f = face_flux(c, u_, r, col, r, col + 1, 0, 1, 1, 0);
                if (f.high != 0.0 || f.low != 0.0)
                    faces_.push_back({r, col, r, col + 1, f});
            }
        }
        int const yr0 = d_.periodic_y ? 0 : r0_ - 1;
        int const yr1 = d_.periodic_y ? g.ny - 1 : r1_;
        for (int r = yr0; r <= yr1; ++r)
        {
            for (int col = c0_; col <= c1_; ++col)
            {
                FaceFlux const f = face_flux(c, v_, r, col, r + 1, col, 1, 0, 3, 2);
                if (f.high != 0.0 || f.low != 0.0)
                    faces_.push_back({r, col, r + 1, col, f});
            }
        }
    }

    /// Flux-corrected transport: the WENO flux is blended towards the upwind
    /// flux wherever the forward-Euler stage would leave [lo, hi].
    void limit_faces(std::vector<double> const& c, double dt)
    {
        GridSpec const& g = d_.grid;
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (int r = r0_; r <= r1_; ++r)
        {
            for (int col = c0_; col <= c1_; ++col)
            {
                std::size_t const i = g.index(r, col);
                if (!d_.active[i])
                    continue;
                lo = std::min(lo, c[i]);
                hi = std::max(hi, c[i]);
            }
        }
        if (!pinned_.empty() || has_inlet_)
        {
            lo = std::min(lo, inlet_value_);
            hi = std::max(hi, inlet_value_);
        }

        double const k = dt / d_.dx;
        std::fill(low_.begin(), low_.end(), 0.0);
        std::fill(p_plus_.begin(), p_plus_.end(), 0.0);
        std::fill(p_minus_.begin(), p_minus_.end(), 0.0);
        for (Face const& face : faces_)
        {
            double const anti = k * (face.f.high - face.f.low);
            if (active(face.ra, face.ca))
            {
                std::size_t const ia = wrap(face.ra, face.ca);
                low_[ia] -= k * face.f.low;
                (anti < 0.0 ? p_plus_[ia] : p_minus_[ia]) += std::abs(anti);
            }
            if (active(face.rb, face.cb))
            {
                std::size_t const ib = wrap(face.rb, face.cb);
                low_[ib] += k * face.f.low;
                (anti > 0.0 ? p_plus_[ib] : p_minus_[ib]) += std::abs(anti);
            }
        }
        for (int r = r0_; r <= r1_; ++r)
        {
            for (int col = c0_; col <= c1_; ++col)
            {
                std::size_t const i = g.index(r, col);
                if (!d_.active[i])
                    continue;
                double const cl = c[i] + low_[i];
                double const up = std::max(0.0, hi - cl);
                double const down = std::max(0.0, cl - lo);
                p_plus_[i] = p_plus_[i] > 0.0 ? std::min(1.0, up / p_plus_[i]) : 1.0;
                p_minus_[i] = p_minus_[i] > 0.0 ? std::min(1.0, down / p_minus_[i]) : 1.0;
            }
        }
        for (Face& face : faces_)
        {
            double const anti = face.f.high - face.f.low;
            if (anti == 0.0)
                continue;
            bool const act_a = active(face.ra, face.ca);
            bool const act_b = active(face.rb, face.cb);
            // anti > 0 raises b and lowers a.
            double ra = 1.0, rb = 1.0;
            if (act_a)
                ra = anti > 0.0 ? p_minus_[wrap(face.ra, face.ca)] : p_plus_[wrap(face.ra, face.ca)];
            if (act_b)
                rb = anti > 0.0 ? p_plus_[wrap(face.rb, face.cb)] : p_minus_[wrap(face.rb, face.cb)];
            face.f.high = face.f.low + std::min(ra, rb) * anti;
        }
    }

    void rates(std::vector<double> const& c, double t, double dt)
    {
        velocity_(t, u_, v_);
        inlet_value_ = inlet_ ? inlet_(t) : 0.0;
        GridSpec const& g = d_.grid;
        double vmax = 0.0;
        for (int r = r0_; r <= r1_; ++r)
        {
            for (int col = c0_; col <= c1_; ++col)
            {
                std::size_t const i = g.index(r, col);
                if (!d_.active[i])
                    continue;
                double const a = std::max(std::abs(u_[i]), std::abs(v_[i]));
                if (!std::isfinite(a))
                    throw DomainError("advect_weno3: non-finite velocity");
                vmax = std::max(vmax, a);
            }
        }
        double const cfl = vmax * dt / d_.dx;
        if (cfl > max_cfl_ * (1.0 + 1e-9))
            throw DomainError(fmt::format("advect_weno3: CFL {:.4f} exceeds {:.2f}", cfl,
                                          max_cfl_));

        collect_faces(c);
        limit_faces(c, dt);
        std::fill(rhs_.begin(), rhs_.end(), 0.0);
        double const inv_dx = 1.0 / d_.dx;
        for (Face const& face : faces_)
        {
            double const f = face.f.high * inv_dx;
            if (active(face.ra, face.ca))
                rhs_[wrap(face.ra, face.ca)] -= f;
            if (active(face.rb, face.cb))
                rhs_[wrap(face.rb, face.cb)] += f;
        }
    }

    AdvectionDomain const& d_;
    VelocityFn const& velocity_;
    InletFn const& inlet_;
    double max_cfl_;
    double inlet_value_ = 0.0;
    int r0_, r1_, c0_, c1_;
    bool has_inlet_ = false;
    std::vector<std::size_t> pinned_;
    std::vector<double> u_, v_, rhs_;
    std::vector<double> low_, p_plus_, p_minus_;
    std::vector<Face> faces_;
};

} // namespace

std::vector<std::vector<double>> advect_weno3(std::vector<double> const& c_init,
                                              VelocityFn const& velocity,
                                              AdvectionDomain const& domain,
                                              AdvectOptions const& options,
                                              InletFn const& inlet)
{
    if (c_init.size() != domain.grid.size())
        throw ConfigError("advect_weno3: initial field does not match the grid");
    if (!(options.dt > 0.0) || options.n_steps < 0 || options.record_every < 1)
        throw ConfigError("advect_weno3: invalid time stepping options");

    InletFn const inlet_fn = inlet ? inlet : InletFn([](double) { return 0.0; });
    Weno3Stepper stepper(domain, velocity, inlet_fn, options.max_cfl);

    std::vector<double> c = c_init;
    for (std::size_t i = 0; i < c.size(); ++i)
    {
        if (!domain.active[i])
            c[i] = 0.0;
    }
    stepper.pin(c, options.t0);

    std::vector<std::vector<double>> frames;
    frames.push_back(c);
    for (int n = 0; n < options.n_steps; ++n)
    {
        stepper.step(c, options.t0 + n * options.dt, options.dt);
        if ((n + 1) % options.record_every == 0)
            frames.push_back(c);
    }
    return frames;
}

std::vector<std::vector<double>> advect_weno3(std::vector<double> const& c_init,
                                              FieldMovie const& velocity,
                                              AdvectionDomain const& domain,
                                              AdvectOptions const& options,
                                              InletFn const& inlet)
{
    if (!velocity.has(Field::u) || !velocity.has(Field::v))
        throw ConfigError("advect_weno3: velocity movie lacks u or v");
    if (!(velocity.grid == domain.grid))
        throw ConfigError("advect_weno3: velocity grid differs from the domain grid");
    VelocityFn fn = [&velocity](double t, std::vector<double>& u, std::vector<double>& v) {
        int k = 0;
        double w = 0.0;
        velocity.bracket(t, k, w);
        std::size_t const n = velocity.grid.size();
        float const* u0 = velocity.frame(Field::u, k);
        float const* v0 = velocity.frame(Field::v, k);
        float const* u1 = velocity.nt() > 1 ? velocity.frame(Field::u, k + 1) : u0;
        float const* v1 = velocity.nt() > 1 ? velocity.frame(Field::v, k + 1) : v0;
        for (std::size_t i = 0; i < n; ++i)
        {
            u[i] = (1.0 - w) * u0[i] + w * u1[i];
            v[i] = (1.0 - w) * v0[i] + w * v1[i];
        }
    };
    return advect_weno3(c_init, fn, domain, options, inlet);
}

FieldMovie synthesize_channel_case(FlowParams const& params,
                                   geometry::VesselGeometry const& geom,
                                   GridSpec const& grid, ChannelCaseOptions const& options)
{
    if (geom.kind != geometry::VesselKind::channel)
        throw ConfigError("synthesize_channel_case requires a straight-channel geometry");
    if (options.nt < 2)
        throw ConfigError("synthesize_channel_case needs at least two frames");
    if (std::abs(geom.H - params.H) > 1e-9 * params.H)
        throw ConfigError("geometry and flow parameters disagree on H");

    geometry::RasterMask const mask = geometry::build_bifurcation_mask(geom, grid);

    FieldMovie movie;
    movie.grid = grid;
    movie.scale = {params.u_c, params.H, geom.offset_x(), 0.0};
    movie.lumen = mask.lumen;
    movie.roi = mask.roi;
    double const t_end = options.n_cycles * params.period();
    movie.times.resize(options.nt);
    for (int k = 0; k < options.nt; ++k)
        movie.times[k] = t_end * k / (options.nt - 1);
    movie.window = {0.0, t_end};
    movie.allocate({Field::c, Field::u, Field::v, Field::p});
    movie.provenance = fmt::format(
        "womersley channel: Re={:.6g} St={:.6g} dP={:.6g} A={:.6g} beta={:.6g}", params.Re,
        params.St, params.dP, params.A, params.beta);

    // Per-row nondimensional wall distance; u depends on y only.
    std::vector<double> row_y(grid.ny);
    std::vector<char> row_in(grid.ny, 0);
    for (int r = 0; r < grid.ny; ++r)
    {
        row_y[r] = movie.scale.to_y(grid.y_center(r));
        for (int c = 0; c < grid.nx; ++c)
        {
            if (mask.lumen_at(r, c))
            {
                row_in[r] = 1;
                break;
            }
        }
    }

    for (int k = 0; k < options.nt; ++k)
    {
        double const t = movie.times[k];
        double const px = womersley_pressure_gradient(t, params);
        float* u = movie.frame(Field::u, k);
        float* p = movie.frame(Field::p, k);
        for (int r = 0; r < grid.ny; ++r)
        {
            if (!row_in[r])
                continue;
            double const ur = womersley_velocity(row_y[r], t, params);
            for (int c = 0; c < grid.nx; ++c)
            {
                std::size_t const i = grid.index(r, c);
                if (!mask.lumen[i])
                    continue;
                u[i] = static_cast<float>(ur);
                p[i] = static_cast<float>(px * movie.scale.to_x(grid.x_center(c)));
            }
        }
    }

    AdvectionDomain const domain = AdvectionDomain::from_mask(geom, mask);
    double umax = 0.0;
    for (int r = 0; r < grid.ny; ++r)
    {
        if (!row_in[r])
            continue;
        for (int k = 0; k < 400; ++k)
            umax = std::max(umax, std::abs(womersley_velocity(row_y[r], params.period() * k / 400,
                                                              params)));
    }
    // The sampled maximum can sit marginally below the true one.
    umax *= 1.02;
    double const frame_dt = movie.times[1] - movie.times[0];
    int const substeps = std::max(1, static_cast<int>(std::ceil(frame_dt * umax
                                                                 / (options.cfl * domain.dx))));
    AdvectOptions opts;
    opts.t0 = 0.0;
    opts.dt = frame_dt / substeps;
    opts.n_steps = substeps * (options.nt - 1);
    opts.record_every = substeps;
    opts.max_cfl = options.cfl;

    VelocityFn velocity = [&](double t, std::vector<double>& u, std::vector<double>& v) {
        std::fill(v.begin(), v.end(), 0.0);
        for (int r = 0; r < grid.ny; ++r)
        {
            if (!row_in[r])
                continue;
            double const ur = velocity_unchecked(row_y[r], t, params);
            for (int c = 0; c < grid.nx; ++c)
                u[grid.index(r, c)] = ur;
        }
    };
    InletFn inlet = [&params](double t) { return inlet_concentration(t, params); };

    std::vector<double> const c0(grid.size(), 0.0);
    auto const frames = advect_weno3(c0, velocity, domain, opts, inlet);
    for (int k = 0; k < options.nt; ++k)
    {
        float* c = movie.frame(Field::c, k);
        for (std::size_t i = 0; i < grid.size(); ++i)
            c[i] = static_cast<float>(frames[k][i]);
    }
    return movie;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void save_field_movie(FieldMovie const& movie, std::string const& path)
{
    movie.validate();
    store::fs::path const dir(path);
    store::fs::create_directories(dir);
    store::json meta;
    meta["format"] = "ctflow.field_movie";
    meta["version"] = 1;
    meta["grid"] = store::grid_to_json(movie.grid);
    meta["shape"] = {movie.nt(), movie.grid.ny, movie.grid.nx};
    meta["times"] = movie.times;
    meta["window"] = movie.window;
    meta["constants"] = store::nondim_to_json(movie.scale);
    meta["provenance"] = movie.provenance;
    std::vector<std::string> names;
    for (Field f : {Field::c, Field::u, Field::v, Field::p})
    {
        if (!movie.has(f))
            continue;
        names.emplace_back(field_name(f));
        store::write_f32(dir / (std::string(field_name(f)) + ".f32"), movie.data(f));
    }
    meta["fields"] = names;
    std::vector<std::string> masks;
    if (!movie.lumen.empty())
    {
        masks.emplace_back("lumen");
        store::write_u8(dir / "lumen.u8", movie.lumen);
    }
    if (!movie.roi.empty())
    {
        masks.emplace_back("roi");
        store::write_u8(dir / "roi.u8", movie.roi);
    }
    meta["masks"] = masks;
    store::write_json(dir / "meta.json", meta);
}

FieldMovie load_field_movie(std::string const& path)
{
    store::fs::path const dir(path);
    store::json const meta = store::read_json(dir / "meta.json");
    FieldMovie movie;
    try
    {
        if (store::require(meta, "format").get<std::string>() != "ctflow.field_movie")
            throw FormatError("not a field movie");
        movie.grid = store::grid_from_json(store::require(meta, "grid"));
        movie.times = store::require(meta, "times").get<std::vector<double>>();
        movie.scale = store::nondim_from_json(store::require(meta, "constants"));
        auto const shape = store::require(meta, "shape").get<std::vector<long long>>();
        if (shape.size() != 3 || shape[0] != static_cast<long long>(movie.times.size())
            || shape[1] != movie.grid.ny || shape[2] != movie.grid.nx)
            throw FormatError("shape header does not match grid and times");
        if (meta.contains("window"))
            movie.window = meta.at("window").get<std::array<double, 2>>();
        else if (!movie.times.empty())
            movie.window = {movie.times.front(), movie.times.back()};
        movie.provenance = meta.value("provenance", std::string{});
        std::size_t const count = movie.grid.size() * movie.times.size();
        for (auto const& name : store::require(meta, "fields").get<std::vector<std::string>>())
        {
            Field f{};
            if (name == "c")
                f = Field::c;
            else if (name == "u")
                f = Field::u;
            else if (name == "v")
                f = Field::v;
            else if (name == "p")
                f = Field::p;
            else
                throw FormatError(fmt::format("unknown field '{}'", name));
            movie.data(f) = store::read_f32(dir / (name + ".f32"), count);
        }
        for (auto const& name : meta.value("masks", std::vector<std::string>{}))
        {
            if (name == "lumen")
                movie.lumen = store::read_u8(dir / "lumen.u8", movie.grid.size());
            else if (name == "roi")
                movie.roi = store::read_u8(dir / "roi.u8", movie.grid.size());
        }
    }
    catch (store::json::exception const& e)
    {
        throw FormatError(fmt::format("malformed field movie metadata: {}", e.what()));
    }
    movie.validate();

    if (!movie.lumen.empty())
    {
        for (Field f : {Field::u, Field::v})
        {
            if (!movie.has(f))
                continue;
            for (int k = 0; k < movie.nt(); ++k)
            {
                float* frame = movie.frame(f, k);
                for (std::size_t i = 0; i < movie.grid.size(); ++i)
                {
                    if (!movie.lumen[i])
                        frame[i] = 0.0f;
                }
            }
        }
    }
    return movie;
}

} // namespace ctflow::flowgen
