#include "ctflow/pinn.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <fmt/core.h>

#include "ctflow/store.hpp"

namespace ctflow::pinn {

namespace {

constexpr int kOutputs = 4;
constexpr int kBlockT = 1, kBlockX = 2, kBlockY = 3, kBlockXX = 4, kBlockYY = 5;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Layers = std::vector<LayerT<T>>;

// SiLU f(a) = a s(a), s the logistic function, with
//   f'   = s (1 + a (1 - s))
//   f''  = s' (2 + a (1 - 2 s))
//   f''' = s' ((1 - 2 s)(3 + a (1 - 2 s)) - 2 a s'),   s' = s (1 - s).

// Hidden-layer activation on all jet channels.
template <class T>
void activate(Mat<T> const& A, Mat<T>& H, int B, int K)
{
    H.resize(A.rows(), A.cols());
    auto blk = [B](auto& m, int ch) { return m.middleCols(static_cast<long>(ch) * B, B).array(); };
    auto const a = blk(A, 0);
    auto const s = (T(1) + (-a).exp()).inverse().eval();
    if (K == 1)
    {
        blk(H, 0) = a * s;
        return;
    }
    auto const sp = (s * (T(1) - s)).eval();
    auto const d1 = (s * (T(1) + a * (T(1) - s))).eval();
    auto const d2 = (sp * (T(2) + a * (T(1) - T(2) * s))).eval();
    blk(H, 0) = a * s;
    blk(H, kBlockT) = d1 * blk(A, kBlockT);
    blk(H, kBlockX) = d1 * blk(A, kBlockX);
    blk(H, kBlockY) = d1 * blk(A, kBlockY);
    blk(H, kBlockXX) = d2 * blk(A, kBlockX).square() + d1 * blk(A, kBlockXX);
    blk(H, kBlockYY) = d2 * blk(A, kBlockY).square() + d1 * blk(A, kBlockYY);
}

// Pulls d(loss)/dH back to d(loss)/dA through the activation jets.
template <class T>
void activate_backward(Mat<T> const& A, Mat<T> const& dH, Mat<T>& dA, int B, int K)
{
    dA.resize(A.rows(), A.cols());
    auto blk = [B](auto& m, int ch) { return m.middleCols(static_cast<long>(ch) * B, B).array(); };
    auto const a = blk(A, 0);
    auto const s = (T(1) + (-a).exp()).inverse().eval();
    auto const d1 = (s * (T(1) + a * (T(1) - s))).eval();
    if (K == 1)
    {
        blk(dA, 0) = blk(dH, 0) * d1;
        return;
    }
    auto const sp = (s * (T(1) - s)).eval();
    auto const q = (T(1) - T(2) * s).eval();
    auto const d2 = (sp * (T(2) + a * q)).eval();
    auto const d3 = (sp * (q * (T(3) + a * q) - T(2) * a * sp)).eval();
    auto const aX = blk(A, kBlockX);
    auto const aY = blk(A, kBlockY);
    auto const gXX = blk(dH, kBlockXX);
    auto const gYY = blk(dH, kBlockYY);
    blk(dA, 0) = blk(dH, 0) * d1
                 + (blk(dH, kBlockT) * blk(A, kBlockT) + blk(dH, kBlockX) * aX + blk(dH, kBlockY) * aY) * d2
                 + gXX * (d3 * aX.square() + d2 * blk(A, kBlockXX))
                 + gYY * (d3 * aY.square() + d2 * blk(A, kBlockYY));
    blk(dA, kBlockT) = blk(dH, kBlockT) * d1;
    blk(dA, kBlockX) = blk(dH, kBlockX) * d1 + T(2) * gXX * d2 * aX;
    blk(dA, kBlockY) = blk(dH, kBlockY) * d1 + T(2) * gYY * d2 * aY;
    blk(dA, kBlockXX) = gXX * d1;
    blk(dA, kBlockYY) = gYY * d1;
}

template <class T>
void forward_impl(Layers<T> const& layers, Normalization const& norm, std::vector<Point> const& points,
                  int K, TapeT<T>& tape)
{
    int const B = static_cast<int>(points.size());
    int const L = static_cast<int>(layers.size());
    tape.batch = B;
    tape.channels = K;
    tape.inputs.resize(static_cast<std::size_t>(L));
    tape.pre.resize(static_cast<std::size_t>(L - 1));

    Mat<T>& X = tape.inputs[0];
    X.setZero(3, static_cast<long>(K) * B);
    for (int i = 0; i < B; ++i)
    {
        X(0, i) = static_cast<T>(norm.apply(0, points[i].t));
        X(1, i) = static_cast<T>(norm.apply(1, points[i].x));
        X(2, i) = static_cast<T>(norm.apply(2, points[i].y));
        if (K > 1)
        {
            X(0, kBlockT * B + i) = T(1);
            X(1, kBlockX * B + i) = T(1);
            X(2, kBlockY * B + i) = T(1);
        }
    }
    for (int l = 0; l < L; ++l)
    {
        Mat<T>& A = l == L - 1 ? tape.out : tape.pre[l];
        A.noalias() = layers[l].W * tape.inputs[l];
        A.leftCols(B).colwise() += layers[l].b;
        if (l < L - 1)
            activate(A, tape.inputs[l + 1], B, K);
    }
}

template <class T>
void backward_impl(Layers<T> const& layers, TapeT<T>& tape, Mat<T> const& d_out, Layers<T>& grad)
{
    int const B = tape.batch;
    int const K = tape.channels;
    int const L = static_cast<int>(layers.size());
    Mat<T> const* G = &d_out;
    for (int l = L - 1; l >= 0; --l)
    {
        grad[l].W.noalias() += *G * tape.inputs[l].transpose();
        grad[l].b.noalias() += G->leftCols(B).rowwise().sum();
        if (l == 0)
            break;
        tape.dh.noalias() = layers[l].W.transpose() * *G;
        activate_backward(tape.pre[l - 1], tape.dh, tape.g, B, K);
        G = &tape.g;
    }
}

} // namespace

bool Normalization::contains(Point const& p) const
{
    double const q[3] = {p.t, p.x, p.y};
    for (int a = 0; a < 3; ++a)
    {
        double const tol = 1e-9 * (hi[a] - lo[a]);
        if (!(q[a] >= lo[a] - tol && q[a] <= hi[a] + tol))
            return false;
    }
    return true;
}

void Normalization::validate() const
{
    for (int a = 0; a < 3; ++a)
        if (!(hi[a] > lo[a]) || !std::isfinite(lo[a]) || !std::isfinite(hi[a]))
            throw ConfigError("normalisation box must have positive extent on every axis");
}

void NetworkConfig::validate() const
{
    if (hidden_layers < 1 || width < 1)
        throw ConfigError("network needs at least one hidden layer of positive width");
}

FieldNetwork::FieldNetwork(NetworkConfig const& config, Normalization const& norm)
    : config_(config), norm_(norm)
{
    config_.validate();
    norm_.validate();
    std::mt19937_64 rng(config_.seed);
    int fan_in = 3;
    for (int l = 0; l <= config_.hidden_layers; ++l)
    {
        int const fan_out = l == config_.hidden_layers ? kOutputs : config_.width;
        // Glorot uniform.
        double const limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        Layer layer;
        layer.W.resize(fan_out, fan_in);
        for (long j = 0; j < layer.W.cols(); ++j)
            for (long i = 0; i < layer.W.rows(); ++i)
                layer.W(i, j) = dist(rng);
        layer.b = Vector::Zero(fan_out);
        params_.push_back(std::move(layer));
        fan_in = fan_out;
    }
}

std::size_t FieldNetwork::parameter_count() const
{
    std::size_t n = 0;
    for (auto const& l : params_)
        n += static_cast<std::size_t>(l.W.size() + l.b.size());
    return n;
}

Parameters FieldNetwork::zeros_like() const
{
    Parameters z;
    for (auto const& l : params_)
        z.push_back({Matrix::Zero(l.W.rows(), l.W.cols()), Vector::Zero(l.b.size())});
    return z;
}

void FieldNetwork::check_domain(std::vector<Point> const& points) const
{
    for (auto const& p : points)
        if (!norm_.contains(p))
            throw DomainError(fmt::format("point (t={}, x={}, y={}) lies outside the network domain",
                                          p.t, p.x, p.y));
}

Tape FieldNetwork::forward(std::vector<Point> const& points, Jet jet) const
{
    if (params_.empty())
        throw ConfigError("network is not initialised");
    Tape tape;
    forward_impl(params_, norm_, points, static_cast<int>(jet), tape);
    return tape;
}

void FieldNetwork::backward(Tape const& tape, Matrix const& d_out, Parameters& grad) const
{
    Tape scratch = tape;
    backward_impl(params_, scratch, d_out, grad);
}

std::vector<FieldValues> FieldNetwork::evaluate(std::vector<Point> const& points) const
{
    check_domain(points);
    std::vector<FieldValues> out(points.size());
    std::size_t constexpr chunk = 4096;
    for (std::size_t s = 0; s < points.size(); s += chunk)
    {
        std::size_t const e = std::min(points.size(), s + chunk);
        std::vector<Point> part(points.begin() + static_cast<long>(s), points.begin() + static_cast<long>(e));
        Tape const tape = forward(part, Jet::value);
        for (std::size_t i = s; i < e; ++i)
        {
            long const k = static_cast<long>(i - s);
            out[i] = {tape.out(0, k), tape.out(1, k), tape.out(2, k), tape.out(3, k)};
        }
    }
    return out;
}

namespace {

// Residuals from a second-order tape; fills the output adjoint of
// sum_i w (e1^2 + .. + e4^2) when `adj` is set.
template <class T>
std::vector<Residuals> residuals_from_tape(TapeT<T> const& tape, Normalization const& norm, double Re,
                                           double w, Mat<T>* adj)
{
    int const B = tape.batch;
    Mat<T> const& O = tape.out;
    double const kt = norm.slope(0), kx = norm.slope(1), ky = norm.slope(2);
    double const nu = 1.0 / Re;
    auto at = [&](int field, int block, int i) -> double {
        return O(field, static_cast<long>(block) * B + i);
    };
    std::vector<Residuals> res(B);
    if (adj)
        adj->setZero(kOutputs, 6L * B);
    for (int i = 0; i < B; ++i)
    {
        double const u = at(1, 0, i), v = at(2, 0, i);
        double const c_t = kt * at(0, kBlockT, i), c_x = kx * at(0, kBlockX, i), c_y = ky * at(0, kBlockY, i);
        double const u_t = kt * at(1, kBlockT, i), u_x = kx * at(1, kBlockX, i), u_y = ky * at(1, kBlockY, i);
        double const v_t = kt * at(2, kBlockT, i), v_x = kx * at(2, kBlockX, i), v_y = ky * at(2, kBlockY, i);
        double const p_x = kx * at(3, kBlockX, i), p_y = ky * at(3, kBlockY, i);
        double const u_lap = kx * kx * at(1, kBlockXX, i) + ky * ky * at(1, kBlockYY, i);
        double const v_lap = kx * kx * at(2, kBlockXX, i) + ky * ky * at(2, kBlockYY, i);

        Residuals& r = res[i];
        r.e1 = c_t + u * c_x + v * c_y;
        r.e2 = u_t + u * u_x + v * u_y + p_x - nu * u_lap;
        r.e3 = v_t + u * v_x + v * v_y + p_y - nu * v_lap;
        r.e4 = u_x + v_y;
        if (!adj)
            continue;

        double const g1 = 2.0 * w * r.e1, g2 = 2.0 * w * r.e2, g3 = 2.0 * w * r.e3, g4 = 2.0 * w * r.e4;
        auto put = [&](int field, int block, double value) {
            (*adj)(field, static_cast<long>(block) * B + i) += static_cast<T>(value);
        };
        // e1
        put(0, kBlockT, g1 * kt);
        put(0, kBlockX, g1 * u * kx);
        put(0, kBlockY, g1 * v * ky);
        put(1, 0, g1 * c_x + g2 * u_x + g3 * v_x);
        put(2, 0, g1 * c_y + g2 * u_y + g3 * v_y);
        // e2
        put(1, kBlockT, g2 * kt);
        put(1, kBlockX, g2 * u * kx + g4 * kx);
        put(1, kBlockY, g2 * v * ky);
        put(3, kBlockX, g2 * kx);
        put(1, kBlockXX, -g2 * nu * kx * kx);
        put(1, kBlockYY, -g2 * nu * ky * ky);
        // e3
        put(2, kBlockT, g3 * kt);
        put(2, kBlockX, g3 * u * kx);
        put(2, kBlockY, g3 * v * ky + g4 * ky);
        put(3, kBlockY, g3 * ky);
        put(2, kBlockXX, -g3 * nu * kx * kx);
        put(2, kBlockYY, -g3 * nu * ky * ky);
    }
    return res;
}

void require_points(std::size_t n, char const* what)
{
    if (n == 0)
        throw ConfigError(fmt::format("{}: empty batch", what));
}

/// Forward / backward buffers reused across iterations.
template <class T>
struct Workspace
{
    TapeT<T> tape;
    Mat<T> adj;
};

template <class T>
double physics_impl(Layers<T> const& layers, Normalization const& norm, std::vector<Point> const& points,
                    double Re, Layers<T>* grad, Workspace<T>& ws)
{
    forward_impl(layers, norm, points, 6, ws.tape);
    double const w = 1.0 / static_cast<double>(points.size());
    auto const res = residuals_from_tape(ws.tape, norm, Re, w, grad ? &ws.adj : nullptr);
    double sum = 0.0;
    for (auto const& r : res)
        sum += r.e1 * r.e1 + r.e2 * r.e2 + r.e3 * r.e3 + r.e4 * r.e4;
    if (grad)
        backward_impl(layers, ws.tape, ws.adj, *grad);
    return sum * w;
}

template <class T>
double imageflow_impl(Layers<T> const& layers, Normalization const& norm,
                      std::vector<ConcentrationSample> const& data, double lambda0, Layers<T>* grad,
                      Workspace<T>& ws, std::vector<Point>& pts)
{
    pts.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        pts[i] = data[i].at;
    forward_impl(layers, norm, pts, 1, ws.tape);
    double const w = lambda0 / static_cast<double>(data.size());
    double sum = 0.0;
    if (grad)
        ws.adj.setZero(kOutputs, static_cast<long>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i)
    {
        double const d = static_cast<double>(ws.tape.out(0, static_cast<long>(i))) - data[i].c;
        sum += d * d;
        if (grad)
            ws.adj(0, static_cast<long>(i)) = static_cast<T>(2.0 * w * d);
    }
    if (grad)
        backward_impl(layers, ws.tape, ws.adj, *grad);
    return sum * w;
}

template <class T>
double sinoflow_impl(Layers<T> const& layers, Normalization const& norm, std::vector<RaySample> const& rays,
                     double lambda1, double unit, Layers<T>* grad, Workspace<T>& ws,
                     std::vector<Point>& pts)
{
    pts.clear();
    for (auto const& r : rays)
        pts.insert(pts.end(), r.quad.points.begin(), r.quad.points.end());
    double const w = lambda1 / static_cast<double>(rays.size());
    if (pts.empty())
    {
        double sum = 0.0;
        for (auto const& r : rays)
            sum += (r.g / unit) * (r.g / unit);
        return sum * w;
    }
    forward_impl(layers, norm, pts, 1, ws.tape);
    if (grad)
        ws.adj.setZero(kOutputs, static_cast<long>(pts.size()));
    double sum = 0.0;
    long k = 0;
    for (auto const& r : rays)
    {
        long const n = static_cast<long>(r.quad.points.size());
        double const g_hat = r.quad.dl * static_cast<double>(ws.tape.out.block(0, k, 1, n).sum());
        double const d = (g_hat - r.g) / unit;
        sum += d * d;
        if (grad && n > 0)
            ws.adj.block(0, k, 1, n).setConstant(static_cast<T>(2.0 * w * d * r.quad.dl / unit));
        k += n;
    }
    if (grad)
        backward_impl(layers, ws.tape, ws.adj, *grad);
    return sum * w;
}

} // namespace

std::vector<Residuals> physics_residuals(FieldNetwork const& net, std::vector<Point> const& points,
                                         double Re)
{
    if (!(Re > 0.0))
        throw ConfigError("physics_residuals: Re must be positive");
    net.check_domain(points);
    Tape const tape = net.forward(points, Jet::second);
    return residuals_from_tape<double>(tape, net.normalization(), Re, 0.0, nullptr);
}

double loss_physics(FieldNetwork const& net, std::vector<Point> const& points, double Re,
                    Parameters* grad)
{
    require_points(points.size(), "loss_physics");
    if (!(Re > 0.0))
        throw ConfigError("loss_physics: Re must be positive");
    net.check_domain(points);
    Workspace<double> ws;
    return physics_impl(net.parameters(), net.normalization(), points, Re, grad, ws);
}

double loss_imageflow_data(FieldNetwork const& net, std::vector<ConcentrationSample> const& data,
                           double lambda0, Parameters* grad)
{
    require_points(data.size(), "loss_imageflow_data");
    std::vector<Point> pts;
    for (auto const& d : data)
        pts.push_back(d.at);
    net.check_domain(pts);
    Workspace<double> ws;
    return imageflow_impl(net.parameters(), net.normalization(), data, lambda0, grad, ws, pts);
}

RayQuadrature ray_quadrature(ctsim::Sinogram const& sino, int view, int channel, GridSpec const& grid,
                             std::vector<std::uint8_t> const& roi, int n_p)
{
    if (view < 0 || view >= sino.n_views || channel < 0 || channel >= sino.n_channels)
        throw DomainError(fmt::format("ray ({}, {}) is outside the sinogram", view, channel));
    if (n_p < 1)
        throw ConfigError("ray_quadrature: n_p must be positive");
    if (roi.size() != grid.size())
        throw ConfigError("ray_quadrature: ROI does not match the grid");
    ctsim::Ray const ray = ctsim::fan_ray(sino.geometry, sino.view_angle[view],
                                          sino.geometry.channel_angle(channel));
    RayQuadrature q;
    double s0 = 0.0, s1 = 0.0;
    if (!ctsim::clip_ray(ray, {grid.x_min, grid.y_min, grid.x_max(), grid.y_max()}, s0, s1))
        return q;
    q.chord = s1 - s0;
    q.dl = q.chord / n_p;
    double const t = sino.scale.to_t(sino.view_time[view]);
    for (int k = 0; k < n_p; ++k)
    {
        double const s = s0 + (k + 0.5) * q.dl;
        double const x = ray.ox + s * ray.dx;
        double const y = ray.oy + s * ray.dy;
        int row = 0, col = 0;
        if (!grid.locate(x, y, row, col) || !roi[grid.index(row, col)])
            continue;
        q.points.push_back({t, sino.scale.to_x(x), sino.scale.to_y(y)});
    }
    return q;
}

RaySampler::RaySampler(ctsim::Sinogram const& sino, GridSpec const& grid,
                       std::vector<std::uint8_t> const& roi, int n_p)
    : sino_(&sino), grid_(grid), roi_(&roi), n_p_(n_p)
{
    if (roi.size() != grid.size())
        throw ConfigError("RaySampler: ROI does not match the grid");
    geometry::RasterMask m;
    m.grid = grid;
    m.roi = roi;
    m.lumen = roi;
    auto const box = m.roi_bounds();
    std::uint64_t total = 0;
    for (int v = 0; v < sino.n_views; ++v)
    {
        if (!sino.view_on(v))
            continue;
        int lo = -1, hi = -1;
        for (int j = 0; j < sino.n_channels; ++j)
        {
            ctsim::Ray const ray = ctsim::fan_ray(sino.geometry, sino.view_angle[v],
                                                  sino.geometry.channel_angle(j));
            double s0 = 0.0, s1 = 0.0;
            if (ctsim::clip_ray(ray, box, s0, s1))
            {
                if (lo < 0)
                    lo = j;
                hi = j;
            }
        }
        if (lo < 0)
            continue;
        total += static_cast<std::uint64_t>(hi - lo + 1);
        views_.push_back(v);
        first_channel_.push_back(lo);
        cumulative_.push_back(total);
    }
    if (total == 0)
        throw ConfigError("no pulse-on ray of the sinogram crosses the ROI");
}

std::vector<RaySample> RaySampler::draw(std::mt19937_64& rng, int n) const
{
    std::uniform_int_distribution<std::uint64_t> pick(0, size() - 1);
    std::vector<RaySample> rays(static_cast<std::size_t>(n));
    for (auto& r : rays)
    {
        std::uint64_t const k = pick(rng);
        auto const it = std::upper_bound(cumulative_.begin(), cumulative_.end(), k);
        std::size_t const slot = static_cast<std::size_t>(it - cumulative_.begin());
        std::uint64_t const before = slot == 0 ? 0 : cumulative_[slot - 1];
        r.view = views_[slot];
        r.channel = first_channel_[slot] + static_cast<int>(k - before);
        r.g = sino_->at(r.view, r.channel);
        r.quad = ray_quadrature(*sino_, r.view, r.channel, grid_, *roi_, n_p_);
    }
    return rays;
}

double sinoflow_render(FieldNetwork const& net, RayQuadrature const& quad)
{
    if (quad.points.empty())
        return 0.0;
    double sum = 0.0;
    for (auto const& f : net.evaluate(quad.points))
        sum += f.c;
    return sum * quad.dl;
}

double sinoflow_render(flowgen::FieldMovie const& movie, RayQuadrature const& quad)
{
    double sum = 0.0;
    for (auto const& p : quad.points)
        sum += movie.sample(flowgen::Field::c, p.t, movie.scale.from_x(p.x), movie.scale.from_y(p.y));
    return sum * quad.dl;
}

double loss_sinoflow_data(FieldNetwork const& net, std::vector<RaySample> const& rays, double lambda1,
                          double unit, Parameters* grad)
{
    require_points(rays.size(), "loss_sinoflow_data");
    if (!(unit > 0.0))
        throw ConfigError("loss_sinoflow_data: unit must be positive");
    std::vector<Point> pts;
    for (auto const& r : rays)
        net.check_domain(r.quad.points);
    Workspace<double> ws;
    return sinoflow_impl(net.parameters(), net.normalization(), rays, lambda1, unit, grad, ws, pts);
}

char const* mode_name(Mode m)
{
    return m == Mode::imageflow ? "imageflow" : "sinoflow";
}

Mode mode_from_name(std::string const& name)
{
    if (name == "imageflow")
        return Mode::imageflow;
    if (name == "sinoflow")
        return Mode::sinoflow;
    throw ConfigError(fmt::format("unknown PINN mode '{}'", name));
}

void TrainConfig::validate() const
{
    if (iterations < 0)
        throw ConfigError("iterations must be non-negative");
    if (!(learning_rate > 0.0))
        throw ConfigError("learning rate must be positive");
    if (n_p < 1 || n_phys < 1 || n_data < 1 || n_rays < 1)
        throw ConfigError("batch sizes must be positive");
    if (!(Re > 0.0))
        throw ConfigError("Re must be positive");
    if (lambda0 < 0.0)
        throw ConfigError("lambda0 must be non-negative");
    if (history_every < 1)
        throw ConfigError("history cadence must be positive");
    if (checkpoint_every < 0 || (checkpoint_every > 0 && checkpoint_dir.empty()))
        throw ConfigError("checkpoint cadence needs a checkpoint directory");
    if (sino_unit < 0.0)
        throw ConfigError("sinogram unit must be non-negative");
}

Normalization TrainingData::normalization() const
{
    geometry::RasterMask m;
    m.grid = grid;
    m.roi = roi;
    m.lumen = roi;
    auto const box = m.roi_bounds();
    Normalization n;
    n.lo = {window[0], scale.to_x(box[0]), scale.to_y(box[1])};
    n.hi = {window[1], scale.to_x(box[2]), scale.to_y(box[3])};
    n.validate();
    return n;
}

DomainSampler::DomainSampler(TrainingData const& data)
    : grid_(data.grid), scale_(data.scale), window_(data.window)
{
    if (data.roi.size() != grid_.size())
        throw ConfigError("training ROI does not match the grid");
    for (std::size_t i = 0; i < data.roi.size(); ++i)
        if (data.roi[i])
            pixels_.push_back(static_cast<std::uint32_t>(i));
    if (pixels_.empty())
        throw ConfigError("training ROI is empty");
    if (!(window_[1] > window_[0]))
        throw ConfigError("training window is empty");
}

Point DomainSampler::draw(std::mt19937_64& rng) const
{
    std::uniform_int_distribution<std::size_t> pick(0, pixels_.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uint32_t const idx = pixels_[pick(rng)];
    int const row = static_cast<int>(idx / static_cast<std::uint32_t>(grid_.nx));
    int const col = static_cast<int>(idx % static_cast<std::uint32_t>(grid_.nx));
    double const x = grid_.x_min + (col + unit(rng)) * grid_.pixel;
    double const y = grid_.y_min + (row + unit(rng)) * grid_.pixel;
    double const t = window_[0] + unit(rng) * (window_[1] - window_[0]);
    return {t, scale_.to_x(x), scale_.to_y(y)};
}

namespace {

class Adam
{
  public:
    Adam(FieldNetwork const& net, double lr) : lr_(lr), m_(net.zeros_like()), v_(net.zeros_like()) {}

    void step(Parameters& p, Parameters const& g)
    {
        ++t_;
        double const c1 = 1.0 - std::pow(kBeta1, t_);
        double const c2 = 1.0 - std::pow(kBeta2, t_);
        for (std::size_t l = 0; l < p.size(); ++l)
        {
            update(p[l].W.array(), g[l].W.array(), m_[l].W.array(), v_[l].W.array(), c1, c2);
            update(p[l].b.array(), g[l].b.array(), m_[l].b.array(), v_[l].b.array(), c1, c2);
        }
    }

  private:
    static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    template <class P, class G>
    void update(P p, G const& g, P m, P v, double c1, double c2)
    {
        m = kBeta1 * m + (1.0 - kBeta1) * g;
        v = kBeta2 * v + (1.0 - kBeta2) * g * g;
        p -= lr_ * (m / c1) / ((v / c2).sqrt() + kEps);
    }

    double lr_;
    int t_ = 0;
    Parameters m_, v_;
};

double movie_concentration(flowgen::FieldMovie const& ct, Point const& p)
{
    int const k = ct.nearest_frame(p.t);
    GridSpec const& g = ct.grid;
    double const x = ct.scale.from_x(p.x);
    double const y = ct.scale.from_y(p.y);
    return bilinear_sample(ct.frame(flowgen::Field::c, k), g.nx, g.ny, g.col_coord(x), g.row_coord(y));
}

template <class T>
void clear(Layers<T>& g)
{
    for (auto& l : g)
    {
        l.W.setZero();
        l.b.setZero();
    }
}

template <class T>
void cast_into(Parameters const& from, Layers<T>& to)
{
    to.resize(from.size());
    for (std::size_t l = 0; l < from.size(); ++l)
    {
        to[l].W = from[l].W.template cast<T>();
        to[l].b = from[l].b.template cast<T>();
    }
}

template <class T>
TrainResult run_training(FieldNetwork& net, TrainingData const& data, TrainConfig const& config)
{
    DomainSampler const domain(data);
    std::optional<RaySampler> rays;
    double unit = config.sino_unit;
    if (config.mode == Mode::sinoflow)
    {
        rays.emplace(*data.sinogram, data.grid, data.roi, config.n_p);
        if (unit == 0.0)
            unit = data.sinogram->geometry.fov / config.n_p;
    }
    double const lambda1 = config.effective_lambda1();
    Normalization const& norm = net.normalization();

    std::mt19937_64 rng(config.seed);
    Adam adam(net, config.learning_rate);
    Layers<T> layers, grad;
    cast_into(net.parameters(), layers);
    cast_into(net.zeros_like(), grad);
    Parameters grad64 = net.zeros_like();
    Workspace<T> ws;
    std::vector<Point> scratch;
    TrainResult result;
    double initial = 0.0;
    int above = 0;

    std::vector<Point> phys(static_cast<std::size_t>(config.n_phys));
    std::vector<ConcentrationSample> samples(static_cast<std::size_t>(config.n_data));
    for (int it = 0; it <= config.iterations; ++it)
    {
        for (auto& p : phys)
            p = domain.draw(rng);
        clear(grad);
        double const lp = physics_impl(layers, norm, phys, config.Re, &grad, ws);
        double ld = 0.0;
        if (config.mode == Mode::imageflow)
        {
            for (auto& s : samples)
            {
                s.at = domain.draw(rng);
                s.c = movie_concentration(*data.ct, s.at);
            }
            ld = imageflow_impl(layers, norm, samples, config.lambda0, &grad, ws, scratch);
        }
        else
        {
            ld = sinoflow_impl(layers, norm, rays->draw(rng, config.n_rays), lambda1, unit, &grad, ws,
                               scratch);
        }
        double const total = lp + ld;

        bool const last = it == config.iterations;
        if (it % config.history_every == 0 || last)
            result.history.push_back({it, lp, ld, total});
        if (!std::isfinite(total))
        {
            if (!config.checkpoint_dir.empty())
                save_checkpoint(net, config, it, config.checkpoint_dir);
            throw TrainingError(fmt::format("loss became non-finite at iteration {}", it));
        }
        if (it == 0)
            initial = total;
        above = total > 1e3 * initial ? above + 1 : 0;
        if (above >= 1000)
        {
            if (!config.checkpoint_dir.empty())
                save_checkpoint(net, config, it, config.checkpoint_dir);
            throw TrainingError(fmt::format("loss diverged (above 1e3 x initial since iteration {})",
                                            it - 999));
        }
        result.iterations = it;
        if (last)
            break;
        for (std::size_t l = 0; l < grad.size(); ++l)
        {
            grad64[l].W = grad[l].W.template cast<double>();
            grad64[l].b = grad[l].b.template cast<double>();
        }
        adam.step(net.parameters(), grad64);
        cast_into(net.parameters(), layers);
        if (config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0)
            save_checkpoint(net, config, it + 1, config.checkpoint_dir);
    }
    return result;
}

} // namespace

TrainResult train(FieldNetwork& net, TrainingData const& data, TrainConfig const& config)
{
    config.validate();
    if (config.mode == Mode::imageflow && !data.ct)
        throw ConfigError("ImageFlow training needs a reconstructed movie");
    if (config.mode == Mode::sinoflow && !data.sinogram)
        throw ConfigError("SinoFlow training needs a sinogram");
    if (config.mode == Mode::imageflow && !data.ct->has(flowgen::Field::c))
        throw ConfigError("reconstructed movie carries no concentration");
    Normalization const want = data.normalization();
    for (int a = 0; a < 3; ++a)
        if (std::abs(want.lo[a] - net.normalization().lo[a]) > 1e-9 * (want.hi[a] - want.lo[a])
            || std::abs(want.hi[a] - net.normalization().hi[a]) > 1e-9 * (want.hi[a] - want.lo[a]))
            throw ConfigError("network normalisation does not match the training domain");
    if (config.single_precision)
        return run_training<float>(net, data, config);
    return run_training<double>(net, data, config);
}

void write_history_csv(std::vector<HistoryRow> const& history, std::string const& path)
{
    std::ofstream out(path);
    if (!out)
        throw Error(fmt::format("cannot write '{}'", path));
    out << "iteration,L_physics,L_data,L_total\n";
    for (auto const& h : history)
        out << fmt::format("{},{:.10g},{:.10g},{:.10g}\n", h.iteration, h.physics, h.data, h.total);
}

namespace {

store::json train_to_json(TrainConfig const& c)
{
    return {{"mode", mode_name(c.mode)},     {"iterations", c.iterations},
            {"learning_rate", c.learning_rate}, {"lambda0", c.lambda0},
            {"lambda1", c.effective_lambda1()}, {"n_p", c.n_p},
            {"Re", c.Re},                     {"n_phys", c.n_phys},
            {"n_data", c.n_data},             {"n_rays", c.n_rays},
            {"seed", c.seed},                 {"sino_unit", c.sino_unit}};
}

} // namespace

void save_checkpoint(FieldNetwork const& net, TrainConfig const& config, int iteration,
                     std::string const& dir)
{
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<double> flat;
    flat.reserve(net.parameter_count());
    for (auto const& l : net.parameters())
    {
        flat.insert(flat.end(), l.W.data(), l.W.data() + l.W.size());
        flat.insert(flat.end(), l.b.data(), l.b.data() + l.b.size());
    }
    auto const& n = net.normalization();
    store::json meta = {
        {"kind", "ctflow.pinn"},
        {"network",
         {{"hidden_layers", net.config().hidden_layers},
          {"width", net.config().width},
          {"seed", net.config().seed}}},
        {"normalization", {{"lo", n.lo}, {"hi", n.hi}}},
        {"iteration", iteration},
        {"train", train_to_json(config)},
        {"parameter_count", flat.size()},
    };
    store::write_f64(fs::path(dir) / "params.f64", flat);
    store::write_json(fs::path(dir) / "meta.json", meta);
}

FieldNetwork load_checkpoint(std::string const& dir, int* iteration)
{
    namespace fs = std::filesystem;
    auto const meta = store::read_json(fs::path(dir) / "meta.json");
    if (store::require(meta, "kind") != "ctflow.pinn")
        throw FormatError(fmt::format("'{}' is not a network checkpoint", dir));
    try
    {
        auto const& nj = store::require(meta, "network");
        NetworkConfig cfg;
        cfg.hidden_layers = store::require(nj, "hidden_layers").get<int>();
        cfg.width = store::require(nj, "width").get<int>();
        cfg.seed = store::require(nj, "seed").get<std::uint64_t>();
        auto const& norm_j = store::require(meta, "normalization");
        Normalization norm;
        norm.lo = store::require(norm_j, "lo").get<std::array<double, 3>>();
        norm.hi = store::require(norm_j, "hi").get<std::array<double, 3>>();
        FieldNetwork net(cfg, norm);
        auto const count = store::require(meta, "parameter_count").get<std::size_t>();
        if (count != net.parameter_count())
            throw FormatError("checkpoint parameter count disagrees with its architecture");
        auto const flat = store::read_f64(fs::path(dir) / "params.f64", count);
        std::size_t k = 0;
        for (auto& l : net.parameters())
        {
            std::copy_n(flat.begin() + static_cast<long>(k), l.W.size(), l.W.data());
            k += static_cast<std::size_t>(l.W.size());
            std::copy_n(flat.begin() + static_cast<long>(k), l.b.size(), l.b.data());
            k += static_cast<std::size_t>(l.b.size());
        }
        if (iteration)
            *iteration = store::require(meta, "iteration").get<int>();
        return net;
    }
    catch (store::json::exception const& e)
    {
        throw FormatError(fmt::format("malformed checkpoint '{}': {}", dir, e.what()));
    }
    catch (ConfigError const& e)
    {
        throw FormatError(fmt::format("malformed checkpoint '{}': {}", dir, e.what()));
    }
}

} // namespace ctflow::pinn
