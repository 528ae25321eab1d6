#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

#include "exitrf/cvnn.hpp"

namespace exitrf::cvnn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

// Patch matrix rows are (channel, ky, kx), columns are output pixels.
void im2col(const double* src, int channels, int h, int w, int k, int stride, int pad, int oh, int ow,
            double* cols) {
    const std::size_t P = static_cast<std::size_t>(oh) * ow;
    for (int c = 0; c < channels; ++c) {
        const double* plane = src + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    double* out = row + static_cast<std::size_t>(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill_n(out, ow, 0.0);
                        continue;
                    }
                    const double* in = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        out[ox] = (ix >= 0 && ix < w) ? in[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int channels, int h, int w, int k, int stride, int pad, int oh, int ow,
                double* dst) {
    const std::size_t P = static_cast<std::size_t>(oh) * ow;
    for (int c = 0; c < channels; ++c) {
        double* plane = dst + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * P;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    const double* in = row + static_cast<std::size_t>(oy) * ow;
                    double* out = plane + static_cast<std::size_t>(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Param::Param(std::string n, std::vector<int> d) : name(std::move(n)), dims(std::move(d)) {
    std::size_t total = 1;
    for (int v : dims) total *= static_cast<std::size_t>(v);
    value.assign(total, 0.0);
    grad.assign(total, 0.0);
}

// ---------------------------------------------------------------------------
// CConv

CConv::CConv(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding)
    : A(name + ".A", {out_channels, in_channels, kernel, kernel}),
      B(name + ".B", {out_channels, in_channels, kernel, kernel}),
      cin_(in_channels),
      cout_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || padding < 0) {
        throw std::invalid_argument("CConv " + name + ": invalid geometry");
    }
}

void CConv::init(Rng& rng) {
    // Variance split evenly between the real and imaginary kernel parts.
    const double fan_in = static_cast<double>(cin_) * kernel_ * kernel_;
    const double bound = std::sqrt(3.0 / fan_in);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : A.value) v = u(rng);
    for (double& v : B.value) v = u(rng);
}

ComplexTensor CConv::forward(const ComplexTensor& x, Mode mode) {
    if (x.shape.c != cin_) {
        throw std::invalid_argument(A.name + ": input has " + std::to_string(x.shape.c) + " channels, expected " +
                                    std::to_string(cin_));
    }
    const int oh = out_size(x.shape.h);
    const int ow = out_size(x.shape.w);
    if (oh < 1 || ow < 1) throw std::invalid_argument(A.name + ": input " + x.shape.str() + " too small");
    ComplexTensor y({x.shape.n, cout_, oh, ow});

    const Eigen::Index K = static_cast<Eigen::Index>(cin_) * kernel_ * kernel_;
    const Eigen::Index P = static_cast<Eigen::Index>(oh) * ow;
    RowMat wblock(2 * cout_, 2 * K);
    CMapMat a(A.value.data(), cout_, K);
    CMapMat b(B.value.data(), cout_, K);
    wblock.topLeftCorner(cout_, K) = a;
    wblock.topRightCorner(cout_, K) = -b;
    wblock.bottomLeftCorner(cout_, K) = b;
    wblock.bottomRightCorner(cout_, K) = a;

    RowMat cols(2 * K, P);
    const std::size_t in_per = static_cast<std::size_t>(cin_) * x.shape.plane();
    const std::size_t out_per = static_cast<std::size_t>(cout_) * P;
    for (int n = 0; n < x.shape.n; ++n) {
        im2col(x.re.data() + n * in_per, cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow, cols.data());
        im2col(x.im.data() + n * in_per, cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow,
               cols.data() + K * P);
        MapMat(y.re.data() + n * out_per, cout_, P).noalias() = wblock.topRows(cout_) * cols;
        MapMat(y.im.data() + n * out_per, cout_, P).noalias() = wblock.bottomRows(cout_) * cols;
    }
    if (mode == Mode::Train) cache_x_ = x;
    return y;
}

ComplexTensor CConv::backward(const ComplexTensor& dy) {
    const ComplexTensor& x = cache_x_;
    const int oh = dy.shape.h;
    const int ow = dy.shape.w;
    const Eigen::Index K = static_cast<Eigen::Index>(cin_) * kernel_ * kernel_;
    const Eigen::Index P = static_cast<Eigen::Index>(oh) * ow;

    RowMat wblock(2 * cout_, 2 * K);
    CMapMat a(A.value.data(), cout_, K);
    CMapMat b(B.value.data(), cout_, K);
    wblock.topLeftCorner(cout_, K) = a;
    wblock.topRightCorner(cout_, K) = -b;
    wblock.bottomLeftCorner(cout_, K) = b;
    wblock.bottomRightCorner(cout_, K) = a;

    ComplexTensor dx(x.shape);
    RowMat dw = RowMat::Zero(2 * cout_, 2 * K);
    RowMat cols(2 * K, P);
    RowMat dcols(2 * K, P);
    const std::size_t in_per = static_cast<std::size_t>(cin_) * x.shape.plane();
    const std::size_t out_per = static_cast<std::size_t>(cout_) * P;
    for (int n = 0; n < x.shape.n; ++n) {
        im2col(x.re.data() + n * in_per, cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow, cols.data());
        im2col(x.im.data() + n * in_per, cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow,
               cols.data() + K * P);
        CMapMat dre(dy.re.data() + n * out_per, cout_, P);
        CMapMat dim(dy.im.data() + n * out_per, cout_, P);
        dw.topRows(cout_).noalias() += dre * cols.transpose();
        dw.bottomRows(cout_).noalias() += dim * cols.transpose();
        dcols.noalias() = wblock.topRows(cout_).transpose() * dre;
        dcols.noalias() += wblock.bottomRows(cout_).transpose() * dim;
        col2im_add(dcols.data(), cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow,
                   dx.re.data() + n * in_per);
        col2im_add(dcols.data() + K * P, cin_, x.shape.h, x.shape.w, kernel_, stride_, padding_, oh, ow,
                   dx.im.data() + n * in_per);
    }
    MapMat ga(A.grad.data(), cout_, K);
    MapMat gb(B.grad.data(), cout_, K);
    ga += dw.topLeftCorner(cout_, K) + dw.bottomRightCorner(cout_, K);
    gb += dw.bottomLeftCorner(cout_, K) - dw.topRightCorner(cout_, K);
    return dx;
}

// ---------------------------------------------------------------------------
// CBatchNorm

std::array<double, 3> inv_sqrt_2x2(double rr, double ri, double ii) {
    const double det = rr * ii - ri * ri;
    if (!(det > 0.0) || !(rr > 0.0)) throw std::domain_error("inv_sqrt_2x2: matrix is not positive definite");
    const double s = std::sqrt(det);
    const double t = std::sqrt(rr + ii + 2.0 * s);
    const double inv = 1.0 / (s * t);
    return {(ii + s) * inv, -ri * inv, (rr + s) * inv};
}

CBatchNorm::CBatchNorm(std::string name, int channels)
    : gamma(name + ".gamma", {channels, 3}),
      beta(name + ".beta", {channels, 2}),
      running_mean(2 * static_cast<std::size_t>(channels), 0.0),
      running_cov(3 * static_cast<std::size_t>(channels), 0.0),
      name_(std::move(name)),
      channels_(channels) {
    const double g = 1.0 / std::sqrt(2.0);
    for (int c = 0; c < channels; ++c) {
        gamma.value[3 * c] = g;
        gamma.value[3 * c + 2] = g;
        running_cov[3 * c] = 1.0;
        running_cov[3 * c + 2] = 1.0;
    }
}

ComplexTensor CBatchNorm::forward(const ComplexTensor& x, Mode mode) {
    if (x.shape.c != channels_) throw std::invalid_argument(name_ + ": channel mismatch " + x.shape.str());
    const std::size_t plane = x.shape.plane();
    const std::size_t m = static_cast<std::size_t>(x.shape.n) * plane;
    ComplexTensor y(x.shape);
    last_mode_ = mode;
    if (mode == Mode::Train) {
        if (m < 2) throw std::invalid_argument(name_ + ": train mode needs >= 2 values per channel");
        xc_ = ComplexTensor(x.shape);
        xhat_ = ComplexTensor(x.shape);
        cov_.assign(static_cast<std::size_t>(channels_), {});
    }
    for (int c = 0; c < channels_; ++c) {
        double mr, mi, vrr, vri, vii;
        if (mode == Mode::Train) {
            double sr = 0, si = 0;
            for (int n = 0; n < x.shape.n; ++n) {
                const std::size_t off = x.plane_offset(n, c);
                for (std::size_t k = 0; k < plane; ++k) {
                    sr += x.re[off + k];
                    si += x.im[off + k];
                }
            }
            mr = sr / static_cast<double>(m);
            mi = si / static_cast<double>(m);
            double srr = 0, sri = 0, sii = 0;
            for (int n = 0; n < x.shape.n; ++n) {
                const std::size_t off = x.plane_offset(n, c);
                for (std::size_t k = 0; k < plane; ++k) {
                    const double a = x.re[off + k] - mr;
                    const double b = x.im[off + k] - mi;
                    srr += a * a;
                    sri += a * b;
                    sii += b * b;
                }
            }
            vrr = srr / static_cast<double>(m);
            vri = sri / static_cast<double>(m);
            vii = sii / static_cast<double>(m);
            const double mom = kMomentum;
            running_mean[2 * c] = (1 - mom) * running_mean[2 * c] + mom * mr;
            running_mean[2 * c + 1] = (1 - mom) * running_mean[2 * c + 1] + mom * mi;
            running_cov[3 * c] = (1 - mom) * running_cov[3 * c] + mom * vrr;
            running_cov[3 * c + 1] = (1 - mom) * running_cov[3 * c + 1] + mom * vri;
            running_cov[3 * c + 2] = (1 - mom) * running_cov[3 * c + 2] + mom * vii;
        } else {
            mr = running_mean[2 * c];
            mi = running_mean[2 * c + 1];
            vrr = running_cov[3 * c];
            vri = running_cov[3 * c + 1];
            vii = running_cov[3 * c + 2];
        }
        vrr += kEpsilon;
        vii += kEpsilon;
        const auto w = inv_sqrt_2x2(vrr, vri, vii);
        if (mode == Mode::Train) cov_[c] = {vrr, vri, vii};
        const double grr = gamma.value[3 * c], gri = gamma.value[3 * c + 1], gii = gamma.value[3 * c + 2];
        const double br = beta.value[2 * c], bi = beta.value[2 * c + 1];
        for (int n = 0; n < x.shape.n; ++n) {
            const std::size_t off = x.plane_offset(n, c);
            for (std::size_t k = 0; k < plane; ++k) {
                const double a = x.re[off + k] - mr;
                const double b = x.im[off + k] - mi;
                const double hr = w[0] * a + w[1] * b;
                const double hi = w[1] * a + w[2] * b;
                y.re[off + k] = grr * hr + gri * hi + br;
                y.im[off + k] = gri * hr + gii * hi + bi;
                if (mode == Mode::Train) {
                    xc_.re[off + k] = a;
                    xc_.im[off + k] = b;
                    xhat_.re[off + k] = hr;
                    xhat_.im[off + k] = hi;
                }
            }
        }
    }
    return y;
}

ComplexTensor CBatchNorm::backward(const ComplexTensor& dy) {
    if (last_mode_ != Mode::Train) throw std::logic_error(name_ + ": backward requires a train-mode forward");
    const std::size_t plane = dy.shape.plane();
    const double m = static_cast<double>(static_cast<std::size_t>(dy.shape.n) * plane);
    ComplexTensor dx(dy.shape);
    for (int c = 0; c < channels_; ++c) {
        const double grr = gamma.value[3 * c], gri = gamma.value[3 * c + 1], gii = gamma.value[3 * c + 2];
        const auto [vrr, vri, vii] = cov_[c];
        const auto w = inv_sqrt_2x2(vrr, vri, vii);

        double d_grr = 0, d_gri = 0, d_gii = 0, d_br = 0, d_bi = 0;
        // G_W = sum_k g_k x_k^T with g = gamma * dy
        double gw11 = 0, gw12 = 0, gw21 = 0, gw22 = 0;
        for (int n = 0; n < dy.shape.n; ++n) {
            const std::size_t off = dy.plane_offset(n, c);
            for (std::size_t k = 0; k < plane; ++k) {
                const double dr = dy.re[off + k], di = dy.im[off + k];
                const double hr = xhat_.re[off + k], hi = xhat_.im[off + k];
                d_grr += dr * hr;
                d_gri += dr * hi + di * hr;
                d_gii += di * hi;
                d_br += dr;
                d_bi += di;
                const double gr = grr * dr + gri * di;
                const double gi = gri * dr + gii * di;
                const double xr = xc_.re[off + k], xi = xc_.im[off + k];
                gw11 += gr * xr;
                gw12 += gr * xi;
                gw21 += gi * xr;
                gw22 += gi * xi;
            }
        }
        gamma.grad[3 * c] += d_grr;
        gamma.grad[3 * c + 1] += d_gri;
        gamma.grad[3 * c + 2] += d_gii;
        beta.grad[2 * c] += d_br;
        beta.grad[2 * c + 1] += d_bi;

        // W = R^{-1}, R = V^{1/2}.  dL/dR = -W G_W W, then dL/dV solves R G + G R = dL/dR.
        Eigen::Matrix2d W;
        W << w[0], w[1], w[1], w[2];
        Eigen::Matrix2d GW;
        GW << gw11, gw12, gw21, gw22;
        const Eigen::Matrix2d H = -W * GW * W;
        const double s = std::sqrt(vrr * vii - vri * vri);
        const double t = std::sqrt(vrr + vii + 2.0 * s);
        const double ra = (vrr + s) / t, rb = vri / t, rd = (vii + s) / t;
        Eigen::Matrix4d L;
        // unknowns ordered (g11, g12, g21, g22)
        L << 2 * ra, rb, rb, 0,
             rb, ra + rd, 0, rb,
             rb, 0, ra + rd, rb,
             0, rb, rb, 2 * rd;
        const Eigen::Vector4d rhs(H(0, 0), H(0, 1), H(1, 0), H(1, 1));
        const Eigen::Vector4d g = L.partialPivLu().solve(rhs);
        // (G + G^T) / m
        const double s11 = 2 * g(0) / m, s12 = (g(1) + g(2)) / m, s22 = 2 * g(3) / m;

        double mean_r = 0, mean_i = 0;
        for (int n = 0; n < dy.shape.n; ++n) {
            const std::size_t off = dy.plane_offset(n, c);
            for (std::size_t k = 0; k < plane; ++k) {
                const double dr = dy.re[off + k], di = dy.im[off + k];
                const double gr = grr * dr + gri * di;
                const double gi = gri * dr + gii * di;
                const double xr = xc_.re[off + k], xi = xc_.im[off + k];
                const double vr = w[0] * gr + w[1] * gi + s11 * xr + s12 * xi;
                const double vi = w[1] * gr + w[2] * gi + s12 * xr + s22 * xi;
                dx.re[off + k] = vr;
                dx.im[off + k] = vi;
                mean_r += vr;
                mean_i += vi;
            }
        }
        mean_r /= m;
        mean_i /= m;
        for (int n = 0; n < dy.shape.n; ++n) {
            const std::size_t off = dy.plane_offset(n, c);
            for (std::size_t k = 0; k < plane; ++k) {
                dx.re[off + k] -= mean_r;
                dx.im[off + k] -= mean_i;
            }
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// CReLU

ComplexTensor crelu(const ComplexTensor& x) {
    ComplexTensor y(x.shape);
    for (std::size_t k = 0; k < x.re.size(); ++k) {
        y.re[k] = x.re[k] > 0.0 ? x.re[k] : 0.0;
        y.im[k] = x.im[k] > 0.0 ? x.im[k] : 0.0;
    }
    return y;
}

ComplexTensor crelu_backward(const ComplexTensor& x, const ComplexTensor& dy) {
    ComplexTensor dx(x.shape);
    for (std::size_t k = 0; k < x.re.size(); ++k) {
        dx.re[k] = x.re[k] > 0.0 ? dy.re[k] : 0.0;
        dx.im[k] = x.im[k] > 0.0 ? dy.im[k] : 0.0;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// BasicBlock

BasicBlock::BasicBlock(std::string name, int in_channels, int out_channels, BlockStructure structure)
    : conv1(name + ".conv1", in_channels, out_channels, 3, structure == BlockStructure::Downsample ? 2 : 1, 1),
      conv2(name + ".conv2", out_channels, out_channels, 3, 1, 1),
      bn1(name + ".bn1", out_channels),
      bn2(name + ".bn2", out_channels),
      structure_(structure),
      cin_(in_channels),
      cout_(out_channels) {
    if (structure == BlockStructure::Downsample) {
        down_conv = CConv(name + ".down_conv", in_channels, out_channels, 1, 2, 0);
        down_bn = CBatchNorm(name + ".down_bn", out_channels);
    } else if (in_channels != out_channels) {
        throw std::invalid_argument(name + ": identity residual needs in_channels == out_channels");
    }
}

void BasicBlock::init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
    if (structure_ == BlockStructure::Downsample) down_conv.init(rng);
}

std::vector<Param*> BasicBlock::params() {
    std::vector<Param*> p{&conv1.A, &conv1.B, &bn1.gamma, &bn1.beta, &conv2.A, &conv2.B, &bn2.gamma, &bn2.beta};
    if (structure_ == BlockStructure::Downsample) {
        p.insert(p.end(), {&down_conv.A, &down_conv.B, &down_bn.gamma, &down_bn.beta});
    }
    return p;
}

std::vector<std::pair<std::string, std::vector<double>*>> BasicBlock::buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (CBatchNorm* bn : {&bn1, &bn2, &down_bn}) {
        if (bn == &down_bn && structure_ != BlockStructure::Downsample) continue;
        out.emplace_back(bn->name() + ".running_mean", &bn->running_mean);
        out.emplace_back(bn->name() + ".running_cov", &bn->running_cov);
    }
    return out;
}

ComplexTensor BasicBlock::forward(const ComplexTensor& x, Mode mode) {
    ComplexTensor h = bn1.forward(conv1.forward(x, mode), mode);
    ComplexTensor a = crelu(h);
    if (mode == Mode::Train) pre1_ = std::move(h);
    ComplexTensor main = bn2.forward(conv2.forward(a, mode), mode);
    ComplexTensor sc = structure_ == BlockStructure::Downsample ? down_bn.forward(down_conv.forward(x, mode), mode) : x;
    if (sc.shape != main.shape) {
        throw std::invalid_argument("residual shape mismatch: " + main.shape.str() + " vs " + sc.shape.str());
    }
    for (std::size_t k = 0; k < main.re.size(); ++k) {
        main.re[k] += sc.re[k];
        main.im[k] += sc.im[k];
    }
    ComplexTensor out = crelu(main);
    if (mode == Mode::Train) sum_ = std::move(main);
    return out;
}

ComplexTensor BasicBlock::backward(const ComplexTensor& dy) {
    const ComplexTensor dsum = crelu_backward(sum_, dy);
    ComplexTensor da = conv2.backward(bn2.backward(dsum));
    ComplexTensor dx = conv1.backward(bn1.backward(crelu_backward(pre1_, da)));
    if (structure_ == BlockStructure::Downsample) {
        const ComplexTensor ds = down_conv.backward(down_bn.backward(dsum));
        for (std::size_t k = 0; k < dx.re.size(); ++k) {
            dx.re[k] += ds.re[k];
            dx.im[k] += ds.im[k];
        }
    } else {
        for (std::size_t k = 0; k < dx.re.size(); ++k) {
            dx.re[k] += dsum.re[k];
            dx.im[k] += dsum.im[k];
        }
    }
    return dx;
}

}  // namespace exitrf::cvnn
