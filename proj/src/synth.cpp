#include "netdeconv/data_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace netdeconv {

namespace {

Matd gauss_blob(long h, long w, double cy, double cx, double sy, double sx) {
    Matd b(h, w);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            double dy = (y - cy) / sy, dx = (x - cx) / sx;
            b(y, x) = std::exp(-0.5 * (dy * dy + dx * dx));
        }
    return b;
}

// circular shift, positive dy moves content down, positive dx right
Matd roll2(const Matd& m, long dy, long dx) {
    long h = m.rows(), w = m.cols();
    Matd out(h, w);
    for (long y = 0; y < h; ++y) {
        long sy = ((y - dy) % h + h) % h;
        for (long x = 0; x < w; ++x) out(y, x) = m(sy, ((x - dx) % w + w) % w);
    }
    return out;
}

long ifloor(double v) { return static_cast<long>(std::floor(v)); }

} // namespace

// ---------------------------------------------------------------------------

Tensor natural_rgb(RandomStream& rng, long h, long w, int shapes, double blur_sigma,
                   double noise) {
    if (h < 4 || w < 4) throw contract_error("natural_rgb image too small");
    std::array<Matd, 3> img;

    // bilinear gradient background from four corner colors per channel
    double corners[3][4];
    for (auto& row : corners)
        for (double& v : row) v = rng.uniform(0.1, 0.9);
    for (int ch = 0; ch < 3; ++ch) {
        img[ch].resize(h, w);
        for (long y = 0; y < h; ++y) {
            double fy = static_cast<double>(y) / static_cast<double>(h - 1);
            for (long x = 0; x < w; ++x) {
                double fx = static_cast<double>(x) / static_cast<double>(w - 1);
                img[ch](y, x) = corners[ch][0] * (1 - fy) * (1 - fx) +
                                corners[ch][1] * (1 - fy) * fx +
                                corners[ch][2] * fy * (1 - fx) + corners[ch][3] * fy * fx;
            }
        }
    }

    // opaque ellipses and rectangles
    for (int s = 0; s < shapes; ++s) {
        bool ellipse = rng.next_below(2) == 0;
        double cy = rng.uniform(0.0, static_cast<double>(h));
        double cx = rng.uniform(0.0, static_cast<double>(w));
        double ry = rng.uniform(0.03, 0.25) * static_cast<double>(h);
        double rx = rng.uniform(0.03, 0.25) * static_cast<double>(w);
        double col[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double dy = y - cy, dx = x - cx;
                bool in = ellipse ? (dy / ry) * (dy / ry) + (dx / rx) * (dx / rx) <= 1.0
                                  : std::abs(dy) <= ry && std::abs(dx) <= rx;
                if (in)
                    for (int ch = 0; ch < 3; ++ch) img[ch](y, x) = col[ch];
            }
    }

    // separable circular gaussian blur, radius 2
    const long r = 2;
    double g[2 * r + 1];
    double gsum = 0.0;
    for (long t = -r; t <= r; ++t) {
        g[t + r] = std::exp(-static_cast<double>(t * t) / (2.0 * blur_sigma * blur_sigma));
        gsum += g[t + r];
    }
    for (double& v : g) v /= gsum;
    for (int ch = 0; ch < 3; ++ch) {
        Matd tmp = Matd::Zero(h, w);
        for (long t = -r; t <= r; ++t) tmp += g[t + r] * roll2(img[ch], t, 0);
        Matd out = Matd::Zero(h, w);
        for (long t = -r; t <= r; ++t) out += g[t + r] * roll2(tmp, 0, t);
        img[ch] = out;
    }

    Tensor t({3, h, w});
    long i = 0;
    for (int ch = 0; ch < 3; ++ch)
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x)
                t.data[i++] = std::clamp(img[ch](y, x) + rng.gaussian(0.0, noise), 0.0, 1.0);
    return t;
}

Dataset synth_natural_set(uint64_t seed, long n, long hw) {
    if (n < 1) throw contract_error("synth_natural_set needs n >= 1");
    RandomStream rng(seed);
    Dataset d;
    d.images = Tensor({n, 3, hw, hw});
    d.labels.assign(static_cast<size_t>(n), 0);
    d.split = "natural";
    long per = 3 * hw * hw;
    for (long i = 0; i < n; ++i) {
        Tensor img = natural_rgb(rng, hw, hw);
        std::copy(img.data.begin(), img.data.end(), d.images.data.begin() + i * per);
    }
    return d;
}

// ---------------------------------------------------------------------------
// gray digits on a shared smooth background. Class signal is a small additive
// blob pattern; most pixel variance comes from the shared background basis.

Dataset synth_bg_digits(uint64_t seed, long n) {
    const long h = 28, w = 28, classes = 10;
    const double noise = 0.08, sig_amp = 0.35;
    RandomStream rng(seed);
    RandomStream proto_rng(1234);  // class prototypes shared across seeds

    std::vector<Matd> bg_basis;
    for (int b = 0; b < 6; ++b) {
        double cy = proto_rng.uniform(4.0, h - 4.0), cx = proto_rng.uniform(4.0, w - 4.0);
        double sy = proto_rng.uniform(4.0, 9.0), sx = proto_rng.uniform(4.0, 9.0);
        bg_basis.push_back(gauss_blob(h, w, cy, cx, sy, sx));
    }
    std::vector<Matd> protos;
    for (long c = 0; c < classes; ++c) {
        Matd img = Matd::Zero(h, w);
        for (int b = 0; b < 4; ++b) {
            double cy = proto_rng.uniform(6.0, h - 6.0), cx = proto_rng.uniform(6.0, w - 6.0);
            double sy = proto_rng.uniform(1.5, 3.5), sx = proto_rng.uniform(1.5, 3.5);
            img += proto_rng.uniform(0.6, 1.0) * gauss_blob(h, w, cy, cx, sy, sx);
        }
        protos.push_back(img / std::max(img.maxCoeff(), 1e-9));
    }

    Dataset d;
    d.images = Tensor({n, 1, h, w});
    d.labels.resize(static_cast<size_t>(n));
    d.split = "train";
    for (long i = 0; i < n; ++i) {
        long c = static_cast<long>(rng.next_below(classes));
        Matd img = Matd::Zero(h, w);
        for (const Matd& bg : bg_basis) img += rng.uniform(0.0, 0.8) * bg;
        long dy = static_cast<long>(rng.next_below(5)) - 2;
        long dx = static_cast<long>(rng.next_below(5)) - 2;
        img += sig_amp * rng.uniform(0.8, 1.2) * roll2(protos[c], dy, dx);
        double* px = &d.images.at4(i, 0, 0, 0);
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x)
                // raw range [0, 1.5], rescaled so stored pixels live in [0, 1]
                px[y * w + x] =
                    std::clamp(img(y, x) + rng.gaussian(0.0, noise), 0.0, 1.5) / 1.5;
        d.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(c);
    }
    return d;
}

// ---------------------------------------------------------------------------
// gray rectangles with jittered placement, one prototype layout per class

Dataset synth_fashion(uint64_t seed, long n, double noise) {
    const long h = 28, w = 28, classes = 10;
    RandomStream rng(seed);
    RandomStream proto_rng(4321);

    struct Rect {
        double ty, tx, hh, ww, amp;
    };
    std::vector<std::array<Rect, 3>> protos(classes);
    for (long c = 0; c < classes; ++c)
        for (Rect& r : protos[static_cast<size_t>(c)])
            r = {proto_rng.uniform(3.0, h - 9.0), proto_rng.uniform(3.0, w - 9.0),
                 proto_rng.uniform(5.0, 14.0), proto_rng.uniform(5.0, 14.0),
                 proto_rng.uniform(0.4, 0.9)};

    Dataset d;
    d.images = Tensor({n, 1, h, w});
    d.labels.resize(static_cast<size_t>(n));
    d.split = "train";
    for (long i = 0; i < n; ++i) {
        long c = static_cast<long>(rng.next_below(classes));
        Matd img = Matd::Zero(h, w);
        for (const Rect& r : protos[static_cast<size_t>(c)]) {
            long ty = ifloor(std::clamp(r.ty + rng.gaussian(0.0, 1.2), 0.0, h - 2.0));
            long tx = ifloor(std::clamp(r.tx + rng.gaussian(0.0, 1.2), 0.0, w - 2.0));
            long hh = ifloor(std::clamp(r.hh * rng.uniform(0.85, 1.15), 2.0,
                                        static_cast<double>(h - ty)));
            long ww = ifloor(std::clamp(r.ww * rng.uniform(0.85, 1.15), 2.0,
                                        static_cast<double>(w - tx)));
            img.block(ty, tx, hh, ww).array() += r.amp * rng.uniform(0.8, 1.2);
        }
        double* px = &d.images.at4(i, 0, 0, 0);
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x) {
                double v = std::clamp(img(y, x), 0.0, 1.0) + rng.gaussian(0.0, noise);
                px[y * w + x] = std::clamp(v, 0.0, 1.0);
            }
        d.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(c);
    }
    return d;
}

// ---------------------------------------------------------------------------
// color variant: shared colored background blobs plus colored class blobs

Dataset synth_bg_cifar(uint64_t seed, long n) {
    const long h = 32, w = 32, classes = 10;
    const double noise = 0.08, sig_amp = 0.35;
    RandomStream rng(seed);
    RandomStream proto_rng(777);

    struct ColorBlob {
        Matd blob;
        double col[3];
    };
    std::vector<ColorBlob> bg;
    for (int b = 0; b < 6; ++b) {
        double cy = proto_rng.uniform(4.0, h - 4.0), cx = proto_rng.uniform(4.0, w - 4.0);
        double sy = proto_rng.uniform(5.0, 10.0), sx = proto_rng.uniform(5.0, 10.0);
        ColorBlob cb;
        cb.blob = gauss_blob(h, w, cy, cx, sy, sx);
        for (double& v : cb.col) v = proto_rng.uniform(0.3, 1.0);
        bg.push_back(std::move(cb));
    }
    std::vector<std::array<Matd, 3>> protos;
    for (long c = 0; c < classes; ++c) {
        std::array<Matd, 3> img = {Matd::Zero(h, w), Matd::Zero(h, w), Matd::Zero(h, w)};
        for (int b = 0; b < 4; ++b) {
            double cy = proto_rng.uniform(6.0, h - 6.0), cx = proto_rng.uniform(6.0, w - 6.0);
            double sy = proto_rng.uniform(1.5, 4.0), sx = proto_rng.uniform(1.5, 4.0);
            double col[3] = {proto_rng.uniform(), proto_rng.uniform(), proto_rng.uniform()};
            Matd blob = gauss_blob(h, w, cy, cx, sy, sx);
            double amp = proto_rng.uniform(0.6, 1.0);
            for (int ch = 0; ch < 3; ++ch) img[ch] += amp * col[ch] * blob;
        }
        double peak = 1e-9;
        for (const Matd& m : img) peak = std::max(peak, m.maxCoeff());
        for (Matd& m : img) m /= peak;
        protos.push_back(std::move(img));
    }

    Dataset d;
    d.images = Tensor({n, 3, h, w});
    d.labels.resize(static_cast<size_t>(n));
    d.split = "train";
    for (long i = 0; i < n; ++i) {
        long c = static_cast<long>(rng.next_below(classes));
        std::array<Matd, 3> img = {Matd::Zero(h, w), Matd::Zero(h, w), Matd::Zero(h, w)};
        for (const ColorBlob& cb : bg) {
            double a = rng.uniform(0.0, 0.8);
            for (int ch = 0; ch < 3; ++ch) img[ch] += a * cb.col[ch] * cb.blob;
        }
        long dy = static_cast<long>(rng.next_below(5)) - 2;
        long dx = static_cast<long>(rng.next_below(5)) - 2;
        double amp = sig_amp * rng.uniform(0.8, 1.2);
        for (int ch = 0; ch < 3; ++ch)
            img[ch] += amp * roll2(protos[static_cast<size_t>(c)][ch], dy, dx);
        for (int ch = 0; ch < 3; ++ch) {
            double* px = &d.images.at4(i, ch, 0, 0);
            for (long y = 0; y < h; ++y)
                for (long x = 0; x < w; ++x)
                    px[y * w + x] =
                        std::clamp(img[ch](y, x) + rng.gaussian(0.0, noise), 0.0, 1.5) / 1.5;
        }
        d.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(c);
    }
    return d;
}

} // namespace netdeconv
