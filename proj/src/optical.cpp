#include "dt/optical.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numbers>
#include <random>

namespace dt {

namespace {
constexpr real kPi = std::numbers::pi_v<real>;
}

Image Image::filled(int w, int h, const std::array<real, 3>& color) {
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize((size_t)w * h * 3);
  for (size_t p = 0; p < (size_t)w * h; p++)
    for (int c = 0; c < 3; c++) img.rgb[p * 3 + c] = color[c];
  return img;
}

std::vector<real> positional_encoding(const std::vector<real>& p, int L) {
  if (L < 1) throw OpticalError("positional_encoding: L must be >= 1");
  std::vector<real> out;
  out.reserve(p.size() * 2 * L);
  for (real v : p) {
    real freq = kPi;
    for (int k = 0; k < L; k++) {
      out.push_back(std::sin(freq * v));
      out.push_back(std::cos(freq * v));
      freq *= 2;
    }
  }
  return out;
}

// --- height map smoothing -------------------------------------------------

namespace {

// separable 5-tap Gaussian, sigma = 2
void blur5(const std::vector<real>& in, std::vector<real>& out, int w, int h) {
  static const real k[5] = {0.15246914402033734, 0.22184129554377693, 0.25137912087177143,
                            0.22184129554377693, 0.15246914402033734};
  std::vector<real> tmp((size_t)w * h);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++) {
      real s = 0;
      for (int t = -2; t <= 2; t++) {
        int xx = std::clamp(x + t, 0, w - 1);
        s += k[t + 2] * in[(size_t)y * w + xx];
      }
      tmp[(size_t)y * w + x] = s;
    }
  out.resize((size_t)w * h);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++) {
      real s = 0;
      for (int t = -2; t <= 2; t++) {
        int yy = std::clamp(y + t, 0, h - 1);
        s += k[t + 2] * tmp[(size_t)yy * w + x];
      }
      out[(size_t)y * w + x] = s;
    }
}

void down2(const std::vector<real>& in, std::vector<real>& out, int w, int h, int& ow, int& oh) {
  ow = (w + 1) / 2;
  oh = (h + 1) / 2;
  out.resize((size_t)ow * oh);
  for (int y = 0; y < oh; y++)
    for (int x = 0; x < ow; x++)
      out[(size_t)y * ow + x] = in[(size_t)std::min(2 * y, h - 1) * w + std::min(2 * x, w - 1)];
}

// bilinear upsample back to (w, h)
void up2(const std::vector<real>& in, std::vector<real>& out, int iw, int ih, int w, int h) {
  out.resize((size_t)w * h);
  for (int y = 0; y < h; y++)
    for (int x = 0; x < w; x++) {
      real fx = 0.5 * x, fy = 0.5 * y;
      int x0 = std::min((int)fx, iw - 1), y0 = std::min((int)fy, ih - 1);
      int x1 = std::min(x0 + 1, iw - 1), y1 = std::min(y0 + 1, ih - 1);
      real ax = fx - x0, ay = fy - y0;
      real v0 = in[(size_t)y0 * iw + x0] * (1 - ax) + in[(size_t)y0 * iw + x1] * ax;
      real v1 = in[(size_t)y1 * iw + x0] * (1 - ax) + in[(size_t)y1 * iw + x1] * ax;
      out[(size_t)y * w + x] = v0 * (1 - ay) + v1 * ay;
    }
}

}  // namespace

HeightMap smooth_heightmap(const HeightMap& raw, int levels) {
  if (levels < 1) throw OpticalError("smooth_heightmap: levels must be >= 1");
  const int w = raw.width, h = raw.height;

  // cascade: blur+downsample per octave, then upsample+re-blur back up
  std::vector<std::pair<int, int>> dims{{w, h}};
  std::vector<real> cur = raw.z, next;
  for (int l = 0; l < levels; l++) {
    blur5(cur, next, dims.back().first, dims.back().second);
    int ow, oh;
    down2(next, cur, dims.back().first, dims.back().second, ow, oh);
    dims.push_back({ow, oh});
  }
  for (int l = levels; l > 0; l--) {
    up2(cur, next, dims[l].first, dims[l].second, dims[l - 1].first, dims[l - 1].second);
    blur5(next, cur, dims[l - 1].first, dims[l - 1].second);
  }

  // blend: the strict interior of the contact patch keeps the raw depth while
  // boundaries and isolated spikes take the smoothed cascade. The indicator is
  // eroded (blur + threshold) before softening so none of the raw step edge
  // leaks through the mask.
  std::vector<real> mask((size_t)w * h), mblur;
  real zmax = 0;
  for (real v : raw.z) zmax = std::max(zmax, std::abs(v));
  for (size_t i = 0; i < mask.size(); i++) mask[i] = std::abs(raw.z[i]) > 1e-9 * zmax ? 1.0 : 0.0;
  blur5(mask, mblur, w, h);
  blur5(mblur, mask, w, h);
  for (real& v : mask) v = v > 0.98 ? 1.0 : 0.0;
  blur5(mask, mblur, w, h);
  blur5(mblur, mask, w, h);

  HeightMap out = raw;
  for (size_t i = 0; i < out.z.size(); i++)
    out.z[i] = mask[i] * raw.z[i] + (1 - mask[i]) * cur[i];
  return out;
}

// --- reflectance network --------------------------------------------------

ReflectanceNet ReflectanceNet::init(int L, uint64_t seed) {
  ReflectanceNet net;
  net.L = L;
  const int D = net.input_dim(), H = kHidden;
  std::mt19937_64 rng(seed);
  auto he = [&](std::vector<real>& wm, int out, int in) {
    std::normal_distribution<real> dist(0.0, std::sqrt(2.0 / in));
    wm.resize((size_t)out * in);
    for (real& v : wm) v = dist(rng);
  };
  he(net.w1, H, D);
  he(net.w2, H, H);
  he(net.w3, H, H + D);
  he(net.w4, H, H);
  net.w5.assign((size_t)3 * H, 0.0);  // zero head: untrained net = background
  net.b1.assign(H, 0.0);
  net.b2.assign(H, 0.0);
  net.b3.assign(H, 0.0);
  net.b4.assign(H, 0.0);
  net.b5.assign(3, 0.0);
  return net;
}

namespace {

void dense(const std::vector<real>& w, const std::vector<real>& b, const real* x, int in,
           real* y, int out, bool relu) {
  for (int o = 0; o < out; o++) {
    const real* row = w.data() + (size_t)o * in;
    real s = b[o];
    for (int i = 0; i < in; i++) s += row[i] * x[i];
    y[o] = relu && s < 0 ? 0 : s;
  }
}

struct NetActs {
  // post-activation values for each layer, plus the concatenated layer-3 input
  std::vector<real> h1, h2, h3in, h3, h4;
  std::array<real, 3> out;
};

void net_forward(const ReflectanceNet& net, const real* x, NetActs& a) {
  const int D = net.input_dim(), H = ReflectanceNet::kHidden;
  a.h1.resize(H);
  a.h2.resize(H);
  a.h3in.resize(H + D);
  a.h3.resize(H);
  a.h4.resize(H);
  dense(net.w1, net.b1, x, D, a.h1.data(), H, true);
  dense(net.w2, net.b2, a.h1.data(), H, a.h2.data(), H, true);
  std::memcpy(a.h3in.data(), a.h2.data(), H * sizeof(real));
  std::memcpy(a.h3in.data() + H, x, D * sizeof(real));
  dense(net.w3, net.b3, a.h3in.data(), H + D, a.h3.data(), H, true);
  dense(net.w4, net.b4, a.h3.data(), H, a.h4.data(), H, true);
  real y[3];
  dense(net.w5, net.b5, a.h4.data(), H, y, 3, false);
  for (int c = 0; c < 3; c++) a.out[c] = std::tanh(0.5 * y[c]);  // = 2 sigmoid(y) - 1
}

struct NetGrads {
  std::vector<real> w1, b1, w2, b2, w3, b3, w4, b4, w5, b5;

  void zero_like(const ReflectanceNet& net) {
    w1.assign(net.w1.size(), 0);
    b1.assign(net.b1.size(), 0);
    w2.assign(net.w2.size(), 0);
    b2.assign(net.b2.size(), 0);
    w3.assign(net.w3.size(), 0);
    b3.assign(net.b3.size(), 0);
    w4.assign(net.w4.size(), 0);
    b4.assign(net.b4.size(), 0);
    w5.assign(net.w5.size(), 0);
    b5.assign(net.b5.size(), 0);
  }
};

// accumulate dL/dW for one sample; dout = dL/d(net output)
void net_backward(const ReflectanceNet& net, const real* x, const NetActs& a,
                  const std::array<real, 3>& dout, NetGrads& g) {
  const int D = net.input_dim(), H = ReflectanceNet::kHidden;
  real dy[3];
  for (int c = 0; c < 3; c++)
    dy[c] = dout[c] * 0.5 * (1 - a.out[c] * a.out[c]);  // d tanh(y/2)/dy

  thread_local std::vector<real> d4, d3, d3in, d2, d1;
  d4.assign(H, 0);
  for (int c = 0; c < 3; c++) {
    const real* row = net.w5.data() + (size_t)c * H;
    real* grow = g.w5.data() + (size_t)c * H;
    for (int i = 0; i < H; i++) {
      grow[i] += dy[c] * a.h4[i];
      d4[i] += dy[c] * row[i];
    }
    g.b5[c] += dy[c];
  }
  auto back_dense = [](const std::vector<real>& w, std::vector<real>& gw, std::vector<real>& gb,
                       const real* in_act, const real* out_act, std::vector<real>& dout_v,
                       std::vector<real>& din, int in, int out) {
    din.assign(in, 0);
    for (int o = 0; o < out; o++) {
      if (out_act[o] <= 0) continue;  // ReLU gate
      real d = dout_v[o];
      const real* row = w.data() + (size_t)o * in;
      real* grow = gw.data() + (size_t)o * in;
      for (int i = 0; i < in; i++) {
        grow[i] += d * in_act[i];
        din[i] += d * row[i];
      }
      gb[o] += d;
    }
  };
  back_dense(net.w4, g.w4, g.b4, a.h3.data(), a.h4.data(), d4, d3, H, H);
  back_dense(net.w3, g.w3, g.b3, a.h3in.data(), a.h3.data(), d3, d3in, H + D, H);
  d2.assign(d3in.begin(), d3in.begin() + H);  // skip half of d3in flows to the raw input
  back_dense(net.w2, g.w2, g.b2, a.h1.data(), a.h2.data(), d2, d1, H, H);
  std::vector<real> dx;
  back_dense(net.w1, g.w1, g.b1, x, a.h1.data(), d1, dx, D, H);
}

}  // namespace

std::array<real, 3> ReflectanceNet::forward(const real* x) const {
  NetActs a;
  net_forward(*this, x, a);
  return a.out;
}

// --- rendering ------------------------------------------------------------

namespace {

// per-pixel (theta/pi, phi/pi, df/dx, df/dy)
std::vector<real> pixel_inputs(const HeightMap& height, const OpticalCamera& camera, int x, int y) {
  const int w = height.width, h = height.height;
  int x0 = std::max(x - 1, 0), x1 = std::min(x + 1, w - 1);
  int y0 = std::max(y - 1, 0), y1 = std::min(y + 1, h - 1);
  real fx = (height.at(x1, y) - height.at(x0, y)) / ((x1 - x0) * height.pitch);
  real fy = (height.at(x, y1) - height.at(x, y0)) / ((y1 - y0) * height.pitch);

  real px = (x - 0.5 * (w - 1)) * height.pitch;
  real py = (y - 0.5 * (h - 1)) * height.pitch;
  Vec3 v{-px, -py, camera.camera_height};  // toward the camera
  v = v / norm(v);
  real theta = std::acos(std::clamp(v.z, -1.0, 1.0));
  real phi = std::atan2(v.y, v.x);
  return {theta / kPi, phi / kPi, fx, fy};
}

}  // namespace

Image render(const ReflectanceNet& net, const HeightMap& height, const OpticalCamera& camera,
             const Image& background) {
  if (background.width != height.width || background.height != height.height)
    throw OpticalError("render: background / height map dimensions differ");
  Image out = background;
  NetActs acts;
  for (int y = 0; y < height.height; y++)
    for (int x = 0; x < height.width; x++) {
      std::vector<real> enc = positional_encoding(pixel_inputs(height, camera, x, y), net.L);
      net_forward(net, enc.data(), acts);
      for (int c = 0; c < 3; c++)
        out.at(x, y, c) = std::clamp(background.at(x, y, c) + 255.0 * acts.out[c], 0.0, 255.0);
    }
  return out;
}

// --- training -------------------------------------------------------------

std::vector<real> train(ReflectanceNet& net, const std::vector<IndentationExample>& dataset,
                        const TrainOptions& options) {
  if (dataset.empty()) throw OpticalError("train: empty dataset");
  const int D = net.input_dim();

  // precompute encoded inputs and color-change targets per image
  struct Batch {
    std::vector<real> x;       // P x D
    std::vector<real> target;  // P x 3, in [-1, 1]
    int pixels = 0;
  };
  std::vector<Batch> batches;
  for (const IndentationExample& ex : dataset) {
    if (ex.reference.width != ex.height.width || ex.reference.height != ex.height.height ||
        ex.background.width != ex.height.width || ex.background.height != ex.height.height)
      throw OpticalError("train: example dimensions differ");
    Batch b;
    b.pixels = ex.height.width * ex.height.height;
    b.x.resize((size_t)b.pixels * D);
    b.target.resize((size_t)b.pixels * 3);
    int p = 0;
    for (int y = 0; y < ex.height.height; y++)
      for (int x = 0; x < ex.height.width; x++, p++) {
        std::vector<real> enc =
            positional_encoding(pixel_inputs(ex.height, options.camera, x, y), net.L);
        std::copy(enc.begin(), enc.end(), b.x.begin() + (size_t)p * D);
        for (int c = 0; c < 3; c++)
          b.target[(size_t)p * 3 + c] = std::clamp(
              (ex.reference.at(x, y, c) - ex.background.at(x, y, c)) / 255.0, -1.0, 1.0);
      }
    batches.push_back(std::move(b));
  }

  std::vector<real*> params;
  std::vector<real*> gptr;
  NetGrads g;
  g.zero_like(net);
  for (auto [pv, gv] : {std::pair{&net.w1, &g.w1}, {&net.b1, &g.b1}, {&net.w2, &g.w2},
                        {&net.b2, &g.b2}, {&net.w3, &g.w3}, {&net.b3, &g.b3}, {&net.w4, &g.w4},
                        {&net.b4, &g.b4}, {&net.w5, &g.w5}, {&net.b5, &g.b5}}) {
    for (size_t i = 0; i < pv->size(); i++) {
      params.push_back(pv->data() + i);
      gptr.push_back(gv->data() + i);
    }
  }
  std::vector<real> m(params.size(), 0), v(params.size(), 0);
  const real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  std::vector<real> curve;
  real initial = -1;
  long t = 0;
  NetActs acts;
  for (int epoch = 0; epoch < options.epochs; epoch++) {
    real epoch_loss = 0;
    for (Batch& b : batches) {
      g.zero_like(net);
      real loss = 0;
      const real scale = 1.0 / (b.pixels * 3.0);
      for (int p = 0; p < b.pixels; p++) {
        const real* x = b.x.data() + (size_t)p * D;
        net_forward(net, x, acts);
        std::array<real, 3> dout;
        for (int c = 0; c < 3; c++) {
          real e = acts.out[c] - b.target[(size_t)p * 3 + c];
          loss += e * e * scale;
          dout[c] = 2 * e * scale;
        }
        net_backward(net, x, acts, dout, g);
      }
      epoch_loss += loss / dataset.size();
      t++;
      real c1 = 1 - std::pow(beta1, (real)t), c2 = 1 - std::pow(beta2, (real)t);
      for (size_t i = 0; i < params.size(); i++) {
        real gi = *gptr[i];
        m[i] = beta1 * m[i] + (1 - beta1) * gi;
        v[i] = beta2 * v[i] + (1 - beta2) * gi * gi;
        *params[i] -= options.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
    curve.push_back(epoch_loss);
    if (initial < 0) initial = epoch_loss;
    if (!std::isfinite(epoch_loss) || epoch_loss > 10 * initial) break;  // divergence guard
  }
  return curve;
}

// --- metrics --------------------------------------------------------------

ImageMetrics image_metrics(const Image& pred, const Image& ref) {
  if (pred.width != ref.width || pred.height != ref.height)
    throw OpticalError("image_metrics: dimensions differ");
  ImageMetrics m;
  const size_t n = pred.rgb.size();
  for (size_t i = 0; i < n; i++) {
    real d = pred.rgb[i] - ref.rgb[i];
    m.l1 += std::abs(d);
    m.mse += d * d;
  }
  m.l1 /= (real)n;
  m.mse /= (real)n;
  m.psnr = m.mse <= 0 ? 100.0 : std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / m.mse));

  // SSIM: 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03, range 255
  real win[11];
  real wsum = 0;
  for (int i = 0; i < 11; i++) {
    win[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
    wsum += win[i];
  }
  for (real& w : win) w /= wsum;
  const real c1 = (0.01 * 255) * (0.01 * 255), c2 = (0.03 * 255) * (0.03 * 255);
  real ssim_sum = 0;
  long ssim_count = 0;
  for (int c = 0; c < 3; c++)
    for (int y = 0; y < pred.height; y++)
      for (int x = 0; x < pred.width; x++) {
        real wa = 0, mu_p = 0, mu_r = 0;
        for (int dy = -5; dy <= 5; dy++)
          for (int dx = -5; dx <= 5; dx++) {
            int xx = x + dx, yy = y + dy;
            if (xx < 0 || xx >= pred.width || yy < 0 || yy >= pred.height) continue;
            real w = win[dx + 5] * win[dy + 5];
            wa += w;
            mu_p += w * pred.at(xx, yy, c);
            mu_r += w * ref.at(xx, yy, c);
          }
        mu_p /= wa;
        mu_r /= wa;
        real var_p = 0, var_r = 0, cov = 0;
        for (int dy = -5; dy <= 5; dy++)
          for (int dx = -5; dx <= 5; dx++) {
            int xx = x + dx, yy = y + dy;
            if (xx < 0 || xx >= pred.width || yy < 0 || yy >= pred.height) continue;
            real w = win[dx + 5] * win[dy + 5] / wa;
            real ep = pred.at(xx, yy, c) - mu_p, er = ref.at(xx, yy, c) - mu_r;
            var_p += w * ep * ep;
            var_r += w * er * er;
            cov += w * ep * er;
          }
        ssim_sum += (2 * mu_p * mu_r + c1) * (2 * cov + c2) /
                    ((mu_p * mu_p + mu_r * mu_r + c1) * (var_p + var_r + c2));
        ssim_count++;
      }
  m.ssim = ssim_sum / (real)ssim_count;
  return m;
}

// --- synthetic data -------------------------------------------------------

HeightMap indent_heightmap(int width, int height, real pitch, const IndenterSpec& spec) {
  HeightMap map;
  map.width = width;
  map.height = height;
  map.pitch = pitch;
  map.z.assign((size_t)width * height, 0.0);
  for (int y = 0; y < height; y++)
    for (int x = 0; x < width; x++) {
      real px = (x - 0.5 * (width - 1)) * pitch - spec.cx;
      real py = (y - 0.5 * (height - 1)) * pitch - spec.cy;
      real z = 0;
      switch (spec.kind) {
        case IndenterSpec::Kind::Sphere: {
          real r2 = spec.radius * spec.radius - px * px - py * py;
          if (r2 > 0) z = std::max(0.0, spec.depth - spec.radius + std::sqrt(r2));
          break;
        }
        case IndenterSpec::Kind::Cylinder:
          if (px * px + py * py < spec.radius * spec.radius) z = spec.depth;
          break;
        case IndenterSpec::Kind::Cube:
          if (std::abs(px) < spec.radius && std::abs(py) < spec.radius) z = spec.depth;
          break;
      }
      map.at(x, y) = z;
    }
  return map;
}

Image phong_reference(const HeightMap& height, const OpticalCamera& camera,
                      const Image& background) {
  struct Light {
    Vec3 dir;
    std::array<real, 3> color;
  };
  static const Light lights[3] = {
      {{0.4, 0.2, 0.9}, {0.8, 0.3, 0.2}},
      {{-0.5, 0.3, 0.8}, {0.2, 0.7, 0.3}},
      {{0.1, -0.6, 0.8}, {0.25, 0.3, 0.9}},
  };
  const real kd = 60, ks = 40, shininess = 24;

  Image out = background;
  for (int y = 0; y < height.height; y++)
    for (int x = 0; x < height.width; x++) {
      std::vector<real> in = pixel_inputs(height, camera, x, y);
      real fx = in[2], fy = in[3];
      Vec3 n{-fx, -fy, 1};
      n = n / norm(n);
      real px = (x - 0.5 * (height.width - 1)) * height.pitch;
      real py = (y - 0.5 * (height.height - 1)) * height.pitch;
      Vec3 view{-px, -py, camera.camera_height};
      view = view / norm(view);
      for (const Light& light : lights) {
        Vec3 l = light.dir / norm(light.dir);
        Vec3 r = 2.0 * dot(n, l) * n - l;
        Vec3 r0 = 2.0 * l.z * Vec3{0, 0, 1} - l;  // reflection off the flat plane
        real diff = std::max(0.0, dot(n, l)) - std::max(0.0, l.z);
        real spec = std::pow(std::max(0.0, dot(r, view)), shininess) -
                    std::pow(std::max(0.0, dot(r0, view)), shininess);
        for (int c = 0; c < 3; c++)
          out.at(x, y, c) =
              std::clamp(out.at(x, y, c) + (kd * diff + ks * spec) * light.color[c], 0.0, 255.0);
      }
    }
  return out;
}

std::vector<IndentationExample> synthetic_sphere_dataset(int count, int width, int height,
                                                         real pitch, uint64_t seed,
                                                         const OpticalCamera& camera) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> u(0, 1);
  Image bg = Image::filled(width, height, {110, 115, 125});
  std::vector<IndentationExample> out;
  for (int i = 0; i < count; i++) {
    IndenterSpec spec;
    spec.kind = IndenterSpec::Kind::Sphere;
    spec.radius = 1.5 + 1.5 * u(rng);
    spec.depth = 0.4 + 0.8 * u(rng);
    spec.cx = (u(rng) - 0.5) * 0.4 * width * pitch;
    spec.cy = (u(rng) - 0.5) * 0.4 * height * pitch;
    IndentationExample ex;
    ex.height = smooth_heightmap(indent_heightmap(width, height, pitch, spec));
    ex.background = bg;
    ex.reference = phong_reference(ex.height, camera, bg);
    out.push_back(std::move(ex));
  }
  return out;
}

// --- I/O ------------------------------------------------------------------

namespace {

void put32(std::vector<unsigned char>& buf, uint32_t v) {
  buf.push_back((v >> 24) & 0xff);
  buf.push_back((v >> 16) & 0xff);
  buf.push_back((v >> 8) & 0xff);
  buf.push_back(v & 0xff);
}

void png_chunk(FILE* f, const char* tag, const unsigned char* data, uint32_t len) {
  unsigned char hdr[8];
  hdr[0] = len >> 24;
  hdr[1] = len >> 16;
  hdr[2] = len >> 8;
  hdr[3] = len;
  std::memcpy(hdr + 4, tag, 4);
  std::fwrite(hdr, 1, 8, f);
  if (len) std::fwrite(data, 1, len, f);
  uLong crc = crc32(0L, (const Bytef*)tag, 4);
  if (len) crc = crc32(crc, data, len);
  unsigned char tail[4] = {(unsigned char)(crc >> 24), (unsigned char)(crc >> 16),
                           (unsigned char)(crc >> 8), (unsigned char)crc};
  std::fwrite(tail, 1, 4, f);
}

}  // namespace

void save_png(const Image& image, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw OpticalError("save_png: cannot open " + path);
  static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  std::fwrite(sig, 1, 8, f);

  std::vector<unsigned char> ihdr;
  put32(ihdr, image.width);
  put32(ihdr, image.height);
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  png_chunk(f, "IHDR", ihdr.data(), (uint32_t)ihdr.size());

  std::vector<unsigned char> raw((size_t)image.height * (1 + (size_t)image.width * 3));
  size_t p = 0;
  for (int y = 0; y < image.height; y++) {
    raw[p++] = 0;  // filter none
    for (int x = 0; x < image.width; x++)
      for (int c = 0; c < 3; c++)
        raw[p++] = (unsigned char)std::lround(std::clamp(image.at(x, y, c), 0.0, 255.0));
  }
  uLongf bound = compressBound((uLong)raw.size());
  std::vector<unsigned char> idat(bound);
  if (compress2(idat.data(), &bound, raw.data(), (uLong)raw.size(), 9) != Z_OK) {
    std::fclose(f);
    throw OpticalError("save_png: deflate failed");
  }
  png_chunk(f, "IDAT", idat.data(), (uint32_t)bound);
  png_chunk(f, "IEND", nullptr, 0);
  std::fclose(f);
}

Image load_png(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw OpticalError("load_png: cannot open " + path);
  std::vector<unsigned char> data;
  unsigned char buf[4096];
  size_t got;
  while ((got = std::fread(buf, 1, sizeof(buf), f)) > 0) data.insert(data.end(), buf, buf + got);
  std::fclose(f);
  if (data.size() < 8 || data[1] != 'P' || data[2] != 'N' || data[3] != 'G')
    throw OpticalError("load_png: not a PNG file");

  Image img;
  std::vector<unsigned char> idat;
  size_t p = 8;
  while (p + 8 <= data.size()) {
    uint32_t len = (data[p] << 24) | (data[p + 1] << 16) | (data[p + 2] << 8) | data[p + 3];
    std::string tag((const char*)&data[p + 4], 4);
    const unsigned char* body = data.data() + p + 8;
    if (p + 12 + len > data.size()) throw OpticalError("load_png: truncated chunk");
    if (tag == "IHDR") {
      img.width = (body[0] << 24) | (body[1] << 16) | (body[2] << 8) | body[3];
      img.height = (body[4] << 24) | (body[5] << 16) | (body[6] << 8) | body[7];
      if (body[8] != 8 || body[9] != 2 || body[12] != 0)
        throw OpticalError("load_png: only 8-bit non-interlaced RGB supported");
    } else if (tag == "IDAT") {
      idat.insert(idat.end(), body, body + len);
    } else if (tag == "IEND") {
      break;
    }
    p += 12 + len;
  }
  if (img.width <= 0 || img.height <= 0) throw OpticalError("load_png: missing IHDR");

  const size_t stride = 1 + (size_t)img.width * 3;
  std::vector<unsigned char> raw(stride * img.height);
  uLongf rawlen = (uLongf)raw.size();
  if (uncompress(raw.data(), &rawlen, idat.data(), (uLong)idat.size()) != Z_OK ||
      rawlen != raw.size())
    throw OpticalError("load_png: inflate failed");

  // undo per-row filters
  const int bpp = 3;
  std::vector<unsigned char> px((size_t)img.width * img.height * 3);
  for (int y = 0; y < img.height; y++) {
    unsigned char filter = raw[(size_t)y * stride];
    unsigned char* row = px.data() + (size_t)y * img.width * 3;
    const unsigned char* prev = y > 0 ? px.data() + (size_t)(y - 1) * img.width * 3 : nullptr;
    const unsigned char* src = raw.data() + (size_t)y * stride + 1;
    for (int i = 0; i < img.width * 3; i++) {
      int a = i >= bpp ? row[i - bpp] : 0;
      int b = prev ? prev[i] : 0;
      int cc = (prev && i >= bpp) ? prev[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          int pp = a + b - cc, pa = std::abs(pp - a), pb = std::abs(pp - b), pc = std::abs(pp - cc);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : cc);
          break;
        }
        default: throw OpticalError("load_png: bad filter type");
      }
      row[i] = (unsigned char)v;
    }
  }
  img.rgb.resize(px.size());
  for (size_t i = 0; i < px.size(); i++) img.rgb[i] = px[i];
  return img;
}

namespace {

void write_exact(FILE* f, const void* p, size_t n) {
  if (std::fwrite(p, 1, n, f) != n) throw OpticalError("file write failed");
}

void read_exact(FILE* f, void* p, size_t n) {
  if (std::fread(p, 1, n, f) != n) throw OpticalError("file read failed");
}

}  // namespace

void save_heightmap(const HeightMap& map, const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw OpticalError("save_heightmap: cannot open " + path);
  write_exact(f, "DTHM", 4);
  int32_t dims[2] = {map.width, map.height};
  write_exact(f, dims, sizeof(dims));
  double pitch = map.pitch;
  write_exact(f, &pitch, sizeof(pitch));
  std::vector<float> zf(map.z.begin(), map.z.end());
  write_exact(f, zf.data(), zf.size() * sizeof(float));
  std::fclose(f);
}

HeightMap load_heightmap(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw OpticalError("load_heightmap: cannot open " + path);
  char magic[4];
  read_exact(f, magic, 4);
  if (std::memcmp(magic, "DTHM", 4) != 0) {
    std::fclose(f);
    throw OpticalError("load_heightmap: bad magic");
  }
  HeightMap map;
  int32_t dims[2];
  read_exact(f, dims, sizeof(dims));
  map.width = dims[0];
  map.height = dims[1];
  double pitch;
  read_exact(f, &pitch, sizeof(pitch));
  map.pitch = pitch;
  std::vector<float> zf((size_t)map.width * map.height);
  read_exact(f, zf.data(), zf.size() * sizeof(float));
  std::fclose(f);
  map.z.assign(zf.begin(), zf.end());
  return map;
}

void ReflectanceNet::save(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw OpticalError("ReflectanceNet::save: cannot open " + path);
  write_exact(f, "DTRN", 4);
  int32_t L32 = L;
  write_exact(f, &L32, sizeof(L32));
  for (const std::vector<real>* v :
       {&w1, &b1, &w2, &b2, &w3, &b3, &w4, &b4, &w5, &b5}) {
    int64_t n = (int64_t)v->size();
    write_exact(f, &n, sizeof(n));
    write_exact(f, v->data(), v->size() * sizeof(real));
  }
  std::fclose(f);
}

ReflectanceNet ReflectanceNet::load(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw OpticalError("ReflectanceNet::load: cannot open " + path);
  char magic[4];
  read_exact(f, magic, 4);
  if (std::memcmp(magic, "DTRN", 4) != 0) {
    std::fclose(f);
    throw OpticalError("ReflectanceNet::load: bad magic");
  }
  ReflectanceNet net;
  int32_t L32;
  read_exact(f, &L32, sizeof(L32));
  net.L = L32;
  for (std::vector<real>* v : {&net.w1, &net.b1, &net.w2, &net.b2, &net.w3, &net.b3, &net.w4,
                               &net.b4, &net.w5, &net.b5}) {
    int64_t n;
    read_exact(f, &n, sizeof(n));
    v->resize((size_t)n);
    read_exact(f, v->data(), v->size() * sizeof(real));
  }
  std::fclose(f);
  return net;
}

}  // namespace dt
