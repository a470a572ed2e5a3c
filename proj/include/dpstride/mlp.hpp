#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpstride/dataset.hpp"
#include "dpstride/denoiser.hpp"
#include "dpstride/errors.hpp"
#include "dpstride/io.hpp"
#include "dpstride/random.hpp"
#include "dpstride/schedule.hpp"

namespace dpstride {

struct MlpConfig {
  std::vector<std::uint32_t> hidden = {64, 64, 64};
  // Sinusoidal time features: pairs sin(pi 2^k t), cos(pi 2^k t). Must be even.
  std::uint32_t time_features = 16;
  bool variance_logits = false;
  // 0 trains on continuous t ~ U(0,1]; n trains on the discrete grid {i/n}.
  std::uint32_t discrete_steps = 0;
};

// Fully connected noise predictor: [x_t, time features] -> hidden tanh
// layers -> linear head of size dim (plus dim variance logits if enabled).
class MlpDenoiser : public Denoiser {
public:
  MlpDenoiser(std::size_t dim, MlpConfig cfg, std::uint64_t init_seed)
      : dim_(dim), cfg_(std::move(cfg)) {
    if (dim_ == 0) throw ArgumentError("mlp needs dim >= 1");
    if (cfg_.time_features == 0 || cfg_.time_features % 2 != 0 || cfg_.time_features > 62)
      throw ArgumentError("mlp time_features must be even, positive, and at most 62");
    for (auto h : cfg_.hidden)
      if (h == 0) throw ArgumentError("mlp hidden widths must be positive");
    std::size_t in = dim_ + cfg_.time_features;
    std::size_t off = 0;
    for (std::size_t l = 0; l <= cfg_.hidden.size(); ++l) {
      std::size_t out = l < cfg_.hidden.size() ? cfg_.hidden[l] : out_size();
      layers_.push_back({in, out, off, off + in * out});
      off += in * out + out;
      in = out;
    }
    params_.assign(off, 0.0);
    RandomStream rs(init_seed, 0);
    for (const Layer& L : layers_) {
      double scale = 1.0 / std::sqrt(static_cast<double>(L.in));
      for (std::size_t i = 0; i < L.in * L.out; ++i)
        params_[L.w_off + i] = scale * rs.next_gaussian();
      // biases start at zero
    }
  }

  std::size_t dim() const override { return dim_; }
  bool has_variance_logits() const override { return cfg_.variance_logits; }
  const MlpConfig& config() const { return cfg_; }

  std::size_t out_size() const { return dim_ * (cfg_.variance_logits ? 2 : 1); }
  std::size_t param_count() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  // acts[0] is the embedded input; acts[l+1] the output of layer l. The last
  // layer is linear, all others tanh.
  void forward(std::span<const double> x_t, double t,
               std::vector<std::vector<double>>& acts) const {
    acts.resize(layers_.size() + 1);
    auto& in0 = acts[0];
    in0.assign(dim_ + cfg_.time_features, 0.0);
    for (std::size_t i = 0; i < dim_; ++i) in0[i] = x_t[i];
    embed_time(t, std::span<double>(in0).subspan(dim_));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      auto& out = acts[l + 1];
      out.assign(L.out, 0.0);
      const double* w = params_.data() + L.w_off;
      const double* b = params_.data() + L.b_off;
      const double* in = acts[l].data();
      for (std::size_t o = 0; o < L.out; ++o) {
        double z = b[o];
        const double* wo = w + o * L.in;
        for (std::size_t i = 0; i < L.in; ++i) z += wo[i] * in[i];
        out[o] = (l + 1 < layers_.size()) ? std::tanh(z) : z;
      }
    }
  }

  // Backpropagate dL/d(output) for one item, accumulating into grad.
  // acts must come from a forward() call with the same input.
  void backward(const std::vector<std::vector<double>>& acts,
                std::span<const double> dloss_dout, std::span<double> grad) const {
    std::vector<double> delta(dloss_dout.begin(), dloss_dout.end());
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& L = layers_[l];
      if (l + 1 < layers_.size())  // tanh'(z) = 1 - a^2
        for (std::size_t o = 0; o < L.out; ++o) delta[o] *= 1.0 - acts[l + 1][o] * acts[l + 1][o];
      const double* in = acts[l].data();
      double* gw = grad.data() + L.w_off;
      double* gb = grad.data() + L.b_off;
      for (std::size_t o = 0; o < L.out; ++o) {
        double d = delta[o];
        gb[o] += d;
        double* gwo = gw + o * L.in;
        for (std::size_t i = 0; i < L.in; ++i) gwo[i] += d * in[i];
      }
      if (l == 0) break;
      std::vector<double> prev(L.in, 0.0);
      const double* w = params_.data() + L.w_off;
      for (std::size_t o = 0; o < L.out; ++o) {
        const double* wo = w + o * L.in;
        double d = delta[o];
        for (std::size_t i = 0; i < L.in; ++i) prev[i] += wo[i] * d;
      }
      delta = std::move(prev);
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FileFormatError("cannot open model file for writing: " + path.string());
    os.write("DPSM", 4);
    write_u32(os, 1);  // version
    write_u32(os, static_cast<std::uint32_t>(dim_));
    write_u32(os, cfg_.time_features);
    write_u8(os, cfg_.variance_logits ? 1 : 0);
    write_u32(os, cfg_.discrete_steps);
    write_u32(os, static_cast<std::uint32_t>(cfg_.hidden.size()));
    for (auto h : cfg_.hidden) write_u32(os, h);
    write_u64(os, params_.size());
    for (double p : params_) write_f64(os, p);
    if (!os) throw FileFormatError("failed writing model file: " + path.string());
  }

  static MlpDenoiser load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FileFormatError("cannot open model file: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "DPSM")
      throw FileFormatError("not a model file (bad magic)");
    if (read_u32(is) != 1) throw FileFormatError("unsupported model file version");
    std::uint32_t dim = read_u32(is);
    MlpConfig cfg;
    cfg.time_features = read_u32(is);
    cfg.variance_logits = read_u8(is) != 0;
    cfg.discrete_steps = read_u32(is);
    std::uint32_t n_hidden = read_u32(is);
    if (dim == 0 || n_hidden > 64) throw FileFormatError("model file header out of range");
    cfg.hidden.resize(n_hidden);
    for (auto& h : cfg.hidden) h = read_u32(is);
    MlpDenoiser m(dim, cfg, 0);
    std::uint64_t n_params = read_u64(is);
    if (n_params != m.params_.size()) throw FileFormatError("model file parameter count mismatch");
    for (auto& p : m.params_) p = read_f64(is);
    is.peek();
    if (!is.eof()) throw FileFormatError("trailing bytes in model file");
    return m;
  }

protected:
  DenoiserOutput run(std::span<const double> x_t, double t) const override {
    std::vector<std::vector<double>> acts;
    forward(x_t, t, acts);
    const auto& out = acts.back();
    DenoiserOutput res;
    res.epsilon.assign(out.begin(), out.begin() + dim_);
    if (cfg_.variance_logits)
      res.variance_logits = std::vector<double>(out.begin() + dim_, out.end());
    return res;
  }

private:
  struct Layer {
    std::size_t in, out, w_off, b_off;
  };

  void embed_time(double t, std::span<double> out) const {
    for (std::size_t k = 0; 2 * k < out.size(); ++k) {
      double w = std::numbers::pi * static_cast<double>(1u << k);
      out[2 * k] = std::sin(w * t);
      out[2 * k + 1] = std::cos(w * t);
    }
  }

  std::size_t dim_;
  MlpConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

// A fixed training batch: inputs, times, and the noise targets.
struct MlpBatch {
  std::size_t n = 0;
  std::vector<double> x_t;     // n * dim
  std::vector<double> t;       // n
  std::vector<double> target;  // n * dim
};

// Mean squared error over the batch and dimensions, epsilon head only.
inline double mlp_batch_loss(const MlpDenoiser& m, const MlpBatch& batch) {
  std::size_t d = m.dim();
  std::vector<std::vector<double>> acts;
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    m.forward(std::span<const double>(batch.x_t).subspan(i * d, d), batch.t[i], acts);
    for (std::size_t j = 0; j < d; ++j) {
      double diff = acts.back()[j] - batch.target[i * d + j];
      loss += diff * diff;
    }
  }
  return loss / static_cast<double>(batch.n * d);
}

inline double mlp_batch_loss_grad(const MlpDenoiser& m, const MlpBatch& batch,
                                  std::span<double> grad) {
  if (grad.size() != m.param_count()) throw ArgumentError("gradient buffer size mismatch");
  std::size_t d = m.dim();
  double norm = 1.0 / static_cast<double>(batch.n * d);
  std::fill(grad.begin(), grad.end(), 0.0);
  std::vector<std::vector<double>> acts;
  std::vector<double> dout(m.out_size(), 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    m.forward(std::span<const double>(batch.x_t).subspan(i * d, d), batch.t[i], acts);
    for (std::size_t j = 0; j < d; ++j) {
      double diff = acts.back()[j] - batch.target[i * d + j];
      loss += diff * diff;
      dout[j] = 2.0 * diff * norm;  // variance logits get no gradient
    }
    m.backward(acts, dout, grad);
  }
  return loss * norm;
}

struct TrainOptions {
  std::uint64_t steps = 20000;
  std::uint32_t batch_size = 64;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t record_every = 100;
};

struct TrainResult {
  MlpDenoiser model;
  // (step, batch loss before the update at that step)
  std::vector<std::pair<std::uint64_t, double>> loss_trace;
};

// Noise prediction training with Adam. Fully deterministic given the seed:
// initialization and every batch are drawn from derived streams.
inline TrainResult train_mlp(const Dataset& data, const NoiseSchedule& sched,
                             const MlpConfig& cfg, const TrainOptions& opt,
                             std::uint64_t seed) {
  if (opt.batch_size == 0) throw ArgumentError("train_mlp needs batch_size >= 1");
  MlpDenoiser model(data.dim(), cfg, derive_seed(seed, "init"));
  TrainResult result{std::move(model), {}};
  MlpDenoiser& m = result.model;
  std::size_t d = m.dim();
  RandomStream rs(derive_seed(seed, "batches"), 0);
  std::size_t np = m.param_count();
  std::vector<double> grad(np), m1(np, 0.0), m2(np, 0.0);
  std::vector<double> x0(d);
  MlpBatch batch;
  batch.n = opt.batch_size;
  batch.x_t.resize(batch.n * d);
  batch.t.resize(batch.n);
  batch.target.resize(batch.n * d);
  for (std::uint64_t step = 0; step < opt.steps; ++step) {
    for (std::size_t i = 0; i < batch.n; ++i) {
      data.sample(rs, x0);
      double t;
      if (cfg.discrete_steps > 0) {
        auto n = cfg.discrete_steps;
        auto idx = 1 + std::min<std::uint64_t>(static_cast<std::uint64_t>(rs.next_uniform() * n), n - 1);
        t = static_cast<double>(idx) / static_cast<double>(n);
      } else {
        t = 1.0 - rs.next_uniform();  // (0,1]
      }
      batch.t[i] = t;
      ScheduleValues v = sched.eval(t);
      for (std::size_t j = 0; j < d; ++j) {
        double eps = rs.next_gaussian();
        batch.target[i * d + j] = eps;
        batch.x_t[i * d + j] = v.f * x0[j] + v.g * eps;
      }
    }
    double loss = mlp_batch_loss_grad(m, batch, grad);
    if (!std::isfinite(loss)) throw TrainingError("non-finite training loss at step " + std::to_string(step));
    if (step % opt.record_every == 0 || step + 1 == opt.steps)
      result.loss_trace.emplace_back(step, loss);
    double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step + 1));
    double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step + 1));
    auto& p = m.params();
    for (std::size_t i = 0; i < np; ++i) {
      m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * grad[i];
      m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
      p[i] -= opt.learning_rate * (m1[i] / bc1) / (std::sqrt(m2[i] / bc2) + opt.adam_eps);
    }
  }
  return result;
}

}  // namespace dpstride
