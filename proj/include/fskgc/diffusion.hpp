// Relation-conditioned diffusion over support-triple representations.
//
// Forward process (closed form):  z_t = sqrt(abar_t) z_0 + sqrt(1-abar_t) eps
// Reverse mean:                   mu  = (z_t - beta_t/sqrt(1-abar_t) eps_hat) / sqrt(alpha_t)
// Reverse variance is fixed at sigma_t^2 = beta_t; the t = 1 step is
// deterministic. The noise predictor is a 1-D U-Net over the support-row
// axis with FiLM conditioning on (c_global row, sinusoidal t embedding).
#pragma once

#include "fskgc/autodiff.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace fskgc {

inline constexpr int kTimestepEmbedWidth = 64;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta;       // beta[t-1] for t = 1..T
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // running product of alpha

    double beta_at(int t) const { return beta[check(t)]; }
    double alpha_at(int t) const { return alpha[check(t)]; }
    double alpha_bar_at(int t) const { return alpha_bar[check(t)]; }

private:
    size_t check(int t) const {
        if (t < 1 || t > T) throw ContractError("DiffusionSchedule: t=" + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
        return static_cast<size_t>(t - 1);
    }
};

inline DiffusionSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("build_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ConfigError("build_schedule: need 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        const double b = beta_start + (beta_end - beta_start) * frac;
        s.beta[static_cast<size_t>(t - 1)] = b;
        s.alpha[static_cast<size_t>(t - 1)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t - 1)] = prod;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Forward process
// ---------------------------------------------------------------------------

inline Tensor forward_sample(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& s) {
    if (!z0.same_shape(eps))
        throw DimensionError("forward_sample: z0 " + shape_str(z0.shape) + " vs eps " + shape_str(eps.shape));
    const double ab = s.alpha_bar_at(t);
    Tensor out = z0;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = std::sqrt(ab) * z0.data[i] + std::sqrt(1.0 - ab) * eps.data[i];
    return out;
}

inline Val forward_sample(Tape& tp, Val z0, int t, const Tensor& eps, const DiffusionSchedule& s) {
    if (!tp.value(z0).same_shape(eps))
        throw DimensionError("forward_sample: z0 " + shape_str(tp.value(z0).shape) + " vs eps " + shape_str(eps.shape));
    const double ab = s.alpha_bar_at(t);
    return add(tp, scale(tp, z0, std::sqrt(ab)), tp.constant(Tensor(eps.shape, [&] {
        std::vector<double> d = eps.data;
        for (double& x : d) x *= std::sqrt(1.0 - ab);
        return d;
    }())));
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

// Rows of [r'; z_0 row; one-hot label], label (1,0) positive / (0,1) negative.
inline Val build_condition(Tape& t, Val r_prime, Val z0_rows, const std::vector<bool>& positive) {
    const Tensor& z = t.value(z0_rows);
    if (z.rank() != 2) throw ContractError("build_condition: z0 must be a matrix, got shape " + shape_str(z.shape));
    if (static_cast<int>(positive.size()) != z.rows())
        throw ContractError("build_condition: " + std::to_string(positive.size()) + " labels for " +
                            std::to_string(z.rows()) + " rows");
    std::vector<Val> rows;
    rows.reserve(positive.size());
    for (int i = 0; i < z.rows(); ++i) {
        const Val label = t.constant(positive[static_cast<size_t>(i)] ? Tensor({2}, {1.0, 0.0}) : Tensor({2}, {0.0, 1.0}));
        rows.push_back(concat(t, {r_prime, row(t, z0_rows, i), label}));
    }
    return stack_rows(t, rows);
}

// Label-free variant: rows of [r'; z_0 row] only.
inline Val build_condition(Tape& t, Val r_prime, Val z0_rows) {
    const Tensor& z = t.value(z0_rows);
    if (z.rank() != 2) throw ContractError("build_condition: z0 must be a matrix, got shape " + shape_str(z.shape));
    std::vector<Val> rows;
    rows.reserve(static_cast<size_t>(z.rows()));
    for (int i = 0; i < z.rows(); ++i) rows.push_back(concat(t, {r_prime, row(t, z0_rows, i)}));
    return stack_rows(t, rows);
}

// Sequence length after zero-padding: next multiple of 4, at least 8.
inline int padded_rows(int n) {
    if (n < 1) throw ContractError("padded_rows: need at least one row");
    return std::max(8, 4 * ((n + 3) / 4));
}

inline Tensor timestep_embedding(int t, int width = kTimestepEmbedWidth) {
    if (width < 2 || width % 2 != 0) throw ConfigError("timestep_embedding: width must be even and >= 2");
    const int half = width / 2;
    Tensor e({width});
    for (int i = 0; i < half; ++i) {
        const double expo = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
        const double freq = std::pow(10000.0, -expo);
        e.at(i) = std::sin(t * freq);
        e.at(half + i) = std::cos(t * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// U-Net noise predictor
// ---------------------------------------------------------------------------

struct UNetBlockParams {
    Param* conv_w = nullptr;  // (out_ch, in_ch, 3)
    Param* conv_b = nullptr;  // (out_ch)
    Param* film_w = nullptr;  // (2*out_ch, cond_width + embed width)
    Param* film_b = nullptr;  // (2*out_ch)
    int out_ch = 0;
};

struct NoisePredictorParams {
    int channels = 0;    // 2d, input and output width
    int cond_width = 0;  // 3d + 2
    UNetBlockParams enc0, enc1, enc2, mid, up1, up2;
    Param* out_w = nullptr;
    Param* out_b = nullptr;

    // base sets the first encoder width; deeper levels double it twice.
    static NoisePredictorParams create(ParamRegistry& reg, int channels, int cond_width, Rng& rng, int base = 64) {
        if (channels < 1 || cond_width < 1) throw ConfigError("NoisePredictorParams: widths must be >= 1");
        if (base < 4) throw ConfigError("NoisePredictorParams: base channel width must be >= 4");
        NoisePredictorParams p;
        p.channels = channels;
        p.cond_width = cond_width;
        const int film_in = cond_width + kTimestepEmbedWidth;
        auto block = [&](const char* name, int in_ch, int out_ch) {
            UNetBlockParams b;
            b.out_ch = out_ch;
            const std::string prefix = std::string("unet.") + name;
            b.conv_w = &reg.create(prefix + ".conv_w", {out_ch, in_ch, 3}, rng);
            b.conv_b = &reg.create_zeros(prefix + ".conv_b", {out_ch});
            b.film_w = &reg.create(prefix + ".film_w", {2 * out_ch, film_in}, rng);
            b.film_b = &reg.create_zeros(prefix + ".film_b", {2 * out_ch});
            return b;
        };
        p.enc0 = block("enc0", channels, base);
        p.enc1 = block("enc1", base, 2 * base);
        p.enc2 = block("enc2", 2 * base, 4 * base);
        p.mid = block("mid", 4 * base, 4 * base);
        p.up1 = block("up1", 4 * base + 2 * base, 2 * base);
        p.up2 = block("up2", 2 * base + base, base);
        p.out_w = &reg.create("unet.out.conv_w", {channels, base, 3}, rng);
        p.out_b = &reg.create_zeros("unet.out.conv_b", {channels});
        return p;
    }
};

namespace detail {

// conv -> FiLM -> LeakyReLU. cond carries one row per output position.
inline Val unet_block(Tape& t, const UNetBlockParams& b, Val x, Val cond, int stride) {
    Val h = conv1d(t, x, t.leaf(*b.conv_w), t.leaf(*b.conv_b), stride, 1);
    Val film = linear(t, cond, t.leaf(*b.film_w), t.leaf(*b.film_b));
    auto parts = split(t, film, {b.out_ch, b.out_ch}, 1);
    h = add(t, add(t, h, mul(t, parts[0], h)), parts[1]);
    return leaky_relu(t, h, kLeakySlope);
}

}  // namespace detail

// z_t: (L, channels) with L a multiple of 4, L >= 8. cond: (L, cond_width).
inline Val predict_noise(Tape& t, const NoisePredictorParams& p, Val z_t, int step, Val cond) {
    const Tensor& z = t.value(z_t);
    const Tensor& c = t.value(cond);
    if (z.rank() != 2 || z.cols() != p.channels)
        throw DimensionError("predict_noise: z_t shape " + shape_str(z.shape) + ", expected (rows, " +
                             std::to_string(p.channels) + ")");
    if (z.rows() < 8 || z.rows() % 4 != 0)
        throw DimensionError("predict_noise: sequence length " + std::to_string(z.rows()) +
                             " must be a multiple of 4 and at least 8");
    if (c.rank() != 2 || c.rows() != z.rows() || c.cols() != p.cond_width)
        throw DimensionError("predict_noise: condition shape " + shape_str(c.shape) + ", expected (" +
                             std::to_string(z.rows()) + ", " + std::to_string(p.cond_width) + ")");

    Tensor emb = timestep_embedding(step);
    Tensor emb_rows({z.rows(), kTimestepEmbedWidth});
    for (int i = 0; i < z.rows(); ++i)
        for (int j = 0; j < kTimestepEmbedWidth; ++j) emb_rows.at(i, j) = emb.at(j);
    const Val cond_full = concat(t, {cond, t.constant(emb_rows)}, 1);   // L
    const Val cond_half = avgpool2_rows(t, cond_full);                  // L/2
    const Val cond_quarter = avgpool2_rows(t, cond_half);               // L/4

    const Val h0 = detail::unet_block(t, p.enc0, z_t, cond_full, 1);         // (L, 64)
    const Val h1 = detail::unet_block(t, p.enc1, h0, cond_half, 2);          // (L/2, 128)
    const Val h2 = detail::unet_block(t, p.enc2, h1, cond_quarter, 2);       // (L/4, 256)
    const Val hm = detail::unet_block(t, p.mid, h2, cond_quarter, 1);        // (L/4, 256)
    const Val u1 = detail::unet_block(t, p.up1, concat(t, {upsample2_rows(t, hm), h1}, 1), cond_half, 1);  // (L/2, 128)
    const Val u2 = detail::unet_block(t, p.up2, concat(t, {upsample2_rows(t, u1), h0}, 1), cond_full, 1);  // (L, 64)
    return conv1d(t, u2, t.leaf(*p.out_w), t.leaf(*p.out_b), 1, 1);
}

// ---------------------------------------------------------------------------
// Reverse process
// ---------------------------------------------------------------------------

using NoisePredictorFn = std::function<Tensor(const Tensor& z_t, int t)>;

inline Tensor reverse_mean(const Tensor& z_t, int t, const Tensor& eps_hat, const DiffusionSchedule& s) {
    if (!z_t.same_shape(eps_hat))
        throw DimensionError("reverse_mean: z_t " + shape_str(z_t.shape) + " vs eps_hat " + shape_str(eps_hat.shape));
    const double b = s.beta_at(t);
    const double a = s.alpha_at(t);
    const double ab = s.alpha_bar_at(t);
    Tensor mu = z_t;
    for (size_t i = 0; i < mu.data.size(); ++i)
        mu.data[i] = (z_t.data[i] - b / std::sqrt(1.0 - ab) * eps_hat.data[i]) / std::sqrt(a);
    return mu;
}

inline Tensor reverse_step(const Tensor& z_t, int t, const NoisePredictorFn& predictor, const DiffusionSchedule& s,
                           Rng& rng) {
    Tensor mu = reverse_mean(z_t, t, predictor(z_t, t), s);
    if (t == 1) return mu;
    const double sigma = std::sqrt(s.beta_at(t));
    Tensor xi = rng.normal_tensor(mu.shape);
    for (size_t i = 0; i < mu.data.size(); ++i) mu.data[i] += sigma * xi.data[i];
    return mu;
}

// Ancestral sampling from pure noise; returns the full padded matrix.
inline Tensor sample(int rows, int cols, const NoisePredictorFn& predictor, const DiffusionSchedule& s, Rng& rng) {
    Tensor z = rng.normal_tensor({rows, cols});
    for (int t = s.T; t >= 1; --t) z = reverse_step(z, t, predictor, s, rng);
    return z;
}

// Wraps the U-Net as an inference-only predictor with the condition baked in.
inline NoisePredictorFn make_unet_predictor(const NoisePredictorParams& p, Tensor cond_padded) {
    return [&p, cond = std::move(cond_padded)](const Tensor& z_t, int t) {
        Tape tape;
        return tape.value(predict_noise(tape, p, tape.constant(z_t), t, tape.constant(cond)));
    };
}

// Full pipeline for one episode at inference: pad, sample, drop pad rows.
inline Tensor sample_latent(const NoisePredictorParams& p, const Tensor& cond_real, const DiffusionSchedule& s,
                            Rng& rng) {
    if (cond_real.rank() != 2) throw ContractError("sample_latent: condition must be a matrix");
    const int n = cond_real.rows();
    const int L = padded_rows(n);
    Tensor cond_pad({L, cond_real.cols()});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < cond_real.cols(); ++j) cond_pad.at(i, j) = cond_real.at(i, j);
    Tensor z = sample(L, p.channels, make_unet_predictor(p, std::move(cond_pad)), s, rng);
    Tensor out({n, p.channels});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p.channels; ++j) out.at(i, j) = z.at(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Training loss
// ---------------------------------------------------------------------------

struct DiffusionLossResult {
    Val loss;    // scalar: mean over real rows of ||eps_hat - eps||^2
    Val z0_est;  // (n, channels) one-shot denoised estimate, real rows only
};

// Differentiable loss with frozen draw (t, eps); eps covers real rows only.
inline DiffusionLossResult diffusion_loss_at(Tape& tp, const NoisePredictorParams& p, Val z0_real, Val cond_real,
                                             int t, const Tensor& eps_real, const DiffusionSchedule& s) {
    const Tensor& z0v = tp.value(z0_real);
    if (z0v.rank() != 2 || z0v.cols() != p.channels)
        throw DimensionError("diffusion_loss: z0 shape " + shape_str(z0v.shape) + ", expected (rows, " +
                             std::to_string(p.channels) + ")");
    if (!z0v.same_shape(eps_real))
        throw DimensionError("diffusion_loss: z0 " + shape_str(z0v.shape) + " vs eps " + shape_str(eps_real.shape));
    const int n = z0v.rows();
    const int L = padded_rows(n);

    Tensor eps_pad({L, p.channels});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < p.channels; ++j) eps_pad.at(i, j) = eps_real.at(i, j);

    const Val z0_pad = pad_rows(tp, z0_real, L);
    const Val cond_pad = pad_rows(tp, cond_real, L);
    const Val z_t = forward_sample(tp, z0_pad, t, eps_pad, s);
    const Val eps_hat = predict_noise(tp, p, z_t, t, cond_pad);

    const Val eps_hat_real = slice_rows(tp, eps_hat, 0, n);
    const Val diff = sub(tp, eps_hat_real, tp.constant(eps_real));
    const Val loss = scale(tp, sum(tp, mul(tp, diff, diff)), 1.0 / n);

    // One-shot inversion of the forward marginal with the predicted noise.
    const double ab = s.alpha_bar_at(t);
    const Val z_t_real = slice_rows(tp, z_t, 0, n);
    const Val z0_est =
        scale(tp, sub(tp, z_t_real, scale(tp, eps_hat_real, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
    return {loss, z0_est};
}

// Training entry: draws t uniform on [1, T] and eps standard normal.
inline DiffusionLossResult diffusion_loss(Tape& tp, const NoisePredictorParams& p, Val z0_real, Val cond_real,
                                          const DiffusionSchedule& s, Rng& rng) {
    const int t = 1 + rng.uniform_int(s.T);
    const Tensor eps = rng.normal_tensor(tp.value(z0_real).shape);
    return diffusion_loss_at(tp, p, z0_real, cond_real, t, eps, s);
}

}  // namespace fskgc
