// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "diffpo/diffusion.hpp"
#include "diffpo/rng.hpp"

namespace diffpo {

/// MLP shape: input = concat(x_t, sinusoidal t-embedding, one-hot condition),
/// hidden layers with SiLU, linear output of dimension data_dim.
struct Arch {
    int data_dim = 2;
    int cond_count = 8;
    int t_embed_dim = 8;
    std::vector<int> hidden = {64, 64};

    int input_dim() const { return data_dim + t_embed_dim + cond_count; }
    int output_dim() const { return data_dim; }
    int layer_count() const { return static_cast<int>(hidden.size()) + 1; }
    int layer_in(int layer) const;
    int layer_out(int layer) const;
    std::size_t param_count() const;

    bool operator==(const Arch& other) const = default;
};

/// Flat parameter vector with per-layer views. Layer storage order: weights
/// row-major (out x in), then bias, layers in declared order. Copying a
/// DenoiserParams is a deep, independent snapshot.
struct DenoiserParams {
    Arch arch;
    std::vector<double> values;
    std::uint64_t version = 0;

    std::size_t w_offset(int layer) const;
    std::size_t b_offset(int layer) const;
    double w(int layer, int row, int col) const {
        return values[w_offset(layer) + static_cast<std::size_t>(row) * arch.layer_in(layer) + col];
    }
    double b(int layer, int row) const { return values[b_offset(layer) + static_cast<std::size_t>(row)]; }
};

/// d(loss)/d(parameter), flat, same layout as DenoiserParams::values.
struct GradVector {
    std::vector<double> values;
};

struct OptimizerState {
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment
    long step_count = 0;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Variance-scaled uniform init per layer, biases zero; the final layer is
/// zero-initialized so the fresh predictor outputs exactly 0.
DenoiserParams init_denoiser(const Arch& arch, std::uint64_t seed);

std::vector<double> time_embedding(int t, int dim);
std::vector<double> build_input(const Arch& arch, const std::vector<double>& x_t, int t, int c);

/// Forward kernels shared by the plain and taped paths, so both produce
/// bit-identical activations.
void affine_forward(const DenoiserParams& p, int layer, const std::vector<double>& x,
                    std::vector<double>& out);
void silu_forward(const std::vector<double>& x, std::vector<double>& out);

/// eps_theta(x_t, t, c). Pure; throws InputError on bad dimensions,
/// non-finite input, or t < 1.
std::vector<double> predict_eps(const DenoiserParams& params, const std::vector<double>& x_t,
                                int t, int c);

/// Predictor closure over a parameter snapshot.
Predictor make_predictor(const DenoiserParams& params);

// ---------------------------------------------------------------------------
// Reverse-mode tape over a fixed primitive set: affine, SiLU, squared
// distance, softplus / log-sigmoid, and scalar arithmetic. One tape is bound
// to one parameter set; backward() returns the gradient for those parameters.
// ---------------------------------------------------------------------------
class Tape {
public:
    struct Value {
        int idx = -1;
    };
    struct Vec {
        int idx = -1;
    };

    explicit Tape(const DenoiserParams& params) : params_(&params) {}

    Vec input(std::vector<double> v);
    Vec affine(int layer, Vec x);
    Vec silu(Vec x);

    Value sq_dist(Vec a, std::vector<double> target);
    Value param_sq_norm();  // squared L2 norm of the bound parameter vector
    Value constant(double v);
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul_const(Value a, double k);
    Value add_const(Value a, double k);
    Value neg(Value a);
    Value softplus(Value z);
    Value log_sigmoid(Value z);

    double value(Value v) const { return scalars_[static_cast<std::size_t>(v.idx)].val; }
    const std::vector<double>& value(Vec v) const { return vecs_[static_cast<std::size_t>(v.idx)].val; }

    /// Full MLP forward on the tape; matches predict_eps bit for bit.
    Vec predict_eps_node(const std::vector<double>& x_t, int t, int c);

    GradVector backward(Value loss);

private:
    enum class VOp { input, affine, silu };
    enum class SOp {
        constant,
        sq_dist,
        param_sq_norm,
        add,
        sub,
        mul_const,
        add_const,
        neg,
        softplus,
        log_sigmoid
    };

    struct VecNode {
        VOp op;
        int a = -1;
        int layer = -1;
        std::vector<double> val;
        std::vector<double> adj;
    };
    struct ScalarNode {
        SOp op;
        int a = -1;
        int b = -1;
        int vec = -1;
        double k = 0.0;
        std::vector<double> target;
        double val = 0.0;
        double adj = 0.0;
    };

    const DenoiserParams* params_;
    std::vector<VecNode> vecs_;
    std::vector<ScalarNode> scalars_;
};

/// Loss builder: composes tape primitives into a scalar.
using LossFn = std::function<Tape::Value(Tape&)>;

/// Evaluates loss_fn on a fresh tape bound to `params` and runs the reverse
/// pass. Throws NumericError if the loss is non-finite.
std::pair<double, GradVector> grad(const DenoiserParams& params, const LossFn& loss_fn);

/// Adam with bias correction; increments params.version and state.step_count.
void adam_step(DenoiserParams& params, const GradVector& grads, OptimizerState& state);

OptimizerState make_optimizer(const DenoiserParams& params, double lr = 1e-3,
                              double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Deep, independent copy.
DenoiserParams snapshot(const DenoiserParams& params);

// Checkpoint file: 8-byte magic, u32 format version, arch, params version,
// raw little-endian doubles in layer order. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::string& path);

double stable_softplus(double x);
double sigmoid(double x);

}  // namespace diffpo
