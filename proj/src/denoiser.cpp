// SPDX-License-Identifier: Apache-2.0
#include "diffpo/denoiser.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "diffpo/errors.hpp"

namespace diffpo {

int Arch::layer_in(int layer) const {
    return layer == 0 ? input_dim() : hidden[static_cast<std::size_t>(layer) - 1];
}

int Arch::layer_out(int layer) const {
    return layer == layer_count() - 1 ? output_dim() : hidden[static_cast<std::size_t>(layer)];
}

std::size_t Arch::param_count() const {
    std::size_t n = 0;
    for (int l = 0; l < layer_count(); ++l) {
        n += static_cast<std::size_t>(layer_in(l)) * layer_out(l) + layer_out(l);
    }
    return n;
}

std::size_t DenoiserParams::w_offset(int layer) const {
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l) {
        off += static_cast<std::size_t>(arch.layer_in(l)) * arch.layer_out(l) + arch.layer_out(l);
    }
    return off;
}

std::size_t DenoiserParams::b_offset(int layer) const {
    return w_offset(layer) + static_cast<std::size_t>(arch.layer_in(layer)) * arch.layer_out(layer);
}

static void validate_arch(const Arch& arch) {
    if (arch.data_dim < 1 || arch.cond_count < 1 || arch.t_embed_dim < 1 || arch.t_embed_dim % 2 != 0) {
        throw ConfigError("init_denoiser: arch dims must be positive (t_embed_dim even)");
    }
    for (int h : arch.hidden) {
        if (h < 1) {
            throw ConfigError("init_denoiser: hidden widths must be positive");
        }
    }
}

DenoiserParams init_denoiser(const Arch& arch, std::uint64_t seed) {
    validate_arch(arch);
    DenoiserParams p;
    p.arch = arch;
    p.values.assign(arch.param_count(), 0.0);
    Rng rng(seed);
    const int last = arch.layer_count() - 1;
    for (int l = 0; l < last; ++l) {
        const int fan_in = arch.layer_in(l);
        const int fan_out = arch.layer_out(l);
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        const std::size_t w0 = p.w_offset(l);
        const std::size_t nw = static_cast<std::size_t>(fan_in) * fan_out;
        for (std::size_t i = 0; i < nw; ++i) {
            p.values[w0 + i] = (2.0 * rng.uniform01() - 1.0) * limit;
        }
        // biases stay zero
    }
    // final layer stays zero: the fresh net predicts the zero vector
    return p;
}

std::vector<double> time_embedding(int t, int dim) {
    const int half = dim / 2;
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
        e[static_cast<std::size_t>(2 * k)] = std::sin(t * freq);
        e[static_cast<std::size_t>(2 * k) + 1] = std::cos(t * freq);
    }
    return e;
}

std::vector<double> build_input(const Arch& arch, const std::vector<double>& x_t, int t, int c) {
    if (static_cast<int>(x_t.size()) != arch.data_dim) {
        throw InputError("predict_eps: x_t dimension " + std::to_string(x_t.size()) +
                         " does not match data_dim " + std::to_string(arch.data_dim));
    }
    if (t < 1) {
        throw InputError("predict_eps: timestep must be >= 1, got " + std::to_string(t));
    }
    if (c < 0 || c >= arch.cond_count) {
        throw InputError("predict_eps: condition " + std::to_string(c) + " outside {0.." +
                         std::to_string(arch.cond_count - 1) + "}");
    }
    if (!all_finite(x_t)) {
        throw InputError("predict_eps: non-finite x_t");
    }
    std::vector<double> in;
    in.reserve(static_cast<std::size_t>(arch.input_dim()));
    in.insert(in.end(), x_t.begin(), x_t.end());
    const std::vector<double> te = time_embedding(t, arch.t_embed_dim);
    in.insert(in.end(), te.begin(), te.end());
    for (int i = 0; i < arch.cond_count; ++i) {
        in.push_back(i == c ? 1.0 : 0.0);
    }
    return in;
}

void affine_forward(const DenoiserParams& p, int layer, const std::vector<double>& x,
                    std::vector<double>& out) {
    const int n_in = p.arch.layer_in(layer);
    const int n_out = p.arch.layer_out(layer);
    const double* w = p.values.data() + p.w_offset(layer);
    const double* b = p.values.data() + p.b_offset(layer);
    out.assign(static_cast<std::size_t>(n_out), 0.0);
    for (int r = 0; r < n_out; ++r) {
        double acc = b[r];
        const double* wrow = w + static_cast<std::size_t>(r) * n_in;
        for (int c = 0; c < n_in; ++c) {
            acc += wrow[c] * x[static_cast<std::size_t>(c)];
        }
        out[static_cast<std::size_t>(r)] = acc;
    }
}

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void silu_forward(const std::vector<double>& x, std::vector<double>& out) {
    out.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * sigmoid(x[i]);
    }
}

double stable_softplus(double x) {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

std::vector<double> predict_eps(const DenoiserParams& params, const std::vector<double>& x_t,
                                int t, int c) {
    std::vector<double> cur = build_input(params.arch, x_t, t, c);
    std::vector<double> next;
    const int layers = params.arch.layer_count();
    for (int l = 0; l < layers; ++l) {
        affine_forward(params, l, cur, next);
        if (l + 1 < layers) {
            silu_forward(next, cur);
        } else {
            cur = next;
        }
    }
    return cur;
}

Predictor make_predictor(const DenoiserParams& params) {
    return [params](const std::vector<double>& x_t, int t, int c) {
        return predict_eps(params, x_t, t, c);
    };
}

// ----------------------------- tape -----------------------------

Tape::Vec Tape::input(std::vector<double> v) {
    VecNode n;
    n.op = VOp::input;
    n.val = std::move(v);
    vecs_.push_back(std::move(n));
    return Vec{static_cast<int>(vecs_.size()) - 1};
}

Tape::Vec Tape::affine(int layer, Vec x) {
    VecNode n;
    n.op = VOp::affine;
    n.a = x.idx;
    n.layer = layer;
    affine_forward(*params_, layer, vecs_[static_cast<std::size_t>(x.idx)].val, n.val);
    vecs_.push_back(std::move(n));
    return Vec{static_cast<int>(vecs_.size()) - 1};
}

Tape::Vec Tape::silu(Vec x) {
    VecNode n;
    n.op = VOp::silu;
    n.a = x.idx;
    silu_forward(vecs_[static_cast<std::size_t>(x.idx)].val, n.val);
    vecs_.push_back(std::move(n));
    return Vec{static_cast<int>(vecs_.size()) - 1};
}

Tape::Vec Tape::predict_eps_node(const std::vector<double>& x_t, int t, int c) {
    Vec cur = input(build_input(params_->arch, x_t, t, c));
    const int layers = params_->arch.layer_count();
    for (int l = 0; l < layers; ++l) {
        cur = affine(l, cur);
        if (l + 1 < layers) {
            cur = silu(cur);
        }
    }
    return cur;
}

Tape::Value Tape::sq_dist(Vec a, std::vector<double> target) {
    ScalarNode n;
    n.op = SOp::sq_dist;
    n.vec = a.idx;
    n.target = std::move(target);
    const std::vector<double>& av = vecs_[static_cast<std::size_t>(a.idx)].val;
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = av[i] - n.target[i];
        acc += d * d;
    }
    n.val = acc;
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::param_sq_norm() {
    ScalarNode n;
    n.op = SOp::param_sq_norm;
    double acc = 0.0;
    for (double v : params_->values) {
        acc += v * v;
    }
    n.val = acc;
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::constant(double v) {
    ScalarNode n;
    n.op = SOp::constant;
    n.val = v;
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::add(Value a, Value b) {
    ScalarNode n;
    n.op = SOp::add;
    n.a = a.idx;
    n.b = b.idx;
    n.val = value(a) + value(b);
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::sub(Value a, Value b) {
    ScalarNode n;
    n.op = SOp::sub;
    n.a = a.idx;
    n.b = b.idx;
    n.val = value(a) - value(b);
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::mul_const(Value a, double k) {
    ScalarNode n;
    n.op = SOp::mul_const;
    n.a = a.idx;
    n.k = k;
    n.val = value(a) * k;
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::add_const(Value a, double k) {
    ScalarNode n;
    n.op = SOp::add_const;
    n.a = a.idx;
    n.k = k;
    n.val = value(a) + k;
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::neg(Value a) {
    ScalarNode n;
    n.op = SOp::neg;
    n.a = a.idx;
    n.val = -value(a);
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::softplus(Value z) {
    ScalarNode n;
    n.op = SOp::softplus;
    n.a = z.idx;
    n.val = stable_softplus(value(z));
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

Tape::Value Tape::log_sigmoid(Value z) {
    ScalarNode n;
    n.op = SOp::log_sigmoid;
    n.a = z.idx;
    n.val = -stable_softplus(-value(z));
    scalars_.push_back(std::move(n));
    return Value{static_cast<int>(scalars_.size()) - 1};
}

GradVector Tape::backward(Value loss) {
    GradVector g;
    g.values.assign(params_->values.size(), 0.0);

    for (auto& sn : scalars_) {
        sn.adj = 0.0;
    }
    for (auto& vn : vecs_) {
        vn.adj.assign(vn.val.size(), 0.0);
    }
    scalars_[static_cast<std::size_t>(loss.idx)].adj = 1.0;

    // Scalar nodes only feed later scalar nodes; vector nodes only feed later
    // vector or scalar nodes. Sweeping scalars first, then vectors, visits
    // every edge after its head's adjoint is final.
    for (int i = static_cast<int>(scalars_.size()) - 1; i >= 0; --i) {
        const ScalarNode& n = scalars_[static_cast<std::size_t>(i)];
        if (n.adj == 0.0) {
            continue;
        }
        switch (n.op) {
            case SOp::constant:
                break;
            case SOp::param_sq_norm:
                for (std::size_t j = 0; j < params_->values.size(); ++j) {
                    g.values[j] += n.adj * 2.0 * params_->values[j];
                }
                break;
            case SOp::sq_dist: {
                VecNode& a = vecs_[static_cast<std::size_t>(n.vec)];
                for (std::size_t j = 0; j < a.val.size(); ++j) {
                    a.adj[j] += n.adj * 2.0 * (a.val[j] - n.target[j]);
                }
                break;
            }
            case SOp::add:
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj;
                scalars_[static_cast<std::size_t>(n.b)].adj += n.adj;
                break;
            case SOp::sub:
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj;
                scalars_[static_cast<std::size_t>(n.b)].adj -= n.adj;
                break;
            case SOp::mul_const:
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj * n.k;
                break;
            case SOp::add_const:
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj;
                break;
            case SOp::neg:
                scalars_[static_cast<std::size_t>(n.a)].adj -= n.adj;
                break;
            case SOp::softplus: {
                const double z = scalars_[static_cast<std::size_t>(n.a)].val;
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj * sigmoid(z);
                break;
            }
            case SOp::log_sigmoid: {
                const double z = scalars_[static_cast<std::size_t>(n.a)].val;
                scalars_[static_cast<std::size_t>(n.a)].adj += n.adj * sigmoid(-z);
                break;
            }
        }
    }

    for (int i = static_cast<int>(vecs_.size()) - 1; i >= 0; --i) {
        const VecNode& n = vecs_[static_cast<std::size_t>(i)];
        switch (n.op) {
            case VOp::input:
                break;
            case VOp::silu: {
                VecNode& a = vecs_[static_cast<std::size_t>(n.a)];
                for (std::size_t j = 0; j < a.val.size(); ++j) {
                    const double s = sigmoid(a.val[j]);
                    a.adj[j] += n.adj[j] * s * (1.0 + a.val[j] * (1.0 - s));
                }
                break;
            }
            case VOp::affine: {
                VecNode& a = vecs_[static_cast<std::size_t>(n.a)];
                const int n_in = params_->arch.layer_in(n.layer);
                const int n_out = params_->arch.layer_out(n.layer);
                const double* w = params_->values.data() + params_->w_offset(n.layer);
                double* gw = g.values.data() + params_->w_offset(n.layer);
                double* gb = g.values.data() + params_->b_offset(n.layer);
                for (int r = 0; r < n_out; ++r) {
                    const double dy = n.adj[static_cast<std::size_t>(r)];
                    if (dy == 0.0) {
                        continue;
                    }
                    gb[r] += dy;
                    const double* wrow = w + static_cast<std::size_t>(r) * n_in;
                    double* gwrow = gw + static_cast<std::size_t>(r) * n_in;
                    for (int c = 0; c < n_in; ++c) {
                        gwrow[c] += dy * a.val[static_cast<std::size_t>(c)];
                        a.adj[static_cast<std::size_t>(c)] += dy * wrow[c];
                    }
                }
                break;
            }
        }
    }
    return g;
}

std::pair<double, GradVector> grad(const DenoiserParams& params, const LossFn& loss_fn) {
    Tape tape(params);
    const Tape::Value loss = loss_fn(tape);
    const double val = tape.value(loss);
    if (!std::isfinite(val)) {
        throw NumericError("grad: non-finite loss value " + std::to_string(val) +
                           " (params version " + std::to_string(params.version) + ")");
    }
    GradVector g = tape.backward(loss);
    if (!all_finite(g.values)) {
        throw NumericError("grad: non-finite gradient (params version " +
                           std::to_string(params.version) + ")");
    }
    return {val, std::move(g)};
}

OptimizerState make_optimizer(const DenoiserParams& params, double lr, double beta1,
                              double beta2, double eps) {
    OptimizerState s;
    s.m.assign(params.values.size(), 0.0);
    s.v.assign(params.values.size(), 0.0);
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
}

void adam_step(DenoiserParams& params, const GradVector& grads, OptimizerState& state) {
    if (grads.values.size() != params.values.size() || state.m.size() != params.values.size()) {
        throw InputError("adam_step: shape mismatch");
    }
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        const double gi = grads.values[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * gi;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * gi * gi;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params.values[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
    params.version += 1;
}

DenoiserParams snapshot(const DenoiserParams& params) { return params; }

// ----------------------------- checkpoint io -----------------------------

namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'P', 'O', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(b, 8);
}

void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | b[i];
    }
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | b[i];
    }
    return v;
}

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

void save_checkpoint(const std::string& path, const DenoiserParams& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw IoError("save_checkpoint: cannot open " + path);
    }
    os.write(kMagic, 8);
    put_u32(os, kFormatVersion);
    put_u32(os, static_cast<std::uint32_t>(params.arch.data_dim));
    put_u32(os, static_cast<std::uint32_t>(params.arch.cond_count));
    put_u32(os, static_cast<std::uint32_t>(params.arch.t_embed_dim));
    put_u32(os, static_cast<std::uint32_t>(params.arch.hidden.size()));
    for (int h : params.arch.hidden) {
        put_u32(os, static_cast<std::uint32_t>(h));
    }
    put_u64(os, params.version);
    put_u64(os, params.values.size());
    for (double v : params.values) {
        put_f64(os, v);
    }
    if (!os) {
        throw IoError("save_checkpoint: write failed for " + path);
    }
}

DenoiserParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("load_checkpoint: cannot open " + path);
    }
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw ParseError("load_checkpoint: bad magic in " + path);
    }
    const std::uint32_t fmt = get_u32(is);
    if (fmt != kFormatVersion) {
        throw ParseError("load_checkpoint: unsupported format version " + std::to_string(fmt));
    }
    DenoiserParams p;
    p.arch.data_dim = static_cast<int>(get_u32(is));
    p.arch.cond_count = static_cast<int>(get_u32(is));
    p.arch.t_embed_dim = static_cast<int>(get_u32(is));
    const std::uint32_t nh = get_u32(is);
    p.arch.hidden.resize(nh);
    for (std::uint32_t i = 0; i < nh; ++i) {
        p.arch.hidden[i] = static_cast<int>(get_u32(is));
    }
    p.version = get_u64(is);
    const std::uint64_t count = get_u64(is);
    if (count != p.arch.param_count()) {
        throw ParseError("load_checkpoint: parameter count " + std::to_string(count) +
                         " inconsistent with arch in " + path);
    }
    p.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        p.values[static_cast<std::size_t>(i)] = get_f64(is);
    }
    if (!is) {
        throw ParseError("load_checkpoint: truncated file " + path);
    }
    return p;
}

}  // namespace diffpo
