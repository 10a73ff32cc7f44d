#include "imdiff/denoiser.hpp"

#include <cmath>
#include <numeric>

namespace imdiff {

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCategory::config, "denoiser config: " + msg); };
  if (n_blocks < 1) fail("n_blocks must be >= 1");
  if (hidden_dim < 1 || n_heads < 1) fail("hidden_dim and n_heads must be positive");
  if (hidden_dim % n_heads != 0)
    fail("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by n_heads " + std::to_string(n_heads));
  if (step_embed_dim < 2 || step_embed_dim % 2 != 0) fail("step_embed_dim must be even and >= 2");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and >= 2");
  if (feature_embed_dim < 1 || ff_dim < 1) fail("feature_embed_dim and ff_dim must be positive");
  if (steps < 1) fail("steps must be >= 1");
  if (n_features < 1) fail("n_features must be >= 1");
}

bool operator==(const DenoiserConfig& a, const DenoiserConfig& b) {
  return a.n_blocks == b.n_blocks && a.hidden_dim == b.hidden_dim && a.n_heads == b.n_heads &&
         a.step_embed_dim == b.step_embed_dim && a.feature_embed_dim == b.feature_embed_dim &&
         a.time_embed_dim == b.time_embed_dim && a.ff_dim == b.ff_dim && a.steps == b.steps &&
         a.n_features == b.n_features && a.use_temporal == b.use_temporal && a.use_spatial == b.use_spatial;
}

template <typename Scalar>
void DenoiserInput<Scalar>::default_indices() {
  time_index.resize(static_cast<std::size_t>(masked_channel.rows()));
  feature_index.resize(static_cast<std::size_t>(masked_channel.cols()));
  std::iota(time_index.begin(), time_index.end(), 0);
  std::iota(feature_index.begin(), feature_index.end(), 0);
}

template <typename Scalar>
RowVector<Scalar> sinusoidal_encoding(double position, int dim) {
  const int half = dim / 2;
  RowVector<Scalar> out(dim);
  for (int j = 0; j < half; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / half);
    out(j) = static_cast<Scalar>(std::sin(position * freq));
    out(half + j) = static_cast<Scalar>(std::cos(position * freq));
  }
  return out;
}

namespace detail {

namespace {

struct LayoutBuilder {
  Layout layout;

  Eigen::Index add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    const Eigen::Index offset = layout.size;
    layout.table.push_back({name, offset, rows, cols});
    layout.size += rows * cols;
    return offset;
  }

  LinearSlot linear(const std::string& name, int in, int out) {
    LinearSlot s;
    s.in = in;
    s.out = out;
    s.weight = add(name + ".weight", out, in);
    s.bias = add(name + ".bias", out, 1);
    return s;
  }

  NormSlot norm(const std::string& name, int dim) {
    NormSlot s;
    s.dim = dim;
    s.gamma = add(name + ".gamma", dim, 1);
    s.beta = add(name + ".beta", dim, 1);
    return s;
  }

  TransformerSlots transformer(const std::string& name, int c, int ff) {
    TransformerSlots t;
    t.qkv = linear(name + ".qkv", c, 3 * c);
    t.proj = linear(name + ".proj", c, c);
    t.ln1 = norm(name + ".ln1", c);
    t.ff1 = linear(name + ".ff1", c, ff);
    t.ff2 = linear(name + ".ff2", ff, c);
    t.ln2 = norm(name + ".ln2", c);
    return t;
  }
};

}  // namespace

Layout make_layout(const DenoiserConfig& cfg) {
  LayoutBuilder b;
  const int c = cfg.hidden_dim;
  const int p = cfg.step_embed_dim;
  b.layout.input = b.linear("input", 2, c);
  b.layout.step1 = b.linear("step.fc1", p, p);
  b.layout.step2 = b.linear("step.fc2", p, p);
  b.layout.policy_embed = b.add("policy_embed", 3, p);
  b.layout.feature_embed = b.add("feature_embed", cfg.n_features, cfg.feature_embed_dim);
  for (int i = 0; i < cfg.n_blocks; ++i) {
    const std::string pre = "block" + std::to_string(i);
    BlockSlots blk;
    blk.step_proj = b.linear(pre + ".step_proj", p, c);
    blk.side_in = b.linear(pre + ".side_in", cfg.side_dim(), c);
    if (cfg.use_temporal) blk.temporal = b.transformer(pre + ".temporal", c, cfg.ff_dim);
    if (cfg.use_spatial) blk.spatial = b.transformer(pre + ".spatial", c, cfg.ff_dim);
    blk.mid = b.linear(pre + ".mid", c, 2 * c);
    blk.cond = b.linear(pre + ".cond", cfg.side_dim(), 2 * c);
    blk.out = b.linear(pre + ".out", c, 2 * c);
    b.layout.blocks.push_back(blk);
  }
  b.layout.skip = b.linear("head.skip", c, c);
  b.layout.output = b.linear("head.output", c, 1);
  return b.layout;
}

}  // namespace detail

namespace {

using detail::LinearSlot;
using detail::NormSlot;
using detail::TransformerSlots;

template <typename Scalar>
using ConstMap = Eigen::Map<const Matrix<Scalar>>;
template <typename Scalar>
using MutMap = Eigen::Map<Matrix<Scalar>>;

// Row-token linear algebra over the flat parameter vector.
template <typename Scalar>
struct Ops {
  using Mat = Matrix<Scalar>;
  using Vec = Vector<Scalar>;

  const Vec& theta;

  ConstMap<Scalar> weight(const LinearSlot& s) const { return {theta.data() + s.weight, s.out, s.in}; }
  Eigen::Map<const RowVector<Scalar>> bias(const LinearSlot& s) const { return {theta.data() + s.bias, s.out}; }

  template <typename In>
  Mat linear(const In& x, const LinearSlot& s) const {
    Mat y(x.rows(), s.out);
    y.noalias() = x * weight(s).transpose();
    y.rowwise() += bias(s);
    return y;
  }

  // Accumulates parameter grads; returns d(input).
  template <typename In, typename DOut>
  Mat linear_back(const In& x, const DOut& dy, const LinearSlot& s, Vec& grad) const {
    MutMap<Scalar>(grad.data() + s.weight, s.out, s.in).noalias() += dy.transpose() * x;
    MutMap<Scalar>(grad.data() + s.bias, 1, s.out) += dy.colwise().sum();
    Mat dx(dy.rows(), s.in);
    dx.noalias() = dy * weight(s);
    return dx;
  }

  template <typename In, typename DOut>
  void linear_back_params(const In& x, const DOut& dy, const LinearSlot& s, Vec& grad) const {
    MutMap<Scalar>(grad.data() + s.weight, s.out, s.in).noalias() += dy.transpose() * x;
    MutMap<Scalar>(grad.data() + s.bias, 1, s.out) += dy.colwise().sum();
  }

  Mat layer_norm(const Mat& x, const NormSlot& s, Mat& hat, Vec& rstd) const {
    constexpr Scalar eps = Scalar(1e-5);
    const Eigen::Index n = x.rows();
    const Scalar inv_d = Scalar(1) / static_cast<Scalar>(s.dim);
    hat.resize(n, s.dim);
    rstd.resize(n);
    const Vec mean = x.rowwise().sum() * inv_d;
    hat = x.colwise() - mean;
    rstd = ((hat.array().square().rowwise().sum() * inv_d) + eps).rsqrt().matrix();
    hat = hat.array().colwise() * rstd.array();
    Eigen::Map<const RowVector<Scalar>> gamma(theta.data() + s.gamma, s.dim);
    Eigen::Map<const RowVector<Scalar>> beta(theta.data() + s.beta, s.dim);
    Mat y = hat.array().rowwise() * gamma.array();
    y.rowwise() += beta;
    return y;
  }

  Mat layer_norm_back(const Mat& dy, const Mat& hat, const Vec& rstd, const NormSlot& s, Vec& grad) const {
    Eigen::Map<const RowVector<Scalar>> gamma(theta.data() + s.gamma, s.dim);
    MutMap<Scalar>(grad.data() + s.gamma, 1, s.dim) += (dy.array() * hat.array()).colwise().sum().matrix();
    MutMap<Scalar>(grad.data() + s.beta, 1, s.dim) += dy.colwise().sum();
    const Scalar inv_d = Scalar(1) / static_cast<Scalar>(s.dim);
    const Mat dhat = dy.array().rowwise() * gamma.array();
    const Vec mean_d = dhat.rowwise().sum() * inv_d;
    const Vec mean_dh = (dhat.array() * hat.array()).rowwise().sum().matrix() * inv_d;
    Mat dx = dhat.colwise() - mean_d;
    dx.array() -= hat.array().colwise() * mean_dh.array();
    return dx.array().colwise() * rstd.array();
  }
};

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014327);
  return cdf + x * pdf;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return x * sigmoid(x);
}

template <typename Scalar>
Scalar silu_grad(Scalar x) {
  const Scalar s = sigmoid(x);
  return s * (Scalar(1) + x * (Scalar(1) - s));
}

// Multi-head self-attention over consecutive row blocks of length seq_len.
template <typename Scalar>
Matrix<Scalar> attention_forward(const Matrix<Scalar>& qkv, int heads, Eigen::Index seq_len,
                                 std::vector<Matrix<Scalar>>& probs) {
  const Eigen::Index c = qkv.cols() / 3;
  const Eigen::Index dh = c / heads;
  const Eigen::Index n_seq = qkv.rows() / seq_len;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Matrix<Scalar> out(qkv.rows(), c);
  probs.resize(static_cast<std::size_t>(n_seq * heads));
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(s * seq_len, h * dh, seq_len, dh);
      const auto k = qkv.block(s * seq_len, c + h * dh, seq_len, dh);
      const auto v = qkv.block(s * seq_len, 2 * c + h * dh, seq_len, dh);
      Matrix<Scalar>& p = probs[static_cast<std::size_t>(s * heads + h)];
      p.noalias() = (q * k.transpose()) * scale;
      p.colwise() -= p.rowwise().maxCoeff();
      p = p.array().exp();
      p.array().colwise() /= p.rowwise().sum().array();
      out.block(s * seq_len, h * dh, seq_len, dh).noalias() = p * v;
    }
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> attention_backward(const Matrix<Scalar>& qkv, const Matrix<Scalar>& d_out, int heads,
                                  Eigen::Index seq_len, const std::vector<Matrix<Scalar>>& probs) {
  const Eigen::Index c = qkv.cols() / 3;
  const Eigen::Index dh = c / heads;
  const Eigen::Index n_seq = qkv.rows() / seq_len;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Matrix<Scalar> d_qkv(qkv.rows(), qkv.cols());
  Matrix<Scalar> dp, ds;
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(s * seq_len, h * dh, seq_len, dh);
      const auto k = qkv.block(s * seq_len, c + h * dh, seq_len, dh);
      const auto v = qkv.block(s * seq_len, 2 * c + h * dh, seq_len, dh);
      const auto dout = d_out.block(s * seq_len, h * dh, seq_len, dh);
      const Matrix<Scalar>& p = probs[static_cast<std::size_t>(s * heads + h)];
      dp.noalias() = dout * v.transpose();
      d_qkv.block(s * seq_len, 2 * c + h * dh, seq_len, dh).noalias() = p.transpose() * dout;
      const Vector<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum();
      ds = (p.array() * (dp.colwise() - row_dot).array()) * scale;
      d_qkv.block(s * seq_len, h * dh, seq_len, dh).noalias() = ds * k;
      d_qkv.block(s * seq_len, c + h * dh, seq_len, dh).noalias() = ds.transpose() * q;
    }
  }
  return d_qkv;
}

// Post-norm encoder layer: x -> LN(x + MHA(x)) -> LN(h + FF(h)).
template <typename Scalar>
Matrix<Scalar> transformer_forward(const Ops<Scalar>& ops, const TransformerSlots& slots, int heads,
                                   Eigen::Index seq_len, const Matrix<Scalar>& x,
                                   detail::TransformerTape<Scalar>& tape) {
  tape.x = x;
  tape.qkv = ops.linear(x, slots.qkv);
  tape.attn = attention_forward(tape.qkv, heads, seq_len, tape.probs);
  Matrix<Scalar> a = x + ops.linear(tape.attn, slots.proj);
  tape.h1 = ops.layer_norm(a, slots.ln1, tape.ln1_hat, tape.ln1_rstd);
  tape.ff_pre = ops.linear(tape.h1, slots.ff1);
  tape.ff_act = tape.ff_pre.unaryExpr([](Scalar v) { return gelu(v); });
  Matrix<Scalar> s = tape.h1 + ops.linear(tape.ff_act, slots.ff2);
  return ops.layer_norm(s, slots.ln2, tape.ln2_hat, tape.ln2_rstd);
}

template <typename Scalar>
Matrix<Scalar> transformer_backward(const Ops<Scalar>& ops, const TransformerSlots& slots, int heads,
                                    Eigen::Index seq_len, const detail::TransformerTape<Scalar>& tape,
                                    const Matrix<Scalar>& dy, Vector<Scalar>& grad) {
  const Matrix<Scalar> ds = ops.layer_norm_back(dy, tape.ln2_hat, tape.ln2_rstd, slots.ln2, grad);
  Matrix<Scalar> d_act = ops.linear_back(tape.ff_act, ds, slots.ff2, grad);
  d_act.array() *= tape.ff_pre.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
  Matrix<Scalar> dh1 = ops.linear_back(tape.h1, d_act, slots.ff1, grad);
  dh1 += ds;
  const Matrix<Scalar> da = ops.layer_norm_back(dh1, tape.ln1_hat, tape.ln1_rstd, slots.ln1, grad);
  const Matrix<Scalar> d_attn = ops.linear_back(tape.attn, da, slots.proj, grad);
  const Matrix<Scalar> d_qkv = attention_backward(tape.qkv, d_attn, heads, seq_len, tape.probs);
  Matrix<Scalar> dx = ops.linear_back(tape.x, d_qkv, slots.qkv, grad);
  dx += da;
  return dx;
}

// Token order is feature-major (row = k*W + l); spatial attention runs on the
// time-major order (row = l*K + k).
template <typename Scalar>
Matrix<Scalar> to_time_major(const Matrix<Scalar>& x, Eigen::Index W, Eigen::Index K) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index l = 0; l < W; ++l) out.row(l * K + k) = x.row(k * W + l);
  return out;
}

template <typename Scalar>
Matrix<Scalar> to_feature_major(const Matrix<Scalar>& x, Eigen::Index W, Eigen::Index K) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index k = 0; k < K; ++k)
    for (Eigen::Index l = 0; l < W; ++l) out.row(k * W + l) = x.row(l * K + k);
  return out;
}

template <typename Scalar>
void fill_normal(Vector<Scalar>& theta, Eigen::Index offset, Eigen::Index count, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < count; ++i) theta(offset + i) = static_cast<Scalar>(dist(rng));
}

template <typename Scalar>
void init_linear(Vector<Scalar>& theta, const LinearSlot& s, Rng& rng) {
  fill_normal(theta, s.weight, static_cast<Eigen::Index>(s.in) * s.out, std::sqrt(1.0 / s.in), rng);
}

template <typename Scalar>
void init_norm(Vector<Scalar>& theta, const NormSlot& s) {
  theta.segment(s.gamma, s.dim).setOnes();
}

template <typename Scalar>
void init_transformer(Vector<Scalar>& theta, const TransformerSlots& t, Rng& rng) {
  init_linear(theta, t.qkv, rng);
  init_linear(theta, t.proj, rng);
  init_linear(theta, t.ff1, rng);
  init_linear(theta, t.ff2, rng);
  init_norm(theta, t.ln1);
  init_norm(theta, t.ln2);
}

}  // namespace

template <typename Scalar>
Denoiser<Scalar>::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  layout_ = detail::make_layout(cfg_);
  params_ = ParamVector::Zero(layout_.size);
  init_linear(params_, layout_.input, rng);
  init_linear(params_, layout_.step1, rng);
  init_linear(params_, layout_.step2, rng);
  fill_normal(params_, layout_.policy_embed, 3 * cfg_.step_embed_dim, 1.0, rng);
  fill_normal(params_, layout_.feature_embed, static_cast<Eigen::Index>(cfg_.n_features) * cfg_.feature_embed_dim,
              1.0, rng);
  for (const auto& blk : layout_.blocks) {
    init_linear(params_, blk.step_proj, rng);
    init_linear(params_, blk.side_in, rng);
    if (cfg_.use_temporal) init_transformer(params_, blk.temporal, rng);
    if (cfg_.use_spatial) init_transformer(params_, blk.spatial, rng);
    init_linear(params_, blk.mid, rng);
    init_linear(params_, blk.cond, rng);
    init_linear(params_, blk.out, rng);
  }
  init_linear(params_, layout_.skip, rng);
  // head.output stays zero: the untrained network predicts exactly zero noise.
}

template <typename Scalar>
Denoiser<Scalar>::Denoiser(const DenoiserConfig& cfg, ParamVector params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  layout_ = detail::make_layout(cfg_);
  if (params_.size() != layout_.size)
    throw Error(ErrorCategory::model, "parameter vector has " + std::to_string(params_.size()) +
                                          " entries, config expects " + std::to_string(layout_.size));
  if (!params_.allFinite()) throw Error(ErrorCategory::model, "parameters contain non-finite values");
}

template <typename Scalar>
void Denoiser<Scalar>::check_input(const DenoiserInput<Scalar>& in) const {
  const Eigen::Index W = in.masked_channel.rows();
  const Eigen::Index K = in.masked_channel.cols();
  auto fail = [](const std::string& msg) { throw Error(ErrorCategory::data, "denoiser input: " + msg); };
  if (W < 1 || K < 1) fail("empty window");
  if (in.reference_channel.rows() != W || in.reference_channel.cols() != K || in.mask.rows() != W ||
      in.mask.cols() != K)
    fail("channel/mask shapes differ");
  if (static_cast<Eigen::Index>(in.time_index.size()) != W ||
      static_cast<Eigen::Index>(in.feature_index.size()) != K)
    fail("time_index/feature_index lengths do not match the window");
  for (int f : in.feature_index)
    if (f < 0 || f >= cfg_.n_features)
      fail("feature index " + std::to_string(f) + " outside [0," + std::to_string(cfg_.n_features) + ")");
  if (in.step < 1 || in.step > cfg_.steps) fail("diffusion step " + std::to_string(in.step) + " out of range");
  if (in.policy < 0 || in.policy >= 3) fail("policy id " + std::to_string(in.policy) + " out of range");
}

template <typename Scalar>
Matrix<Scalar> Denoiser<Scalar>::predict_noise(const DenoiserInput<Scalar>& input) const {
  DenoiserTape<Scalar> tape;
  return forward(input, tape);
}

template <typename Scalar>
Matrix<Scalar> Denoiser<Scalar>::forward(const DenoiserInput<Scalar>& in, DenoiserTape<Scalar>& tape) const {
  check_input(in);
  const Ops<Scalar> ops{params_};
  const Eigen::Index W = in.masked_channel.rows();
  const Eigen::Index K = in.masked_channel.cols();
  const Eigen::Index N = W * K;
  const int C = cfg_.hidden_dim;
  tape.W = W;
  tape.K = K;
  tape.policy = in.policy;
  tape.feature_index = in.feature_index;

  // Column-major W x K storage is exactly the feature-major token order.
  tape.x_in.resize(N, 2);
  tape.x_in.col(0) = Eigen::Map<const Vector<Scalar>>(in.masked_channel.data(), N);
  tape.x_in.col(1) = Eigen::Map<const Vector<Scalar>>(in.reference_channel.data(), N);
  tape.in_pre = ops.linear(tape.x_in, layout_.input);
  Matrix<Scalar> x = tape.in_pre.cwiseMax(Scalar(0));

  // Side information: [time encoding | feature embedding | mask].
  const int dt = cfg_.time_embed_dim;
  const int fe = cfg_.feature_embed_dim;
  tape.side.resize(N, cfg_.side_dim());
  ConstMap<Scalar> feat_table(params_.data() + layout_.feature_embed, cfg_.n_features, fe);
  for (Eigen::Index l = 0; l < W; ++l) {
    const RowVector<Scalar> enc = sinusoidal_encoding<Scalar>(in.time_index[static_cast<std::size_t>(l)], dt);
    for (Eigen::Index k = 0; k < K; ++k) tape.side.row(k * W + l).head(dt) = enc;
  }
  for (Eigen::Index k = 0; k < K; ++k) {
    const auto row = feat_table.row(in.feature_index[static_cast<std::size_t>(k)]);
    for (Eigen::Index l = 0; l < W; ++l) {
      tape.side.row(k * W + l).segment(dt, fe) = row;
      tape.side(k * W + l, dt + fe) = in.mask(l, k);
    }
  }

  // Diffusion-step embedding plus masking-policy embedding.
  tape.step_sin = sinusoidal_encoding<Scalar>(in.step, cfg_.step_embed_dim);
  tape.step_pre1 = ops.linear(tape.step_sin, layout_.step1);
  tape.step_act1 = tape.step_pre1.unaryExpr([](Scalar v) { return silu(v); });
  tape.step_pre2 = ops.linear(tape.step_act1, layout_.step2);
  tape.emb = tape.step_pre2.unaryExpr([](Scalar v) { return silu(v); });
  tape.emb += ConstMap<Scalar>(params_.data() + layout_.policy_embed, 3, cfg_.step_embed_dim).row(in.policy);

  const Scalar inv_sqrt2 = Scalar(M_SQRT1_2);
  tape.blocks.resize(layout_.blocks.size());
  tape.skip_sum = Matrix<Scalar>::Zero(N, C);
  for (std::size_t b = 0; b < layout_.blocks.size(); ++b) {
    const auto& slots = layout_.blocks[b];
    auto& bt = tape.blocks[b];
    bt.x = x;
    Matrix<Scalar> y = x;
    y.rowwise() += ops.linear(tape.emb, slots.step_proj).row(0);
    // Side information joins the transformer input so attention is position-aware.
    y.noalias() += tape.side * ops.weight(slots.side_in).transpose();
    y.rowwise() += ops.bias(slots.side_in);
    if (cfg_.use_temporal) y = transformer_forward(ops, slots.temporal, cfg_.n_heads, W, y, bt.temporal);
    if (cfg_.use_spatial) {
      y = to_feature_major(
          transformer_forward(ops, slots.spatial, cfg_.n_heads, K, to_time_major(y, W, K), bt.spatial), W, K);
    }
    bt.mixed = y;
    bt.pre_gate = ops.linear(y, slots.mid);
    bt.pre_gate.noalias() += tape.side * ops.weight(slots.cond).transpose();
    bt.pre_gate.rowwise() += ops.bias(slots.cond);
    bt.gated = bt.pre_gate.leftCols(C).unaryExpr([](Scalar v) { return sigmoid(v); }).cwiseProduct(
        bt.pre_gate.rightCols(C).unaryExpr([](Scalar v) { return std::tanh(v); }));
    const Matrix<Scalar> out = ops.linear(bt.gated, slots.out);
    x = (x + out.leftCols(C)) * inv_sqrt2;
    tape.skip_sum += out.rightCols(C);
  }
  tape.skip_sum /= std::sqrt(static_cast<Scalar>(cfg_.n_blocks));
  tape.head_pre = ops.linear(tape.skip_sum, layout_.skip);
  const Matrix<Scalar> eps = ops.linear(tape.head_pre.cwiseMax(Scalar(0)), layout_.output);
  if (!eps.allFinite())
    throw Error(ErrorCategory::numeric, "denoiser produced non-finite activations at step " + std::to_string(in.step));
  return Eigen::Map<const Matrix<Scalar>>(eps.data(), W, K);
}

template <typename Scalar>
void Denoiser<Scalar>::backward(const DenoiserTape<Scalar>& tape, const Matrix<Scalar>& d_out,
                                ParamVector& grad) const {
  if (grad.size() != params_.size()) grad = ParamVector::Zero(params_.size());
  const Ops<Scalar> ops{params_};
  const Eigen::Index W = tape.W;
  const Eigen::Index K = tape.K;
  const Eigen::Index N = W * K;
  const int C = cfg_.hidden_dim;
  if (d_out.rows() != W || d_out.cols() != K) throw Error(ErrorCategory::data, "backward: gradient shape mismatch");

  const Matrix<Scalar> d_eps = Eigen::Map<const Matrix<Scalar>>(d_out.data(), N, 1);
  const Matrix<Scalar> head_act = tape.head_pre.cwiseMax(Scalar(0));
  Matrix<Scalar> d_head = ops.linear_back(head_act, d_eps, layout_.output, grad);
  d_head = (tape.head_pre.array() > Scalar(0)).select(d_head, Scalar(0));
  Matrix<Scalar> d_skip = ops.linear_back(tape.skip_sum, d_head, layout_.skip, grad);
  d_skip /= std::sqrt(static_cast<Scalar>(cfg_.n_blocks));

  const Scalar inv_sqrt2 = Scalar(M_SQRT1_2);
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(N, C);
  Matrix<Scalar> d_side = Matrix<Scalar>::Zero(N, cfg_.side_dim());
  RowVector<Scalar> d_emb = RowVector<Scalar>::Zero(cfg_.step_embed_dim);
  Matrix<Scalar> d_out_blk(N, 2 * C);
  for (std::size_t bi = layout_.blocks.size(); bi-- > 0;) {
    const auto& slots = layout_.blocks[bi];
    const auto& bt = tape.blocks[bi];
    d_out_blk.leftCols(C) = dx * inv_sqrt2;
    d_out_blk.rightCols(C) = d_skip;
    Matrix<Scalar> d_gated = ops.linear_back(bt.gated, d_out_blk, slots.out, grad);

    const auto gate = bt.pre_gate.leftCols(C).unaryExpr([](Scalar v) { return sigmoid(v); }).eval();
    const auto filt = bt.pre_gate.rightCols(C).unaryExpr([](Scalar v) { return std::tanh(v); }).eval();
    Matrix<Scalar> d_pre(N, 2 * C);
    d_pre.leftCols(C) = d_gated.cwiseProduct(filt).cwiseProduct(gate.cwiseProduct((Scalar(1) - gate.array()).matrix()));
    d_pre.rightCols(C) = d_gated.cwiseProduct(gate).cwiseProduct((Scalar(1) - filt.array().square()).matrix());

    ops.linear_back_params(tape.side, d_pre, slots.cond, grad);
    d_side.noalias() += d_pre * ops.weight(slots.cond);
    Matrix<Scalar> dy = ops.linear_back(bt.mixed, d_pre, slots.mid, grad);
    if (cfg_.use_spatial) {
      dy = to_feature_major(
          transformer_backward(ops, slots.spatial, cfg_.n_heads, K, bt.spatial, to_time_major(dy, W, K), grad), W,
          K);
    }
    if (cfg_.use_temporal) dy = transformer_backward(ops, slots.temporal, cfg_.n_heads, W, bt.temporal, dy, grad);

    const RowVector<Scalar> d_step = dy.colwise().sum();
    d_emb += ops.linear_back(tape.emb, d_step, slots.step_proj, grad);
    ops.linear_back_params(tape.side, dy, slots.side_in, grad);
    d_side.noalias() += dy * ops.weight(slots.side_in);
    dx = dx * inv_sqrt2 + dy;
  }

  // Input projection.
  dx = (tape.in_pre.array() > Scalar(0)).select(dx, Scalar(0));
  ops.linear_back_params(tape.x_in, dx, layout_.input, grad);

  // Feature embedding rows receive the side-channel gradient.
  const int dt = cfg_.time_embed_dim;
  const int fe = cfg_.feature_embed_dim;
  MutMap<Scalar> d_feat(grad.data() + layout_.feature_embed, cfg_.n_features, fe);
  for (Eigen::Index k = 0; k < K; ++k)
    d_feat.row(tape.feature_index[static_cast<std::size_t>(k)]) +=
        d_side.block(k * W, dt, W, fe).colwise().sum();

  // Step and policy embeddings.
  MutMap<Scalar>(grad.data() + layout_.policy_embed, 3, cfg_.step_embed_dim).row(tape.policy) += d_emb;
  RowVector<Scalar> d_pre2 =
      d_emb.cwiseProduct(tape.step_pre2.unaryExpr([](Scalar v) { return silu_grad(v); }));
  RowVector<Scalar> d_act1 = ops.linear_back(tape.step_act1, d_pre2, layout_.step2, grad);
  d_act1 = d_act1.cwiseProduct(tape.step_pre1.unaryExpr([](Scalar v) { return silu_grad(v); }));
  ops.linear_back_params(tape.step_sin, d_act1, layout_.step1, grad);
}

template struct DenoiserInput<float>;
template struct DenoiserInput<double>;
template RowVector<float> sinusoidal_encoding<float>(double, int);
template RowVector<double> sinusoidal_encoding<double>(double, int);
template class Denoiser<float>;
template class Denoiser<double>;

}  // namespace imdiff
