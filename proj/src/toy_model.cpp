#include "avss/toy_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <string>

#include "avss/error.hpp"

namespace avss {

namespace {

using Map = Eigen::Map<Matrix>;
using CMap = Eigen::Map<const Matrix>;
using StridedMap = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;
using StridedCMap = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using RowVecMap = Eigen::Map<RowVec>;
using RowVecCMap = Eigen::Map<const RowVec>;

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
constexpr double kGradClip = 1.0;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
};

struct Offsets {
  std::size_t tok, pos;
  std::vector<LayerOffsets> layers;
  std::size_t lnf_g, lnf_b, head_w, head_b;
};

Offsets resolve_offsets(const ToyCheckpoint& ckpt) {
  auto at = [&](const std::string& name) { return ckpt.info(name).offset; };
  Offsets o{};
  o.tok = at("tok_emb");
  o.pos = at("pos_emb");
  for (std::size_t l = 0; l < ckpt.config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    o.layers.push_back({at(p + "ln1.gain"), at(p + "ln1.bias"), at(p + "attn.qkv.weight"),
                        at(p + "attn.qkv.bias"), at(p + "attn.out.weight"),
                        at(p + "attn.out.bias"), at(p + "ln2.gain"), at(p + "ln2.bias"),
                        at(p + "mlp.fc.weight"), at(p + "mlp.fc.bias"),
                        at(p + "mlp.proj.weight"), at(p + "mlp.proj.bias")});
  }
  o.lnf_g = at("final_ln.gain");
  o.lnf_b = at("final_ln.bias");
  o.head_w = ckpt.config.tie_embeddings ? kNone : at("head.weight");
  o.head_b = at("head.bias");
  return o;
}

// 53-bit uniform in [0, 1).
double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller, one draw per pair. std::normal_distribution is not portable
// across standard libraries, which would break checkpoint determinism.
double standard_normal(std::mt19937_64& rng) {
  const double u1 = static_cast<double>((rng() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double gelu(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

void layer_norm_forward(const Matrix& x, const double* gain, const double* bias, Matrix& xhat,
                        Eigen::VectorXd& rstd, Matrix& y) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  xhat.resize(rows, cols);
  y.resize(rows, cols);
  rstd.resize(rows);
  const RowVecCMap g(gain, cols);
  const RowVecCMap b(bias, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd(r) = inv;
    xhat.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  }
}

// Accumulates d(loss)/dx into dx and the parameter gradients into dgain/dbias.
void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Eigen::VectorXd& rstd,
                         const double* gain, double* dgain, double* dbias, Matrix& dx) {
  const auto cols = dy.cols();
  const RowVecCMap g(gain, cols);
  RowVecMap dg(dgain, cols);
  RowVecMap db(dbias, cols);
  dg.noalias() += dy.cwiseProduct(xhat).colwise().sum();
  db.noalias() += dy.colwise().sum();
  const double inv_cols = 1.0 / static_cast<double>(cols);
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVec dxhat = dy.row(r).cwiseProduct(g);
    const double mean_dxhat = dxhat.sum() * inv_cols;
    const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).sum() * inv_cols;
    dx.row(r).array() +=
        rstd(r) * (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
  }
}

struct LayerCache {
  Matrix xhat1, n1, qkv, att, xhat2, n2, u, a;
  Eigen::VectorXd rstd1, rstd2;
  std::vector<Matrix> probs;  // one causal attention matrix per (sequence, head)
};

// Activations for a batch of `batch` sequences of `len` tokens, stacked row-wise.
struct BatchState {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<Token> inputs;
  std::vector<LayerCache> layers;
  Matrix final_xhat, final_n;
  Eigen::VectorXd final_rstd;
  Matrix logits;
};

// Eigen picks scalar or packet code per element from pointer alignment, so
// results would otherwise depend on where the allocator placed the buffer.
using AlignedBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

bool is_aligned(const double* p) {
  return reinterpret_cast<std::uintptr_t>(p) % EIGEN_MAX_ALIGN_BYTES == 0;
}

const double* aligned_view(const std::vector<double>& values, AlignedBuffer& storage) {
  if (is_aligned(values.data())) return values.data();
  storage.assign(values.begin(), values.end());
  return storage.data();
}

class Engine {
 public:
  explicit Engine(const ToyCheckpoint& ckpt)
      : cfg_(ckpt.config), off_(resolve_offsets(ckpt)), p_(aligned_view(ckpt.parameters, own_)) {}

  CMap param(std::size_t offset, std::size_t rows, std::size_t cols) const {
    return CMap(p_ + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }

  // `keep` retains per-layer caches for a backward pass.
  void forward(BatchState& st, const SkipSet& skip, std::optional<ActivationPoint> capture,
               std::vector<Matrix>* captured, bool keep) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t rows = st.batch * st.len;
    const auto tok = param(off_.tok, cfg_.vocab_size, d);
    const auto pos = param(off_.pos, cfg_.context_len, d);

    Matrix x(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
      x.row(r) = tok.row(st.inputs[r]) + pos.row(r % st.len);
    }

    if (keep) st.layers.assign(cfg_.n_layers, LayerCache{});
    if (captured) captured->clear();
    LayerCache scratch;
    Matrix o, m;
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      if (skip.contains(l)) continue;
      LayerCache& c = keep ? st.layers[l] : scratch;
      block_forward(off_.layers[l], st, x, c, o, m, keep);
      if (captured && capture) {
        switch (*capture) {
          case ActivationPoint::block_output: captured->push_back(x); break;
          case ActivationPoint::attention_output: captured->push_back(o); break;
          case ActivationPoint::mlp_output: captured->push_back(m); break;
        }
      }
    }

    layer_norm_forward(x, p_ + off_.lnf_g, p_ + off_.lnf_b, st.final_xhat, st.final_rstd,
                       st.final_n);
    st.logits.resize(rows, cfg_.vocab_size);
    if (cfg_.tie_embeddings) {
      st.logits.noalias() = st.final_n * tok.transpose();
    } else {
      st.logits.noalias() = st.final_n * param(off_.head_w, d, cfg_.vocab_size);
    }
    st.logits.rowwise() += RowVecCMap(p_ + off_.head_b, cfg_.vocab_size);
  }

  // dlogits is d(loss)/d(logits); gradient is accumulated into `grad`.
  void backward(const BatchState& st, const SkipSet& skip, const Matrix& dlogits,
                double* grad) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t v = cfg_.vocab_size;
    const std::size_t rows = st.batch * st.len;
    const auto tok = param(off_.tok, v, d);

    Matrix dn(rows, d);
    if (cfg_.tie_embeddings) {
      Map(grad + off_.tok, v, d).noalias() += dlogits.transpose() * st.final_n;
      dn.noalias() = dlogits * tok;
    } else {
      Map(grad + off_.head_w, d, v).noalias() += st.final_n.transpose() * dlogits;
      dn.noalias() = dlogits * param(off_.head_w, d, v).transpose();
    }
    RowVecMap(grad + off_.head_b, v).noalias() += dlogits.colwise().sum();

    Matrix dx = Matrix::Zero(rows, d);
    layer_norm_backward(dn, st.final_xhat, st.final_rstd, p_ + off_.lnf_g, grad + off_.lnf_g,
                        grad + off_.lnf_b, dx);

    for (std::size_t l = cfg_.n_layers; l-- > 0;) {
      if (skip.contains(l)) continue;
      block_backward(off_.layers[l], st, st.layers[l], dx, grad);
    }

    Map dtok(grad + off_.tok, v, d);
    Map dpos(grad + off_.pos, cfg_.context_len, d);
    for (std::size_t r = 0; r < rows; ++r) {
      dtok.row(st.inputs[r]) += dx.row(r);
      dpos.row(r % st.len) += dx.row(r);
    }
  }

 private:
  void block_forward(const LayerOffsets& lo, const BatchState& st, Matrix& x, LayerCache& c,
                     Matrix& o, Matrix& m, bool keep) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t h = cfg_.mlp_hidden();

    layer_norm_forward(x, p_ + lo.ln1_g, p_ + lo.ln1_b, c.xhat1, c.rstd1, c.n1);
    c.qkv.resize(x.rows(), 3 * d);
    c.qkv.noalias() = c.n1 * param(lo.qkv_w, d, 3 * d);
    c.qkv.rowwise() += RowVecCMap(p_ + lo.qkv_b, 3 * d);
    attention_forward(st, c, keep);
    o.resize(x.rows(), d);
    o.noalias() = c.att * param(lo.out_w, d, d);
    o.rowwise() += RowVecCMap(p_ + lo.out_b, d);
    x += o;

    layer_norm_forward(x, p_ + lo.ln2_g, p_ + lo.ln2_b, c.xhat2, c.rstd2, c.n2);
    c.u.resize(x.rows(), h);
    c.u.noalias() = c.n2 * param(lo.fc_w, d, h);
    c.u.rowwise() += RowVecCMap(p_ + lo.fc_b, h);
    c.a = c.u.unaryExpr([](double z) { return gelu(z); });
    m.resize(x.rows(), d);
    m.noalias() = c.a * param(lo.proj_w, h, d);
    m.rowwise() += RowVecCMap(p_ + lo.proj_b, d);
    x += m;
  }

  void attention_forward(const BatchState& st, LayerCache& c, bool keep) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t hd = cfg_.head_dim();
    const auto len = static_cast<Eigen::Index>(st.len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    c.att.resize(static_cast<Eigen::Index>(st.batch * st.len), static_cast<Eigen::Index>(d));
    if (keep) c.probs.assign(st.batch * cfg_.n_heads, Matrix());
    Matrix scores(len, len);
    for (std::size_t b = 0; b < st.batch; ++b) {
      const double* base = c.qkv.data() + b * st.len * 3 * d;
      for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
        const StridedCMap q(base + head * hd, len, hd, Eigen::OuterStride<>(3 * d));
        const StridedCMap k(base + d + head * hd, len, hd, Eigen::OuterStride<>(3 * d));
        const StridedCMap val(base + 2 * d + head * hd, len, hd, Eigen::OuterStride<>(3 * d));
        scores.noalias() = q * k.transpose();
        for (Eigen::Index i = 0; i < len; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j) * scale);
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            scores(i, j) = std::exp(scores(i, j) * scale - mx);
            sum += scores(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < len; ++j) scores(i, j) = 0.0;
        }
        StridedMap out(c.att.data() + b * st.len * d + head * hd, len, hd,
                       Eigen::OuterStride<>(d));
        out.noalias() = scores * val;
        if (keep) c.probs[b * cfg_.n_heads + head] = scores;
      }
    }
  }

  void block_backward(const LayerOffsets& lo, const BatchState& st, const LayerCache& c,
                      Matrix& dx, double* grad) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t h = cfg_.mlp_hidden();

    // MLP branch: x2 = x1 + proj(gelu(fc(ln2(x1))))
    Map(grad + lo.proj_w, h, d).noalias() += c.a.transpose() * dx;
    RowVecMap(grad + lo.proj_b, d).noalias() += dx.colwise().sum();
    Matrix du = dx * param(lo.proj_w, h, d).transpose();
    du.array() *= c.u.unaryExpr([](double z) { return gelu_grad(z); }).array();
    Map(grad + lo.fc_w, d, h).noalias() += c.n2.transpose() * du;
    RowVecMap(grad + lo.fc_b, h).noalias() += du.colwise().sum();
    const Matrix dn2 = du * param(lo.fc_w, d, h).transpose();
    layer_norm_backward(dn2, c.xhat2, c.rstd2, p_ + lo.ln2_g, grad + lo.ln2_g, grad + lo.ln2_b,
                        dx);

    // Attention branch: x1 = x + out(attn(qkv(ln1(x))))
    Map(grad + lo.out_w, d, d).noalias() += c.att.transpose() * dx;
    RowVecMap(grad + lo.out_b, d).noalias() += dx.colwise().sum();
    const Matrix datt = dx * param(lo.out_w, d, d).transpose();
    Matrix dqkv(dx.rows(), 3 * d);
    attention_backward(st, c, datt, dqkv);
    Map(grad + lo.qkv_w, d, 3 * d).noalias() += c.n1.transpose() * dqkv;
    RowVecMap(grad + lo.qkv_b, 3 * d).noalias() += dqkv.colwise().sum();
    const Matrix dn1 = dqkv * param(lo.qkv_w, d, 3 * d).transpose();
    layer_norm_backward(dn1, c.xhat1, c.rstd1, p_ + lo.ln1_g, grad + lo.ln1_g, grad + lo.ln1_b,
                        dx);
  }

  void attention_backward(const BatchState& st, const LayerCache& c, const Matrix& datt,
                          Matrix& dqkv) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t hd = cfg_.head_dim();
    const auto len = static_cast<Eigen::Index>(st.len);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Eigen::OuterStride<> qkv_stride(3 * d);
    Matrix dprobs(len, len);
    for (std::size_t b = 0; b < st.batch; ++b) {
      const double* base = c.qkv.data() + b * st.len * 3 * d;
      double* dbase = dqkv.data() + b * st.len * 3 * d;
      for (std::size_t head = 0; head < cfg_.n_heads; ++head) {
        const Matrix& probs = c.probs[b * cfg_.n_heads + head];
        const StridedCMap q(base + head * hd, len, hd, qkv_stride);
        const StridedCMap k(base + d + head * hd, len, hd, qkv_stride);
        const StridedCMap val(base + 2 * d + head * hd, len, hd, qkv_stride);
        const StridedCMap dout(datt.data() + b * st.len * d + head * hd, len, hd,
                               Eigen::OuterStride<>(d));
        StridedMap dq(dbase + head * hd, len, hd, qkv_stride);
        StridedMap dk(dbase + d + head * hd, len, hd, qkv_stride);
        StridedMap dv(dbase + 2 * d + head * hd, len, hd, qkv_stride);

        dv.noalias() = probs.transpose() * dout;
        dprobs.noalias() = dout * val.transpose();
        // softmax backward, then the 1/sqrt(hd) scale
        for (Eigen::Index i = 0; i < len; ++i) {
          const double dot = probs.row(i).dot(dprobs.row(i));
          dprobs.row(i) = probs.row(i).cwiseProduct((dprobs.row(i).array() - dot).matrix());
        }
        dprobs *= scale;
        dq.noalias() = dprobs * k;
        dk.noalias() = dprobs.transpose() * q;
      }
    }
  }

  const ToyModelConfig& cfg_;
  Offsets off_;
  AlignedBuffer own_;
  const double* p_;
};

void check_tokens(const ToyModelConfig& cfg, std::span<const Token> tokens) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= cfg.vocab_size) {
      throw InputError("token " + std::to_string(tokens[i]) + " at position " +
                       std::to_string(i) + " is outside the vocabulary of " +
                       std::to_string(cfg.vocab_size));
    }
  }
}

void check_skip(const ToyModelConfig& cfg, const SkipSet& skip) {
  if (!skip.empty() && *skip.rbegin() >= cfg.n_layers) {
    throw InputError("skip set references layer " + std::to_string(*skip.rbegin()) +
                     " but the model has " + std::to_string(cfg.n_layers) + " layers");
  }
}

// Sum of per-row cross-entropies; fills dlogits with softmax - onehot when
// requested (unscaled).
double cross_entropy_sum(const Matrix& logits, std::span<const Token> targets, Matrix* dlogits) {
  double total = 0.0;
  if (dlogits) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double sum = (logits.row(r).array() - mx).exp().sum();
    const double lse = mx + std::log(sum);
    total += lse - logits(r, targets[r]);
    if (dlogits) {
      dlogits->row(r) = (logits.row(r).array() - lse).exp();
      (*dlogits)(r, targets[r]) -= 1.0;
    }
  }
  return total;
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw UsageError("invalid integer for " + std::string(key) + ": '" + std::string(value) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw UsageError("invalid number for " + std::string(key) + ": '" + std::string(value) + "'");
  }
  return out;
}

}  // namespace

std::vector<Token> bytes_to_tokens(std::string_view text) {
  std::vector<Token> out(text.size());
  std::transform(text.begin(), text.end(), out.begin(),
                 [](char c) { return static_cast<Token>(static_cast<unsigned char>(c)); });
  return out;
}

void ToyModelConfig::validate() const {
  if (vocab_size == 0 || context_len == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 ||
      mlp_ratio == 0 || batch_size == 0) {
    throw DomainError("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw DomainError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw DomainError("learning_rate must be a finite value > 0");
  }
}

void ToyModelConfig::set(std::string_view key, std::string_view value) {
  if (key == "vocab_size") vocab_size = parse_size(key, value);
  else if (key == "context_len") context_len = parse_size(key, value);
  else if (key == "d_model") d_model = parse_size(key, value);
  else if (key == "n_heads") n_heads = parse_size(key, value);
  else if (key == "n_layers") n_layers = parse_size(key, value);
  else if (key == "mlp_ratio") mlp_ratio = parse_size(key, value);
  else if (key == "seed") seed = parse_size(key, value);
  else if (key == "train_steps") train_steps = parse_size(key, value);
  else if (key == "batch_size") batch_size = parse_size(key, value);
  else if (key == "learning_rate") learning_rate = parse_real(key, value);
  else if (key == "tie_embeddings") {
    if (value == "true" || value == "1") tie_embeddings = true;
    else if (value == "false" || value == "0") tie_embeddings = false;
    else throw UsageError("invalid boolean for tie_embeddings: '" + std::string(value) + "'");
  } else {
    throw UsageError("unknown config key '" + std::string(key) + "'");
  }
}

std::vector<ParamInfo> parameter_layout(const ToyModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t h = config.mlp_hidden();
  std::vector<ParamInfo> out;
  std::size_t offset = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    out.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  add("tok_emb", config.vocab_size, d);
  add("pos_emb", config.context_len, d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "ln1.gain", 1, d);
    add(p + "ln1.bias", 1, d);
    add(p + "attn.qkv.weight", d, 3 * d);
    add(p + "attn.qkv.bias", 1, 3 * d);
    add(p + "attn.out.weight", d, d);
    add(p + "attn.out.bias", 1, d);
    add(p + "ln2.gain", 1, d);
    add(p + "ln2.bias", 1, d);
    add(p + "mlp.fc.weight", d, h);
    add(p + "mlp.fc.bias", 1, h);
    add(p + "mlp.proj.weight", h, d);
    add(p + "mlp.proj.bias", 1, d);
  }
  add("final_ln.gain", 1, d);
  add("final_ln.bias", 1, d);
  if (!config.tie_embeddings) add("head.weight", d, config.vocab_size);
  add("head.bias", 1, config.vocab_size);
  return out;
}

const ParamInfo& ToyCheckpoint::info(std::string_view name) const {
  for (const auto& p : layout) {
    if (p.name == name) return p;
  }
  throw InputError("checkpoint has no tensor named '" + std::string(name) + "'");
}

std::span<double> ToyCheckpoint::tensor(std::string_view name) {
  const ParamInfo& p = info(name);
  return std::span<double>(parameters).subspan(p.offset, p.size());
}

std::span<const double> ToyCheckpoint::tensor(std::string_view name) const {
  const ParamInfo& p = info(name);
  return std::span<const double>(parameters).subspan(p.offset, p.size());
}

ToyCheckpoint initialize(const ToyModelConfig& config) {
  ToyCheckpoint ckpt;
  ckpt.config = config;
  ckpt.layout = parameter_layout(config);
  const auto& last = ckpt.layout.back();
  ckpt.parameters.assign(last.offset + last.size(), 0.0);

  std::mt19937_64 rng(config.seed);
  const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  for (const auto& p : ckpt.layout) {
    auto values = std::span<double>(ckpt.parameters).subspan(p.offset, p.size());
    const bool is_gain = p.name.ends_with(".gain");
    const bool is_bias = p.name.ends_with(".bias");
    if (is_gain) {
      std::fill(values.begin(), values.end(), 1.0);
    } else if (!is_bias) {
      const bool is_proj = p.name.ends_with("attn.out.weight") || p.name.ends_with("mlp.proj.weight");
      const double std_dev = is_proj ? proj_std : kInitStd;
      for (double& v : values) v = std_dev * standard_normal(rng);
    }
  }
  return ckpt;
}

std::string model_id(const ToyModelConfig& config) {
  return "toy-v" + std::to_string(config.vocab_size) + "-d" + std::to_string(config.d_model) +
         "-L" + std::to_string(config.n_layers) + "-s" + std::to_string(config.seed);
}

ForwardResult forward(const ToyCheckpoint& ckpt, std::span<const Token> tokens,
                      const SkipSet& skip, std::optional<ActivationPoint> capture) {
  const ToyModelConfig& cfg = ckpt.config;
  if (tokens.empty() || tokens.size() > cfg.context_len) {
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " outside [1, context_len=" + std::to_string(cfg.context_len) + "]");
  }
  check_tokens(cfg, tokens);
  check_skip(cfg, skip);

  const Engine engine(ckpt);
  BatchState st;
  st.batch = 1;
  st.len = tokens.size();
  st.inputs.assign(tokens.begin(), tokens.end());
  std::vector<Matrix> captured;
  engine.forward(st, skip, capture, capture ? &captured : nullptr, false);

  ForwardResult result;
  result.logits = std::move(st.logits);
  if (capture) {
    std::size_t next = 0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      if (skip.contains(l)) continue;
      result.captures.push_back({l, std::move(captured[next++])});
    }
  }
  return result;
}

double batch_loss(const ToyCheckpoint& ckpt, std::span<const Token> windows,
                  std::size_t window_len, std::vector<double>* gradient) {
  const ToyModelConfig& cfg = ckpt.config;
  if (window_len == 0 || window_len > cfg.context_len || windows.empty() ||
      windows.size() % (window_len + 1) != 0) {
    throw InputError("batch must hold whole windows of window_len + 1 tokens");
  }
  check_tokens(cfg, windows);

  BatchState st;
  st.batch = windows.size() / (window_len + 1);
  st.len = window_len;
  std::vector<Token> targets;
  st.inputs.reserve(st.batch * window_len);
  targets.reserve(st.batch * window_len);
  for (std::size_t b = 0; b < st.batch; ++b) {
    const auto w = windows.subspan(b * (window_len + 1), window_len + 1);
    st.inputs.insert(st.inputs.end(), w.begin(), w.end() - 1);
    targets.insert(targets.end(), w.begin() + 1, w.end());
  }

  const Engine engine(ckpt);
  const bool want_grad = gradient != nullptr;
  engine.forward(st, {}, std::nullopt, nullptr, want_grad);
  const double rows = static_cast<double>(targets.size());
  Matrix dlogits;
  const double loss = cross_entropy_sum(st.logits, targets, want_grad ? &dlogits : nullptr) / rows;
  if (want_grad) {
    AlignedBuffer grad(ckpt.parameters.size(), 0.0);
    dlogits /= rows;
    engine.backward(st, {}, dlogits, grad.data());
    gradient->assign(grad.begin(), grad.end());
  }
  return loss;
}

ToyCheckpoint train(const ToyModelConfig& config, std::span<const Token> corpus,
                    const TrainOptions& options) {
  config.validate();
  const std::size_t window = config.context_len + 1;
  if (corpus.size() < window) {
    throw DataError("corpus has " + std::to_string(corpus.size()) + " tokens; need at least " +
                    std::to_string(window));
  }
  check_tokens(config, corpus);

  ToyCheckpoint ckpt = initialize(config);
  const std::size_t n = ckpt.parameters.size();
  std::vector<double> grad, m1(n, 0.0), m2(n, 0.0);
  std::vector<Token> batch(config.batch_size * window);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  const std::uint64_t starts = corpus.size() - window + 1;

  const std::size_t steps = config.train_steps;
  const std::size_t warmup = std::max<std::size_t>(1, steps / 10);
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::uint64_t start = rng() % starts;
      std::copy_n(corpus.begin() + static_cast<std::ptrdiff_t>(start), window,
                  batch.begin() + static_cast<std::ptrdiff_t>(b * window));
    }
    const double loss = batch_loss(ckpt, batch, config.context_len, &grad);
    if (!std::isfinite(loss)) {
      throw DivergenceError("non-finite training loss at step " + std::to_string(step));
    }
    ckpt.train_loss_history.push_back(loss);

    double norm = 0.0;
    for (const double g : grad) norm += g * g;
    norm = std::sqrt(norm);
    const double clip = norm > kGradClip ? kGradClip / norm : 1.0;

    // Linear warmup, then cosine decay to a tenth of the peak rate.
    double lr = config.learning_rate;
    if (step < warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
    } else {
      const double progress = static_cast<double>(step - warmup) /
                              static_cast<double>(std::max<std::size_t>(1, steps - warmup));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kAdamBeta1, t);
    const double c2 = 1.0 - std::pow(kAdamBeta2, t);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i] * clip;
      m1[i] = kAdamBeta1 * m1[i] + (1.0 - kAdamBeta1) * g;
      m2[i] = kAdamBeta2 * m2[i] + (1.0 - kAdamBeta2) * g * g;
      ckpt.parameters[i] -= lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + kAdamEps);
    }
    if (options.on_step) options.on_step(step, loss);
  }
  return ckpt;
}

double perplexity(const ToyCheckpoint& ckpt, std::span<const Token> heldout,
                  const SkipSet& skip) {
  const ToyModelConfig& cfg = ckpt.config;
  const std::size_t t = cfg.context_len;
  if (heldout.size() <= t) {
    throw DataError("held-out text has " + std::to_string(heldout.size()) +
                    " tokens; need more than context_len=" + std::to_string(t));
  }
  check_tokens(cfg, heldout);
  check_skip(cfg, skip);

  const Engine engine(ckpt);
  constexpr std::size_t kWindowsPerBatch = 16;
  const std::size_t predicted = heldout.size() - 1;
  const std::size_t full = predicted / t;
  double total = 0.0;

  auto run = [&](std::size_t first_window, std::size_t count, std::size_t len) {
    BatchState st;
    st.batch = count;
    st.len = len;
    std::vector<Token> targets;
    for (std::size_t w = first_window; w < first_window + count; ++w) {
      const std::size_t start = w * t;
      st.inputs.insert(st.inputs.end(), heldout.begin() + start, heldout.begin() + start + len);
      targets.insert(targets.end(), heldout.begin() + start + 1,
                     heldout.begin() + start + len + 1);
    }
    engine.forward(st, skip, std::nullopt, nullptr, false);
    total += cross_entropy_sum(st.logits, targets, nullptr);
  };

  for (std::size_t w = 0; w < full; w += kWindowsPerBatch) {
    run(w, std::min(kWindowsPerBatch, full - w), t);
  }
  if (const std::size_t rest = predicted - full * t; rest > 0) run(full, 1, rest);
  return std::exp(total / static_cast<double>(predicted));
}

TraceSet capture_traceset(const ToyCheckpoint& ckpt, std::span<const Token> tokens,
                          ActivationPoint point) {
  const ToyModelConfig& cfg = ckpt.config;
  if (tokens.empty()) throw DataError("no tokens to capture activations from");
  const std::size_t d = cfg.d_model;

  std::vector<std::vector<double>> buffers(cfg.n_layers);
  for (auto& b : buffers) b.reserve(tokens.size() * d);
  for (std::size_t start = 0; start < tokens.size(); start += cfg.context_len) {
    const std::size_t len = std::min(cfg.context_len, tokens.size() - start);
    const auto result = forward(ckpt, tokens.subspan(start, len), {}, point);
    for (const auto& cap : result.captures) {
      const Matrix& a = cap.activations;
      buffers[cap.layer_index].insert(buffers[cap.layer_index].end(), a.data(),
                                      a.data() + a.size());
    }
  }

  TraceSet set;
  set.model_id = model_id(cfg);
  set.activation_point = point;
  set.dtype = DType::f64;
  set.creator = "avss toy_transformer";
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    set.layers.push_back({l, tokens.size(), d, std::move(buffers[l])});
  }
  return set;
}

GradientCheckResult gradient_check(const ToyCheckpoint& ckpt, std::span<const Token> windows,
                                   std::size_t window_len, std::span<const std::size_t> indices,
                                   double step) {
  std::vector<double> analytic;
  batch_loss(ckpt, windows, window_len, &analytic);
  ToyCheckpoint probe = ckpt;
  GradientCheckResult result;
  for (const std::size_t i : indices) {
    const double original = probe.parameters[i];
    probe.parameters[i] = original + step;
    const double up = batch_loss(probe, windows, window_len);
    probe.parameters[i] = original - step;
    const double down = batch_loss(probe, windows, window_len);
    probe.parameters[i] = original;
    const double numeric = (up - down) / (2.0 * step);
    const double abs_err = std::abs(analytic[i] - numeric);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradientCheckFloor});
    result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
    result.max_relative_error = std::max(result.max_relative_error, abs_err / denom);
    ++result.checked;
  }
  return result;
}

GradientCheckResult gradient_check(const ToyModelConfig& config, std::size_t max_params,
                                   double step) {
  const ToyCheckpoint ckpt = initialize(config);
  std::mt19937_64 rng(config.seed + 17);
  const std::size_t batch = 2;
  std::vector<Token> windows(batch * (config.context_len + 1));
  for (Token& t : windows) t = static_cast<Token>(rng() % config.vocab_size);

  const std::size_t n = ckpt.parameters.size();
  std::vector<std::size_t> indices;
  const std::size_t stride = (max_params == 0 || n <= max_params) ? 1 : (n + max_params - 1) / max_params;
  for (std::size_t i = 0; i < n; i += stride) indices.push_back(i);
  return gradient_check(ckpt, windows, config.context_len, indices, step);
}

}  // namespace avss
