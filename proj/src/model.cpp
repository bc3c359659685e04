#include "fedpull/model.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "fedpull/kernels.hpp"
#include "fedpull/rng.hpp"

namespace fedpull {

using kernels::serial::matmul;
using kernels::serial::matmul_at_acc;
using kernels::serial::matmul_bt;

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw Error(std::string(what) + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(d_ffn, "d_ffn");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0) throw Error("d_model not divisible by n_heads");
  if (vocab_size <= kUnk) throw Error("vocab_size must exceed the special ids");
  if (max_len < 3) throw Error("max_len must leave room for BOS and EOS");
}

std::vector<TensorSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  const auto d = static_cast<std::uint32_t>(c.d_model);
  const auto f = static_cast<std::uint32_t>(c.d_ffn);
  const auto v = static_cast<std::uint32_t>(c.vocab_size);
  std::vector<TensorSpec> specs;
  specs.push_back({"emb.tok", {v, d}});
  specs.push_back({"emb.pos", {static_cast<std::uint32_t>(c.max_len), d}});
  auto attn = [&](const std::string& p) {
    for (const char* w : {"wq", "wk", "wv", "wo"})
      specs.push_back({p + "." + w, {d, d}});
  };
  auto ffn = [&](const std::string& p) {
    specs.push_back({p + ".ffn.w1", {d, f}});
    specs.push_back({p + ".ffn.b1", {f}});
    specs.push_back({p + ".ffn.w2", {f, d}});
    specs.push_back({p + ".ffn.b2", {d}});
  };
  auto ln = [&](const std::string& p) {
    specs.push_back({p + ".g", {d}});
    specs.push_back({p + ".b", {d}});
  };
  for (int i = 0; i < c.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    attn(p + ".attn");
    ffn(p);
    ln(p + ".ln1");
    ln(p + ".ln2");
  }
  for (int i = 0; i < c.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    attn(p + ".attn");
    attn(p + ".xattn");
    ffn(p);
    ln(p + ".ln1");
    ln(p + ".ln2");
    ln(p + ".ln3");
  }
  specs.push_back({"out.w", {v, d}});
  specs.push_back({"out.b", {v}});
  std::sort(specs.begin(), specs.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return specs;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& s : parameter_specs(config)) n += shape_numel(s.shape);
  return n;
}

const NamedTensor& ModelState::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("model has no tensor '" + name + "'");
  return it->second;
}

std::size_t ModelState::param_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

std::vector<std::string> ModelState::names() const {
  std::vector<std::string> out;
  out.reserve(tensors.size());
  for (const auto& [name, _] : tensors) out.push_back(name);
  return out;
}

ModelState init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  ModelState m{config, {}};
  // Draw in lexicographic name order so the stream is a pure function of the
  // config.
  for (const auto& spec : parameter_specs(config)) {
    std::vector<float> values(shape_numel(spec.shape), 0.0f);
    const bool is_ln_gain = spec.name.ends_with(".g");
    if (spec.shape.size() == 2) {
      const double s =
          std::sqrt(6.0 / static_cast<double>(spec.shape[0] + spec.shape[1]));
      for (auto& x : values) x = static_cast<float>(rng.uniform(-s, s));
    } else if (is_ln_gain) {
      std::fill(values.begin(), values.end(), 1.0f);
    }
    m.tensors.emplace(spec.name,
                      NamedTensor(spec.name, spec.shape, std::move(values)));
  }
  return m;
}

std::vector<float> flatten(const TensorMap& tensors, const ModelConfig& config) {
  std::vector<float> flat;
  flat.reserve(parameter_count(config));
  for (const auto& spec : parameter_specs(config)) {
    auto it = tensors.find(spec.name);
    if (it == tensors.end()) throw Error("missing tensor '" + spec.name + "'");
    if (it->second.shape() != spec.shape)
      throw Error("tensor '" + spec.name + "' has shape " +
                  shape_string(it->second.shape()) + ", expected " +
                  shape_string(spec.shape));
    auto v = it->second.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

std::vector<float> flatten(const ModelState& model) {
  return flatten(model.tensors, model.config);
}

TensorMap unflatten(std::span<const float> flat, const ModelConfig& config) {
  TensorMap out;
  std::size_t off = 0;
  for (const auto& spec : parameter_specs(config)) {
    const auto n = shape_numel(spec.shape);
    if (off + n > flat.size()) throw Error("flat parameter buffer too short");
    std::vector<float> v(flat.begin() + static_cast<std::ptrdiff_t>(off),
                         flat.begin() + static_cast<std::ptrdiff_t>(off + n));
    out.emplace(spec.name, NamedTensor(spec.name, spec.shape, std::move(v)));
    off += n;
  }
  if (off != flat.size()) throw Error("flat parameter buffer too long");
  return out;
}

namespace {

// ---------------------------------------------------------------------------
// Offsets of every parameter inside the flat buffer.

struct AttnIdx {
  std::size_t wq, wk, wv, wo;
};
struct LnIdx {
  std::size_t g, b;
};
struct FfnIdx {
  std::size_t w1, b1, w2, b2;
};
struct EncIdx {
  AttnIdx attn;
  FfnIdx ffn;
  LnIdx ln1, ln2;
};
struct DecIdx {
  AttnIdx attn, xattn;
  FfnIdx ffn;
  LnIdx ln1, ln2, ln3;
};

struct Index {
  std::size_t tok = 0, pos = 0, out_w = 0, out_b = 0;
  std::vector<EncIdx> enc;
  std::vector<DecIdx> dec;

  explicit Index(const ModelConfig& c) {
    std::map<std::string, std::size_t> at;
    std::size_t off = 0;
    for (const auto& s : parameter_specs(c)) {
      at[s.name] = off;
      off += shape_numel(s.shape);
    }
    tok = at.at("emb.tok");
    pos = at.at("emb.pos");
    out_w = at.at("out.w");
    out_b = at.at("out.b");
    auto attn = [&](const std::string& p) {
      return AttnIdx{at.at(p + ".wq"), at.at(p + ".wk"), at.at(p + ".wv"),
                     at.at(p + ".wo")};
    };
    auto ffn = [&](const std::string& p) {
      return FfnIdx{at.at(p + ".ffn.w1"), at.at(p + ".ffn.b1"),
                    at.at(p + ".ffn.w2"), at.at(p + ".ffn.b2")};
    };
    auto ln = [&](const std::string& p) {
      return LnIdx{at.at(p + ".g"), at.at(p + ".b")};
    };
    for (int i = 0; i < c.enc_layers; ++i) {
      const std::string p = "enc." + std::to_string(i);
      enc.push_back({attn(p + ".attn"), ffn(p), ln(p + ".ln1"), ln(p + ".ln2")});
    }
    for (int i = 0; i < c.dec_layers; ++i) {
      const std::string p = "dec." + std::to_string(i);
      dec.push_back({attn(p + ".attn"), attn(p + ".xattn"), ffn(p),
                     ln(p + ".ln1"), ln(p + ".ln2"), ln(p + ".ln3")});
    }
  }
};

constexpr double kLnEps = 1e-5;

// ---------------------------------------------------------------------------
// Row-wise primitives.

template <typename T>
void layer_norm(const T* x, const T* g, const T* b, T* y, T* xhat, T* rstd,
                std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xr[j] - mean) * rs;
      xhat[r * d + j] = h;
      y[r * d + j] = g[j] * h + b[j];
    }
  }
}

/// Accumulates into dx, dg, db.
template <typename T>
void layer_norm_backward(const T* dy, const T* g, const T* xhat,
                         const T* rstd, T* dx, T* dg, T* db, std::size_t rows,
                         std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * d;
    const T* hr = xhat + r * d;
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T dh = dyr[j] * g[j];
      m1 += dh;
      m2 += dh * hr[j];
      dg[j] += dyr[j] * hr[j];
      db[j] += dyr[j];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const T dh = dyr[j] * g[j];
      dx[r * d + j] += rstd[r] * (dh - m1 - hr[j] * m2);
    }
  }
}

/// Normalization without learned affine; closes the pre-norm residual stream.
template <typename T>
void plain_norm(const T* x, T* xhat, T* rstd, std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) xhat[r * d + j] = (xr[j] - mean) * rs;
  }
}

/// dx = d(plain_norm)/dx applied to dy (overwrites dx).
template <typename T>
void plain_norm_backward(const T* dy, const T* xhat, const T* rstd, T* dx,
                         std::size_t rows, std::size_t d) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * d;
    const T* hr = xhat + r * d;
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      m1 += dyr[j];
      m2 += dyr[j] * hr[j];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx[r * d + j] = rstd[r] * (dyr[j] - m1 - hr[j] * m2);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + static_cast<T>(kGeluA) * x * x * x);
  const T t = std::tanh(u);
  const T du = static_cast<T>(kGeluC) *
               (T(1) + T(3) * static_cast<T>(kGeluA) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
void add_bias(T* y, const T* b, std::size_t rows, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) y[r * m + j] += b[j];
}

template <typename T>
void bias_grad(const T* dy, T* db, std::size_t rows, std::size_t m) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j) db[j] += dy[r * m + j];
}

/// One head of scaled dot-product attention for one sequence. q, k, v, o
/// point at the head's first column of the first row; rows have stride ld.
template <typename T>
void attend(const T* q, const T* k, const T* v, T* probs, T* o, std::size_t lq,
            std::size_t lk, std::size_t ld, std::size_t dh, bool causal) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t i = 0; i < lq; ++i) {
    T* pr = probs + i * lk;
    T* orow = o + i * ld;
    for (std::size_t c = 0; c < dh; ++c) orow[c] = T(0);
    const std::size_t lim = causal ? std::min(i + 1, lk) : lk;
    if (lim == 0) {
      for (std::size_t j = 0; j < lk; ++j) pr[j] = T(0);
      continue;
    }
    const T* qr = q + i * ld;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < lim; ++j) {
      const T* kr = k + j * ld;
      T s = 0;
      for (std::size_t c = 0; c < dh; ++c) s += qr[c] * kr[c];
      s *= scale;
      pr[j] = s;
      mx = std::max(mx, s);
    }
    T sum = 0;
    for (std::size_t j = 0; j < lim; ++j) {
      pr[j] = std::exp(pr[j] - mx);
      sum += pr[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < lim; ++j) pr[j] *= inv;
    for (std::size_t j = lim; j < lk; ++j) pr[j] = T(0);
    for (std::size_t j = 0; j < lim; ++j) {
      const T p = pr[j];
      const T* vr = v + j * ld;
      for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vr[c];
    }
  }
}

/// Accumulates into dq, dk, dv. scratch must hold lk values.
template <typename T>
void attend_backward(const T* q, const T* k, const T* v, const T* probs,
                     const T* dout, T* dq, T* dk, T* dv, T* scratch,
                     std::size_t lq, std::size_t lk, std::size_t ld,
                     std::size_t dh, bool causal) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t i = 0; i < lq; ++i) {
    const std::size_t lim = causal ? std::min(i + 1, lk) : lk;
    const T* pr = probs + i * lk;
    const T* dor = dout + i * ld;
    T dot = 0;
    for (std::size_t j = 0; j < lim; ++j) {
      const T* vr = v + j * ld;
      T* dvr = dv + j * ld;
      T dp = 0;
      for (std::size_t c = 0; c < dh; ++c) {
        dp += dor[c] * vr[c];
        dvr[c] += pr[j] * dor[c];
      }
      scratch[j] = dp;
      dot += pr[j] * dp;
    }
    const T* qr = q + i * ld;
    T* dqr = dq + i * ld;
    for (std::size_t j = 0; j < lim; ++j) {
      const T ds = pr[j] * (scratch[j] - dot) * scale;
      const T* kr = k + j * ld;
      T* dkr = dk + j * ld;
      for (std::size_t c = 0; c < dh; ++c) {
        dqr[c] += ds * kr[c];
        dkr[c] += ds * qr[c];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Packed batch: all sequences concatenated row-wise, no padding.

struct Packing {
  std::vector<std::size_t> off, len;
  std::size_t rows = 0;

  void reset() {
    off.clear();
    len.clear();
    rows = 0;
  }
  void add(std::size_t n) {
    off.push_back(rows);
    len.push_back(n);
    rows += n;
  }
};

template <typename T>
struct LnCache {
  std::vector<T> out, xhat, rstd;
  void resize(std::size_t rows, std::size_t d) {
    out.resize(rows * d);
    xhat.resize(rows * d);
    rstd.resize(rows);
  }
};

template <typename T>
struct AttnCache {
  std::vector<T> q, k, v, probs, o;
};

template <typename T>
struct FfnCache {
  std::vector<T> hpre, hact;
};

template <typename T>
struct EncCache {
  std::vector<T> x_in, x1;
  LnCache<T> ln1, ln2;
  AttnCache<T> att;
  FfnCache<T> ffn;
};

template <typename T>
struct DecCache {
  std::vector<T> x_in, x1, x2;
  LnCache<T> ln1, ln2, ln3;
  AttnCache<T> self, cross;
  FfnCache<T> ffn;
};

template <typename T>
class Network {
 public:
  explicit Network(const ModelConfig& c)
      : c_(c), idx_(c), d_(static_cast<std::size_t>(c.d_model)),
        h_(static_cast<std::size_t>(c.n_heads)), dh_(d_ / h_),
        f_(static_cast<std::size_t>(c.d_ffn)),
        v_(static_cast<std::size_t>(c.vocab_size)), enc_(idx_.enc.size()),
        dec_(idx_.dec.size()) {}

  double forward(std::span<const T> p, std::span<const SentencePair> batch) {
    check_batch(batch);
    src_.reset();
    tgt_.reset();
    src_tokens_.clear();
    dec_tokens_.clear();
    labels_.clear();
    for (const auto& pair : batch) {
      src_.add(pair.source.size());
      tgt_.add(pair.target.size() + 1);
      src_tokens_.insert(src_tokens_.end(), pair.source.begin(),
                         pair.source.end());
      dec_tokens_.push_back(kBos);
      dec_tokens_.insert(dec_tokens_.end(), pair.target.begin(),
                         pair.target.end());
      labels_.insert(labels_.end(), pair.target.begin(), pair.target.end());
      labels_.push_back(kEos);
    }
    encode(p);
    decode(p);

    const std::size_t nt = tgt_.rows;
    logits_.resize(nt * v_);
    matmul_bt(dec_out_.data(), p.data() + idx_.out_w, logits_.data(), nt, d_,
              v_);
    add_bias(logits_.data(), p.data() + idx_.out_b, nt, v_);
    // Softmax in place; loss accumulated in double.
    double loss = 0.0;
    for (std::size_t r = 0; r < nt; ++r) {
      T* lr = logits_.data() + r * v_;
      T mx = lr[0];
      for (std::size_t j = 1; j < v_; ++j) mx = std::max(mx, lr[j]);
      T sum = 0;
      for (std::size_t j = 0; j < v_; ++j) {
        lr[j] = std::exp(lr[j] - mx);
        sum += lr[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < v_; ++j) lr[j] *= inv;
      loss -= std::log(static_cast<double>(
          lr[static_cast<std::size_t>(labels_[r])]));
    }
    return loss / static_cast<double>(nt);
  }

  /// Gradient of the last forward() loss, accumulated into g.
  void backward(std::span<const T> p, std::span<T> g) {
    const std::size_t nt = tgt_.rows;
    const std::size_t ns = src_.rows;
    // dlogits = (softmax - onehot) / nt, reusing the probability buffer.
    std::vector<T> dlogits(logits_);
    const T inv_n = T(1) / static_cast<T>(nt);
    for (std::size_t r = 0; r < nt; ++r) {
      dlogits[r * v_ + static_cast<std::size_t>(labels_[r])] -= T(1);
      for (std::size_t j = 0; j < v_; ++j) dlogits[r * v_ + j] *= inv_n;
    }
    bias_grad(dlogits.data(), g.data() + idx_.out_b, nt, v_);
    // out.w is [V x d]: grad = dlogits^T * dec_out.
    matmul_at_acc(dlogits.data(), dec_out_.data(), g.data() + idx_.out_w, nt,
                  v_, d_);
    std::vector<T> dnorm(nt * d_);
    matmul(dlogits.data(), p.data() + idx_.out_w, dnorm.data(), nt, v_, d_);
    std::vector<T> dx(nt * d_);
    plain_norm_backward(dnorm.data(), dec_out_.data(), dec_rstd_.data(),
                        dx.data(), nt, d_);

    std::vector<T> denc_norm(ns * d_, T(0));
    for (std::size_t l = dec_; l-- > 0;)
      dec_layer_backward(p, g, l, dx, denc_norm);
    embed_backward(g, dec_tokens_, tgt_, dx);

    std::vector<T> denc(ns * d_);
    plain_norm_backward(denc_norm.data(), enc_out_.data(), enc_rstd_.data(),
                        denc.data(), ns, d_);
    for (std::size_t l = enc_; l-- > 0;) enc_layer_backward(p, g, l, denc);
    embed_backward(g, src_tokens_, src_, denc);
  }

  /// Greedy decoding with per-layer key/value caches.
  TokenSeq greedy(std::span<const T> p, const TokenSeq& source) {
    if (source.empty()) return {};
    check_pair(SentencePair{source, {}}, 0);
    src_.reset();
    src_.add(source.size());
    src_tokens_ = source;
    encode(p);
    const std::size_t ls = source.size();
    const std::size_t maxl = static_cast<std::size_t>(c_.max_len);

    std::vector<std::vector<T>> xk(dec_), xv(dec_), sk(dec_), sv(dec_);
    for (std::size_t l = 0; l < dec_; ++l) {
      const auto& a = idx_.dec[l].xattn;
      xk[l].resize(ls * d_);
      xv[l].resize(ls * d_);
      matmul(enc_out_.data(), p.data() + a.wk, xk[l].data(), ls, d_, d_);
      matmul(enc_out_.data(), p.data() + a.wv, xv[l].data(), ls, d_, d_);
      sk[l].resize(maxl * d_);
      sv[l].resize(maxl * d_);
    }
    std::vector<T> x(d_), a(d_), xhat(d_), q(d_), o(d_), z(d_), hpre(f_),
        logits(v_), probs(std::max(maxl, ls));
    T rstd;
    TokenSeq out;
    TokenId tok = kBos;
    for (std::size_t t = 0; t + 1 < maxl; ++t) {
      for (std::size_t j = 0; j < d_; ++j)
        x[j] = p[idx_.tok + static_cast<std::size_t>(tok) * d_ + j] +
               p[idx_.pos + t * d_ + j];
      for (std::size_t l = 0; l < dec_; ++l) {
        const auto& L = idx_.dec[l];
        // self attention
        layer_norm(x.data(), &p[L.ln1.g], &p[L.ln1.b], a.data(), xhat.data(),
                   &rstd, 1, d_);
        matmul(a.data(), &p[L.attn.wq], q.data(), 1, d_, d_);
        matmul(a.data(), &p[L.attn.wk], &sk[l][t * d_], 1, d_, d_);
        matmul(a.data(), &p[L.attn.wv], &sv[l][t * d_], 1, d_, d_);
        for (std::size_t h = 0; h < h_; ++h) {
          // Query row t against cached rows 0..t: non-causal over t+1 keys.
          attend(q.data() + h * dh_, sk[l].data() + h * dh_,
                 sv[l].data() + h * dh_, probs.data(), o.data() + h * dh_, 1,
                 t + 1, d_, dh_, false);
        }
        matmul(o.data(), &p[L.attn.wo], z.data(), 1, d_, d_);
        for (std::size_t j = 0; j < d_; ++j) x[j] += z[j];
        // cross attention
        layer_norm(x.data(), &p[L.ln2.g], &p[L.ln2.b], a.data(), xhat.data(),
                   &rstd, 1, d_);
        matmul(a.data(), &p[L.xattn.wq], q.data(), 1, d_, d_);
        for (std::size_t h = 0; h < h_; ++h)
          attend(q.data() + h * dh_, xk[l].data() + h * dh_,
                 xv[l].data() + h * dh_, probs.data(), o.data() + h * dh_, 1,
                 ls, d_, dh_, false);
        matmul(o.data(), &p[L.xattn.wo], z.data(), 1, d_, d_);
        for (std::size_t j = 0; j < d_; ++j) x[j] += z[j];
        // feed-forward
        layer_norm(x.data(), &p[L.ln3.g], &p[L.ln3.b], a.data(), xhat.data(),
                   &rstd, 1, d_);
        matmul(a.data(), &p[L.ffn.w1], hpre.data(), 1, d_, f_);
        add_bias(hpre.data(), &p[L.ffn.b1], 1, f_);
        for (auto& hv : hpre) hv = gelu(hv);
        matmul(hpre.data(), &p[L.ffn.w2], z.data(), 1, f_, d_);
        add_bias(z.data(), &p[L.ffn.b2], 1, d_);
        for (std::size_t j = 0; j < d_; ++j) x[j] += z[j];
      }
      plain_norm(x.data(), xhat.data(), &rstd, 1, d_);
      matmul_bt(xhat.data(), &p[idx_.out_w], logits.data(), 1, d_, v_);
      add_bias(logits.data(), &p[idx_.out_b], 1, v_);
      std::size_t best = 0;
      for (std::size_t j = 1; j < v_; ++j)
        if (logits[j] > logits[best]) best = j;
      tok = static_cast<TokenId>(best);
      if (tok == kEos) break;
      out.push_back(tok);
    }
    return out;
  }

 private:
  void check_pair(const SentencePair& pair, std::size_t index) const {
    const auto maxl = static_cast<std::size_t>(c_.max_len);
    if (pair.source.size() > maxl)
      throw Error("pair " + std::to_string(index) + ": source length " +
                  std::to_string(pair.source.size()) + " exceeds max_len");
    if (pair.target.size() + 1 > maxl)
      throw Error("pair " + std::to_string(index) + ": target length " +
                  std::to_string(pair.target.size()) +
                  " leaves no room for BOS/EOS");
    auto check = [&](const TokenSeq& s, const char* side) {
      for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i] < 0 || s[i] >= c_.vocab_size)
          throw Error("pair " + std::to_string(index) + ": " + side +
                      " token id " + std::to_string(s[i]) +
                      " out of range at position " + std::to_string(i));
    };
    check(pair.source, "source");
    check(pair.target, "target");
  }

  void check_batch(std::span<const SentencePair> batch) const {
    if (batch.empty()) throw Error("empty batch");
    for (std::size_t i = 0; i < batch.size(); ++i) check_pair(batch[i], i);
  }

  void embed(std::span<const T> p, const TokenSeq& tokens, const Packing& pk,
             std::vector<T>& x) const {
    x.resize(pk.rows * d_);
    for (std::size_t s = 0; s < pk.len.size(); ++s)
      for (std::size_t i = 0; i < pk.len[s]; ++i) {
        const std::size_t r = pk.off[s] + i;
        const T* te =
            p.data() + idx_.tok + static_cast<std::size_t>(tokens[r]) * d_;
        const T* pe = p.data() + idx_.pos + i * d_;
        for (std::size_t j = 0; j < d_; ++j) x[r * d_ + j] = te[j] + pe[j];
      }
  }

  void embed_backward(std::span<T> g, const TokenSeq& tokens,
                      const Packing& pk, const std::vector<T>& dx) const {
    for (std::size_t s = 0; s < pk.len.size(); ++s)
      for (std::size_t i = 0; i < pk.len[s]; ++i) {
        const std::size_t r = pk.off[s] + i;
        T* te = g.data() + idx_.tok + static_cast<std::size_t>(tokens[r]) * d_;
        T* pe = g.data() + idx_.pos + i * d_;
        for (std::size_t j = 0; j < d_; ++j) {
          te[j] += dx[r * d_ + j];
          pe[j] += dx[r * d_ + j];
        }
      }
  }

  static std::size_t prob_size(const Packing& qp, const Packing& kp) {
    std::size_t n = 0;
    for (std::size_t s = 0; s < qp.len.size(); ++s) n += qp.len[s] * kp.len[s];
    return n;
  }

  /// Multi-head attention of q rows (packing qp) over k/v rows (packing kp).
  void mha(AttnCache<T>& a, const Packing& qp, const Packing& kp,
           bool causal) const {
    a.o.assign(qp.rows * d_, T(0));
    a.probs.resize(prob_size(qp, kp) * h_);
    std::size_t pofs = 0;
    for (std::size_t s = 0; s < qp.len.size(); ++s) {
      const std::size_t lq = qp.len[s], lk = kp.len[s];
      for (std::size_t h = 0; h < h_; ++h) {
        attend(a.q.data() + qp.off[s] * d_ + h * dh_,
               a.k.data() + kp.off[s] * d_ + h * dh_,
               a.v.data() + kp.off[s] * d_ + h * dh_, a.probs.data() + pofs,
               a.o.data() + qp.off[s] * d_ + h * dh_, lq, lk, d_, dh_, causal);
        pofs += lq * lk;
      }
    }
  }

  void mha_backward(const AttnCache<T>& a, const Packing& qp,
                    const Packing& kp, bool causal, const std::vector<T>& dout,
                    std::vector<T>& dq, std::vector<T>& dk,
                    std::vector<T>& dv) const {
    dq.assign(qp.rows * d_, T(0));
    dk.assign(kp.rows * d_, T(0));
    dv.assign(kp.rows * d_, T(0));
    std::vector<T> scratch(static_cast<std::size_t>(c_.max_len));
    std::size_t pofs = 0;
    for (std::size_t s = 0; s < qp.len.size(); ++s) {
      const std::size_t lq = qp.len[s], lk = kp.len[s];
      for (std::size_t h = 0; h < h_; ++h) {
        const std::size_t qo = qp.off[s] * d_ + h * dh_;
        const std::size_t ko = kp.off[s] * d_ + h * dh_;
        attend_backward(a.q.data() + qo, a.k.data() + ko, a.v.data() + ko,
                        a.probs.data() + pofs, dout.data() + qo,
                        dq.data() + qo, dk.data() + ko, dv.data() + ko,
                        scratch.data(), lq, lk, d_, dh_, causal);
        pofs += lq * lk;
      }
    }
  }

  void ln_forward(std::span<const T> p, const LnIdx& li, const std::vector<T>& x,
                  LnCache<T>& c, std::size_t rows) const {
    c.resize(rows, d_);
    layer_norm(x.data(), &p[li.g], &p[li.b], c.out.data(), c.xhat.data(),
               c.rstd.data(), rows, d_);
  }

  void ffn_forward(std::span<const T> p, const FfnIdx& fi, const T* a,
                   FfnCache<T>& c, std::vector<T>& x, std::size_t rows) const {
    c.hpre.resize(rows * f_);
    c.hact.resize(rows * f_);
    matmul(a, &p[fi.w1], c.hpre.data(), rows, d_, f_);
    add_bias(c.hpre.data(), &p[fi.b1], rows, f_);
    for (std::size_t i = 0; i < c.hpre.size(); ++i) c.hact[i] = gelu(c.hpre[i]);
    std::vector<T> y(rows * d_);
    matmul(c.hact.data(), &p[fi.w2], y.data(), rows, f_, d_);
    add_bias(y.data(), &p[fi.b2], rows, d_);
    for (std::size_t i = 0; i < y.size(); ++i) x[i] += y[i];
  }

  /// dx is the gradient at the FFN block output (residual stream); on return
  /// it also carries the gradient through the pre-norm input.
  void ffn_backward(std::span<const T> p, std::span<T> g, const FfnIdx& fi,
                    const LnIdx& li, const LnCache<T>& ln, const FfnCache<T>& c,
                    std::vector<T>& dx, std::size_t rows) const {
    bias_grad(dx.data(), &g[fi.b2], rows, d_);
    matmul_at_acc(c.hact.data(), dx.data(), &g[fi.w2], rows, f_, d_);
    std::vector<T> dh(rows * f_);
    matmul_bt(dx.data(), &p[fi.w2], dh.data(), rows, d_, f_);
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gelu_grad(c.hpre[i]);
    bias_grad(dh.data(), &g[fi.b1], rows, f_);
    matmul_at_acc(ln.out.data(), dh.data(), &g[fi.w1], rows, d_, f_);
    std::vector<T> da(rows * d_);
    matmul_bt(dh.data(), &p[fi.w1], da.data(), rows, f_, d_);
    layer_norm_backward(da.data(), &p[li.g], ln.xhat.data(), ln.rstd.data(),
                        dx.data(), &g[li.g], &g[li.b], rows, d_);
  }

  void encode(std::span<const T> p) {
    const std::size_t ns = src_.rows;
    enc_cache_.resize(enc_);
    std::vector<T> x;
    embed(p, src_tokens_, src_, x);
    for (std::size_t l = 0; l < enc_; ++l) {
      const auto& L = idx_.enc[l];
      auto& c = enc_cache_[l];
      c.x_in = x;
      ln_forward(p, L.ln1, x, c.ln1, ns);
      c.att.q.resize(ns * d_);
      c.att.k.resize(ns * d_);
      c.att.v.resize(ns * d_);
      matmul(c.ln1.out.data(), &p[L.attn.wq], c.att.q.data(), ns, d_, d_);
      matmul(c.ln1.out.data(), &p[L.attn.wk], c.att.k.data(), ns, d_, d_);
      matmul(c.ln1.out.data(), &p[L.attn.wv], c.att.v.data(), ns, d_, d_);
      mha(c.att, src_, src_, false);
      std::vector<T> z(ns * d_);
      matmul(c.att.o.data(), &p[L.attn.wo], z.data(), ns, d_, d_);
      for (std::size_t i = 0; i < z.size(); ++i) x[i] += z[i];
      c.x1 = x;
      ln_forward(p, L.ln2, x, c.ln2, ns);
      ffn_forward(p, L.ffn, c.ln2.out.data(), c.ffn, x, ns);
    }
    enc_rstd_.resize(ns);
    enc_out_.resize(ns * d_);
    plain_norm(x.data(), enc_out_.data(), enc_rstd_.data(), ns, d_);
  }

  void decode(std::span<const T> p) {
    const std::size_t nt = tgt_.rows;
    const std::size_t ns = src_.rows;
    dec_cache_.resize(dec_);
    std::vector<T> x;
    embed(p, dec_tokens_, tgt_, x);
    for (std::size_t l = 0; l < dec_; ++l) {
      const auto& L = idx_.dec[l];
      auto& c = dec_cache_[l];
      c.x_in = x;
      ln_forward(p, L.ln1, x, c.ln1, nt);
      c.self.q.resize(nt * d_);
      c.self.k.resize(nt * d_);
      c.self.v.resize(nt * d_);
      matmul(c.ln1.out.data(), &p[L.attn.wq], c.self.q.data(), nt, d_, d_);
      matmul(c.ln1.out.data(), &p[L.attn.wk], c.self.k.data(), nt, d_, d_);
      matmul(c.ln1.out.data(), &p[L.attn.wv], c.self.v.data(), nt, d_, d_);
      mha(c.self, tgt_, tgt_, true);
      std::vector<T> z(nt * d_);
      matmul(c.self.o.data(), &p[L.attn.wo], z.data(), nt, d_, d_);
      for (std::size_t i = 0; i < z.size(); ++i) x[i] += z[i];
      c.x1 = x;

      ln_forward(p, L.ln2, x, c.ln2, nt);
      c.cross.q.resize(nt * d_);
      c.cross.k.resize(ns * d_);
      c.cross.v.resize(ns * d_);
      matmul(c.ln2.out.data(), &p[L.xattn.wq], c.cross.q.data(), nt, d_, d_);
      matmul(enc_out_.data(), &p[L.xattn.wk], c.cross.k.data(), ns, d_, d_);
      matmul(enc_out_.data(), &p[L.xattn.wv], c.cross.v.data(), ns, d_, d_);
      mha(c.cross, tgt_, src_, false);
      matmul(c.cross.o.data(), &p[L.xattn.wo], z.data(), nt, d_, d_);
      for (std::size_t i = 0; i < z.size(); ++i) x[i] += z[i];
      c.x2 = x;

      ln_forward(p, L.ln3, x, c.ln3, nt);
      ffn_forward(p, L.ffn, c.ln3.out.data(), c.ffn, x, nt);
    }
    dec_rstd_.resize(nt);
    dec_out_.resize(nt * d_);
    plain_norm(x.data(), dec_out_.data(), dec_rstd_.data(), nt, d_);
  }

  /// Backward through the output projection of an attention block plus its
  /// q/k/v projections. Returns d(query input) and d(key/value input).
  void attn_block_backward(std::span<const T> p, std::span<T> g,
                           const AttnIdx& ai, const AttnCache<T>& a,
                           const T* q_in, const T* kv_in, const Packing& qp,
                           const Packing& kp, bool causal,
                           const std::vector<T>& dz, std::vector<T>& dq_in,
                           std::vector<T>& dkv_in) const {
    const std::size_t nq = qp.rows, nk = kp.rows;
    matmul_at_acc(a.o.data(), dz.data(), &g[ai.wo], nq, d_, d_);
    std::vector<T> dout(nq * d_);
    matmul_bt(dz.data(), &p[ai.wo], dout.data(), nq, d_, d_);
    std::vector<T> dq, dk, dv;
    mha_backward(a, qp, kp, causal, dout, dq, dk, dv);
    matmul_at_acc(q_in, dq.data(), &g[ai.wq], nq, d_, d_);
    matmul_at_acc(kv_in, dk.data(), &g[ai.wk], nk, d_, d_);
    matmul_at_acc(kv_in, dv.data(), &g[ai.wv], nk, d_, d_);
    dq_in.resize(nq * d_);
    matmul_bt(dq.data(), &p[ai.wq], dq_in.data(), nq, d_, d_);
    std::vector<T> tmp(nk * d_);
    dkv_in.assign(nk * d_, T(0));
    matmul_bt(dk.data(), &p[ai.wk], tmp.data(), nk, d_, d_);
    for (std::size_t i = 0; i < tmp.size(); ++i) dkv_in[i] += tmp[i];
    matmul_bt(dv.data(), &p[ai.wv], tmp.data(), nk, d_, d_);
    for (std::size_t i = 0; i < tmp.size(); ++i) dkv_in[i] += tmp[i];
  }

  void dec_layer_backward(std::span<const T> p, std::span<T> g, std::size_t l,
                          std::vector<T>& dx, std::vector<T>& denc) const {
    const auto& L = idx_.dec[l];
    const auto& c = dec_cache_[l];
    const std::size_t nt = tgt_.rows;
    ffn_backward(p, g, L.ffn, L.ln3, c.ln3, c.ffn, dx, nt);

    // cross attention: query from ln2(x1), keys/values from encoder output
    {
      std::vector<T> dqin, dkv;
      attn_block_backward(p, g, L.xattn, c.cross, c.ln2.out.data(),
                          enc_out_.data(), tgt_, src_, false, dx, dqin, dkv);
      for (std::size_t i = 0; i < dkv.size(); ++i) denc[i] += dkv[i];
      layer_norm_backward(dqin.data(), &p[L.ln2.g], c.ln2.xhat.data(),
                          c.ln2.rstd.data(), dx.data(), &g[L.ln2.g],
                          &g[L.ln2.b], nt, d_);
    }
    // causal self attention
    {
      std::vector<T> dqin, dkv;
      attn_block_backward(p, g, L.attn, c.self, c.ln1.out.data(),
                          c.ln1.out.data(), tgt_, tgt_, true, dx, dqin, dkv);
      for (std::size_t i = 0; i < dkv.size(); ++i) dqin[i] += dkv[i];
      layer_norm_backward(dqin.data(), &p[L.ln1.g], c.ln1.xhat.data(),
                          c.ln1.rstd.data(), dx.data(), &g[L.ln1.g],
                          &g[L.ln1.b], nt, d_);
    }
  }

  void enc_layer_backward(std::span<const T> p, std::span<T> g, std::size_t l,
                          std::vector<T>& dx) const {
    const auto& L = idx_.enc[l];
    const auto& c = enc_cache_[l];
    const std::size_t ns = src_.rows;
    ffn_backward(p, g, L.ffn, L.ln2, c.ln2, c.ffn, dx, ns);
    std::vector<T> dqin, dkv;
    attn_block_backward(p, g, L.attn, c.att, c.ln1.out.data(),
                        c.ln1.out.data(), src_, src_, false, dx, dqin, dkv);
    for (std::size_t i = 0; i < dkv.size(); ++i) dqin[i] += dkv[i];
    layer_norm_backward(dqin.data(), &p[L.ln1.g], c.ln1.xhat.data(),
                        c.ln1.rstd.data(), dx.data(), &g[L.ln1.g], &g[L.ln1.b],
                        ns, d_);
  }

  ModelConfig c_;
  Index idx_;
  std::size_t d_, h_, dh_, f_, v_, enc_, dec_;

  Packing src_, tgt_;
  TokenSeq src_tokens_, dec_tokens_, labels_;
  std::vector<EncCache<T>> enc_cache_;
  std::vector<DecCache<T>> dec_cache_;
  std::vector<T> enc_out_, dec_out_, logits_;  // outputs after plain_norm
  std::vector<T> enc_rstd_, dec_rstd_;
};

}  // namespace

template <typename T>
double loss_and_grad(const ModelConfig& config, std::span<const T> params,
                     std::span<const SentencePair> batch, std::span<T> grad) {
  const auto n = parameter_count(config);
  if (params.size() != n)
    throw Error("parameter buffer has " + std::to_string(params.size()) +
                " values, model needs " + std::to_string(n));
  Network<T> net(config);
  const double loss = net.forward(params, batch);
  if (!grad.empty()) {
    if (grad.size() != n) throw Error("gradient buffer size mismatch");
    net.backward(params, grad);
  }
  return loss;
}

template double loss_and_grad<float>(const ModelConfig&,
                                     std::span<const float>,
                                     std::span<const SentencePair>,
                                     std::span<float>);
template double loss_and_grad<double>(const ModelConfig&,
                                      std::span<const double>,
                                      std::span<const SentencePair>,
                                      std::span<double>);

double forward_loss(const ModelState& model,
                    std::span<const SentencePair> batch) {
  const auto flat = flatten(model);
  return loss_and_grad<float>(model.config, flat, batch, {});
}

TensorMap backward(const ModelState& model,
                   std::span<const SentencePair> batch) {
  const auto flat = flatten(model);
  std::vector<float> grad(flat.size(), 0.0f);
  loss_and_grad<float>(model.config, flat, batch, grad);
  return unflatten(grad, model.config);
}

OptimizerState OptimizerState::adam(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::adam;
  s.learning_rate = lr;
  return s;
}

OptimizerState OptimizerState::sgd(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::sgd;
  s.learning_rate = lr;
  return s;
}

TrainResult train_steps(const ModelState& model, const OptimizerState& opt,
                        std::span<const SentencePair> corpus, int steps,
                        int batch_size, std::uint64_t seed) {
  if (corpus.empty()) throw Error("train_steps: empty corpus");
  if (steps < 0) throw Error("train_steps: negative step count");
  if (batch_size < 1) throw Error("train_steps: batch_size must be >= 1");
  TrainResult result{model, opt, {}};
  if (steps == 0) return result;

  const auto& cfg = model.config;
  std::vector<float> params = flatten(model);
  std::vector<float> grad(params.size());
  std::vector<float> m, v;
  if (opt.kind == OptimizerKind::adam) {
    if (opt.m.empty()) {
      m.assign(params.size(), 0.0f);
      v.assign(params.size(), 0.0f);
    } else {
      m = flatten(opt.m, cfg);
      v = flatten(opt.v, cfg);
    }
  }

  Network<float> net(cfg);
  Rng rng(seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span(order));
  std::size_t cursor = 0;
  std::vector<SentencePair> batch(static_cast<std::size_t>(batch_size));
  result.losses.reserve(static_cast<std::size_t>(steps));

  auto& st = result.optimizer;
  for (int s = 0; s < steps; ++s) {
    for (auto& slot : batch) {
      if (cursor == order.size()) {
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      slot = corpus[order[cursor++]];
    }
    std::fill(grad.begin(), grad.end(), 0.0f);
    result.losses.push_back(net.forward(params, batch));
    net.backward(params, grad);
    ++st.step;
    if (st.kind == OptimizerKind::sgd) {
      const auto lr = static_cast<float>(st.learning_rate);
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    } else {
      const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
      const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
      const auto b1 = static_cast<float>(st.beta1);
      const auto b2 = static_cast<float>(st.beta2);
      const auto step_size = static_cast<float>(st.learning_rate / bc1);
      const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
      const auto eps = static_cast<float>(st.eps);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0f - b2) * grad[i] * grad[i];
        params[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
      }
    }
  }
  result.model.tensors = unflatten(params, cfg);
  if (st.kind == OptimizerKind::adam) {
    st.m = unflatten(m, cfg);
    st.v = unflatten(v, cfg);
  }
  return result;
}

TokenSeq greedy_decode(const ModelState& model, const TokenSeq& source) {
  const auto flat = flatten(model);
  Network<float> net(model.config);
  return net.greedy(flat, source);
}

std::vector<TokenSeq> greedy_decode_all(const ModelState& model,
                                        std::span<const TokenSeq> sources) {
  const auto flat = flatten(model);
  Network<float> net(model.config);
  std::vector<TokenSeq> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(net.greedy(flat, s));
  return out;
}

void write_checkpoint(std::ostream& out, const ModelState& model) {
  const auto& c = model.config;
  out << "vocab_size=" << c.vocab_size << '\n'
      << "d_model=" << c.d_model << '\n'
      << "n_heads=" << c.n_heads << '\n'
      << "enc_layers=" << c.enc_layers << '\n'
      << "dec_layers=" << c.dec_layers << '\n'
      << "d_ffn=" << c.d_ffn << '\n'
      << "max_len=" << c.max_len << '\n'
      << "seed=" << c.seed << '\n'
      << '\n';
  for (const auto& [_, t] : model.tensors) write_tensor(out, t);
  if (!out) throw Error("failed writing checkpoint");
}

ModelState read_checkpoint(std::istream& in) {
  ModelState m;
  std::string line;
  bool terminated = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      terminated = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error("bad checkpoint header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto as_int = [&] { return std::stoi(val); };
    if (key == "vocab_size") m.config.vocab_size = as_int();
    else if (key == "d_model") m.config.d_model = as_int();
    else if (key == "n_heads") m.config.n_heads = as_int();
    else if (key == "enc_layers") m.config.enc_layers = as_int();
    else if (key == "dec_layers") m.config.dec_layers = as_int();
    else if (key == "d_ffn") m.config.d_ffn = as_int();
    else if (key == "max_len") m.config.max_len = as_int();
    else if (key == "seed") m.config.seed = std::stoull(val);
    else throw Error("unknown checkpoint header key '" + key + "'");
  }
  if (!terminated) throw Error("checkpoint header not terminated");
  m.config.validate();
  for (const auto& spec : parameter_specs(m.config)) {
    auto t = read_tensor(in);
    if (t.name() != spec.name || t.shape() != spec.shape)
      throw Error("checkpoint tensor '" + t.name() + "' does not match '" +
                  spec.name + "'");
    m.tensors.emplace(spec.name, std::move(t));
  }
  return m;
}

}  // namespace fedpull
