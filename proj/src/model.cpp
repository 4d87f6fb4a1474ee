#include "xaqa/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace xaqa {

void ModelConfig::validate() const {
  if (vocab_size < tokens::FIRST_REGULAR + 1)
    throw ContractError("ModelConfig: vocab_size must cover the special tokens");
  if (d_model < 1 || n_heads < 1 || n_enc_layers < 1 || n_dec_layers < 1 || d_ff < 1 ||
      max_seq_len < 3 || max_decode_len < 2)
    throw ContractError("ModelConfig: all counts must be positive");
  if (d_model % n_heads != 0) throw ContractError("ModelConfig: d_model must divide into n_heads");
}

bool FusedEncoding::is_context_pos(std::size_t fused) const {
  for (const SegmentBoundary& b : boundaries)
    if (fused >= b.context_begin && fused < b.context_end) return true;
  return false;
}

std::optional<std::pair<int, int>> FusedEncoding::context_position(std::size_t fused) const {
  for (int p = 0; p < static_cast<int>(boundaries.size()); ++p) {
    const SegmentBoundary& b = boundaries[p];
    if (fused >= b.context_begin && fused < b.context_end)
      return std::make_pair(p, static_cast<int>(fused - b.context_begin));
  }
  return std::nullopt;
}

std::optional<std::size_t> FusedEncoding::fused_index(int passage, int offset) const {
  if (passage < 0 || passage >= static_cast<int>(boundaries.size())) return std::nullopt;
  const SegmentBoundary& b = boundaries[passage];
  if (offset < 0 || static_cast<std::size_t>(offset) >= b.context_len()) return std::nullopt;
  return b.context_begin + static_cast<std::size_t>(offset);
}

Tensor sinusoidal_positions(std::size_t len, std::size_t d_model) {
  std::vector<double> values(len * d_model, 0.0);
  for (std::size_t p = 0; p < len; ++p) {
    for (std::size_t i = 0; i * 2 < d_model; ++i) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                 static_cast<double>(d_model));
      const double angle = static_cast<double>(p) * rate;
      values[p * d_model + 2 * i] = std::sin(angle);
      if (2 * i + 1 < d_model) values[p * d_model + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from_values({len, d_model}, std::move(values));
}

FusedEncoding fuse(const std::vector<Tensor>& segments) {
  std::vector<SegmentBoundary> boundaries(segments.size());
  std::size_t offset = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    SegmentBoundary& b = boundaries[i];
    b.begin = offset;
    b.end = offset + segments[i].rows();
    b.question_begin = b.question_end = offset;
    b.has_sep = false;
    b.context_begin = b.begin;
    b.context_end = b.end;
    offset = b.end;
  }
  return fuse(segments, std::move(boundaries));
}

FusedEncoding fuse(const std::vector<Tensor>& segments, std::vector<SegmentBoundary> boundaries) {
  if (segments.empty()) throw ContractError("fuse: need at least one segment");
  FusedEncoding fused;
  fused.states = ops::concat_rows(segments);
  fused.boundaries = std::move(boundaries);
  return fused;
}

namespace {

// One attention head slice: columns [h*dh, (h+1)*dh).
Tensor head_slice(const Tensor& x, int h, int d_head) {
  return ops::slice_cols(x, static_cast<std::size_t>(h) * d_head,
                         static_cast<std::size_t>(h + 1) * d_head);
}

Tensor causal_mask(std::size_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  return Tensor::from_values({t, t}, std::move(m));
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& ff) {
  Tensor h = ops::gelu(ops::add_rowvec(ops::matmul(x, ff.w1), ff.b1));
  return ops::add_rowvec(ops::matmul(h, ff.w2), ff.b2);
}

}  // namespace

Tensor self_attention(const Tensor& x, const AttentionLayer& layer, int n_heads, bool causal) {
  const int d_model = static_cast<int>(x.cols());
  const int d_head = d_model / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d_head));
  Tensor q = ops::matmul(x, layer.wq);
  Tensor k = ops::matmul(x, layer.wk);
  Tensor v = ops::matmul(x, layer.wv);
  Tensor mask;
  if (causal) mask = causal_mask(x.rows());
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    Tensor scores = ops::scale(
        ops::matmul(head_slice(q, h, d_head), ops::transpose(head_slice(k, h, d_head))),
        scale_factor);
    if (causal) scores = ops::add(scores, mask);
    Tensor probs = ops::softmax_rows(scores);
    head_outputs.push_back(ops::matmul(probs, head_slice(v, h, d_head)));
  }
  return ops::matmul(ops::concat_cols(head_outputs), layer.wo);
}

CrossAttentionResult cross_attention(const Tensor& h, const FusedEncoding& fused,
                                     const AttentionLayer& layer, int n_heads, bool record) {
  const int d_model = static_cast<int>(h.cols());
  const int d_head = d_model / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d_head));
  const std::size_t t = h.rows();

  Tensor q = ops::matmul(h, layer.wq);
  Tensor k = ops::matmul(fused.states, layer.wk);
  Tensor v = ops::matmul(fused.states, layer.wv);

  std::vector<Tensor> head_probs;
  std::vector<Tensor> head_outputs;
  head_probs.reserve(n_heads);
  head_outputs.reserve(n_heads);
  for (int head = 0; head < n_heads; ++head) {
    Tensor scores = ops::scale(
        ops::matmul(head_slice(q, head, d_head), ops::transpose(head_slice(k, head, d_head))),
        scale_factor);
    Tensor probs = ops::softmax_rows(scores);  // softmax spans every segment jointly
    head_probs.push_back(probs);
    head_outputs.push_back(ops::matmul(probs, head_slice(v, head, d_head)));
  }

  CrossAttentionResult result;
  result.states = ops::matmul(ops::concat_cols(head_outputs), layer.wo);

  if (record) {
    Tensor avg = head_probs[0];
    for (int head = 1; head < n_heads; ++head) avg = ops::add(avg, head_probs[head]);
    avg = ops::scale(avg, 1.0 / static_cast<double>(n_heads));
    result.probs_avg = avg;

    const std::size_t n = fused.fused_len();
    result.records.resize(t);
    for (std::size_t step = 0; step < t; ++step) {
      AttentionRecord& rec = result.records[step];
      rec.step = static_cast<int>(step);
      rec.probs_per_head.resize(n_heads);
      for (int head = 0; head < n_heads; ++head) {
        auto vals = head_probs[head].values();
        rec.probs_per_head[head].assign(vals.begin() + step * n, vals.begin() + (step + 1) * n);
      }
      auto avals = avg.values();
      rec.probs_avg.assign(avals.begin() + step * n, avals.begin() + (step + 1) * n);
    }
  }
  return result;
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  build_parameters(seed);
}

Tensor Model::param(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng,
                    double std_dev) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.gaussian() * std_dev;
  Tensor t = Tensor::from_values({rows, cols}, std::move(values), /*requires_grad=*/true);
  params_.emplace_back(name, t);
  return t;
}

Tensor Model::const_param(const std::string& name, std::size_t rows, std::size_t cols,
                          double value) {
  Tensor t = Tensor::full({rows, cols}, value, /*requires_grad=*/true);
  params_.emplace_back(name, t);
  return t;
}

void Model::build_parameters(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, 0x6d6f64656cull));  // independent of data streams
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const auto v = static_cast<std::size_t>(cfg_.vocab_size);
  const auto f = static_cast<std::size_t>(cfg_.d_ff);
  const double attn_std = std::sqrt(1.0 / static_cast<double>(d));
  const double ff_in_std = std::sqrt(2.0 / static_cast<double>(d + f));
  const double emb_std = 0.02;

  auto make_ln = [&](const std::string& prefix) {
    LayerNormParams ln;
    ln.gain = const_param(prefix + ".gain", 1, d, 1.0);
    ln.bias = const_param(prefix + ".bias", 1, d, 0.0);
    return ln;
  };
  auto make_attn = [&](const std::string& prefix) {
    AttentionLayer a;
    a.wq = param(prefix + ".wq", d, d, rng, attn_std);
    a.wk = param(prefix + ".wk", d, d, rng, attn_std);
    a.wv = param(prefix + ".wv", d, d, rng, attn_std);
    a.wo = param(prefix + ".wo", d, d, rng, attn_std);
    return a;
  };
  auto make_ff = [&](const std::string& prefix) {
    FeedForwardParams ff;
    ff.w1 = param(prefix + ".w1", d, f, rng, ff_in_std);
    ff.b1 = const_param(prefix + ".b1", 1, f, 0.0);
    ff.w2 = param(prefix + ".w2", f, d, rng, ff_in_std);
    ff.b2 = const_param(prefix + ".b2", 1, d, 0.0);
    return ff;
  };

  token_embedding_ = param("embedding", v, d, rng, emb_std);
  for (int l = 0; l < cfg_.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncoderLayerParams layer;
    layer.ln_attn = make_ln(p + ".ln_attn");
    layer.attn = make_attn(p + ".attn");
    layer.ln_ff = make_ln(p + ".ln_ff");
    layer.ff = make_ff(p + ".ff");
    enc_layers_.push_back(layer);
  }
  enc_final_ln_ = make_ln("enc.final_ln");
  for (int l = 0; l < cfg_.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecoderLayerParams layer;
    layer.ln_self = make_ln(p + ".ln_self");
    layer.self_attn = make_attn(p + ".self");
    layer.ln_cross = make_ln(p + ".ln_cross");
    layer.cross_attn = make_attn(p + ".cross");
    layer.ln_ff = make_ln(p + ".ln_ff");
    layer.ff = make_ff(p + ".ff");
    dec_layers_.push_back(layer);
  }
  dec_final_ln_ = make_ln("dec.final_ln");
  lm_head_ = param("lm_head", d, v, rng, attn_std);
}

Tensor Model::embed(const TokenSeq& ids) const {
  std::vector<int> raw(ids.begin(), ids.end());
  Tensor e = ops::scale(ops::embedding_gather(token_embedding_, raw),
                        std::sqrt(static_cast<double>(cfg_.d_model)));
  return ops::add(e, sinusoidal_positions(ids.size(), cfg_.d_model));
}

Tensor Model::encode_segment(const TokenSeq& question, const TokenSeq& passage,
                             SegmentBoundary* boundary) const {
  const std::size_t lq = question.size();
  if (lq + 2 > static_cast<std::size_t>(cfg_.max_seq_len))
    throw ContractError("encode_segment: question alone exceeds max_seq_len");
  std::size_t lc = passage.size();
  bool truncated = false;
  if (lq + 1 + lc > static_cast<std::size_t>(cfg_.max_seq_len)) {
    lc = static_cast<std::size_t>(cfg_.max_seq_len) - lq - 1;  // drop the passage tail only
    truncated = true;
  }

  TokenSeq seq;
  seq.reserve(lq + 1 + lc);
  seq.insert(seq.end(), question.begin(), question.end());
  seq.push_back(tokens::SEP);
  seq.insert(seq.end(), passage.begin(), passage.begin() + lc);

  Tensor x = embed(seq);
  for (const EncoderLayerParams& layer : enc_layers_) {
    x = ops::add(x, self_attention(ops::layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias),
                                   layer.attn, cfg_.n_heads, /*causal=*/false));
    x = ops::add(x, feed_forward(ops::layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias), layer.ff));
  }
  x = ops::layer_norm(x, enc_final_ln_.gain, enc_final_ln_.bias);

  if (boundary) {
    boundary->begin = 0;
    boundary->end = seq.size();
    boundary->question_begin = 0;
    boundary->question_end = lq;
    boundary->has_sep = true;
    boundary->sep = lq;
    boundary->context_begin = lq + 1;
    boundary->context_end = lq + 1 + lc;
    boundary->truncated = truncated;
    boundary->tokens = seq;
  }
  return x;
}

FusedEncoding Model::encode(const TokenSeq& question, const std::vector<TokenSeq>& passages) const {
  if (passages.empty()) throw ContractError("encode: need at least one passage");
  std::vector<Tensor> segments;
  std::vector<SegmentBoundary> boundaries;
  segments.reserve(passages.size());
  std::size_t offset = 0;
  for (const TokenSeq& passage : passages) {
    SegmentBoundary b;
    segments.push_back(encode_segment(question, passage, &b));
    const std::size_t len = b.end;
    b.begin += offset;
    b.end += offset;
    b.question_begin += offset;
    b.question_end += offset;
    b.sep += offset;
    b.context_begin += offset;
    b.context_end += offset;
    offset += len;
    boundaries.push_back(std::move(b));
  }
  return fuse(segments, std::move(boundaries));
}

DecoderForward Model::decode_forward(const TokenSeq& prefix, const FusedEncoding& fused) const {
  if (prefix.empty() || prefix[0] != tokens::BOS)
    throw ContractError("decode_forward: prefix must start with BOS");
  if (prefix.size() > static_cast<std::size_t>(cfg_.max_decode_len))
    throw ContractError("decode_forward: prefix longer than max_decode_len");

  Tensor x = embed(prefix);
  DecoderForward out;
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    const DecoderLayerParams& layer = dec_layers_[l];
    x = ops::add(x, self_attention(ops::layer_norm(x, layer.ln_self.gain, layer.ln_self.bias),
                                   layer.self_attn, cfg_.n_heads, /*causal=*/true));
    const bool last = (l + 1 == dec_layers_.size());
    CrossAttentionResult cross =
        cross_attention(ops::layer_norm(x, layer.ln_cross.gain, layer.ln_cross.bias), fused,
                        layer.cross_attn, cfg_.n_heads, /*record=*/last);
    x = ops::add(x, cross.states);
    if (last) {
      out.cross_probs_avg = cross.probs_avg;
      out.records = std::move(cross.records);
    }
    x = ops::add(x, feed_forward(ops::layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias), layer.ff));
  }
  x = ops::layer_norm(x, dec_final_ln_.gain, dec_final_ln_.bias);
  out.logits = ops::matmul(x, lm_head_);
  return out;
}

namespace {

constexpr char kMagic[4] = {'X', 'A', 'Q', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw ParseError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw ParseError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  const ModelConfig& c = model.config();
  for (int field : {c.vocab_size, c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers, c.d_ff,
                    c.max_seq_len, c.max_decode_len})
    put_u32(out, static_cast<std::uint32_t>(field));
  put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, tensor] : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(tensor.shape().size()));
    for (std::size_t dim : tensor.shape()) put_u64(out, dim);
    for (double v : tensor.values()) put_f64(out, v);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void Model::save(const std::filesystem::path& path) const { save_checkpoint(path, *this); }

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError("not a checkpoint file: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != kVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  cfg.vocab_size = static_cast<int>(get_u32(in));
  cfg.d_model = static_cast<int>(get_u32(in));
  cfg.n_heads = static_cast<int>(get_u32(in));
  cfg.n_enc_layers = static_cast<int>(get_u32(in));
  cfg.n_dec_layers = static_cast<int>(get_u32(in));
  cfg.d_ff = static_cast<int>(get_u32(in));
  cfg.max_seq_len = static_cast<int>(get_u32(in));
  cfg.max_decode_len = static_cast<int>(get_u32(in));

  Model model(cfg, /*seed=*/0);
  const std::uint32_t count = get_u32(in);
  if (count != model.parameters().size())
    throw ParseError("checkpoint parameter count mismatch");
  for (auto& [name, tensor] : model.parameters()) {
    const std::uint32_t name_len = get_u32(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    if (!in || stored != name) throw ParseError("checkpoint parameter order mismatch at " + name);
    const std::uint32_t rank = get_u32(in);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<std::size_t>(get_u64(in));
    if (shape != tensor.shape()) throw ParseError("checkpoint shape mismatch at " + name);
    auto values = tensor.values_mut();
    for (double& v : values) v = get_f64(in);
  }
  return model;
}

Model Model::load(const std::filesystem::path& path) { return load_checkpoint(path); }

Model Model::clone() const {
  Model copy(cfg_, 0);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto src = params_[i].second.values();
    auto dst = copy.params_[i].second.values_mut();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

}  // namespace xaqa
