#include "softpipe/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "softpipe/tasks.hpp"

namespace softpipe {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ContractError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers_enc, "n_layers_enc");
  positive(n_layers_dec, "n_layers_dec");
  positive(ffn_dim, "ffn_dim");
  positive(max_src_len, "max_src_len");
  positive(max_tgt_len, "max_tgt_len");
  if (d_model % n_heads != 0) throw ContractError("model config: n_heads must divide d_model");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("model config: dropout must be in [0,1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},           {"n_layers_enc", c.n_layers_enc},
                     {"n_layers_dec", c.n_layers_dec}, {"ffn_dim", c.ffn_dim},
                     {"max_src_len", c.max_src_len},   {"max_tgt_len", c.max_tgt_len},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<int>();
    else if (key == "d_model") c.d_model = value.get<int>();
    else if (key == "n_heads") c.n_heads = value.get<int>();
    else if (key == "n_layers_enc") c.n_layers_enc = value.get<int>();
    else if (key == "n_layers_dec") c.n_layers_dec = value.get<int>();
    else if (key == "ffn_dim") c.ffn_dim = value.get<int>();
    else if (key == "max_src_len") c.max_src_len = value.get<int>();
    else if (key == "max_tgt_len") c.max_tgt_len = value.get<int>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else throw FormatError("model config: unknown key '" + key + "'");
  }
}

const char* to_string(StopReason r) {
  return r == StopReason::Eos ? "eos" : "max-length";
}

template <typename T>
int argmax_token(std::span<const T> probs) {
  int best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

namespace {

template <typename T>
Tensor<T> random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {random_normal<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng),
          Tensor<T>::zeros({out}, true)};
}

template <typename T>
Norm<T> make_norm(std::size_t n) {
  return {Tensor<T>::full({n}, T(1), true), Tensor<T>::zeros({n}, true)};
}

template <typename T>
Attention<T> make_attention(std::size_t d, std::mt19937_64& rng) {
  Attention<T> a;
  a.query = make_linear<T>(d, d, rng);
  a.key = make_linear<T>(d, d, rng);
  a.value = make_linear<T>(d, d, rng);
  a.output = make_linear<T>(d, d, rng);
  return a;
}

template <typename T>
void visit_linear(Linear<T>& l, const std::string& prefix, const typename Seq2SeqModel<T>::ParamVisitor& fn) {
  fn(prefix + ".weight", l.weight);
  fn(prefix + ".bias", l.bias);
}

template <typename T>
void visit_norm(Norm<T>& n, const std::string& prefix, const typename Seq2SeqModel<T>::ParamVisitor& fn) {
  fn(prefix + ".gain", n.gain);
  fn(prefix + ".bias", n.bias);
}

template <typename T>
void visit_attention(Attention<T>& a, const std::string& prefix,
                     const typename Seq2SeqModel<T>::ParamVisitor& fn) {
  visit_linear(a.query, prefix + ".query", fn);
  visit_linear(a.key, prefix + ".key", fn);
  visit_linear(a.value, prefix + ".value", fn);
  visit_linear(a.output, prefix + ".output", fn);
}

}  // namespace

template <typename T>
Seq2SeqModel<T>::Seq2SeqModel(ModelConfig config, std::uint64_t seed) : config_(config), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto v = static_cast<std::size_t>(config_.vocab_size);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  embedding_ = random_normal<T>({d, v}, 0.25 / std::sqrt(static_cast<double>(d)), rng);
  output_bias_ = Tensor<T>::zeros({v}, true);
  for (int i = 0; i < config_.n_layers_enc; ++i) {
    EncoderLayer<T> layer;
    layer.norm_attn = make_norm<T>(d);
    layer.self_attn = make_attention<T>(d, rng);
    layer.norm_ffn = make_norm<T>(d);
    layer.ffn_in = make_linear<T>(d, f, rng);
    layer.ffn_out = make_linear<T>(f, d, rng);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = make_norm<T>(d);
  for (int i = 0; i < config_.n_layers_dec; ++i) {
    DecoderLayer<T> layer;
    layer.norm_self = make_norm<T>(d);
    layer.self_attn = make_attention<T>(d, rng);
    layer.norm_cross = make_norm<T>(d);
    layer.cross_attn = make_attention<T>(d, rng);
    layer.norm_ffn = make_norm<T>(d);
    layer.ffn_in = make_linear<T>(d, f, rng);
    layer.ffn_out = make_linear<T>(f, d, rng);
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = make_norm<T>(d);

  max_positions_ = static_cast<std::size_t>(std::max(config_.max_src_len, config_.max_tgt_len + 2));
  positions_.assign(max_positions_ * d, T(0));
  for (std::size_t pos = 0; pos < max_positions_; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      positions_[pos * d + i] = static_cast<T>(std::sin(static_cast<double>(pos) * freq));
      if (i + 1 < d) positions_[pos * d + i + 1] = static_cast<T>(std::cos(static_cast<double>(pos) * freq));
    }
  }
}

template <typename T>
Seq2SeqModel<T> Seq2SeqModel<T>::clone() const {
  Seq2SeqModel copy(config_, 0);
  auto& self = const_cast<Seq2SeqModel&>(*this);
  std::vector<Tensor<T>> source;
  self.visit_parameters([&](const std::string&, Tensor<T>& p) { source.push_back(p); });
  std::size_t i = 0;
  copy.visit_parameters([&](const std::string&, Tensor<T>& p) {
    auto src = source[i].data();
    std::copy(src.begin(), src.end(), p.mutable_data().begin());
    p.set_requires_grad(source[i].requires_grad());
    ++i;
  });
  copy.training_ = training_;
  copy.dropout_rng_ = dropout_rng_;
  return copy;
}

template <typename T>
void Seq2SeqModel<T>::visit_parameters(const ParamVisitor& fn) {
  fn("embedding", embedding_);
  fn("output_bias", output_bias_);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    auto& l = encoder_[i];
    visit_norm(l.norm_attn, p + ".norm_attn", fn);
    visit_attention(l.self_attn, p + ".self_attn", fn);
    visit_norm(l.norm_ffn, p + ".norm_ffn", fn);
    visit_linear(l.ffn_in, p + ".ffn_in", fn);
    visit_linear(l.ffn_out, p + ".ffn_out", fn);
  }
  visit_norm(encoder_norm_, "encoder.norm", fn);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    auto& l = decoder_[i];
    visit_norm(l.norm_self, p + ".norm_self", fn);
    visit_attention(l.self_attn, p + ".self_attn", fn);
    visit_norm(l.norm_cross, p + ".norm_cross", fn);
    visit_attention(l.cross_attn, p + ".cross_attn", fn);
    visit_norm(l.norm_ffn, p + ".norm_ffn", fn);
    visit_linear(l.ffn_in, p + ".ffn_in", fn);
    visit_linear(l.ffn_out, p + ".ffn_out", fn);
  }
  visit_norm(decoder_norm_, "decoder.norm", fn);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> Seq2SeqModel<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  visit_parameters([&](const std::string& name, Tensor<T>& p) { out.emplace_back(name, p); });
  return out;
}

template <typename T>
std::size_t Seq2SeqModel<T>::parameter_count() {
  std::size_t n = 0;
  visit_parameters([&](const std::string&, Tensor<T>& p) { n += p.numel(); });
  return n;
}

template <typename T>
void Seq2SeqModel<T>::set_trainable(bool on) {
  visit_parameters([on](const std::string&, Tensor<T>& p) { p.set_requires_grad(on); });
}

template <typename T>
void Seq2SeqModel<T>::zero_grad() {
  visit_parameters([](const std::string&, Tensor<T>& p) { p.zero_grad(); });
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::linear(const Linear<T>& l, const Tensor<T>& x) const {
  return add_bias(matmul(x, l.weight), l.bias);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::norm(const Norm<T>& n, const Tensor<T>& x) const {
  return layer_norm(x, n.gain, n.bias);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::maybe_dropout(const Tensor<T>& x) const {
  if (!training_ || config_.dropout == 0.0) return x;
  return dropout(x, static_cast<T>(config_.dropout), dropout_rng_);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::embed(const TokenIds& tokens) const {
  return embedding_lookup(embedding_, tokens);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::add_positions(const Tensor<T>& embeddings) const {
  const std::size_t len = embeddings.dim(0);
  const auto d = static_cast<std::size_t>(config_.d_model);
  if (embeddings.rank() != 2 || embeddings.dim(1) != d) {
    throw DimensionError("model: input embeddings " + shape_str(embeddings.shape()) + " do not have width " +
                         std::to_string(d));
  }
  if (len > max_positions_) {
    throw ContractError("model: sequence of " + std::to_string(len) + " exceeds " +
                        std::to_string(max_positions_) + " positions");
  }
  std::vector<T> pe(positions_.begin(), positions_.begin() + static_cast<std::ptrdiff_t>(len * d));
  Tensor<T> scaled = scale(embeddings, static_cast<T>(std::sqrt(static_cast<double>(d))));
  return maybe_dropout(add(scaled, Tensor<T>::from({len, d}, std::move(pe))));
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::attend(const Attention<T>& attn, const Tensor<T>& queries, const Tensor<T>& keys,
                                  const Tensor<T>& values, bool causal) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto heads = static_cast<std::size_t>(config_.n_heads);
  const std::size_t dh = d / heads;
  const std::size_t lq = queries.dim(0), lk = keys.dim(0);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> q = linear(attn.query, queries);
  Tensor<T> mask;
  if (causal) {
    std::vector<T> m(lq * lk, T(0));
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t j = i + 1; j < lk; ++j) m[i * lk + j] = T(-1e9);
    mask = Tensor<T>::from({lq, lk}, std::move(m));
  }
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor<T> qh = heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    Tensor<T> kh = heads == 1 ? keys : slice(keys, 1, h * dh, (h + 1) * dh);
    Tensor<T> vh = heads == 1 ? values : slice(values, 1, h * dh, (h + 1) * dh);
    Tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (causal) scores = add(scores, mask);
    outs.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor<T> merged = heads == 1 ? outs.front() : concatenate(outs, 1);
  return linear(attn.output, merged);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::encoder_stack(Tensor<T> x) const {
  for (const auto& layer : encoder_) {
    Tensor<T> h = norm(layer.norm_attn, x);
    Tensor<T> a = attend(layer.self_attn, h, linear(layer.self_attn.key, h), linear(layer.self_attn.value, h), false);
    x = add(x, maybe_dropout(a));
    h = norm(layer.norm_ffn, x);
    Tensor<T> f = linear(layer.ffn_out, gelu(linear(layer.ffn_in, h)));
    x = add(x, maybe_dropout(f));
  }
  return norm(encoder_norm_, x);
}

template <typename T>
EncoderOutput<T> Seq2SeqModel<T>::encode(const TokenIds& src) const {
  const auto cap = static_cast<std::size_t>(config_.max_src_len);
  if (src.size() > cap) {
    TokenIds clipped(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(cap));
    EncoderOutput<T> out = encode_embeddings(embedding_lookup(embedding_, clipped));
    out.truncated = true;
    return out;
  }
  return encode_embeddings(embedding_lookup(embedding_, src));
}

template <typename T>
EncoderOutput<T> Seq2SeqModel<T>::encode_embeddings(const Tensor<T>& embeddings) const {
  if (embeddings.rank() != 2) {
    throw DimensionError("encode: embeddings must be [len x D], got " + shape_str(embeddings.shape()));
  }
  const auto cap = static_cast<std::size_t>(config_.max_src_len);
  EncoderOutput<T> out;
  Tensor<T> x = embeddings;
  if (x.dim(0) > cap) {
    x = slice(x, 0, 0, cap);
    out.truncated = true;
  }
  out.states = encoder_stack(add_positions(x));
  return out;
}

template <typename T>
DecoderMemory<T> Seq2SeqModel<T>::memory(const Tensor<T>& encoder_states) const {
  DecoderMemory<T> mem;
  for (const auto& layer : decoder_) {
    mem.keys.push_back(linear(layer.cross_attn.key, encoder_states));
    mem.values.push_back(linear(layer.cross_attn.value, encoder_states));
  }
  return mem;
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::decoder_stack(const DecoderMemory<T>& mem, const TokenIds& inputs) const {
  Tensor<T> x = add_positions(embedding_lookup(embedding_, inputs));
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& layer = decoder_[i];
    Tensor<T> h = norm(layer.norm_self, x);
    Tensor<T> a = attend(layer.self_attn, h, linear(layer.self_attn.key, h), linear(layer.self_attn.value, h), true);
    x = add(x, maybe_dropout(a));
    h = norm(layer.norm_cross, x);
    x = add(x, maybe_dropout(attend(layer.cross_attn, h, mem.keys[i], mem.values[i], false)));
    h = norm(layer.norm_ffn, x);
    Tensor<T> f = linear(layer.ffn_out, gelu(linear(layer.ffn_in, h)));
    x = add(x, maybe_dropout(f));
  }
  return norm(decoder_norm_, x);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::decode_teacher_forced(const DecoderMemory<T>& mem, const TokenIds& tgt, int lang_tag) const {
  if (tgt.empty() || tgt.front() != lang_tag) {
    throw ContractError("forward_teacher_forced: target must begin with language tag " + std::to_string(lang_tag));
  }
  if (tgt.size() > static_cast<std::size_t>(config_.max_tgt_len) + 1) {
    throw ContractError("forward_teacher_forced: target of " + std::to_string(tgt.size()) +
                        " tokens exceeds max_tgt_len + 1 = " + std::to_string(config_.max_tgt_len + 1));
  }
  TokenIds inputs;
  inputs.reserve(tgt.size());
  inputs.push_back(vocab::kBos);
  inputs.insert(inputs.end(), tgt.begin(), tgt.end() - 1);
  Tensor<T> h = decoder_stack(mem, inputs);
  return log_softmax(add_bias(matmul(h, embedding_), output_bias_), 1);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::forward_teacher_forced(const TokenIds& src, const TokenIds& tgt, int lang_tag) const {
  return decode_teacher_forced(memory(encode(src).states), tgt, lang_tag);
}

template <typename T>
Tensor<T> Seq2SeqModel<T>::forward_teacher_forced(const Tensor<T>& src_embeddings, const TokenIds& tgt,
                                                  int lang_tag) const {
  return decode_teacher_forced(memory(encode_embeddings(src_embeddings).states), tgt, lang_tag);
}

template <typename T>
GreedyDecodeResult<T> Seq2SeqModel<T>::decode_greedy(const DecoderMemory<T>& mem, int lang_tag,
                                                     std::size_t max_len) const {
  GreedyDecodeResult<T> result;
  const std::size_t cap = std::min(max_len, static_cast<std::size_t>(config_.max_tgt_len));
  const auto d = static_cast<std::size_t>(config_.d_model);
  TokenIds prefix{vocab::kBos, lang_tag};
  for (std::size_t step = 0; step < cap; ++step) {
    Tensor<T> h = decoder_stack(mem, prefix);
    Tensor<T> last = reshape(select_row(h, prefix.size() - 1), {1, d});
    Tensor<T> probs = softmax(add_bias(matmul(last, embedding_), output_bias_), 1);
    probs = reshape(probs, {static_cast<std::size_t>(config_.vocab_size)});
    const int token = argmax_token<T>(probs.data());
    result.tokens.push_back(token);
    result.prob_vectors.push_back(std::move(probs));
    if (token == vocab::kEos) {
      result.stop_reason = StopReason::Eos;
      return result;
    }
    prefix.push_back(token);
  }
  result.stop_reason = StopReason::MaxLength;
  return result;
}

template <typename T>
GreedyDecodeResult<T> Seq2SeqModel<T>::greedy_decode(const TokenIds& src, int lang_tag, std::size_t max_len) const {
  return decode_greedy(memory(encode(src).states), lang_tag, max_len);
}

template <typename T>
GreedyDecodeResult<T> Seq2SeqModel<T>::greedy_decode(const Tensor<T>& src_embeddings, int lang_tag,
                                                     std::size_t max_len) const {
  return decode_greedy(memory(encode_embeddings(src_embeddings).states), lang_tag, max_len);
}

template <typename T>
Tensor<T> sequence_nll(const Tensor<T>& log_probs, const TokenIds& tgt) {
  std::vector<bool> mask(tgt.size(), true);
  if (!mask.empty()) mask[0] = false;
  return cross_entropy(log_probs, tgt, mask);
}

template <typename T>
std::pair<std::size_t, std::size_t> teacher_forced_hits(const Tensor<T>& log_probs, const TokenIds& tgt) {
  const std::size_t v = log_probs.dim(1);
  std::size_t hits = 0;
  for (std::size_t t = 1; t < tgt.size(); ++t) {
    const int best = argmax_token<T>(log_probs.data().subspan(t * v, v));
    hits += best == tgt[t];
  }
  return {hits, tgt.empty() ? 0 : tgt.size() - 1};
}

template class Seq2SeqModel<float>;
template class Seq2SeqModel<double>;
template int argmax_token<float>(std::span<const float>);
template int argmax_token<double>(std::span<const double>);
template Tensor<float> sequence_nll<float>(const Tensor<float>&, const TokenIds&);
template Tensor<double> sequence_nll<double>(const Tensor<double>&, const TokenIds&);
template std::pair<std::size_t, std::size_t> teacher_forced_hits<float>(const Tensor<float>&, const TokenIds&);
template std::pair<std::size_t, std::size_t> teacher_forced_hits<double>(const Tensor<double>&, const TokenIds&);

// ---- checkpoints ------------------------------------------------------------

std::uint64_t fingerprint(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << v;
  return out.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const std::string& in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

void check_config_field(const nlohmann::json& stored, const nlohmann::json& expected) {
  for (const auto& [key, value] : expected.items()) {
    if (!stored.contains(key) || stored.at(key) != value) {
      throw FormatError("checkpoint: config field '" + key + "' is " +
                        (stored.contains(key) ? stored.at(key).dump() : std::string("missing")) + ", expected " +
                        value.dump());
    }
  }
}

}  // namespace

std::string write_framed_header(const nlohmann::json& header) {
  const std::string text = header.dump();
  std::string out = std::string(kCheckpointMagic) + "\n";
  put_u64(out, text.size());
  out += text;
  return out;
}

FramedHeader read_framed_header(const std::string& bytes) {
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw FormatError("checkpoint: missing SOFTPIPE1 magic");
  if (bytes.size() < magic.size() + 8) throw FormatError("checkpoint: truncated header");
  const std::uint64_t header_len = get_u64(bytes, magic.size());
  const std::size_t header_at = magic.size() + 8;
  if (bytes.size() < header_at + header_len) throw FormatError("checkpoint: truncated header");
  FramedHeader out;
  try {
    out.header = nlohmann::json::parse(bytes.substr(header_at, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  out.payload_at = header_at + header_len;
  return out;
}

std::string serialize_model(Seq2SeqModel<float>& model) {
  nlohmann::json params = nlohmann::json::array();
  model.visit_parameters([&](const std::string& name, Tensor<float>& p) {
    params.push_back({{"name", name}, {"shape", p.shape()}});
  });
  const nlohmann::json header{{"kind", "model"},
                              {"version", kCheckpointVersion},
                              {"config", model.config()},
                              {"parameters", params}};
  std::string out = write_framed_header(header);
  model.visit_parameters([&](const std::string&, Tensor<float>& p) {
    for (float v : p.data()) put_f32(out, v);
  });
  return out;
}

Seq2SeqModel<float> deserialize_model(const std::string& bytes, const ModelConfig* expected) {
  const FramedHeader framed = read_framed_header(bytes);
  const nlohmann::json& header = framed.header;
  if (header.value("kind", "") != "model") throw FormatError("checkpoint: field 'kind' is not 'model'");
  if (header.value("version", -1) != kCheckpointVersion) {
    throw FormatError("checkpoint: field 'version' is " + header.value("version", nlohmann::json()).dump() +
                      ", expected " + std::to_string(kCheckpointVersion));
  }
  ModelConfig config;
  try {
    config = header.at("config").get<ModelConfig>();
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  } catch (const ContractError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  if (expected) check_config_field(header.at("config"), nlohmann::json(*expected));

  Seq2SeqModel<float> model(config, 0);
  const auto& table = header.at("parameters");
  std::size_t index = 0;
  std::size_t at = framed.payload_at;
  model.visit_parameters([&](const std::string& name, Tensor<float>& p) {
    if (index >= table.size()) throw FormatError("checkpoint: parameter table ends before '" + name + "'");
    const auto& entry = table.at(index++);
    const Shape stored = entry.at("shape").get<Shape>();
    if (entry.at("name").get<std::string>() != name) {
      throw FormatError("checkpoint: parameter '" + entry.at("name").get<std::string>() + "' where '" + name +
                        "' expected");
    }
    if (stored != p.shape()) {
      std::string field = "d_model/ffn_dim";
      if (name == "embedding" && stored.size() == 2 && stored[1] != p.dim(1)) field = "vocab_size";
      else if (name == "output_bias") field = "vocab_size";
      else if (name == "embedding") field = "d_model";
      throw FormatError("checkpoint: config field '" + field + "' inconsistent with parameter '" + name +
                        "' stored as " + shape_str(stored) + ", config implies " + shape_str(p.shape()));
    }
    if (bytes.size() < at + 4 * p.numel()) throw FormatError("checkpoint: truncated blob for '" + name + "'");
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = get_f32(bytes, at + 4 * i);
    at += 4 * p.numel();
  });
  if (index != table.size()) throw FormatError("checkpoint: parameter table has extra entries");
  if (at != bytes.size()) throw FormatError("checkpoint: trailing bytes after parameters");
  return model;
}

void save_checkpoint(Seq2SeqModel<float>& model, const std::filesystem::path& path) {
  write_file(path, serialize_model(model));
}

Seq2SeqModel<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  return deserialize_model(read_file(path), expected);
}

}  // namespace softpipe
