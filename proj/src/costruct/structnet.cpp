#include "comal/costruct/structnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "comal/ndgrad/ops.hpp"
#include "comal/ndgrad/optim.hpp"
#include "comal/ndgrad/random.hpp"

namespace comal::costruct {

namespace {

constexpr double kNormEps = 1e-5;

nd::Tensor uniform_param(nd::Shape shape, double bound, Rng& rng) {
  std::vector<double> v(nd::numel_of(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return nd::Tensor::from(std::move(shape), std::move(v), true);
}

nd::Tensor linear_weight(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
}

nd::Tensor layer_norm(const nd::Tensor& x, const nd::Tensor& gain, const nd::Tensor& bias) {
  nd::Tensor centered = x - nd::mean(x, -1, true);
  nd::Tensor var = nd::mean(centered * centered, -1, true);
  return centered * nd::pow(var + kNormEps, -0.5) * gain + bias;
}

void check_masks(std::span<const BinaryMask> masks, std::size_t batch, const StructConfig& cfg) {
  if (masks.size() != batch) {
    throw nd::ShapeError("structnet: one mask per map expected", {batch}, {masks.size()});
  }
  for (const auto& m : masks) {
    if (m.height != cfg.height || m.width != cfg.width) {
      throw nd::ShapeError("structnet mask", {cfg.height, cfg.width}, {m.height, m.width});
    }
  }
}

// [B, N, 1] tensor holding mask values (1 = masked), or their complement.
nd::Tensor mask_column(std::span<const BinaryMask> masks, bool complement) {
  const std::size_t N = masks[0].masked.size();
  std::vector<double> v(masks.size() * N);
  for (std::size_t b = 0; b < masks.size(); ++b) {
    for (std::size_t i = 0; i < N; ++i) {
      const bool m = masks[b].masked[i] != 0;
      v[b * N + i] = (m != complement) ? 1.0 : 0.0;
    }
  }
  return nd::Tensor::from({masks.size(), N, 1}, std::move(v));
}

nd::AttentionGate key_gate(std::span<const BinaryMask> masks) {
  nd::AttentionGate gate;
  const std::size_t N = masks[0].masked.size();
  gate.tokens = N;
  gate.allowed.reserve(masks.size());
  for (const auto& m : masks) {
    std::vector<std::uint8_t> allowed(N * N, 0);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t j = 0; j < N; ++j) allowed[i * N + j] = (m.masked[j] == 0 || i == j);
    }
    gate.allowed.push_back(std::move(allowed));
  }
  return gate;
}

std::vector<std::size_t> argsort_shuffle(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

}  // namespace

void StructConfig::validate() const {
  if (classes < 2 || height == 0 || width == 0 || embed == 0 || heads == 0 || blocks == 0 ||
      mlp_hidden == 0) {
    throw std::invalid_argument("StructConfig: all sizes must be positive (classes >= 2)");
  }
  if (embed % heads != 0) throw std::invalid_argument("StructConfig: embed must divide by heads");
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), 1));
}

BinaryMask sample_mask(std::uint64_t seed, std::size_t height, std::size_t width,
                       MaskScheme scheme) {
  const std::size_t N = height * width;
  if (N == 0) throw std::invalid_argument("sample_mask: empty grid");
  Rng rng = Rng(seed).split(0x3a5c);
  switch (scheme) {
    case MaskScheme::kAllMasked:
      return BinaryMask(height, width, 1);
    case MaskScheme::kSingleKnown:
      return single_known_mask(height, width, rng.below(N));
    case MaskScheme::kUniformRate: {
      BinaryMask m(height, width, 0);
      const double rho = rng.uniform(0.15, 1.0);
      for (auto& v : m.masked) v = rng.bernoulli(rho) ? 1 : 0;
      if (m.count() == 0) m.masked[rng.below(N)] = 1;
      return m;
    }
  }
  throw std::invalid_argument("sample_mask: unknown scheme");
}

BinaryMask single_known_mask(std::size_t height, std::size_t width, std::size_t anchor) {
  if (anchor >= height * width) throw std::out_of_range("single_known_mask: anchor out of range");
  BinaryMask m(height, width, 1);
  m.masked[anchor] = 0;
  return m;
}

std::vector<nd::Tensor> StructNet::parameters() const {
  std::vector<nd::Tensor> out;
  for (const auto& [name, t] : named()) out.push_back(t);
  return out;
}

nd::NamedTensors StructNet::named() const {
  nd::NamedTensors out{{"struct.token_embedding", token_embedding},
                       {"struct.position_embedding", position_embedding}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "struct.block" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_gain", b.ln1_gain);
    out.emplace_back(p + "ln1_bias", b.ln1_bias);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "bo", b.bo);
    out.emplace_back(p + "ln2_gain", b.ln2_gain);
    out.emplace_back(p + "ln2_bias", b.ln2_bias);
    out.emplace_back(p + "mlp_w1", b.mlp_w1);
    out.emplace_back(p + "mlp_b1", b.mlp_b1);
    out.emplace_back(p + "mlp_w2", b.mlp_w2);
    out.emplace_back(p + "mlp_b2", b.mlp_b2);
  }
  out.emplace_back("struct.final_gain", final_gain);
  out.emplace_back("struct.final_bias", final_bias);
  out.emplace_back("struct.out_weight", out_weight);
  out.emplace_back("struct.out_bias", out_bias);
  return out;
}

void StructNet::load(const nd::NamedTensors& named) {
  for (auto& [name, dst] : this->named()) {
    auto it = std::find_if(named.begin(), named.end(),
                           [&](const auto& e) { return e.first == name; });
    if (it == named.end()) throw std::runtime_error("StructNet::load: missing " + name);
    if (it->second.shape() != dst.shape()) {
      throw nd::ShapeError("StructNet::load(" + name + ")", dst.shape(), it->second.shape());
    }
    std::copy(it->second.data().begin(), it->second.data().end(), dst.mutable_data().begin());
  }
}

StructNet StructNet::clone() const {
  StructNet c = *this;
  c.token_embedding = token_embedding.clone();
  c.position_embedding = position_embedding.clone();
  for (auto& b : c.blocks) {
    for (auto* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.ln2_gain,
                    &b.ln2_bias, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
      *t = t->clone();
    }
  }
  c.final_gain = final_gain.clone();
  c.final_bias = final_bias.clone();
  c.out_weight = out_weight.clone();
  c.out_bias = out_bias.clone();
  return c;
}

StructNet init_structnet(std::uint64_t seed, const StructConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(seed).split(0x57c7);
  const std::size_t E = cfg.embed, C = cfg.classes;
  StructNet net;
  net.config = cfg;
  net.token_embedding = uniform_param({C + 1, E}, 0.5, rng);
  net.position_embedding = uniform_param({cfg.tokens(), E}, 0.5, rng);
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    Block b;
    b.ln1_gain = nd::Tensor::full({E}, 1.0, true);
    b.ln1_bias = nd::Tensor::zeros({E}, true);
    b.wq = linear_weight(E, E, rng);
    b.wk = linear_weight(E, E, rng);
    b.wv = linear_weight(E, E, rng);
    b.wo = linear_weight(E, E, rng);
    b.bo = nd::Tensor::zeros({E}, true);
    b.ln2_gain = nd::Tensor::full({E}, 1.0, true);
    b.ln2_bias = nd::Tensor::zeros({E}, true);
    b.mlp_w1 = linear_weight(E, cfg.mlp_hidden, rng);
    b.mlp_b1 = nd::Tensor::zeros({cfg.mlp_hidden}, true);
    b.mlp_w2 = linear_weight(cfg.mlp_hidden, E, rng);
    b.mlp_b2 = nd::Tensor::zeros({E}, true);
    net.blocks.push_back(std::move(b));
  }
  net.final_gain = nd::Tensor::full({E}, 1.0, true);
  net.final_bias = nd::Tensor::zeros({E}, true);
  net.out_weight = linear_weight(E, C, rng);
  net.out_bias = nd::Tensor::zeros({C}, true);
  return net;
}

nd::Tensor label_content(std::span<const world::LabelMap> labels, std::size_t classes) {
  if (labels.empty()) throw std::invalid_argument("label_content: empty batch");
  const std::size_t N = labels[0].labels.size();
  std::vector<double> v(labels.size() * N * classes, 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].labels.size() != N) {
      throw nd::ShapeError("label_content", {N}, {labels[b].labels.size()});
    }
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t c = labels[b].labels[i];
      if (c >= classes) throw std::out_of_range("label_content: label out of range");
      v[(b * N + i) * classes + c] = 1.0;
    }
  }
  return nd::Tensor::from({labels.size(), N, classes}, std::move(v));
}

nd::Tensor forward_log_probs(const StructNet& net, const nd::Tensor& content,
                             std::span<const BinaryMask> masks) {
  const auto& cfg = net.config;
  const std::size_t N = cfg.tokens(), C = cfg.classes;
  if (content.rank() != 3 || content.shape()[1] != N || content.shape()[2] != C) {
    throw nd::ShapeError("structnet forward", content.shape(), {0, N, C});
  }
  const std::size_t B = content.shape()[0];
  check_masks(masks, B, cfg);
  // Known positions keep their class content; masked ones become the mask
  // token. Multiplying by an exact 0 keeps masked content out entirely.
  nd::Tensor tokens = nd::concat({content * mask_column(masks, true), mask_column(masks, false)}, 2);
  nd::Tensor z = nd::matmul(tokens, net.token_embedding) + net.position_embedding;
  const nd::AttentionGate gate = key_gate(masks);
  for (const auto& blk : net.blocks) {
    nd::Tensor h = layer_norm(z, blk.ln1_gain, blk.ln1_bias);
    nd::Tensor att = nd::gated_attention(nd::matmul(h, blk.wq), nd::matmul(h, blk.wk),
                                         nd::matmul(h, blk.wv), cfg.heads, gate);
    nd::Tensor a = z + (nd::matmul(att, blk.wo) + blk.bo);
    nd::Tensor g = layer_norm(a, blk.ln2_gain, blk.ln2_bias);
    z = a + (nd::matmul(nd::tanh(nd::matmul(g, blk.mlp_w1) + blk.mlp_b1), blk.mlp_w2) +
             blk.mlp_b2);
  }
  nd::Tensor logits =
      nd::matmul(layer_norm(z, net.final_gain, net.final_bias), net.out_weight) + net.out_bias;
  for (double v : logits.data()) {
    if (!std::isfinite(v)) throw std::runtime_error("structnet: non-finite logits");
  }
  return nd::log_softmax(logits, -1);
}

nd::Tensor forward(const StructNet& net, const world::LabelMap& labels, const BinaryMask& mask) {
  nd::NoGradGuard no_grad;
  const world::LabelMap one[] = {labels};
  const BinaryMask m[] = {mask};
  nd::Tensor lp = forward_log_probs(net, label_content(one, net.config.classes), m);
  return nd::reshape(nd::exp(lp), {net.config.tokens(), net.config.classes});
}

nd::Tensor forward(const StructNet& net, const nd::Tensor& y, const BinaryMask& mask) {
  const auto& cfg = net.config;
  if (y.rank() != 3 || y.shape()[0] != cfg.height || y.shape()[1] != cfg.width ||
      y.shape()[2] != cfg.classes) {
    throw nd::ShapeError("structnet forward", y.shape(), {cfg.height, cfg.width, cfg.classes});
  }
  const BinaryMask m[] = {mask};
  nd::Tensor lp = forward_log_probs(net, nd::reshape(y, {1, cfg.tokens(), cfg.classes}), m);
  return nd::reshape(nd::exp(lp), {cfg.tokens(), cfg.classes});
}

nd::Tensor masked_nll_from(const nd::Tensor& log_probs, std::span<const world::LabelMap> labels,
                           std::span<const BinaryMask> masks) {
  const std::size_t B = log_probs.shape()[0], N = log_probs.shape()[1], C = log_probs.shape()[2];
  if (labels.size() != B || masks.size() != B) {
    throw nd::ShapeError("masked_nll batch", {B}, {labels.size()});
  }
  // Constant weights select -log p(label) at masked positions, already
  // normalized by each item's masked count and the batch size.
  std::vector<double> w(B * N * C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t count = masks[b].count();
    if (count == 0) throw std::invalid_argument("masked_nll: no masked positions");
    if (labels[b].labels.size() != N) throw nd::ShapeError("masked_nll labels", {N}, {labels[b].labels.size()});
    const double scale = 1.0 / (static_cast<double>(count) * static_cast<double>(B));
    for (std::size_t i = 0; i < N; ++i) {
      if (masks[b].masked[i]) w[(b * N + i) * C + labels[b].labels[i]] = scale;
    }
  }
  return -nd::sum(log_probs * nd::Tensor::from({B, N, C}, std::move(w)));
}

nd::Tensor masked_nll(const StructNet& net, std::span<const world::LabelMap> labels,
                      std::span<const BinaryMask> masks) {
  for (const auto& m : masks) {
    if (m.count() == 0) throw std::invalid_argument("masked_nll: no masked positions");
  }
  return masked_nll_from(
      forward_log_probs(net, label_content(labels, net.config.classes), masks), labels, masks);
}

double masked_nll(const StructNet& net, const world::LabelMap& labels, const BinaryMask& mask) {
  nd::NoGradGuard no_grad;
  const world::LabelMap one[] = {labels};
  const BinaryMask m[] = {mask};
  return masked_nll(net, one, m).item();
}

std::vector<BinaryMask> evaluation_masks(std::uint64_t seed, std::size_t count,
                                         std::size_t height, std::size_t width) {
  std::vector<BinaryMask> out;
  out.reserve(count);
  Rng rng = Rng(seed).split(0xe7a1);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_mask(rng.next_u64(), height, width, MaskScheme::kUniformRate));
  }
  return out;
}

double mean_masked_nll(const StructNet& net, std::span<const world::LabelMap> labels,
                       std::span<const BinaryMask> masks) {
  if (labels.empty() || labels.size() != masks.size()) {
    throw std::invalid_argument("mean_masked_nll: need one mask per map");
  }
  nd::NoGradGuard no_grad;
  double total = 0.0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < labels.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, labels.size() - s);
    total += masked_nll(net, labels.subspan(s, n), masks.subspan(s, n)).item() *
             static_cast<double>(n);
  }
  return total / static_cast<double>(labels.size());
}

StructTrainReport train_struct(StructNet& net, std::span<const world::LabelMap> labels,
                               const StructTrainOptions& opts) {
  if (labels.empty()) throw std::invalid_argument("train_struct: empty dataset");
  StructTrainReport report;
  if (opts.epochs == 0) return report;
  const auto& cfg = net.config;
  nd::AdamOptions ao;
  ao.lr = opts.lr;
  ao.clip_norm = 10.0;
  nd::Adam adam(net.parameters(), ao);
  Rng rng = Rng(opts.seed).split(0x57a1);
  std::size_t iteration = 0;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = argsort_shuffle(labels.size(), rng);
    double total = 0.0;
    for (std::size_t s = 0; s < labels.size(); s += opts.batch) {
      const std::size_t n = std::min(opts.batch, labels.size() - s);
      std::vector<world::LabelMap> batch;
      std::vector<BinaryMask> masks;
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(labels[order[s + i]]);
        const double u = rng.uniform();
        const MaskScheme scheme = u < opts.single_known_rate ? MaskScheme::kSingleKnown
                                  : u < opts.single_known_rate + opts.all_masked_rate
                                      ? MaskScheme::kAllMasked
                                      : MaskScheme::kUniformRate;
        masks.push_back(sample_mask(rng.next_u64(), cfg.height, cfg.width, scheme));
      }
      nd::Tensor loss = masked_nll(net, batch, masks);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw std::runtime_error("train_struct: diverged at iteration " + std::to_string(iteration));
      }
      total += value * static_cast<double>(n);
      loss.backward();
      adam.step();
      ++iteration;
    }
    report.epoch_nll.push_back(total / static_cast<double>(labels.size()));
  }
  return report;
}

nd::Tensor comal_loss(const StructNet& net, const nd::Tensor& y, std::size_t num_anchors,
                      std::uint64_t seed) {
  const auto& cfg = net.config;
  const std::size_t N = cfg.tokens(), C = cfg.classes;
  if (y.rank() != 4 || y.shape()[1] != cfg.height || y.shape()[2] != cfg.width ||
      y.shape()[3] != C) {
    throw nd::ShapeError("comal_loss", y.shape(), {0, cfg.height, cfg.width, C});
  }
  if (num_anchors == 0) throw std::invalid_argument("comal_loss: need at least one anchor");
  if (N < 2) throw std::invalid_argument("comal_loss: grid needs two or more positions");
  const std::size_t B = y.shape()[0];
  const std::size_t A = std::min(num_anchors, N);
  Rng rng = Rng(seed).split(0xc0a1);
  std::vector<std::size_t> item;
  std::vector<BinaryMask> masks;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> anchors(N);
    std::iota(anchors.begin(), anchors.end(), 0);
    if (A < N) {
      // Partial Fisher-Yates: first A entries are a uniform draw without replacement.
      for (std::size_t i = 0; i < A; ++i) std::swap(anchors[i], anchors[i + rng.below(N - i)]);
      anchors.resize(A);
    }
    for (std::size_t a : anchors) {
      item.push_back(b);
      masks.push_back(single_known_mask(cfg.height, cfg.width, a));
    }
  }
  nd::Tensor flat = nd::reshape(y, {B, N, C});
  nd::Tensor rep = nd::index_select(flat, 0, item);  // [B*A, N, C]
  nd::Tensor log_probs = forward_log_probs(net, rep, masks);
  // Soft targets at masked positions, normalized per item.
  const double scale = 1.0 / (static_cast<double>(N - 1) * static_cast<double>(masks.size()));
  nd::Tensor weights = mask_column(masks, false) * scale;
  return -nd::sum(rep * log_probs * weights);
}

std::vector<world::LabelMap> sample_many(const StructNet& net, std::span<const BinaryMask> masks,
                                         std::span<const world::LabelMap> known,
                                         double temperature, std::uint64_t seed) {
  const auto& cfg = net.config;
  const std::size_t N = cfg.tokens(), C = cfg.classes, B = masks.size();
  if (known.size() != B) throw std::invalid_argument("sample_many: one known map per mask");
  check_masks(masks, B, cfg);
  nd::NoGradGuard no_grad;
  std::vector<world::LabelMap> out(known.begin(), known.end());
  std::vector<BinaryMask> state(masks.begin(), masks.end());
  std::vector<Rng> rngs;
  for (std::size_t b = 0; b < B; ++b) {
    if (out[b].labels.size() != N) throw nd::ShapeError("sample known map", {N}, {out[b].labels.size()});
    // Content under the mask is irrelevant; zero it so outputs are canonical.
    for (std::size_t i = 0; i < N; ++i) {
      if (state[b].masked[i]) out[b].labels[i] = 0;
    }
    rngs.push_back(Rng(seed).split(b));
  }
  for (;;) {
    std::vector<std::size_t> active;
    for (std::size_t b = 0; b < B; ++b) {
      if (state[b].count() > 0) active.push_back(b);
    }
    if (active.empty()) break;
    std::vector<world::LabelMap> cur;
    std::vector<BinaryMask> cur_masks;
    for (std::size_t b : active) {
      cur.push_back(out[b]);
      cur_masks.push_back(state[b]);
    }
    const nd::Tensor lp = forward_log_probs(net, label_content(cur, C), cur_masks);
    const double* p = lp.data().data();
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::size_t b = active[k];
      std::size_t best = N;
      double best_conf = -INFINITY;
      for (std::size_t i = 0; i < N; ++i) {
        if (!state[b].masked[i]) continue;
        const double* row = p + (k * N + i) * C;
        const double conf = *std::max_element(row, row + C);
        if (conf > best_conf) {
          best_conf = conf;
          best = i;
        }
      }
      const double* row = p + (k * N + best) * C;
      std::size_t cls = static_cast<std::size_t>(std::max_element(row, row + C) - row);
      if (temperature > 0.0) {
        std::vector<double> w(C);
        double total = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          w[c] = std::exp((row[c] - best_conf) / temperature);
          total += w[c];
        }
        double u = rngs[b].uniform() * total;
        for (cls = 0; cls + 1 < C; ++cls) {
          u -= w[cls];
          if (u < 0.0) break;
        }
      }
      out[b].labels[best] = static_cast<std::uint8_t>(cls);
      state[b].masked[best] = 0;
    }
  }
  return out;
}

world::LabelMap sample(const StructNet& net, const BinaryMask& mask, const world::LabelMap& known,
                       double temperature, std::uint64_t seed) {
  const BinaryMask m[] = {mask};
  const world::LabelMap k[] = {known};
  return sample_many(net, m, k, temperature, seed).front();
}

}  // namespace comal::costruct
