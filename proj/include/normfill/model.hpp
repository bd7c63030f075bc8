#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "normfill/checkpoint.hpp"
#include "normfill/geometry.hpp"
#include "normfill/tensor.hpp"

namespace normfill {

// Two-pathway completion network. Each pathway is built from DCUs: an
// encoder-decoder with separate guide and sparse encoders, guide skips
// concatenated and sparse skips added into the decoder.

struct DcuConfig {
  std::vector<int> widths{16, 32, 64, 128};  // encoder width per scale
  std::vector<int> decoder_widths{64, 32, 16, 8};
  int blocks_per_scale = 1;
  int n_scales = 4;  // bottleneck sits at 1/2^n_scales

  void validate() const {
    if (n_scales < 1) throw std::invalid_argument("DcuConfig: n_scales must be >= 1");
    if (int(widths.size()) != n_scales || int(decoder_widths.size()) != n_scales)
      throw std::invalid_argument("DcuConfig: need one width per scale");
    for (int w : widths)
      if (w <= 0) throw std::invalid_argument("DcuConfig: widths must be positive");
    for (int w : decoder_widths)
      if (w <= 0) throw std::invalid_argument("DcuConfig: decoder widths must be positive");
    if (blocks_per_scale < 1)
      throw std::invalid_argument("DcuConfig: blocks_per_scale must be >= 1");
  }
};

struct ModelConfig {
  DcuConfig dcu;
  bool use_normal_pathway = true;
  bool use_attention = true;
  bool use_dcu_late_fusion = true;
  bool use_confidence = true;
  uint64_t seed = 0;

  void validate() const {
    dcu.validate();
    if (!use_normal_pathway && use_attention)
      throw std::invalid_argument(
          "ModelConfig: attention needs both pathways; disable it when the normal pathway is off");
  }
};

/// Table-3-style variants as pure flag mappings.
inline ModelConfig make_variant(ModelConfig base, const std::string& name) {
  base.use_normal_pathway = true;
  base.use_attention = true;
  base.use_dcu_late_fusion = true;
  base.use_confidence = true;
  if (name == "full") {
  } else if (name == "no_normal") {
    base.use_normal_pathway = false;
    base.use_attention = false;
  } else if (name == "no_attention") {
    base.use_attention = false;
  } else if (name == "no_dcu") {
    base.use_dcu_late_fusion = false;
  } else if (name == "no_confidence") {
    base.use_confidence = false;
  } else {
    throw std::invalid_argument("unknown variant name: " + name);
  }
  return base;
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"full", "no_normal", "no_attention", "no_dcu",
                                              "no_confidence"};
  return names;
}

template <typename S>
struct ModelOutput {
  Tensor<S> depth_final;   // D̂
  Tensor<S> depth_color;   // D̂c
  Tensor<S> depth_normal;  // D̂n
  Tensor<S> normals;       // N, unit per pixel
  Tensor<S> confidence;    // m_d in [0,1]
  Tensor<S> w_color, w_normal;
};

template <typename S>
struct BatchInputs {
  Tensor<S> rgb;     // [B,3,H,W] in [0,1]
  Tensor<S> sparse;  // [B,1,H,W] meters, 0 where absent
  Tensor<S> mask;    // [B,1,H,W] 0/1
};

/// Which outputs a forward pass must produce; unused branches are skipped so
/// stage-1 training never pays for the color pathway.
struct ForwardNeeds {
  bool normals = true;
  bool color_depth = true;
  bool normal_depth = true;
  bool fused = true;

  static ForwardNeeds all() { return {}; }
  static ForwardNeeds for_weights(double l1, double l2, double l3, double l4) {
    ForwardNeeds n;
    n.normal_depth = l1 > 0 || l3 > 0;
    n.color_depth = l2 > 0 || l3 > 0;
    n.fused = l3 > 0;
    n.normals = l4 > 0 || n.normal_depth;
    return n;
  }
};

namespace modeldetail {

template <typename S>
class ParamBank {
 public:
  explicit ParamBank(uint64_t seed) : rng_(seed) {}

  Tensor<S> conv_weight(const std::string& name, int cout, int cin, int k) {
    const double bound = std::sqrt(1.0 / (double(cin) * k * k));
    std::uniform_real_distribution<double> uni(-bound, bound);
    std::vector<S> data(size_t(cout) * cin * k * k);
    for (auto& v : data) v = S(uni(rng_));
    return track(name, Tensor<S>::from_data({cout, cin, k, k}, std::move(data), true));
  }

  Tensor<S> conv_bias(const std::string& name, int cout) {
    return track(name, Tensor<S>::zeros({cout}, true));
  }

  std::vector<Tensor<S>>& params() { return params_; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  Tensor<S> track(const std::string& name, Tensor<S> t) {
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }

  std::mt19937_64 rng_;
  std::vector<Tensor<S>> params_;
  std::vector<std::string> names_;
};

template <typename S>
struct Conv {
  Tensor<S> w, b;
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamBank<S>& bank, const std::string& name, int cin, int cout, int k, int stride_in)
      : w(bank.conv_weight(name + ".w", cout, cin, k)),
        b(bank.conv_bias(name + ".b", cout)),
        stride(stride_in),
        pad(k / 2) {}

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename S>
struct ResBlock {
  Conv<S> c1, c2;

  ResBlock() = default;
  ResBlock(ParamBank<S>& bank, const std::string& name, int width)
      : c1(bank, name + ".c1", width, width, 3, 1), c2(bank, name + ".c2", width, width, 3, 1) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> h = activation(c1(x), Activation::relu);
    return activation(add(c2(h), x), Activation::relu);
  }
};

template <typename S>
struct Encoder {
  Conv<S> entry;
  std::vector<std::vector<ResBlock<S>>> blocks;  // per scale
  std::vector<Conv<S>> down;                     // per scale, stride 2
  std::vector<ResBlock<S>> bottleneck;

  Encoder() = default;
  Encoder(ParamBank<S>& bank, const std::string& name, int cin, const DcuConfig& cfg) {
    entry = Conv<S>(bank, name + ".entry", cin, cfg.widths[0], 3, 1);
    for (int s = 0; s < cfg.n_scales; ++s) {
      std::vector<ResBlock<S>> bs;
      for (int j = 0; j < cfg.blocks_per_scale; ++j)
        bs.emplace_back(bank, name + ".s" + std::to_string(s) + ".b" + std::to_string(j),
                        cfg.widths[s]);
      blocks.push_back(std::move(bs));
      const int next = s + 1 < cfg.n_scales ? cfg.widths[s + 1] : cfg.widths[s];
      down.emplace_back(bank, name + ".s" + std::to_string(s) + ".down", cfg.widths[s], next, 3,
                        2);
    }
    for (int j = 0; j < cfg.blocks_per_scale; ++j)
      bottleneck.emplace_back(bank, name + ".bottleneck.b" + std::to_string(j), cfg.widths.back());
  }

  /// Returns per-scale skip features (finest first) and the bottleneck map.
  std::pair<std::vector<Tensor<S>>, Tensor<S>> operator()(const Tensor<S>& x) const {
    std::vector<Tensor<S>> skips;
    Tensor<S> h = activation(entry(x), Activation::relu);
    for (size_t s = 0; s < blocks.size(); ++s) {
      for (const auto& bk : blocks[s]) h = bk(h);
      skips.push_back(h);
      h = activation(down[s](h), Activation::relu);
    }
    for (const auto& bk : bottleneck) h = bk(h);
    return {std::move(skips), std::move(h)};
  }
};

/// Up-projection unit: nearest 2x upsample, a 5x5 + 3x3 main branch and a
/// parallel 5x5 projection branch, summed then rectified.
template <typename S>
struct UpProj {
  Conv<S> main5, main3, branch5;

  UpProj() = default;
  UpProj(ParamBank<S>& bank, const std::string& name, int cin, int cout)
      : main5(bank, name + ".main5", cin, cout, 5, 1),
        main3(bank, name + ".main3", cout, cout, 3, 1),
        branch5(bank, name + ".branch5", cin, cout, 5, 1) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> u = upsample_nearest2x(x);
    Tensor<S> m = main3(activation(main5(u), Activation::relu));
    return activation(add(m, branch5(u)), Activation::relu);
  }
};

template <typename S>
struct DecoderStage {
  UpProj<S> up;
  Conv<S> fuse;  // 1x1 over up ⊕ guide skip
  Conv<S> proj;  // 1x1 over sparse skip, added
  bool has_proj = false;

  DecoderStage() = default;
  DecoderStage(ParamBank<S>& bank, const std::string& name, int cin, int skip_w, int cout,
               bool late_fusion)
      : up(bank, name + ".up", cin, cout),
        fuse(bank, name + ".fuse", cout + skip_w, cout, 1, 1),
        has_proj(late_fusion) {
    if (late_fusion) proj = Conv<S>(bank, name + ".proj", skip_w, cout, 1, 1);
  }

  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& guide_skip,
                       const Tensor<S>& sparse_skip) const {
    Tensor<S> y = up(x);
    Tensor<S> f = fuse(concat_channels(y, guide_skip));
    if (has_proj) f = add(f, proj(sparse_skip));
    return activation(f, Activation::relu);
  }
};

enum class HeadKind { depth, normals };

template <typename S>
struct Dcu {
  Encoder<S> guide_enc, sparse_enc;
  Conv<S> bottleneck_proj;  // 1x1, sparse bottleneck into decoder entry
  std::vector<DecoderStage<S>> stages;
  Conv<S> head;
  HeadKind head_kind = HeadKind::depth;
  bool late_fusion = true;
  DcuConfig cfg;

  Dcu() = default;
  Dcu(ParamBank<S>& bank, const std::string& name, int guide_ch, int sparse_ch, int out_ch,
      HeadKind kind, bool late, const DcuConfig& c)
      : head_kind(kind), late_fusion(late), cfg(c) {
    // early fusion runs the one encoder over the concatenated input
    guide_enc = Encoder<S>(bank, name + ".guide",
                           late_fusion ? guide_ch : guide_ch + sparse_ch, cfg);
    if (late_fusion) {
      sparse_enc = Encoder<S>(bank, name + ".sparse", sparse_ch, cfg);
      bottleneck_proj =
          Conv<S>(bank, name + ".bproj", cfg.widths.back(), cfg.widths.back(), 1, 1);
    }
    int cin = cfg.widths.back();
    for (int i = 0; i < cfg.n_scales; ++i) {
      const int skip_w = cfg.widths[cfg.n_scales - 1 - i];
      const int cout = cfg.decoder_widths[i];
      stages.emplace_back(bank, name + ".dec.s" + std::to_string(i), cin, skip_w, cout,
                          late_fusion);
      cin = cout;
    }
    head = Conv<S>(bank, name + ".head", cin, out_ch, 3, 1);
  }

  /// guide [B,Cg,H,W], sparse [B,Cs,H,W]; H and W divisible by 2^n_scales.
  /// Returns the head output and the last pre-head feature map.
  std::pair<Tensor<S>, Tensor<S>> operator()(const Tensor<S>& guide,
                                             const Tensor<S>& sparse) const {
    const int H = guide.dim(2), W = guide.dim(3);
    const int div = 1 << cfg.n_scales;
    if (H % div != 0 || W % div != 0)
      throw std::invalid_argument("dcu: input " + std::to_string(H) + "x" + std::to_string(W) +
                                  " not divisible by " + std::to_string(div));
    Tensor<S> in = late_fusion ? guide : concat_channels(guide, sparse);
    auto [g_skips, g_bot] = guide_enc(in);
    Tensor<S> h = g_bot;
    std::vector<Tensor<S>> s_skips;
    if (late_fusion) {
      auto [ss, s_bot] = sparse_enc(sparse);
      s_skips = std::move(ss);
      h = add(h, bottleneck_proj(s_bot));
    }
    for (size_t i = 0; i < stages.size(); ++i) {
      const size_t skip_idx = stages.size() - 1 - i;
      h = stages[i](h, g_skips[skip_idx], late_fusion ? s_skips[skip_idx] : Tensor<S>());
    }
    Tensor<S> out = head(h);
    out = head_kind == HeadKind::depth
              ? scale(activation(out, Activation::softplus), S(kZMax))
              : l2_normalize_channels(out);
    return {std::move(out), std::move(h)};
  }
};

template <typename S>
struct ScoreHead {
  Conv<S> c1, c2, c3;

  ScoreHead() = default;
  ScoreHead(ParamBank<S>& bank, const std::string& name, int cin)
      : c1(bank, name + ".c1", cin, cin, 3, 1),
        c2(bank, name + ".c2", cin, cin, 3, 1),
        c3(bank, name + ".c3", cin, 1, 1, 1) {}

  Tensor<S> operator()(const Tensor<S>& x) const {
    Tensor<S> h = activation(c1(x), Activation::relu);
    h = activation(c2(h), Activation::relu);
    return c3(h);
  }
};

}  // namespace modeldetail

template <typename S>
class DepthModel {
 public:
  explicit DepthModel(const ModelConfig& cfg) : cfg_(cfg), bank_(cfg.seed) {
    cfg_.validate();
    using namespace modeldetail;
    const bool late = cfg_.use_dcu_late_fusion;
    color_ = Dcu<S>(bank_, "color", 3, 2, 1, HeadKind::depth, late, cfg_.dcu);
    conf_head_ = Conv<S>(bank_, "color.conf", cfg_.dcu.decoder_widths.back(), 1, 3, 1);
    if (cfg_.use_attention) score_c_ = ScoreHead<S>(bank_, "color.score",
                                                    cfg_.dcu.decoder_widths.back());
    if (cfg_.use_normal_pathway) {
      normalsA_ = Dcu<S>(bank_, "normals", 3, 2, 3, HeadKind::normals, late, cfg_.dcu);
      depthB_ = Dcu<S>(bank_, "depthn", 3, 2, 1, HeadKind::depth, late, cfg_.dcu);
      if (cfg_.use_attention)
        score_n_ = ScoreHead<S>(bank_, "depthn.score", cfg_.dcu.decoder_widths.back());
    }
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Tensor<S>>& parameters() { return bank_.params(); }
  const std::vector<std::string>& parameter_names() const { return bank_.names(); }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : bank_.params()) n += p.numel();
    return n;
  }

  ModelOutput<S> forward(const BatchInputs<S>& in, ForwardNeeds needs = ForwardNeeds::all()) const {
    validate_inputs(in);
    if (!cfg_.use_normal_pathway) {
      needs.normals = false;
      needs.normal_depth = false;
      needs.fused = false;
      needs.color_depth = true;
    }
    if (!cfg_.use_attention) needs.fused = false;
    if (needs.fused) {
      needs.color_depth = true;
      needs.normal_depth = true;
    }
    if (needs.normal_depth) needs.normals = true;

    Tensor<S> sparse_n = scale(in.sparse, S(1.0 / kZMax));
    Tensor<S> sparse_stack = concat_channels(sparse_n, in.mask);

    ModelOutput<S> out;
    Tensor<S> feat_c;
    // confidence is only an input to the normal-pathway depth DCU, so the
    // color pathway can be skipped entirely when neither is asked for
    const bool want_conf =
        cfg_.use_normal_pathway && cfg_.use_confidence && needs.normal_depth;
    if (needs.color_depth || want_conf) {
      auto [dc, fc] = color_(in.rgb, sparse_stack);
      out.depth_color = std::move(dc);
      feat_c = std::move(fc);
      out.confidence = activation(conf_head_(feat_c), Activation::sigmoid);
    }

    if (needs.normals) {
      auto [n, fa] = normalsA_(in.rgb, sparse_stack);
      out.normals = std::move(n);
    }

    if (needs.normal_depth) {
      Tensor<S> avail = cfg_.use_confidence ? out.confidence : in.mask;
      auto [dn, fn] = depthB_(out.normals, concat_channels(sparse_n, avail));
      out.depth_normal = std::move(dn);
      if (cfg_.use_attention && needs.fused) {
        auto [wc, wn] = softmax_pair(score_c_(feat_c), score_n_(fn));
        out.w_color = wc;
        out.w_normal = wn;
        out.depth_final = add(mul(wc, out.depth_color), mul(wn, out.depth_normal));
      }
    }

    if (!cfg_.use_normal_pathway)
      out.depth_final = out.depth_color;
    else if (!cfg_.use_attention && needs.normal_depth)
      out.depth_final = out.depth_normal;
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::vector<NamedArray> arrays;
    const auto& names = bank_.names();
    for (size_t i = 0; i < names.size(); ++i) {
      const Tensor<S>& p = bank_.params()[i];
      NamedArray a;
      a.name = names[i];
      a.dims = p.shape();
      a.data.resize(size_t(p.numel()));
      for (int64_t j = 0; j < p.numel(); ++j) a.data[size_t(j)] = float(p.data()[j]);
      arrays.push_back(std::move(a));
    }
    save_checkpoint(path, arrays);
  }

  void load(const std::filesystem::path& path) {
    const std::vector<NamedArray> arrays = load_checkpoint(path);
    auto& params = bank_.params();
    const auto& names = bank_.names();
    if (arrays.size() != params.size())
      throw std::runtime_error("checkpoint holds " + std::to_string(arrays.size()) +
                               " parameters, model needs " + std::to_string(params.size()));
    for (size_t i = 0; i < arrays.size(); ++i) {
      if (arrays[i].name != names[i])
        throw std::runtime_error("checkpoint parameter " + arrays[i].name +
                                 " does not match model parameter " + names[i]);
      if (arrays[i].dims != params[i].shape())
        throw std::runtime_error("shape mismatch for parameter " + names[i]);
      S* dst = params[i].mutable_data();
      for (size_t j = 0; j < arrays[i].data.size(); ++j) dst[j] = S(arrays[i].data[j]);
    }
  }

 private:
  void validate_inputs(const BatchInputs<S>& in) const {
    detail::require(in.rgb.defined() && in.sparse.defined() && in.mask.defined(),
                    "model: rgb, sparse and mask inputs are all required");
    detail::require(in.rgb.ndim() == 4 && in.rgb.dim(1) == 3, "model: rgb must be [B,3,H,W]");
    detail::require(in.sparse.shape() ==
                        std::vector<int>{in.rgb.dim(0), 1, in.rgb.dim(2), in.rgb.dim(3)},
                    "model: sparse must be [B,1,H,W] matching rgb");
    detail::require(in.mask.shape() == in.sparse.shape(), "model: mask must match sparse");
  }

  ModelConfig cfg_;
  modeldetail::ParamBank<S> bank_;
  modeldetail::Dcu<S> color_, normalsA_, depthB_;
  modeldetail::Conv<S> conf_head_;
  modeldetail::ScoreHead<S> score_c_, score_n_;
};

// ---- config text round-trip (TOML-style key = value lines) ----

inline std::string model_config_to_text(const ModelConfig& cfg, const std::string& variant) {
  std::ostringstream out;
  auto list = [](const std::vector<int>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
  };
  out << "variant = " << variant << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "use_normal_pathway = " << (cfg.use_normal_pathway ? "true" : "false") << "\n";
  out << "use_attention = " << (cfg.use_attention ? "true" : "false") << "\n";
  out << "use_dcu_late_fusion = " << (cfg.use_dcu_late_fusion ? "true" : "false") << "\n";
  out << "use_confidence = " << (cfg.use_confidence ? "true" : "false") << "\n";
  out << "widths = " << list(cfg.dcu.widths) << "\n";
  out << "decoder_widths = " << list(cfg.dcu.decoder_widths) << "\n";
  out << "blocks_per_scale = " << cfg.dcu.blocks_per_scale << "\n";
  out << "n_scales = " << cfg.dcu.n_scales << "\n";
  return out.str();
}

inline ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  auto parse_list = [&](const std::string& v) {
    std::vector<int> out;
    std::string body = v;
    for (char& ch : body)
      if (ch == '[' || ch == ']' || ch == ',') ch = ' ';
    std::istringstream items(body);
    int x;
    while (items >> x) out.push_back(x);
    return out;
  };
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "use_normal_pathway") cfg.use_normal_pathway = val == "true";
    else if (key == "use_attention") cfg.use_attention = val == "true";
    else if (key == "use_dcu_late_fusion") cfg.use_dcu_late_fusion = val == "true";
    else if (key == "use_confidence") cfg.use_confidence = val == "true";
    else if (key == "widths") cfg.dcu.widths = parse_list(val);
    else if (key == "decoder_widths") cfg.dcu.decoder_widths = parse_list(val);
    else if (key == "blocks_per_scale") cfg.dcu.blocks_per_scale = std::stoi(val);
    else if (key == "n_scales") cfg.dcu.n_scales = std::stoi(val);
  }
  cfg.validate();
  return cfg;
}

}  // namespace normfill
