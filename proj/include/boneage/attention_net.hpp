#pragma once

#include <array>
#include <string>
#include <vector>

#include "boneage/conv_ops.hpp"
#include "boneage/image.hpp"
#include "boneage/rng.hpp"
#include "boneage/tensor.hpp"

namespace boneage {

/// Architecture hyper-parameters. The module arrangement is fixed at
/// 1+2+3 (Att1_1; Att2_1, Att2_2; Att3_1, Att3_2, Att3_3); everything else
/// is configurable.
struct NetworkConfig {
  int input_size = 64;                    // square input, pixels
  std::array<int, 3> widths{8, 16, 32};   // channels per stage
  int trunk_units = 2;                    // residual units in each trunk branch
  std::array<int, 3> mask_depths{3, 2, 1};// hourglass depth per stage
  int feature_width = 16;                 // F, features before gender fusion

  void validate() const {
    if (input_size < 8) throw ValueError("net.input_size must be >= 8");
    for (int c : widths)
      if (c < 1) throw ValueError("net.widths entries must be positive");
    if (trunk_units < 1) throw ValueError("net.trunk_units must be >= 1");
    for (int d : mask_depths)
      if (d < 1) throw ValueError("net.mask_depths entries must be >= 1");
    if (feature_width < 1) throw ValueError("net.feature_width must be >= 1");
  }

  bool operator==(const NetworkConfig&) const = default;
};

inline const std::array<std::string, 6>& attention_module_names() {
  static const std::array<std::string, 6> names{"Att1_1", "Att2_1", "Att2_2",
                                                "Att3_1", "Att3_2", "Att3_3"};
  return names;
}

/// Which pipeline pieces to disable for an ablation run.
struct AblationSpec {
  std::vector<std::string> disabled_modules;  // each must name a real module
  bool gender_enabled = true;
  bool segmentation_enabled = true;  // honored by the data pipeline, not forward()

  bool operator==(const AblationSpec&) const = default;
};

/// Pre-sigmoid soft-mask logits recorded during a forward pass.
template <class S>
struct AttentionCapture {
  std::string module;
  Shape shape;  // [N,C,H,W], equal to the module's trunk feature dims
  std::vector<S> pre_sigmoid;
};

template <class S>
struct ConvLayer {
  TensorT<S> w;
  TensorT<S> b;  // undefined for bias-free convolutions
};

template <class S>
struct NormLayer {
  TensorT<S> gamma;
  TensorT<S> beta;
  BatchNormStats<S> stats;
};

/// Pre-activation residual unit: bn-relu-conv3x3 twice plus shortcut.
/// A defined proj gives the stride-2 / channel-expanding variant.
template <class S>
struct ResidualUnit {
  NormLayer<S> bn1;
  ConvLayer<S> conv1;
  NormLayer<S> bn2;
  ConvLayer<S> conv2;
  ConvLayer<S> proj;
  int stride = 1;
};

template <class S>
struct MaskBranch {
  std::vector<ResidualUnit<S>> down;  // each preceded by a 3x3/2 maxpool
  std::vector<ResidualUnit<S>> up;    // each followed by a bilinear upsample
  ConvLayer<S> out1;                  // 1x1, with bias
  ConvLayer<S> out2;                  // 1x1, with bias; its output feeds the sigmoid
};

template <class S>
struct AttentionModule {
  std::string name;
  std::vector<ResidualUnit<S>> trunk;
  MaskBranch<S> mask;
  bool enabled = true;  // false: module computes x' = T(x) exactly
};

template <class S>
struct Network {
  NetworkConfig cfg;
  AblationSpec ablation;
  ConvLayer<S> stem;                        // 7x7 stride 2
  std::vector<AttentionModule<S>> modules;  // the six attention modules in order
  std::vector<ResidualUnit<S>> transitions; // two stride-2 stage transitions
  NormLayer<S> head_bn;
  TensorT<S> fc_feat_w, fc_feat_b;  // [C3,F], [F]
  TensorT<S> fc_out_w, fc_out_b;    // [F+1,1], [1]
};

using NetworkF = Network<float>;

// ---------------------------------------------------------------------------
// construction

namespace detail {

template <class S>
TensorT<S> he_conv(std::size_t f, std::size_t c, std::size_t kh, std::size_t kw, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(c * kh * kw));
  std::vector<S> v(f * c * kh * kw);
  for (S& x : v) x = static_cast<S>(rand_normal(rng) * stddev);
  return TensorT<S>::parameter({f, c, kh, kw}, std::move(v));
}

template <class S>
TensorT<S> he_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  std::vector<S> v(in * out);
  for (S& x : v) x = static_cast<S>(rand_normal(rng) * stddev);
  return TensorT<S>::parameter({in, out}, std::move(v));
}

template <class S>
NormLayer<S> make_norm(std::size_t c) {
  NormLayer<S> n;
  n.gamma = TensorT<S>::parameter({c}, std::vector<S>(c, S(1)));
  n.beta = TensorT<S>::parameter({c}, std::vector<S>(c, S(0)));
  n.stats = BatchNormStats<S>(c);
  return n;
}

template <class S>
ResidualUnit<S> make_unit(std::size_t cin, std::size_t cout, int stride, Rng& rng) {
  ResidualUnit<S> u;
  u.stride = stride;
  u.bn1 = make_norm<S>(cin);
  u.conv1.w = he_conv<S>(cout, cin, 3, 3, rng);
  u.bn2 = make_norm<S>(cout);
  u.conv2.w = he_conv<S>(cout, cout, 3, 3, rng);
  if (cin != cout || stride != 1) u.proj.w = he_conv<S>(cout, cin, 1, 1, rng);
  return u;
}

template <class S>
AttentionModule<S> make_attention(const std::string& name, std::size_t c, int trunk_units,
                                  int depth, Rng& rng) {
  AttentionModule<S> m;
  m.name = name;
  for (int i = 0; i < trunk_units; ++i) m.trunk.push_back(make_unit<S>(c, c, 1, rng));
  for (int i = 0; i < depth; ++i) m.mask.down.push_back(make_unit<S>(c, c, 1, rng));
  for (int i = 0; i < depth; ++i) m.mask.up.push_back(make_unit<S>(c, c, 1, rng));
  m.mask.out1.w = he_conv<S>(c, c, 1, 1, rng);
  m.mask.out1.b = TensorT<S>::parameter({c}, std::vector<S>(c, S(0)));
  m.mask.out2.w = he_conv<S>(c, c, 1, 1, rng);
  m.mask.out2.b = TensorT<S>::parameter({c}, std::vector<S>(c, S(0)));
  return m;
}

}  // namespace detail

/// Builds the full subnet with He-style initialization from the seeded RNG.
/// Identical (cfg, seed) pairs produce bit-identical parameters.
template <class S>
Network<S> build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Network<S> net;
  net.cfg = cfg;
  const auto c1 = static_cast<std::size_t>(cfg.widths[0]);
  const auto c2 = static_cast<std::size_t>(cfg.widths[1]);
  const auto c3 = static_cast<std::size_t>(cfg.widths[2]);

  net.stem.w = detail::he_conv<S>(c1, 1, 7, 7, rng);
  net.stem.b = TensorT<S>::parameter({c1}, std::vector<S>(c1, S(0)));

  const auto& names = attention_module_names();
  net.modules.push_back(detail::make_attention<S>(names[0], c1, cfg.trunk_units, cfg.mask_depths[0], rng));
  net.transitions.push_back(detail::make_unit<S>(c1, c2, 2, rng));
  net.modules.push_back(detail::make_attention<S>(names[1], c2, cfg.trunk_units, cfg.mask_depths[1], rng));
  net.modules.push_back(detail::make_attention<S>(names[2], c2, cfg.trunk_units, cfg.mask_depths[1], rng));
  net.transitions.push_back(detail::make_unit<S>(c2, c3, 2, rng));
  net.modules.push_back(detail::make_attention<S>(names[3], c3, cfg.trunk_units, cfg.mask_depths[2], rng));
  net.modules.push_back(detail::make_attention<S>(names[4], c3, cfg.trunk_units, cfg.mask_depths[2], rng));
  net.modules.push_back(detail::make_attention<S>(names[5], c3, cfg.trunk_units, cfg.mask_depths[2], rng));

  net.head_bn = detail::make_norm<S>(c3);
  const auto F = static_cast<std::size_t>(cfg.feature_width);
  net.fc_feat_w = detail::he_linear<S>(c3, F, rng);
  net.fc_feat_b = TensorT<S>::parameter({F}, std::vector<S>(F, S(0)));
  net.fc_out_w = detail::he_linear<S>(F + 1, 1, rng);
  net.fc_out_b = TensorT<S>::parameter({1}, std::vector<S>(1, S(0)));
  return net;
}

// ---------------------------------------------------------------------------
// parameter registry (stable order: drives the optimizer and checkpoints)

namespace detail {

template <class S, class Fn>
void visit_unit(const std::string& prefix, ResidualUnit<S>& u, Fn&& fn) {
  fn(prefix + ".bn1.gamma", u.bn1.gamma);
  fn(prefix + ".bn1.beta", u.bn1.beta);
  fn(prefix + ".conv1.w", u.conv1.w);
  fn(prefix + ".bn2.gamma", u.bn2.gamma);
  fn(prefix + ".bn2.beta", u.bn2.beta);
  fn(prefix + ".conv2.w", u.conv2.w);
  if (u.proj.w.defined()) fn(prefix + ".proj.w", u.proj.w);
}

template <class S, class Fn>
void visit_module(AttentionModule<S>& m, Fn&& fn) {
  for (std::size_t i = 0; i < m.trunk.size(); ++i)
    visit_unit(m.name + ".trunk." + std::to_string(i), m.trunk[i], fn);
  for (std::size_t i = 0; i < m.mask.down.size(); ++i)
    visit_unit(m.name + ".mask.down." + std::to_string(i), m.mask.down[i], fn);
  for (std::size_t i = 0; i < m.mask.up.size(); ++i)
    visit_unit(m.name + ".mask.up." + std::to_string(i), m.mask.up[i], fn);
  fn(m.name + ".mask.out1.w", m.mask.out1.w);
  fn(m.name + ".mask.out1.b", m.mask.out1.b);
  fn(m.name + ".mask.out2.w", m.mask.out2.w);
  fn(m.name + ".mask.out2.b", m.mask.out2.b);
}

template <class S, class Fn>
void visit_unit_stats(const std::string& prefix, ResidualUnit<S>& u, Fn&& fn) {
  fn(prefix + ".bn1.running_mean", u.bn1.stats.running_mean);
  fn(prefix + ".bn1.running_var", u.bn1.stats.running_var);
  fn(prefix + ".bn2.running_mean", u.bn2.stats.running_mean);
  fn(prefix + ".bn2.running_var", u.bn2.stats.running_var);
}

}  // namespace detail

/// Calls fn(name, tensor) for every trainable parameter, in a fixed order.
template <class S, class Fn>
void visit_params(Network<S>& net, Fn&& fn) {
  fn(std::string("stem.w"), net.stem.w);
  fn(std::string("stem.b"), net.stem.b);
  auto module_at = [&](std::size_t i) -> AttentionModule<S>& { return net.modules[i]; };
  detail::visit_module(module_at(0), fn);
  detail::visit_unit(std::string("trans.0"), net.transitions[0], fn);
  detail::visit_module(module_at(1), fn);
  detail::visit_module(module_at(2), fn);
  detail::visit_unit(std::string("trans.1"), net.transitions[1], fn);
  detail::visit_module(module_at(3), fn);
  detail::visit_module(module_at(4), fn);
  detail::visit_module(module_at(5), fn);
  fn(std::string("head.bn.gamma"), net.head_bn.gamma);
  fn(std::string("head.bn.beta"), net.head_bn.beta);
  fn(std::string("head.fc1.w"), net.fc_feat_w);
  fn(std::string("head.fc1.b"), net.fc_feat_b);
  fn(std::string("head.fc2.w"), net.fc_out_w);
  fn(std::string("head.fc2.b"), net.fc_out_b);
}

/// Calls fn(name, vector) for every batch-norm running statistic.
template <class S, class Fn>
void visit_buffers(Network<S>& net, Fn&& fn) {
  auto unit_stats = [&](const std::string& prefix, ResidualUnit<S>& u) {
    detail::visit_unit_stats(prefix, u, fn);
  };
  auto module_stats = [&](AttentionModule<S>& m) {
    for (std::size_t i = 0; i < m.trunk.size(); ++i)
      unit_stats(m.name + ".trunk." + std::to_string(i), m.trunk[i]);
    for (std::size_t i = 0; i < m.mask.down.size(); ++i)
      unit_stats(m.name + ".mask.down." + std::to_string(i), m.mask.down[i]);
    for (std::size_t i = 0; i < m.mask.up.size(); ++i)
      unit_stats(m.name + ".mask.up." + std::to_string(i), m.mask.up[i]);
  };
  module_stats(net.modules[0]);
  unit_stats("trans.0", net.transitions[0]);
  module_stats(net.modules[1]);
  module_stats(net.modules[2]);
  unit_stats("trans.1", net.transitions[1]);
  module_stats(net.modules[3]);
  module_stats(net.modules[4]);
  module_stats(net.modules[5]);
  fn(std::string("head.bn.running_mean"), net.head_bn.stats.running_mean);
  fn(std::string("head.bn.running_var"), net.head_bn.stats.running_var);
}

template <class S>
std::size_t parameter_count(Network<S>& net) {
  std::size_t n = 0;
  visit_params(net, [&](const std::string&, TensorT<S>& t) { n += t.size(); });
  return n;
}

/// Independent copy: training one network never touches the other.
template <class S>
Network<S> deep_copy(Network<S>& net) {
  Network<S> copy = net;  // running stats copy by value; tensors still shared
  visit_params(copy, [](const std::string&, TensorT<S>& t) { t = t.clone(); });
  return copy;
}

// ---------------------------------------------------------------------------
// forward

template <class S>
TensorT<S> residual_unit(const TensorT<S>& x, ResidualUnit<S>& u, bool training) {
  if (x.shape()[1] != u.conv1.w.shape()[1])
    throw ShapeError("residual_unit channel mismatch: input " + shape_str(x.shape()) +
                     ", weights " + shape_str(u.conv1.w.shape()));
  TensorT<S> a = batchnorm2d(x, u.bn1.gamma, u.bn1.beta, u.bn1.stats, training);
  a = relu(a);
  const TensorT<S> shortcut =
      u.proj.w.defined() ? conv2d(x, u.proj.w, static_cast<std::size_t>(u.stride), 0) : x;
  a = conv2d(a, u.conv1.w, static_cast<std::size_t>(u.stride), 1);
  a = batchnorm2d(a, u.bn2.gamma, u.bn2.beta, u.bn2.stats, training);
  a = relu(a);
  a = conv2d(a, u.conv2.w, 1, 1);
  return add(a, shortcut);
}

/// x' = T(x) (.) (1 + M(x)). The soft-mask branch is an hourglass of
/// maxpool/residual-unit pairs mirrored by residual-unit/upsample pairs,
/// closed by two 1x1 convolutions and a sigmoid. A disabled module returns
/// T(x) untouched and records no capture.
template <class S>
TensorT<S> attention_module(const TensorT<S>& x, AttentionModule<S>& m, bool training,
                            AttentionCapture<S>* capture) {
  TensorT<S> trunk = x;
  for (auto& u : m.trunk) trunk = residual_unit(trunk, u, training);
  if (!m.enabled) return trunk;

  TensorT<S> s = x;
  std::vector<std::pair<std::size_t, std::size_t>> sizes;
  for (auto& u : m.mask.down) {
    sizes.emplace_back(s.shape()[2], s.shape()[3]);
    s = maxpool2d(s, 3, 2, 1);
    s = residual_unit(s, u, training);
  }
  for (std::size_t i = 0; i < m.mask.up.size(); ++i) {
    s = residual_unit(s, m.mask.up[i], training);
    const auto [h, w] = sizes[sizes.size() - 1 - i];
    s = upsample_bilinear(s, h, w);
  }
  s = conv2d(s, m.mask.out1.w, m.mask.out1.b, 1, 0);
  s = conv2d(s, m.mask.out2.w, m.mask.out2.b, 1, 0);
  if (capture) {
    capture->module = m.name;
    capture->shape = s.shape();
    capture->pre_sigmoid.assign(s.values().begin(), s.values().end());
  }
  const TensorT<S> soft_mask = sigmoid(s);
  return hadamard(trunk, affine(soft_mask, S(1), S(1)));
}

template <class S>
struct ForwardOutput {
  TensorT<S> age;  // [N,1], months
  std::vector<AttentionCapture<S>> captures;
};

/// Whole-subnet forward pass. images: [N,1,S,S] in [0,1]; gender: [N,1]
/// holding 0.0/1.0. Capturing copies the pre-sigmoid logits and never
/// perturbs the computation.
template <class S>
ForwardOutput<S> forward(Network<S>& net, const TensorT<S>& images, const TensorT<S>& gender,
                         bool training, bool capture = false) {
  const auto sz = static_cast<std::size_t>(net.cfg.input_size);
  if (images.rank() != 4 || images.shape()[1] != 1 || images.shape()[2] != sz ||
      images.shape()[3] != sz)
    throw ShapeError("forward expects images [N,1," + std::to_string(sz) + "," +
                     std::to_string(sz) + "], got " + shape_str(images.shape()));
  if (gender.rank() != 2 || gender.shape()[0] != images.shape()[0] || gender.shape()[1] != 1)
    throw ShapeError("forward expects gender [N,1], got " + shape_str(gender.shape()));

  ForwardOutput<S> out;
  TensorT<S> x = conv2d(images, net.stem.w, net.stem.b, 2, 3);
  x = maxpool2d(x, 3, 2, 1);

  auto run_module = [&](AttentionModule<S>& m) {
    AttentionCapture<S> cap;
    const bool want = capture && m.enabled;
    x = attention_module(x, m, training, want ? &cap : nullptr);
    if (want) out.captures.push_back(std::move(cap));
  };
  run_module(net.modules[0]);
  x = residual_unit(x, net.transitions[0], training);
  run_module(net.modules[1]);
  run_module(net.modules[2]);
  x = residual_unit(x, net.transitions[1], training);
  run_module(net.modules[3]);
  run_module(net.modules[4]);
  run_module(net.modules[5]);

  x = batchnorm2d(x, net.head_bn.gamma, net.head_bn.beta, net.head_bn.stats, training);
  x = relu(x);
  TensorT<S> feat = reduce_mean(x, {2, 3});  // global average pool -> [N,C3]
  feat = add(matmul(feat, net.fc_feat_w), net.fc_feat_b);

  const TensorT<S> g = net.ablation.gender_enabled
                           ? gender
                           : TensorT<S>::zeros({gender.shape()[0], std::size_t(1)});
  const TensorT<S> fused = concat_features(feat, g);
  out.age = add(matmul(fused, net.fc_out_w), net.fc_out_b);
  return out;
}

/// Deep copy with the requested parts disabled. Unknown module names throw.
template <class S>
Network<S> apply_ablation(Network<S>& net, const AblationSpec& spec) {
  const auto& names = attention_module_names();
  for (const std::string& name : spec.disabled_modules)
    if (std::find(names.begin(), names.end(), name) == names.end())
      throw ValueError("unknown attention module: " + name);
  Network<S> out = deep_copy(net);
  out.ablation = spec;
  for (auto& m : out.modules)
    m.enabled = std::find(spec.disabled_modules.begin(), spec.disabled_modules.end(), m.name) ==
                spec.disabled_modules.end();
  return out;
}

// Defined in src/heatmap.cpp: maps normalized values through the fixed
// blue->red table.
RgbImage render_heatmap(const std::vector<double>& values, int width, int height);

/// Channel-mean of the first sample's pre-sigmoid logits, min-max normalized
/// per map; constant maps render mid-scale.
template <class S>
RgbImage export_heatmap(const AttentionCapture<S>& capture) {
  if (capture.shape.size() != 4) throw ShapeError("capture must be [N,C,H,W]");
  const std::size_t C = capture.shape[1], H = capture.shape[2], W = capture.shape[3];
  std::vector<double> mean(H * W, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H * W; ++i)
      mean[i] += static_cast<double>(capture.pre_sigmoid[c * H * W + i]);
  for (double& v : mean) v /= static_cast<double>(C);
  return render_heatmap(mean, static_cast<int>(W), static_cast<int>(H));
}

}  // namespace boneage
