#include "hyperconv/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "hyperconv/config.hpp"
#include "hyperconv/tensor_io.hpp"

namespace hyperconv {

ActivationPlacement placement_from_string(const std::string& s) {
  if (s == "at_downsample") return ActivationPlacement::AtDownsample;
  if (s == "all_blocks") return ActivationPlacement::AllBlocks;
  throw std::invalid_argument("unknown activation placement '" + s + "'");
}

std::string to_string(ActivationPlacement p) {
  return p == ActivationPlacement::AtDownsample ? "at_downsample" : "all_blocks";
}

void NetworkConfig::validate() const {
  if (stage_depths.empty() || stage_depths.size() != stage_channels.size())
    throw std::invalid_argument("network: stage_depths and stage_channels must be non-empty and equal length");
  for (auto d : stage_depths)
    if (d <= 0) throw std::invalid_argument("network: stage depths must be positive");
  for (auto c : stage_channels)
    if (c <= 0) throw std::invalid_argument("network: stage channels must be positive");
  if (stem_channels <= 0 || num_classes <= 0 || image_size <= 0 || input_channels <= 0)
    throw std::invalid_argument("network: stem_channels, num_classes, image_size, input_channels must be positive");
  if (variant == BlockVariant::TensorForm) {
    for (auto c : stage_channels)
      if (c > kTensorFormMaxChannels)
        throw std::invalid_argument("network: TensorForm stage width " + std::to_string(c) + " exceeds the n<=" +
                                    std::to_string(kTensorFormMaxChannels) + " guard");
  }
}

Activation NetworkConfig::make_activation(std::int64_t channels) const {
  Activation a;
  a.kind = activation;
  a.min_val = hardtanh_min;
  a.max_val = hardtanh_max;
  a.radius = activation_radius > 0.0 ? activation_radius : std::sqrt(static_cast<double>(channels));
  a.validate();
  return a;
}

namespace {

Tensor randn_grad(std::vector<std::int64_t> shape, Rng& rng, double stddev) {
  Tensor t = Tensor::randn(std::move(shape), rng, stddev);
  t.requires_grad = true;
  return t;
}

bool uses_transition(const NetworkConfig& cfg) {
  return cfg.variant == BlockVariant::Eq5 || cfg.variant == BlockVariant::TensorForm;
}

}  // namespace

Model build_network(const NetworkConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Model m;
  m.cfg = cfg;

  const std::int64_t c0 = cfg.stem_channels;
  m.stem_conv1 = randn_grad({c0, cfg.input_channels, 7, 7},
                            rng, 1.0 / std::sqrt(static_cast<double>(cfg.input_channels * 49)));
  m.stem_conv2 = randn_grad({c0, c0, 3, 3}, rng, 1.0 / std::sqrt(static_cast<double>(c0 * 9)));
  if (cfg.batchnorm) {
    m.stem_bn1 = BatchNormState::make(c0);
    m.stem_bn2 = BatchNormState::make(c0);
  }

  std::int64_t total_blocks = 0;
  for (auto d : cfg.stage_depths) total_blocks += d;
  const double proj_scale = 1.0 / static_cast<double>(total_blocks);

  std::int64_t in_ch = c0;
  for (std::size_t s = 0; s < cfg.stage_depths.size(); ++s) {
    const std::int64_t width = cfg.stage_channels[s];
    StageWeights stage;
    const bool entry_act = cfg.placement == ActivationPlacement::AtDownsample;

    if (cfg.variant == BlockVariant::TensorForm) {
      Transition tr;
      tr.w = randn_grad({width, in_ch}, rng, 1.0 / std::sqrt(static_cast<double>(in_ch)));
      if (cfg.batchnorm) tr.bn = BatchNormState::make(width);
      stage.transition = std::move(tr);
      for (std::int64_t b = 0; b < cfg.stage_depths[s]; ++b) {
        BlockConfig bc;
        bc.variant = cfg.variant;
        bc.in_channels = bc.out_channels = width;
        bc.expansion = cfg.expansion;
        bc.weight_shared = cfg.weight_shared;
        bc.stride = 1;
        bc.batchnorm = false;  // TensorForm blocks are bare residual updates
        if (cfg.placement == ActivationPlacement::AllBlocks) bc.activation = cfg.make_activation(width);
        stage.blocks.push_back({bc, init_block(bc, rng, proj_scale)});
      }
    } else if (cfg.variant == BlockVariant::Eq5) {
      // entry block runs at the incoming width; the transition then changes
      // width and resolution for the whole (skip + residual) stream
      for (std::int64_t b = 0; b < cfg.stage_depths[s]; ++b) {
        const bool entry = b == 0;
        BlockConfig bc;
        bc.variant = cfg.variant;
        bc.in_channels = bc.out_channels = entry ? in_ch : width;
        bc.expansion = cfg.expansion;
        bc.weight_shared = cfg.weight_shared;
        bc.stride = 1;
        bc.batchnorm = cfg.batchnorm;
        if (cfg.placement == ActivationPlacement::AllBlocks && !entry)
          bc.activation = cfg.make_activation(width);
        stage.blocks.push_back({bc, init_block(bc, rng, proj_scale)});
        if (entry) {
          Transition tr;
          tr.w = randn_grad({width, in_ch}, rng, 1.0 / std::sqrt(static_cast<double>(in_ch)));
          if (cfg.batchnorm) tr.bn = BatchNormState::make(width);
          stage.transition = std::move(tr);
        }
      }
      (void)entry_act;
    } else {
      for (std::int64_t b = 0; b < cfg.stage_depths[s]; ++b) {
        const bool entry = b == 0;
        BlockConfig bc;
        bc.variant = cfg.variant;
        bc.in_channels = entry ? in_ch : width;
        bc.out_channels = width;
        bc.expansion = cfg.expansion;
        bc.weight_shared = cfg.weight_shared;
        bc.stride = entry ? 2 : 1;
        bc.batchnorm = cfg.batchnorm;
        if (cfg.placement == ActivationPlacement::AllBlocks || (entry_act && entry))
          bc.activation = cfg.make_activation(width);
        stage.blocks.push_back({bc, init_block(bc, rng, proj_scale)});
      }
    }
    m.stages.push_back(std::move(stage));
    in_ch = width;
  }

  m.head_w = randn_grad({cfg.num_classes, in_ch}, rng, 1.0 / std::sqrt(static_cast<double>(in_ch)));
  m.head_b = Tensor::zeros({cfg.num_classes});
  m.head_b.requires_grad = true;
  return m;
}

namespace {

NodeId maybe_bn_state(Graph& g, NodeId x, std::optional<BatchNormState>& bn, BatchNormMode mode) {
  if (!bn.has_value()) return x;
  return batchnorm(g, x, g.param(&bn->gamma), g.param(&bn->beta), &*bn, mode);
}

NodeId apply_transition(Graph& g, Transition& tr, NodeId x, BatchNormMode mode) {
  ConvSpec spec;
  spec.in_channels = g.value(x).extent(1);
  spec.out_channels = tr.w.extent(0);
  spec.kernel_h = spec.kernel_w = 1;
  spec.stride = 2;
  NodeId out = conv2d(g, x, g.param(&tr.w), spec);
  return maybe_bn_state(g, out, tr.bn, mode);
}

}  // namespace

NodeId network_forward(Graph& g, Model& model, NodeId images, BatchNormMode mode) {
  const NetworkConfig& cfg = model.cfg;
  const Tensor& im = g.value(images);
  if (im.shape().size() != 4 || im.extent(1) != cfg.input_channels)
    throw std::invalid_argument("network: images must be [N," + std::to_string(cfg.input_channels) +
                                ",H,W], got " + shape_to_string(im.shape()));

  ConvSpec stem1;
  stem1.in_channels = cfg.input_channels;
  stem1.out_channels = cfg.stem_channels;
  stem1.kernel_h = stem1.kernel_w = 7;
  stem1.stride = 2;
  NodeId x = conv2d(g, images, g.param(&model.stem_conv1), stem1);
  x = maybe_bn_state(g, x, model.stem_bn1, mode);

  ConvSpec stem2;
  stem2.in_channels = stem2.out_channels = cfg.stem_channels;
  stem2.kernel_h = stem2.kernel_w = 3;
  stem2.stride = 2;
  x = conv2d(g, x, g.param(&model.stem_conv2), stem2);
  x = maybe_bn_state(g, x, model.stem_bn2, mode);

  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    StageWeights& stage = model.stages[s];
    const std::int64_t width = cfg.stage_channels[s];
    if (cfg.variant == BlockVariant::TensorForm) {
      x = apply_transition(g, *stage.transition, x, mode);
      if (cfg.placement == ActivationPlacement::AtDownsample)
        x = apply_activation(g, x, cfg.make_activation(width));
      for (auto& unit : stage.blocks) x = block_forward(g, x, unit.cfg, unit.weights, mode);
    } else if (cfg.variant == BlockVariant::Eq5) {
      for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
        x = block_forward(g, x, stage.blocks[b].cfg, stage.blocks[b].weights, mode);
        if (b == 0) {
          x = apply_transition(g, *stage.transition, x, mode);
          if (cfg.placement == ActivationPlacement::AtDownsample)
            x = apply_activation(g, x, cfg.make_activation(width));
        }
      }
    } else {
      for (auto& unit : stage.blocks) x = block_forward(g, x, unit.cfg, unit.weights, mode);
    }
  }

  x = global_avg_pool(g, x);
  return linear(g, x, g.param(&model.head_w), g.param(&model.head_b));
}

Tensor run_logits(Model& model, const Tensor& images, BatchNormMode mode) {
  Graph g;
  NodeId in = g.constant(images);
  NodeId logits = network_forward(g, model, in, mode);
  return g.value(logits);
}

std::int64_t count_parameters(const Model& model) {
  std::int64_t total = 0;
  for (const auto& nt : trainable_parameters(const_cast<Model&>(model))) total += nt.tensor->numel();
  return total;
}

namespace {

void add_bn(std::vector<NamedTensor>& out, const std::string& prefix, std::optional<BatchNormState>& bn) {
  if (!bn.has_value()) return;
  out.push_back({prefix + ".gamma", &bn->gamma, true});
  out.push_back({prefix + ".beta", &bn->beta, true});
  out.push_back({prefix + ".running_mean", &bn->running_mean, false});
  out.push_back({prefix + ".running_var", &bn->running_var, false});
}

}  // namespace

std::vector<NamedTensor> state_tensors(Model& model) {
  std::vector<NamedTensor> out;
  out.push_back({"stem.conv1", &model.stem_conv1, true});
  add_bn(out, "stem.bn1", model.stem_bn1);
  out.push_back({"stem.conv2", &model.stem_conv2, true});
  add_bn(out, "stem.bn2", model.stem_bn2);
  for (std::size_t s = 0; s < model.stages.size(); ++s) {
    StageWeights& st = model.stages[s];
    const std::string sp = "stage" + std::to_string(s);
    if (st.transition.has_value()) {
      out.push_back({sp + ".transition.w", &st.transition->w, true});
      add_bn(out, sp + ".transition.bn", st.transition->bn);
    }
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      BlockWeights& w = st.blocks[b].weights;
      if (st.blocks[b].cfg.variant == BlockVariant::TensorForm) {
        out.push_back({bp + ".tensor_a", &w.tensor_a, true});
        out.push_back({bp + ".tensor_b", &w.tensor_b, true});
        continue;
      }
      out.push_back({bp + ".dw_x", &w.dw_x, true});
      out.push_back({bp + ".dw_y", &w.dw_y, true});
      out.push_back({bp + ".mix", &w.mix, true});
      if (w.proj.numel() > 0) out.push_back({bp + ".proj", &w.proj, true});
      add_bn(out, bp + ".bn_mid", w.bn_mid);
      add_bn(out, bp + ".bn_end", w.bn_end);
      if (w.has_downsample) {
        out.push_back({bp + ".downsample.w", &w.ds_w, true});
        add_bn(out, bp + ".downsample.bn", w.bn_ds);
      }
    }
  }
  out.push_back({"head.w", &model.head_w, true});
  out.push_back({"head.b", &model.head_b, true});
  return out;
}

std::vector<NamedTensor> trainable_parameters(Model& model) {
  std::vector<NamedTensor> out;
  for (auto& nt : state_tensors(model))
    if (nt.trainable) out.push_back(nt);
  return out;
}

namespace {

void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(Model& model, const std::string& path) {
  auto tensors = state_tensors(model);
  for (const auto& nt : tensors)
    if (!nt.tensor->all_finite())
      throw std::runtime_error("checkpoint: refusing to write non-finite tensor '" + nt.name + "'");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write("HCPT", 4);
  os.put(1);  // version
  const std::string manifest = network_config_to_text(model.cfg);
  put_u32_le(os, static_cast<std::uint32_t>(manifest.size()));
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  put_u32_le(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put_u32_le(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    write_tnsr(os, *nt.tensor);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "HCPT", 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path);
  const int version = is.get();
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t mlen = get_u32_le(is);
  std::string manifest(mlen, '\0');
  is.read(manifest.data(), mlen);
  if (!is) throw std::runtime_error("checkpoint: truncated manifest");
  NetworkConfig cfg = network_config_from_text(manifest);
  Model model = build_network(cfg);
  auto tensors = state_tensors(model);
  const std::uint32_t count = get_u32_le(is);
  if (count != tensors.size())
    throw std::runtime_error("checkpoint: has " + std::to_string(count) + " records, model needs " +
                             std::to_string(tensors.size()));
  for (auto& nt : tensors) {
    const std::uint32_t nlen = get_u32_le(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    if (!is) throw std::runtime_error("checkpoint: truncated record name");
    if (name != nt.name)
      throw std::runtime_error("checkpoint: record '" + name + "' does not match expected '" + nt.name + "'");
    Tensor loaded = read_tnsr(is);
    if (loaded.shape() != nt.tensor->shape())
      throw std::runtime_error("checkpoint: record '" + name + "' has shape " + shape_to_string(loaded.shape()) +
                               ", manifest expects " + shape_to_string(nt.tensor->shape()));
    nt.tensor->data() = std::move(loaded.data());
  }
  return model;
}

}  // namespace hyperconv
