#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ega/ops.hpp"
#include "ega/serialize.hpp"

namespace ega {

// Clean examples normalize through Main, adversarial ones through Auxiliary;
// all other weights are shared between the two streams.
enum class BranchId { Main, Auxiliary };

enum class RunMode { Train, Eval };

inline const char* to_string(BranchId b) { return b == BranchId::Main ? "main" : "aux"; }

struct ConvStage {
  int channels = 0;
  bool pool_after = false;
};

struct ArchDescriptor {
  int input_channels = 3;
  int input_size = 64;
  int num_classes = 5;
  std::vector<ConvStage> stages = {{32, false}, {32, true}, {64, false}, {64, true}, {128, false}};
  uint64_t seed = 0;

  int pool_factor() const {
    int f = 1;
    for (const auto& s : stages)
      if (s.pool_after) f *= 2;
    return f;
  }
  int feature_size() const { return input_size / pool_factor(); }
  int feature_channels() const { return stages.empty() ? input_channels : stages.back().channels; }

  void validate() const {
    if (num_classes < 2) throw ConfigError("architecture needs at least 2 classes");
    if (input_channels < 1 || input_size < 1) throw ConfigError("bad input dimensions");
    if (input_size % pool_factor() != 0)
      throw ConfigError("input size " + std::to_string(input_size) +
                        " not divisible by total pooling factor " + std::to_string(pool_factor()));
    for (const auto& s : stages)
      if (s.channels < 1) throw ConfigError("conv stage needs at least 1 channel");
  }

  bool operator==(const ArchDescriptor& o) const {
    if (input_channels != o.input_channels || input_size != o.input_size ||
        num_classes != o.num_classes || seed != o.seed || stages.size() != o.stages.size())
      return false;
    for (size_t i = 0; i < stages.size(); ++i)
      if (stages[i].channels != o.stages[i].channels || stages[i].pool_after != o.stages[i].pool_after)
        return false;
    return true;
  }
};

struct BnBranch {
  TensorPtr gamma, beta, running_mean, running_var;
};

struct ConvLayer {
  TensorPtr weight, bias;
  BnBranch main_bn, aux_bn;
  bool pool_after = false;
};

struct ForwardOutput {
  TensorPtr logits;    // N x C
  TensorPtr features;  // N x K x H' x W', pre-GAP
  BranchId branch = BranchId::Main;
};

class EgaModel {
 public:
  ArchDescriptor descriptor;
  std::vector<ConvLayer> layers;
  TensorPtr head_weight, head_bias;
  // attack passes and gradient-check harnesses freeze running statistics
  bool update_running_stats = true;
  float bn_momentum = 0.1f;
  float bn_eps = 1e-5f;

  static EgaModel build(const ArchDescriptor& desc) {
    desc.validate();
    EgaModel m;
    m.descriptor = desc;
    RandomSource rng(desc.seed);
    int c_in = desc.input_channels;
    for (const auto& stage : desc.stages) {
      ConvLayer layer;
      layer.pool_after = stage.pool_after;
      layer.weight = Tensor::make({stage.channels, c_in, 3, 3}, true);
      const float stddev = std::sqrt(2.0f / float(c_in * 9));
      for (auto& v : layer.weight->data) v = rng.normal() * stddev;
      layer.bias = Tensor::make({stage.channels}, true);
      layer.main_bn = make_bn(stage.channels);
      layer.aux_bn = make_bn(stage.channels);
      m.layers.push_back(std::move(layer));
      c_in = stage.channels;
    }
    const int K = desc.feature_channels();
    m.head_weight = Tensor::make({desc.num_classes, K}, true);
    const float head_std = std::sqrt(2.0f / float(K));
    for (auto& v : m.head_weight->data) v = rng.normal() * head_std;
    m.head_bias = Tensor::make({desc.num_classes}, true);
    return m;
  }

  ForwardOutput forward(Tape& tape, const TensorPtr& batch, BranchId branch, RunMode mode) {
    if (batch->rank() != 4 || batch->dim(1) != descriptor.input_channels ||
        batch->dim(2) != descriptor.input_size || batch->dim(3) != descriptor.input_size)
      throw DimensionError("forward: batch shape " + detail::shape_str(batch->shape) +
                           " does not match descriptor input " +
                           std::to_string(descriptor.input_channels) + "x" +
                           std::to_string(descriptor.input_size) + "x" +
                           std::to_string(descriptor.input_size));
    const bool training = mode == RunMode::Train;
    BnMode bn{training, training && update_running_stats};
    TensorPtr h = batch;
    for (auto& layer : layers) {
      auto& bnp = branch == BranchId::Main ? layer.main_bn : layer.aux_bn;
      h = conv2d(tape, h, layer.weight, layer.bias, 1, 1);
      h = batch_norm(tape, h, bnp.gamma, bnp.beta, bnp.running_mean, bnp.running_var, bn,
                     bn_momentum, bn_eps);
      h = relu(tape, h);
      if (layer.pool_after) h = max_pool2(tape, h);
    }
    ForwardOutput out;
    out.features = h;
    out.branch = branch;
    out.logits = linear(tape, global_avg_pool(tape, h), head_weight, head_bias);
    return out;
  }

  std::vector<TensorPtr> parameters() {
    std::vector<TensorPtr> ps;
    for (auto& l : layers) {
      ps.push_back(l.weight);
      ps.push_back(l.bias);
      ps.push_back(l.main_bn.gamma);
      ps.push_back(l.main_bn.beta);
      ps.push_back(l.aux_bn.gamma);
      ps.push_back(l.aux_bn.beta);
    }
    ps.push_back(head_weight);
    ps.push_back(head_bias);
    return ps;
  }

  std::vector<std::pair<std::string, TensorPtr>> named_state() {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      const std::string p = "conv" + std::to_string(i);
      out.emplace_back(p + ".weight", l.weight);
      out.emplace_back(p + ".bias", l.bias);
      for (auto [branch, bn] : {std::pair{"main", &l.main_bn}, std::pair{"aux", &l.aux_bn}}) {
        const std::string q = p + ".bn." + branch;
        out.emplace_back(q + ".gamma", bn->gamma);
        out.emplace_back(q + ".beta", bn->beta);
        out.emplace_back(q + ".running_mean", bn->running_mean);
        out.emplace_back(q + ".running_var", bn->running_var);
      }
    }
    out.emplace_back("head.weight", head_weight);
    out.emplace_back("head.bias", head_bias);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p->zero_grad();
  }

  EgaModel clone() const {
    EgaModel m = *this;
    auto dup = [](TensorPtr& t) { t = t->clone(); };
    for (auto& l : m.layers) {
      dup(l.weight);
      dup(l.bias);
      for (auto* bn : {&l.main_bn, &l.aux_bn}) {
        dup(bn->gamma);
        dup(bn->beta);
        dup(bn->running_mean);
        dup(bn->running_var);
      }
    }
    dup(m.head_weight);
    dup(m.head_bias);
    return m;
  }

 private:
  static BnBranch make_bn(int channels) {
    BnBranch bn;
    bn.gamma = Tensor::make({channels}, true);
    bn.gamma->fill(1.0f);
    bn.beta = Tensor::make({channels}, true);
    bn.running_mean = Tensor::make({channels});
    bn.running_var = Tensor::make({channels});
    bn.running_var->fill(1.0f);
    return bn;
  }
};

// Keeps requires_grad off on all model parameters for a scope (the PGD inner
// loop differentiates only with respect to the input).
class ParamFreezeGuard {
 public:
  explicit ParamFreezeGuard(EgaModel& m) : params_(m.parameters()) {
    saved_.reserve(params_.size());
    for (auto& p : params_) {
      saved_.push_back(p->requires_grad);
      p->requires_grad = false;
    }
  }
  ~ParamFreezeGuard() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i]->set_requires_grad(saved_[i]);
  }
  ParamFreezeGuard(const ParamFreezeGuard&) = delete;
  ParamFreezeGuard& operator=(const ParamFreezeGuard&) = delete;

 private:
  std::vector<TensorPtr> params_;
  std::vector<bool> saved_;
};

class StatFreezeGuard {
 public:
  explicit StatFreezeGuard(EgaModel& m) : model_(m), saved_(m.update_running_stats) {
    model_.update_running_stats = false;
  }
  ~StatFreezeGuard() { model_.update_running_stats = saved_; }
  StatFreezeGuard(const StatFreezeGuard&) = delete;
  StatFreezeGuard& operator=(const StatFreezeGuard&) = delete;

 private:
  EgaModel& model_;
  bool saved_;
};

// CAM_c(h,w) = sum_k a_k^c f_k(h,w); stays on the tape so training can
// differentiate through it. The head bias is not part of the map.
inline TensorPtr compute_cam(Tape& tape, const ForwardOutput& out, const EgaModel& model,
                             const std::vector<int>& classes) {
  return cam_select(tape, out.features, model.head_weight, classes);
}

inline TensorPtr compute_cam(Tape& tape, const ForwardOutput& out, const EgaModel& model,
                             int class_index) {
  std::vector<int> classes(size_t(out.features->dim(0)), class_index);
  return compute_cam(tape, out, model, classes);
}

// ---------------------------------------------------------------------------
// checkpoints: magic "EGA1", version, descriptor block, named float records
// ---------------------------------------------------------------------------

constexpr uint16_t kCheckpointVersion = 1;

inline void write_descriptor(ByteWriter& w, const ArchDescriptor& d) {
  w.u16(uint16_t(d.input_channels));
  w.u16(uint16_t(d.input_size));
  w.u16(uint16_t(d.num_classes));
  w.u64(d.seed);
  w.u16(uint16_t(d.stages.size()));
  for (const auto& s : d.stages) {
    w.u16(uint16_t(s.channels));
    w.u8(s.pool_after ? 1 : 0);
  }
}

inline ArchDescriptor read_descriptor(ByteReader& r) {
  ArchDescriptor d;
  d.input_channels = r.u16();
  d.input_size = r.u16();
  d.num_classes = r.u16();
  d.seed = r.u64();
  uint16_t n = r.u16();
  d.stages.clear();
  for (uint16_t i = 0; i < n; ++i) {
    ConvStage s;
    s.channels = r.u16();
    s.pool_after = r.u8() != 0;
    d.stages.push_back(s);
  }
  return d;
}

inline std::string encode_checkpoint(EgaModel& model,
                                     const std::vector<NamedTensor>& extra_records = {}) {
  ByteWriter w;
  w.bytes("EGA1", 4);
  w.u16(kCheckpointVersion);
  write_descriptor(w, model.descriptor);
  auto named = model.named_state();
  w.u32(uint32_t(named.size() + extra_records.size()));
  auto put = [&w](const std::string& name, const std::vector<int>& shape, const float* data,
                  size_t n) {
    w.str(name);
    w.u32(uint32_t(shape.size()));
    for (int d : shape) w.u32(uint32_t(d));
    w.f32_array(data, n);
  };
  for (auto& [name, t] : named) put(name, t->shape, t->data.data(), t->data.size());
  for (auto& rec : extra_records) put(rec.name, rec.shape, rec.data.data(), rec.data.size());
  return w.buffer();
}

inline void save_checkpoint(EgaModel& model, const std::string& path,
                            const std::vector<NamedTensor>& extra_records = {}) {
  const std::string bytes = encode_checkpoint(model, extra_records);
  ByteWriter w;
  w.bytes(bytes.data(), bytes.size());
  w.write_file(path);
}

struct LoadedCheckpoint {
  EgaModel model;
  std::map<std::string, NamedTensor> extras;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("EGA1");
  uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    r.fail("unsupported checkpoint version " + std::to_string(version));
  ArchDescriptor desc = read_descriptor(r);
  desc.validate();

  LoadedCheckpoint out{EgaModel::build(desc), {}};
  std::map<std::string, TensorPtr> wanted;
  for (auto& [name, t] : out.model.named_state()) wanted[name] = t;

  std::map<std::string, bool> seen;
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor rec;
    rec.name = r.str();
    uint32_t rank = r.u32();
    size_t n = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      rec.shape.push_back(int(r.u32()));
      if (rec.shape.back() <= 0) r.fail("non-positive dimension in record " + rec.name);
      n *= size_t(rec.shape.back());
    }
    rec.data.resize(n);
    r.f32_array(rec.data.data(), n);
    auto it = wanted.find(rec.name);
    if (it != wanted.end()) {
      if (it->second->shape != rec.shape)
        throw FormatError(path + ": record " + rec.name + " has shape " +
                          detail::shape_str(rec.shape) + ", model expects " +
                          detail::shape_str(it->second->shape));
      it->second->data = std::move(rec.data);
      seen[rec.name] = true;
    } else {
      out.extras[rec.name] = std::move(rec);
    }
  }
  if (!r.exhausted()) r.fail(std::to_string(r.remaining()) + " trailing bytes");

  // evaluation only uses Main, so a checkpoint stripped of Auxiliary state
  // stays loadable: absent aux records fall back to a copy of Main
  for (size_t i = 0; i < out.model.layers.size(); ++i) {
    const std::string p = "conv" + std::to_string(i);
    for (const char* field : {"weight", "bias"})
      if (!seen.count(p + "." + field))
        throw FormatError(path + ": missing required record " + p + "." + field);
    auto& l = out.model.layers[i];
    auto copy_missing = [&](const char* field, const TensorPtr& from, const TensorPtr& to) {
      if (!seen.count(p + ".bn.aux." + field)) to->data = from->data;
    };
    for (const char* field : {"gamma", "beta", "running_mean", "running_var"})
      if (!seen.count(p + ".bn.main." + field))
        throw FormatError(path + ": missing required record " + p + ".bn.main." + field);
    copy_missing("gamma", l.main_bn.gamma, l.aux_bn.gamma);
    copy_missing("beta", l.main_bn.beta, l.aux_bn.beta);
    copy_missing("running_mean", l.main_bn.running_mean, l.aux_bn.running_mean);
    copy_missing("running_var", l.main_bn.running_var, l.aux_bn.running_var);
  }
  for (const char* field : {"head.weight", "head.bias"})
    if (!seen.count(field)) throw FormatError(path + ": missing required record " + std::string(field));
  return out;
}

// Raw state snapshot for bitwise comparisons in tests and the trainer.
inline std::string checkpoint_bytes(EgaModel& model) { return encode_checkpoint(model); }

}  // namespace ega
