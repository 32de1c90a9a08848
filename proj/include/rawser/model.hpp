// The recognizer: parallel strided 1-D convolution branches over raw
// samples (feature extraction) feeding a configurable stack of 2-D
// convolution, pooling, LSTM and dense layers (classification).
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rawser/audio.hpp"
#include "rawser/layers.hpp"
#include "rawser/params.hpp"
#include "rawser/text.hpp"

namespace rawser {

struct BlockLayerSpec {
  enum class Kind { Conv2D, Pool2D, Lstm, Dense };
  Kind kind = Kind::Dense;
  std::size_t kh = 0, kw = 0;  // conv2d filter / pool2d window
  std::size_t units = 0;       // conv2d maps, lstm cells, dense units

  static BlockLayerSpec conv2d(std::size_t kh, std::size_t kw, std::size_t maps) { return {Kind::Conv2D, kh, kw, maps}; }
  static BlockLayerSpec pool2d(std::size_t ph, std::size_t pw) { return {Kind::Pool2D, ph, pw, 0}; }
  static BlockLayerSpec lstm(std::size_t cells) { return {Kind::Lstm, 0, 0, cells}; }
  static BlockLayerSpec dense(std::size_t units) { return {Kind::Dense, 0, 0, units}; }

  friend bool operator==(const BlockLayerSpec&, const BlockLayerSpec&) = default;

  std::string str() const {
    switch (kind) {
      case Kind::Conv2D: return "conv2d(" + std::to_string(kh) + "x" + std::to_string(kw) + "," + std::to_string(units) + ")";
      case Kind::Pool2D: return "pool2d(" + std::to_string(kh) + "x" + std::to_string(kw) + ")";
      case Kind::Lstm: return "lstm(" + std::to_string(units) + ")";
      case Kind::Dense: return "dense(" + std::to_string(units) + ")";
    }
    return {};
  }
};

using BlockSpec = std::vector<BlockLayerSpec>;

inline std::string block_spec_str(const BlockSpec& b) {
  std::string s;
  for (std::size_t i = 0; i < b.size(); ++i) s += (i ? " " : "") + b[i].str();
  return s;
}

/// Parses e.g. "conv2d(2x2,32) pool2d(2x2) lstm(128) dense(1024)".
inline BlockSpec parse_block_spec(const std::string& text) {
  BlockSpec out;
  std::istringstream in(text);
  std::string tok;
  auto bad = [&](const std::string& t) {
    return ConfigError("bad block layer '" + t + "' (expected conv2d(HxW,N), pool2d(HxW), lstm(N) or dense(N))");
  };
  auto num = [&](const std::string& t, const std::string& s) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v == 0) throw bad(t);
    return v;
  };
  auto pair = [&](const std::string& t, const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) throw bad(t);
    return std::pair{num(t, s.substr(0, x)), num(t, s.substr(x + 1))};
  };
  while (in >> tok) {
    const auto open = tok.find('(');
    if (open == std::string::npos || tok.back() != ')') throw bad(tok);
    const std::string name = tok.substr(0, open);
    const std::string args = tok.substr(open + 1, tok.size() - open - 2);
    if (name == "conv2d") {
      const auto comma = args.find(',');
      if (comma == std::string::npos) throw bad(tok);
      const auto [h, w] = pair(tok, args.substr(0, comma));
      out.push_back(BlockLayerSpec::conv2d(h, w, num(tok, args.substr(comma + 1))));
    } else if (name == "pool2d") {
      const auto [h, w] = pair(tok, args);
      out.push_back(BlockLayerSpec::pool2d(h, w));
    } else if (name == "lstm") {
      out.push_back(BlockLayerSpec::lstm(num(tok, args)));
    } else if (name == "dense") {
      out.push_back(BlockLayerSpec::dense(num(tok, args)));
    } else {
      throw bad(tok);
    }
  }
  return out;
}

inline BlockSpec default_block() {
  return {BlockLayerSpec::conv2d(2, 2, 32), BlockLayerSpec::pool2d(2, 2), BlockLayerSpec::lstm(128),
          BlockLayerSpec::dense(1024)};
}

enum class BlockKind { DNN, LSTM, LSTM_DNN, CNN, CNN_DNN, CNN_LSTM, CNN_LSTM_DNN };

inline const std::vector<std::pair<BlockKind, std::string>>& block_kinds() {
  static const std::vector<std::pair<BlockKind, std::string>> kinds = {
      {BlockKind::DNN, "DNN"},         {BlockKind::LSTM_DNN, "LSTM-DNN"}, {BlockKind::LSTM, "LSTM"},
      {BlockKind::CNN_DNN, "CNN-DNN"}, {BlockKind::CNN_LSTM, "CNN-LSTM"}, {BlockKind::CNN_LSTM_DNN, "CNN-LSTM-DNN"},
      {BlockKind::CNN, "CNN"}};
  return kinds;
}

inline BlockKind parse_block_kind(const std::string& s) {
  for (const auto& [k, name] : block_kinds())
    if (name == s) return k;
  throw ConfigError("unknown classification block kind '" + s + "'");
}

/// Classification-block layer stacks for the composition ablation. CNN
/// variants close their conv stack with a 2x2 max pool, as the default does.
inline BlockSpec build_ablation_block(BlockKind kind) {
  using L = BlockLayerSpec;
  switch (kind) {
    case BlockKind::DNN: return {L::dense(1024), L::dense(512), L::dense(512)};
    case BlockKind::LSTM: return {L::lstm(256), L::lstm(256)};
    case BlockKind::LSTM_DNN: return {L::lstm(256), L::lstm(256), L::dense(1024)};
    case BlockKind::CNN:
      return {L::conv2d(2, 2, 256), L::conv2d(2, 2, 256), L::conv2d(2, 2, 256), L::pool2d(2, 2)};
    case BlockKind::CNN_DNN: return {L::conv2d(2, 2, 256), L::conv2d(2, 2, 256), L::pool2d(2, 2), L::dense(1024)};
    case BlockKind::CNN_LSTM: return {L::conv2d(2, 2, 256), L::pool2d(2, 2), L::lstm(256), L::lstm(256)};
    case BlockKind::CNN_LSTM_DNN: return default_block();
  }
  throw ConfigError("unknown classification block kind");
}

/// Branch filter widths (ms) for the parallel-branch-count ablation.
inline std::vector<double> parallel_branch_sets(int n) {
  switch (n) {
    case 1: return {25};
    case 2: return {25, 100};
    case 3: return {15, 25, 100};
    case 4: return {15, 25, 100, 200};
    default: throw ConfigError("parallel branch count must be 1..4, got " + std::to_string(n));
  }
}

struct ModelConfig {
  int sample_rate = 16000;
  double input_seconds = 6.0;
  std::vector<double> branch_widths_ms = {15, 25, 100};
  double branch_stride_ms = 10.0;
  std::size_t filters_per_branch = 40;
  PoolMode pool_mode = PoolMode::Max;
  std::size_t pooled_frames = 64;
  BlockSpec block = default_block();
  std::size_t n_classes = 4;
  double dropout = 0.3;

  std::size_t input_samples() const {
    return static_cast<std::size_t>(std::llround(input_seconds * sample_rate));
  }
  std::size_t stride_samples() const { return ms_to_samples(branch_stride_ms, sample_rate); }

  KeyValues to_entries(const std::string& prefix = "model.") const {
    return {{prefix + "sample_rate", std::to_string(sample_rate)},
            {prefix + "input_seconds", format_double(input_seconds)},
            {prefix + "branch_widths_ms", join_doubles(branch_widths_ms)},
            {prefix + "branch_stride_ms", format_double(branch_stride_ms)},
            {prefix + "filters_per_branch", std::to_string(filters_per_branch)},
            {prefix + "pool_mode", to_string(pool_mode)},
            {prefix + "pooled_frames", std::to_string(pooled_frames)},
            {prefix + "block", block_spec_str(block)},
            {prefix + "n_classes", std::to_string(n_classes)},
            {prefix + "dropout", format_double(dropout)}};
  }

  /// Applies one key (without prefix); false when the key is not a model key.
  bool apply(const std::string& key, const std::string& v) {
    const std::string k = "model." + key;
    auto positive = [&](std::int64_t x) {
      if (x < 1) throw ConfigError("'" + k + "' must be >= 1");
      return static_cast<std::size_t>(x);
    };
    if (key == "sample_rate") sample_rate = static_cast<int>(positive(parse_int(k, v)));
    else if (key == "input_seconds") input_seconds = parse_double(k, v);
    else if (key == "branch_widths_ms") branch_widths_ms = parse_double_list(k, v);
    else if (key == "branch_stride_ms") branch_stride_ms = parse_double(k, v);
    else if (key == "filters_per_branch") filters_per_branch = positive(parse_int(k, v));
    else if (key == "pool_mode") {
      try {
        pool_mode = parse_pool_mode(v);
      } catch (const Error& e) {
        throw ConfigError("'" + k + "': " + e.what());
      }
    } else if (key == "pooled_frames") pooled_frames = positive(parse_int(k, v));
    else if (key == "block") block = parse_block_spec(v);
    else if (key == "n_classes") n_classes = positive(parse_int(k, v));
    else if (key == "dropout") dropout = parse_double(k, v);
    else return false;
    return true;
  }

  std::string to_text() const {
    std::string s;
    for (const auto& [k, v] : to_entries("")) s += k + " = " + v + "\n";
    return s;
  }

  static ModelConfig from_text(const std::string& text) {
    ModelConfig c;
    for (const auto& [k, v] : parse_key_values(text, "model config")) {
      if (!c.apply(k, v)) throw ConfigError("unknown model key '" + k + "'");
    }
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ModelConfig desk_scale_model() {
  ModelConfig c;
  c.filters_per_branch = 8;
  c.pooled_frames = 16;
  c.input_seconds = 2.0;
  return c;
}

/// Shape bookkeeping through the classification block.
struct BlockShape {
  enum class Form { Map, Sequence, Vector } form = Form::Map;
  std::size_t channels = 1, height = 0, width = 0;  // Map
  std::size_t steps = 0, features = 0;              // Sequence / Vector (features)
};

class Model {
 public:
  struct Branch {
    Conv1DLayer conv;
    BatchNormLayer bn;
  };
  struct BlockLayer {
    BlockLayerSpec spec;
    Conv2DLayer conv;
    BatchNormLayer bn;
    LstmLayer lstm;
    DenseLayer dense;
  };

  Model() = default;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  // Layers hold shared tensor handles; use clone() for an independent copy.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// He-normal weights, zero biases (LSTM forget bias 1), deterministic in seed.
  static Model build(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    Model m;
    m.config_ = config;
    Rng rng(seed);
    const std::size_t stride = config.stride_samples();
    const std::size_t n_in = config.input_samples();
    for (double ms : config.branch_widths_ms) {
      const std::size_t width = ms_to_samples(ms, config.sample_rate);
      Branch b{Conv1DLayer(config.filters_per_branch, width, stride, rng), BatchNormLayer(config.filters_per_branch)};
      if (conv_output_length(n_in, width, stride) < config.pooled_frames) {
        throw ConfigError("branch of " + format_double(ms) + " ms yields " +
                          std::to_string(conv_output_length(n_in, width, stride)) + " frames, fewer than pooled_frames " +
                          std::to_string(config.pooled_frames));
      }
      m.branches_.push_back(std::move(b));
    }
    BlockShape s;
    s.form = BlockShape::Form::Map;
    s.channels = 1;
    s.height = config.pooled_frames;
    s.width = config.branch_widths_ms.size() * config.filters_per_branch;
    for (const auto& spec : config.block) {
      BlockLayer layer;
      layer.spec = spec;
      switch (spec.kind) {
        case BlockLayerSpec::Kind::Conv2D:
          if (s.form != BlockShape::Form::Map) throw ConfigError("conv2d must precede lstm and dense layers");
          if (s.height < spec.kh || s.width < spec.kw) throw ConfigError("conv2d filter larger than its input map");
          layer.conv = Conv2DLayer(s.channels, spec.units, spec.kh, spec.kw, rng);
          layer.bn = BatchNormLayer(spec.units);
          s.channels = spec.units;
          s.height -= spec.kh - 1;
          s.width -= spec.kw - 1;
          break;
        case BlockLayerSpec::Kind::Pool2D:
          if (s.form != BlockShape::Form::Map) throw ConfigError("pool2d must precede lstm and dense layers");
          if (s.height < spec.kh || s.width < spec.kw) throw ConfigError("pool2d window larger than its input map");
          s.height /= spec.kh;
          s.width /= spec.kw;
          break;
        case BlockLayerSpec::Kind::Lstm: {
          if (s.form == BlockShape::Form::Vector) throw ConfigError("lstm cannot follow a dense layer");
          if (s.form == BlockShape::Form::Map) {
            s.form = BlockShape::Form::Sequence;
            s.steps = s.height;
            s.features = s.channels * s.width;
          }
          layer.lstm = LstmLayer(s.features, spec.units, rng);
          s.features = spec.units;
          break;
        }
        case BlockLayerSpec::Kind::Dense: {
          const std::size_t in = flat_features(s);
          layer.dense = DenseLayer(in, spec.units, rng);
          s.form = BlockShape::Form::Vector;
          s.features = spec.units;
          break;
        }
      }
      m.block_.push_back(std::move(layer));
    }
    m.output_ = DenseLayer(flat_features(s), config.n_classes, rng);
    m.register_parameters();
    return m;
  }

  static void validate(const ModelConfig& c) {
    if (c.sample_rate <= 0) throw ConfigError("sample_rate must be positive");
    if (!(c.input_seconds > 0.0)) throw ConfigError("input_seconds must be positive");
    if (c.branch_widths_ms.empty()) throw ConfigError("branch_widths_ms must not be empty");
    for (double w : c.branch_widths_ms) {
      if (!(w > 0.0) || w >= c.input_seconds * 1000.0) {
        throw ConfigError("branch width " + format_double(w) + " ms must lie in (0, input length)");
      }
      if (ms_to_samples(w, c.sample_rate) < 1) throw ConfigError("branch width rounds to zero samples");
    }
    if (c.stride_samples() < 1) throw ConfigError("branch stride rounds to zero samples");
    if (c.filters_per_branch < 1 || c.pooled_frames < 1) throw ConfigError("filters and pooled frames must be >= 1");
    if (c.n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<Branch>& branches() const { return branches_; }
  const std::vector<BlockLayer>& block() const { return block_; }
  const ParamList& parameters() const { return params_; }
  ParamList& parameters() { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.tensor.size();
    return n;
  }

  /// Concatenated branch features, [batch x 1 x F x (branches * filters)].
  Tensor features(const Tensor& batch, Mode mode) {
    if (batch.rank() != 2 || batch.dim(1) != config_.input_samples()) {
      throw ShapeError("model input must be [batch x " + std::to_string(config_.input_samples()) + "], got " +
                       shape_str(batch.shape()));
    }
    std::vector<Tensor> pooled;
    for (auto& b : branches_) {
      Tensor y = relu(b.bn.forward(b.conv.forward(batch), mode));
      pooled.push_back(adaptive_pool1d(y, config_.pool_mode, config_.pooled_frames));
    }
    Tensor cat = pooled.size() == 1 ? pooled.front() : concat(pooled, 1);  // [B x C x F]
    Tensor frames = permute(cat, {0, 2, 1});                                // [B x F x C]
    return reshape(frames, {batch.dim(0), 1, config_.pooled_frames, cat.dim(1)});
  }

  /// Logits [batch x n_classes]. Train mode needs an RNG for dropout.
  Tensor forward(const Tensor& batch, Mode mode, Rng* rng = nullptr) {
    Tensor x = features(batch, mode);
    const std::size_t nb = batch.dim(0);
    BlockShape::Form form = BlockShape::Form::Map;
    auto to_vector = [&](Tensor t) {
      if (form == BlockShape::Form::Map) return reshape(t, {nb, t.size() / nb});
      if (form == BlockShape::Form::Sequence) {
        const std::size_t steps = t.dim(1), feat = t.dim(2);
        Tensor last = reshape(slice(t, 1, steps - 1, steps), {nb, feat});
        if (config_.dropout > 0.0 && mode == Mode::Train) {
          if (!rng) throw Error("Model::forward: train mode with dropout needs an RNG");
          last = dropout(last, config_.dropout, mode, *rng);
        }
        return last;
      }
      return t;
    };
    for (auto& layer : block_) {
      switch (layer.spec.kind) {
        case BlockLayerSpec::Kind::Conv2D:
          x = relu(layer.bn.forward(layer.conv.forward(x), mode));
          break;
        case BlockLayerSpec::Kind::Pool2D:
          x = pool2d(x, PoolMode::Max, layer.spec.kh, layer.spec.kw);
          break;
        case BlockLayerSpec::Kind::Lstm:
          if (form == BlockShape::Form::Map) {
            // Each (pooled) time row, flattened across channels x width, is one step.
            const std::size_t ch = x.dim(1), h = x.dim(2), w = x.dim(3);
            x = reshape(permute(x, {0, 2, 1, 3}), {nb, h, ch * w});
            form = BlockShape::Form::Sequence;
          }
          x = layer.lstm.forward(x);
          break;
        case BlockLayerSpec::Kind::Dense:
          x = relu(layer.dense.forward(to_vector(x)));
          form = BlockShape::Form::Vector;
          break;
      }
    }
    Tensor logits = output_.forward(to_vector(x));
    detail::check_finite(logits, "model forward (NaN detected)");
    return logits;
  }

  /// Deep copy with independent parameter storage.
  Model clone() const {
    Model m = build(config_, 0);
    m.load_values(*this);
    return m;
  }

  void load_values(const Model& other) {
    if (other.params_.size() != params_.size()) throw Error("load_values: parameter sets differ");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].tensor.values() = other.params_[i].tensor.values();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> s;
    for (const auto& p : params_) s.push_back(p.tensor.values());
    return s;
  }

  void restore(const std::vector<std::vector<double>>& s) {
    if (s.size() != params_.size()) throw Error("restore: snapshot does not match parameter set");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (s[i].size() != params_[i].tensor.size()) throw Error("restore: size mismatch for " + params_[i].name);
      params_[i].tensor.values() = s[i];
    }
  }

  std::string serialize() const { return serialize_params(params_, config_.to_text()); }

  /// Rebuilds from serialized bytes, checking every parameter's name and
  /// shape against what the embedded config produces.
  static Model deserialize(const std::string& bytes) {
    ParamFile f = deserialize_params(bytes);
    Model m = build(ModelConfig::from_text(f.header), 0);
    if (f.params.size() != m.params_.size()) {
      throw SerializationError("model file has " + std::to_string(f.params.size()) + " parameters, config implies " +
                               std::to_string(m.params_.size()));
    }
    for (std::size_t i = 0; i < f.params.size(); ++i) {
      auto& dst = m.params_[i];
      const auto& src = f.params[i];
      if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
        throw SerializationError("parameter " + src.name + shape_str(src.tensor.shape()) + " does not match " +
                                 dst.name + shape_str(dst.tensor.shape()));
      }
      dst.tensor.values() = src.tensor.values();
    }
    return m;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static Model load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

 private:
  static std::size_t flat_features(const BlockShape& s) {
    switch (s.form) {
      case BlockShape::Form::Map: return s.channels * s.height * s.width;
      case BlockShape::Form::Sequence:
      case BlockShape::Form::Vector: return s.features;
    }
    return 0;
  }

  void register_parameters() {
    params_.clear();
    auto add = [this](std::string name, const Tensor& t, bool trainable = true) {
      params_.push_back({std::move(name), t, trainable});
    };
    auto add_bn = [&](const std::string& prefix, const BatchNormLayer& bn) {
      add(prefix + ".gamma", bn.gamma);
      add(prefix + ".beta", bn.beta);
      add(prefix + ".running_mean", bn.running_mean, false);
      add(prefix + ".running_var", bn.running_var, false);
    };
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      const std::string p = "branch" + std::to_string(i);
      add(p + ".conv.weight", branches_[i].conv.weight);
      add(p + ".conv.bias", branches_[i].conv.bias);
      add_bn(p + ".bn", branches_[i].bn);
    }
    for (std::size_t i = 0; i < block_.size(); ++i) {
      const std::string p = "block" + std::to_string(i);
      const auto& l = block_[i];
      switch (l.spec.kind) {
        case BlockLayerSpec::Kind::Conv2D:
          add(p + ".conv.weight", l.conv.weight);
          add(p + ".conv.bias", l.conv.bias);
          add_bn(p + ".bn", l.bn);
          break;
        case BlockLayerSpec::Kind::Pool2D: break;
        case BlockLayerSpec::Kind::Lstm:
          add(p + ".lstm.w_ih", l.lstm.w_ih);
          add(p + ".lstm.w_hh", l.lstm.w_hh);
          add(p + ".lstm.bias", l.lstm.bias);
          break;
        case BlockLayerSpec::Kind::Dense:
          add(p + ".dense.weight", l.dense.weight);
          add(p + ".dense.bias", l.dense.bias);
          break;
      }
    }
    add("output.weight", output_.weight);
    add("output.bias", output_.bias);
  }

  ModelConfig config_;
  std::vector<Branch> branches_;
  std::vector<BlockLayer> block_;
  DenseLayer output_;
  ParamList params_;
};

}  // namespace rawser
