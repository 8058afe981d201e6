#include "gdt/model.hpp"

#include <algorithm>

#include "gdt/errors.hpp"
#include "gdt/ops.hpp"

namespace gdt::dt {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLayerNormEps = 1e-5;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape) {
    std::normal_distribution<double> dist(0.0, kInitStd);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng_);
    return Tensor::from(std::move(shape), std::move(data), true);
  }
  static Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }
  static Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

 private:
  std::mt19937_64 rng_;
};

Tensor rows_tensor(std::vector<double> data, std::size_t rows, std::size_t cols) {
  return Tensor::from({rows, cols}, std::move(data));
}

}  // namespace

void DTConfig::validate() const {
  if (context_length == 0) throw ContractError("context_length must be >= 1");
  if (embed_dim == 0 || n_layers == 0 || n_heads == 0) {
    throw ContractError("embed_dim, n_layers and n_heads must be positive");
  }
  if (embed_dim % n_heads != 0) {
    throw ContractError("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (state_dim == 0 || action_dim == 0 || goal_dim == 0) {
    throw ContractError("state_dim, action_dim and goal_dim must be positive");
  }
  if (max_timestep == 0) throw ContractError("max_timestep must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ContractError("dropout must lie in [0, 1)");
  if (!(return_scale > 0.0)) throw ContractError("return_scale must be positive");
}

void to_json(nlohmann::json& j, const DTConfig& c) {
  j = nlohmann::json{{"context_length", c.context_length},
                     {"embed_dim", c.embed_dim},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"state_dim", c.state_dim},
                     {"action_dim", c.action_dim},
                     {"goal_dim", c.goal_dim},
                     {"max_timestep", c.max_timestep},
                     {"dropout", c.dropout},
                     {"return_scale", c.return_scale}};
}

void from_json(const nlohmann::json& j, DTConfig& c) {
  j.at("context_length").get_to(c.context_length);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("state_dim").get_to(c.state_dim);
  j.at("action_dim").get_to(c.action_dim);
  j.at("goal_dim").get_to(c.goal_dim);
  j.at("max_timestep").get_to(c.max_timestep);
  j.at("dropout").get_to(c.dropout);
  j.at("return_scale").get_to(c.return_scale);
}

TrajectoryWindow TrajectoryWindow::padded(std::size_t context, std::size_t flat_state_dim, std::size_t action_dim) {
  TrajectoryWindow w;
  w.returns_to_go.assign(context, 0.0);
  w.states.assign(context * flat_state_dim, 0.0);
  w.actions.assign(context * action_dim, 0.0);
  w.timesteps.assign(context, 0);
  w.mask.assign(context, 0);
  return w;
}

void validate_window(const TrajectoryWindow& w, const DTConfig& config) {
  const std::size_t k = config.context_length;
  if (w.mask.size() != k || w.returns_to_go.size() != k || w.timesteps.size() != k ||
      w.states.size() != k * config.flat_state_dim() || w.actions.size() != k * config.action_dim) {
    throw DimensionError("trajectory window does not match context " + std::to_string(k) + ", state dim " +
                         std::to_string(config.flat_state_dim()) + ", action dim " +
                         std::to_string(config.action_dim));
  }
  bool seen_real = false;
  std::size_t prev_t = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (w.mask[i]) {
      if (seen_real && w.timesteps[i] != prev_t + 1) {
        throw ContractError("window timesteps must increase by one over unmasked positions");
      }
      if (w.timesteps[i] >= config.max_timestep) {
        throw RangeError("timestep " + std::to_string(w.timesteps[i]) + " >= max_timestep " +
                         std::to_string(config.max_timestep));
      }
      prev_t = w.timesteps[i];
      seen_real = true;
    } else if (seen_real) {
      throw ContractError("window padding must be left-aligned");
    }
  }
}

// ---------------------------------------------------------------------------

DTModel::DTModel(const DTConfig& cfg, std::uint64_t seed) : config(cfg) {
  config.validate();
  Initializer init(seed);
  const std::size_t e = config.embed_dim;
  return_w = init.normal({1, e});
  return_b = Initializer::zeros(e);
  state_w = init.normal({config.flat_state_dim(), e});
  state_b = Initializer::zeros(e);
  action_w = init.normal({config.action_dim, e});
  action_b = Initializer::zeros(e);
  timestep_table = init.normal({config.max_timestep, e});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockParams b;
    b.ln1_gain = Initializer::ones(e);
    b.ln1_bias = Initializer::zeros(e);
    b.query_w = init.normal({e, e});
    b.query_b = Initializer::zeros(e);
    b.key_w = init.normal({e, e});
    b.key_b = Initializer::zeros(e);
    b.value_w = init.normal({e, e});
    b.value_b = Initializer::zeros(e);
    b.proj_w = init.normal({e, e});
    b.proj_b = Initializer::zeros(e);
    b.ln2_gain = Initializer::ones(e);
    b.ln2_bias = Initializer::zeros(e);
    b.fc1_w = init.normal({e, 4 * e});
    b.fc1_b = Initializer::zeros(4 * e);
    b.fc2_w = init.normal({4 * e, e});
    b.fc2_b = Initializer::zeros(e);
    blocks.push_back(std::move(b));
  }
  final_ln_gain = Initializer::ones(e);
  final_ln_bias = Initializer::zeros(e);
  head_w = init.normal({e, config.action_dim});
  head_b = Initializer::zeros(config.action_dim);
}

std::vector<NamedTensor> DTModel::named_parameters() const {
  std::vector<NamedTensor> out = {
      {"embed.return.weight", return_w}, {"embed.return.bias", return_b},  {"embed.state.weight", state_w},
      {"embed.state.bias", state_b},     {"embed.action.weight", action_w}, {"embed.action.bias", action_b},
      {"embed.timestep", timestep_table},
  };
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "block" + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", b.ln1_gain});
    out.push_back({p + "ln1.bias", b.ln1_bias});
    out.push_back({p + "attn.query.weight", b.query_w});
    out.push_back({p + "attn.query.bias", b.query_b});
    out.push_back({p + "attn.key.weight", b.key_w});
    out.push_back({p + "attn.key.bias", b.key_b});
    out.push_back({p + "attn.value.weight", b.value_w});
    out.push_back({p + "attn.value.bias", b.value_b});
    out.push_back({p + "attn.proj.weight", b.proj_w});
    out.push_back({p + "attn.proj.bias", b.proj_b});
    out.push_back({p + "ln2.gain", b.ln2_gain});
    out.push_back({p + "ln2.bias", b.ln2_bias});
    out.push_back({p + "mlp.fc1.weight", b.fc1_w});
    out.push_back({p + "mlp.fc1.bias", b.fc1_b});
    out.push_back({p + "mlp.fc2.weight", b.fc2_w});
    out.push_back({p + "mlp.fc2.bias", b.fc2_b});
  }
  out.push_back({"final_ln.gain", final_ln_gain});
  out.push_back({"final_ln.bias", final_ln_bias});
  out.push_back({"head.weight", head_w});
  out.push_back({"head.bias", head_b});
  return out;
}

std::vector<Tensor> DTModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t DTModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::size_t parameter_count(const DTConfig& c) {
  const std::size_t e = c.embed_dim;
  const std::size_t embed = 2 * e + (c.flat_state_dim() + 1) * e + (c.action_dim + 1) * e + c.max_timestep * e;
  const std::size_t block = 4 * e + 4 * (e * e + e) + (e * 4 * e + 4 * e) + (4 * e * e + e);
  return embed + c.n_layers * block + 2 * e + e * c.action_dim + c.action_dim;
}

void DTModel::load_parameters(const std::vector<NamedTensor>& params) {
  auto mine = named_parameters();
  if (params.size() != mine.size()) {
    throw FormatError("checkpoint holds " + std::to_string(params.size()) + " tensors, model expects " +
                      std::to_string(mine.size()));
  }
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (params[i].name != mine[i].name) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + params[i].name + "', expected '" +
                        mine[i].name + "'");
    }
    if (params[i].tensor.shape() != mine[i].tensor.shape()) {
      throw FormatError("checkpoint tensor '" + params[i].name + "' has shape " +
                        shape_str(params[i].tensor.shape()) + ", expected " + shape_str(mine[i].tensor.shape()));
    }
    auto dst = mine[i].tensor.mutable_data();
    auto src = params[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

DTModel DTModel::clone() const {
  DTModel copy(config, 0);
  copy.load_parameters(named_parameters());
  return copy;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> stack_masks(std::span<const TrajectoryWindow> windows) {
  std::vector<std::uint8_t> out;
  for (const auto& w : windows) out.insert(out.end(), w.mask.begin(), w.mask.end());
  return out;
}

std::vector<std::uint8_t> token_mask(std::span<const TrajectoryWindow> windows) {
  std::vector<std::uint8_t> out;
  for (const auto& w : windows) {
    for (auto m : w.mask) out.insert(out.end(), 3, m);
  }
  return out;
}

Tensor stack_actions(std::span<const TrajectoryWindow> windows, std::size_t action_dim) {
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& w : windows) {
    data.insert(data.end(), w.actions.begin(), w.actions.end());
    rows += w.context();
  }
  return rows_tensor(std::move(data), rows, action_dim);
}

Tensor tokenize(std::span<const TrajectoryWindow> windows, const DTModel& model) {
  const auto& cfg = model.config;
  if (windows.empty()) throw ContractError("tokenize: empty batch");
  const std::size_t k = cfg.context_length;
  const std::size_t rows = windows.size() * k;
  std::vector<double> rtg, states, actions;
  std::vector<std::size_t> steps;
  rtg.reserve(rows);
  states.reserve(rows * cfg.flat_state_dim());
  actions.reserve(rows * cfg.action_dim);
  steps.reserve(rows);
  for (const auto& w : windows) {
    validate_window(w, cfg);
    for (double r : w.returns_to_go) rtg.push_back(r / cfg.return_scale);
    states.insert(states.end(), w.states.begin(), w.states.end());
    actions.insert(actions.end(), w.actions.begin(), w.actions.end());
    steps.insert(steps.end(), w.timesteps.begin(), w.timesteps.end());
  }
  for (auto t : steps) {
    if (t >= cfg.max_timestep) {
      throw RangeError("timestep " + std::to_string(t) + " >= max_timestep " + std::to_string(cfg.max_timestep));
    }
  }
  const Tensor time_emb = gather_rows(model.timestep_table, steps);
  const Tensor r = add(linear(rows_tensor(std::move(rtg), rows, 1), model.return_w, model.return_b), time_emb);
  const Tensor s = add(linear(rows_tensor(std::move(states), rows, cfg.flat_state_dim()), model.state_w, model.state_b),
                       time_emb);
  const Tensor a =
      add(linear(rows_tensor(std::move(actions), rows, cfg.action_dim), model.action_w, model.action_b), time_emb);
  const Tensor parts[] = {r, s, a};
  return interleave_rows(parts);
}

Tensor causal_attention_block(const Tensor& tokens, const BlockParams& b, std::size_t n_seq, std::size_t n_heads,
                              std::span<const std::uint8_t> mask, const ForwardOptions& options, double p) {
  const Tensor h = layer_norm(tokens, b.ln1_gain, b.ln1_bias, kLayerNormEps);
  const Tensor q = linear(h, b.query_w, b.query_b);
  const Tensor k = linear(h, b.key_w, b.key_b);
  const Tensor v = linear(h, b.value_w, b.value_b);
  Tensor attn = linear(causal_attention(q, k, v, n_seq, n_heads, mask), b.proj_w, b.proj_b);
  if (options.training && p > 0.0) attn = dropout(attn, p, *options.rng);
  return add(tokens, attn);
}

Tensor feed_forward_block(const Tensor& x, const BlockParams& b, const ForwardOptions& options, double p) {
  const Tensor h = layer_norm(x, b.ln2_gain, b.ln2_bias, kLayerNormEps);
  Tensor m = linear(gelu(linear(h, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
  if (options.training && p > 0.0) m = dropout(m, p, *options.rng);
  return add(x, m);
}

Tensor forward(std::span<const TrajectoryWindow> windows, const DTModel& model, const ForwardOptions& options) {
  const auto& cfg = model.config;
  const double p = cfg.dropout;
  if (options.training && p > 0.0 && options.rng == nullptr) {
    throw ContractError("training forward pass with dropout needs an RNG");
  }
  Tensor x = tokenize(windows, model);
  if (options.training && p > 0.0) x = dropout(x, p, *options.rng);
  const auto mask = token_mask(windows);
  for (const auto& block : model.blocks) {
    x = causal_attention_block(x, block, windows.size(), cfg.n_heads, mask, options, p);
    x = feed_forward_block(x, block, options, p);
  }
  x = layer_norm(x, model.final_ln_gain, model.final_ln_bias, kLayerNormEps);
  const Tensor state_tokens = select_rows(x, 3, 1);
  return tanh(linear(state_tokens, model.head_w, model.head_b));
}

Tensor forward(const TrajectoryWindow& window, const DTModel& model, const ForwardOptions& options) {
  return forward(std::span<const TrajectoryWindow>(&window, 1), model, options);
}

Tensor action_loss(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> mask) {
  return masked_mse(pred, target, mask);
}

}  // namespace gdt::dt
