#include "attnreg/train.hpp"

#include <cmath>
#include <numeric>

#include "attnreg/autodiff.hpp"
#include "attnreg/errors.hpp"
#include "attnreg/io.hpp"
#include "attnreg/ops.hpp"
#include "attnreg/rng.hpp"

namespace attnreg {

namespace {

struct Draw {
  std::size_t t;
  Tensor eps;
  bool null_prompt;
};

Draw draw(Rng& rng, const Shape& shape, std::size_t t_train, double null_prob, DType dtype) {
  Draw d;
  d.t = rng.below(t_train);
  d.null_prompt = rng.uniform() < null_prob;
  std::vector<double> e(shape_numel(shape));
  for (auto& v : e) v = rng.normal();
  d.eps = Tensor::from_values(shape, e, dtype);
  return d;
}

Tensor sample_loss(const DenoiserModel& model, const TrainItem& item, const Draw& d, const NoiseSchedule& sched) {
  const Prompt prompt = d.null_prompt ? Prompt::null_prompt(model.config.max_tokens) : item.prompt;
  const Tensor image = item.image.cast(model.dtype());
  const Tensor z = forward_noise(image, d.t, d.eps, sched);
  const auto out = denoiser_forward(model, z, d.t, embed_condition(prompt, model));
  return mse(out.eps, d.eps);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("epochs must be positive");
  if (!(lr > 0)) throw ValidationError("learning rate must be positive");
  if (batch_size == 0) throw ValidationError("batch size must be positive");
  if (!(null_prompt_prob >= 0 && null_prompt_prob <= 1)) throw ValidationError("null prompt probability must lie in [0, 1]");
  if (!(grad_clip >= 0)) throw ValidationError("grad_clip must be non-negative");
}

std::vector<TrainItem> training_items(const Manifest& manifest, std::size_t max_tokens) {
  std::vector<TrainItem> items;
  for (const auto& e : manifest.entries) {
    items.push_back({read_pgm(manifest.root / e.image), Prompt::make(Pathology::clear, std::nullopt, std::nullopt, max_tokens)});
    items.push_back({read_pgm(manifest.root / e.lesioned_image),
                     Prompt::make(Pathology::lesion, e.lesion.laterality, e.lesion.region, max_tokens)});
  }
  return items;
}

TrainResult train_denoiser(const std::vector<TrainItem>& items, const DenoiserConfig& config,
                           const NoiseSchedule& sched, const TrainConfig& train,
                           const std::function<void(const TrainProgress&)>& progress) {
  if (items.empty()) throw ValidationError("training set is empty");
  train.validate();
  config.validate();
  if (sched.t_train != config.t_train) throw ValidationError("schedule length does not match the model's t_train");
  for (const auto& it : items)
    if (it.image.shape() != Shape{config.image_side, config.image_side})
      throw ValidationError("training image has shape " + shape_str(it.image.shape()));

  TrainResult result;
  DenoiserModel& model = result.model;
  model = DenoiserModel::init(config, mix_seed(train.seed, 0xA11CE));
  const DType dtype = model.dtype();

  std::vector<std::string> names;
  for (const auto& [name, _] : model.params) names.push_back(name);
  std::vector<std::vector<double>> m1(names.size()), m2(names.size()), grad(names.size());
  for (std::size_t p = 0; p < names.size(); ++p) {
    const auto n = model.params[names[p]].numel();
    m1[p].assign(n, 0.0);
    m2[p].assign(n, 0.0);
    grad[p].assign(n, 0.0);
  }

  std::size_t step = 0;
  const Shape shape{config.image_side, config.image_side};
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    // Fisher-Yates with the portable generator.
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(mix_seed(train.seed, 2 * epoch + 1));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
      const std::size_t end = std::min(order.size(), start + train.batch_size);
      for (auto& g : grad) std::fill(g.begin(), g.end(), 0.0);
      double batch_loss = 0;
      for (std::size_t b = start; b < end; ++b) {
        Rng rng(mix_seed(mix_seed(train.seed, 2 * epoch + 2), b));
        const Draw d = draw(rng, shape, config.t_train, train.null_prompt_prob, dtype);
        Tape tape;
        DenoiserModel watched;
        watched.config = config;
        std::vector<Tensor> leaves;
        for (const auto& name : names) {
          watched.params[name] = tape.watch(model.params[name]);
          leaves.push_back(watched.params[name]);
        }
        Tensor loss;
        try {
          loss = sample_loss(watched, items[order[b]], d, sched);
        } catch (const NumericError& ex) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ": " + ex.what());
        }
        batch_loss += loss.item();
        const auto g = tape.backward(loss, leaves);
        for (std::size_t p = 0; p < names.size(); ++p) {
          const auto gv = g[p].to_doubles();
          for (std::size_t i = 0; i < gv.size(); ++i) grad[p][i] += gv[i];
        }
      }
      const double count = static_cast<double>(end - start);
      batch_loss /= count;
      if (!std::isfinite(batch_loss))
        throw NumericError("training loss is not finite at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step));
      double norm2 = 0;
      for (auto& g : grad)
        for (auto& v : g) {
          v /= count;
          norm2 += v * v;
        }
      const double norm = std::sqrt(norm2);
      const double clip = train.grad_clip > 0 && norm > train.grad_clip ? train.grad_clip / norm : 1.0;

      ++step;
      const double bc1 = 1.0 - std::pow(train.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(train.beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < names.size(); ++p) {
        Tensor& param = model.params[names[p]];
        dispatch(dtype, [&](auto tag) {
          using T = decltype(tag);
          auto w = param.mutable_data<T>();
          for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = grad[p][i] * clip;
            m1[p][i] = train.beta1 * m1[p][i] + (1 - train.beta1) * gi;
            m2[p][i] = train.beta2 * m2[p][i] + (1 - train.beta2) * gi * gi;
            const double update = train.lr * (m1[p][i] / bc1) / (std::sqrt(m2[p][i] / bc2) + 1e-8);
            w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
          }
        });
      }
      result.batch_losses.push_back(batch_loss);
      if (progress) progress({epoch, step, batch_loss});
    }
  }
  model.validate();
  return result;
}

double evaluate_loss(const DenoiserModel& model, const std::vector<TrainItem>& items, const NoiseSchedule& sched,
                     std::size_t samples, std::uint64_t seed) {
  if (items.empty() || samples == 0) throw ValidationError("nothing to evaluate");
  const Shape shape{model.config.image_side, model.config.image_side};
  double total = 0;
  for (std::size_t s = 0; s < samples; ++s) {
    Rng rng(mix_seed(seed, s));
    const auto& item = items[rng.below(items.size())];
    const Draw d = draw(rng, shape, model.config.t_train, 0.0, model.dtype());
    total += sample_loss(model, item, d, sched).item();
  }
  return total / static_cast<double>(samples);
}

std::vector<double> smooth(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw ValidationError("smoothing window must be positive");
  std::vector<double> out(values.size());
  double acc = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace attnreg
