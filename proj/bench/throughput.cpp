#include <chrono>
#include <cstdio>

#include "marginlm/training.hpp"

using namespace marginlm;

template <typename T>
void run(std::size_t V, std::size_t d, std::size_t S, std::size_t bptt, int steps) {
  auto model = init_model<T>({V, d, d, 2}, 1);
  Rng rng(3);
  std::vector<WordId> ids(S * (bptt * steps + 1));
  for (auto& x : ids) x = static_cast<WordId>(rng.below(V));
  auto batches = make_batches(ids, S, bptt);
  auto params = model.parameters();
  Optimizer<T> opt(OptimizerKind::kAdam, params, 1e-3);
  std::vector<std::uint64_t> counts(V);
  for (std::size_t i = 0; i < V; ++i) counts[i] = V - i;
  HeadConfig head;
  auto state = LstmState<T>::zeros(model.dims, S);
  auto t0 = std::chrono::steady_clock::now();
  for (auto& b : batches) {
    auto fwd = forward(model, b, state);
    auto tg = time_major(b.targets, S, bptt);
    auto logits = head_logits(fwd.H, model.W, model.b, std::span<const std::uint32_t>(tg), counts, head, true);
    auto loss = softmax_cross_entropy(logits, std::span<const std::uint32_t>(tg));
    model.zero_grad();
    backward(loss);
    clip_grad_norm<T>(params, 5.0);
    opt.step();
    state = fwd.state.detached();
  }
  double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  double tokens = double(S * bptt * batches.size());
  std::printf("%s V=%zu d=%zu S=%zu: %.0f tokens/s -> 200K tokens epoch %.1f s\n", sizeof(T) == 8 ? "f64" : "f32", V, d,
              S, tokens / sec, 200000.0 / (tokens / sec));
}

int main() {
  run<double>(2000, 128, 20, 35, 10);
  run<float>(2000, 128, 20, 35, 10);
  run<float>(2000, 128, 40, 35, 10);
  run<double>(5000, 128, 20, 35, 5);
}
