#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mhaff/tensor.hpp"

namespace mhaff {

struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  // Reads output->grad and accumulates into the grads of inputs that require it.
  std::function<void(const TapeNode&)> backward;
};

// Records differentiable ops executed on the current thread while it is alive.
// Tapes nest; the innermost one is active. With no active tape, ops run
// without recording (inference mode).
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  void record(TapeNode node);
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<TapeNode>& nodes() const noexcept { return nodes_; }

  // Seeds d(loss)/d(loss) = 1 and walks the nodes once in reverse. Leaves
  // accumulate into their existing grad; intermediates keep their grad for
  // inspection. The tape is reset afterwards.
  void backward(const Tensor& loss);
  void reset() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
  Tape* previous_ = nullptr;
};

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

namespace detail {
// Zero-filled gradient buffer of the impl, allocated on first use.
std::vector<double>& grad_buffer(TensorImpl& impl);
bool wants_grad(const TensorImpl& impl);
}  // namespace detail

}  // namespace mhaff
