#include "mhaff/tape.hpp"

namespace mhaff {

namespace {
thread_local Tape* t_active_tape = nullptr;
}  // namespace

namespace detail {

std::vector<double>& grad_buffer(TensorImpl& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

bool wants_grad(const TensorImpl& impl) { return impl.requires_grad; }

}  // namespace detail

Tape::Tape() : previous_(t_active_tape) { t_active_tape = this; }

Tape::~Tape() { t_active_tape = previous_; }

Tape* Tape::active() noexcept { return t_active_tape; }

void Tape::record(TapeNode node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined()) throw UsageError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw UsageError("backward on a loss that does not depend on any requires_grad tensor");
  }

  // Intermediates produced on this tape start from a clean gradient so that a
  // second backward over a re-recorded graph does not see stale values.
  for (TapeNode& node : nodes_) node.output->grad.clear();

  TensorImpl& root = const_cast<Tensor&>(loss).impl();
  detail::grad_buffer(root)[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward(*it);
  }
  reset();
}

NoGradGuard::NoGradGuard() : saved_(t_active_tape) { t_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { t_active_tape = saved_; }

}  // namespace mhaff
