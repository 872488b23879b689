#include "osteo/diffcore/tape.hpp"

#include "osteo/diffcore/errors.hpp"

namespace osteo::diffcore {

namespace {
thread_local Tape* g_active = nullptr;
}

Tape* active_tape() { return g_active; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

void mark_interior(Tensor& t) {
  t.impl_->requires_grad = true;
  t.impl_->is_leaf = false;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (g_active == nullptr) return false;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void record_op(std::vector<Tensor> inputs, Tensor& output, Tape::BackwardFn fn) {
  if (!should_record(inputs)) return;
  mark_interior(output);
  g_active->record(std::move(inputs), output, std::move(fn));
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  // Interior gradients are per-pass; only leaves accumulate.
  for (auto& e : entries_) e.output.release_grad();
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
  }
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace osteo::diffcore
