from engine.tensor import Function, GradTape, Tensor, is_grad_enabled, no_grad

__all__ = ["Function", "GradTape", "Tensor", "is_grad_enabled", "no_grad"]
