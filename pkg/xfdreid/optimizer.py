"""
Optimizer Module
Adaptive moment estimation with bias correction and L2 weight decay
"""

import logging

import numpy as np

from .exceptions import ShapeMismatchError


class AdamOptimizer:
    """Adam over a dict of named numpy tensors (updated in place)"""

    def __init__(self, beta1=0.9, beta2=0.999, epsilon=1e-8):
        """
        Initialize optimizer

        Args:
            beta1: First-moment decay
            beta2: Second-moment decay
            epsilon: Denominator floor
        """
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

        # Optimizer state
        self.step_count = 0
        self.first_moment = {}
        self.second_moment = {}

        logging.debug(f"[OPTIM] Adam: beta1={beta1}, beta2={beta2}, eps={epsilon}")

    def step(self, params, grads, lr_per_tensor, weight_decay_per_tensor=None):
        """
        One update of every tensor that has a learning rate

        Args:
            params: Dict name -> tensor (modified in place)
            grads: Dict name -> gradient, shaped like the tensor
            lr_per_tensor: Dict name -> learning rate; tensors absent here are frozen
            weight_decay_per_tensor: Dict name -> decay folded into the gradient
        """
        weight_decay_per_tensor = weight_decay_per_tensor or {}
        self.step_count += 1
        t = self.step_count

        for name, lr in lr_per_tensor.items():
            theta = params[name]
            grad = np.asarray(grads[name])
            if grad.shape != theta.shape:
                raise ShapeMismatchError(
                    f"gradient of {name} has shape {grad.shape}, tensor {theta.shape}")

            decay = weight_decay_per_tensor.get(name, 0.0)
            if decay:
                grad = grad + decay * theta

            m = self.first_moment.get(name)
            v = self.second_moment.get(name)
            if m is None:
                m = np.zeros_like(theta)
                v = np.zeros_like(theta)

            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.first_moment[name] = m
            self.second_moment[name] = v

            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + self.epsilon)
