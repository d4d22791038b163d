import numpy as np


class TrainingDiverged(RuntimeError):
    """A training loop produced a non-finite objective."""

    def __init__(self, step, what="objective"):
        super().__init__(f"training diverged: non-finite {what} at step {step}")
        self.step = step


class Momentum:
    """Plain gradient steps with heavy-ball momentum on a dict of arrays.

    ``sign=+1`` ascends, ``sign=-1`` descends. ``momentum=0`` is vanilla
    gradient descent.
    """

    def __init__(self, step_size, momentum=0.0, sign=-1.0):
        self.step_size = step_size
        self.momentum = momentum
        self.sign = sign
        self._velocity = {}

    def step(self, params, grads):
        for k, g in grads.items():
            v = self._velocity.get(k)
            v = g if v is None else self.momentum * v + g
            self._velocity[k] = v
            params[k] = params[k] + self.sign * self.step_size * v
        return params


def check_finite(value, step, what="objective"):
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(step, what)
