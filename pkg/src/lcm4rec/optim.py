"""Plain SGD and Adam over a dict of numpy arrays (updated in place)."""

import numpy as np


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            params[name] -= self.lr * g


class Adam:
    def __init__(self, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
        self.lr = lr
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name in ("sgd", "plain-SGD"):
        return SGD(lr)
    if name in ("adam", "adaptive-moment"):
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
