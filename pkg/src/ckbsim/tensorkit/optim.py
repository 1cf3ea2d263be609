import numpy as np

from ..errors import ConfigError


def adam_step(values, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected adaptive-moment update, applied in place.

    ``values`` and ``grads`` are parallel dicts of arrays keyed by name;
    ``state`` holds ``m``/``v`` dicts and the integer ``step``.  Entries with
    a ``None`` gradient are skipped.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, value in values.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in m:
            m[name] = np.zeros_like(value)
            v[name] = np.zeros_like(value)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * (g * g)
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
    return values


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {"step": 0, "m": {}, "v": {}}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        values = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(values, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)

    def state_dict(self):
        # step in the moments' dtype so checkpoints carry one value type
        moments = list(self.state["m"].values())
        dtype = moments[0].dtype if moments else np.float64
        out = {"step": np.array([self.state["step"]], dtype=dtype)}
        for name, arr in self.state["m"].items():
            out[f"m.{name}"] = arr.copy()
        for name, arr in self.state["v"].items():
            out[f"v.{name}"] = arr.copy()
        return out

    def load_state_dict(self, state):
        self.state = {"step": int(np.asarray(state["step"]).ravel()[0]), "m": {}, "v": {}}
        for key, arr in state.items():
            if key.startswith("m."):
                self.state["m"][key[2:]] = np.array(arr, copy=True)
            elif key.startswith("v."):
                self.state["v"][key[2:]] = np.array(arr, copy=True)
        return self
