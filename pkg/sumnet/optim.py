from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .config import DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS_ADAM, DEFAULT_LR
from .errors import NumericalError, ShapeError

STATE_PREFIX = "adam"


@dataclass
class AdamState:
    m: OrderedDict = field(default_factory=OrderedDict)
    v: OrderedDict = field(default_factory=OrderedDict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        m = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.tensors())
        v = OrderedDict((name, np.zeros_like(p.data)) for name, p in params.tensors())
        return cls(m=m, v=v, t=0)

    def to_entries(self):
        entries = OrderedDict()
        for name, arr in self.m.items():
            entries[f"{STATE_PREFIX}.m.{name}"] = arr
        for name, arr in self.v.items():
            entries[f"{STATE_PREFIX}.v.{name}"] = arr
        entries[f"{STATE_PREFIX}.t"] = np.array(float(self.t))
        return entries

    @classmethod
    def from_entries(cls, entries, params):
        state = cls.zeros_like(params)
        key = f"{STATE_PREFIX}.t"
        if key not in entries:
            return None
        state.t = int(entries[key])
        for name in state.m:
            for slot, buf in (("m", state.m), ("v", state.v)):
                arr = entries.get(f"{STATE_PREFIX}.{slot}.{name}")
                if arr is None or arr.shape != buf[name].shape:
                    raise ShapeError(f"optimizer state for {name} missing or mis-shaped")
                buf[name] = np.array(arr, dtype=np.float64)
        return state


def adam_step(params, grads, state, lr=DEFAULT_LR, beta1=DEFAULT_BETA1,
              beta2=DEFAULT_BETA2, eps=DEFAULT_EPS_ADAM):
    """
    One bias-corrected Adam update. ``grads`` maps parameter names
    ("enc1_1.weight") to arrays; missing entries count as zero gradient.
    Returns (new_params, state); the state buffers are updated in place.
    """
    named = OrderedDict(params.tensors())
    for name, g in grads.items():
        if name not in named:
            raise ShapeError(f"gradient for unknown parameter {name}")
        if g.shape != named[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {named[name].shape} for {name}")
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericalError(f"non-finite gradient for {name} ({bad} entries)")
    if set(state.m) != set(named):
        raise ShapeError("optimizer state does not match the parameter set")

    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    updated = OrderedDict()
    for name, p in named.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        updated[name] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params.replace(updated), state


def grads_by_name(params, leaf_grads):
    """Map backward()'s {tensor: grad} onto parameter names."""
    out = OrderedDict()
    for name, t in params.tensors():
        g = leaf_grads.get(t)
        if g is not None:
            out[name] = g
    return out

