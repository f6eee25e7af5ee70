"""Fully connected approximators and flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}
_OUTPUTS = {"none": None, "softplus": ad.softplus}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "tanh"
    output_activation: str = "none"
    use_biases: bool = True

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("hidden_layers and hidden_width must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in _OUTPUTS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    def shapes(self) -> list[tuple[int, ...]]:
        out: list[tuple[int, ...]] = []
        w = self.widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            out.append((fan_in, fan_out))
            if self.use_biases:
                out.append((fan_out,))
        return out


class ParamVector:
    """Flat parameter storage with a per-tensor layout.

    Weights are stored row-major followed by the layer's bias, layer by layer.
    """

    def __init__(self, values: np.ndarray, shapes: list[tuple[int, ...]]):
        values = np.asarray(values, dtype=np.float64).ravel()
        expected = int(np.sum([int(np.prod(s)) for s in shapes]))
        if values.size != expected:
            raise ValueError(f"expected {expected} values, got {values.size}")
        self.values = values
        self.shapes = [tuple(s) for s in shapes]

    @property
    def offsets(self) -> list[int]:
        sizes = [int(np.prod(s)) for s in self.shapes]
        return list(np.concatenate([[0], np.cumsum(sizes)]).astype(int))

    def __len__(self) -> int:
        return self.values.size

    def unflatten(self) -> list[np.ndarray]:
        offs = self.offsets
        return [
            self.values[a:b].reshape(s).copy() for a, b, s in zip(offs[:-1], offs[1:], self.shapes)
        ]

    @classmethod
    def flatten(cls, arrays: list[np.ndarray]) -> "ParamVector":
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        flat = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        return cls(flat, [a.shape for a in arrays])

    def as_vars(self) -> list[ad.Var]:
        return [ad.var(a) for a in self.unflatten()]


def xavier_init(spec: MlpSpec, seed) -> ParamVector:
    """Xavier-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in spec.shapes():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-bound, bound, size=shape))
        else:
            arrays.append(np.zeros(shape))
    return ParamVector.flatten(arrays)


def mlp_forward(spec: MlpSpec, theta, x):
    """Evaluate the network on a batch ``x`` of shape (N, input_dim).

    ``theta`` is the list of per-tensor Vars (or arrays) in layout order.
    Returns an (N, output_dim) Var.
    """
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input has {x.shape[-1]} columns, spec expects {spec.input_dim}")
    if len(theta) != len(spec.shapes()):
        raise ValueError("parameter count does not match spec")
    act = _ACTIVATIONS[spec.activation]
    step = 2 if spec.use_biases else 1
    n_layers = len(spec.widths) - 1
    h = x
    for k in range(n_layers):
        w = theta[step * k]
        if tuple(w.shape) != spec.shapes()[step * k]:
            raise ValueError(f"layer {k} weight has shape {w.shape}")
        h = ad.dot(h, w)
        if spec.use_biases:
            h = h + theta[step * k + 1]
        if k < n_layers - 1:
            h = act(h)
    out_act = _OUTPUTS[spec.output_activation]
    return out_act(h) if out_act is not None else h
