"""GRU cells, output heads, MLPs and a bidirectional GRU encoder.

All parameters are plain :class:`~profforce.tensor.Tensor` leaves; the
step functions work on single vectors or on row-batched matrices, so a
hidden state is either ``[H]`` or ``[B, H]``.

The gate equations, with ``x`` the step input and ``h`` the previous
state::

    z = sigmoid(W_z x + U_z h + b_z)          update gate
    r = sigmoid(W_r x + U_r h + b_r)          reset gate
    c = tanh(W_c x + U_c (r * h) + b_c)       candidate state
    h_new = (1 - z) * h + z * c

The candidate's pre-tanh value ``W_c x + U_c (r * h) + b_c`` is exposed
alongside the new state because it is the per-step feature the
discriminator consumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    matmul,
    mul,
    one_minus,
    relu,
    sigmoid,
    tanh,
    transpose,
)

__all__ = [
    "GruCellParams",
    "OutputHeadParams",
    "MlpParams",
    "BiGruParams",
    "TransposedGruCell",
    "init_params",
    "transpose_cell",
    "gru_step",
    "gru_step_t",
    "output_head",
    "mlp_forward",
    "bigru_encode",
]


def init_params(kind: str, shape: tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    shape = tuple(int(s) for s in shape)
    if kind == "bias":
        return Tensor(np.zeros(shape))
    if kind == "weight":
        if len(shape) != 2:
            raise ValueError(f"weight init expects a 2D shape, got {shape}")
        fan_out, fan_in = shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-s, s, size=shape))
    raise ValueError(f"unknown parameter kind {kind!r}")


@dataclass
class GruCellParams:
    """Input-to-hidden matrices are [H, I], recurrent ones [H, H]."""

    W_z: Tensor
    W_r: Tensor
    W_c: Tensor
    U_z: Tensor
    U_r: Tensor
    U_c: Tensor
    b_z: Tensor
    b_r: Tensor
    b_c: Tensor

    @classmethod
    def create(cls, hidden: int, input_size: int, rng: np.random.Generator) -> "GruCellParams":
        if hidden < 1 or input_size < 1:
            raise ValueError("hidden and input sizes must be positive")
        w = lambda: init_params("weight", (hidden, input_size), rng)
        u = lambda: init_params("weight", (hidden, hidden), rng)
        b = lambda: init_params("bias", (hidden,), rng)
        return cls(W_z=w(), W_r=w(), W_c=w(), U_z=u(), U_r=u(), U_c=u(),
                   b_z=b(), b_r=b(), b_c=b())

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        fields = ("W_z", "W_r", "W_c", "U_z", "U_r", "U_c", "b_z", "b_r", "b_c")
        return [(prefix + f, getattr(self, f)) for f in fields]


class TransposedGruCell(NamedTuple):
    """Weights pre-transposed for the x @ W.T step form, cached per unroll."""

    wz: Tensor
    wr: Tensor
    wc: Tensor
    uz: Tensor
    ur: Tensor
    uc: Tensor
    bz: Tensor
    br: Tensor
    bc: Tensor


def transpose_cell(p: GruCellParams) -> TransposedGruCell:
    return TransposedGruCell(
        wz=transpose(p.W_z), wr=transpose(p.W_r), wc=transpose(p.W_c),
        uz=transpose(p.U_z), ur=transpose(p.U_r), uc=transpose(p.U_c),
        bz=p.b_z, br=p.b_r, bc=p.b_c,
    )


def gru_step_t(tc: TransposedGruCell, h_prev: Tensor, x_in: Tensor) -> tuple[Tensor, Tensor]:
    z = sigmoid(add(add(matmul(x_in, tc.wz), matmul(h_prev, tc.uz)), tc.bz))
    r = sigmoid(add(add(matmul(x_in, tc.wr), matmul(h_prev, tc.ur)), tc.br))
    pre = add(add(matmul(x_in, tc.wc), matmul(mul(r, h_prev), tc.uc)), tc.bc)
    c = tanh(pre)
    h_new = add(mul(one_minus(z), h_prev), mul(z, c))
    return h_new, pre


def gru_step(p: GruCellParams, h_prev: Tensor, x_in: Tensor) -> tuple[Tensor, Tensor]:
    """One GRU update; returns the new state and the candidate pre-tanh value."""
    if h_prev.shape[-1] != p.hidden_size:
        raise ValueError(f"state width {h_prev.shape[-1]} != hidden size {p.hidden_size}")
    if x_in.shape[-1] != p.input_size:
        raise ValueError(f"input width {x_in.shape[-1]} != cell input size {p.input_size}")
    return gru_step_t(transpose_cell(p), h_prev, x_in)


@dataclass
class OutputHeadParams:
    """Affine map from hidden state to vocabulary logits: W_o is [V, H]."""

    W_o: Tensor
    b_o: Tensor

    @classmethod
    def create(cls, vocab: int, hidden: int, rng: np.random.Generator) -> "OutputHeadParams":
        return cls(W_o=init_params("weight", (vocab, hidden), rng),
                   b_o=init_params("bias", (vocab,), rng))

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "W_o", self.W_o), (prefix + "b_o", self.b_o)]


def output_head(p: OutputHeadParams, h: Tensor) -> Tensor:
    return add(matmul(h, transpose(p.W_o)), p.b_o)


@dataclass
class MlpParams:
    """Affine layers with ReLU between them; the final layer stays linear."""

    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def create(cls, sizes: list[int], rng: np.random.Generator) -> "MlpParams":
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            layers.append((init_params("weight", (n_out, n_in), rng),
                           init_params("bias", (n_out,), rng)))
        return cls(layers=layers)

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}{i}.W", w))
            out.append((f"{prefix}{i}.b", b))
        return out


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        x = add(matmul(x, transpose(w)), b)
        if i != last:
            x = relu(x)
    return x


@dataclass
class BiGruParams:
    """Two independent GRU cells of equal hidden size, one per direction."""

    fwd: GruCellParams
    bwd: GruCellParams

    @classmethod
    def create(cls, input_size: int, hidden: int, rng: np.random.Generator) -> "BiGruParams":
        return cls(fwd=GruCellParams.create(hidden, input_size, rng),
                   bwd=GruCellParams.create(hidden, input_size, rng))

    @property
    def input_size(self) -> int:
        return self.fwd.input_size

    @property
    def hidden_size(self) -> int:
        return self.fwd.hidden_size

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.fwd.named(prefix + "fwd.") + self.bwd.named(prefix + "bwd.")


def bigru_encode(p: BiGruParams, seq: list[Tensor]) -> list[Tensor]:
    """Run both directions from zero states; step t gets [fwd_t ; bwd_t].

    Output width is twice the encoder hidden size, and every output step
    depends on the whole input sequence.
    """
    if not seq:
        raise ValueError("bigru_encode on an empty sequence")
    width = seq[0].shape[-1]
    if width != p.input_size:
        raise ValueError(f"feature width {width} does not match encoder input {p.input_size}")
    h_shape = seq[0].shape[:-1] + (p.hidden_size,)
    tf, tb = transpose_cell(p.fwd), transpose_cell(p.bwd)

    h = Tensor(np.zeros(h_shape))
    fwd_states = []
    for x in seq:
        h, _ = gru_step_t(tf, h, x)
        fwd_states.append(h)

    h = Tensor(np.zeros(h_shape))
    bwd_states: list[Tensor] = []
    for x in reversed(seq):
        h, _ = gru_step_t(tb, h, x)
        bwd_states.append(h)
    bwd_states.reverse()

    return [concat((f, b), axis=-1) for f, b in zip(fwd_states, bwd_states)]
