"""Interaction-network style GNN for doublet classification, classical or hybrid.

Forward pass: InputNet, then an Edge Network, then ``n_iter`` rounds of
(Node Network, Edge Network). Every Edge Network application shares one
parameter set and every Node Network application shares another.

A block is ``encoder MLP -> [encoding -> circuit -> readout] -> readout MLP``.
The classical variants are the same blocks with the bracketed circuit stage
removed, so an upgraded classical model and its hybrid twin carry exactly the
same classical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import MLPSpec, Tensor
from .graphs import EventGraph
from .quantum import CircuitSpec, PQCLayer, pqc_node

# Default divisors for raw (r [mm], phi [rad], z [mm]) before the InputNet.
FEATURE_SCALE = (1000.0, np.pi, 1000.0)


@dataclass(frozen=True)
class ModelVariant:
    name: str
    hidden_dim: int
    encoder_widths: tuple[int, ...]
    encoding: str | None = None
    n_qubits: int = 0
    readout: str = "probs"
    residual: bool = False
    n_iter: int = 3
    n_layers: int = 3

    @property
    def quantum(self) -> bool:
        return self.encoding is not None

    def with_iterations(self, n_iter: int) -> "ModelVariant":
        return replace(self, n_iter=n_iter)


VARIANTS: dict[str, ModelVariant] = {
    "original_cgnn": ModelVariant("original_cgnn", 4, (4,)),
    "original_qgnn": ModelVariant("original_qgnn", 4, (4,), "angle", 4, readout="z"),
    "upgraded_cgnn": ModelVariant("upgraded_cgnn", 64, (64, 64), residual=True),
    "upgraded_qgnn": ModelVariant("upgraded_qgnn", 64, (64, 64), "amplitude", 6, residual=True),
    "parallel_qgnn": ModelVariant("parallel_qgnn", 64, (64, 64), "parallel", 12, residual=True),
}


def get_variant(variant: str | ModelVariant) -> ModelVariant:
    if isinstance(variant, ModelVariant):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class BlockSpec:
    encoder: MLPSpec
    readout: MLPSpec
    circuit: PQCLayer | None = None

    def __post_init__(self):
        width = self.encoder.layer_widths[-1]
        if self.circuit is not None:
            if width != self.circuit.n_features:
                raise ValueError(f"encoder emits {width} features, encoding takes {self.circuit.n_features}")
            width = self.circuit.n_outputs
        if self.readout.layer_widths[0] != width:
            raise ValueError(f"readout expects {self.readout.layer_widths[0]} inputs, gets {width}")

    @property
    def output_dim(self) -> int:
        return self.readout.layer_widths[-1]


@lru_cache(maxsize=None)
def block_specs(variant: ModelVariant) -> dict[str, BlockSpec]:
    d = variant.hidden_dim
    node_in = 4 * d if variant.residual else 3 * d
    circuit = None
    enc_act = "hidden"
    mid = variant.encoder_widths[-1]
    if variant.quantum:
        circuit = PQCLayer(variant.encoding, CircuitSpec(variant.n_qubits, variant.n_layers), variant.readout)
        if variant.encoding == "angle":
            enc_act = "pi_tanh"
        mid = circuit.n_outputs
    node_out = "identity" if variant.residual else "hidden"
    return {
        "edge_net": BlockSpec(MLPSpec((2 * d, *variant.encoder_widths), output_activation=enc_act),
                              MLPSpec((mid, 1), output_activation="sigmoid"), circuit),
        "node_net": BlockSpec(MLPSpec((node_in, *variant.encoder_widths), output_activation=enc_act),
                              MLPSpec((mid, d), output_activation=node_out), circuit),
    }


def input_spec(variant: ModelVariant) -> MLPSpec:
    return MLPSpec((3, variant.hidden_dim), output_activation="hidden")


@dataclass
class GNNParams:
    """Flat ``name -> Tensor`` store: one set per block type however often it is applied."""

    variant: ModelVariant
    tensors: dict[str, Tensor] = field(default_factory=dict)
    feature_scale: tuple[float, float, float] = FEATURE_SCALE

    def __post_init__(self):
        scale = tuple(float(v) for v in self.feature_scale)
        if len(scale) != 3 or not all(v > 0 for v in scale):
            raise ValueError(f"feature_scale must be three positive numbers, got {self.feature_scale}")
        self.feature_scale = scale

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items()}

    def quantum_keys(self) -> list[str]:
        return [k for k in self.tensors if k.endswith(".thetas")]

    def copy(self) -> "GNNParams":
        return GNNParams(self.variant, {k: Tensor(t.value.copy(), True) for k, t in self.tensors.items()},
                         self.feature_scale)

    @classmethod
    def from_arrays(cls, variant: str | ModelVariant, arrays: Mapping[str, np.ndarray],
                    feature_scale=FEATURE_SCALE) -> "GNNParams":
        variant = get_variant(variant)
        expected = init_params(variant, np.random.default_rng(0))
        missing = set(expected.tensors) ^ set(arrays)
        if missing:
            raise ValueError(f"parameter keys do not match variant {variant.name}: {sorted(missing)[:5]}")
        for k, t in expected.tensors.items():
            if np.shape(arrays[k]) != t.shape:
                raise ValueError(f"{k}: shape {np.shape(arrays[k])} != {t.shape} for variant {variant.name}")
        return cls(variant, {k: Tensor(np.array(arrays[k], dtype=float), True) for k in expected.tensors},
                   feature_scale)


def init_params(variant: str | ModelVariant, rng: np.random.Generator, zero_residual: bool = False,
                theta_scale: float = np.pi, feature_scale=FEATURE_SCALE) -> GNNParams:
    """Glorot-uniform MLPs and angles uniform in ``[-theta_scale, theta_scale]``.

    ``zero_residual`` zeroes the last Node Network layer so that a residual update
    starts as the identity.
    """
    variant = get_variant(variant)
    tensors = dict(ad.init_mlp(input_spec(variant), rng, "input_net"))
    for name, spec in block_specs(variant).items():
        tensors.update(ad.init_mlp(spec.encoder, rng, f"{name}.encoder"))
        if spec.circuit is not None:
            n = spec.circuit.circuit.n_thetas
            tensors[f"{name}.circuit.thetas"] = Tensor(rng.uniform(-theta_scale, theta_scale, n), True)
        tensors.update(ad.init_mlp(spec.readout, rng, f"{name}.readout"))
    if zero_residual:
        last = len(block_specs(variant)["node_net"].readout.layer_widths) - 2
        for part in ("weight", "bias"):
            t = tensors[f"node_net.readout.dense{last}.{part}"]
            t.value[...] = 0.0
    return GNNParams(variant, tensors, feature_scale)


@dataclass
class ForwardStats:
    """Instrumentation counters for one or more forward passes."""

    edge_blocks: int = 0
    node_blocks: int = 0
    circuits: int = 0

    @property
    def blocks(self) -> int:
        return self.edge_blocks + self.node_blocks


def _block(spec: BlockSpec, params: GNNParams, name: str, x: Tensor, stats: ForwardStats | None) -> Tensor:
    h = ad.mlp_forward(spec.encoder, params.tensors, x, f"{name}.encoder")
    if spec.circuit is not None:
        h = pqc_node(spec.circuit, h, params[f"{name}.circuit.thetas"])
        if spec.circuit.readout == "probs":
            # probabilities average 2**-m; rescale to unit mean before the dense readout
            h = ad.scale(h, float(spec.circuit.n_outputs))
        if stats is not None:
            stats.circuits += x.shape[0]
    return ad.mlp_forward(spec.readout, params.tensors, h, f"{name}.readout")


def input_net(X, params: GNNParams) -> Tensor:
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    return ad.mlp_forward(input_spec(params.variant), params.tensors, Tensor(X / np.asarray(params.feature_scale)),
                          "input_net")


def edge_network(H: Tensor, R_i, R_o, params: GNNParams, stats: ForwardStats | None = None) -> Tensor:
    """Edge scores in (0, 1), shape ``(N_E, 1)``."""
    b_o = ad.spmm(R_o.T, H)
    b_i = ad.spmm(R_i.T, H)
    if stats is not None:
        stats.edge_blocks += 1
    return _block(block_specs(params.variant)["edge_net"], params, "edge_net", ad.concat([b_o, b_i]), stats)


def node_network(H: Tensor, e: Tensor, R_i, R_o, H0: Tensor, params: GNNParams,
                 stats: ForwardStats | None = None) -> Tensor:
    variant = params.variant
    b_o = ad.spmm(R_o.T, H)
    b_i = ad.spmm(R_i.T, H)
    incoming = ad.spmm(R_i, ad.mul(e, b_o))
    outgoing = ad.spmm(R_o, ad.mul(e, b_i))
    parts = [outgoing, incoming, H, H0] if variant.residual else [outgoing, incoming, H]
    if stats is not None:
        stats.node_blocks += 1
    update = _block(block_specs(variant)["node_net"], params, "node_net", ad.concat(parts), stats)
    return ad.add(H, update) if variant.residual else update


def gnn_forward(graph: EventGraph, params: GNNParams, stats: ForwardStats | None = None) -> Tensor:
    """Final Edge Network scores for every edge of ``graph``, shape ``(N_E, 1)``."""
    R_i, R_o = graph.R_i, graph.R_o
    H0 = input_net(graph.X, params)
    H = H0
    e = edge_network(H, R_i, R_o, params, stats)
    for _ in range(params.variant.n_iter):
        H = node_network(H, e, R_i, R_o, H0, params, stats)
        e = edge_network(H, R_i, R_o, params, stats)
    return e


def predict(graph: EventGraph, params: GNNParams) -> np.ndarray:
    return gnn_forward(graph, params).value[:, 0].copy()


def count_params(variant: str | ModelVariant) -> tuple[int, int]:
    """``(n_classical, n_quantum)`` trainable scalars."""
    params = init_params(variant, np.random.default_rng(0))
    quantum = set(params.quantum_keys())
    n_q = sum(params[k].value.size for k in quantum)
    n_c = sum(t.value.size for k, t in params.tensors.items() if k not in quantum)
    return n_c, n_q
