"""Teacher MLPs, the BatchEnsemble student and ensemble containers.

All models share a small protocol: ``param_nodes()`` wraps the parameter
arrays into graph leaves, ``forward(x, nodes)`` builds a differentiable
forward pass, and ``logits(x)`` evaluates it on a plain array.  Weights are
stored input-major, so a layer computes ``h @ W + b``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode, ShapeError

FORMAT_VERSION = 1


def _kaiming(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))


def _check_widths(widths: Sequence[int]) -> list[int]:
    widths = [int(w) for w in widths]
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ValueError(f"widths must list at least input and output sizes, all positive: {widths}")
    return widths


def _as_input(x, width: int) -> DiffNode:
    x = dc.as_node(x)
    if x.value.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"expected input of shape [batch x {width}], got {x.shape}")
    return x


class MlpTeacher:
    """Fully connected ReLU network producing logits."""

    kind = "mlp"

    def __init__(self, widths: Sequence[int], params: dict[str, np.ndarray] | None = None,
                 seed: int | None = None, meta: dict | None = None):
        self.widths = _check_widths(widths)
        self.seed = seed
        self.meta = dict(meta or {})
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for l, (d_in, d_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
                params[f"W{l}"] = _kaiming(rng, d_in, d_out)
                params[f"b{l}"] = np.zeros(d_out)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def param_nodes(self, requires_grad: bool = True) -> dict[str, DiffNode]:
        return {k: DiffNode(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def forward(self, x, nodes: dict[str, DiffNode] | None = None) -> DiffNode:
        nodes = nodes if nodes is not None else self.param_nodes(requires_grad=False)
        h = _as_input(x, self.in_dim)
        for l in range(self.num_layers):
            h = dc.add(dc.matmul(h, nodes[f"W{l}"]), nodes[f"b{l}"])
            if l < self.num_layers - 1:
                h = dc.relu(h)
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        # Plain numpy path; identical arithmetic to ``forward``.
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape [batch x {self.in_dim}], got {h.shape}")
        for l in range(self.num_layers):
            h = h @ self.params[f"W{l}"] + self.params[f"b{l}"]
            if l < self.num_layers - 1:
                h = np.where(h > 0, h, 0.0)
        return h

    def copy(self) -> "MlpTeacher":
        return MlpTeacher(self.widths, {k: v.copy() for k, v in self.params.items()},
                          seed=self.seed, meta=dict(self.meta))


class BatchEnsembleStudent:
    """BatchEnsemble network with ``M`` rank-one subnetworks.

    Layer ``l`` holds a shared weight ``W{l}`` of shape ``[d_in, d_out]``, input
    factors ``s{l}`` of shape ``[M, d_in]``, output factors ``r{l}`` of shape
    ``[M, d_out]`` and per-member biases ``b{l}`` of shape ``[M, d_out]``.
    Member ``j`` uses the effective weight ``W * outer(s_j, r_j)``.
    """

    kind = "batch_ensemble"

    def __init__(self, widths: Sequence[int], M: int, params: dict[str, np.ndarray] | None = None,
                 seed: int | None = None, factor_init: str = "sign", meta: dict | None = None):
        self.widths = _check_widths(widths)
        if M < 1:
            raise ValueError(f"ensemble size must be >= 1, got {M}")
        self.M = int(M)
        self.seed = seed
        self.factor_init = factor_init
        self.meta = dict(meta or {})
        if params is None:
            params = self._init_params(np.random.default_rng(seed), factor_init)
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def _init_params(self, rng: np.random.Generator, factor_init: str) -> dict[str, np.ndarray]:
        if factor_init not in ("sign", "ones"):
            raise ValueError(f"factor_init must be 'sign' or 'ones', got {factor_init!r}")
        params = {}
        for l, (d_in, d_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            params[f"W{l}"] = _kaiming(rng, d_in, d_out)
            if factor_init == "sign":
                params[f"s{l}"] = rng.choice([-1.0, 1.0], size=(self.M, d_in))
                params[f"r{l}"] = rng.choice([-1.0, 1.0], size=(self.M, d_out))
            else:
                params[f"s{l}"] = np.ones((self.M, d_in))
                params[f"r{l}"] = np.ones((self.M, d_out))
            params[f"b{l}"] = np.zeros((self.M, d_out))
        return params

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def param_nodes(self, requires_grad: bool = True) -> dict[str, DiffNode]:
        return {k: DiffNode(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def _check_member(self, j: int) -> int:
        if not 0 <= j < self.M:
            raise IndexError(f"member index {j} out of range for M={self.M}")
        return j

    def forward_members(self, x, nodes: dict[str, DiffNode] | None = None,
                        members: Sequence[int] | None = None) -> DiffNode:
        """Logits of the selected members stacked member-major: ``[len(members)*batch, K]``."""
        nodes = nodes if nodes is not None else self.param_nodes(requires_grad=False)
        members = list(range(self.M)) if members is None else [self._check_member(j) for j in members]
        x = _as_input(x, self.in_dim)
        batch = x.shape[0]
        rows = np.repeat(np.asarray(members, dtype=np.intp), batch)
        tile = np.tile(np.arange(batch), len(members))
        h = dc.take_rows(x, tile)
        for l in range(self.num_layers):
            s = dc.take_rows(nodes[f"s{l}"], rows)
            r = dc.take_rows(nodes[f"r{l}"], rows)
            b = dc.take_rows(nodes[f"b{l}"], rows)
            h = dc.add(dc.mul(dc.matmul(dc.mul(h, s), nodes[f"W{l}"]), r), b)
            if l < self.num_layers - 1:
                h = dc.relu(h)
        return h

    def forward(self, x, nodes: dict[str, DiffNode] | None = None, member: int = 0) -> DiffNode:
        return self.forward_members(x, nodes, members=[member])

    def member_logits(self, j: int, x: np.ndarray) -> np.ndarray:
        self._check_member(j)
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"expected input of shape [batch x {self.in_dim}], got {h.shape}")
        for l in range(self.num_layers):
            p = self.params
            h = ((h * p[f"s{l}"][j]) @ p[f"W{l}"]) * p[f"r{l}"][j] + p[f"b{l}"][j]
            if l < self.num_layers - 1:
                h = np.where(h > 0, h, 0.0)
        return h

    def explicit_weight(self, layer: int, j: int) -> np.ndarray:
        p = self.params
        return p[f"W{layer}"] * np.outer(p[f"s{layer}"][j], p[f"r{layer}"][j])

    def member(self, j: int) -> "Subnetwork":
        return Subnetwork(self, self._check_member(j))

    def members(self) -> list["Subnetwork"]:
        return [Subnetwork(self, j) for j in range(self.M)]

    def copy(self) -> "BatchEnsembleStudent":
        return BatchEnsembleStudent(self.widths, self.M, {k: v.copy() for k, v in self.params.items()},
                                    seed=self.seed, factor_init=self.factor_init, meta=dict(self.meta))


@dataclass
class Subnetwork:
    """View of one BatchEnsemble member exposing the single-model protocol."""

    student: BatchEnsembleStudent
    index: int

    @property
    def in_dim(self) -> int:
        return self.student.in_dim

    @property
    def num_classes(self) -> int:
        return self.student.num_classes

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.student.params

    def param_nodes(self, requires_grad: bool = True) -> dict[str, DiffNode]:
        return self.student.param_nodes(requires_grad)

    def forward(self, x, nodes: dict[str, DiffNode] | None = None) -> DiffNode:
        return self.student.forward_members(x, nodes, members=[self.index])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.student.member_logits(self.index, x)


@dataclass
class DeepEnsemble:
    """Independently trained teachers sharing one architecture."""

    members: list[MlpTeacher] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a deep ensemble needs at least one member")
        widths = self.members[0].widths
        for m in self.members[1:]:
            if m.widths != widths:
                raise ValueError(f"ensemble members disagree on architecture: {widths} vs {m.widths}")

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, j: int) -> MlpTeacher:
        return self.members[j]

    def __iter__(self):
        return iter(self.members)

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def widths(self) -> list[int]:
        return self.members[0].widths


def as_members(model) -> list:
    """Expand a model or ensemble into its list of single-output members."""
    if isinstance(model, DeepEnsemble):
        return list(model.members)
    if isinstance(model, BatchEnsembleStudent):
        return model.members()
    if isinstance(model, (list, tuple)):
        return list(model)
    return [model]


def member_probs(model, x: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax outputs of every member, shape ``[M, N, K]``."""
    return np.stack([dc.softmax_array(m.logits(x), temperature) for m in as_members(model)])


def member_logits(model, x: np.ndarray) -> np.ndarray:
    return np.stack([m.logits(x) for m in as_members(model)])


def ensemble_predict(members, x: np.ndarray) -> np.ndarray:
    """Mean of member softmax probabilities, shape ``[N, K]``."""
    members = as_members(members)
    if not members:
        raise ValueError("ensemble_predict needs at least one member")
    return member_probs(members, x).mean(axis=0)


def param_count(model) -> int:
    if isinstance(model, DeepEnsemble):
        return int(np.sum([param_count(m) for m in model.members]))
    if isinstance(model, (MlpTeacher, BatchEnsembleStudent)):
        total = 0
        if isinstance(model, BatchEnsembleStudent):
            for d_in, d_out in zip(model.widths[:-1], model.widths[1:]):
                total += d_in * d_out + model.M * (d_in + d_out + d_out)
        else:
            for d_in, d_out in zip(model.widths[:-1], model.widths[1:]):
                total += d_in * d_out + d_out
        return total
    raise TypeError(f"cannot count parameters of {type(model).__name__}")


# ---------------------------------------------------------------------------
# checkpoints


def to_checkpoint(model, training_meta: dict | None = None) -> dict:
    meta = dict(model.meta)
    if training_meta:
        meta.update(training_meta)
    ckpt = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "widths": list(model.widths),
        "seed": model.seed,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "parameters": {k: v.reshape(-1).tolist() for k, v in model.params.items()},
        "training_meta": meta,
    }
    if isinstance(model, BatchEnsembleStudent):
        ckpt["M"] = model.M
        ckpt["per_member_bias"] = True
        ckpt["factor_init"] = model.factor_init
    return ckpt


def from_checkpoint(ckpt: dict):
    if ckpt.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {ckpt.get('format_version')!r}")
    params = {
        k: np.asarray(v, dtype=np.float64).reshape(ckpt["shapes"][k])
        for k, v in ckpt["parameters"].items()
    }
    kind = ckpt.get("kind")
    if kind == "mlp":
        return MlpTeacher(ckpt["widths"], params, seed=ckpt.get("seed"), meta=ckpt.get("training_meta"))
    if kind == "batch_ensemble":
        return BatchEnsembleStudent(ckpt["widths"], ckpt["M"], params, seed=ckpt.get("seed"),
                                    factor_init=ckpt.get("factor_init", "sign"),
                                    meta=ckpt.get("training_meta"))
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path: str | os.PathLike, training_meta: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(to_checkpoint(model, training_meta), indent=1, sort_keys=True))


def load_checkpoint(path: str | os.PathLike):
    with open(path) as f:
        return from_checkpoint(json.load(f))


def save_ensemble(ensemble: DeepEnsemble, directory: str | os.PathLike,
                  metas: Iterable[dict] | None = None) -> list[Path]:
    directory = Path(directory)
    metas = list(metas) if metas is not None else [{}] * len(ensemble)
    paths = []
    for j, (m, meta) in enumerate(zip(ensemble.members, metas)):
        p = directory / f"teacher_{j}.json"
        save_checkpoint(m, p, {**meta, "member_index": j})
        paths.append(p)
    return paths


def load_ensemble(directory: str | os.PathLike) -> DeepEnsemble:
    directory = Path(directory)
    paths = sorted(directory.glob("teacher_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise FileNotFoundError(f"no teacher_*.json checkpoints in {directory}")
    return DeepEnsemble([load_checkpoint(p) for p in paths])
