"""Model specifications, named parameter storage and checkpoint files.

All trainable scalars of a model live in one flat float64 buffer. Named
tensors (``"mgrn.group3.W_r"``, ``"head.w"``, ...) are reshaped views into
it, which lets the optimizer treat the whole model as a single vector.

Naming scheme
-------------
gru      ``gru.{W,U,b}_{r,z,h}``
lstm     ``lstm.{W,U,b}_{i,f,o,c}`` (input, forget, output, candidate)
mgrn     ``mgrn.group{k}.{W,U,b}_{r,z,h}`` then
         ``mgrn.joint.W_z``, ``mgrn.joint.U_z``, ``mgrn.joint.group{k}.U_c``,
         ``mgrn.joint.b_c``, ``mgrn.joint.b_z``
cwlstm   ``cwlstm.group{k}.{fwd,bwd}.{W,U,b}_{i,f,o,c}`` then ``cwlstm.joint.*``
head     ``head.w`` (1 x N) and ``head.b`` (1,)

``W_*`` matrices are ``state x input``, ``U_*`` are ``state x state``.
``U_c`` of group ``k`` is stored ``N x Ntilde`` so that it maps the group's
candidate memory into the joint state space.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor import RngStream, uniform_draws

ARCHITECTURES = ("gru", "lstm", "cwlstm", "mgrn")
GROUPED = ("cwlstm", "mgrn")

GRU_GATES = ("r", "z", "h")
LSTM_GATES = ("i", "f", "o", "c")


@dataclass(frozen=True)
class GroupingScheme:
    """Ordered partition of input columns ``0..M-1`` into disjoint groups."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("grouping needs at least one non-empty group")
        flat = [i for g in groups for i in g]
        if sorted(flat) != list(range(len(flat))):
            raise ValueError(f"groups {groups} are not a partition of 0..{len(flat) - 1}")

    @property
    def n_inputs(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    def __len__(self):
        return len(self.groups)

    @classmethod
    def total_split(cls, n_inputs: int = 16) -> "GroupingScheme":
        return cls(tuple((i,) for i in range(n_inputs)))

    @classmethod
    def two_groups(cls) -> "GroupingScheme":
        """Each observable with its own seven parameter columns (simulation layout)."""
        return cls(((0, *range(2, 9)), (1, *range(9, 16))))

    @classmethod
    def single(cls, n_inputs: int) -> "GroupingScheme":
        return cls((tuple(range(n_inputs)),))

    def encode(self) -> str:
        return ";".join(",".join(map(str, g)) for g in self.groups)

    @classmethod
    def decode(cls, text: str) -> "GroupingScheme":
        return cls(tuple(tuple(int(i) for i in g.split(",")) for g in text.split(";")))


GROUPING_TOKENS = ("two-groups", "total-split")


def grouping_from_token(token: str, n_inputs: int = 16) -> GroupingScheme:
    if token == "two-groups":
        if n_inputs != 16:
            raise ValueError("two-groups grouping is defined for the 16-column simulation layout")
        return GroupingScheme.two_groups()
    if token == "total-split":
        return GroupingScheme.total_split(n_inputs)
    raise ValueError(f"unknown grouping {token!r}; valid: {', '.join(GROUPING_TOKENS)}")


@dataclass(frozen=True)
class DimPlan:
    """Common marginal width ``marginal_dim`` and joint width ``lam * marginal_dim``."""

    marginal_dim: int
    lam: int = 1

    def __post_init__(self):
        if self.marginal_dim < 1 or self.lam < 1:
            raise ValueError("marginal_dim and lam must be positive")

    @property
    def joint_dim(self) -> int:
        return self.lam * self.marginal_dim


@dataclass(frozen=True)
class ModelSpec:
    """Architecture tag, widths and window length of one model.

    ``hidden`` is the width of the state fed to the dense head (N). Grouped
    architectures also carry ``grouping`` and ``marginal_dim`` (Ntilde).
    """

    arch: str
    n_inputs: int
    hidden: int
    grouping: GroupingScheme | None = None
    marginal_dim: int | None = None
    lookback: int = 5

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; valid: {ARCHITECTURES}")
        if self.n_inputs < 1 or self.hidden < 1 or self.lookback < 1:
            raise ValueError("n_inputs, hidden and lookback must be positive")
        if self.arch in GROUPED:
            if self.grouping is None or self.marginal_dim is None:
                raise ValueError(f"{self.arch} needs a grouping and a marginal_dim")
            if self.grouping.n_inputs != self.n_inputs:
                raise ValueError("grouping does not cover n_inputs columns")
            if self.marginal_dim < 1:
                raise ValueError("marginal_dim must be positive")
        elif self.grouping is not None or self.marginal_dim is not None:
            raise ValueError(f"{self.arch} takes no grouping")

    @classmethod
    def gru(cls, n_inputs: int, hidden: int, lookback: int = 5) -> "ModelSpec":
        return cls("gru", n_inputs, hidden, lookback=lookback)

    @classmethod
    def lstm(cls, n_inputs: int, hidden: int, lookback: int = 5) -> "ModelSpec":
        return cls("lstm", n_inputs, hidden, lookback=lookback)

    @classmethod
    def mgrn(cls, grouping: GroupingScheme, plan: DimPlan, lookback: int = 5) -> "ModelSpec":
        return cls("mgrn", grouping.n_inputs, plan.joint_dim, grouping, plan.marginal_dim, lookback)

    @classmethod
    def cwlstm(cls, grouping: GroupingScheme, plan: DimPlan, lookback: int = 5) -> "ModelSpec":
        return cls("cwlstm", grouping.n_inputs, plan.joint_dim, grouping, plan.marginal_dim, lookback)

    @property
    def lam(self) -> int | None:
        if self.marginal_dim is None:
            return None
        return self.hidden // self.marginal_dim

    def encode(self) -> str:
        parts = [f"arch={self.arch}", f"inputs={self.n_inputs}", f"hidden={self.hidden}",
                 f"lookback={self.lookback}"]
        if self.grouping is not None:
            parts += [f"marginal_dim={self.marginal_dim}", f"groups={self.grouping.encode()}"]
        return " ".join(parts)

    @classmethod
    def decode(cls, text: str) -> "ModelSpec":
        kv = dict(item.split("=", 1) for item in text.split())
        grouping = GroupingScheme.decode(kv["groups"]) if "groups" in kv else None
        marginal = int(kv["marginal_dim"]) if "marginal_dim" in kv else None
        return cls(kv["arch"], int(kv["inputs"]), int(kv["hidden"]), grouping, marginal,
                   int(kv.get("lookback", 5)))


def _cell_layout(prefix: str, gates: Sequence[str], n_in: int, n_state: int):
    out = [(f"{prefix}.W_{g}", (n_state, n_in)) for g in gates]
    out += [(f"{prefix}.U_{g}", (n_state, n_state)) for g in gates]
    out += [(f"{prefix}.b_{g}", (n_state,)) for g in gates]
    return out


def recurrent_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Named tensor shapes of the recurrent block, in storage order."""
    M, N = spec.n_inputs, spec.hidden
    if spec.arch == "gru":
        return _cell_layout("gru", GRU_GATES, M, N)
    if spec.arch == "lstm":
        return _cell_layout("lstm", LSTM_GATES, M, N)
    Nt = spec.marginal_dim
    sizes = spec.grouping.sizes
    out = []
    if spec.arch == "mgrn":
        for k, m in enumerate(sizes):
            out += _cell_layout(f"mgrn.group{k}", GRU_GATES, m, Nt)
        out += [("mgrn.joint.W_z", (N, M)), ("mgrn.joint.U_z", (N, N))]
        out += [(f"mgrn.joint.group{k}.U_c", (N, Nt)) for k in range(len(sizes))]
        out += [("mgrn.joint.b_c", (N,)), ("mgrn.joint.b_z", (N,))]
        return out
    for k, m in enumerate(sizes):
        for direction in ("fwd", "bwd"):
            out += _cell_layout(f"cwlstm.group{k}.{direction}", LSTM_GATES, m, Nt)
    out += _cell_layout("cwlstm.joint", LSTM_GATES, 2 * len(sizes) * Nt, N)
    return out


def layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Full layout: recurrent block followed by the dense head."""
    return recurrent_layout(spec) + [("head.w", (1, spec.hidden)), ("head.b", (1,))]


def count_params(spec: ModelSpec) -> int:
    """Closed-form count of recurrent parameters, excluding the dense head."""
    M, N = spec.n_inputs, spec.hidden
    if spec.arch == "gru":
        return 3 * (N * M + N * N + N)
    if spec.arch == "lstm":
        return 4 * (N * M + N * N + N)
    Nt = spec.marginal_dim
    K = len(spec.grouping)
    if spec.arch == "mgrn":
        marginal = sum(3 * (Nt * m + Nt * Nt + Nt) for m in spec.grouping.sizes)
        return marginal + N * M + N * N + K * N * Nt + 2 * N
    marginal = sum(2 * 4 * (Nt * m + Nt * Nt + Nt) for m in spec.grouping.sizes)
    return marginal + 4 * (N * 2 * K * Nt + N * N + N)


class Params:
    """Flat parameter vector with named, reshaped views.

    ``params["gru.W_r"]`` is a view, so in-place edits change ``params.flat``.
    """

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        self.shapes = tuple((name, tuple(shape)) for name, shape in shapes)
        self._slices = {}
        self._children: dict[str, list[tuple[str, str]]] = {}
        offset = 0
        for name, shape in self.shapes:
            if name in self._slices:
                raise ValueError(f"duplicate tensor name {name}")
            size = math.prod(shape)
            self._slices[name] = (offset, offset + size, shape)
            prefix, _, short = name.rpartition(".")
            self._children.setdefault(prefix, []).append((short, name))
            offset += size
        if flat is None:
            flat = np.zeros(offset)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (offset,):
            raise ValueError(f"flat buffer has shape {flat.shape}, layout needs ({offset},)")
        self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self._slices[name]
        return self.flat[lo:hi].reshape(shape)

    def __setitem__(self, name: str, value):
        self[name][...] = value

    def __contains__(self, name):
        return name in self._slices

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self.shapes)

    def items(self):
        return ((name, self[name]) for name in self)

    def block(self, prefix: str) -> dict[str, np.ndarray]:
        """Views of every tensor directly under ``prefix``, keyed by the short name."""
        return {short: self[name] for short, name in self._children.get(prefix, ())}

    def copy(self) -> "Params":
        return Params(self.shapes, self.flat.copy())

    def zeros_like(self) -> "Params":
        return Params(self.shapes)

    def __repr__(self):
        return f"Params({len(self.shapes)} tensors, {self.size} scalars)"


def zeros(spec: ModelSpec) -> Params:
    return Params(layout(spec))


def init_params(spec: ModelSpec, stream: RngStream) -> tuple[Params, RngStream]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases.

    ``fan_in`` is the column count of each matrix. Matrices draw from the
    stream in layout order, one word per element.
    """
    params = zeros(spec)
    for name, shape in params.shapes:
        if len(shape) != 2:
            continue
        u, stream = uniform_draws(stream, math.prod(shape))
        bound = 1.0 / math.sqrt(shape[1])
        params[name] = ((2.0 * u - 1.0) * bound).reshape(shape)
    return params, stream


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = "# mgrnlab checkpoint v1"


def dumps_checkpoint(spec: ModelSpec, params: Params) -> str:
    lines = [CHECKPOINT_MAGIC]
    for name, arr in params.items():
        lines.append(f"tensor {name} {' '.join(map(str, arr.shape))}")
        lines.append(" ".join(f"{v:.17g}" for v in arr.ravel()))
    lines.append(f"spec {spec.encode()}")
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> tuple[ModelSpec, Params]:
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad header)")
    if not lines[-1].startswith("spec "):
        raise ValueError("checkpoint is missing its trailing spec line")
    spec = ModelSpec.decode(lines[-1][5:])
    params = zeros(spec)
    body = lines[1:-1]
    if len(body) != 2 * len(params.shapes):
        raise ValueError("checkpoint tensor count does not match the spec")
    for header, values in zip(body[0::2], body[1::2]):
        tag, name, *dims = header.split()
        if tag != "tensor" or name not in params:
            raise ValueError(f"unexpected tensor header {header!r}")
        shape = tuple(int(d) for d in dims)
        if shape != params[name].shape:
            raise ValueError(f"{name}: shape {shape} does not match spec {params[name].shape}")
        params[name] = np.array([float(v) for v in values.split()]).reshape(shape)
    return spec, params


def atomic_write_text(path: str | os.PathLike, text: str):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, spec: ModelSpec, params: Params):
    atomic_write_text(path, dumps_checkpoint(spec, params))


def load_checkpoint(path) -> tuple[ModelSpec, Params]:
    return loads_checkpoint(Path(path).read_text())
