"""Backbone, expression head and AU head.

The backbone is a stack of linear+ReLU layers. The expression head is one
linear map; the AU head is an MLP with two hidden ReLU layers. Heads return
raw logits; the links (softmax / sigmoid) live inside the losses.

Each parameter group draws its initial weights from its own RNG stream
keyed on ``(seed, group)``, so the AU head initialised with seed ``s`` is the
same whether it comes from :func:`init_parameters` or :func:`transfer_backbone`.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tape, Tensor, add_bias, matmul, relu
from .errors import CheckpointError, ContractError, DimensionError, TransferError

CKPT_HEADER = "AUTRANSFER-CKPT v1"

GROUPS = ("backbone", "expr_head", "au_head")
_GROUP_STREAM = {"backbone": 0, "expr_head": 1, "au_head": 2}


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 64
    backbone_layers: tuple[int, ...] = (128, 64)
    num_expressions: int = 6
    num_aus: int = 12
    au_head_hidden: tuple[int, int] = (32, 16)
    freeze_backbone_in_stage2: bool = False

    def __post_init__(self):
        object.__setattr__(self, "backbone_layers", tuple(int(w) for w in self.backbone_layers))
        object.__setattr__(self, "au_head_hidden", tuple(int(w) for w in self.au_head_hidden))
        if len(self.au_head_hidden) != 2:
            raise ContractError(f"au_head_hidden needs exactly two widths, got {self.au_head_hidden}")
        widths = (self.input_dim, self.num_expressions, self.num_aus, *self.backbone_layers, *self.au_head_hidden)
        if any(w <= 0 for w in widths):
            raise ContractError("all layer widths must be positive")

    @property
    def feat_dim(self) -> int:
        return self.backbone_layers[-1] if self.backbone_layers else self.input_dim

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Weight shape of every linear block, keyed by block name."""
        shapes = {}
        dims = (self.input_dim, *self.backbone_layers)
        for i in range(len(self.backbone_layers)):
            shapes[f"backbone.{i}"] = (dims[i], dims[i + 1])
        shapes["expr_head"] = (self.feat_dim, self.num_expressions)
        au_dims = (self.feat_dim, *self.au_head_hidden, self.num_aus)
        for i in range(3):
            shapes[f"au_head.{i}"] = (au_dims[i], au_dims[i + 1])
        return shapes

    def parameter_count(self, include_expr_head: bool = True) -> int:
        total = 0
        for name, (r, c) in self.layer_shapes().items():
            if name == "expr_head" and not include_expr_head:
                continue
            total += r * c + c
        return total


def group_of(block: str) -> str:
    return block.split(".", 1)[0]


@dataclass
class ModelParameters:
    """Weight/bias tensors per linear block plus per-group trainable flags.

    ``blocks`` maps block name to ``(weight, bias)``; the expression head is
    absent after :func:`transfer_backbone`.
    """

    blocks: dict[str, tuple[Tensor, Tensor]]
    trainable: dict[str, bool] = field(default_factory=lambda: {g: True for g in GROUPS})

    def block_names(self, group: str) -> list[str]:
        names = [n for n in self.blocks if group_of(n) == group]
        return sorted(names, key=lambda n: int(n.split(".")[1]) if "." in n else 0)

    def has_group(self, group: str) -> bool:
        return any(group_of(n) == group for n in self.blocks)

    def tensors(self, trainable_only: bool = False) -> list[Tensor]:
        out = []
        for name, (w, b) in self.blocks.items():
            if trainable_only and not self.trainable.get(group_of(name), True):
                continue
            out.extend((w, b))
        return out

    def named_tensors(self):
        for name, (w, b) in self.blocks.items():
            yield f"{name}.weight", w
            yield f"{name}.bias", b

    def copy(self) -> "ModelParameters":
        blocks = {
            n: (Tensor(w.data.copy(), requires_grad=True, name=w.name), Tensor(b.data.copy(), requires_grad=True, name=b.name))
            for n, (w, b) in self.blocks.items()
        }
        return ModelParameters(blocks, dict(self.trainable))

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def config(self) -> ModelConfig:
        """Recover the architecture from the stored shapes."""
        try:
            bb = self.block_names("backbone")
            au = self.block_names("au_head")
            input_dim = self.blocks[bb[0]][0].shape[0] if bb else self.blocks[au[0]][0].shape[0]
            layers = tuple(self.blocks[n][0].shape[1] for n in bb)
            hidden = tuple(self.blocks[n][0].shape[1] for n in au[:2])
            num_aus = self.blocks[au[2]][0].shape[1]
        except (IndexError, KeyError) as exc:
            raise CheckpointError(f"parameter set is missing blocks: {exc}") from None
        n_expr = self.blocks["expr_head"][0].shape[1] if "expr_head" in self.blocks else ModelConfig.num_expressions
        return ModelConfig(
            input_dim=input_dim,
            backbone_layers=layers,
            num_expressions=n_expr,
            num_aus=num_aus,
            au_head_hidden=hidden,
            freeze_backbone_in_stage2=not self.trainable.get("backbone", True),
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_group(config: ModelConfig, seed: int, group: str) -> dict[str, tuple[Tensor, Tensor]]:
    rng = np.random.default_rng([int(seed), _GROUP_STREAM[group]])
    blocks = {}
    for name, (r, c) in config.layer_shapes().items():
        if group_of(name) != group:
            continue
        blocks[name] = (
            Tensor(_glorot(rng, r, c), requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(c), requires_grad=True, name=f"{name}.bias"),
        )
    return blocks


def init_parameters(config: ModelConfig, seed: int) -> ModelParameters:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    blocks = {}
    for group in GROUPS:
        blocks.update(_init_group(config, seed, group))
    return ModelParameters(blocks)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def _linear(params: ModelParameters, name: str, x: Tensor, tape: Tape | None) -> Tensor:
    w, b = params.blocks[name]
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"{name}: input width {x.shape[-1] if x.data.ndim else 0} does not match {w.shape[0]}")
    return add_bias(matmul(x, w, tape), b, tape)


def forward_features(params: ModelParameters, x, tape: Tape | None = None) -> Tensor:
    h = _as_input(x)
    for name in params.block_names("backbone"):
        h = relu(_linear(params, name, h, tape), tape)
    return h


def forward_expression(params: ModelParameters, features, tape: Tape | None = None) -> Tensor:
    if "expr_head" not in params.blocks:
        raise ContractError("parameter set has no expression head (dropped by transfer?)")
    return _linear(params, "expr_head", _as_input(features), tape)


def forward_au(params: ModelParameters, features, tape: Tape | None = None) -> Tensor:
    names = params.block_names("au_head")
    h = _as_input(features)
    for i, name in enumerate(names):
        h = _linear(params, name, h, tape)
        if i < len(names) - 1:
            h = relu(h, tape)
    return h


def predict_au_scores(params: ModelParameters, x) -> np.ndarray:
    """Sigmoid AU probabilities, no tape."""
    from .diffcore import stable_sigmoid

    return stable_sigmoid(forward_au(params, forward_features(params, x)).data)


def predict_expression(params: ModelParameters, x) -> np.ndarray:
    return np.argmax(forward_expression(params, forward_features(params, x)).data, axis=1)


def transfer_backbone(pretrained: ModelParameters, target_config: ModelConfig, seed: int) -> ModelParameters:
    """Copy the pretrained backbone, drop the expression head, fresh AU head."""
    expected = {n: s for n, s in target_config.layer_shapes().items() if group_of(n) == "backbone"}
    source = {n: pretrained.blocks[n][0].shape for n in pretrained.block_names("backbone")}
    if source != expected:
        raise TransferError(f"backbone shapes {source} do not match target config {expected}")
    blocks = {}
    for name in expected:
        w, b = pretrained.blocks[name]
        blocks[name] = (
            Tensor(w.data.copy(), requires_grad=True, name=w.name),
            Tensor(b.data.copy(), requires_grad=True, name=b.name),
        )
    blocks.update(_init_group(target_config, seed, "au_head"))
    trainable = {"backbone": not target_config.freeze_backbone_in_stage2, "au_head": True}
    return ModelParameters(blocks, trainable)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def checkpoint_text(params: ModelParameters) -> str:
    lines = [CKPT_HEADER]
    for name, t in params.named_tensors():
        arr = t.data.reshape(1, -1) if t.data.ndim == 1 else t.data
        rows, cols = arr.shape
        lines.append(f"[block {name} {rows} {cols}]")
        for row in arr:
            lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def save_checkpoint(params: ModelParameters, path) -> None:
    text = checkpoint_text(params)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def parse_checkpoint(text: str) -> ModelParameters:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise CheckpointError(f"expected header {CKPT_HEADER!r}")
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        head = lines[i].strip()
        if not head:
            i += 1
            continue
        parts = head.strip("[]").split()
        if not (head.startswith("[") and head.endswith("]")) or len(parts) != 4 or parts[0] != "block":
            raise CheckpointError(f"line {i + 1}: bad section header {head!r}")
        _, name, rows, cols = parts
        rows, cols = int(rows), int(cols)
        body = lines[i + 1 : i + 1 + rows]
        if len(body) != rows:
            raise CheckpointError(f"block {name}: expected {rows} rows")
        try:
            arr = np.array([[float(v) for v in row.split()] for row in body], dtype=np.float64)
        except ValueError as exc:
            raise CheckpointError(f"block {name}: {exc}") from None
        if arr.shape != (rows, cols):
            raise CheckpointError(f"block {name}: values do not form a {rows}x{cols} matrix")
        arrays[name] = arr
        i += 1 + rows

    blocks = {}
    for key in arrays:
        if not key.endswith(".weight"):
            continue
        name = key[: -len(".weight")]
        w = arrays[key]
        b = arrays.get(f"{name}.bias")
        if b is None or b.shape != (1, w.shape[1]):
            raise CheckpointError(f"block {name}: missing or misshapen bias")
        blocks[name] = (
            Tensor(w, requires_grad=True, name=f"{name}.weight"),
            Tensor(b.reshape(-1), requires_grad=True, name=f"{name}.bias"),
        )
    if not blocks:
        raise CheckpointError("checkpoint holds no blocks")
    trainable = {g: True for g in GROUPS if any(group_of(n) == g for n in blocks)}
    return ModelParameters(blocks, trainable)


def load_checkpoint(path, config: ModelConfig | None = None) -> ModelParameters:
    """Read a checkpoint; with ``config``, every present block must match its shape.

    Raises before returning anything, so a failed load leaves no partial state.
    """
    with open(path) as fh:
        params = parse_checkpoint(fh.read())
    if config is not None:
        expected = config.layer_shapes()
        for name, (w, _) in params.blocks.items():
            if expected.get(name) != w.shape:
                raise CheckpointError(f"block {name} has shape {w.shape}, config expects {expected.get(name)}")
        for name in expected:
            if group_of(name) != "expr_head" and name not in params.blocks:
                raise CheckpointError(f"checkpoint lacks block {name}")
        params.trainable["backbone"] = not config.freeze_backbone_in_stage2
    return params
