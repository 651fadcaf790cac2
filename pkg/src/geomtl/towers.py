"""Two-tower propensity models: the single global baseline and the MTL variant.

The MTL model shares the user and title towers across all territories and
adds one dense head per territory group on top of the user tower. Each
example is routed through the head of its own group, so a head only ever
receives gradient from examples of its group.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .numcore import (
    Adam,
    BatchNormLayer,
    DenseLayer,
    ShapeError,
    as_matrix,
    bce_loss,
    relu_backward,
    relu_forward,
    sigmoid,
)

CHECKPOINT_MAGIC = b"GEOMTLCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint could not be decoded or does not fit the requested model."""


@dataclass(frozen=True)
class TowerConfig:
    user_dim: int
    title_dim: int
    hidden_dim: int = 32  # production: 512
    num_groups: int = 4
    head_bias: bool = True
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("user_dim", "title_dim", "hidden_dim", "num_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class Batch:
    user_embs: np.ndarray
    title_embs: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray
    territory_ids: np.ndarray | None = None

    def __post_init__(self):
        self.user_embs = as_matrix(self.user_embs)
        self.title_embs = as_matrix(self.title_embs)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64).reshape(-1)
        if self.territory_ids is None:
            self.territory_ids = np.zeros(self.labels.size, dtype=np.int64)
        self.territory_ids = np.asarray(self.territory_ids, dtype=np.int64).reshape(-1)
        n = self.user_embs.shape[0]
        sizes = {self.title_embs.shape[0], self.labels.size, self.group_ids.size, self.territory_ids.size}
        if sizes != {n}:
            raise ShapeError(
                f"batch arrays disagree in length: users {n}, titles {self.title_embs.shape[0]}, "
                f"labels {self.labels.size}, groups {self.group_ids.size}"
            )

    def __len__(self) -> int:
        return self.labels.size


class Tower:
    """Dense -> BatchNorm -> ReLU -> Dense -> BatchNorm.

    The output stays linear so the user/title dot product can go negative;
    with a ReLU on top both towers would emit non-negative vectors and the
    score could never fall below 0.5.
    """

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator, momentum: float, epsilon: float):
        self.dense = [DenseLayer(in_dim, hidden_dim, rng), DenseLayer(hidden_dim, hidden_dim, rng)]
        self.norm = [BatchNormLayer(hidden_dim, momentum, epsilon), BatchNormLayer(hidden_dim, momentum, epsilon)]
        self._pre_relu: list[np.ndarray] = []

    def named_params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (d, n) in enumerate(zip(self.dense, self.norm)):
            for k, v in d.params().items():
                out[f"{prefix}.dense{i}.{k}"] = v
            for k, v in n.params().items():
                out[f"{prefix}.bn{i}.{k}"] = v
        return out

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, n in enumerate(self.norm):
            for k, v in n.buffers().items():
                out[f"{prefix}.bn{i}.{k}"] = v
        return out

    def set_training(self, flag: bool) -> None:
        for n in self.norm:
            n.train() if flag else n.eval()

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre_relu = []
        h = x
        for d, n in zip(self.dense, self.norm):
            z = n.forward(d.forward(h))
            self._pre_relu.append(z)
            h = relu_forward(z) if len(self._pre_relu) < len(self.dense) else z
        return h

    def backward(self, grad: np.ndarray, prefix: str, grads: dict[str, np.ndarray]) -> np.ndarray:
        for i in reversed(range(len(self.dense))):
            if i < len(self.dense) - 1:
                grad = relu_backward(self._pre_relu[i], grad)
            grad, dgamma, dbeta = self.norm[i].backward(grad)
            grads[f"{prefix}.bn{i}.gamma"] = dgamma
            grads[f"{prefix}.bn{i}.beta"] = dbeta
            grad, dw, db = self.dense[i].backward(grad)
            grads[f"{prefix}.dense{i}.weight"] = dw
            grads[f"{prefix}.dense{i}.bias"] = db
        return grad


class TwoTowerModel:
    kind = "base"

    def __init__(self, config: TowerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.user_tower = Tower(config.user_dim, config.hidden_dim, rng, config.bn_momentum, config.bn_epsilon)
        self.title_tower = Tower(config.title_dim, config.hidden_dim, rng, config.bn_momentum, config.bn_epsilon)
        self.heads: list[DenseLayer] = []
        self.optimizer: Adam | None = None
        self.training = True

    # -- parameter bookkeeping ------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        out = self.user_tower.named_params("user")
        out.update(self.title_tower.named_params("title"))
        for g, head in enumerate(self.heads):
            for k, v in head.params().items():
                out[f"head{g}.{k}"] = v
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = self.user_tower.named_buffers("user")
        out.update(self.title_tower.named_buffers("title"))
        return out

    def train(self) -> None:
        self.training = True
        self.user_tower.set_training(True)
        self.title_tower.set_training(True)

    def eval(self) -> None:
        self.training = False
        self.user_tower.set_training(False)
        self.title_tower.set_training(False)

    def _check_batch(self, batch: Batch) -> None:
        c = self.config
        if batch.user_embs.shape[1] != c.user_dim or batch.title_embs.shape[1] != c.title_dim:
            raise ShapeError(
                f"batch embeddings {batch.user_embs.shape}/{batch.title_embs.shape} do not match "
                f"model dims user={c.user_dim} title={c.title_dim}"
            )

    # -- forward / backward ---------------------------------------------------
    def _user_repr(self, h_user: np.ndarray, group_ids: np.ndarray) -> np.ndarray:
        return h_user

    def _user_repr_backward(self, grad: np.ndarray, group_ids, grads) -> np.ndarray:
        return grad

    def logits(self, batch: Batch) -> np.ndarray:
        self._check_batch(batch)
        self._h_user = self.user_tower.forward(batch.user_embs)
        self._u = self._user_repr(self._h_user, batch.group_ids)
        self._t = self.title_tower.forward(batch.title_embs)
        return np.einsum("ij,ij->i", self._u, self._t)

    def score(self, batch: Batch) -> np.ndarray:
        return sigmoid(self.logits(batch))

    def loss_and_grads(self, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
        """Mean BCE over the batch and gradients for every parameter."""
        if len(batch) == 0:
            raise ValueError("empty batch")
        p = self.score(batch)
        loss, _ = bce_loss(p, batch.labels)
        # d(mean BCE)/d(logit), written directly to stay exact near saturation
        dlogit = (p - batch.labels) / len(batch)
        grads: dict[str, np.ndarray] = {}
        du = dlogit[:, None] * self._t
        dt = dlogit[:, None] * self._u
        self.title_tower.backward(dt, "title", grads)
        dh = self._user_repr_backward(du, batch.group_ids, grads)
        self.user_tower.backward(dh, "user", grads)
        params = self.named_params()
        return loss, {k: grads[k] for k in params}

    def active_params(self, batch: Batch) -> set[str]:
        return set(self.named_params())

    def train_step(self, batch: Batch) -> float:
        if self.optimizer is None:
            raise RuntimeError("attach an optimizer before training")
        self.train()
        loss, grads = self.loss_and_grads(batch)
        self.optimizer.step(self.named_params(), grads, active=self.active_params(batch))
        return loss


class BaselineModel(TwoTowerModel):
    """Single global two-tower model: sigmoid(user_tower(u) . title_tower(t))."""

    kind = "baseline"


class MtlModel(TwoTowerModel):
    """Two-tower model whose user side branches into one dense head per group."""

    kind = "mtl"

    def __init__(self, config: TowerConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng([seed, 1])
        d = config.hidden_dim
        self.heads = []
        for _ in range(config.num_groups):
            head = DenseLayer(d, d, bias=config.head_bias)
            # near-identity start so every head begins as the shared representation
            head.weight[:] = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
            self.heads.append(head)

    def _validate_groups(self, group_ids: np.ndarray) -> None:
        if group_ids.size and (group_ids.min() < 0 or group_ids.max() >= len(self.heads)):
            bad = group_ids[(group_ids < 0) | (group_ids >= len(self.heads))][0]
            raise ValueError(f"group id {bad} out of range for {len(self.heads)} heads")

    def _user_repr(self, h_user, group_ids):
        self._validate_groups(group_ids)
        out = np.empty_like(h_user)
        self._routes = []
        for g, head in enumerate(self.heads):
            rows = np.flatnonzero(group_ids == g)
            if rows.size == 0:
                continue
            out[rows] = head.forward(h_user[rows])
            self._routes.append((g, rows))
        return out

    def _user_repr_backward(self, grad, group_ids, grads):
        dh = np.zeros_like(grad)
        for g, head in enumerate(self.heads):
            grads[f"head{g}.weight"] = np.zeros_like(head.weight)
            if head.has_bias:
                grads[f"head{g}.bias"] = np.zeros_like(head.bias)
        for g, rows in self._routes:
            head = self.heads[g]
            d_in, dw, db = head.backward(grad[rows])
            dh[rows] = d_in
            grads[f"head{g}.weight"] = dw
            if head.has_bias:
                grads[f"head{g}.bias"] = db
        return dh

    def active_params(self, batch: Batch) -> set[str]:
        present = set(np.unique(batch.group_ids).tolist())
        return {
            k for k in self.named_params()
            if not k.startswith("head") or int(k[4:k.index(".")]) in present
        }


def build_model(kind: str, config: TowerConfig, seed: int = 0) -> TwoTowerModel:
    if kind == "baseline":
        return BaselineModel(config, seed)
    if kind == "mtl":
        return MtlModel(config, seed)
    raise ValueError(f"unknown model kind {kind!r}; choose 'baseline' or 'mtl'")


def baseline_score(model: BaselineModel, batch: Batch) -> np.ndarray:
    return model.score(batch)


def mtl_score(model: MtlModel, batch: Batch) -> np.ndarray:
    return model.score(batch)


def masked_loss(model: MtlModel, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Batch-mean BCE where each example only reaches its own group's head."""
    return model.loss_and_grads(batch)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8s   magic "GEOMTLCK"
#   u32  format version
#   u32  + bytes   config JSON (model kind + TowerConfig fields)
#   u32  number of arrays, then per array in declared order:
#        u16 + bytes name, u8 ndim, u32 x ndim shape, float64 LE data
#   u8   optimizer flag; when 1: u32 + bytes Adam header JSON followed by the
#        m and v arrays (same array encoding) for every tracked parameter
#   u32  CRC32 of everything before it

def _write_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode()
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def _all_arrays(model: TwoTowerModel) -> dict[str, np.ndarray]:
    out = dict(model.named_params())
    out.update({f"{k}": v for k, v in model.named_buffers().items()})
    return out


def checkpoint_save(model: TwoTowerModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps({"kind": model.kind, **asdict(model.config)}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    arrays = _all_arrays(model)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        _write_array(buf, name, arr)
    opt = model.optimizer
    if opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        names = list(opt.m)
        header = json.dumps(
            {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t,
             "steps": {k: opt.steps[k] for k in names}, "names": names},
        ).encode()
        buf.write(struct.pack("<I", len(header)))
        buf.write(header)
        for k in names:
            _write_array(buf, k, opt.m[k])
            _write_array(buf, k, opt.v[k])
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_load(data: bytes, expected: TowerConfig | None = None, expected_kind: str | None = None) -> TwoTowerModel:
    """Rebuild a model from :func:`checkpoint_save` output.

    Raises :class:`CheckpointError` for truncated/corrupt input and
    :class:`ShapeError` when the stored config differs from ``expected``.
    """
    if len(data) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated: header incomplete")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a geomtl checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    (clen,) = r.unpack("<I")
    cfg = json.loads(r.take(clen))
    kind = cfg.pop("kind")
    config = TowerConfig(**cfg)
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"checkpoint holds a {kind!r} model, expected {expected_kind!r}")
    if expected is not None and expected != config:
        diffs = [f"{k}: checkpoint={getattr(config, k)} expected={getattr(expected, k)}"
                 for k in asdict(config) if getattr(config, k) != getattr(expected, k)]
        raise ShapeError("checkpoint config does not match requested model: " + "; ".join(diffs))
    model = build_model(kind, config)
    arrays = _all_arrays(model)
    (n,) = r.unpack("<I")
    if n != len(arrays):
        raise ShapeError(f"checkpoint holds {n} arrays, model expects {len(arrays)}")
    for _ in range(n):
        name, arr = r.array()
        if name not in arrays:
            raise ShapeError(f"unexpected array {name!r} in checkpoint")
        if arrays[name].shape != arr.shape:
            raise ShapeError(f"array {name!r}: checkpoint shape {arr.shape} != model shape {arrays[name].shape}")
        arrays[name][...] = arr
    (has_opt,) = r.unpack("<B")
    if has_opt:
        (hlen,) = r.unpack("<I")
        header = json.loads(r.take(hlen))
        opt = Adam(lr=header["lr"], beta1=header["beta1"], beta2=header["beta2"], eps=header["eps"], t=header["t"])
        for k in header["names"]:
            _, m = r.array()
            _, v = r.array()
            opt.m[k], opt.v[k], opt.steps[k] = m, v, header["steps"][k]
        model.optimizer = opt
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return model
