"""The dual-path spectral-spatial fusion transformer.

Layout conventions: cubes are [B, H, W, C] (channels last); token sequences are
[batch, length, D]. Parameters live in a flat name -> Tensor mapping so the
optimizer, checkpoints and gradient checks can treat them uniformly.
"""
import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats as _stats

from .autograd import (
    BatchNormState,
    Tensor,
    as_tensor,
    batchnorm2d,
    conv1x1,
    conv3x3,
    gelu,
    layernorm,
    linear,
    maxpool2d,
    mean,
    multi_head_attention,
    reshape,
)

TAPS = ("fused", "spectral", "spatial")
BRANCHES = ("spectral", "spatial")


@dataclass
class SsftConfig:
    num_bands: int
    num_classes: int
    embed_dim: int = 64
    downsample: int = 8
    heads: int = 4
    ffn_mult: int = 4
    aux_heads: bool = True
    lambda_aux: Optional[float] = None
    branch_mask: dict = field(default_factory=lambda: {"spectral": True, "spatial": True})

    def __post_init__(self):
        if self.lambda_aux is None:
            self.lambda_aux = 0.05 if self.aux_heads else 0.0
        unknown = set(self.branch_mask) - set(BRANCHES)
        if unknown:
            raise ValueError(f"branch_mask: unknown branch {sorted(unknown)}")
        self.branch_mask = {b: _on(self.branch_mask.get(b, True)) for b in BRANCHES}
        if self.num_bands < 1:
            raise ValueError("num_bands must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embed_dim < 1 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be a positive multiple of heads={self.heads}")
        if self.downsample < 1 or self.ffn_mult < 1:
            raise ValueError("downsample and ffn_mult must be >= 1")
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be >= 0")
        if self.lambda_aux > 0 and not self.aux_heads:
            raise ValueError(f"lambda_aux={self.lambda_aux} requires aux_heads to be enabled")
        if not any(self.branch_mask.values()):
            raise ValueError("at least one branch must stay enabled")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"model: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _on(v):
    if isinstance(v, str):
        if v not in ("on", "off"):
            raise ValueError(f"branch switch must be on/off, got {v!r}")
        return v == "on"
    return bool(v)


# ---------------------------------------------------------------- parameters

def param_shapes(config):
    """Ordered name -> shape of every trainable tensor; the single source of the layout."""
    C, D, K = config.num_bands, config.embed_dim, config.num_classes
    F = config.ffn_mult * D
    shapes = {
        "spectral.embed.weight": (1, D),
        "spectral.embed.bias": (D,),
        "spectral.channel_embed": (C, D),
    }
    shapes.update(_attn_block_shapes("spectral.attn", D, cross=False))
    shapes.update(_ffn_shapes("spectral.ffn", D, F))
    shapes.update({
        "spatial.proj.weight": (C, D),
        "spatial.proj.bias": (D,),
        "spatial.conv.weight": (3, 3, D, D),
        "spatial.conv.bias": (D,),
        "spatial.bn.weight": (D,),
        "spatial.bn.bias": (D,),
    })
    shapes.update(_attn_block_shapes("fusion.attn", D, cross=True))
    shapes.update(_ffn_shapes("fusion.ffn", D, F))
    heads = ["head.main"] + (["head.aux_spectral", "head.aux_spatial"] if config.aux_heads else [])
    for h in heads:
        shapes.update({f"{h}.fc1.weight": (D, D), f"{h}.fc1.bias": (D,),
                       f"{h}.fc2.weight": (D, K), f"{h}.fc2.bias": (K,)})
    return shapes


def _attn_block_shapes(prefix, D, cross):
    norms = ["norm_q", "norm_kv"] if cross else ["norm"]
    out = {}
    for n in norms:
        out[f"{prefix}.{n}.weight"] = (D,)
        out[f"{prefix}.{n}.bias"] = (D,)
    for p in ("q", "k", "v", "out"):
        out[f"{prefix}.{p}.weight"] = (D, D)
        out[f"{prefix}.{p}.bias"] = (D,)
    return out


def _ffn_shapes(prefix, D, F):
    return {f"{prefix}.norm.weight": (D,), f"{prefix}.norm.bias": (D,),
            f"{prefix}.fc1.weight": (D, F), f"{prefix}.fc1.bias": (F,),
            f"{prefix}.fc2.weight": (F, D), f"{prefix}.fc2.bias": (D,)}


@dataclass
class SsftParams:
    tensors: dict
    bn: BatchNormState

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def pair(self, prefix):
        return self.tensors[f"{prefix}.weight"], self.tensors[f"{prefix}.bias"]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_dict(self):
        """Name -> array copy of parameters and batchnorm running statistics."""
        out = {k: t.data.copy() for k, t in self.tensors.items()}
        out["spatial.bn.running_mean"] = self.bn.running_mean.copy()
        out["spatial.bn.running_var"] = self.bn.running_var.copy()
        return out

    def load_state_dict(self, state):
        for k, t in self.tensors.items():
            t.data = np.array(state[k], dtype=t.data.dtype)
        self.bn.running_mean = np.array(state["spatial.bn.running_mean"], dtype=self.bn.running_mean.dtype)
        self.bn.running_var = np.array(state["spatial.bn.running_var"], dtype=self.bn.running_var.dtype)

    def astype(self, dtype):
        tensors = {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k) for k, t in self.tensors.items()}
        bn = BatchNormState(self.bn.running_mean.shape[0], self.bn.momentum, self.bn.eps, dtype)
        bn.running_mean = self.bn.running_mean.astype(dtype)
        bn.running_var = self.bn.running_var.astype(dtype)
        return SsftParams(tensors, bn)


def _trunc_normal(rng, shape, std=0.02):
    return _stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_params(config, seed=0, dtype=np.float64):
    """Seeded initialization.

    Linear/attention weights: truncated normal (std 0.02, cut at 2 std).
    Convolutions: Kaiming-uniform over fan-in. Channel embedding: normal std 0.02.
    Biases zero; norm scales one. Auxiliary heads draw last so that enabling them
    does not perturb the main-path initialization.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("head.aux"):
            continue
        tensors[name] = _init_one(name, shape, rng)
    if config.aux_heads:
        for name, shape in param_shapes(config).items():
            if name.startswith("head.aux"):
                tensors[name] = _init_one(name, shape, rng)
    ordered = {k: Tensor(tensors[k].astype(dtype), requires_grad=True, name=k) for k in param_shapes(config)}
    return SsftParams(ordered, BatchNormState(config.embed_dim, dtype=dtype))


def _init_one(name, shape, rng):
    if name.endswith(".bias"):
        return np.zeros(shape)
    if ".norm" in name or ".bn." in name:
        return np.ones(shape)
    if name == "spectral.channel_embed":
        return rng.normal(0.0, 0.02, shape)
    if name in ("spatial.proj.weight", "spatial.conv.weight"):
        fan_in = int(np.prod(shape[:-1]))
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, shape)
    return _trunc_normal(rng, shape)


def param_count(config):
    """Closed-form trainable-parameter count: (total, per-tensor breakdown)."""
    C, D, K = config.num_bands, config.embed_dim, config.num_classes
    F = config.ffn_mult * D
    ffn = 2 * D + D * F + F + F * D + D
    attn_proj = 4 * (D * D + D)
    head = D * D + D + D * K + K
    breakdown = {
        "spectral.embed": 2 * D,
        "spectral.channel_embed": C * D,
        "spectral.attn": 2 * D + attn_proj,
        "spectral.ffn": ffn,
        "spatial.proj": C * D + D,
        "spatial.conv": 9 * D * D + D,
        "spatial.bn": 2 * D,
        "fusion.attn": 4 * D + attn_proj,
        "fusion.ffn": ffn,
        "head.main": head,
    }
    if config.aux_heads:
        breakdown["head.aux_spectral"] = head
        breakdown["head.aux_spatial"] = head
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------- forward

def _attn_params(params, prefix):
    return {p: params.pair(f"{prefix}.{p}") for p in ("q", "k", "v", "out")}


def _ffn(x, params, prefix):
    h = layernorm(x, *params.pair(f"{prefix}.norm"))
    h = gelu(linear(h, *params.pair(f"{prefix}.fc1")))
    return linear(h, *params.pair(f"{prefix}.fc2"))


def _check_bands(X, config):
    if X.ndim != 4:
        raise ValueError(f"expected a [B, H, W, C] batch, got shape {X.shape}")
    if X.shape[-1] != config.num_bands:
        raise ValueError(f"input has {X.shape[-1]} bands, model expects {config.num_bands}")


def spectral_forward(X, params, config):
    """Band-token self-attention at every pooled location -> [B, H/s, W/s, D]."""
    X = as_tensor(X)
    _check_bands(X, config)
    pooled = maxpool2d(X, config.downsample)
    B, Hs, Ws, C = pooled.shape
    tokens = reshape(pooled, (B * Hs * Ws, C, 1))
    z = linear(tokens, *params.pair("spectral.embed")) + params["spectral.channel_embed"]
    h = layernorm(z, *params.pair("spectral.attn.norm"))
    z = z + multi_head_attention(h, h, _attn_params(params, "spectral.attn"), config.heads)
    z = z + _ffn(z, params, "spectral.ffn")
    return reshape(mean(z, axis=1), (B, Hs, Ws, config.embed_dim))


def spatial_forward(X, params, config, mode="train"):
    """1x1 projection, max-pool, 3x3 conv, batchnorm, GELU -> [B, H/s, W/s, D]."""
    X = as_tensor(X)
    _check_bands(X, config)
    x = conv1x1(X, *params.pair("spatial.proj"))
    x = maxpool2d(x, config.downsample)
    x = conv3x3(x, *params.pair("spatial.conv"))
    x = batchnorm2d(x, *params.pair("spatial.bn"), params.bn, mode=mode)
    return gelu(x)


def fuse(h_s, h_p, params, config):
    """Cross-attention with spatial tokens as queries and spectral tokens as keys/values.

    Both inputs are [B, N, D]; the residual stays on the spatial stream.
    """
    if h_s.shape != h_p.shape:
        raise ValueError(f"spectral tokens {h_s.shape} and spatial tokens {h_p.shape} differ")
    q = layernorm(h_p, *params.pair("fusion.attn.norm_q"))
    kv = layernorm(h_s, *params.pair("fusion.attn.norm_kv"))
    u = h_p + multi_head_attention(q, kv, _attn_params(params, "fusion.attn"), config.heads)
    return u + _ffn(u, params, "fusion.ffn")


def _mlp_head(tokens, params, prefix):
    pooled = mean(tokens, axis=1)
    return linear(gelu(linear(pooled, *params.pair(f"{prefix}.fc1"))), *params.pair(f"{prefix}.fc2"))


def heads_forward(fused, h_s, h_p, params, config, mode="train"):
    """Main logits, plus (spectral, spatial) auxiliary logits in train mode when enabled."""
    z = _mlp_head(fused, params, "head.main")
    if mode == "train" and config.aux_heads:
        return z, _mlp_head(h_s, params, "head.aux_spectral"), _mlp_head(h_p, params, "head.aux_spatial")
    return z


def _tokens(fmap):
    B, Hs, Ws, D = fmap.shape
    return reshape(fmap, (B, Hs * Ws, D))


def encode(X, params, config, mode="train", token_hook=None):
    """Both branch feature maps as [B, N, D] token sequences, branch masks applied.

    ``token_hook``, when given, maps (h_s, h_p) -> (h_s, h_p) after masking; it
    exists so tests can permute or replace tokens before fusion.
    """
    h_s = _tokens(spectral_forward(X, params, config))
    h_p = _tokens(spatial_forward(X, params, config, mode))
    if not config.branch_mask["spectral"]:
        h_s = Tensor(np.zeros(h_s.shape, dtype=h_s.dtype))
    if not config.branch_mask["spatial"]:
        h_p = Tensor(np.zeros(h_p.shape, dtype=h_p.dtype))
    if token_hook is not None:
        h_s, h_p = token_hook(h_s, h_p)
    return h_s, h_p


def model_forward(X, params, config, mode="train", token_hook=None):
    h_s, h_p = encode(X, params, config, mode, token_hook)
    return heads_forward(fuse(h_s, h_p, params, config), h_s, h_p, params, config, mode)


def features(X, params, config, tap="fused", mode="eval"):
    """Mean-pooled D-dimensional embedding per sample from one tap."""
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}; expected one of {TAPS}")
    h_s, h_p = encode(X, params, config, mode)
    if tap == "spectral":
        t = h_s
    elif tap == "spatial":
        t = h_p
    else:
        t = fuse(h_s, h_p, params, config)
    return t.data.mean(axis=1)


def export_features(path, ids, labels, feats):
    """CSV rows: id, label, then D feature values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for sid, lab, row in zip(ids, labels, feats):
            lab = ";".join(str(int(l)) for l in np.atleast_1d(lab)) if np.ndim(lab) else int(lab)
            w.writerow([sid, lab] + [repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config, extra=None):
    """JSON index at ``path`` plus a raw little-endian float32 payload next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in params.state_dict().items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32"})
        chunks.append(buf)
        offset += len(buf)
    index = {"tensors": entries, "config": config.to_dict()}
    if extra:
        index.update(extra)
    path.write_text(json.dumps(index))
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path, config=None, dtype=np.float32):
    """Returns (params, config, index). Every tensor is validated against the config."""
    path = Path(path)
    try:
        index = json.loads(path.read_text())
        tensors = index["tensors"]
        if config is None:
            config = SsftConfig.from_dict(index["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint index ({exc})") from exc
    payload = path.with_suffix(".bin").read_bytes()
    expected = dict(param_shapes(config))
    expected["spatial.bn.running_mean"] = (config.embed_dim,)
    expected["spatial.bn.running_var"] = (config.embed_dim,)
    state = {}
    for e in tensors:
        name, shape, off = e["name"], tuple(e["shape"]), int(e["offset"])
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = int(np.prod(shape)) * 4
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} at offset {off} overruns the {len(payload)}-byte payload")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: tensor {name!r} holds non-finite values")
        state[name] = arr
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    end = max(int(e["offset"]) + int(np.prod(e["shape"])) * 4 for e in tensors)
    if end != len(payload):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, index accounts for {end}")
    params = init_params(config, 0, dtype=dtype)
    params.load_state_dict(state)
    return params, config, index
