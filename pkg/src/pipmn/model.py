"""PIPMN: Dense MLP stages arranged as a paired inverse pyramid.

Stage widths follow the palindrome ``[k1, ..., kn, ..., k1] * in_dim``. Stage
``j`` and stage ``2n - j`` have equal output width, so the long-range skip
``out[2n-j] += rho_j * out[j]`` never needs a projection.

Each stage (a Dense MLP) works on ``x`` of shape (B, L, D)::

    u = eps1 * permute(temporal_feedforward(permute(x))) + x
    y = eps2 * depth_block(u)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

PIP = "PIP"
OMS = "OMS"


class ConfigError(ValueError):
    """Invalid architecture or run configuration; ``field`` names the culprit."""

    def __init__(self, field, msg):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass
class PipConfig:
    n: int = 2
    kappas: list = field(default_factory=lambda: [4, 8])
    time_length: int = 5
    in_dim: int = 100
    alpha: int = 3
    num_classes: int = 10
    long_range_skip: bool = True
    positional_modeling: bool = True
    linear_skip: bool = True
    structure: str = PIP
    eps1_init: float = 0.1
    eps2_init: float = 1.0
    rho_init: float = 0.1

    def __post_init__(self):
        self.kappas = [int(k) for k in self.kappas]
        self.validate()

    def validate(self):
        if self.structure not in (PIP, OMS):
            raise ConfigError("structure", f"must be {PIP} or {OMS}, got {self.structure!r}")
        if self.structure == PIP:
            if self.n < 1:
                raise ConfigError("n", "needs at least one pair")
            if len(self.kappas) != self.n:
                raise ConfigError("kappas", f"expected {self.n} expansion rates, got {len(self.kappas)}")
        elif not self.kappas:
            raise ConfigError("kappas", "OMS needs at least one stage")
        if self.structure == OMS and self.long_range_skip:
            raise ConfigError("long_range_skip", "OMS has no paired stages; set long_range_skip=false")
        if any(k < 1 for k in self.kappas):
            raise ConfigError("kappas", "expansion rates must be >= 1")
        for name in ("time_length", "in_dim", "alpha"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes", "must be >= 2")

    @property
    def expansion(self):
        """Per-stage width multipliers."""
        if self.structure == OMS:
            return list(self.kappas)
        return expand_palindrome(self.kappas)

    @property
    def stage_dims(self):
        """[(d_in, d_out)] for each stage."""
        dims = [self.in_dim] + [k * self.in_dim for k in self.expansion]
        return list(zip(dims[:-1], dims[1:]))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown architecture key")
        return cls(**d)


def expand_palindrome(kappas):
    """``[k1..kn]`` -> ``[k1, ..., k_{n-1}, kn, k_{n-1}, ..., k1]``."""
    kappas = list(kappas)
    return kappas + kappas[-2::-1]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DenseMlpBlock:
    """Parameters of one stage; ``prefix`` namespaces the parameter names."""

    def __init__(self, prefix, d_in, d_out, cfg: PipConfig, rng):
        L, aL = cfg.time_length, cfg.alpha * cfg.time_length
        self.d_in, self.d_out, self.time_length = d_in, d_out, L
        self.positional_modeling = cfg.positional_modeling
        self.linear_skip = cfg.linear_skip
        P = lambda name, data: Parameter(f"{prefix}.{name}", data)  # noqa: E731

        self.t_norm_g = P("temporal.norm.gamma", np.ones(L))
        self.t_norm_b = P("temporal.norm.beta", np.zeros(L))
        self.fc1_w = P("temporal.fc1.w", _uniform(rng, (L, aL), L))
        self.fc1_b = P("temporal.fc1.b", _uniform(rng, (aL,), L))
        self.fc2_w = P("temporal.fc2.w", _uniform(rng, (aL, L), aL))
        self.fc2_b = P("temporal.fc2.b", _uniform(rng, (L,), aL))
        if self.positional_modeling:
            self.pos_k = P("temporal.pos.k", _uniform(rng, (d_in, 3), 3))
            self.pos_b = P("temporal.pos.b", _uniform(rng, (d_in,), 3))
        self.mix_w = P("temporal.mix.w", _uniform(rng, (3 * L, L), 3 * L))
        self.mix_b = P("temporal.mix.b", _uniform(rng, (L,), 3 * L))
        self.d_norm_g = P("depth.norm.gamma", np.ones(d_in))
        self.d_norm_b = P("depth.norm.beta", np.zeros(d_in))
        self.depth_w = P("depth.w", _uniform(rng, (d_in, d_out), d_in))
        self.depth_b = P("depth.b", _uniform(rng, (d_out,), d_in))
        if self.linear_skip:
            self.skip_w = P("depth.skip.w", _uniform(rng, (d_in, d_out), d_in))
            self.skip_b = P("depth.skip.b", _uniform(rng, (d_out,), d_in))
        self.eps1 = P("eps1", np.array(cfg.eps1_init))
        self.eps2 = P("eps2", np.array(cfg.eps2_init))

    def parameters(self):
        return [v for v in vars(self).values() if isinstance(v, Parameter)]


def positional_modeling(x, block):
    """Depthwise 3-tap convolution along time, x is (B, D, L)."""
    if x.shape[1] != block.d_in:
        raise ad.ShapeError(f"positional modeling: block has {block.d_in} channels, input {x.shape}")
    return ad.depthwise_conv1d(x, block.pos_k, block.pos_b)


def temporal_mlp(x, block):
    """Expand time L -> alpha*L -> L after a layer norm over time. x is (B, D, L)."""
    h = ad.layer_norm(x, block.t_norm_g, block.t_norm_b)
    h = ad.gelu(ad.linear(h, block.fc1_w, block.fc1_b))
    return ad.linear(h, block.fc2_w, block.fc2_b)


def temporal_feedforward(x, block):
    """Mix [positional(x), x, mlp(x)] back down to L. x is (B, D, L)."""
    if x.shape[-1] != block.time_length:
        raise ad.ShapeError(f"temporal block expects time length {block.time_length}, got {x.shape}")
    pos = positional_modeling(x, block) if block.positional_modeling else x
    cat = ad.concat_last([pos, x, temporal_mlp(x, block)])
    return ad.linear(cat, block.mix_w, block.mix_b)


def depth_block(x, block):
    """GELU(W norm(x)) plus the linear skip; x is (B, L, D_in) -> (B, L, D_out)."""
    if x.shape[-1] != block.d_in:
        raise ad.ShapeError(f"depth block expects depth {block.d_in}, got {x.shape}")
    h = ad.layer_norm(x, block.d_norm_g, block.d_norm_b)
    h = ad.gelu(ad.linear(h, block.depth_w, block.depth_b))
    if block.linear_skip:
        h = ad.add(h, ad.linear(x, block.skip_w, block.skip_b))
    return h


def dense_mlp(x, block):
    """One stage: (B, L, D_in) -> (B, L, D_out)."""
    t = ad.permute_last_two(temporal_feedforward(ad.permute_last_two(x), block))
    u = ad.scale_add(t, block.eps1, x)
    return ad.scale(depth_block(u, block), block.eps2)


class PipmnModel:
    def __init__(self, cfg: PipConfig, seed=0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.stages = [DenseMlpBlock(f"stage{i + 1}", d_in, d_out, cfg, rng)
                       for i, (d_in, d_out) in enumerate(cfg.stage_dims)]
        self.n_pairs = cfg.n if cfg.structure == PIP else 0
        self.rhos = []
        if cfg.structure == PIP and cfg.long_range_skip:
            self.rhos = [Parameter(f"skip{j}.rho", np.array(cfg.rho_init))
                         for j in range(1, cfg.n)]
        d_last = cfg.stage_dims[-1][1]
        self.head_w = Parameter("head.w", _uniform(rng, (d_last, cfg.num_classes), d_last))
        self.head_b = Parameter("head.b", _uniform(rng, (cfg.num_classes,), d_last))
        self.feature_mean = np.zeros(cfg.in_dim, dtype=np.float32)
        self.feature_std = np.ones(cfg.in_dim, dtype=np.float32)

    def parameters(self):
        params = [p for s in self.stages for p in s.parameters()]
        return params + self.rhos + [self.head_w, self.head_b]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"parameter sets differ: {missing[:5]}")
        for name, value in state.items():
            p = params[name]
            value = np.asarray(value)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.array(value, dtype=p.data.dtype, order="C")

    def astype(self, dtype):
        """Recast every parameter in place (e.g. float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def set_feature_stats(self, mean, std):
        mean = np.asarray(mean, dtype=np.float32)
        std = np.asarray(std, dtype=np.float32)
        if mean.shape != (self.config.in_dim,) or std.shape != (self.config.in_dim,):
            raise ValueError(f"feature statistics must have length {self.config.in_dim}")
        self.feature_mean, self.feature_std = mean, np.where(std > 0, std, 1.0).astype(np.float32)

    def standardize(self, features):
        x = np.asarray(features)
        return ((x - self.feature_mean) / self.feature_std).astype(ad.get_dtype())

    def __call__(self, x):
        return forward(self, x)

    def predict_logits(self, features):
        """Standardize raw features (B, T, in_dim) and return logits as an array."""
        return forward(self, self.standardize(features)).data


def forward(model: PipmnModel, x) -> Tensor:
    """(B, T, in_dim) standardized features -> (B, num_classes) logits."""
    cfg = model.config
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != cfg.in_dim:
        raise ad.ShapeError(f"expected input (B, T, {cfg.in_dim}) with in_dim={cfg.in_dim}, got {x.shape}")
    if x.shape[1] < cfg.time_length:
        raise ad.ShapeError(f"input has {x.shape[1]} frames, fewer than time_length={cfg.time_length}")
    h = ad.adaptive_avg_pool_time(x, cfg.time_length)
    outs = []
    total = len(model.stages)
    for i, stage in enumerate(model.stages, start=1):
        h = dense_mlp(h, stage)
        j = total + 1 - i  # partner of stage i when i is the second of a pair
        if model.rhos and i > j:
            h = ad.scale_add(outs[j - 1], model.rhos[j - 1], h)
        outs.append(h)
    pooled = ad.mean_over_time(h)
    return ad.linear(pooled, model.head_w, model.head_b)


def build_variant(cfg: PipConfig, seed=0) -> PipmnModel:
    cfg.validate()
    return PipmnModel(cfg, seed=seed)


def param_count(model: PipmnModel):
    """(total, breakdown) where breakdown maps stage/skip/head groups to counts."""
    breakdown = {}
    for p in model.parameters():
        if not p.trainable:
            continue
        group = p.name.split(".")[0]
        breakdown[group] = breakdown.get(group, 0) + p.data.size
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# checkpoints

PIPC_MAGIC = b"PIPC"
PIPC_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PipmnModel, path, extra=None) -> None:
    """Write ``PIPC`` | u32 version | u32 header length | JSON header | float32 blobs."""
    directory, blobs, offset = [], [], 0
    for p in model.parameters():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": model.config.to_dict(),
        "feature_mean": [float(v) for v in model.feature_mean],
        "feature_std": [float(v) for v in model.feature_std],
        "parameters": directory,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PIPC_MAGIC + struct.pack("<II", PIPC_VERSION, len(hbytes)) + hbytes)
        fh.write(b"".join(blobs))


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PIPC_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not a PIPC checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != PIPC_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated JSON header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt JSON header ({exc})") from None
    return header, raw[12 + hlen:]


def load_checkpoint(path):
    """Rebuild the model described by the header and fill in its weights.

    Returns ``(model, extra)``.
    """
    header, payload = read_checkpoint_header(path)
    cfg = PipConfig.from_dict(header["config"])
    model = PipmnModel(cfg)
    params = model.named_parameters()
    listed = {e["name"] for e in header["parameters"]}
    if listed != set(params):
        raise CheckpointError(f"{path}: parameter directory does not match config")
    for entry in header["parameters"]:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(f"{path}: {entry['name']} has shape {shape}, config implies {p.shape}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated parameter data for {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        p.data = arr.astype(ad.get_dtype())
    model.set_feature_stats(header["feature_mean"], header["feature_std"])
    return model, header.get("extra", {})
