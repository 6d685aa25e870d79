"""Two-branch transformer encoder producing simplex embeddings.

The temporal branch treats the L keystrokes as tokens; the channel branch
transposes the input so the 5 feature channels become tokens. Both branches
replace sinusoidal positions with a Gaussian range encoding: positions are
scored under G learnable Gaussians, the per-position PDF vector is
L1-normalised, and the result mixes a learnable range-embedding table.
Each encoder layer is multi-head self-attention followed by a multi-scale
convolution stack, each sub-layer wrapped in residual Add & Norm. A two-layer
wide-kernel convolution head with full-length max pooling reduces each branch
to one vector; the concatenation feeds a linear + softmax head, so embeddings
live on the probability simplex and are compared by Euclidean distance.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import FeatureSequence
from .errors import ConfigError, ContractError, DimensionError
from .tensor import RngState, Tensor

STD_FLOOR = 1e-3


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-scale model."""

    L: int = 50                 # sequence length (keystrokes per input)
    C: int = 5                  # feature channels per keystroke
    G: int = 20                 # Gaussian ranges (temporal branch)
    N: int = 10                 # temporal encoder layers
    H: int = 1                  # channel encoder layers
    F_t: int = 10               # temporal attention heads
    F_c: int = 5                # channel attention heads
    d_model: int = 50
    msc_kernels: Tuple[int, ...] = (1, 3, 5)
    msc_dropout: float = 0.1
    head_kernels: Tuple[int, ...] = (128, 32)
    head_dropout: float = 0.5
    S: int = 64                 # embedding size
    G_channel: Optional[int] = None  # None = share G with the temporal branch

    def validate(self) -> None:
        if self.d_model % self.F_t or self.d_model % self.F_c:
            raise ConfigError(
                f"d_model={self.d_model} must be divisible by F_t={self.F_t} "
                f"and F_c={self.F_c}")
        for p in (self.msc_dropout, self.head_dropout):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout rate {p} outside [0, 1)")
        if min(self.G, self.channel_ranges) < 1:
            raise ConfigError("G must be >= 1 on both branches")
        if any(k < 1 for k in tuple(self.msc_kernels) + tuple(self.head_kernels)):
            raise ConfigError("kernel sizes must be >= 1")
        if min(self.L, self.C, self.N, self.H, self.F_t, self.F_c,
               self.d_model, self.S) < 1:
            raise ConfigError("all size parameters must be >= 1")

    @property
    def channel_ranges(self) -> int:
        return self.G if self.G_channel is None else self.G_channel

    def to_dict(self) -> dict:
        d = {k: v for k, v in vars(self).items()}
        d["msc_kernels"] = list(self.msc_kernels)
        d["head_kernels"] = list(self.head_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["msc_kernels"] = tuple(d.get("msc_kernels", (1, 3, 5)))
        d["head_kernels"] = tuple(d.get("head_kernels", (128, 32)))
        return cls(**d)


def shape_manifest(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Deterministic (name, shape) list of every learnable tensor."""
    cfg.validate()
    d = cfg.d_model
    entries: List[Tuple[str, Tuple[int, ...]]] = []
    entries.append(("temporal.in_proj.w", (cfg.C, d)))
    entries.append(("temporal.in_proj.b", (d,)))
    if d != cfg.L:
        # channel tokens are rows of the transposed input (width L); they
        # only need a projection when the module width differs from L
        entries.append(("channel.in_proj.w", (cfg.L, d)))
        entries.append(("channel.in_proj.b", (d,)))
    for branch, G, layers in (("temporal", cfg.G, cfg.N),
                              ("channel", cfg.channel_ranges, cfg.H)):
        entries.append((f"{branch}.enc.means", (G,)))
        entries.append((f"{branch}.enc.stds", (G,)))
        entries.append((f"{branch}.enc.emb", (G, d)))
        for i in range(layers):
            p = f"{branch}.layer{i}"
            for name in ("wq", "wk", "wv", "wo"):
                entries.append((f"{p}.attn.{name}", (d, d)))
            for name in ("bq", "bk", "bv", "bo"):
                entries.append((f"{p}.attn.{name}", (d,)))
            for k in cfg.msc_kernels:
                entries.append((f"{p}.msc.conv{k}.w", (d, d, k)))
                entries.append((f"{p}.msc.conv{k}.b", (d,)))
            entries.append((f"{p}.msc.norm.g", (d,)))
            entries.append((f"{p}.msc.norm.b", (d,)))
            entries.append((f"{p}.norm1.g", (d,)))
            entries.append((f"{p}.norm1.b", (d,)))
            entries.append((f"{p}.norm2.g", (d,)))
            entries.append((f"{p}.norm2.b", (d,)))
        for j, k in enumerate(cfg.head_kernels):
            entries.append((f"{branch}.head.conv{j}.w", (d, d, k)))
            entries.append((f"{branch}.head.conv{j}.b", (d,)))
    entries.append(("out.w", (2 * d, cfg.S)))
    entries.append(("out.b", (cfg.S,)))
    return entries


class ModelWeights:
    """Named parameter tensors; shapes are fully determined by the config."""

    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self._tensors.items()]

    def set_requires_grad(self, flag: bool) -> None:
        for t in self._tensors.values():
            t.requires_grad = flag

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {
            n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for n, t in self._tensors.items()})

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for n, t in self._tensors.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        for name, t in self._tensors.items():
            if not np.isfinite(t.data).all():
                raise ContractError(f"weight tensor {name} contains non-finite values")


def _softplus_inv(y: float) -> float:
    # inverse of log(1 + e^x); y must be positive
    return y + math.log(-math.expm1(-y)) if y > 0 else -math.inf


def init_weights(cfg: ModelConfig, rng: RngState) -> ModelWeights:
    """Uniform(+-sqrt(1/fan_in)) for linear/conv weights, zero biases.

    Gaussian range means start evenly spaced over [0, length-1] with
    effective stds of length/(2G); range embeddings use the uniform rule
    with fan_in = G.
    """
    cfg.validate()
    tensors: Dict[str, Tensor] = {}
    for name, shape in shape_manifest(cfg):
        branch = name.split(".", 1)[0]
        length = cfg.L if branch == "temporal" else cfg.C
        if name.endswith(".enc.means"):
            data = np.linspace(0.0, length - 1, shape[0])
        elif name.endswith(".enc.stds"):
            sigma = length / (2.0 * shape[0])
            data = np.full(shape, _softplus_inv(max(sigma - STD_FLOOR, 1e-8)))
        elif name.endswith(".g"):          # norm gains
            data = np.ones(shape)
        elif len(shape) == 1:              # every bias and norm shift
            data = np.zeros(shape)
        else:
            if len(shape) == 3:
                fan_in = shape[1] * shape[2]   # conv: c_in * k
            else:
                fan_in = shape[0]              # linear: x @ w convention
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, shape)
        tensors[name] = Tensor(np.asarray(data), dtype=T.default_dtype())
    return ModelWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# forward blocks


def effective_stds(stds_raw: Tensor) -> Tensor:
    """Positivity transform: softplus with a floor, so PDFs never collapse."""
    return T.softplus(stds_raw) + STD_FLOOR


def gaussian_pdf_matrix(means: Tensor, stds_raw: Tensor, length: int) -> Tensor:
    """length x G matrix of L1-normalised Gaussian PDF responses.

    Normalising positive PDF values row-wise equals a softmax over their
    logs, so the matrix is built in the log domain; rows then sum to 1 even
    when sharp Gaussians sit far from a position and the raw PDFs underflow.
    """
    if length < 1:
        raise ContractError(f"encoding length must be >= 1, got {length}")
    dtype = means.dtype
    pos = Tensor(np.arange(length, dtype=dtype).reshape(length, 1))
    sigma = effective_stds(stds_raw)
    z = T.div(T.sub(pos, means), sigma)
    log_pdf = T.sub(T.scale(T.square(z), -0.5), T.log(sigma))
    return T.softmax(log_pdf, axis=1)


def gaussian_range_encode(means: Tensor, stds_raw: Tensor, emb: Tensor,
                          length: int) -> Tensor:
    """Mix the normalised PDF rows with the range-embedding table."""
    return T.matmul(gaussian_pdf_matrix(means, stds_raw, length), emb)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # collapse leading axes so BLAS sees one big matmul
    if x.ndim == 2:
        return T.add(T.matmul(x, w), b)
    lead = x.shape[:-1]
    flat = T.reshape(x, (-1, x.shape[-1]))
    return T.reshape(T.add(T.matmul(flat, w), b), lead + (w.shape[1],))


def multi_head_attention(x: Tensor, weights: ModelWeights, prefix: str,
                         heads: int) -> Tensor:
    """Scaled dot-product self-attention over the token axis, no masking.

    ``x`` is (B, T, d); per head h the output rows are
    softmax(Q_h K_h^T / sqrt(d_h)) V_h, heads concatenated then projected.
    """
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    B, tok = x.shape[0], x.shape[1]

    def split_heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, tok, heads, dh)), (0, 2, 1, 3))

    q = split_heads(_linear(x, weights[f"{prefix}.wq"], weights[f"{prefix}.bq"]))
    k = split_heads(_linear(x, weights[f"{prefix}.wk"], weights[f"{prefix}.bk"]))
    v = split_heads(_linear(x, weights[f"{prefix}.wv"], weights[f"{prefix}.bv"]))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = T.softmax(scores, axis=-1)
    ctx = T.matmul(att, v)                                   # (B, F, T, dh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, tok, d))
    return _linear(ctx, weights[f"{prefix}.wo"], weights[f"{prefix}.bo"])


def multi_scale_cnn(x: Tensor, weights: ModelWeights, prefix: str,
                    kernels: Sequence[int], dropout: float, training: bool,
                    rng: Optional[RngState] = None, normalize: bool = True) -> Tensor:
    """Parallel same-padding convolutions at several kernel sizes.

    Branch outputs pass ReLU and are summed, keeping the module width, then
    normalised over the feature axis and dropped out. ``normalize=False`` is
    a test hook that bypasses the normalisation stage.
    """
    xt = T.transpose(x)                                      # (B, d, T)
    total = None
    for k in kernels:
        y = T.relu(T.conv1d(xt, weights[f"{prefix}.conv{k}.w"],
                            weights[f"{prefix}.conv{k}.b"]))
        total = y if total is None else T.add(total, y)
    out = T.transpose(total)
    if normalize:
        out = T.layer_norm(out, weights[f"{prefix}.norm.g"], weights[f"{prefix}.norm.b"])
    return T.dropout(out, dropout, training, rng)


def encoder_layer(x: Tensor, weights: ModelWeights, prefix: str, heads: int,
                  cfg: ModelConfig, training: bool,
                  rng: Optional[RngState] = None) -> Tensor:
    """Attention and multi-scale CNN sub-layers, each with residual Add & Norm."""
    y = T.layer_norm(T.add(x, multi_head_attention(x, weights, f"{prefix}.attn", heads)),
                     weights[f"{prefix}.norm1.g"], weights[f"{prefix}.norm1.b"])
    z = T.layer_norm(T.add(y, multi_scale_cnn(y, weights, f"{prefix}.msc",
                                              cfg.msc_kernels, cfg.msc_dropout,
                                              training, rng)),
                     weights[f"{prefix}.norm2.g"], weights[f"{prefix}.norm2.b"])
    return z


def _branch_head(x: Tensor, weights: ModelWeights, branch: str, cfg: ModelConfig,
                 training: bool, rng: Optional[RngState]) -> Tensor:
    """Wide-kernel conv stack + full-length max pooling -> (B, d) vector."""
    h = T.transpose(x)                                       # (B, d, T)
    for j in range(len(cfg.head_kernels)):
        h = T.relu(T.conv1d(h, weights[f"{branch}.head.conv{j}.w"],
                            weights[f"{branch}.head.conv{j}.b"]))
        h = T.dropout(h, cfg.head_dropout, training, rng)
    return T.max_pool1d(h)


def embed_batch(weights: ModelWeights, x: Tensor, training: bool = False,
                rng: Optional[RngState] = None) -> Tensor:
    """Embed a batch of feature sequences: (B, L, C) -> (B, S) on the simplex.

    Zero-padded rows participate as ordinary tokens; there is no attention
    masking. In inference mode the function is pure: same weights and input
    give identical output.
    """
    cfg = weights.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=T.default_dtype())
    if x.ndim != 3 or x.shape[1] != cfg.L or x.shape[2] != cfg.C:
        raise ContractError(
            f"expected input (B, {cfg.L}, {cfg.C}), got {x.shape}")
    if training and rng is None:
        raise ContractError("training-mode forward requires an RngState for dropout")

    # temporal branch: keystrokes are tokens
    t = _linear(x, weights["temporal.in_proj.w"], weights["temporal.in_proj.b"])
    t = T.add(t, gaussian_range_encode(weights["temporal.enc.means"],
                                       weights["temporal.enc.stds"],
                                       weights["temporal.enc.emb"], cfg.L))
    for i in range(cfg.N):
        t = encoder_layer(t, weights, f"temporal.layer{i}", cfg.F_t, cfg, training, rng)
    t_vec = _branch_head(t, weights, "temporal", cfg, training, rng)

    # channel branch: feature channels are tokens
    c = T.transpose(x, (0, 2, 1))                            # (B, C, L)
    if "channel.in_proj.w" in weights:
        c = _linear(c, weights["channel.in_proj.w"], weights["channel.in_proj.b"])
    c = T.add(c, gaussian_range_encode(weights["channel.enc.means"],
                                       weights["channel.enc.stds"],
                                       weights["channel.enc.emb"], cfg.C))
    for i in range(cfg.H):
        c = encoder_layer(c, weights, f"channel.layer{i}", cfg.F_c, cfg, training, rng)
    c_vec = _branch_head(c, weights, "channel", cfg, training, rng)

    combined = T.concat([t_vec, c_vec], axis=-1)             # (B, 2d)
    logits = _linear(combined, weights["out.w"], weights["out.b"])
    return T.softmax(logits, axis=-1)


def forward_embed(weights: ModelWeights, fs: FeatureSequence | np.ndarray,
                  training: bool = False, rng: Optional[RngState] = None) -> np.ndarray:
    """Embed a single feature sequence; returns an S-vector on the simplex."""
    values = fs.values if isinstance(fs, FeatureSequence) else np.asarray(fs)
    if values.shape != (weights.config.L, weights.config.C):
        raise ContractError(
            f"expected ({weights.config.L}, {weights.config.C}) input, got {values.shape}")
    if training:
        return embed_batch(weights, values[None], training=True, rng=rng).data[0]
    with T.no_grad():
        return embed_batch(weights, Tensor(values[None], dtype=T.default_dtype())).data[0]


def embed_sessions(weights: ModelWeights, seqs: Sequence[FeatureSequence],
                   batch_size: int = 256) -> np.ndarray:
    """Inference embeddings for many sequences, batched for throughput."""
    out = np.zeros((len(seqs), weights.config.S), dtype=T.default_dtype())
    with T.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo:lo + batch_size]
            x = np.stack([fs.values for fs in chunk]).astype(T.default_dtype())
            out[lo:lo + len(chunk)] = embed_batch(weights, Tensor(x)).data
    return out


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two embeddings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a - b) ** 2).sum()))


def is_simplex(v: np.ndarray, tol: float = 1e-5) -> bool:
    v = np.asarray(v)
    return bool((v >= 0).all() and abs(float(v.sum()) - 1.0) <= tol)
